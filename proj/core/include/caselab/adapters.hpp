#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "caselab/tape.hpp"
#include "caselab/tensor.hpp"

namespace caselab {

enum class HiddenAct { kSilu, kRelu, kTanh };
enum class OutputAct { kSigmoid2, kSigmoid, kLinear };
enum class AdapterMode { kAdaptive, kInference };

const char* hidden_act_name(HiddenAct a);
const char* output_act_name(OutputAct a);
HiddenAct parse_hidden_act(const std::string& s);
OutputAct parse_output_act(const std::string& s);

struct CaseConfig {
  int reduction = 64;
  int min_units = 16;
  int hidden_layers = 2;
  HiddenAct hidden_activation = HiddenAct::kSilu;
  OutputAct output_activation = OutputAct::kSigmoid2;
  bool standardize = true;
  // The constant multiplying the sigmoid under output_activation=sigmoid2;
  // 2 makes the zeroed last layer an exact identity (2 * sigmoid(0) = 1).
  float sigmoid_scale = 2.f;
  float std_eps = 1e-5f;

  int hidden_width(int channels) const;
};

// Shared bottleneck MLP: hidden_layers hidden linears with hidden_activation,
// then an output linear followed by output_activation. The output layer is
// initialized so the whole block starts as an identity (see init_identity).
class AdapterMlp {
 public:
  AdapterMlp() = default;
  // last_bias overrides the output bias used for identity init (defaults:
  // zeros for sigmoid2/sigmoid, ones for linear).
  static AdapterMlp build(int in_dim, int hidden, int out_dim,
                          const CaseConfig& cfg, uint64_t seed,
                          const std::vector<float>* last_bias = nullptr);

  Var apply(Tape& t, Var x);
  NamedTensors params(const std::string& prefix);
  int64_t param_count() const;
  int out_dim() const;
  int num_linears() const { return static_cast<int>(ws_.size()); }

 private:
  std::vector<Tensor> ws_;
  std::vector<Tensor> bs_;
  HiddenAct hact_ = HiddenAct::kSilu;
  OutputAct oact_ = OutputAct::kSigmoid2;
  float sigmoid_scale_ = 2.f;
};

// Per-task channel scaling: one gamma computed from the pooled context
// statistics in adaptive mode, transferred to any number of target batches in
// inference mode without re-evaluating the MLP.
class CaseBlock {
 public:
  CaseBlock(int channels, const CaseConfig& cfg, uint64_t seed);

  // Adaptive: pools the batch as one context, refreshes cached_gamma.
  // Inference: applies cached_gamma; error if the cache is missing.
  Var apply(Tape& t, Var x);

  // Switching to adaptive invalidates the cache; using a stale cache is an
  // error, never a silent reuse.
  void set_mode(AdapterMode m);
  AdapterMode mode() const { return mode_; }
  bool has_cache() const { return cached_.has_value(); }
  const Tensor& cached_gamma() const;
  uint64_t mlp_evaluations() const { return mlp_evals_; }
  int channels() const { return channels_; }
  const CaseConfig& config() const { return cfg_; }
  NamedTensors params(const std::string& prefix) { return mlp_.params(prefix); }
  int64_t param_count() const { return mlp_.param_count(); }

 private:
  int channels_;
  CaseConfig cfg_;
  AdapterMlp mlp_;
  AdapterMode mode_ = AdapterMode::kAdaptive;
  std::optional<Tensor> cached_;
  uint64_t mlp_evals_ = 0;
};

// Standard squeeze-and-excitation: one gamma per instance, never cached,
// never standardized.
class SeBlock {
 public:
  SeBlock(int channels, CaseConfig cfg, uint64_t seed);

  Var apply(Tape& t, Var x);
  uint64_t mlp_evaluations() const { return mlp_evals_; }
  int channels() const { return channels_; }
  const CaseConfig& config() const { return cfg_; }
  NamedTensors params(const std::string& prefix) { return mlp_.params(prefix); }
  int64_t param_count() const { return mlp_.param_count(); }

 private:
  int channels_;
  CaseConfig cfg_;
  AdapterMlp mlp_;
  uint64_t mlp_evals_ = 0;
};

struct FilmLayerMod {
  Var scale;
  Var shift;
};

// FiLM-style baseline generator: a small convolutional set encoder pools the
// context images into one embedding; per-layer MLPs map that embedding to
// (scale, shift) pairs. Output activation is linear with identity init
// (scales start at 1, shifts at 0).
class FilmLiteGenerator {
 public:
  FilmLiteGenerator(std::vector<int> layer_channels, int input_channels,
                    const CaseConfig& cfg, uint64_t seed);

  // Encoder + every layer MLP on the tape; refreshes the cache.
  std::vector<FilmLayerMod> adapt(Tape& t, Var context_images);
  // Cached modulation re-entered as constants (inference path).
  FilmLayerMod cached_mod(Tape& t, int layer) const;
  bool has_cache() const { return !cached_.empty(); }
  void invalidate() { cached_.clear(); }
  const std::vector<std::pair<Tensor, Tensor>>& cached() const { return cached_; }

  int num_layers() const { return static_cast<int>(layer_channels_.size()); }
  int embedding_dim() const { return enc_out_channels_; }
  NamedTensors params(const std::string& prefix);
  int64_t param_count() const;
  int64_t encoder_param_count() const;
  uint64_t mlp_evaluations() const { return mlp_evals_; }

 private:
  std::vector<int> layer_channels_;
  int enc_out_channels_ = 32;
  Tensor enc_w1_, enc_b1_, enc_w2_, enc_b2_;
  std::vector<AdapterMlp> mlps_;
  std::vector<std::pair<Tensor, Tensor>> cached_;
  uint64_t mlp_evals_ = 0;
};

int64_t count_adapter_params(const std::vector<CaseBlock>& blocks);
int64_t count_adapter_params(const std::vector<SeBlock>& blocks);
int64_t count_adapter_params(const FilmLiteGenerator& gen);

}  // namespace caselab
