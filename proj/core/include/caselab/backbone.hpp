#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "caselab/adapters.hpp"
#include "caselab/episodes.hpp"
#include "caselab/tape.hpp"
#include "caselab/tensor.hpp"

namespace caselab {

enum class Activation { kSilu, kRelu };

struct StageSpec {
  int out_channels = 0;
  int kernel = 3;
  int stride = 2;
  bool insert_adapter = false;
};

struct BackboneSpec {
  std::vector<StageSpec> stages;
  int input_channels = 3;
  int input_resolution = 32;
  Activation activation = Activation::kSilu;

  // 4 stages (32, 64, 128, 256), 3x3 stride 2, adapters after stages 2-4
  // (never the first), global average pool to a 256-d embedding.
  static BackboneSpec desk_default();

  int embedding_dim() const;
  // Spatial side length after each stage; padding is kernel/2.
  std::vector<int> stage_dims() const;
  int num_adapter_slots() const;
  void validate() const;
};

enum class AdapterKind { kNone, kCase, kSe, kFilm };

const char* adapter_kind_name(AdapterKind k);
AdapterKind parse_adapter_kind(const std::string& s);

// How adapters participate in a forward pass.
enum class AdapterUse { kDisabled, kAdaptive, kInference };

struct GammaRow {
  int block_index = 0;
  int stage_index = 0;
  int channels = 0;
  int64_t count = 0;
  float median = 0.f;
  float q1 = 0.f;
  float q3 = 0.f;
  float whisker_lo = 0.f;
  float whisker_hi = 0.f;
  int64_t outliers = 0;
};

// Convolutional body: per stage conv -> batchnorm -> activation -> adapter.
// After pretraining, theta (conv + batchnorm tensors) is frozen; adapter
// parameters are the only trainable tensors left in the body.
class Backbone {
 public:
  static Backbone build(const BackboneSpec& spec, uint64_t seed);

  // Replaces any current adapters with freshly initialized ones.
  void attach_adapters(AdapterKind kind, const CaseConfig& cfg, uint64_t seed);

  // images [n, ch, H, W] -> embeddings [n, embedding_dim]. Batchnorm always
  // uses frozen running statistics here; only pretraining uses batch stats.
  Var forward(Tape& t, Var images, AdapterUse use);
  // Batch-statistics batchnorm, no adapters; appends each batchnorm node to
  // bn_nodes so the caller can fold batch stats into the running estimates.
  Var forward_pretrain(Tape& t, Var images, std::vector<Var>* bn_nodes);

  // Convenience wrappers building a private tape.
  Tensor embed(const Tensor& images, AdapterUse use);

  const BackboneSpec& spec() const { return spec_; }
  AdapterKind adapter_kind() const { return adapter_kind_; }
  const CaseConfig& adapter_config() const { return adapter_cfg_; }

  std::vector<CaseBlock>& case_blocks() { return case_blocks_; }
  std::vector<SeBlock>& se_blocks() { return se_blocks_; }
  FilmLiteGenerator* film() { return film_ ? film_.get() : nullptr; }

  // All body tensors (conv weights, batchnorm affine + running stats) under
  // names "backbone/<stage>/<param>".
  NamedTensors theta_params();
  // The subset of theta that takes gradients during pretraining.
  NamedTensors theta_trainable_params();
  // Adapter tensors under names "adapter/<layer_index>/<param>".
  NamedTensors adapter_params();
  int64_t adapter_param_count() const;

  std::vector<float> theta_snapshot() const;
  void freeze_theta();
  // Re-enables gradients on conv and batchnorm affine tensors. Running
  // statistics stay gradient-free. Meant for fine-tuning baselines working on
  // a clone(), never on the shared pretrained body.
  void unfreeze_theta();
  bool theta_frozen() const { return frozen_; }

  // Deep copy with a fresh evaluation counter.
  Backbone clone() const;

  void update_bn_stats(int stage, const std::vector<float>& batch_mean,
                       const std::vector<float>& batch_var, float momentum);

  // Instance forwards performed so far (n per forward call).
  uint64_t eval_count() const { return eval_count_; }

 private:
  struct Stage {
    StageSpec cfg;
    Tensor conv_w, conv_b;
    Tensor bn_gamma, bn_beta, bn_mean, bn_var;
    int adapter_slot = -1;
  };

  BackboneSpec spec_;
  std::vector<Stage> stages_;
  AdapterKind adapter_kind_ = AdapterKind::kNone;
  CaseConfig adapter_cfg_;
  std::vector<CaseBlock> case_blocks_;
  std::vector<SeBlock> se_blocks_;
  std::unique_ptr<FilmLiteGenerator> film_;
  bool frozen_ = false;
  uint64_t eval_count_ = 0;
};

struct PretrainResult {
  Backbone backbone;
  float final_loss = 0.f;
  float final_accuracy = 0.f;
};

struct PretrainConfig {
  int epochs = 3;
  int batch_size = 64;
  float lr = 1e-3f;
};

// Supervised pretraining on the base dataset; returns the backbone with theta
// and batchnorm statistics frozen. Divergence (non-finite loss) aborts.
PretrainResult pretrain(const BackboneSpec& spec, const BaseDataset& base,
                        const PretrainConfig& cfg, uint64_t seed);

// Pools gamma entries over the given tasks' contexts (adaptive mode) and
// reports per-block quartiles under the linear-interpolation convention plus
// 1.5*IQR whiskers.
std::vector<GammaRow> dump_gamma_stats(Backbone& backbone,
                                       const std::vector<Task>& tasks);

// Quantile with linear interpolation between order statistics; data need not
// be sorted.
float quantile_linear(std::vector<float> data, double p);

}  // namespace caselab
