#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "caselab/backbone.hpp"
#include "caselab/cost.hpp"
#include "caselab/episodes.hpp"
#include "caselab/trainer.hpp"

namespace caselab {

// Everything a run needs, flattened to `section.key = value` lines. The
// backbone is described by uniform per-stage knobs (channel list plus one
// kernel/stride pair) rather than per-stage records; heterogeneous stages
// stay available through the BackboneSpec API directly.
struct RunConfig {
  uint64_t seed = 90210;
  std::string out_dir = "runs/out";
  std::string checkpoint;  // empty: command-specific default under out_dir

  std::vector<int> stage_channels = {32, 64, 128, 256};
  int kernel = 3;
  int stride = 2;
  std::vector<int> adapter_stages = {1, 2, 3};
  int input_channels = 3;
  int input_resolution = 32;
  Activation activation = Activation::kSilu;

  AdapterKind adapter_kind = AdapterKind::kCase;
  CaseConfig adapter;

  int pretrain_instances_per_class = 64;
  PretrainConfig pretrain;

  SamplerConfig sampler;
  TrainerConfig trainer;
  BaselineConfig baseline;

  int eval_num_tasks = 600;
  int ablate_train_tasks = 200;
  int ablate_eval_tasks = 50;
  int gamma_num_tasks = 20;
  SyntheticCostTask cost;

  // Stage records assembled from the flat backbone fields; throws
  // ConfigError on out-of-range adapter stage indices.
  BackboneSpec backbone_spec() const;
  void validate() const;
};

// Strict line-oriented parser: blank lines and full-line # comments are
// skipped, everything else must be `key = value` with a known key, each key
// at most once. Errors carry 1-based line numbers.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);

// Fully resolved, reparseable echo of every key; parse(echo(c)) == c and
// the echo of that parse is byte-identical.
std::string echo_run_config(const RunConfig& cfg);
void write_run_config(const std::string& path, const RunConfig& cfg);

}  // namespace caselab
