#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "caselab/backbone.hpp"

namespace caselab {

// Snapshot of the thread-local kernel counters. macs counts multiply-
// accumulates inside matrix products; pointwise counts lone elementwise
// multiplies (channel scaling, normalization), which back the secondary
// flops column and are excluded from MACs.
struct MacProbe {
  uint64_t macs = 0;
  uint64_t pointwise = 0;
};

MacProbe read_mac_probe();
void reset_mac_probe();

enum class CostPhase {
  kContextForward,
  kHeadFit,
  kBodyFinetune,
  kTargetInference,
};

const char* cost_phase_name(CostPhase p);

struct LayerCost {
  CostPhase phase = CostPhase::kContextForward;
  std::string name;
  int64_t macs = 0;
  int64_t flops_pointwise = 0;
};

// Task the analytic model is priced against. resolution 0 inherits the
// backbone's input resolution; head_steps/head_batch drive both the head
// fit and the fine-tuning loop so strategies are compared at equal steps.
struct SyntheticCostTask {
  int way = 100;
  int shot = 10;
  int resolution = 0;
  int head_steps = 500;
  int head_batch = 128;

  void validate() const;
};

enum class Strategy { kUppercase, kHeadOnly, kFullFinetune, kFilmLite };

const char* strategy_name(Strategy s);
Strategy parse_strategy(const std::string& s);

// Exact integer cost of adapting to one task and classifying one target
// image. Conventions: backward passes cost 2x the forward MACs wherever a
// training loop runs; elementwise scaling costs 0 MACs (tracked in the
// flops column instead); adapter generators run once per task, never per
// instance; target inference reuses cached modulation.
struct CostReport {
  Strategy strategy = Strategy::kUppercase;
  int64_t macs_context_forward = 0;
  int64_t macs_head_fit = 0;
  int64_t macs_body_finetune = 0;
  int64_t macs_target_inference = 0;
  int64_t params_total = 0;
  int64_t params_adaptive = 0;
  std::vector<LayerCost> breakdown;

  // Spent before the first target prediction (the "cost to adapt").
  int64_t total_adaptation_macs() const;
  int64_t phase_macs(CostPhase p) const;
  int64_t phase_pointwise(CostPhase p) const;
  // Phase totals must equal their breakdown sums; everything non-negative.
  void validate() const;
};

struct LayerDesc {
  std::string kind;      // conv | linear | pool | activation | batchnorm | scale
  int out_channels = 0;  // conv
  int kernel = 1;        // conv
  int stride = 1;        // conv
  int padding = 0;       // conv
  int out_features = 0;  // linear
};

// MACs of one layer application to an input of the given shape. conv wants
// [n, c, h, w], linear wants [n, in]; pool/activation/batchnorm/scale count
// zero under the strict multiply-accumulate definition.
int64_t macs_of_layer(const LayerDesc& desc, const std::vector<int>& input_shape);

// Parameter counts are learnable tensors only; batchnorm running statistics
// are excluded. adapter_cfg sizes the adapter MLPs exactly as attach_adapters
// would.
CostReport adaptation_cost(Strategy strategy, const BackboneSpec& spec,
                           const SyntheticCostTask& task,
                           const CaseConfig& adapter_cfg = {});

struct ParetoRow {
  std::string strategy;
  double accuracy = 0.0;
  int64_t macs = 0;
  int64_t params_adaptive = 0;
};

void write_pareto_csv(std::ostream& os, const std::vector<ParetoRow>& rows);

// MACs rendered in teras (1e12) with one decimal.
std::string tera_macs(int64_t macs);

// Methodology note for the top of cost reports.
const char* cost_report_caveat();

}  // namespace caselab
