#include "caselab/cost.hpp"

#include <cstdio>
#include <ostream>
#include <string>

#include "caselab/errors.hpp"
#include "kernels.hpp"

namespace caselab {

namespace {

int64_t i64(int v) { return static_cast<int64_t>(v); }

int conv_out_side(int side, int kernel, int stride, int padding) {
  return (side + 2 * padding - kernel) / stride + 1;
}

struct StageGeom {
  int in_channels = 0;
  int in_side = 0;
  int out_channels = 0;
  int out_side = 0;
  int kernel = 0;
  bool adapter = false;
};

std::vector<StageGeom> stage_geometry(const BackboneSpec& spec, int resolution) {
  std::vector<StageGeom> geom;
  int side = resolution;
  int channels = spec.input_channels;
  for (size_t i = 0; i < spec.stages.size(); ++i) {
    const StageSpec& s = spec.stages[i];
    StageGeom g;
    g.in_channels = channels;
    g.in_side = side;
    g.out_channels = s.out_channels;
    g.out_side = conv_out_side(side, s.kernel, s.stride, s.kernel / 2);
    g.kernel = s.kernel;
    g.adapter = s.insert_adapter;
    if (g.out_side < 1)
      throw ShapeError("stage " + std::to_string(i) + " collapses a " +
                       std::to_string(side) + "px input");
    geom.push_back(g);
    side = g.out_side;
    channels = s.out_channels;
  }
  return geom;
}

int64_t conv_macs_per_instance(const StageGeom& g) {
  return i64(g.out_channels) * g.out_side * g.out_side * g.in_channels *
         g.kernel * g.kernel;
}

struct MlpCost {
  int64_t macs = 0;
  int64_t pointwise = 0;
};

// One generator MLP applied to `rows` pooled rows. The output activation is
// passed explicitly because the film generator forces a linear output
// regardless of the shared adapter config.
MlpCost adapter_mlp_cost(int64_t rows, int in_dim, int hidden, int out_dim,
                         const CaseConfig& cfg, OutputAct output) {
  MlpCost c;
  int64_t h = hidden;
  c.macs = rows * (h * in_dim + (cfg.hidden_layers - 1) * h * h + out_dim * h);
  if (cfg.hidden_activation == HiddenAct::kSilu)
    c.pointwise += rows * cfg.hidden_layers * h;
  if (output == OutputAct::kSigmoid2) c.pointwise += rows * out_dim;
  return c;
}

int64_t adapter_mlp_params(int in_dim, int hidden, int out_dim,
                           int hidden_layers) {
  int64_t h = hidden;
  return (h * in_dim + h) + (hidden_layers - 1) * (h * h + h) +
         (i64(out_dim) * h + out_dim);
}

int64_t body_param_count(const std::vector<StageGeom>& geom) {
  int64_t total = 0;
  for (const StageGeom& g : geom) {
    total += i64(g.out_channels) * g.in_channels * g.kernel * g.kernel;  // w
    total += g.out_channels;                                             // b
    total += 2 * i64(g.out_channels);  // batchnorm affine
  }
  return total;
}

std::string stage_prefix(size_t i) { return "stage" + std::to_string(i); }

// conv/batchnorm/activation rows for `instances` forward passes through the
// body. grad_factor 1 prices pure forwards; 3 adds the 2x-forward backward
// convention to every multiply-accumulate row (pointwise rows stay forward
// only: the backward loops do no fresh elementwise multiplies worth a MAC).
void body_rows(std::vector<LayerCost>& out, CostPhase phase,
               const std::vector<StageGeom>& geom, Activation act,
               int64_t instances, int64_t grad_factor) {
  for (size_t i = 0; i < geom.size(); ++i) {
    const StageGeom& g = geom[i];
    int64_t spatial = i64(g.out_channels) * g.out_side * g.out_side;
    out.push_back({phase, stage_prefix(i) + "/conv",
                   grad_factor * instances * conv_macs_per_instance(g), 0});
    out.push_back({phase, stage_prefix(i) + "/batchnorm", 0,
                   instances * spatial});
    out.push_back({phase, stage_prefix(i) + "/activation", 0,
                   act == Activation::kSilu ? instances * spatial : 0});
  }
}

// Per-task CaSE rows: each block pools its batch once, runs its MLP once,
// then scales every instance.
void case_rows(std::vector<LayerCost>& out, CostPhase phase,
               const std::vector<StageGeom>& geom, const CaseConfig& cfg,
               int64_t instances, bool adaptive) {
  for (size_t i = 0; i < geom.size(); ++i) {
    const StageGeom& g = geom[i];
    if (!g.adapter) continue;
    int c = g.out_channels;
    if (adaptive) {
      MlpCost mlp = adapter_mlp_cost(1, c, cfg.hidden_width(c), c, cfg,
                                     cfg.output_activation);
      if (cfg.standardize) mlp.pointwise += c;
      out.push_back({phase, stage_prefix(i) + "/adapter/mlp", mlp.macs,
                     mlp.pointwise});
    }
    out.push_back({phase, stage_prefix(i) + "/adapter/scale", 0,
                   instances * i64(c) * g.out_side * g.out_side});
  }
}

// Film generator rows: the set encoder sees every context image, the
// per-layer MLPs run once; target passes reuse the cached modulation.
void film_rows(std::vector<LayerCost>& out, CostPhase phase,
               const std::vector<StageGeom>& geom, const CaseConfig& cfg,
               int input_channels, int resolution, int64_t instances,
               bool adaptive) {
  if (adaptive) {
    int o1 = conv_out_side(resolution, 3, 2, 1);
    int o2 = conv_out_side(o1, 3, 2, 1);
    if (o2 < 1) throw ShapeError("film encoder collapses the input");
    out.push_back({phase, "film/encoder/conv0",
                   instances * i64(16) * o1 * o1 * input_channels * 9, 0});
    out.push_back({phase, "film/encoder/conv1",
                   instances * i64(32) * o2 * o2 * 16 * 9, 0});
  }
  for (size_t i = 0; i < geom.size(); ++i) {
    const StageGeom& g = geom[i];
    if (!g.adapter) continue;
    int c = g.out_channels;
    if (adaptive) {
      MlpCost mlp = adapter_mlp_cost(1, 32, cfg.hidden_width(c), 2 * c, cfg,
                                     OutputAct::kLinear);
      out.push_back({phase, stage_prefix(i) + "/adapter/mlp", mlp.macs,
                     mlp.pointwise});
    }
    out.push_back({phase, stage_prefix(i) + "/adapter/scale", 0,
                   instances * i64(c) * g.out_side * g.out_side});
  }
}

int64_t case_params(const std::vector<StageGeom>& geom, const CaseConfig& cfg) {
  int64_t total = 0;
  for (const StageGeom& g : geom)
    if (g.adapter)
      total += adapter_mlp_params(g.out_channels,
                                  cfg.hidden_width(g.out_channels),
                                  g.out_channels, cfg.hidden_layers);
  return total;
}

int64_t film_params(const std::vector<StageGeom>& geom, const CaseConfig& cfg,
                    int input_channels) {
  int64_t total = i64(16) * input_channels * 9 + 16;  // encoder conv 0
  total += i64(32) * 16 * 9 + 32;                     // encoder conv 1
  for (const StageGeom& g : geom)
    if (g.adapter)
      total += adapter_mlp_params(32, cfg.hidden_width(g.out_channels),
                                  2 * g.out_channels, cfg.hidden_layers);
  return total;
}

}  // namespace

MacProbe read_mac_probe() {
  const kernels::MacCounter& c = kernels::mac_counter();
  return {c.macs, c.pointwise};
}

void reset_mac_probe() {
  kernels::MacCounter& c = kernels::mac_counter();
  c.macs = 0;
  c.pointwise = 0;
}

const char* cost_phase_name(CostPhase p) {
  switch (p) {
    case CostPhase::kContextForward: return "context_forward";
    case CostPhase::kHeadFit: return "head_fit";
    case CostPhase::kBodyFinetune: return "body_finetune";
    case CostPhase::kTargetInference: return "target_inference";
  }
  throw StateError("bad cost phase");
}

void SyntheticCostTask::validate() const {
  if (way < 1) throw ConfigError("cost task: way must be >= 1");
  if (shot < 1) throw ConfigError("cost task: shot must be >= 1");
  if (resolution < 0) throw ConfigError("cost task: resolution must be >= 0");
  if (head_steps < 0) throw ConfigError("cost task: head_steps must be >= 0");
  if (head_batch < 1) throw ConfigError("cost task: head_batch must be >= 1");
}

const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kUppercase: return "uppercase";
    case Strategy::kHeadOnly: return "head_only";
    case Strategy::kFullFinetune: return "full_finetune";
    case Strategy::kFilmLite: return "film_lite";
  }
  throw StateError("bad strategy");
}

Strategy parse_strategy(const std::string& s) {
  if (s == "uppercase") return Strategy::kUppercase;
  if (s == "head_only") return Strategy::kHeadOnly;
  if (s == "full_finetune") return Strategy::kFullFinetune;
  if (s == "film_lite") return Strategy::kFilmLite;
  throw ConfigError("unknown strategy: " + s);
}

int64_t CostReport::total_adaptation_macs() const {
  return macs_context_forward + macs_head_fit + macs_body_finetune;
}

int64_t CostReport::phase_macs(CostPhase p) const {
  switch (p) {
    case CostPhase::kContextForward: return macs_context_forward;
    case CostPhase::kHeadFit: return macs_head_fit;
    case CostPhase::kBodyFinetune: return macs_body_finetune;
    case CostPhase::kTargetInference: return macs_target_inference;
  }
  throw StateError("bad cost phase");
}

int64_t CostReport::phase_pointwise(CostPhase p) const {
  int64_t total = 0;
  for (const LayerCost& row : breakdown)
    if (row.phase == p) total += row.flops_pointwise;
  return total;
}

void CostReport::validate() const {
  int64_t sums[4] = {0, 0, 0, 0};
  for (const LayerCost& row : breakdown) {
    if (row.macs < 0 || row.flops_pointwise < 0)
      throw StateError("cost report: negative entry at " + row.name);
    sums[static_cast<int>(row.phase)] += row.macs;
  }
  const CostPhase phases[4] = {
      CostPhase::kContextForward, CostPhase::kHeadFit,
      CostPhase::kBodyFinetune, CostPhase::kTargetInference};
  for (int i = 0; i < 4; ++i)
    if (sums[i] != phase_macs(phases[i]))
      throw StateError(std::string("cost report: ") +
                       cost_phase_name(phases[i]) +
                       " total disagrees with its breakdown");
  if (params_total < 0 || params_adaptive < 0 || params_adaptive > params_total)
    throw StateError("cost report: inconsistent parameter counts");
}

int64_t macs_of_layer(const LayerDesc& desc, const std::vector<int>& shape) {
  if (desc.kind == "conv") {
    if (shape.size() != 4) throw ShapeError("conv cost wants [n, c, h, w]");
    if (desc.out_channels < 1 || desc.kernel < 1 || desc.stride < 1 ||
        desc.padding < 0)
      throw ConfigError("conv cost: bad descriptor");
    int oh = conv_out_side(shape[2], desc.kernel, desc.stride, desc.padding);
    int ow = conv_out_side(shape[3], desc.kernel, desc.stride, desc.padding);
    if (oh < 1 || ow < 1) throw ShapeError("conv cost: empty output");
    return i64(shape[0]) * desc.out_channels * oh * ow * shape[1] *
           desc.kernel * desc.kernel;
  }
  if (desc.kind == "linear") {
    if (shape.size() != 2) throw ShapeError("linear cost wants [n, in]");
    if (desc.out_features < 1) throw ConfigError("linear cost: bad descriptor");
    return i64(shape[0]) * shape[1] * desc.out_features;
  }
  if (desc.kind == "pool" || desc.kind == "activation" ||
      desc.kind == "batchnorm" || desc.kind == "scale") {
    if (shape.empty()) throw ShapeError(desc.kind + " cost wants a shape");
    return 0;
  }
  throw ConfigError("unknown layer kind: " + desc.kind);
}

CostReport adaptation_cost(Strategy strategy, const BackboneSpec& spec,
                           const SyntheticCostTask& task,
                           const CaseConfig& adapter_cfg) {
  spec.validate();
  task.validate();
  int resolution = task.resolution == 0 ? spec.input_resolution : task.resolution;
  std::vector<StageGeom> geom = stage_geometry(spec, resolution);
  int emb = spec.embedding_dim();
  int64_t n_ctx = i64(task.way) * task.shot;
  int64_t steps = task.head_steps;
  int64_t batch = task.head_batch;
  int64_t head_forward = i64(emb) * task.way;
  int64_t head_params = i64(task.way) * emb + task.way;

  CostReport r;
  r.strategy = strategy;
  r.params_total = body_param_count(geom) + head_params;

  // Every strategy trains a linear head for head_steps Adam steps on
  // head_batch rows; forward plus backward at the 2x convention.
  r.macs_head_fit = steps == 0 ? 0 : 3 * steps * batch * head_forward;
  if (r.macs_head_fit > 0)
    r.breakdown.push_back({CostPhase::kHeadFit, "head/fit", r.macs_head_fit, 0});

  switch (strategy) {
    case Strategy::kUppercase: {
      body_rows(r.breakdown, CostPhase::kContextForward, geom,
                spec.activation, n_ctx, 1);
      case_rows(r.breakdown, CostPhase::kContextForward, geom, adapter_cfg,
                n_ctx, true);
      body_rows(r.breakdown, CostPhase::kTargetInference, geom,
                spec.activation, 1, 1);
      case_rows(r.breakdown, CostPhase::kTargetInference, geom, adapter_cfg,
                1, false);
      int64_t adapters = case_params(geom, adapter_cfg);
      r.params_total += adapters;
      r.params_adaptive = adapters + head_params;
      break;
    }
    case Strategy::kHeadOnly: {
      body_rows(r.breakdown, CostPhase::kContextForward, geom,
                spec.activation, n_ctx, 1);
      body_rows(r.breakdown, CostPhase::kTargetInference, geom,
                spec.activation, 1, 1);
      r.params_adaptive = head_params;
      break;
    }
    case Strategy::kFullFinetune: {
      if (steps > 0)
        body_rows(r.breakdown, CostPhase::kBodyFinetune, geom,
                  spec.activation, steps * batch, 3);
      body_rows(r.breakdown, CostPhase::kTargetInference, geom,
                spec.activation, 1, 1);
      r.params_adaptive = body_param_count(geom) + head_params;
      break;
    }
    case Strategy::kFilmLite: {
      body_rows(r.breakdown, CostPhase::kContextForward, geom,
                spec.activation, n_ctx, 1);
      film_rows(r.breakdown, CostPhase::kContextForward, geom, adapter_cfg,
                spec.input_channels, resolution, n_ctx, true);
      body_rows(r.breakdown, CostPhase::kTargetInference, geom,
                spec.activation, 1, 1);
      film_rows(r.breakdown, CostPhase::kTargetInference, geom, adapter_cfg,
                spec.input_channels, resolution, 1, false);
      int64_t adapters = film_params(geom, adapter_cfg, spec.input_channels);
      r.params_total += adapters;
      r.params_adaptive = adapters + head_params;
      break;
    }
  }

  r.breakdown.push_back(
      {CostPhase::kTargetInference, "head/predict", head_forward, 0});

  for (const LayerCost& row : r.breakdown) {
    switch (row.phase) {
      case CostPhase::kContextForward: r.macs_context_forward += row.macs; break;
      case CostPhase::kHeadFit: break;  // set above
      case CostPhase::kBodyFinetune: r.macs_body_finetune += row.macs; break;
      case CostPhase::kTargetInference: r.macs_target_inference += row.macs; break;
    }
  }
  r.validate();
  return r;
}

void write_pareto_csv(std::ostream& os, const std::vector<ParetoRow>& rows) {
  os << "strategy,accuracy,macs,params_adaptive\n";
  char acc[32];
  for (const ParetoRow& row : rows) {
    std::snprintf(acc, sizeof acc, "%.4f", row.accuracy);
    os << row.strategy << ',' << acc << ',' << row.macs << ','
       << row.params_adaptive << '\n';
  }
}

std::string tera_macs(int64_t macs) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", static_cast<double>(macs) / 1e12);
  return buf;
}

const char* cost_report_caveat() {
  return "Cost totals assume one backbone and one image size for every "
         "strategy; comparisons between methods that use different backbones "
         "or input resolutions are not apples-to-apples.";
}

}  // namespace caselab
