#include <doctest.h>

#include <cstdint>
#include <sstream>
#include <vector>

#include "caselab/backbone.hpp"
#include "caselab/cost.hpp"
#include "caselab/errors.hpp"
#include "caselab/heads.hpp"
#include "caselab/rng.hpp"
#include "caselab/tape.hpp"

using namespace caselab;

namespace {

Tensor random_tensor(std::vector<int> shape, RandomStream& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  rng.fill_uniform(t.data, -1.f, 1.f);
  return t;
}

// Small random body that satisfies the spec rules: odd kernels, no adapter
// on the first stage, at least one adapter somewhere, spatial dims >= 1.
BackboneSpec random_spec(RandomStream& rng) {
  BackboneSpec spec;
  spec.input_channels = rng.uniform_int(1, 4);
  spec.input_resolution = 16 + 4 * rng.uniform_int(0, 2);
  spec.activation =
      rng.uniform_int(0, 1) == 0 ? Activation::kSilu : Activation::kRelu;
  int stages = rng.uniform_int(2, 4);
  int channels = 4 + 4 * rng.uniform_int(0, 2);
  bool any_adapter = false;
  for (int i = 0; i < stages; ++i) {
    StageSpec st;
    st.out_channels = channels;
    channels = channels * 2 > 48 ? 48 : channels * 2;
    st.kernel = rng.uniform_int(0, 1) == 0 ? 1 : 3;
    st.stride = rng.uniform_int(1, 2);
    st.insert_adapter = i > 0 && rng.uniform_int(0, 1) == 1;
    any_adapter = any_adapter || st.insert_adapter;
    spec.stages.push_back(st);
  }
  if (!any_adapter) spec.stages.back().insert_adapter = true;
  return spec;
}

CaseConfig random_adapter_config(RandomStream& rng) {
  CaseConfig cfg;
  cfg.hidden_layers = rng.uniform_int(1, 3);
  cfg.reduction = rng.uniform_int(0, 1) == 0 ? 8 : 64;
  cfg.min_units = rng.uniform_int(0, 1) == 0 ? 4 : 16;
  cfg.standardize = rng.uniform_int(0, 1) == 0;
  const HiddenAct hidden[3] = {HiddenAct::kSilu, HiddenAct::kRelu,
                               HiddenAct::kTanh};
  const OutputAct output[3] = {OutputAct::kSigmoid2, OutputAct::kSigmoid,
                               OutputAct::kLinear};
  cfg.hidden_activation = hidden[rng.uniform_int(0, 2)];
  cfg.output_activation = output[rng.uniform_int(0, 2)];
  return cfg;
}

// Runs one adaptive context forward and one cached-target prediction under
// the probe and checks both phases against the analytic report, exactly.
void check_forward_parity(Strategy strategy, AdapterKind kind,
                          const BackboneSpec& spec, const CaseConfig& cfg,
                          int context_rows, RandomStream& rng) {
  Backbone bb = Backbone::build(spec, rng.next_u64());
  if (kind != AdapterKind::kNone) bb.attach_adapters(kind, cfg, rng.next_u64());

  SyntheticCostTask task;
  task.way = context_rows;
  task.shot = 1;
  task.head_steps = 0;
  CostReport report = adaptation_cost(strategy, spec, task, cfg);

  Tensor context = random_tensor(
      {context_rows, spec.input_channels, spec.input_resolution,
       spec.input_resolution},
      rng);
  AdapterUse context_use =
      kind == AdapterKind::kNone ? AdapterUse::kDisabled : AdapterUse::kAdaptive;
  reset_mac_probe();
  bb.embed(context, context_use);
  MacProbe ctx_probe = read_mac_probe();
  CHECK(static_cast<int64_t>(ctx_probe.macs) ==
        report.phase_macs(CostPhase::kContextForward));
  CHECK(static_cast<int64_t>(ctx_probe.pointwise) ==
        report.phase_pointwise(CostPhase::kContextForward));

  Tensor target = random_tensor(
      {1, spec.input_channels, spec.input_resolution, spec.input_resolution},
      rng);
  AdapterUse target_use =
      kind == AdapterKind::kNone ? AdapterUse::kDisabled : AdapterUse::kInference;
  LinearHead head;
  head.w = Tensor::zeros({task.way, spec.embedding_dim()});
  head.b = Tensor::zeros({task.way});
  reset_mac_probe();
  Tensor emb = bb.embed(target, target_use);
  predict(head, emb);
  MacProbe tgt_probe = read_mac_probe();
  CHECK(static_cast<int64_t>(tgt_probe.macs) ==
        report.phase_macs(CostPhase::kTargetInference));
  CHECK(static_cast<int64_t>(tgt_probe.pointwise) ==
        report.phase_pointwise(CostPhase::kTargetInference));
}

}  // namespace

TEST_CASE("layer mac formulas match hand counts") {
  LayerDesc conv;
  conv.kind = "conv";
  conv.out_channels = 4;
  conv.kernel = 3;
  conv.stride = 1;
  conv.padding = 1;
  CHECK(macs_of_layer(conv, {1, 3, 8, 8}) == 6912);  // 3*4*9*64

  LayerDesc lin;
  lin.kind = "linear";
  lin.out_features = 100;
  CHECK(macs_of_layer(lin, {128, 256}) == 3276800);  // 256*100*128

  for (const char* kind : {"pool", "activation", "batchnorm", "scale"}) {
    LayerDesc d;
    d.kind = kind;
    CHECK(macs_of_layer(d, {4, 16, 8, 8}) == 0);
  }
}

TEST_CASE("layer descriptors are validated") {
  LayerDesc bad;
  bad.kind = "attention";
  CHECK_THROWS_AS(macs_of_layer(bad, {1, 3, 8, 8}), ConfigError);

  LayerDesc conv;
  conv.kind = "conv";
  conv.out_channels = 4;
  conv.kernel = 3;
  CHECK_THROWS_AS(macs_of_layer(conv, {128, 256}), ShapeError);
  conv.kernel = 0;
  CHECK_THROWS_AS(macs_of_layer(conv, {1, 3, 8, 8}), ConfigError);
  conv.kernel = 9;
  conv.padding = 0;
  CHECK_THROWS_AS(macs_of_layer(conv, {1, 3, 4, 4}), ShapeError);

  LayerDesc lin;
  lin.kind = "linear";
  lin.out_features = 0;
  CHECK_THROWS_AS(macs_of_layer(lin, {4, 16}), ConfigError);
  lin.out_features = 10;
  CHECK_THROWS_AS(macs_of_layer(lin, {1, 3, 8, 8}), ShapeError);

  LayerDesc pool;
  pool.kind = "pool";
  CHECK_THROWS_AS(macs_of_layer(pool, {}), ShapeError);
}

TEST_CASE("per-layer analytic macs equal the instrumented counter") {
  RandomStream rng(4242);
  for (int rep = 0; rep < 20; ++rep) {
    int n = rng.uniform_int(1, 3);
    int cin = rng.uniform_int(1, 5);
    int side = rng.uniform_int(5, 12);
    LayerDesc desc;
    desc.kind = "conv";
    desc.out_channels = rng.uniform_int(1, 6);
    desc.kernel = 1 + 2 * rng.uniform_int(0, 2);
    desc.stride = rng.uniform_int(1, 2);
    desc.padding = rng.uniform_int(0, desc.kernel / 2);

    Tensor img = random_tensor({n, cin, side, side}, rng);
    Tensor w = random_tensor(
        {desc.out_channels, cin, desc.kernel, desc.kernel}, rng);
    Tensor b = Tensor::zeros({desc.out_channels});
    Tape t;
    Var x = t.input(img);
    reset_mac_probe();
    conv2d(x, t.leaf(w), t.leaf(b), desc.stride, desc.padding);
    CHECK(static_cast<int64_t>(read_mac_probe().macs) ==
          macs_of_layer(desc, img.shape));
  }

  for (int rep = 0; rep < 10; ++rep) {
    int m = rng.uniform_int(1, 6);
    int in = rng.uniform_int(1, 12);
    LayerDesc desc;
    desc.kind = "linear";
    desc.out_features = rng.uniform_int(1, 7);
    Tensor x = random_tensor({m, in}, rng);
    Tensor w = random_tensor({desc.out_features, in}, rng);
    Tensor b = Tensor::zeros({desc.out_features});
    Tape t;
    reset_mac_probe();
    linear(t.input(x), t.leaf(w), t.leaf(b));
    CHECK(static_cast<int64_t>(read_mac_probe().macs) ==
          macs_of_layer(desc, x.shape));
  }
}

TEST_CASE("backbone forwards match the instrumented counter across random specs") {
  RandomStream rng(171717);
  for (int rep = 0; rep < 10; ++rep) {
    BackboneSpec spec = random_spec(rng);
    CaseConfig cfg = random_adapter_config(rng);
    int rows = rng.uniform_int(2, 5);
    check_forward_parity(Strategy::kUppercase, AdapterKind::kCase, spec, cfg,
                         rows, rng);
    check_forward_parity(Strategy::kFilmLite, AdapterKind::kFilm, spec, cfg,
                         rows, rng);
    check_forward_parity(Strategy::kHeadOnly, AdapterKind::kNone, spec, cfg,
                         rows, rng);
  }
}

TEST_CASE("head fit macs follow the step formula and the boundary charge") {
  const int way = 4, dim = 7, steps = 6, batch = 5;

  BackboneSpec spec;
  spec.stages = {{5, 3, 2, false}, {dim, 3, 2, true}};
  spec.input_channels = 2;
  spec.input_resolution = 8;
  SyntheticCostTask task;
  task.way = way;
  task.head_steps = steps;
  task.head_batch = batch;
  CostReport report = adaptation_cost(Strategy::kUppercase, spec, task);
  const int64_t forward_per_step = int64_t(batch) * way * dim;
  CHECK(report.macs_head_fit == 3 * steps * forward_per_step);

  EmbeddingBuffer buffer;
  RandomStream rng(99);
  buffer.embeddings = random_tensor({10, dim}, rng);
  for (int i = 0; i < 10; ++i) buffer.labels.push_back(i % way);
  HeadFitConfig fit;
  fit.steps = steps;
  fit.batch_size = batch;
  reset_mac_probe();
  fit_head(buffer, fit, 7);
  MacProbe probe = read_mac_probe();

  // The real loop pays one forward gemm plus the weight-gradient gemm per
  // step; the buffer rows are constants, so no input gradient exists. The
  // 2x-forward backward convention charges that absent gemm anyway, which
  // is exactly one forward's worth per step.
  CHECK(static_cast<int64_t>(probe.macs) == 2 * steps * forward_per_step);
  CHECK(probe.pointwise == 0);
  CHECK(report.macs_head_fit - static_cast<int64_t>(probe.macs) ==
        steps * forward_per_step);
}

TEST_CASE("head fit cost ignores interior body widths") {
  BackboneSpec narrow;
  narrow.stages = {{8, 3, 2, false}, {12, 3, 2, true}, {24, 3, 2, true}};
  narrow.input_channels = 3;
  narrow.input_resolution = 16;
  BackboneSpec wide = narrow;
  wide.stages[0].out_channels = 32;
  wide.stages[1].out_channels = 48;  // embedding stage untouched

  SyntheticCostTask task;
  for (Strategy s : {Strategy::kUppercase, Strategy::kHeadOnly,
                     Strategy::kFullFinetune, Strategy::kFilmLite}) {
    CostReport a = adaptation_cost(s, narrow, task);
    CostReport b = adaptation_cost(s, wide, task);
    CHECK(a.macs_head_fit == b.macs_head_fit);
    if (s != Strategy::kFullFinetune)
      CHECK(a.macs_context_forward < b.macs_context_forward);
  }
}

TEST_CASE("degenerate one-image task prices one forward plus the generators") {
  BackboneSpec spec = BackboneSpec::desk_default();
  SyntheticCostTask task;
  task.way = 1;
  task.shot = 1;
  task.head_steps = 0;
  CaseConfig cfg;
  CostReport r = adaptation_cost(Strategy::kUppercase, spec, task, cfg);

  const int64_t body_forward = 3760128;  // 221184 + 3 * 1179648
  const int64_t case_mlps = 15104;       // (32*64 + 256) + ... for 64/128/256
  CHECK(r.macs_context_forward == body_forward + case_mlps);
  CHECK(r.macs_head_fit == 0);
  CHECK(r.macs_body_finetune == 0);
  CHECK(r.total_adaptation_macs() == body_forward + case_mlps);
  CHECK(r.macs_target_inference == body_forward + spec.embedding_dim());
}

TEST_CASE("desk defaults land on frozen goldens") {
  BackboneSpec spec = BackboneSpec::desk_default();
  SyntheticCostTask task;  // 100-way 10-shot, 500 steps, batch 128
  CaseConfig cfg;

  CostReport up = adaptation_cost(Strategy::kUppercase, spec, task, cfg);
  CHECK(up.macs_context_forward == 3760143104);  // 1000 forwards + MLPs once
  CHECK(up.macs_head_fit == 4915200000);
  CHECK(up.macs_body_finetune == 0);
  CHECK(up.total_adaptation_macs() == 8675343104);
  CHECK(up.macs_target_inference == 3785728);
  CHECK(up.params_total == 430724);
  CHECK(up.params_adaptive == 41348);

  CostReport full = adaptation_cost(Strategy::kFullFinetune, spec, task, cfg);
  CHECK(full.macs_context_forward == 0);
  CHECK(full.macs_body_finetune == 721944576000);
  CHECK(full.total_adaptation_macs() == 726859776000);
  CHECK(full.params_adaptive == full.params_total);
  CHECK(full.params_total == 415076);

  CostReport head = adaptation_cost(Strategy::kHeadOnly, spec, task, cfg);
  CHECK(head.total_adaptation_macs() == 8675328000);  // uppercase minus MLPs
  CHECK(up.total_adaptation_macs() - head.total_adaptation_macs() == 15104);
  CHECK(head.params_adaptive == 25700);

  CostReport film = adaptation_cost(Strategy::kFilmLite, spec, task, cfg);
  CHECK(film.params_total == 437796);
  CHECK(film.params_adaptive == 48420);

  // The headline gap: the body never enters the iterative loop.
  CHECK(full.total_adaptation_macs() >= 10 * up.total_adaptation_macs());
  double ratio = double(full.total_adaptation_macs()) /
                 double(up.total_adaptation_macs());
  CHECK(ratio > 83.0);
  CHECK(ratio < 84.0);
}

TEST_CASE("adapter parameter analytics match instantiated blocks") {
  BackboneSpec spec = BackboneSpec::desk_default();
  CaseConfig cfg;
  SyntheticCostTask task;
  const int64_t head_params = 100 * 256 + 100;

  Backbone with_case = Backbone::build(spec, 31);
  with_case.attach_adapters(AdapterKind::kCase, cfg, 32);
  CHECK(with_case.adapter_param_count() == 15648);
  CostReport up = adaptation_cost(Strategy::kUppercase, spec, task, cfg);
  CHECK(up.params_adaptive - head_params == with_case.adapter_param_count());

  Backbone with_film = Backbone::build(spec, 31);
  with_film.attach_adapters(AdapterKind::kFilm, cfg, 32);
  CHECK(with_film.adapter_param_count() == 22720);
  CostReport film = adaptation_cost(Strategy::kFilmLite, spec, task, cfg);
  CHECK(film.params_adaptive - head_params == with_film.adapter_param_count());

  CHECK(film.params_adaptive > up.params_adaptive);
}

TEST_CASE("params totals match the instantiated backbone") {
  BackboneSpec spec = BackboneSpec::desk_default();
  CaseConfig cfg;
  Backbone bb = Backbone::build(spec, 5);
  bb.attach_adapters(AdapterKind::kCase, cfg, 6);

  int64_t learnable = 0;
  for (auto& [name, tensor] : bb.theta_trainable_params())
    learnable += tensor->numel();
  learnable += bb.adapter_param_count();
  learnable += 100 * 256 + 100;

  SyntheticCostTask task;
  CostReport up = adaptation_cost(Strategy::kUppercase, spec, task, cfg);
  CHECK(up.params_total == learnable);
}

TEST_CASE("costs grow monotonically with task size") {
  BackboneSpec spec = BackboneSpec::desk_default();
  for (Strategy s : {Strategy::kUppercase, Strategy::kFullFinetune,
                     Strategy::kFilmLite}) {
    int64_t prev = -1;
    for (int way : {2, 5, 50, 100}) {
      SyntheticCostTask task;
      task.way = way;
      int64_t total = adaptation_cost(s, spec, task).total_adaptation_macs();
      CHECK(total >= prev);
      prev = total;
    }
    prev = -1;
    for (int shot : {1, 5, 10}) {
      SyntheticCostTask task;
      task.shot = shot;
      int64_t total = adaptation_cost(s, spec, task).total_adaptation_macs();
      CHECK(total >= prev);
      prev = total;
    }
    prev = -1;
    for (int steps : {0, 100, 500}) {
      SyntheticCostTask task;
      task.head_steps = steps;
      int64_t total = adaptation_cost(s, spec, task).total_adaptation_macs();
      CHECK(total >= prev);
      prev = total;
    }
    prev = -1;
    for (int res : {16, 32, 64}) {
      SyntheticCostTask task;
      task.resolution = res;
      int64_t total = adaptation_cost(s, spec, task).total_adaptation_macs();
      CHECK(total >= prev);
      prev = total;
    }
  }
}

TEST_CASE("reports stay internally consistent and tampering is caught") {
  BackboneSpec spec = BackboneSpec::desk_default();
  SyntheticCostTask task;
  for (Strategy s : {Strategy::kUppercase, Strategy::kHeadOnly,
                     Strategy::kFullFinetune, Strategy::kFilmLite}) {
    CostReport r = adaptation_cost(s, spec, task);
    CHECK_NOTHROW(r.validate());

    int64_t manual = 0;
    for (const LayerCost& row : r.breakdown)
      if (row.phase == CostPhase::kContextForward) manual += row.flops_pointwise;
    CHECK(manual == r.phase_pointwise(CostPhase::kContextForward));

    CostReport skewed = r;
    skewed.macs_context_forward += 1;
    CHECK_THROWS_AS(skewed.validate(), StateError);

    CostReport negative = r;
    negative.breakdown[0].macs = -1;
    CHECK_THROWS_AS(negative.validate(), StateError);

    CostReport params = r;
    params.params_adaptive = params.params_total + 1;
    CHECK_THROWS_AS(params.validate(), StateError);
  }
}

TEST_CASE("pareto csv bytes are stable") {
  std::vector<ParetoRow> rows = {
      {"uppercase", 0.732, 8675343104, 41348},
      {"full_finetune", 0.758, 726859776000, 415076},
  };
  std::ostringstream out;
  write_pareto_csv(out, rows);
  CHECK(out.str() ==
        "strategy,accuracy,macs,params_adaptive\n"
        "uppercase,0.7320,8675343104,41348\n"
        "full_finetune,0.7580,726859776000,415076\n");
}

TEST_CASE("tera formatting matches table style") {
  CHECK(tera_macs(526300000000000) == "526.3");
  CHECK(tera_macs(726859776000) == "0.7");
  CHECK(tera_macs(8675343104) == "0.0");
  CHECK(tera_macs(0) == "0.0");
  CHECK(tera_macs(1000000000000) == "1.0");
  CHECK(tera_macs(1234500000000) == "1.2");
}

TEST_CASE("strategy names round trip") {
  for (Strategy s : {Strategy::kUppercase, Strategy::kHeadOnly,
                     Strategy::kFullFinetune, Strategy::kFilmLite})
    CHECK(parse_strategy(strategy_name(s)) == s);
  CHECK_THROWS_AS(parse_strategy("resnet"), ConfigError);
}

TEST_CASE("cost task validation rejects bad fields") {
  SyntheticCostTask task;
  task.way = 0;
  CHECK_THROWS_AS(task.validate(), ConfigError);
  task = {};
  task.shot = 0;
  CHECK_THROWS_AS(task.validate(), ConfigError);
  task = {};
  task.resolution = -1;
  CHECK_THROWS_AS(task.validate(), ConfigError);
  task = {};
  task.head_steps = -1;
  CHECK_THROWS_AS(task.validate(), ConfigError);
  task = {};
  task.head_batch = 0;
  CHECK_THROWS_AS(task.validate(), ConfigError);
}

TEST_CASE("resolution override matches a spec built at that resolution") {
  BackboneSpec spec32 = BackboneSpec::desk_default();
  BackboneSpec spec16 = spec32;
  spec16.input_resolution = 16;

  SyntheticCostTask override_task;
  override_task.resolution = 16;
  SyntheticCostTask inherit_task;

  for (Strategy s : {Strategy::kUppercase, Strategy::kFilmLite}) {
    CostReport a = adaptation_cost(s, spec32, override_task);
    CostReport b = adaptation_cost(s, spec16, inherit_task);
    CHECK(a.macs_context_forward == b.macs_context_forward);
    CHECK(a.macs_head_fit == b.macs_head_fit);
    CHECK(a.macs_body_finetune == b.macs_body_finetune);
    CHECK(a.macs_target_inference == b.macs_target_inference);
    CHECK(a.params_total == b.params_total);

    CostReport full32 = adaptation_cost(s, spec32, inherit_task);
    CHECK(a.macs_context_forward < full32.macs_context_forward);
  }
}

TEST_CASE("probe wrappers reset and accumulate") {
  reset_mac_probe();
  MacProbe zero = read_mac_probe();
  CHECK(zero.macs == 0);
  CHECK(zero.pointwise == 0);

  RandomStream rng(7);
  Tensor a = random_tensor({2, 3}, rng);
  Tensor b = random_tensor({3, 4}, rng);
  Tape t;
  matmul(t.input(a), t.input(b));
  scale(t.input(a), 2.f);
  MacProbe probe = read_mac_probe();
  CHECK(probe.macs == 24);      // 2*3*4
  CHECK(probe.pointwise == 6);  // one multiply per element

  reset_mac_probe();
  MacProbe after = read_mac_probe();
  CHECK(after.macs == 0);
  CHECK(after.pointwise == 0);
}
