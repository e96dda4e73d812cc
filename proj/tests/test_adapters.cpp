#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "caselab/adapters.hpp"
#include "caselab/errors.hpp"
#include "caselab/rng.hpp"
#include "caselab/tape.hpp"
#include "caselab/tensor.hpp"

using namespace caselab;

namespace {

Tensor random_maps(int n, int c, int h, int w, uint64_t seed) {
  Tensor x = Tensor::zeros({n, c, h, w});
  RandomStream rng(seed);
  rng.fill_normal(x.data, 0.f, 1.f);
  return x;
}

double sigmoid_d(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double silu_d(double x) { return x * sigmoid_d(x); }

// Writes v into the named adapter parameter.
void set_param(NamedTensors params, const std::string& name,
               const std::vector<float>& v) {
  for (auto& [n, t] : params) {
    if (n == name) {
      REQUIRE(t->data.size() == v.size());
      t->data = v;
      return;
    }
  }
  FAIL("no param named ", name);
}

}  // namespace

TEST_CASE("case block is the identity at init (sigmoid2)") {
  CaseConfig cfg;
  CaseBlock block(8, cfg, 7);
  Tensor x = random_maps(3, 8, 5, 5, 11);
  Tape t;
  Var y = block.apply(t, t.input(x));
  REQUIRE(y.value().shape == x.shape);
  CHECK(std::memcmp(y.value().data.data(), x.data.data(),
                    x.data.size() * sizeof(float)) == 0);
  const Tensor& g = block.cached_gamma();
  for (float v : g.data) CHECK(v == 1.0f);
}

TEST_CASE("case block is the identity at init (linear output)") {
  CaseConfig cfg;
  cfg.output_activation = OutputAct::kLinear;
  CaseBlock block(8, cfg, 7);
  Tensor x = random_maps(2, 8, 4, 4, 13);
  Tape t;
  Var y = block.apply(t, t.input(x));
  CHECK(std::memcmp(y.value().data.data(), x.data.data(),
                    x.data.size() * sizeof(float)) == 0);
}

TEST_CASE("case gamma matches a hand-stepped mlp") {
  CaseConfig cfg;
  cfg.reduction = 1;
  cfg.min_units = 1;
  cfg.hidden_layers = 1;
  CaseBlock block(2, cfg, 3);
  set_param(block.params("a"), "a/w0", {0.1f, -0.2f, 0.3f, 0.4f});
  set_param(block.params("a"), "a/b0", {0.05f, -0.05f});
  set_param(block.params("a"), "a/w1", {0.2f, 0.1f, -0.1f, 0.3f});
  set_param(block.params("a"), "a/b1", {0.01f, 0.02f});

  // Two instances with 1x1 maps: channel means (1,3) and (3,5).
  Tensor x = Tensor::from({2, 2, 1, 1}, {1.f, 3.f, 3.f, 5.f});
  Tape t;
  Var y = block.apply(t, t.input(x));

  double pooled[2] = {2.0, 4.0};
  double mu = 3.0, sd = 1.0;
  double z[2];
  for (int i = 0; i < 2; ++i) z[i] = (pooled[i] - mu) / (sd + 1e-5);
  double h[2] = {silu_d(0.1 * z[0] - 0.2 * z[1] + 0.05),
                 silu_d(0.3 * z[0] + 0.4 * z[1] - 0.05)};
  double gamma[2] = {2.0 * sigmoid_d(0.2 * h[0] + 0.1 * h[1] + 0.01),
                     2.0 * sigmoid_d(-0.1 * h[0] + 0.3 * h[1] + 0.02)};

  const Tensor& g = block.cached_gamma();
  CHECK(g.data[0] == doctest::Approx(gamma[0]).epsilon(1e-5));
  CHECK(g.data[1] == doctest::Approx(gamma[1]).epsilon(1e-5));
  CHECK(y.value().data[0] == doctest::Approx(1.0 * gamma[0]).epsilon(1e-5));
  CHECK(y.value().data[3] == doctest::Approx(5.0 * gamma[1]).epsilon(1e-5));
}

TEST_CASE("case gamma is permutation and duplication invariant") {
  CaseConfig cfg;
  CaseBlock block(6, cfg, 21);
  // Give the mlp non-trivial weights so gamma actually depends on the input.
  RandomStream rng(5);
  for (auto& [name, t] : block.params("p")) rng.fill_normal(t->data, 0.f, 0.3f);

  Tensor x = random_maps(5, 6, 3, 3, 17);
  Tape t1;
  block.apply(t1, t1.input(x));
  Tensor g_orig = block.cached_gamma();

  // Reverse the instance order.
  Tensor xr = Tensor::zeros({5, 6, 3, 3});
  int64_t row = 6 * 3 * 3;
  for (int i = 0; i < 5; ++i)
    std::copy(x.data.begin() + i * row, x.data.begin() + (i + 1) * row,
              xr.data.begin() + (4 - i) * row);
  Tape t2;
  block.apply(t2, t2.input(xr));
  Tensor g_perm = block.cached_gamma();

  // Duplicate the whole set three times.
  Tensor xd = Tensor::zeros({15, 6, 3, 3});
  for (int rep = 0; rep < 3; ++rep)
    std::copy(x.data.begin(), x.data.end(),
              xd.data.begin() + rep * 5 * row);
  Tape t3;
  block.apply(t3, t3.input(xd));
  Tensor g_dup = block.cached_gamma();

  for (size_t i = 0; i < g_orig.data.size(); ++i) {
    CHECK(g_perm.data[i] == doctest::Approx(g_orig.data[i]).epsilon(1e-6));
    CHECK(g_dup.data[i] == doctest::Approx(g_orig.data[i]).epsilon(1e-6));
  }
}

TEST_CASE("adaptive then inference replays the cached gamma bit-for-bit") {
  CaseConfig cfg;
  CaseBlock block(4, cfg, 9);
  RandomStream rng(6);
  for (auto& [name, t] : block.params("p")) rng.fill_normal(t->data, 0.f, 0.5f);

  Tensor x = random_maps(3, 4, 2, 2, 23);
  Tape t1;
  Var y1 = block.apply(t1, t1.input(x));
  Tensor out1 = y1.value();

  block.set_mode(AdapterMode::kInference);
  Tape t2;
  Var y2 = block.apply(t2, t2.input(x));
  CHECK(std::memcmp(y2.value().data.data(), out1.data.data(),
                    out1.data.size() * sizeof(float)) == 0);
}

TEST_CASE("inference without a cache is an error") {
  CaseConfig cfg;
  CaseBlock block(4, cfg, 9);
  block.set_mode(AdapterMode::kInference);
  Tensor x = random_maps(2, 4, 2, 2, 3);
  Tape t;
  CHECK_THROWS_AS(block.apply(t, t.input(x)), StateError);

  // Entering adaptive mode from inference drops the cache.
  block.set_mode(AdapterMode::kAdaptive);
  {
    Tape ta;
    block.apply(ta, ta.input(x));
  }
  CHECK(block.has_cache());
  block.set_mode(AdapterMode::kInference);
  {
    Tape tb;
    block.apply(tb, tb.input(x));
  }
  block.set_mode(AdapterMode::kAdaptive);
  CHECK(!block.has_cache());
  block.set_mode(AdapterMode::kInference);
  {
    Tape tc;
    CHECK_THROWS_AS(block.apply(tc, tc.input(x)), StateError);
  }
}

TEST_CASE("mlp evaluation counter distinguishes the modes") {
  CaseConfig cfg;
  CaseBlock block(4, cfg, 9);
  Tensor x = random_maps(6, 4, 2, 2, 3);
  CHECK(block.mlp_evaluations() == 0);
  {
    Tape t;
    block.apply(t, t.input(x));
  }
  CHECK(block.mlp_evaluations() == 1);
  {
    Tape t;
    block.apply(t, t.input(x));
  }
  CHECK(block.mlp_evaluations() == 2);
  block.set_mode(AdapterMode::kInference);
  {
    Tape t;
    block.apply(t, t.input(x));
  }
  CHECK(block.mlp_evaluations() == 2);

  SeBlock se(4, cfg, 9);
  {
    Tape t;
    se.apply(t, t.input(x));
  }
  CHECK(se.mlp_evaluations() == 6);
  {
    Tape t;
    Tensor x2 = random_maps(2, 4, 2, 2, 4);
    se.apply(t, t.input(x2));
  }
  CHECK(se.mlp_evaluations() == 8);
}

TEST_CASE("adaptive-mode gradients reach the mlp, inference-mode do not") {
  CaseConfig cfg;
  CaseBlock block(4, cfg, 9);
  Tensor x = random_maps(3, 4, 2, 2, 23);

  Tape t1;
  Var y1 = block.apply(t1, t1.input(x));
  size_t reachable_adaptive = t1.reachable_params(sum(y1)).size();
  CHECK(reachable_adaptive == block.params("p").size());

  block.set_mode(AdapterMode::kInference);
  Tape t2;
  Var y2 = block.apply(t2, t2.input(x));
  CHECK(t2.reachable_params(sum(y2)).empty());
}

TEST_CASE("se block identity and forced-zero gamma") {
  CaseConfig cfg;
  SeBlock block(8, cfg, 5);
  Tensor x = random_maps(4, 8, 3, 3, 29);
  {
    Tape t;
    Var y = block.apply(t, t.input(x));
    CHECK(std::memcmp(y.value().data.data(), x.data.data(),
                      x.data.size() * sizeof(float)) == 0);
  }

  CaseConfig lin = cfg;
  lin.output_activation = OutputAct::kLinear;
  SeBlock zero(8, lin, 5);
  int last = zero.params("z").size() / 2 - 1;
  set_param(zero.params("z"), "z/b" + std::to_string(last),
            std::vector<float>(8, 0.f));
  {
    Tape t;
    Var y = zero.apply(t, t.input(x));
    for (float v : y.value().data) CHECK(v == 0.0f);
  }
}

TEST_CASE("se responds per instance where case pools the batch") {
  CaseConfig cfg;
  SeBlock se(4, cfg, 31);
  CaseBlock cb(4, cfg, 31);
  RandomStream rng(8);
  for (auto& [name, t] : se.params("p")) rng.fill_normal(t->data, 0.f, 0.4f);
  RandomStream rng2(8);
  for (auto& [name, t] : cb.params("p")) rng2.fill_normal(t->data, 0.f, 0.4f);

  // Two instances with very different channel statistics.
  Tensor x = Tensor::zeros({2, 4, 2, 2});
  for (int64_t i = 0; i < 16; ++i) x.data[i] = 3.f;
  for (int64_t i = 16; i < 32; ++i) x.data[i] = -2.f;

  Tape ts;
  Var ys = se.apply(ts, ts.input(x));
  // Same channel in the two instances gets different scaling.
  float r0 = ys.value().data[0] / 3.f;
  float r1 = ys.value().data[16] / -2.f;
  CHECK(std::fabs(r0 - r1) > 1e-3f);

  Tape tc;
  Var yc = cb.apply(tc, tc.input(x));
  float c0 = yc.value().data[0] / 3.f;
  float c1 = yc.value().data[16] / -2.f;
  CHECK(c0 == doctest::Approx(c1).epsilon(1e-6));
}

TEST_CASE("parameter counts match the closed forms") {
  // 64 channels, reduction 64 clipped to 16 units, one hidden layer:
  // 64*16+16 + 16*64+64.
  CaseConfig h1;
  h1.hidden_layers = 1;
  CaseBlock b64(64, h1, 1);
  CHECK(b64.param_count() == 2128);

  // Clip applies when channels/reduction falls under min_units.
  CaseBlock b32(32, h1, 1);
  CHECK(b32.param_count() == 32 * 16 + 16 + 16 * 32 + 32);

  // Default two hidden layers insert one 16x16 block.
  CaseConfig h2;
  CaseBlock b64d(64, h2, 1);
  CHECK(b64d.param_count() == 2128 + 16 * 16 + 16);

  // The reported count always equals the walked sum of tensor sizes.
  for (CaseBlock* b : {&b64, &b32, &b64d}) {
    int64_t walked = 0;
    for (auto& [name, t] : b->params("x")) walked += t->numel();
    CHECK(walked == b->param_count());
  }
}

TEST_CASE("film generator is the identity at init") {
  CaseConfig cfg;
  FilmLiteGenerator gen({8, 16}, 3, cfg, 41);
  Tensor ctx = random_maps(5, 3, 16, 16, 43);
  Tape t;
  std::vector<FilmLayerMod> mods = gen.adapt(t, t.input(ctx));
  REQUIRE(mods.size() == 2);
  for (int layer = 0; layer < 2; ++layer) {
    const Tensor& s = mods[layer].scale.value();
    const Tensor& h = mods[layer].shift.value();
    for (float v : s.data) CHECK(v == 1.0f);
    for (float v : h.data) CHECK(v == 0.0f);
  }

  // Applying the cached modulation leaves features untouched.
  Tensor x = random_maps(5, 8, 4, 4, 47);
  Tape t2;
  FilmLayerMod mod = gen.cached_mod(t2, 0);
  Var y = shift_channels(scale_channels(t2.input(x), mod.scale), mod.shift);
  CHECK(std::memcmp(y.value().data.data(), x.data.data(),
                    x.data.size() * sizeof(float)) == 0);
}

TEST_CASE("film modulation is permutation invariant and caches correctly") {
  CaseConfig cfg;
  FilmLiteGenerator gen({6}, 3, cfg, 51);
  RandomStream rng(9);
  for (auto& [name, t] : gen.params("f")) rng.fill_normal(t->data, 0.f, 0.2f);

  Tensor ctx = random_maps(4, 3, 8, 8, 53);
  Tape t1;
  gen.adapt(t1, t1.input(ctx));
  REQUIRE(gen.has_cache());
  auto cached = gen.cached();

  Tensor rev = Tensor::zeros({4, 3, 8, 8});
  int64_t row = 3 * 8 * 8;
  for (int i = 0; i < 4; ++i)
    std::copy(ctx.data.begin() + i * row, ctx.data.begin() + (i + 1) * row,
              rev.data.begin() + (3 - i) * row);
  Tape t2;
  gen.adapt(t2, t2.input(rev));
  for (size_t i = 0; i < cached[0].first.data.size(); ++i)
    CHECK(gen.cached()[0].first.data[i] ==
          doctest::Approx(cached[0].first.data[i]).epsilon(1e-6));

  gen.invalidate();
  Tape t3;
  CHECK_THROWS_AS(gen.cached_mod(t3, 0), StateError);
}

TEST_CASE("film parameter count exceeds a matched case adapter's") {
  CaseConfig cfg;
  FilmLiteGenerator gen({64, 128}, 3, cfg, 61);
  std::vector<CaseBlock> blocks;
  blocks.emplace_back(64, cfg, 1);
  blocks.emplace_back(128, cfg, 2);
  CHECK(count_adapter_params(gen) > count_adapter_params(blocks));
  CHECK(gen.encoder_param_count() > 0);

  int64_t walked = 0;
  for (auto& [name, t] : gen.params("g")) walked += t->numel();
  CHECK(walked == count_adapter_params(gen));
}

TEST_CASE("adapter rejects mismatched channel counts") {
  CaseConfig cfg;
  CaseBlock block(8, cfg, 7);
  Tensor x = random_maps(2, 4, 3, 3, 3);
  Tape t;
  CHECK_THROWS_AS(block.apply(t, t.input(x)), ShapeError);
}
