#include <doctest.h>

#include <cmath>
#include <vector>

#include "caselab/adam.hpp"
#include "caselab/errors.hpp"
#include "caselab/rng.hpp"
#include "caselab/tape.hpp"
#include "caselab/tensor.hpp"

using namespace caselab;

namespace {

constexpr double kFdStep = 1e-3;
constexpr double kFdRelTol = 1e-4;

Tensor random_tensor(std::vector<int> shape, RandomStream& rng, float lo = -1.f,
                     float hi = 1.f) {
  Tensor t = Tensor::zeros(std::move(shape));
  rng.fill_uniform(t.data, lo, hi);
  return t;
}

// Central finite differences of the tape's double-precision forward replay
// against the analytic gradient flushed into `param` by backward(). Checks
// every coordinate unless `max_coords` trims the sweep.
void check_grad(Tape& tape, Var loss, Tensor& param, Var param_var,
                int max_coords = -1) {
  REQUIRE(!param.grad.empty());
  int64_t n = param.numel();
  int64_t step = 1;
  if (max_coords > 0 && n > max_coords) step = n / max_coords;
  for (int64_t i = 0; i < n; i += step) {
    double up = tape.replay_forward_f64(loss, param_var.id(), i, kFdStep);
    double dn = tape.replay_forward_f64(loss, param_var.id(), i, -kFdStep);
    double fd = (up - dn) / (2.0 * kFdStep);
    double an = param.grad[(size_t)i];
    double denom = std::max({1.0, std::abs(fd), std::abs(an)});
    REQUIRE(std::abs(fd - an) / denom <= kFdRelTol);
  }
}

}  // namespace

TEST_CASE("backward of sum is a tensor of ones") {
  Tape tape;
  RandomStream rng(3);
  Tensor x = random_tensor({3, 4}, rng);
  x.requires_grad = true;
  Var v = tape.leaf(x);
  tape.backward(sum(v));
  REQUIRE(x.grad.size() == 12);
  for (float g : x.grad) CHECK(g == doctest::Approx(1.f));
}

TEST_CASE("backward of sum(x*x)/2 returns x itself") {
  Tape tape;
  RandomStream rng(4);
  Tensor x = random_tensor({5, 3}, rng);
  x.requires_grad = true;
  Var v = tape.leaf(x);
  Var loss = scale(sum(mul(v, v)), 0.5f);
  tape.backward(loss);
  for (size_t i = 0; i < x.data.size(); ++i)
    CHECK(x.grad[i] == doctest::Approx(x.data[i]).epsilon(1e-5));
}

TEST_CASE("finite differences validate every primitive backward rule") {
  for (uint64_t seed = 1; seed <= 4; ++seed) {
    RandomStream rng(seed);

    SUBCASE("") {}  // keep doctest from collapsing the loop body

    {  // elementwise chain: mul, add, sub, scale, activations
      Tape tape;
      Tensor a = random_tensor({3, 4}, rng);
      Tensor b = random_tensor({3, 4}, rng);
      a.requires_grad = b.requires_grad = true;
      Var va = tape.leaf(a), vb = tape.leaf(b);
      Var h = add(mul(va, vb), sub(silu(va), scale(sigmoid(vb), 0.7f)));
      Var loss = sum(mul(tanh(h), h));
      tape.backward(loss);
      check_grad(tape, loss, a, va);
      check_grad(tape, loss, b, vb);
    }

    {  // relu needs inputs away from the kink
      Tape tape;
      Tensor a = random_tensor({4, 4}, rng);
      for (auto& v : a.data)
        if (std::abs(v) < 0.05f) v = 0.1f;
      a.requires_grad = true;
      Var va = tape.leaf(a);
      Var loss = sum(mul(relu(va), va));
      tape.backward(loss);
      check_grad(tape, loss, a, va);
    }

    {  // matmul and linear
      Tape tape;
      Tensor a = random_tensor({3, 5}, rng);
      Tensor b = random_tensor({5, 4}, rng);
      Tensor w = random_tensor({2, 4}, rng);
      Tensor bias = random_tensor({2}, rng);
      a.requires_grad = b.requires_grad = true;
      w.requires_grad = bias.requires_grad = true;
      Var va = tape.leaf(a), vb = tape.leaf(b);
      Var vw = tape.leaf(w), vbias = tape.leaf(bias);
      Var y = linear(matmul(va, vb), vw, vbias);
      Var loss = sum(mul(y, y));
      tape.backward(loss);
      check_grad(tape, loss, a, va);
      check_grad(tape, loss, b, vb);
      check_grad(tape, loss, w, vw);
      check_grad(tape, loss, bias, vbias);
    }

    {  // conv2d, pooling
      Tape tape;
      Tensor x = random_tensor({2, 3, 6, 6}, rng);
      Tensor w = random_tensor({4, 3, 3, 3}, rng, -0.5f, 0.5f);
      Tensor b = random_tensor({4}, rng);
      x.requires_grad = w.requires_grad = b.requires_grad = true;
      Var vx = tape.leaf(x), vw = tape.leaf(w), vb = tape.leaf(b);
      Var y = global_avg_pool(conv2d(vx, vw, vb, 2, 1));
      Var loss = sum(mul(y, y));
      tape.backward(loss);
      check_grad(tape, loss, x, vx, 40);
      check_grad(tape, loss, w, vw, 40);
      check_grad(tape, loss, b, vb);
    }

    {  // mean_rows + standardize + channel scaling
      Tape tape;
      Tensor x = random_tensor({4, 6}, rng);
      Tensor feat = random_tensor({2, 6, 3, 3}, rng);
      Tensor gamma2 = random_tensor({2, 6}, rng, 0.2f, 1.8f);
      x.requires_grad = feat.requires_grad = gamma2.requires_grad = true;
      Var vx = tape.leaf(x), vfeat = tape.leaf(feat), vg2 = tape.leaf(gamma2);
      Var pooled = standardize(mean_rows(vx), 1e-5f);
      Var gamma = reshape(pooled, {6});
      Var scaled = scale_channels(vfeat, gamma);
      Var per_row = scale_channels_per_row(scaled, vg2);
      Var shifted = shift_channels(per_row, gamma);
      Var loss = sum(mul(shifted, shifted));
      tape.backward(loss);
      check_grad(tape, loss, x, vx);
      check_grad(tape, loss, feat, vfeat, 40);
      check_grad(tape, loss, gamma2, vg2);
    }

    {  // slice_cols routes gradients to the right columns
      Tape tape;
      Tensor x = random_tensor({3, 8}, rng);
      x.requires_grad = true;
      Var vx = tape.leaf(x);
      Var left = slice_cols(vx, 0, 4);
      Var right = slice_cols(vx, 4, 4);
      Var loss = sum(mul(left, right));
      tape.backward(loss);
      check_grad(tape, loss, x, vx);
    }

    {  // batchnorm in both modes
      Tape tape;
      Tensor x = random_tensor({3, 2, 4, 4}, rng);
      Tensor g = random_tensor({2}, rng, 0.5f, 1.5f);
      Tensor bta = random_tensor({2}, rng);
      Tensor rm = random_tensor({2}, rng, -0.2f, 0.2f);
      Tensor rv = random_tensor({2}, rng, 0.5f, 1.5f);
      x.requires_grad = g.requires_grad = bta.requires_grad = true;
      Var vx = tape.leaf(x), vg = tape.leaf(g), vb = tape.leaf(bta);
      Var yt = batchnorm_training(vx, vg, vb, 1e-5f);
      Var yi = batchnorm_inference(yt, vg, vb, tape.leaf(rm), tape.leaf(rv), 1e-5f);
      Var loss = sum(mul(yi, yi));
      tape.backward(loss);
      check_grad(tape, loss, x, vx, 40);
      check_grad(tape, loss, g, vg);
      check_grad(tape, loss, bta, vb);
    }

    {  // softmax cross-entropy
      Tape tape;
      Tensor logits = random_tensor({4, 5}, rng, -2.f, 2.f);
      logits.requires_grad = true;
      Var vl = tape.leaf(logits);
      std::vector<int> labels = {rng.uniform_int(0, 4), rng.uniform_int(0, 4),
                                 rng.uniform_int(0, 4), rng.uniform_int(0, 4)};
      Var loss = softmax_cross_entropy(vl, labels);
      tape.backward(loss);
      check_grad(tape, loss, logits, vl);
    }
  }
}

TEST_CASE("gradients accumulate additively at fan-out") {
  Tape tape;
  Tensor x = Tensor::from({2}, {0.3f, -0.4f});
  x.requires_grad = true;
  Var v = tape.leaf(x);
  Var loss = sum(add(mul(v, v), mul(v, v)));  // d/dx = 4x
  tape.backward(loss);
  CHECK(x.grad[0] == doctest::Approx(4 * 0.3f));
  CHECK(x.grad[1] == doctest::Approx(4 * -0.4f));
}

TEST_CASE("a leaf detached from the loss receives a zero gradient") {
  Tape tape;
  Tensor used = Tensor::from({2}, {1.f, 2.f});
  Tensor unused = Tensor::from({2}, {3.f, 4.f});
  used.requires_grad = unused.requires_grad = true;
  Var vu = tape.leaf(used);
  Var vn = tape.leaf(unused);
  (void)vn;
  tape.backward(sum(mul(vu, vu)));
  REQUIRE(unused.grad.size() == 2);
  CHECK(unused.grad[0] == 0.f);
  CHECK(unused.grad[1] == 0.f);
}

TEST_CASE("frozen leaves never appear in reachable_params") {
  Tape tape;
  Tensor trainable = Tensor::from({2}, {1.f, 2.f});
  Tensor frozen = Tensor::from({2}, {5.f, 6.f});
  trainable.requires_grad = true;
  frozen.requires_grad = false;
  Var a = tape.leaf(trainable);
  Var b = tape.leaf(frozen);
  Var loss = sum(mul(a, b));
  auto params = tape.reachable_params(loss);
  REQUIRE(params.size() == 1);
  CHECK(params[0] == &trainable);
  tape.backward(loss);
  CHECK(frozen.grad.empty());
  CHECK(trainable.grad.size() == 2);
}

TEST_CASE("backward requires a scalar loss") {
  Tape tape;
  Tensor x = Tensor::from({2}, {1.f, 2.f});
  x.requires_grad = true;
  Var v = tape.leaf(x);
  CHECK_THROWS_AS(tape.backward(v), ShapeError);
}

TEST_CASE("adam's first step with unit gradient moves by -lr") {
  Tensor p = Tensor::zeros({1});
  p.requires_grad = true;
  AdamState opt({{"p", &p}});
  p.grad = {1.f};
  opt.step(0.1f);
  CHECK(std::abs(p.data[0] - (-0.1f)) <= 1e-6f);
  CHECK(p.grad.empty());  // consumed
}

TEST_CASE("adam converges on a one-dimensional quadratic") {
  Tensor p = Tensor::zeros({1});
  p.requires_grad = true;
  AdamState opt({{"p", &p}});
  for (int i = 0; i < 100; ++i) {
    p.grad = {2.f * (p.data[0] - 3.f)};
    opt.step(0.1f);
  }
  CHECK(std::abs(p.data[0] - 3.f) <= 0.2f);
}

TEST_CASE("adam refuses to step a parameter without a gradient") {
  Tensor p = Tensor::zeros({2});
  p.requires_grad = true;
  AdamState opt({{"w", &p}});
  CHECK_THROWS_WITH_AS(opt.step(0.1f), doctest::Contains("'w'"), StateError);
}

TEST_CASE("zero gradients leave the parameter unchanged") {
  Tensor p = Tensor::from({2}, {1.5f, -2.5f});
  p.requires_grad = true;
  AdamState opt({{"p", &p}});
  for (int i = 0; i < 5; ++i) {
    p.zero_grad();
    opt.step(0.1f);
  }
  CHECK(p.data[0] == doctest::Approx(1.5f));
  CHECK(p.data[1] == doctest::Approx(-2.5f));
}

TEST_CASE("linear_lr interpolates endpoints inclusively") {
  CHECK(linear_lr(1e-3f, 1e-5f, 0, 500) == doctest::Approx(1e-3f));
  CHECK(linear_lr(1e-3f, 1e-5f, 499, 500) == doctest::Approx(1e-5f));
  float mid = linear_lr(1.f, 0.f, 250, 501);
  CHECK(mid == doctest::Approx(0.5f));
}
