#include "caselab/tape.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "caselab/errors.hpp"
#include "kernels.hpp"

namespace caselab {

namespace {

using kernels::conv_out_dim;

struct EvalView {
  OpKind kind;
  int i0 = 0;
  int i1 = 0;
  float f0 = 0.f;
  const std::vector<int>* labels = nullptr;
  std::vector<int> out_shape;
  std::vector<std::vector<int>> pshapes;
};

int64_t spatial_size(const std::vector<int>& shape) {
  int64_t s = 1;
  for (size_t i = 2; i < shape.size(); ++i) s *= shape[i];
  return s;
}

// Single forward implementation shared by the f32 pass and the f64 replay.
template <typename T>
void eval_op(const EvalView& v, const std::vector<const T*>& pv,
             std::vector<T>& out, std::vector<T>* aux0, std::vector<T>* aux1) {
  auto& ctr = kernels::mac_counter();
  switch (v.kind) {
    case OpKind::kLeaf:
    case OpKind::kInput:
      throw StateError("eval_op on a leaf");
    case OpKind::kAdd: {
      for (size_t i = 0; i < out.size(); ++i) out[i] = pv[0][i] + pv[1][i];
      break;
    }
    case OpKind::kSub: {
      for (size_t i = 0; i < out.size(); ++i) out[i] = pv[0][i] - pv[1][i];
      break;
    }
    case OpKind::kMul: {
      ctr.pointwise += out.size();
      for (size_t i = 0; i < out.size(); ++i) out[i] = pv[0][i] * pv[1][i];
      break;
    }
    case OpKind::kScale: {
      ctr.pointwise += out.size();
      T c = static_cast<T>(v.f0);
      for (size_t i = 0; i < out.size(); ++i) out[i] = pv[0][i] * c;
      break;
    }
    case OpKind::kRelu: {
      for (size_t i = 0; i < out.size(); ++i)
        out[i] = pv[0][i] > T(0) ? pv[0][i] : T(0);
      break;
    }
    case OpKind::kSilu: {
      ctr.pointwise += out.size();
      for (size_t i = 0; i < out.size(); ++i)
        out[i] = kernels::silu_val(pv[0][i]);
      break;
    }
    case OpKind::kSigmoid: {
      for (size_t i = 0; i < out.size(); ++i)
        out[i] = kernels::sigmoid_val(pv[0][i]);
      break;
    }
    case OpKind::kTanh: {
      for (size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(pv[0][i]);
      break;
    }
    case OpKind::kMatmul: {
      int m = v.pshapes[0][0], k = v.pshapes[0][1], n = v.pshapes[1][1];
      std::fill(out.begin(), out.end(), T(0));
      kernels::gemm_nn(out.data(), pv[0], pv[1], m, n, k);
      break;
    }
    case OpKind::kLinear: {
      int m = v.pshapes[0][0], in = v.pshapes[0][1], o = v.pshapes[1][0];
      std::fill(out.begin(), out.end(), T(0));
      kernels::gemm_nt(out.data(), pv[0], pv[1], m, o, in);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < o; ++j) out[static_cast<size_t>(i) * o + j] += pv[2][j];
      break;
    }
    case OpKind::kConv2d: {
      int n = v.pshapes[0][0], cin = v.pshapes[0][1];
      int h = v.pshapes[0][2], w = v.pshapes[0][3];
      int cout = v.pshapes[1][0], kk = v.pshapes[1][2];
      int stride = v.i0, padding = v.i1;
      int oh = conv_out_dim(h, kk, stride, padding);
      int ow = conv_out_dim(w, kk, stride, padding);
      int64_t patch = static_cast<int64_t>(cin) * kk * kk;
      int64_t ohow = static_cast<int64_t>(oh) * ow;
      std::vector<T> cols(static_cast<size_t>(patch * ohow));
      std::fill(out.begin(), out.end(), T(0));
      for (int ni = 0; ni < n; ++ni) {
        const T* xi = pv[0] + static_cast<int64_t>(ni) * cin * h * w;
        T* yi = out.data() + static_cast<int64_t>(ni) * cout * ohow;
        kernels::im2col(xi, cols.data(), 1, cin, h, w, kk, stride, padding);
        kernels::gemm_nn(yi, pv[1], cols.data(), cout, static_cast<int>(ohow),
                         static_cast<int>(patch));
        for (int co = 0; co < cout; ++co)
          for (int64_t s = 0; s < ohow; ++s) yi[co * ohow + s] += pv[2][co];
      }
      break;
    }
    case OpKind::kGlobalAvgPool: {
      int n = v.pshapes[0][0], c = v.pshapes[0][1];
      int64_t sp = spatial_size(v.pshapes[0]);
      for (int i = 0; i < n; ++i) {
        for (int ci = 0; ci < c; ++ci) {
          const T* src = pv[0] + (static_cast<int64_t>(i) * c + ci) * sp;
          T acc = 0;
          for (int64_t s = 0; s < sp; ++s) acc += src[s];
          out[static_cast<size_t>(i) * c + ci] = acc / static_cast<T>(sp);
        }
      }
      break;
    }
    case OpKind::kMeanRows: {
      int n = v.pshapes[0][0], c = v.pshapes[0][1];
      for (int j = 0; j < c; ++j) {
        T acc = 0;
        for (int i = 0; i < n; ++i) acc += pv[0][static_cast<size_t>(i) * c + j];
        out[static_cast<size_t>(j)] = acc / static_cast<T>(n);
      }
      break;
    }
    case OpKind::kStandardize: {
      int n = v.pshapes[0][0], c = v.pshapes[0][1];
      ctr.pointwise += out.size();
      T eps = static_cast<T>(v.f0);
      for (int i = 0; i < n; ++i) {
        const T* row = pv[0] + static_cast<int64_t>(i) * c;
        T* orow = out.data() + static_cast<int64_t>(i) * c;
        T mu = 0;
        for (int j = 0; j < c; ++j) mu += row[j];
        mu /= static_cast<T>(c);
        T var = 0;
        for (int j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<T>(c);
        T sd = std::sqrt(var);
        T d = sd + eps;
        for (int j = 0; j < c; ++j) orow[j] = (row[j] - mu) / d;
        if (aux0) (*aux0)[static_cast<size_t>(i)] = mu;
        if (aux1) (*aux1)[static_cast<size_t>(i)] = sd;
      }
      break;
    }
    case OpKind::kScaleChannels: {
      int n = v.pshapes[0][0], c = v.pshapes[0][1];
      int64_t sp = spatial_size(v.pshapes[0]);
      ctr.pointwise += out.size();
      for (int i = 0; i < n; ++i)
        for (int ci = 0; ci < c; ++ci) {
          int64_t base = (static_cast<int64_t>(i) * c + ci) * sp;
          T gv = pv[1][ci];
          for (int64_t s = 0; s < sp; ++s) out[base + s] = pv[0][base + s] * gv;
        }
      break;
    }
    case OpKind::kScaleChannelsPerRow: {
      int n = v.pshapes[0][0], c = v.pshapes[0][1];
      int64_t sp = spatial_size(v.pshapes[0]);
      ctr.pointwise += out.size();
      for (int i = 0; i < n; ++i)
        for (int ci = 0; ci < c; ++ci) {
          int64_t base = (static_cast<int64_t>(i) * c + ci) * sp;
          T gv = pv[1][static_cast<size_t>(i) * c + ci];
          for (int64_t s = 0; s < sp; ++s) out[base + s] = pv[0][base + s] * gv;
        }
      break;
    }
    case OpKind::kShiftChannels: {
      int n = v.pshapes[0][0], c = v.pshapes[0][1];
      int64_t sp = spatial_size(v.pshapes[0]);
      for (int i = 0; i < n; ++i)
        for (int ci = 0; ci < c; ++ci) {
          int64_t base = (static_cast<int64_t>(i) * c + ci) * sp;
          T sv = pv[1][ci];
          for (int64_t s = 0; s < sp; ++s) out[base + s] = pv[0][base + s] + sv;
        }
      break;
    }
    case OpKind::kBatchNormInference: {
      int n = v.pshapes[0][0], c = v.pshapes[0][1];
      int64_t sp = spatial_size(v.pshapes[0]);
      ctr.pointwise += out.size();
      T eps = static_cast<T>(v.f0);
      for (int ci = 0; ci < c; ++ci) {
        T inv = T(1) / std::sqrt(pv[4][ci] + eps);
        T gc = pv[1][ci] * inv;
        T bc = pv[2][ci] - pv[3][ci] * gc;
        for (int i = 0; i < n; ++i) {
          int64_t base = (static_cast<int64_t>(i) * c + ci) * sp;
          for (int64_t s = 0; s < sp; ++s) out[base + s] = pv[0][base + s] * gc + bc;
        }
      }
      break;
    }
    case OpKind::kBatchNormTraining: {
      int n = v.pshapes[0][0], c = v.pshapes[0][1];
      int64_t sp = spatial_size(v.pshapes[0]);
      int64_t m = static_cast<int64_t>(n) * sp;
      ctr.pointwise += out.size();
      T eps = static_cast<T>(v.f0);
      for (int ci = 0; ci < c; ++ci) {
        T mu = 0;
        for (int i = 0; i < n; ++i) {
          int64_t base = (static_cast<int64_t>(i) * c + ci) * sp;
          for (int64_t s = 0; s < sp; ++s) mu += pv[0][base + s];
        }
        mu /= static_cast<T>(m);
        T var = 0;
        for (int i = 0; i < n; ++i) {
          int64_t base = (static_cast<int64_t>(i) * c + ci) * sp;
          for (int64_t s = 0; s < sp; ++s) {
            T d = pv[0][base + s] - mu;
            var += d * d;
          }
        }
        var /= static_cast<T>(m);
        T inv = T(1) / std::sqrt(var + eps);
        for (int i = 0; i < n; ++i) {
          int64_t base = (static_cast<int64_t>(i) * c + ci) * sp;
          for (int64_t s = 0; s < sp; ++s)
            out[base + s] = pv[1][ci] * (pv[0][base + s] - mu) * inv + pv[2][ci];
        }
        if (aux0) (*aux0)[static_cast<size_t>(ci)] = mu;
        if (aux1) (*aux1)[static_cast<size_t>(ci)] = var;
      }
      break;
    }
    case OpKind::kSoftmaxCrossEntropy: {
      int n = v.pshapes[0][0], k = v.pshapes[0][1];
      T total = 0;
      for (int i = 0; i < n; ++i) {
        const T* row = pv[0] + static_cast<int64_t>(i) * k;
        T mx = row[0];
        for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        T se = 0;
        for (int j = 0; j < k; ++j) se += std::exp(row[j] - mx);
        T lse = mx + std::log(se);
        total += lse - row[(*v.labels)[static_cast<size_t>(i)]];
        if (aux0)
          for (int j = 0; j < k; ++j)
            (*aux0)[static_cast<size_t>(i) * k + j] = std::exp(row[j] - lse);
      }
      out[0] = total / static_cast<T>(n);
      break;
    }
    case OpKind::kSum: {
      T acc = 0;
      int64_t pn = 1;
      for (int d : v.pshapes[0]) pn *= d;
      for (int64_t i = 0; i < pn; ++i) acc += pv[0][i];
      out[0] = acc;
      break;
    }
    case OpKind::kReshape: {
      std::copy(pv[0], pv[0] + out.size(), out.begin());
      break;
    }
    case OpKind::kSliceCols: {
      int n = v.pshapes[0][0], c = v.pshapes[0][1];
      int start = v.i0, len = v.i1;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < len; ++j)
          out[static_cast<size_t>(i) * len + j] =
              pv[0][static_cast<int64_t>(i) * c + start + j];
      break;
    }
  }
}

}  // namespace

const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kInput: return "input";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kRelu: return "relu";
    case OpKind::kSilu: return "silu";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kTanh: return "tanh";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kLinear: return "linear";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kGlobalAvgPool: return "global_avg_pool";
    case OpKind::kMeanRows: return "mean_rows";
    case OpKind::kStandardize: return "standardize";
    case OpKind::kScaleChannels: return "scale_channels";
    case OpKind::kScaleChannelsPerRow: return "scale_channels_per_row";
    case OpKind::kShiftChannels: return "shift_channels";
    case OpKind::kBatchNormInference: return "batchnorm_inference";
    case OpKind::kBatchNormTraining: return "batchnorm_training";
    case OpKind::kSoftmaxCrossEntropy: return "softmax_cross_entropy";
    case OpKind::kSum: return "sum";
    case OpKind::kReshape: return "reshape";
    case OpKind::kSliceCols: return "slice_cols";
  }
  return "?";
}

const Tensor& Var::value() const {
  if (!tape_) throw StateError("Var::value on an empty handle");
  return tape_->value(*this);
}

int Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

Tape::Node& Tape::node(Var v) {
  if (v.tape_ != this) throw StateError("Var belongs to a different tape");
  return nodes_[static_cast<size_t>(v.id_)];
}

const Tape::Node& Tape::node(Var v) const {
  if (v.tape_ != this) throw StateError("Var belongs to a different tape");
  return nodes_[static_cast<size_t>(v.id_)];
}

void Tape::require_same_tape(Var a, Var b) const {
  if (a.tape_ != this || b.tape_ != this)
    throw StateError("op arguments live on different tapes");
}

const Tensor& Tape::value(Var v) const { return node(v).value; }

OpKind Tape::kind_of(Var v) const { return node(v).kind; }

int Tape::leaf_id_of(const Tensor* t) const {
  for (size_t i = 0; i < nodes_.size(); ++i)
    if (nodes_[i].kind == OpKind::kLeaf && nodes_[i].bound == t)
      return static_cast<int>(i);
  return -1;
}

std::vector<float> Tape::grad_of(Var v) const {
  const Node& n = node(v);
  if (!n.grad.empty()) return n.grad;
  return std::vector<float>(n.value.data.size(), 0.f);
}

Var Tape::leaf(Tensor& bound) {
  Node n;
  n.kind = OpKind::kLeaf;
  n.value = bound;  // snapshot
  n.value.grad.clear();
  n.requires_grad = bound.requires_grad;
  n.bound = &bound;
  check_finite(n.value, "leaf");
  return Var(this, push(std::move(n)));
}

Var Tape::input(Tensor value) {
  Node n;
  n.kind = OpKind::kInput;
  n.value = std::move(value);
  n.value.requires_grad = false;
  n.value.grad.clear();
  n.requires_grad = false;
  check_finite(n.value, "input");
  return Var(this, push(std::move(n)));
}

namespace {

EvalView view_of(OpKind kind, int i0, int i1, float f0,
                 const std::vector<int>* labels,
                 const std::vector<int>& out_shape,
                 std::vector<std::vector<int>> pshapes) {
  EvalView v;
  v.kind = kind;
  v.i0 = i0;
  v.i1 = i1;
  v.f0 = f0;
  v.labels = labels;
  v.out_shape = out_shape;
  v.pshapes = std::move(pshapes);
  return v;
}

}  // namespace

void Tape::forward_op(Node& n) {
  std::vector<std::vector<int>> pshapes;
  std::vector<const float*> pv;
  bool rg = false;
  for (int p : n.parents) {
    const Node& pn = nodes_[static_cast<size_t>(p)];
    pshapes.push_back(pn.value.shape);
    pv.push_back(pn.value.data.data());
    rg = rg || pn.requires_grad;
  }
  n.requires_grad = rg;
  n.value.data.assign(static_cast<size_t>(shape_numel(n.value.shape)), 0.f);

  std::vector<float>* a0 = nullptr;
  std::vector<float>* a1 = nullptr;
  if (n.kind == OpKind::kStandardize) {
    n.aux0.assign(static_cast<size_t>(n.value.shape[0]), 0.f);
    n.aux1.assign(static_cast<size_t>(n.value.shape[0]), 0.f);
    a0 = &n.aux0;
    a1 = &n.aux1;
  } else if (n.kind == OpKind::kBatchNormTraining) {
    n.aux0.assign(static_cast<size_t>(n.value.shape[1]), 0.f);
    n.aux1.assign(static_cast<size_t>(n.value.shape[1]), 0.f);
    a0 = &n.aux0;
    a1 = &n.aux1;
  } else if (n.kind == OpKind::kSoftmaxCrossEntropy) {
    const auto& ls = nodes_[static_cast<size_t>(n.parents[0])].value.shape;
    n.aux0.assign(static_cast<size_t>(ls[0]) * ls[1], 0.f);
    a0 = &n.aux0;
  }

  EvalView v = view_of(n.kind, n.i0, n.i1, n.f0, &n.labels, n.value.shape,
                       std::move(pshapes));
  eval_op<float>(v, pv, n.value.data, a0, a1);
  check_finite(n.value, op_name(n.kind));
}

// ---- builders ----

namespace {
Tape* tape_of(Var a) {
  if (!a.valid()) throw StateError("op on an empty Var");
  return a.tape();
}
}  // namespace

Var add(Var a, Var b) {
  Tape* t = tape_of(a);
  t->require_same_tape(a, b);
  if (!a.value().same_shape(b.value()))
    throw ShapeError("add: shapes " + shape_str(a.value().shape) + " vs " +
                     shape_str(b.value().shape));
  Tape::Node n;
  n.kind = OpKind::kAdd;
  n.parents = {a.id(), b.id()};
  n.value.shape = a.value().shape;
  t->forward_op(n);
  return t->wrap(t->push(std::move(n)));
}

Var sub(Var a, Var b) {
  Tape* t = tape_of(a);
  t->require_same_tape(a, b);
  if (!a.value().same_shape(b.value()))
    throw ShapeError("sub: shapes " + shape_str(a.value().shape) + " vs " +
                     shape_str(b.value().shape));
  Tape::Node n;
  n.kind = OpKind::kSub;
  n.parents = {a.id(), b.id()};
  n.value.shape = a.value().shape;
  t->forward_op(n);
  return t->wrap(t->push(std::move(n)));
}

Var mul(Var a, Var b) {
  Tape* t = tape_of(a);
  t->require_same_tape(a, b);
  if (!a.value().same_shape(b.value()))
    throw ShapeError("mul: shapes " + shape_str(a.value().shape) + " vs " +
                     shape_str(b.value().shape));
  Tape::Node n;
  n.kind = OpKind::kMul;
  n.parents = {a.id(), b.id()};
  n.value.shape = a.value().shape;
  t->forward_op(n);
  return t->wrap(t->push(std::move(n)));
}

Var scale(Var x, float c) {
  Tape* t = tape_of(x);
  Tape::Node n;
  n.kind = OpKind::kScale;
  n.parents = {x.id()};
  n.f0 = c;
  n.value.shape = x.value().shape;
  t->forward_op(n);
  return t->wrap(t->push(std::move(n)));
}

Var Tape::unary(Var x, OpKind k) {
  Tape* t = tape_of(x);
  Tape::Node n;
  n.kind = k;
  n.parents = {x.id()};
  n.value.shape = x.value().shape;
  t->forward_op(n);
  return t->wrap(t->push(std::move(n)));
}

Var relu(Var x) { return Tape::unary(x, OpKind::kRelu); }
Var silu(Var x) { return Tape::unary(x, OpKind::kSilu); }
Var sigmoid(Var x) { return Tape::unary(x, OpKind::kSigmoid); }
Var tanh(Var x) { return Tape::unary(x, OpKind::kTanh); }

Var matmul(Var a, Var b) {
  Tape* t = tape_of(a);
  t->require_same_tape(a, b);
  const auto& sa = a.value().shape;
  const auto& sb = b.value().shape;
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
    throw ShapeError("matmul: " + shape_str(sa) + " x " + shape_str(sb));
  Tape::Node n;
  n.kind = OpKind::kMatmul;
  n.parents = {a.id(), b.id()};
  n.value.shape = {sa[0], sb[1]};
  t->forward_op(n);
  return t->wrap(t->push(std::move(n)));
}

Var linear(Var x, Var w, Var b) {
  Tape* t = tape_of(x);
  t->require_same_tape(x, w);
  t->require_same_tape(x, b);
  const auto& sx = x.value().shape;
  const auto& sw = w.value().shape;
  const auto& sb = b.value().shape;
  if (sx.size() != 2 || sw.size() != 2 || sb.size() != 1 || sx[1] != sw[1] ||
      sb[0] != sw[0])
    throw ShapeError("linear: x" + shape_str(sx) + " w" + shape_str(sw) + " b" +
                     shape_str(sb));
  Tape::Node n;
  n.kind = OpKind::kLinear;
  n.parents = {x.id(), w.id(), b.id()};
  n.value.shape = {sx[0], sw[0]};
  t->forward_op(n);
  return t->wrap(t->push(std::move(n)));
}

Var conv2d(Var x, Var w, Var b, int stride, int padding) {
  Tape* t = tape_of(x);
  t->require_same_tape(x, w);
  t->require_same_tape(x, b);
  const auto& sx = x.value().shape;
  const auto& sw = w.value().shape;
  const auto& sb = b.value().shape;
  if (sx.size() != 4 || sw.size() != 4 || sb.size() != 1)
    throw ShapeError("conv2d: x" + shape_str(sx) + " w" + shape_str(sw));
  if (sw[2] != sw[3]) throw ShapeError("conv2d: non-square kernel");
  if (sx[1] != sw[1]) throw ShapeError("conv2d: channel mismatch");
  if (sb[0] != sw[0]) throw ShapeError("conv2d: bias length mismatch");
  if (stride < 1 || padding < 0) throw ShapeError("conv2d: bad stride/padding");
  int oh = conv_out_dim(sx[2], sw[2], stride, padding);
  int ow = conv_out_dim(sx[3], sw[3], stride, padding);
  if (oh < 1 || ow < 1) throw ShapeError("conv2d: empty output");
  Tape::Node n;
  n.kind = OpKind::kConv2d;
  n.parents = {x.id(), w.id(), b.id()};
  n.i0 = stride;
  n.i1 = padding;
  n.value.shape = {sx[0], sw[0], oh, ow};
  t->forward_op(n);
  return t->wrap(t->push(std::move(n)));
}

Var global_avg_pool(Var x) {
  Tape* t = tape_of(x);
  const auto& sx = x.value().shape;
  if (sx.size() != 4) throw ShapeError("global_avg_pool: want rank 4, got " + shape_str(sx));
  Tape::Node n;
  n.kind = OpKind::kGlobalAvgPool;
  n.parents = {x.id()};
  n.value.shape = {sx[0], sx[1]};
  t->forward_op(n);
  return t->wrap(t->push(std::move(n)));
}

Var mean_rows(Var x) {
  Tape* t = tape_of(x);
  const auto& sx = x.value().shape;
  if (sx.size() != 2 || sx[0] < 1)
    throw ShapeError("mean_rows: want rank 2 with rows >= 1, got " + shape_str(sx));
  Tape::Node n;
  n.kind = OpKind::kMeanRows;
  n.parents = {x.id()};
  n.value.shape = {1, sx[1]};
  t->forward_op(n);
  return t->wrap(t->push(std::move(n)));
}

Var standardize(Var x, float eps) {
  Tape* t = tape_of(x);
  const auto& sx = x.value().shape;
  if (sx.size() != 2) throw ShapeError("standardize: want rank 2, got " + shape_str(sx));
  if (eps < 0.f) throw ShapeError("standardize: negative eps");
  Tape::Node n;
  n.kind = OpKind::kStandardize;
  n.parents = {x.id()};
  n.f0 = eps;
  n.value.shape = sx;
  t->forward_op(n);
  return t->wrap(t->push(std::move(n)));
}

namespace {
void check_channel_vec(const std::vector<int>& sx, const std::vector<int>& sg,
                       const char* what) {
  if (sx.size() < 2) throw ShapeError(std::string(what) + ": want rank >= 2 input");
  if (!(sg.size() == 1 && sg[0] == sx[1]))
    throw ShapeError(std::string(what) + ": vector shape " + shape_str(sg) +
                     " does not match channels of " + shape_str(sx));
}
}  // namespace

Var scale_channels(Var x, Var gamma) {
  Tape* t = tape_of(x);
  t->require_same_tape(x, gamma);
  check_channel_vec(x.value().shape, gamma.value().shape, "scale_channels");
  Tape::Node n;
  n.kind = OpKind::kScaleChannels;
  n.parents = {x.id(), gamma.id()};
  n.value.shape = x.value().shape;
  t->forward_op(n);
  return t->wrap(t->push(std::move(n)));
}

Var scale_channels_per_row(Var x, Var gamma) {
  Tape* t = tape_of(x);
  t->require_same_tape(x, gamma);
  const auto& sx = x.value().shape;
  const auto& sg = gamma.value().shape;
  if (sx.size() < 2 || sg.size() != 2 || sg[0] != sx[0] || sg[1] != sx[1])
    throw ShapeError("scale_channels_per_row: gamma " + shape_str(sg) +
                     " for input " + shape_str(sx));
  Tape::Node n;
  n.kind = OpKind::kScaleChannelsPerRow;
  n.parents = {x.id(), gamma.id()};
  n.value.shape = sx;
  t->forward_op(n);
  return t->wrap(t->push(std::move(n)));
}

Var shift_channels(Var x, Var shift) {
  Tape* t = tape_of(x);
  t->require_same_tape(x, shift);
  check_channel_vec(x.value().shape, shift.value().shape, "shift_channels");
  Tape::Node n;
  n.kind = OpKind::kShiftChannels;
  n.parents = {x.id(), shift.id()};
  n.value.shape = x.value().shape;
  t->forward_op(n);
  return t->wrap(t->push(std::move(n)));
}

namespace {
void check_bn_args(const std::vector<int>& sx, const std::vector<int>& sv,
                   const char* what) {
  if (sx.size() != 4) throw ShapeError(std::string(what) + ": want rank 4 input");
  if (sv.size() != 1 || sv[0] != sx[1])
    throw ShapeError(std::string(what) + ": per-channel vector shape " +
                     shape_str(sv) + " for input " + shape_str(sx));
}
}  // namespace

Var batchnorm_inference(Var x, Var gamma, Var beta, Var running_mean,
                        Var running_var, float eps) {
  Tape* t = tape_of(x);
  for (Var v : {gamma, beta, running_mean, running_var}) t->require_same_tape(x, v);
  check_bn_args(x.value().shape, gamma.value().shape, "batchnorm_inference");
  check_bn_args(x.value().shape, running_var.value().shape, "batchnorm_inference");
  Tape::Node n;
  n.kind = OpKind::kBatchNormInference;
  n.parents = {x.id(), gamma.id(), beta.id(), running_mean.id(), running_var.id()};
  n.f0 = eps;
  n.value.shape = x.value().shape;
  t->forward_op(n);
  return t->wrap(t->push(std::move(n)));
}

Var batchnorm_training(Var x, Var gamma, Var beta, float eps) {
  Tape* t = tape_of(x);
  t->require_same_tape(x, gamma);
  t->require_same_tape(x, beta);
  check_bn_args(x.value().shape, gamma.value().shape, "batchnorm_training");
  Tape::Node n;
  n.kind = OpKind::kBatchNormTraining;
  n.parents = {x.id(), gamma.id(), beta.id()};
  n.f0 = eps;
  n.value.shape = x.value().shape;
  t->forward_op(n);
  return t->wrap(t->push(std::move(n)));
}

Var softmax_cross_entropy(Var logits, const std::vector<int>& labels) {
  Tape* t = tape_of(logits);
  const auto& sl = logits.value().shape;
  if (sl.size() != 2 || sl[0] < 1)
    throw ShapeError("softmax_cross_entropy: logits " + shape_str(sl));
  if (static_cast<int>(labels.size()) != sl[0])
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                     " labels for " + std::to_string(sl[0]) + " rows");
  for (int y : labels)
    if (y < 0 || y >= sl[1])
      throw ShapeError("softmax_cross_entropy: label " + std::to_string(y) +
                       " out of range [0," + std::to_string(sl[1]) + ")");
  Tape::Node n;
  n.kind = OpKind::kSoftmaxCrossEntropy;
  n.parents = {logits.id()};
  n.labels = labels;
  n.value.shape = {};
  t->forward_op(n);
  return t->wrap(t->push(std::move(n)));
}

Var sum(Var x) {
  Tape* t = tape_of(x);
  Tape::Node n;
  n.kind = OpKind::kSum;
  n.parents = {x.id()};
  n.value.shape = {};
  t->forward_op(n);
  return t->wrap(t->push(std::move(n)));
}

Var reshape(Var x, std::vector<int> new_shape) {
  Tape* t = tape_of(x);
  if (shape_numel(new_shape) != x.value().numel())
    throw ShapeError("reshape: " + shape_str(x.value().shape) + " -> " +
                     shape_str(new_shape));
  Tape::Node n;
  n.kind = OpKind::kReshape;
  n.parents = {x.id()};
  n.value.shape = std::move(new_shape);
  t->forward_op(n);
  return t->wrap(t->push(std::move(n)));
}

Var slice_cols(Var x, int start, int len) {
  Tape* t = tape_of(x);
  const auto& sx = x.value().shape;
  if (sx.size() != 2 || start < 0 || len < 1 || start + len > sx[1])
    throw ShapeError("slice_cols: [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") of " + shape_str(sx));
  Tape::Node n;
  n.kind = OpKind::kSliceCols;
  n.parents = {x.id()};
  n.i0 = start;
  n.i1 = len;
  n.value.shape = {sx[0], len};
  t->forward_op(n);
  return t->wrap(t->push(std::move(n)));
}

// ---- backward ----

void Tape::backward_op(int id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  const std::vector<float>& g = n.grad;
  auto pnode = [&](int slot) -> Node& {
    return nodes_[static_cast<size_t>(n.parents[static_cast<size_t>(slot)])];
  };
  auto pgrad = [&](int slot) -> std::vector<float>* {
    Node& p = pnode(slot);
    if (!p.requires_grad) return nullptr;
    if (p.grad.empty()) p.grad.assign(p.value.data.size(), 0.f);
    return &p.grad;
  };
  auto pval = [&](int slot) -> const std::vector<float>& {
    return pnode(slot).value.data;
  };

  switch (n.kind) {
    case OpKind::kLeaf:
    case OpKind::kInput:
      return;
    case OpKind::kAdd: {
      if (auto* d = pgrad(0))
        for (size_t i = 0; i < g.size(); ++i) (*d)[i] += g[i];
      if (auto* d = pgrad(1))
        for (size_t i = 0; i < g.size(); ++i) (*d)[i] += g[i];
      return;
    }
    case OpKind::kSub: {
      if (auto* d = pgrad(0))
        for (size_t i = 0; i < g.size(); ++i) (*d)[i] += g[i];
      if (auto* d = pgrad(1))
        for (size_t i = 0; i < g.size(); ++i) (*d)[i] -= g[i];
      return;
    }
    case OpKind::kMul: {
      if (auto* d = pgrad(0)) {
        const auto& v1 = pval(1);
        for (size_t i = 0; i < g.size(); ++i) (*d)[i] += g[i] * v1[i];
      }
      if (auto* d = pgrad(1)) {
        const auto& v0 = pval(0);
        for (size_t i = 0; i < g.size(); ++i) (*d)[i] += g[i] * v0[i];
      }
      return;
    }
    case OpKind::kScale: {
      if (auto* d = pgrad(0))
        for (size_t i = 0; i < g.size(); ++i) (*d)[i] += g[i] * n.f0;
      return;
    }
    case OpKind::kRelu: {
      if (auto* d = pgrad(0)) {
        const auto& x = pval(0);
        for (size_t i = 0; i < g.size(); ++i)
          if (x[i] > 0.f) (*d)[i] += g[i];
      }
      return;
    }
    case OpKind::kSilu: {
      if (auto* d = pgrad(0)) {
        const auto& x = pval(0);
        for (size_t i = 0; i < g.size(); ++i) {
          float s = kernels::sigmoid_val(x[i]);
          (*d)[i] += g[i] * s * (1.f + x[i] * (1.f - s));
        }
      }
      return;
    }
    case OpKind::kSigmoid: {
      if (auto* d = pgrad(0)) {
        const auto& y = n.value.data;
        for (size_t i = 0; i < g.size(); ++i) (*d)[i] += g[i] * y[i] * (1.f - y[i]);
      }
      return;
    }
    case OpKind::kTanh: {
      if (auto* d = pgrad(0)) {
        const auto& y = n.value.data;
        for (size_t i = 0; i < g.size(); ++i) (*d)[i] += g[i] * (1.f - y[i] * y[i]);
      }
      return;
    }
    case OpKind::kMatmul: {
      int m = pnode(0).value.shape[0];
      int k = pnode(0).value.shape[1];
      int nn = pnode(1).value.shape[1];
      if (auto* d = pgrad(0))
        kernels::gemm_nt(d->data(), g.data(), pval(1).data(), m, k, nn);
      if (auto* d = pgrad(1))
        kernels::gemm_tn(d->data(), pval(0).data(), g.data(), k, nn, m);
      return;
    }
    case OpKind::kLinear: {
      int m = pnode(0).value.shape[0];
      int in = pnode(0).value.shape[1];
      int out = pnode(1).value.shape[0];
      if (auto* d = pgrad(0))
        kernels::gemm_nn(d->data(), g.data(), pval(1).data(), m, in, out);
      if (auto* d = pgrad(1))
        kernels::gemm_tn(d->data(), g.data(), pval(0).data(), out, in, m);
      if (auto* d = pgrad(2)) {
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < out; ++j)
            (*d)[static_cast<size_t>(j)] += g[static_cast<size_t>(i) * out + j];
      }
      return;
    }
    case OpKind::kConv2d: {
      const auto& sx = pnode(0).value.shape;
      const auto& sw = pnode(1).value.shape;
      int nb = sx[0], cin = sx[1], h = sx[2], w = sx[3];
      int cout = sw[0], kk = sw[2];
      int stride = n.i0, padding = n.i1;
      int oh = conv_out_dim(h, kk, stride, padding);
      int ow = conv_out_dim(w, kk, stride, padding);
      int64_t patch = static_cast<int64_t>(cin) * kk * kk;
      int64_t ohow = static_cast<int64_t>(oh) * ow;
      auto* dx = pgrad(0);
      auto* dw = pgrad(1);
      auto* db = pgrad(2);
      std::vector<float> cols(static_cast<size_t>(patch * ohow));
      std::vector<float> dcols(static_cast<size_t>(patch * ohow));
      for (int ni = 0; ni < nb; ++ni) {
        const float* gy = g.data() + static_cast<int64_t>(ni) * cout * ohow;
        if (dw) {
          const float* xi = pval(0).data() + static_cast<int64_t>(ni) * cin * h * w;
          kernels::im2col(xi, cols.data(), 1, cin, h, w, kk, stride, padding);
          kernels::gemm_nt(dw->data(), gy, cols.data(), cout,
                           static_cast<int>(patch), static_cast<int>(ohow));
        }
        if (dx) {
          std::fill(dcols.begin(), dcols.end(), 0.f);
          kernels::gemm_tn(dcols.data(), pval(1).data(), gy,
                           static_cast<int>(patch), static_cast<int>(ohow), cout);
          kernels::col2im(dcols.data(),
                          dx->data() + static_cast<int64_t>(ni) * cin * h * w, 1,
                          cin, h, w, kk, stride, padding);
        }
        if (db) {
          for (int co = 0; co < cout; ++co) {
            float acc = 0.f;
            for (int64_t s = 0; s < ohow; ++s) acc += gy[co * ohow + s];
            (*db)[static_cast<size_t>(co)] += acc;
          }
        }
      }
      return;
    }
    case OpKind::kGlobalAvgPool: {
      if (auto* d = pgrad(0)) {
        const auto& sx = pnode(0).value.shape;
        int nb = sx[0], c = sx[1];
        int64_t sp = spatial_size(sx);
        float inv = 1.f / static_cast<float>(sp);
        for (int i = 0; i < nb; ++i)
          for (int ci = 0; ci < c; ++ci) {
            float gv = g[static_cast<size_t>(i) * c + ci] * inv;
            int64_t base = (static_cast<int64_t>(i) * c + ci) * sp;
            for (int64_t s = 0; s < sp; ++s) (*d)[static_cast<size_t>(base + s)] += gv;
          }
      }
      return;
    }
    case OpKind::kMeanRows: {
      if (auto* d = pgrad(0)) {
        const auto& sx = pnode(0).value.shape;
        int nb = sx[0], c = sx[1];
        float inv = 1.f / static_cast<float>(nb);
        for (int i = 0; i < nb; ++i)
          for (int j = 0; j < c; ++j)
            (*d)[static_cast<size_t>(i) * c + j] += g[static_cast<size_t>(j)] * inv;
      }
      return;
    }
    case OpKind::kStandardize: {
      if (auto* d = pgrad(0)) {
        const auto& sx = pnode(0).value.shape;
        const auto& x = pval(0);
        int nb = sx[0], c = sx[1];
        for (int i = 0; i < nb; ++i) {
          const float* xrow = x.data() + static_cast<int64_t>(i) * c;
          const float* grow = g.data() + static_cast<int64_t>(i) * c;
          float* drow = d->data() + static_cast<int64_t>(i) * c;
          float mu = n.aux0[static_cast<size_t>(i)];
          float sd = n.aux1[static_cast<size_t>(i)];
          float den = sd + n.f0;
          float gbar = 0.f, s = 0.f;
          for (int j = 0; j < c; ++j) {
            gbar += grow[j];
            s += grow[j] * (xrow[j] - mu);
          }
          gbar /= static_cast<float>(c);
          for (int j = 0; j < c; ++j) {
            float v = (grow[j] - gbar) / den;
            // Subgradient at sd == 0: the centered values are all zero, so
            // the variance term is dropped rather than divided by zero.
            if (sd > 0.f)
              v -= s * (xrow[j] - mu) / (static_cast<float>(c) * sd * den * den);
            drow[j] += v;
          }
        }
      }
      return;
    }
    case OpKind::kScaleChannels: {
      const auto& sx = pnode(0).value.shape;
      int nb = sx[0], c = sx[1];
      int64_t sp = spatial_size(sx);
      if (auto* d = pgrad(0)) {
        const auto& gm = pval(1);
        for (int i = 0; i < nb; ++i)
          for (int ci = 0; ci < c; ++ci) {
            int64_t base = (static_cast<int64_t>(i) * c + ci) * sp;
            for (int64_t s = 0; s < sp; ++s)
              (*d)[static_cast<size_t>(base + s)] +=
                  g[static_cast<size_t>(base + s)] * gm[static_cast<size_t>(ci)];
          }
      }
      if (auto* d = pgrad(1)) {
        const auto& x = pval(0);
        for (int i = 0; i < nb; ++i)
          for (int ci = 0; ci < c; ++ci) {
            int64_t base = (static_cast<int64_t>(i) * c + ci) * sp;
            float acc = 0.f;
            for (int64_t s = 0; s < sp; ++s)
              acc += g[static_cast<size_t>(base + s)] * x[static_cast<size_t>(base + s)];
            (*d)[static_cast<size_t>(ci)] += acc;
          }
      }
      return;
    }
    case OpKind::kScaleChannelsPerRow: {
      const auto& sx = pnode(0).value.shape;
      int nb = sx[0], c = sx[1];
      int64_t sp = spatial_size(sx);
      if (auto* d = pgrad(0)) {
        const auto& gm = pval(1);
        for (int i = 0; i < nb; ++i)
          for (int ci = 0; ci < c; ++ci) {
            int64_t base = (static_cast<int64_t>(i) * c + ci) * sp;
            float gv = gm[static_cast<size_t>(i) * c + ci];
            for (int64_t s = 0; s < sp; ++s)
              (*d)[static_cast<size_t>(base + s)] += g[static_cast<size_t>(base + s)] * gv;
          }
      }
      if (auto* d = pgrad(1)) {
        const auto& x = pval(0);
        for (int i = 0; i < nb; ++i)
          for (int ci = 0; ci < c; ++ci) {
            int64_t base = (static_cast<int64_t>(i) * c + ci) * sp;
            float acc = 0.f;
            for (int64_t s = 0; s < sp; ++s)
              acc += g[static_cast<size_t>(base + s)] * x[static_cast<size_t>(base + s)];
            (*d)[static_cast<size_t>(i) * c + ci] += acc;
          }
      }
      return;
    }
    case OpKind::kShiftChannels: {
      const auto& sx = pnode(0).value.shape;
      int nb = sx[0], c = sx[1];
      int64_t sp = spatial_size(sx);
      if (auto* d = pgrad(0))
        for (size_t i = 0; i < g.size(); ++i) (*d)[i] += g[i];
      if (auto* d = pgrad(1)) {
        for (int i = 0; i < nb; ++i)
          for (int ci = 0; ci < c; ++ci) {
            int64_t base = (static_cast<int64_t>(i) * c + ci) * sp;
            float acc = 0.f;
            for (int64_t s = 0; s < sp; ++s) acc += g[static_cast<size_t>(base + s)];
            (*d)[static_cast<size_t>(ci)] += acc;
          }
      }
      return;
    }
    case OpKind::kBatchNormInference: {
      const auto& sx = pnode(0).value.shape;
      int nb = sx[0], c = sx[1];
      int64_t sp = spatial_size(sx);
      const auto& gamma = pval(1);
      const auto& rmean = pval(3);
      const auto& rvar = pval(4);
      auto* dx = pgrad(0);
      auto* dgamma = pgrad(1);
      auto* dbeta = pgrad(2);
      for (int ci = 0; ci < c; ++ci) {
        float inv = 1.f / std::sqrt(rvar[static_cast<size_t>(ci)] + n.f0);
        float dg = 0.f, db = 0.f;
        for (int i = 0; i < nb; ++i) {
          int64_t base = (static_cast<int64_t>(i) * c + ci) * sp;
          for (int64_t s = 0; s < sp; ++s) {
            float gv = g[static_cast<size_t>(base + s)];
            if (dx)
              (*dx)[static_cast<size_t>(base + s)] +=
                  gv * gamma[static_cast<size_t>(ci)] * inv;
            if (dgamma) {
              float xhat = (pval(0)[static_cast<size_t>(base + s)] -
                            rmean[static_cast<size_t>(ci)]) * inv;
              dg += gv * xhat;
            }
            db += gv;
          }
        }
        if (dgamma) (*dgamma)[static_cast<size_t>(ci)] += dg;
        if (dbeta) (*dbeta)[static_cast<size_t>(ci)] += db;
      }
      return;
    }
    case OpKind::kBatchNormTraining: {
      const auto& sx = pnode(0).value.shape;
      int nb = sx[0], c = sx[1];
      int64_t sp = spatial_size(sx);
      int64_t m = static_cast<int64_t>(nb) * sp;
      const auto& x = pval(0);
      const auto& gamma = pval(1);
      auto* dx = pgrad(0);
      auto* dgamma = pgrad(1);
      auto* dbeta = pgrad(2);
      for (int ci = 0; ci < c; ++ci) {
        float mu = n.aux0[static_cast<size_t>(ci)];
        float var = n.aux1[static_cast<size_t>(ci)];
        float inv = 1.f / std::sqrt(var + n.f0);
        float sum_g = 0.f, sum_gx = 0.f;
        for (int i = 0; i < nb; ++i) {
          int64_t base = (static_cast<int64_t>(i) * c + ci) * sp;
          for (int64_t s = 0; s < sp; ++s) {
            float gv = g[static_cast<size_t>(base + s)];
            sum_g += gv;
            sum_gx += gv * (x[static_cast<size_t>(base + s)] - mu);
          }
        }
        if (dgamma) (*dgamma)[static_cast<size_t>(ci)] += sum_gx * inv;
        if (dbeta) (*dbeta)[static_cast<size_t>(ci)] += sum_g;
        if (dx) {
          float gc = gamma[static_cast<size_t>(ci)];
          float k1 = gc * inv;
          float k2 = sum_g / static_cast<float>(m);
          float k3 = sum_gx * inv * inv / static_cast<float>(m);
          for (int i = 0; i < nb; ++i) {
            int64_t base = (static_cast<int64_t>(i) * c + ci) * sp;
            for (int64_t s = 0; s < sp; ++s) {
              float xc = x[static_cast<size_t>(base + s)] - mu;
              (*dx)[static_cast<size_t>(base + s)] +=
                  k1 * (g[static_cast<size_t>(base + s)] - k2 - xc * k3);
            }
          }
        }
      }
      return;
    }
    case OpKind::kSoftmaxCrossEntropy: {
      if (auto* d = pgrad(0)) {
        const auto& sl = pnode(0).value.shape;
        int nb = sl[0], k = sl[1];
        float gs = g[0] / static_cast<float>(nb);
        for (int i = 0; i < nb; ++i) {
          for (int j = 0; j < k; ++j) {
            float p = n.aux0[static_cast<size_t>(i) * k + j];
            float delta = (j == n.labels[static_cast<size_t>(i)]) ? 1.f : 0.f;
            (*d)[static_cast<size_t>(i) * k + j] += gs * (p - delta);
          }
        }
      }
      return;
    }
    case OpKind::kSum: {
      if (auto* d = pgrad(0))
        for (auto& dv : *d) dv += g[0];
      return;
    }
    case OpKind::kReshape: {
      if (auto* d = pgrad(0))
        for (size_t i = 0; i < g.size(); ++i) (*d)[i] += g[i];
      return;
    }
    case OpKind::kSliceCols: {
      if (auto* d = pgrad(0)) {
        int nb = pnode(0).value.shape[0];
        int c = pnode(0).value.shape[1];
        int start = n.i0, len = n.i1;
        for (int i = 0; i < nb; ++i)
          for (int j = 0; j < len; ++j)
            (*d)[static_cast<size_t>(i) * c + start + j] +=
                g[static_cast<size_t>(i) * len + j];
      }
      return;
    }
  }
}

void Tape::backward(Var loss) {
  Node& ln = node(loss);
  if (ln.value.numel() != 1) throw ShapeError("backward: loss must be scalar");
  for (auto& n : nodes_) n.grad.clear();
  ln.grad.assign(1, 1.f);
  for (int i = loss.id(); i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (n.grad.empty() || !n.requires_grad) continue;
    for (float gv : n.grad)
      if (!std::isfinite(gv))
        throw NumericError(std::string("backward through ") + op_name(n.kind) +
                           ": non-finite gradient");
    backward_op(i);
  }
  // Flush only after the whole reverse pass succeeded, so a NumericError
  // above leaves no partial gradient in any bound tensor.
  for (Node& n : nodes_) {
    if (n.kind != OpKind::kLeaf || !n.bound || !n.bound->requires_grad) continue;
    if (n.grad.empty()) {
      n.bound->ensure_grad();
    } else {
      n.bound->accumulate_grad(n.grad);
    }
  }
}

std::vector<const Tensor*> Tape::reachable_params(Var v) const {
  std::vector<const Tensor*> out;
  std::unordered_set<int> seen;
  std::vector<int> stack = {v.id()};
  std::vector<int> order;
  while (!stack.empty()) {
    int id = stack.back();
    stack.pop_back();
    if (!seen.insert(id).second) continue;
    order.push_back(id);
    const Node& n = nodes_[static_cast<size_t>(id)];
    for (int p : n.parents) stack.push_back(p);
  }
  std::sort(order.begin(), order.end());
  std::unordered_set<const Tensor*> dedup;
  for (int id : order) {
    const Node& n = nodes_[static_cast<size_t>(id)];
    if (n.kind == OpKind::kLeaf && n.bound && n.bound->requires_grad &&
        dedup.insert(n.bound).second)
      out.push_back(n.bound);
  }
  return out;
}

double Tape::replay_forward_f64(Var out, int perturbed_node, int64_t element,
                                double delta) const {
  if (out.tape() != this) throw StateError("replay: Var from a different tape");
  const Node& on = node(out);
  if (on.value.numel() != 1) throw ShapeError("replay: output must be scalar");
  std::vector<std::vector<double>> vals(static_cast<size_t>(out.id()) + 1);
  for (int i = 0; i <= out.id(); ++i) {
    const Node& n = nodes_[static_cast<size_t>(i)];
    auto& buf = vals[static_cast<size_t>(i)];
    if (n.kind == OpKind::kLeaf || n.kind == OpKind::kInput) {
      buf.assign(n.value.data.begin(), n.value.data.end());
      if (i == perturbed_node) {
        if (element < 0 || element >= static_cast<int64_t>(buf.size()))
          throw ShapeError("replay: element out of range");
        buf[static_cast<size_t>(element)] += delta;
      }
      continue;
    }
    std::vector<std::vector<int>> pshapes;
    std::vector<const double*> pv;
    for (int p : n.parents) {
      pshapes.push_back(nodes_[static_cast<size_t>(p)].value.shape);
      pv.push_back(vals[static_cast<size_t>(p)].data());
    }
    buf.assign(static_cast<size_t>(n.value.numel()), 0.0);
    EvalView v = view_of(n.kind, n.i0, n.i1, n.f0, &n.labels, n.value.shape,
                         std::move(pshapes));
    eval_op<double>(v, pv, buf, nullptr, nullptr);
  }
  return vals[static_cast<size_t>(out.id())][0];
}

const std::vector<float>& Tape::batch_mean(Var bn_out) const {
  const Node& n = node(bn_out);
  if (n.kind != OpKind::kBatchNormTraining)
    throw StateError("batch_mean: not a batchnorm_training node");
  return n.aux0;
}

const std::vector<float>& Tape::batch_var(Var bn_out) const {
  const Node& n = node(bn_out);
  if (n.kind != OpKind::kBatchNormTraining)
    throw StateError("batch_var: not a batchnorm_training node");
  return n.aux1;
}

}  // namespace caselab
