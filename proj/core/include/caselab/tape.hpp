#pragma once

#include <cstdint>
#include <vector>

#include "caselab/tensor.hpp"

namespace caselab {

enum class OpKind : uint8_t {
  kLeaf,
  kInput,
  kAdd,
  kSub,
  kMul,
  kScale,
  kRelu,
  kSilu,
  kSigmoid,
  kTanh,
  kMatmul,
  kLinear,
  kConv2d,
  kGlobalAvgPool,
  kMeanRows,
  kStandardize,
  kScaleChannels,
  kScaleChannelsPerRow,
  kShiftChannels,
  kBatchNormInference,
  kBatchNormTraining,
  kSoftmaxCrossEntropy,
  kSum,
  kReshape,
  kSliceCols,
};

const char* op_name(OpKind k);

class Tape;

// Handle to a tape node. Cheap value type.
class Var {
 public:
  Var() = default;
  const Tensor& value() const;
  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* t, int id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

// Wengert list. Records primitive ops in forward execution order; backward()
// walks the list once in reverse, accumulating gradients additively at
// fan-out. Because each node stores its op kind and attributes (not just a
// closure), the tape can also re-execute the forward pass in double
// precision, which is what the finite-difference harness differentiates.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // External tensor; value snapshotted now. After backward(), the gradient is
  // added into bound.grad when bound.requires_grad is set.
  Var leaf(Tensor& bound);
  // Owned constant.
  Var input(Tensor value);

  // Scalar loss only. Flushes leaf gradients only after the whole reverse
  // pass completes and is verified finite, so a NumericError leaves bound
  // tensors untouched.
  void backward(Var loss);

  const Tensor& value(Var v) const;
  // Gradient accumulated at a node by the last backward(); zeros if the node
  // was never reached.
  std::vector<float> grad_of(Var v) const;

  // Bound requires_grad tensors reachable from `v` along parent edges.
  // Deduplicated, in first-recorded order.
  std::vector<const Tensor*> reachable_params(Var v) const;

  // Re-runs the forward subgraph below `out` in double precision with one
  // element of one leaf/input node perturbed by `delta`. Returns the (scalar)
  // result. Central differences on this replay give the derivative oracle.
  double replay_forward_f64(Var out, int perturbed_node, int64_t element,
                            double delta) const;

  // Batch statistics computed by a kBatchNormTraining node, for the caller to
  // fold into running statistics. The op itself has no side effects.
  const std::vector<float>& batch_mean(Var bn_out) const;
  const std::vector<float>& batch_var(Var bn_out) const;

  size_t size() const { return nodes_.size(); }
  OpKind kind_of(Var v) const;
  // Node id of the first kLeaf bound to `t`, or -1 if absent.
  int leaf_id_of(const Tensor* t) const;

 private:
  friend class Var;
  friend Var add(Var, Var);
  friend Var sub(Var, Var);
  friend Var mul(Var, Var);
  friend Var scale(Var, float);
  friend Var relu(Var);
  friend Var silu(Var);
  friend Var sigmoid(Var);
  friend Var tanh(Var);
  friend Var matmul(Var, Var);
  friend Var linear(Var, Var, Var);
  friend Var conv2d(Var, Var, Var, int, int);
  friend Var global_avg_pool(Var);
  friend Var mean_rows(Var);
  friend Var standardize(Var, float);
  friend Var scale_channels(Var, Var);
  friend Var scale_channels_per_row(Var, Var);
  friend Var shift_channels(Var, Var);
  friend Var batchnorm_inference(Var, Var, Var, Var, Var, float);
  friend Var batchnorm_training(Var, Var, Var, float);
  friend Var softmax_cross_entropy(Var, const std::vector<int>&);
  friend Var sum(Var);
  friend Var reshape(Var, std::vector<int>);
  friend Var slice_cols(Var, int, int);

  struct Node {
    OpKind kind = OpKind::kInput;
    Tensor value;
    std::vector<int> parents;
    std::vector<float> grad;
    bool requires_grad = false;
    Tensor* bound = nullptr;  // kLeaf only
    int i0 = 0;               // stride
    int i1 = 0;               // padding
    float f0 = 0.f;           // scalar / epsilon
    std::vector<int> labels;  // kSoftmaxCrossEntropy
    std::vector<float> aux0;  // cached intermediates (probs, batch mean, ...)
    std::vector<float> aux1;
  };

  int push(Node n);
  Var wrap(int id) { return Var(this, id); }
  static Var unary(Var x, OpKind k);
  Node& node(Var v);
  const Node& node(Var v) const;
  void forward_op(Node& n);
  void backward_op(int id);
  void require_same_tape(Var a, Var b) const;

  std::vector<Node> nodes_;
};

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var x, float c);
Var relu(Var x);
Var silu(Var x);
Var sigmoid(Var x);
Var tanh(Var x);
// a[m,k] * b[k,n] -> [m,n]
Var matmul(Var a, Var b);
// x[m,in] * w[out,in]^T + b[out] -> [m,out]
Var linear(Var x, Var w, Var b);
// x[n,cin,h,w], w[cout,cin,k,k], b[cout] -> [n,cout,oh,ow]
Var conv2d(Var x, Var w, Var b, int stride, int padding);
// x[n,c,h,w] -> [n,c], mean over the spatial grid.
Var global_avg_pool(Var x);
// x[n,c] -> [1,c], mean over rows.
Var mean_rows(Var x);
// Per row: (x - mean) / (population_std + eps).
Var standardize(Var x, float eps);
// x[n,c,...] scaled by gamma[c] broadcast over rows and space.
Var scale_channels(Var x, Var gamma);
// x[n,c,h,w] scaled by gamma[n,c], one row per instance.
Var scale_channels_per_row(Var x, Var gamma);
// x[n,c,...] plus shift[c].
Var shift_channels(Var x, Var shift);
// Running statistics are treated as constants; no gradient flows into them.
Var batchnorm_inference(Var x, Var gamma, Var beta, Var running_mean,
                        Var running_var, float eps);
// Normalizes by batch statistics (population variance over n*h*w per
// channel); gradients flow through the statistics.
Var batchnorm_training(Var x, Var gamma, Var beta, float eps);
// Mean cross-entropy over rows; log-sum-exp stabilized.
Var softmax_cross_entropy(Var logits, const std::vector<int>& labels);
Var sum(Var x);
Var reshape(Var x, std::vector<int> new_shape);
// Columns [start, start+len) of a rank-2 tensor.
Var slice_cols(Var x, int start, int len);

}  // namespace caselab
