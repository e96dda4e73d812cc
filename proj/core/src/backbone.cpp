#include "caselab/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>

#include "caselab/adam.hpp"
#include "caselab/episodes.hpp"
#include "caselab/errors.hpp"
#include "caselab/rng.hpp"
#include "kernels.hpp"

namespace caselab {

namespace {

constexpr float kBnEps = 1e-5f;
constexpr float kBnMomentum = 0.1f;

Var activate(Var x, Activation a) {
  return a == Activation::kSilu ? silu(x) : relu(x);
}

Tensor he_uniform_tensor(std::vector<int> shape, int fan_in, RandomStream& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  float bound = std::sqrt(6.f / static_cast<float>(fan_in));
  rng.fill_uniform(t.data, -bound, bound);
  t.requires_grad = true;
  return t;
}

Tensor grad_tensor(std::vector<int> shape, float fill) {
  Tensor t = Tensor::full(std::move(shape), fill);
  t.requires_grad = true;
  return t;
}

}  // namespace

const char* adapter_kind_name(AdapterKind k) {
  switch (k) {
    case AdapterKind::kNone: return "none";
    case AdapterKind::kCase: return "case";
    case AdapterKind::kSe: return "se";
    case AdapterKind::kFilm: return "film";
  }
  return "?";
}

AdapterKind parse_adapter_kind(const std::string& s) {
  if (s == "none") return AdapterKind::kNone;
  if (s == "case") return AdapterKind::kCase;
  if (s == "se") return AdapterKind::kSe;
  if (s == "film") return AdapterKind::kFilm;
  throw ConfigError("unknown adapter kind '" + s + "'");
}

BackboneSpec BackboneSpec::desk_default() {
  BackboneSpec spec;
  spec.stages = {
      {32, 3, 2, false},
      {64, 3, 2, true},
      {128, 3, 2, true},
      {256, 3, 2, true},
  };
  spec.input_channels = 3;
  spec.input_resolution = 32;
  spec.activation = Activation::kSilu;
  return spec;
}

int BackboneSpec::embedding_dim() const {
  if (stages.empty()) throw ConfigError("backbone spec has no stages");
  return stages.back().out_channels;
}

std::vector<int> BackboneSpec::stage_dims() const {
  std::vector<int> dims;
  int side = input_resolution;
  for (const StageSpec& st : stages) {
    side = kernels::conv_out_dim(side, st.kernel, st.stride, st.kernel / 2);
    dims.push_back(side);
  }
  return dims;
}

int BackboneSpec::num_adapter_slots() const {
  int n = 0;
  for (const StageSpec& st : stages) n += st.insert_adapter ? 1 : 0;
  return n;
}

void BackboneSpec::validate() const {
  if (stages.empty()) throw ConfigError("backbone spec has no stages");
  if (input_channels <= 0) throw ConfigError("input_channels must be positive");
  if (input_resolution <= 0)
    throw ConfigError("input_resolution must be positive");
  for (size_t i = 0; i < stages.size(); ++i) {
    const StageSpec& st = stages[i];
    std::string where = "stage " + std::to_string(i);
    if (st.out_channels <= 0)
      throw ConfigError(where + ": out_channels must be positive");
    if (st.kernel <= 0 || st.kernel % 2 == 0)
      throw ConfigError(where + ": kernel must be odd and positive");
    if (st.stride <= 0) throw ConfigError(where + ": stride must be positive");
  }
  if (stages.front().insert_adapter)
    throw ConfigError("first stage never carries an adapter");
  std::vector<int> dims = stage_dims();
  for (size_t i = 0; i < dims.size(); ++i) {
    if (dims[i] < 1)
      throw ConfigError("stage " + std::to_string(i) +
                        " collapses spatial dims to zero");
  }
}

Backbone Backbone::build(const BackboneSpec& spec, uint64_t seed) {
  spec.validate();
  Backbone bb;
  bb.spec_ = spec;
  RandomStream rng(derive_stream(seed, "backbone-init"));
  int in_c = spec.input_channels;
  int slot = 0;
  for (const StageSpec& st : spec.stages) {
    Stage s;
    s.cfg = st;
    s.conv_w = he_uniform_tensor({st.out_channels, in_c, st.kernel, st.kernel},
                                 in_c * st.kernel * st.kernel, rng);
    s.conv_b = grad_tensor({st.out_channels}, 0.f);
    s.bn_gamma = grad_tensor({st.out_channels}, 1.f);
    s.bn_beta = grad_tensor({st.out_channels}, 0.f);
    s.bn_mean = Tensor::zeros({st.out_channels});
    s.bn_var = Tensor::full({st.out_channels}, 1.f);
    if (st.insert_adapter) s.adapter_slot = slot++;
    bb.stages_.push_back(std::move(s));
    in_c = st.out_channels;
  }
  return bb;
}

void Backbone::attach_adapters(AdapterKind kind, const CaseConfig& cfg,
                               uint64_t seed) {
  case_blocks_.clear();
  se_blocks_.clear();
  film_.reset();
  adapter_kind_ = kind;
  adapter_cfg_ = cfg;
  if (kind == AdapterKind::kNone) return;

  std::vector<int> slot_channels;
  for (const Stage& s : stages_)
    if (s.adapter_slot >= 0) slot_channels.push_back(s.cfg.out_channels);

  RandomStream rng(derive_stream(seed, "adapter-init"));
  switch (kind) {
    case AdapterKind::kCase:
      for (int c : slot_channels) case_blocks_.emplace_back(c, cfg, rng.next_u64());
      break;
    case AdapterKind::kSe:
      for (int c : slot_channels) se_blocks_.emplace_back(c, cfg, rng.next_u64());
      break;
    case AdapterKind::kFilm:
      film_ = std::make_unique<FilmLiteGenerator>(slot_channels,
                                                  spec_.input_channels, cfg,
                                                  rng.next_u64());
      break;
    case AdapterKind::kNone:
      break;
  }
}

Var Backbone::forward(Tape& t, Var images, AdapterUse use) {
  std::vector<FilmLayerMod> film_mods;
  bool use_adapters = use != AdapterUse::kDisabled && adapter_kind_ != AdapterKind::kNone;
  if (use_adapters && adapter_kind_ == AdapterKind::kFilm &&
      use == AdapterUse::kAdaptive) {
    film_mods = film_->adapt(t, images);
  }
  Var x = images;
  for (Stage& s : stages_) {
    x = conv2d(x, t.leaf(s.conv_w), t.leaf(s.conv_b), s.cfg.stride,
               s.cfg.kernel / 2);
    x = batchnorm_inference(x, t.leaf(s.bn_gamma), t.leaf(s.bn_beta),
                            t.leaf(s.bn_mean), t.leaf(s.bn_var), kBnEps);
    x = activate(x, spec_.activation);
    if (s.adapter_slot < 0 || !use_adapters) continue;
    switch (adapter_kind_) {
      case AdapterKind::kCase: {
        CaseBlock& b = case_blocks_[s.adapter_slot];
        b.set_mode(use == AdapterUse::kAdaptive ? AdapterMode::kAdaptive
                                                : AdapterMode::kInference);
        x = b.apply(t, x);
        break;
      }
      case AdapterKind::kSe:
        x = se_blocks_[s.adapter_slot].apply(t, x);
        break;
      case AdapterKind::kFilm: {
        FilmLayerMod mod = use == AdapterUse::kAdaptive
                               ? film_mods[s.adapter_slot]
                               : film_->cached_mod(t, s.adapter_slot);
        x = shift_channels(scale_channels(x, mod.scale), mod.shift);
        break;
      }
      case AdapterKind::kNone:
        break;
    }
  }
  eval_count_ += static_cast<uint64_t>(t.value(images).dim(0));
  return global_avg_pool(x);
}

Var Backbone::forward_pretrain(Tape& t, Var images,
                               std::vector<Var>* bn_nodes) {
  Var x = images;
  for (Stage& s : stages_) {
    x = conv2d(x, t.leaf(s.conv_w), t.leaf(s.conv_b), s.cfg.stride,
               s.cfg.kernel / 2);
    x = batchnorm_training(x, t.leaf(s.bn_gamma), t.leaf(s.bn_beta), kBnEps);
    if (bn_nodes) bn_nodes->push_back(x);
    x = activate(x, spec_.activation);
  }
  eval_count_ += static_cast<uint64_t>(t.value(images).dim(0));
  return global_avg_pool(x);
}

Tensor Backbone::embed(const Tensor& images, AdapterUse use) {
  Tape t;
  Var x = t.input(images);
  Var e = forward(t, x, use);
  return e.value();
}

NamedTensors Backbone::theta_params() {
  NamedTensors out;
  for (size_t i = 0; i < stages_.size(); ++i) {
    Stage& s = stages_[i];
    std::string p = "backbone/" + std::to_string(i) + "/";
    out.emplace_back(p + "conv_w", &s.conv_w);
    out.emplace_back(p + "conv_b", &s.conv_b);
    out.emplace_back(p + "bn_gamma", &s.bn_gamma);
    out.emplace_back(p + "bn_beta", &s.bn_beta);
    out.emplace_back(p + "bn_mean", &s.bn_mean);
    out.emplace_back(p + "bn_var", &s.bn_var);
  }
  return out;
}

NamedTensors Backbone::theta_trainable_params() {
  NamedTensors out;
  for (auto& [name, t] : theta_params())
    if (t->requires_grad) out.emplace_back(name, t);
  return out;
}

NamedTensors Backbone::adapter_params() {
  NamedTensors out;
  switch (adapter_kind_) {
    case AdapterKind::kCase:
      for (size_t i = 0; i < case_blocks_.size(); ++i) {
        NamedTensors p =
            case_blocks_[i].params("adapter/" + std::to_string(i));
        out.insert(out.end(), p.begin(), p.end());
      }
      break;
    case AdapterKind::kSe:
      for (size_t i = 0; i < se_blocks_.size(); ++i) {
        NamedTensors p = se_blocks_[i].params("adapter/" + std::to_string(i));
        out.insert(out.end(), p.begin(), p.end());
      }
      break;
    case AdapterKind::kFilm: {
      NamedTensors p = film_->params("adapter");
      out.insert(out.end(), p.begin(), p.end());
      break;
    }
    case AdapterKind::kNone:
      break;
  }
  return out;
}

int64_t Backbone::adapter_param_count() const {
  switch (adapter_kind_) {
    case AdapterKind::kCase: return count_adapter_params(case_blocks_);
    case AdapterKind::kSe: return count_adapter_params(se_blocks_);
    case AdapterKind::kFilm: return count_adapter_params(*film_);
    case AdapterKind::kNone: return 0;
  }
  return 0;
}

std::vector<float> Backbone::theta_snapshot() const {
  std::vector<float> out;
  for (const Stage& s : stages_) {
    for (const Tensor* t :
         {&s.conv_w, &s.conv_b, &s.bn_gamma, &s.bn_beta, &s.bn_mean, &s.bn_var})
      out.insert(out.end(), t->data.begin(), t->data.end());
  }
  return out;
}

void Backbone::freeze_theta() {
  for (Stage& s : stages_) {
    s.conv_w.requires_grad = false;
    s.conv_b.requires_grad = false;
    s.bn_gamma.requires_grad = false;
    s.bn_beta.requires_grad = false;
  }
  frozen_ = true;
}

void Backbone::unfreeze_theta() {
  for (Stage& s : stages_) {
    s.conv_w.requires_grad = true;
    s.conv_b.requires_grad = true;
    s.bn_gamma.requires_grad = true;
    s.bn_beta.requires_grad = true;
  }
  frozen_ = false;
}

Backbone Backbone::clone() const {
  Backbone out;
  out.spec_ = spec_;
  out.stages_ = stages_;
  out.adapter_kind_ = adapter_kind_;
  out.adapter_cfg_ = adapter_cfg_;
  out.case_blocks_ = case_blocks_;
  out.se_blocks_ = se_blocks_;
  if (film_) out.film_ = std::make_unique<FilmLiteGenerator>(*film_);
  out.frozen_ = frozen_;
  out.eval_count_ = 0;
  return out;
}

void Backbone::update_bn_stats(int stage, const std::vector<float>& batch_mean,
                               const std::vector<float>& batch_var,
                               float momentum) {
  Stage& s = stages_.at(static_cast<size_t>(stage));
  for (size_t c = 0; c < s.bn_mean.data.size(); ++c) {
    s.bn_mean.data[c] =
        (1.f - momentum) * s.bn_mean.data[c] + momentum * batch_mean[c];
    s.bn_var.data[c] =
        (1.f - momentum) * s.bn_var.data[c] + momentum * batch_var[c];
  }
}

namespace {

Tensor gather_rows(const Tensor& images, const std::vector<int>& idx, int start,
                   int count) {
  std::vector<int> shape = images.shape;
  shape[0] = count;
  Tensor out = Tensor::zeros(shape);
  int64_t row = images.numel() / images.dim(0);
  for (int r = 0; r < count; ++r) {
    const float* src = images.data.data() + int64_t(idx[start + r]) * row;
    std::copy(src, src + row, out.data.data() + int64_t(r) * row);
  }
  return out;
}

}  // namespace

PretrainResult pretrain(const BackboneSpec& spec, const BaseDataset& base,
                        const PretrainConfig& cfg, uint64_t seed) {
  spec.validate();
  if (base.num_classes < 2)
    throw ConfigError("pretraining needs at least 2 base classes");
  int n = base.images.dim(0);
  if (n <= 0 || static_cast<int>(base.labels.size()) != n)
    throw ShapeError("base dataset images/labels mismatch");

  PretrainResult result;
  result.backbone = Backbone::build(spec, seed);
  Backbone& bb = result.backbone;

  Tensor head_w = Tensor::zeros({base.num_classes, spec.embedding_dim()});
  Tensor head_b = Tensor::zeros({base.num_classes});
  head_w.requires_grad = true;
  head_b.requires_grad = true;

  NamedTensors params = bb.theta_trainable_params();
  params.emplace_back("head/w", &head_w);
  params.emplace_back("head/b", &head_b);
  AdamState opt(params);

  RandomStream order_rng(derive_stream(seed, "pretrain-order"));
  std::vector<int> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    order_rng.shuffle(idx);
    for (int start = 0; start < n; start += cfg.batch_size) {
      int bs = std::min(cfg.batch_size, n - start);
      Tensor batch = gather_rows(base.images, idx, start, bs);
      std::vector<int> labels(static_cast<size_t>(bs));
      for (int r = 0; r < bs; ++r)
        labels[static_cast<size_t>(r)] = base.labels[static_cast<size_t>(idx[start + r])];

      Tape t;
      std::vector<Var> bns;
      Var emb;
      Var loss;
      try {
        emb = bb.forward_pretrain(t, t.input(batch), &bns);
        Var logits = linear(emb, t.leaf(head_w), t.leaf(head_b));
        loss = softmax_cross_entropy(logits, labels);
        t.backward(loss);
      } catch (const NumericError& e) {
        throw NumericError(std::string("pretraining diverged at epoch ") +
                           std::to_string(epoch) + ": " + e.what());
      }
      for (size_t si = 0; si < bns.size(); ++si)
        bb.update_bn_stats(static_cast<int>(si), t.batch_mean(bns[si]),
                           t.batch_var(bns[si]), kBnMomentum);
      opt.step(cfg.lr);
    }
  }
  bb.freeze_theta();

  // Full-set pass with frozen statistics for the reported numbers.
  double loss_sum = 0.0;
  int64_t correct = 0;
  const int eval_batch = 256;
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  for (int start = 0; start < n; start += eval_batch) {
    int bs = std::min(eval_batch, n - start);
    Tensor batch = gather_rows(base.images, order, start, bs);
    std::vector<int> labels(base.labels.begin() + start,
                            base.labels.begin() + start + bs);
    Tape t;
    Var emb = bb.forward(t, t.input(batch), AdapterUse::kDisabled);
    Var logits = linear(emb, t.leaf(head_w), t.leaf(head_b));
    Var loss = softmax_cross_entropy(logits, labels);
    loss_sum += static_cast<double>(loss.value().data[0]) * bs;
    const Tensor& lv = logits.value();
    for (int r = 0; r < bs; ++r) {
      int best = 0;
      for (int k = 1; k < base.num_classes; ++k)
        if (lv.data[size_t(r) * base.num_classes + k] >
            lv.data[size_t(r) * base.num_classes + best])
          best = k;
      correct += best == labels[static_cast<size_t>(r)] ? 1 : 0;
    }
  }
  result.final_loss = static_cast<float>(loss_sum / n);
  result.final_accuracy = static_cast<float>(correct) / static_cast<float>(n);
  return result;
}

float quantile_linear(std::vector<float> data, double p) {
  if (data.empty()) throw ShapeError("quantile of empty data");
  std::sort(data.begin(), data.end());
  size_t n = data.size();
  if (n == 1) return data[0];
  double pos = p * static_cast<double>(n - 1);
  size_t lo = static_cast<size_t>(pos);
  if (lo >= n - 1) return data[n - 1];
  double frac = pos - static_cast<double>(lo);
  return static_cast<float>(data[lo] + frac * (data[lo + 1] - data[lo]));
}

std::vector<GammaRow> dump_gamma_stats(Backbone& backbone,
                                       const std::vector<Task>& tasks) {
  if (backbone.adapter_kind() != AdapterKind::kCase)
    throw ConfigError("gamma stats need a backbone with case adapters");
  if (tasks.empty()) throw ConfigError("gamma stats need at least one task");

  std::vector<CaseBlock>& blocks = backbone.case_blocks();
  std::vector<std::vector<float>> pooled(blocks.size());
  for (const Task& task : tasks) {
    backbone.embed(task.context_images, AdapterUse::kAdaptive);
    for (size_t b = 0; b < blocks.size(); ++b) {
      const Tensor& g = blocks[b].cached_gamma();
      pooled[b].insert(pooled[b].end(), g.data.begin(), g.data.end());
    }
  }

  std::vector<int> slot_stage;
  const std::vector<StageSpec>& stages = backbone.spec().stages;
  for (size_t i = 0; i < stages.size(); ++i)
    if (stages[i].insert_adapter) slot_stage.push_back(static_cast<int>(i));

  std::vector<GammaRow> rows;
  for (size_t b = 0; b < blocks.size(); ++b) {
    std::vector<float>& data = pooled[b];
    std::sort(data.begin(), data.end());
    GammaRow row;
    row.block_index = static_cast<int>(b);
    row.stage_index = slot_stage[b];
    row.channels = blocks[b].channels();
    row.count = static_cast<int64_t>(data.size());
    row.median = quantile_linear(data, 0.5);
    row.q1 = quantile_linear(data, 0.25);
    row.q3 = quantile_linear(data, 0.75);
    float iqr = row.q3 - row.q1;
    float lo_fence = row.q1 - 1.5f * iqr;
    float hi_fence = row.q3 + 1.5f * iqr;
    row.whisker_lo = row.q1;
    row.whisker_hi = row.q3;
    for (float v : data) {
      if (v >= lo_fence) {
        row.whisker_lo = v;
        break;
      }
    }
    for (auto it = data.rbegin(); it != data.rend(); ++it) {
      if (*it <= hi_fence) {
        row.whisker_hi = *it;
        break;
      }
    }
    for (float v : data)
      if (v < lo_fence || v > hi_fence) ++row.outliers;
    rows.push_back(row);
  }
  return rows;
}

}  // namespace caselab
