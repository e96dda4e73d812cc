#include "caselab/adapters.hpp"

#include <cmath>

#include "caselab/errors.hpp"
#include "caselab/rng.hpp"

namespace caselab {

const char* hidden_act_name(HiddenAct a) {
  switch (a) {
    case HiddenAct::kSilu: return "silu";
    case HiddenAct::kRelu: return "relu";
    case HiddenAct::kTanh: return "tanh";
  }
  return "?";
}

const char* output_act_name(OutputAct a) {
  switch (a) {
    case OutputAct::kSigmoid2: return "sigmoid2";
    case OutputAct::kSigmoid: return "sigmoid";
    case OutputAct::kLinear: return "linear";
  }
  return "?";
}

HiddenAct parse_hidden_act(const std::string& s) {
  if (s == "silu") return HiddenAct::kSilu;
  if (s == "relu") return HiddenAct::kRelu;
  if (s == "tanh") return HiddenAct::kTanh;
  throw ConfigError("unknown hidden activation '" + s + "'");
}

OutputAct parse_output_act(const std::string& s) {
  if (s == "sigmoid2") return OutputAct::kSigmoid2;
  if (s == "sigmoid") return OutputAct::kSigmoid;
  if (s == "linear") return OutputAct::kLinear;
  throw ConfigError("unknown output activation '" + s + "'");
}

int CaseConfig::hidden_width(int channels) const {
  if (reduction < 1 || min_units < 1)
    throw ConfigError("CaseConfig: reduction and min_units must be positive");
  int w = channels / reduction;
  return w < min_units ? min_units : w;
}

namespace {

Tensor he_uniform(std::vector<int> shape, int fan_in, RandomStream& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  float a = std::sqrt(6.f / static_cast<float>(fan_in));
  rng.fill_uniform(t.data, -a, a);
  return t;
}

Var apply_hidden_act(Var x, HiddenAct a) {
  switch (a) {
    case HiddenAct::kSilu: return silu(x);
    case HiddenAct::kRelu: return relu(x);
    case HiddenAct::kTanh: return tanh(x);
  }
  throw StateError("bad hidden activation");
}

}  // namespace

AdapterMlp AdapterMlp::build(int in_dim, int hidden, int out_dim,
                             const CaseConfig& cfg, uint64_t seed,
                             const std::vector<float>* last_bias) {
  if (in_dim < 1 || hidden < 1 || out_dim < 1 || cfg.hidden_layers < 1)
    throw ConfigError("AdapterMlp: dimensions and hidden_layers must be >= 1");
  RandomStream rng(seed);
  AdapterMlp m;
  m.hact_ = cfg.hidden_activation;
  m.oact_ = cfg.output_activation;
  m.sigmoid_scale_ = cfg.sigmoid_scale;
  int prev = in_dim;
  for (int l = 0; l < cfg.hidden_layers; ++l) {
    m.ws_.push_back(he_uniform({hidden, prev}, prev, rng));
    m.bs_.push_back(Tensor::zeros({hidden}));
    prev = hidden;
  }
  // Output layer: weights zero so the initial output is the bias alone, which
  // the activation maps to the identity scale (sigmoid2: 2*sigmoid(0) = 1;
  // linear: bias of ones).
  m.ws_.push_back(Tensor::zeros({out_dim, prev}));
  Tensor ob;
  if (last_bias) {
    ob = Tensor::from({out_dim}, *last_bias);
  } else if (cfg.output_activation == OutputAct::kLinear) {
    ob = Tensor::full({out_dim}, 1.f);
  } else {
    ob = Tensor::zeros({out_dim});
  }
  m.bs_.push_back(std::move(ob));
  for (auto& w : m.ws_) w.requires_grad = true;
  for (auto& b : m.bs_) b.requires_grad = true;
  return m;
}

Var AdapterMlp::apply(Tape& t, Var x) {
  Var h = x;
  int n = num_linears();
  for (int l = 0; l < n; ++l) {
    h = linear(h, t.leaf(ws_[static_cast<size_t>(l)]),
               t.leaf(bs_[static_cast<size_t>(l)]));
    if (l + 1 < n) h = apply_hidden_act(h, hact_);
  }
  switch (oact_) {
    case OutputAct::kSigmoid2: return scale(sigmoid(h), sigmoid_scale_);
    case OutputAct::kSigmoid: return sigmoid(h);
    case OutputAct::kLinear: return h;
  }
  throw StateError("bad output activation");
}

NamedTensors AdapterMlp::params(const std::string& prefix) {
  NamedTensors out;
  for (size_t l = 0; l < ws_.size(); ++l) {
    out.emplace_back(prefix + "/w" + std::to_string(l), &ws_[l]);
    out.emplace_back(prefix + "/b" + std::to_string(l), &bs_[l]);
  }
  return out;
}

int64_t AdapterMlp::param_count() const {
  int64_t n = 0;
  for (const auto& w : ws_) n += w.numel();
  for (const auto& b : bs_) n += b.numel();
  return n;
}

int AdapterMlp::out_dim() const {
  return ws_.empty() ? 0 : ws_.back().dim(0);
}

CaseBlock::CaseBlock(int channels, const CaseConfig& cfg, uint64_t seed)
    : channels_(channels), cfg_(cfg) {
  if (channels < 1) throw ConfigError("CaseBlock: channels must be >= 1");
  mlp_ = AdapterMlp::build(channels, cfg.hidden_width(channels), channels, cfg,
                           seed);
}

Var CaseBlock::apply(Tape& t, Var x) {
  const std::vector<int> sx = x.value().shape;
  if (sx.size() != 4 || sx[1] != channels_)
    throw ShapeError("CaseBlock: input " + shape_str(sx) + " for " +
                     std::to_string(channels_) + " channels");
  if (sx[0] < 1) throw ShapeError("CaseBlock: empty batch");
  if (mode_ == AdapterMode::kAdaptive) {
    Var pooled = mean_rows(global_avg_pool(x));  // [1, C]
    if (cfg_.standardize) pooled = standardize(pooled, cfg_.std_eps);
    Var g = reshape(mlp_.apply(t, pooled), {channels_});
    ++mlp_evals_;
    cached_ = g.value();
    return scale_channels(x, g);
  }
  if (!cached_)
    throw StateError("CaseBlock: adapt before infer (no cached gamma)");
  Var g = t.input(*cached_);
  return scale_channels(x, g);
}

void CaseBlock::set_mode(AdapterMode m) {
  if (m == AdapterMode::kAdaptive && mode_ != AdapterMode::kAdaptive)
    cached_.reset();
  mode_ = m;
}

const Tensor& CaseBlock::cached_gamma() const {
  if (!cached_) throw StateError("CaseBlock: no cached gamma");
  return *cached_;
}

SeBlock::SeBlock(int channels, CaseConfig cfg, uint64_t seed)
    : channels_(channels), cfg_(cfg) {
  if (channels < 1) throw ConfigError("SeBlock: channels must be >= 1");
  cfg_.standardize = false;  // forced; standardization helps CaSE only
  mlp_ = AdapterMlp::build(channels, cfg_.hidden_width(channels), channels,
                           cfg_, seed);
}

Var SeBlock::apply(Tape& t, Var x) {
  const std::vector<int> sx = x.value().shape;
  if (sx.size() != 4 || sx[1] != channels_)
    throw ShapeError("SeBlock: input " + shape_str(sx) + " for " +
                     std::to_string(channels_) + " channels");
  Var pooled = global_avg_pool(x);  // [B, C], one row per instance
  Var g = mlp_.apply(t, pooled);
  mlp_evals_ += static_cast<uint64_t>(sx[0]);
  return scale_channels_per_row(x, g);
}

FilmLiteGenerator::FilmLiteGenerator(std::vector<int> layer_channels,
                                     int input_channels, const CaseConfig& cfg,
                                     uint64_t seed)
    : layer_channels_(std::move(layer_channels)) {
  if (layer_channels_.empty())
    throw ConfigError("FilmLiteGenerator: no layers to modulate");
  RandomStream rng(seed);
  const int e1 = 16;
  enc_w1_ = he_uniform({e1, input_channels, 3, 3}, input_channels * 9, rng);
  enc_b1_ = Tensor::zeros({e1});
  enc_w2_ = he_uniform({enc_out_channels_, e1, 3, 3}, e1 * 9, rng);
  enc_b2_ = Tensor::zeros({enc_out_channels_});
  for (Tensor* p : {&enc_w1_, &enc_b1_, &enc_w2_, &enc_b2_})
    p->requires_grad = true;

  CaseConfig mlp_cfg = cfg;
  mlp_cfg.output_activation = OutputAct::kLinear;  // raw scale/shift
  for (size_t i = 0; i < layer_channels_.size(); ++i) {
    int c = layer_channels_[i];
    // Identity init: scale half of the bias at one, shift half at zero.
    std::vector<float> bias(static_cast<size_t>(2 * c), 0.f);
    for (int j = 0; j < c; ++j) bias[static_cast<size_t>(j)] = 1.f;
    mlps_.push_back(AdapterMlp::build(enc_out_channels_,
                                      mlp_cfg.hidden_width(c), 2 * c, mlp_cfg,
                                      rng.next_u64(), &bias));
  }
}

std::vector<FilmLayerMod> FilmLiteGenerator::adapt(Tape& t, Var context_images) {
  const std::vector<int> sx = context_images.value().shape;
  if (sx.size() != 4) throw ShapeError("film adapt: want rank-4 images");
  if (sx[0] < 1) throw ShapeError("film adapt: empty context");
  Var h = relu(conv2d(context_images, t.leaf(enc_w1_), t.leaf(enc_b1_), 2, 1));
  h = relu(conv2d(h, t.leaf(enc_w2_), t.leaf(enc_b2_), 2, 1));
  Var emb = mean_rows(global_avg_pool(h));  // [1, E], one set embedding
  cached_.clear();
  std::vector<FilmLayerMod> mods;
  for (size_t i = 0; i < mlps_.size(); ++i) {
    int c = layer_channels_[i];
    Var out = mlps_[i].apply(t, emb);  // [1, 2C]
    Var sc = reshape(slice_cols(out, 0, c), {c});
    Var sh = reshape(slice_cols(out, c, c), {c});
    ++mlp_evals_;
    cached_.emplace_back(sc.value(), sh.value());
    mods.push_back({sc, sh});
  }
  return mods;
}

FilmLayerMod FilmLiteGenerator::cached_mod(Tape& t, int layer) const {
  if (cached_.empty())
    throw StateError("FilmLiteGenerator: adapt before infer (no cached mods)");
  const auto& [sc, sh] = cached_[static_cast<size_t>(layer)];
  return {t.input(sc), t.input(sh)};
}

NamedTensors FilmLiteGenerator::params(const std::string& prefix) {
  NamedTensors out = {
      {prefix + "/enc/w0", &enc_w1_},
      {prefix + "/enc/b0", &enc_b1_},
      {prefix + "/enc/w1", &enc_w2_},
      {prefix + "/enc/b1", &enc_b2_},
  };
  for (size_t i = 0; i < mlps_.size(); ++i) {
    auto sub = mlps_[i].params(prefix + "/" + std::to_string(i));
    out.insert(out.end(), sub.begin(), sub.end());
  }
  return out;
}

int64_t FilmLiteGenerator::encoder_param_count() const {
  return enc_w1_.numel() + enc_b1_.numel() + enc_w2_.numel() + enc_b2_.numel();
}

int64_t FilmLiteGenerator::param_count() const {
  int64_t n = encoder_param_count();
  for (const auto& m : mlps_) n += m.param_count();
  return n;
}

int64_t count_adapter_params(const std::vector<CaseBlock>& blocks) {
  int64_t n = 0;
  for (const auto& b : blocks) n += b.param_count();
  return n;
}

int64_t count_adapter_params(const std::vector<SeBlock>& blocks) {
  int64_t n = 0;
  for (const auto& b : blocks) n += b.param_count();
  return n;
}

int64_t count_adapter_params(const FilmLiteGenerator& gen) {
  return gen.param_count();
}

}  // namespace caselab
