#include "caselab/config.hpp"

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <limits>
#include <set>
#include <sstream>

#include "caselab/errors.hpp"

namespace caselab {
namespace {

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

int64_t to_i64(const std::string& v) {
  if (v.empty()) throw ConfigError("expected an integer, got an empty value");
  errno = 0;
  char* end = nullptr;
  long long x = std::strtoll(v.c_str(), &end, 10);
  if (end != v.c_str() + v.size() || errno == ERANGE)
    throw ConfigError("bad integer '" + v + "'");
  return x;
}

int to_int(const std::string& v) {
  int64_t x = to_i64(v);
  if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max())
    throw ConfigError("integer out of range '" + v + "'");
  return static_cast<int>(x);
}

uint64_t to_u64(const std::string& v) {
  if (v.empty() || v[0] == '-') throw ConfigError("bad unsigned integer '" + v + "'");
  errno = 0;
  char* end = nullptr;
  unsigned long long x = std::strtoull(v.c_str(), &end, 10);
  if (end != v.c_str() + v.size() || errno == ERANGE)
    throw ConfigError("bad unsigned integer '" + v + "'");
  return x;
}

float to_f32(const std::string& v) {
  if (v.empty()) throw ConfigError("expected a number, got an empty value");
  errno = 0;
  char* end = nullptr;
  float x = std::strtof(v.c_str(), &end);
  if (end != v.c_str() + v.size() || errno == ERANGE)
    throw ConfigError("bad number '" + v + "'");
  return x;
}

bool to_bool(const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError("bad boolean '" + v + "' (use true or false)");
}

std::vector<int> to_int_list(const std::string& v) {
  std::vector<int> out;
  if (trim(v).empty()) return out;
  size_t pos = 0;
  while (true) {
    size_t comma = v.find(',', pos);
    std::string item = trim(v.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos));
    out.push_back(to_int(item));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

// %.9g preserves every float bit pattern through a text round trip.
std::string fmt_f32(float x) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(x));
  return buf;
}

std::string fmt_int_list(const std::vector<int>& xs) {
  std::string out;
  for (size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(xs[i]);
  }
  return out;
}

const char* activation_name(Activation a) {
  switch (a) {
    case Activation::kSilu: return "silu";
    case Activation::kRelu: return "relu";
  }
  throw ConfigError("unknown activation");
}

Activation parse_activation(const std::string& s) {
  if (s == "silu") return Activation::kSilu;
  if (s == "relu") return Activation::kRelu;
  throw ConfigError("unknown activation '" + s + "'");
}

struct KeyHandler {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

// Single source of truth for the key set: parse dispatch, echo content, and
// echo order all come from this table.
const std::vector<std::pair<std::string, KeyHandler>>& key_table() {
  static const std::vector<std::pair<std::string, KeyHandler>> table = {
      {"seed",
       {[](RunConfig& c, const std::string& v) { c.seed = to_u64(v); },
        [](const RunConfig& c) { return std::to_string(c.seed); }}},
      {"out_dir",
       {[](RunConfig& c, const std::string& v) { c.out_dir = v; },
        [](const RunConfig& c) { return c.out_dir; }}},
      {"checkpoint",
       {[](RunConfig& c, const std::string& v) { c.checkpoint = v; },
        [](const RunConfig& c) { return c.checkpoint; }}},

      {"backbone.stage_channels",
       {[](RunConfig& c, const std::string& v) { c.stage_channels = to_int_list(v); },
        [](const RunConfig& c) { return fmt_int_list(c.stage_channels); }}},
      {"backbone.kernel",
       {[](RunConfig& c, const std::string& v) { c.kernel = to_int(v); },
        [](const RunConfig& c) { return std::to_string(c.kernel); }}},
      {"backbone.stride",
       {[](RunConfig& c, const std::string& v) { c.stride = to_int(v); },
        [](const RunConfig& c) { return std::to_string(c.stride); }}},
      {"backbone.adapter_stages",
       {[](RunConfig& c, const std::string& v) { c.adapter_stages = to_int_list(v); },
        [](const RunConfig& c) { return fmt_int_list(c.adapter_stages); }}},
      {"backbone.input_channels",
       {[](RunConfig& c, const std::string& v) { c.input_channels = to_int(v); },
        [](const RunConfig& c) { return std::to_string(c.input_channels); }}},
      {"backbone.input_resolution",
       {[](RunConfig& c, const std::string& v) { c.input_resolution = to_int(v); },
        [](const RunConfig& c) { return std::to_string(c.input_resolution); }}},
      {"backbone.activation",
       {[](RunConfig& c, const std::string& v) { c.activation = parse_activation(v); },
        [](const RunConfig& c) { return std::string(activation_name(c.activation)); }}},

      {"adapter.kind",
       {[](RunConfig& c, const std::string& v) { c.adapter_kind = parse_adapter_kind(v); },
        [](const RunConfig& c) { return std::string(adapter_kind_name(c.adapter_kind)); }}},
      {"adapter.reduction",
       {[](RunConfig& c, const std::string& v) { c.adapter.reduction = to_int(v); },
        [](const RunConfig& c) { return std::to_string(c.adapter.reduction); }}},
      {"adapter.min_units",
       {[](RunConfig& c, const std::string& v) { c.adapter.min_units = to_int(v); },
        [](const RunConfig& c) { return std::to_string(c.adapter.min_units); }}},
      {"adapter.hidden_layers",
       {[](RunConfig& c, const std::string& v) { c.adapter.hidden_layers = to_int(v); },
        [](const RunConfig& c) { return std::to_string(c.adapter.hidden_layers); }}},
      {"adapter.hidden_activation",
       {[](RunConfig& c, const std::string& v) { c.adapter.hidden_activation = parse_hidden_act(v); },
        [](const RunConfig& c) { return std::string(hidden_act_name(c.adapter.hidden_activation)); }}},
      {"adapter.output_activation",
       {[](RunConfig& c, const std::string& v) { c.adapter.output_activation = parse_output_act(v); },
        [](const RunConfig& c) { return std::string(output_act_name(c.adapter.output_activation)); }}},
      {"adapter.standardize",
       {[](RunConfig& c, const std::string& v) { c.adapter.standardize = to_bool(v); },
        [](const RunConfig& c) { return std::string(c.adapter.standardize ? "true" : "false"); }}},

      {"pretrain.instances_per_class",
       {[](RunConfig& c, const std::string& v) { c.pretrain_instances_per_class = to_int(v); },
        [](const RunConfig& c) { return std::to_string(c.pretrain_instances_per_class); }}},
      {"pretrain.epochs",
       {[](RunConfig& c, const std::string& v) { c.pretrain.epochs = to_int(v); },
        [](const RunConfig& c) { return std::to_string(c.pretrain.epochs); }}},
      {"pretrain.batch_size",
       {[](RunConfig& c, const std::string& v) { c.pretrain.batch_size = to_int(v); },
        [](const RunConfig& c) { return std::to_string(c.pretrain.batch_size); }}},
      {"pretrain.lr",
       {[](RunConfig& c, const std::string& v) { c.pretrain.lr = to_f32(v); },
        [](const RunConfig& c) { return fmt_f32(c.pretrain.lr); }}},

      {"sampler.way_min",
       {[](RunConfig& c, const std::string& v) { c.sampler.way_min = to_int(v); },
        [](const RunConfig& c) { return std::to_string(c.sampler.way_min); }}},
      {"sampler.way_max",
       {[](RunConfig& c, const std::string& v) { c.sampler.way_max = to_int(v); },
        [](const RunConfig& c) { return std::to_string(c.sampler.way_max); }}},
      {"sampler.shot_min",
       {[](RunConfig& c, const std::string& v) { c.sampler.shot_min = to_int(v); },
        [](const RunConfig& c) { return std::to_string(c.sampler.shot_min); }}},
      {"sampler.shot_max",
       {[](RunConfig& c, const std::string& v) { c.sampler.shot_max = to_int(v); },
        [](const RunConfig& c) { return std::to_string(c.sampler.shot_max); }}},
      {"sampler.targets_per_class",
       {[](RunConfig& c, const std::string& v) { c.sampler.targets_per_class = to_int(v); },
        [](const RunConfig& c) { return std::to_string(c.sampler.targets_per_class); }}},
      {"sampler.variable_way",
       {[](RunConfig& c, const std::string& v) { c.sampler.variable_way = to_bool(v); },
        [](const RunConfig& c) { return std::string(c.sampler.variable_way ? "true" : "false"); }}},
      {"sampler.variable_shot_per_class",
       {[](RunConfig& c, const std::string& v) { c.sampler.variable_shot_per_class = to_bool(v); },
        [](const RunConfig& c) { return std::string(c.sampler.variable_shot_per_class ? "true" : "false"); }}},

      {"trainer.total_tasks",
       {[](RunConfig& c, const std::string& v) { c.trainer.total_tasks = to_int(v); },
        [](const RunConfig& c) { return std::to_string(c.trainer.total_tasks); }}},
      {"trainer.tasks_per_outer_update",
       {[](RunConfig& c, const std::string& v) { c.trainer.tasks_per_outer_update = to_int(v); },
        [](const RunConfig& c) { return std::to_string(c.trainer.tasks_per_outer_update); }}},
      {"trainer.inner_steps",
       {[](RunConfig& c, const std::string& v) { c.trainer.inner_steps = to_int(v); },
        [](const RunConfig& c) { return std::to_string(c.trainer.inner_steps); }}},
      {"trainer.inner_batch",
       {[](RunConfig& c, const std::string& v) { c.trainer.inner_batch = to_int(v); },
        [](const RunConfig& c) { return std::to_string(c.trainer.inner_batch); }}},
      {"trainer.body_lr_start",
       {[](RunConfig& c, const std::string& v) { c.trainer.body_lr_start = to_f32(v); },
        [](const RunConfig& c) { return fmt_f32(c.trainer.body_lr_start); }}},
      {"trainer.body_lr_end",
       {[](RunConfig& c, const std::string& v) { c.trainer.body_lr_end = to_f32(v); },
        [](const RunConfig& c) { return fmt_f32(c.trainer.body_lr_end); }}},
      {"trainer.head_lr_start",
       {[](RunConfig& c, const std::string& v) { c.trainer.head_lr_start = to_f32(v); },
        [](const RunConfig& c) { return fmt_f32(c.trainer.head_lr_start); }}},
      {"trainer.head_lr_end",
       {[](RunConfig& c, const std::string& v) { c.trainer.head_lr_end = to_f32(v); },
        [](const RunConfig& c) { return fmt_f32(c.trainer.head_lr_end); }}},

      {"baseline.mode",
       {[](RunConfig& c, const std::string& v) { c.baseline.mode = parse_baseline_mode(v); },
        [](const RunConfig& c) { return std::string(baseline_mode_name(c.baseline.mode)); }}},
      {"baseline.finetune_lr",
       {[](RunConfig& c, const std::string& v) { c.baseline.finetune_lr = to_f32(v); },
        [](const RunConfig& c) { return fmt_f32(c.baseline.finetune_lr); }}},
      {"baseline.finetune_steps",
       {[](RunConfig& c, const std::string& v) { c.baseline.finetune_steps = to_int(v); },
        [](const RunConfig& c) { return std::to_string(c.baseline.finetune_steps); }}},

      {"eval.num_tasks",
       {[](RunConfig& c, const std::string& v) { c.eval_num_tasks = to_int(v); },
        [](const RunConfig& c) { return std::to_string(c.eval_num_tasks); }}},
      {"ablate.train_tasks",
       {[](RunConfig& c, const std::string& v) { c.ablate_train_tasks = to_int(v); },
        [](const RunConfig& c) { return std::to_string(c.ablate_train_tasks); }}},
      {"ablate.eval_tasks",
       {[](RunConfig& c, const std::string& v) { c.ablate_eval_tasks = to_int(v); },
        [](const RunConfig& c) { return std::to_string(c.ablate_eval_tasks); }}},
      {"gamma.num_tasks",
       {[](RunConfig& c, const std::string& v) { c.gamma_num_tasks = to_int(v); },
        [](const RunConfig& c) { return std::to_string(c.gamma_num_tasks); }}},

      {"cost.way",
       {[](RunConfig& c, const std::string& v) { c.cost.way = to_int(v); },
        [](const RunConfig& c) { return std::to_string(c.cost.way); }}},
      {"cost.shot",
       {[](RunConfig& c, const std::string& v) { c.cost.shot = to_int(v); },
        [](const RunConfig& c) { return std::to_string(c.cost.shot); }}},
      {"cost.resolution",
       {[](RunConfig& c, const std::string& v) { c.cost.resolution = to_int(v); },
        [](const RunConfig& c) { return std::to_string(c.cost.resolution); }}},
      {"cost.head_steps",
       {[](RunConfig& c, const std::string& v) { c.cost.head_steps = to_int(v); },
        [](const RunConfig& c) { return std::to_string(c.cost.head_steps); }}},
      {"cost.head_batch",
       {[](RunConfig& c, const std::string& v) { c.cost.head_batch = to_int(v); },
        [](const RunConfig& c) { return std::to_string(c.cost.head_batch); }}},
  };
  return table;
}

const KeyHandler* find_key(const std::string& key) {
  for (const auto& [name, handler] : key_table())
    if (name == key) return &handler;
  return nullptr;
}

}  // namespace

BackboneSpec RunConfig::backbone_spec() const {
  BackboneSpec spec;
  spec.input_channels = input_channels;
  spec.input_resolution = input_resolution;
  spec.activation = activation;
  for (int ch : stage_channels) spec.stages.push_back({ch, kernel, stride, false});
  for (int idx : adapter_stages) {
    if (idx < 0 || idx >= static_cast<int>(spec.stages.size()))
      throw ConfigError("adapter stage index " + std::to_string(idx) +
                        " out of range for " + std::to_string(spec.stages.size()) +
                        " stages");
    spec.stages[static_cast<size_t>(idx)].insert_adapter = true;
  }
  return spec;
}

void RunConfig::validate() const {
  if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
  backbone_spec().validate();
  if (adapter.reduction < 1) throw ConfigError("adapter.reduction must be >= 1");
  if (adapter.min_units < 1) throw ConfigError("adapter.min_units must be >= 1");
  if (adapter.hidden_layers < 1) throw ConfigError("adapter.hidden_layers must be >= 1");
  if (pretrain_instances_per_class < 1)
    throw ConfigError("pretrain.instances_per_class must be >= 1");
  if (pretrain.epochs < 0) throw ConfigError("pretrain.epochs must be >= 0");
  if (pretrain.batch_size < 1) throw ConfigError("pretrain.batch_size must be >= 1");
  if (!(pretrain.lr > 0.f)) throw ConfigError("pretrain.lr must be positive");
  sampler.validate();
  trainer.validate();
  baseline.validate();
  if (eval_num_tasks < 1) throw ConfigError("eval.num_tasks must be >= 1");
  if (ablate_train_tasks < 0) throw ConfigError("ablate.train_tasks must be >= 0");
  if (ablate_eval_tasks < 1) throw ConfigError("ablate.eval_tasks must be >= 1");
  if (gamma_num_tasks < 1) throw ConfigError("gamma.num_tasks must be >= 1");
  cost.validate();
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string line = trim(raw);
    if (line.empty() || line[0] == '#') continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value', got '" + line + "'");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError("line " + std::to_string(line_no) + ": missing key before '='");
    const KeyHandler* handler = find_key(key);
    if (!handler)
      throw ConfigError("line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    if (!seen.insert(key).second)
      throw ConfigError("line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
    try {
      handler->set(cfg, value);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(line_no) + ": " + key + ": " + e.what());
    }
  }
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return parse_run_config(buf.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

std::string echo_run_config(const RunConfig& cfg) {
  std::string out = "# resolved run configuration\n";
  for (const auto& [name, handler] : key_table())
    out += name + " = " + handler.get(cfg) + "\n";
  return out;
}

void write_run_config(const std::string& path, const RunConfig& cfg) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write config file " + path);
  out << echo_run_config(cfg);
  out.flush();
  if (!out) throw IoError("failed writing config file " + path);
}

}  // namespace caselab
