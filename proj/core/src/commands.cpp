#include "caselab/commands.hpp"

#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "caselab/checkpoint.hpp"
#include "caselab/cost.hpp"
#include "caselab/errors.hpp"
#include "caselab/trainer.hpp"

namespace caselab {

namespace fs = std::filesystem;

namespace {

std::string join_path(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

// --checkpoint names the input artifact where one is consumed; the produced
// checkpoints always land in the output directory under fixed names.
std::string pretrained_path(const RunConfig& cfg) {
  return cfg.checkpoint.empty() ? join_path(cfg.out_dir, "pretrained.ckpt")
                                : cfg.checkpoint;
}

std::string model_in_path(const RunConfig& cfg) {
  return cfg.checkpoint.empty() ? join_path(cfg.out_dir, "metatrained.ckpt")
                                : cfg.checkpoint;
}

// Summary files are keyed by what was evaluated: the adapter kind, or the
// baseline mode when no adapters are attached.
std::string eval_label(const RunConfig& cfg) {
  return cfg.adapter_kind != AdapterKind::kNone
             ? adapter_kind_name(cfg.adapter_kind)
             : baseline_mode_name(cfg.baseline.mode);
}

// Same fold the trainer uses: identical contexts get identical head seeds.
uint64_t fold_task_seed(uint64_t root, const Task& task) {
  uint64_t h = root;
  for (int64_t id : task.context_ids) {
    uint64_t s = h ^ static_cast<uint64_t>(id);
    h = splitmix64_next(s);
  }
  return h;
}

// Mirrors make_synthetic_domains' per-domain seeding while honoring the
// configured resolution and channel count.
std::vector<SyntheticDomain> build_domains(const RunConfig& cfg, int from,
                                           int to) {
  uint64_t seed = derive_stream(cfg.seed, "domains");
  std::vector<SyntheticDomain> out;
  out.reserve(static_cast<size_t>(to - from));
  for (int d = from; d < to; ++d)
    out.emplace_back(d, derive_stream(seed, "domain-" + std::to_string(d)),
                     cfg.input_resolution, cfg.input_channels);
  return out;
}

std::vector<SyntheticDomain> train_domains(const RunConfig& cfg) {
  return build_domains(cfg, 0, SyntheticDomain::kMetaTrainDomains);
}

std::vector<SyntheticDomain> test_domains(const RunConfig& cfg) {
  return build_domains(cfg, SyntheticDomain::kMetaTrainDomains,
                       SyntheticDomain::kNumDomains);
}

std::vector<const TaskSource*> source_ptrs(
    const std::vector<SyntheticDomain>& domains) {
  std::vector<const TaskSource*> out;
  for (const SyntheticDomain& d : domains) out.push_back(&d);
  return out;
}

Backbone restore_backbone(const RunConfig& cfg, const std::string& ckpt) {
  Backbone bb =
      Backbone::build(cfg.backbone_spec(), derive_stream(cfg.seed, "backbone"));
  if (cfg.adapter_kind != AdapterKind::kNone)
    bb.attach_adapters(cfg.adapter_kind, cfg.adapter,
                       derive_stream(cfg.seed, "adapters"));
  load_model(bb, ckpt);
  bb.freeze_theta();
  return bb;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path);
  return os;
}

void write_echo(const RunConfig& cfg) {
  write_run_config(join_path(cfg.out_dir, "config_echo.cfg"), cfg);
}

void save_model(const std::string& path, Backbone& backbone,
                bool with_adapters) {
  fs::path parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  NamedTensors named = backbone.theta_params();
  if (with_adapters)
    for (auto& entry : backbone.adapter_params()) named.push_back(entry);
  save_checkpoint(path, named);
}

// evaluate() for the fine-tuning baseline: same task stream, same per-task
// seeds, run_baseline in place of adapt_and_predict.
EvalReport evaluate_baseline(Backbone& backbone, TaskSampler& sampler,
                             int num_tasks, const BaselineConfig& cfg,
                             uint64_t seed) {
  if (num_tasks < 1) throw ConfigError("evaluate wants at least one task");
  RandomStream task_rng(derive_stream(seed, "eval/tasks"));
  uint64_t head_root = derive_stream(seed, "eval/heads");

  EvalReport report;
  report.task_count = num_tasks;
  double sum = 0.0;
  for (int i = 0; i < num_tasks; ++i) {
    Task task = sampler.next(task_rng);
    Prediction p =
        run_baseline(backbone, cfg, task, fold_task_seed(head_root, task));
    EvalTaskRow row;
    row.task_id = i;
    row.way = task.way;
    row.shots = task.context_images.dim(0) / task.way;
    row.accuracy = p.accuracy;
    report.rows.push_back(row);
    report.accuracies.push_back(p.accuracy);
    sum += p.accuracy;
  }
  report.mean = static_cast<float>(sum / num_tasks);
  if (num_tasks > 1) {
    double sq = 0.0;
    for (float a : report.accuracies) {
      double d = double(a) - double(report.mean);
      sq += d * d;
    }
    double sample_std = std::sqrt(sq / (num_tasks - 1));
    report.ci95 =
        static_cast<float>(1.96 * sample_std / std::sqrt(double(num_tasks)));
  }
  return report;
}

void write_summary_csv(const RunConfig& cfg, const std::string& label,
                       const EvalReport& report) {
  auto os = open_out(join_path(cfg.out_dir, "summary_" + label + ".csv"));
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%s,%d,%.6f,%.6f\n", label.c_str(),
                report.task_count, report.mean, report.ci95);
  os << "label,tasks,mean_accuracy,ci95\n" << buf;
}

// Reads mean_accuracy back out of a summary written above.
bool read_summary_accuracy(const std::string& path, float* accuracy) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return false;
  std::string header, row;
  if (!std::getline(in, header) || !std::getline(in, row)) return false;
  std::vector<std::string> fields;
  std::stringstream ss(row);
  std::string field;
  while (std::getline(ss, field, ',')) fields.push_back(field);
  if (fields.size() != 4) return false;
  *accuracy = std::strtof(fields[2].c_str(), nullptr);
  return true;
}

}  // namespace

OutputLock::OutputLock(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec)
    throw IoError("cannot create output directory " + dir + ": " +
                  ec.message());
  lock_path_ = join_path(dir, ".lock");
  std::FILE* f = std::fopen(lock_path_.c_str(), "wx");
  if (!f)
    throw StateError("output directory " + dir +
                     " is locked by another run (remove " + lock_path_ +
                     " if it is stale)");
  std::fprintf(f, "pid %ld\n", static_cast<long>(getpid()));
  std::fclose(f);
}

OutputLock::~OutputLock() { std::remove(lock_path_.c_str()); }

void load_model(Backbone& backbone, const std::string& path) {
  auto entries = load_checkpoint(path);
  std::map<std::string, Tensor*> targets;
  for (auto& [name, tensor] : backbone.theta_params()) targets[name] = tensor;
  for (auto& [name, tensor] : backbone.adapter_params())
    targets[name] = tensor;

  std::set<std::string> loaded;
  for (auto& [name, tensor] : entries) {
    auto it = targets.find(name);
    if (it == targets.end())
      throw IoError("checkpoint entry '" + name +
                    "' does not match any model tensor");
    if (it->second->shape != tensor.shape)
      throw IoError("checkpoint entry '" + name + "' has shape " +
                    shape_str(tensor.shape) + ", model wants " +
                    shape_str(it->second->shape));
    it->second->data = tensor.data;
    loaded.insert(name);
  }
  for (auto& [name, tensor] : backbone.theta_params())
    if (!loaded.count(name))
      throw IoError("checkpoint " + path + " is missing body tensor '" + name +
                    "'");
}

void cmd_pretrain(const RunConfig& cfg) {
  cfg.validate();
  OutputLock lock(cfg.out_dir);
  write_echo(cfg);

  std::vector<SyntheticDomain> domains = train_domains(cfg);
  BaseDataset base =
      make_synthetic_base(domains, cfg.pretrain_instances_per_class);
  PretrainResult result = pretrain(cfg.backbone_spec(), base, cfg.pretrain,
                                   derive_stream(cfg.seed, "pretrain"));
  save_model(pretrained_path(cfg), result.backbone, false);

  auto os = open_out(join_path(cfg.out_dir, "pretrain_summary.csv"));
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%d,%d,%.6f,%.6f\n", cfg.pretrain.epochs,
                cfg.pretrain.batch_size, result.final_loss,
                result.final_accuracy);
  os << "epochs,batch_size,final_loss,final_accuracy\n" << buf;
  std::cout << "pretrain: final loss " << result.final_loss << ", accuracy "
            << result.final_accuracy << ", checkpoint " << pretrained_path(cfg)
            << "\n";
}

void cmd_metatrain(const RunConfig& cfg) {
  cfg.validate();
  if (cfg.adapter_kind == AdapterKind::kNone)
    throw ConfigError("meta-training needs adapters; set adapter.kind");
  OutputLock lock(cfg.out_dir);
  write_echo(cfg);

  Backbone backbone = restore_backbone(cfg, pretrained_path(cfg));
  std::vector<SyntheticDomain> domains = train_domains(cfg);
  DomainTaskSampler sampler(source_ptrs(domains), cfg.sampler);

  TrainerConfig trainer = cfg.trainer;
  trainer.seed = derive_stream(cfg.seed, "meta_train");
  MetaTrainResult result = meta_train(backbone, trainer, sampler);

  save_model(join_path(cfg.out_dir, "metatrained.ckpt"), backbone, true);
  auto log = open_out(join_path(cfg.out_dir, "train_log.csv"));
  write_train_log_csv(log, result);
  auto os = open_out(join_path(cfg.out_dir, "metatrain_summary.csv"));
  os << "tasks_processed,tasks_skipped\n"
     << result.tasks_processed << "," << result.tasks_skipped << "\n";
  std::cout << "meta-train: " << result.tasks_processed << " tasks ("
            << result.tasks_skipped << " skipped), checkpoint "
            << join_path(cfg.out_dir, "metatrained.ckpt") << "\n";
}

void cmd_eval(const RunConfig& cfg) {
  cfg.validate();
  OutputLock lock(cfg.out_dir);
  write_echo(cfg);

  Backbone backbone = restore_backbone(cfg, model_in_path(cfg));
  std::vector<SyntheticDomain> domains = test_domains(cfg);
  DomainTaskSampler sampler(source_ptrs(domains), cfg.sampler);
  uint64_t eval_seed = derive_stream(cfg.seed, "eval");
  std::string label = eval_label(cfg);

  EvalReport report;
  if (cfg.adapter_kind == AdapterKind::kNone &&
      cfg.baseline.mode == BaselineMode::kFullFinetune) {
    BaselineConfig baseline = cfg.baseline;
    baseline.head = cfg.trainer.head_fit();
    report = evaluate_baseline(backbone, sampler, cfg.eval_num_tasks, baseline,
                               eval_seed);
  } else {
    report = evaluate(backbone, sampler, cfg.eval_num_tasks,
                      cfg.trainer.head_fit(), eval_seed);
  }

  auto os = open_out(join_path(cfg.out_dir, "eval_" + label + ".csv"));
  write_eval_csv(os, report);
  write_summary_csv(cfg, label, report);
  char buf[160];
  std::snprintf(buf, sizeof(buf), "eval %s: mean %.4f ci95 %.4f (%d tasks)\n",
                label.c_str(), report.mean, report.ci95, report.task_count);
  std::cout << buf;
}

void cmd_ablate(const RunConfig& cfg) {
  cfg.validate();
  OutputLock lock(cfg.out_dir);
  write_echo(cfg);

  Backbone base = Backbone::build(cfg.backbone_spec(),
                                  derive_stream(cfg.seed, "backbone"));
  load_model(base, pretrained_path(cfg));
  base.freeze_theta();

  std::vector<SyntheticDomain> train_ds = train_domains(cfg);
  std::vector<SyntheticDomain> test_ds = test_domains(cfg);
  DomainTaskSampler train_sampler(source_ptrs(train_ds), cfg.sampler);
  DomainTaskSampler test_sampler(source_ptrs(test_ds), cfg.sampler);

  struct Point {
    const char* axis;
    std::string value;
    CaseConfig adapter;
  };
  std::vector<Point> points;
  for (OutputAct oa : {OutputAct::kLinear, OutputAct::kSigmoid,
                       OutputAct::kSigmoid2}) {
    CaseConfig a = cfg.adapter;
    a.output_activation = oa;
    points.push_back({"output_activation", output_act_name(oa), a});
  }
  for (int layers : {1, 2, 3, 4}) {
    CaseConfig a = cfg.adapter;
    a.hidden_layers = layers;
    points.push_back({"hidden_layers", std::to_string(layers), a});
  }
  for (int reduction : {16, 32, 64, 128}) {
    CaseConfig a = cfg.adapter;
    a.reduction = reduction;
    points.push_back({"reduction", std::to_string(reduction), a});
  }
  for (HiddenAct ha : {HiddenAct::kSilu, HiddenAct::kRelu, HiddenAct::kTanh}) {
    CaseConfig a = cfg.adapter;
    a.hidden_activation = ha;
    points.push_back({"hidden_activation", hidden_act_name(ha), a});
  }

  auto os = open_out(join_path(cfg.out_dir, "ablation.csv"));
  os << "axis,value,reduction,hidden_layers,hidden_activation,"
        "output_activation,params,mean_accuracy,ci95\n";
  for (size_t i = 0; i < points.size(); ++i) {
    const Point& point = points[i];
    Backbone bb = base.clone();
    bb.attach_adapters(
        AdapterKind::kCase, point.adapter,
        derive_stream(cfg.seed, "ablate.adapters." + std::to_string(i)));
    if (cfg.ablate_train_tasks > 0) {
      TrainerConfig trainer = cfg.trainer;
      trainer.total_tasks = cfg.ablate_train_tasks;
      trainer.seed =
          derive_stream(cfg.seed, "ablate.train." + std::to_string(i));
      meta_train(bb, trainer, train_sampler);
    }
    EvalReport report =
        evaluate(bb, test_sampler, cfg.ablate_eval_tasks, cfg.trainer.head_fit(),
                 derive_stream(cfg.seed, "ablate.eval"));
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%s,%s,%d,%d,%s,%s,%lld,%.6f,%.6f\n",
                  point.axis, point.value.c_str(), point.adapter.reduction,
                  point.adapter.hidden_layers,
                  hidden_act_name(point.adapter.hidden_activation),
                  output_act_name(point.adapter.output_activation),
                  static_cast<long long>(bb.adapter_param_count()),
                  report.mean, report.ci95);
    os << buf;
  }
  std::cout << "ablate: " << points.size() << " sweep points written to "
            << join_path(cfg.out_dir, "ablation.csv") << "\n";
}

void cmd_cost(const RunConfig& cfg) {
  cfg.validate();
  OutputLock lock(cfg.out_dir);
  write_echo(cfg);

  BackboneSpec spec = cfg.backbone_spec();
  const Strategy strategies[] = {Strategy::kUppercase, Strategy::kHeadOnly,
                                 Strategy::kFullFinetune, Strategy::kFilmLite};
  // Measured accuracies, when this output directory holds eval summaries for
  // the matching runs, join the analytic costs in pareto.csv.
  const std::map<Strategy, std::string> summary_label = {
      {Strategy::kUppercase, "case"},
      {Strategy::kHeadOnly, "head_only"},
      {Strategy::kFullFinetune, "full_finetune"},
      {Strategy::kFilmLite, "film"},
  };

  auto cost_csv = open_out(join_path(cfg.out_dir, "cost.csv"));
  cost_csv << "strategy,macs_context_forward,macs_head_fit,macs_body_finetune,"
              "macs_target_inference,total_adaptation_macs,tera_macs,"
              "params_total,params_adaptive\n";
  auto breakdown_csv = open_out(join_path(cfg.out_dir, "cost_breakdown.csv"));
  breakdown_csv << "strategy,phase,layer,macs,flops_pointwise\n";
  auto report_txt = open_out(join_path(cfg.out_dir, "cost_report.txt"));
  report_txt << cost_report_caveat() << "\n\n";

  std::vector<ParetoRow> pareto;
  for (Strategy s : strategies) {
    CostReport report = adaptation_cost(s, spec, cfg.cost, cfg.adapter);
    cost_csv << strategy_name(s) << "," << report.macs_context_forward << ","
             << report.macs_head_fit << "," << report.macs_body_finetune << ","
             << report.macs_target_inference << ","
             << report.total_adaptation_macs() << ","
             << tera_macs(report.total_adaptation_macs()) << ","
             << report.params_total << "," << report.params_adaptive << "\n";
    for (const LayerCost& row : report.breakdown)
      breakdown_csv << strategy_name(s) << "," << cost_phase_name(row.phase)
                    << "," << row.name << "," << row.macs << ","
                    << row.flops_pointwise << "\n";
    char line[256];
    std::snprintf(line, sizeof(line),
                  "%-14s adaptation %14lld MACs (%s TMACs), per-image "
                  "inference %10lld MACs, params %lld (adaptive %lld)\n",
                  strategy_name(s),
                  static_cast<long long>(report.total_adaptation_macs()),
                  tera_macs(report.total_adaptation_macs()).c_str(),
                  static_cast<long long>(report.macs_target_inference),
                  static_cast<long long>(report.params_total),
                  static_cast<long long>(report.params_adaptive));
    report_txt << line;

    float accuracy = 0.f;
    if (read_summary_accuracy(
            join_path(cfg.out_dir,
                      "summary_" + summary_label.at(s) + ".csv"),
            &accuracy)) {
      ParetoRow row;
      row.strategy = strategy_name(s);
      row.accuracy = accuracy;
      row.macs = report.total_adaptation_macs();
      row.params_adaptive = report.params_adaptive;
      pareto.push_back(row);
    }
  }
  auto pareto_csv = open_out(join_path(cfg.out_dir, "pareto.csv"));
  write_pareto_csv(pareto_csv, pareto);
  std::cout << "cost: wrote cost.csv, cost_breakdown.csv, cost_report.txt, "
               "pareto.csv ("
            << pareto.size() << " measured rows)\n";
}

void cmd_gamma_stats(const RunConfig& cfg) {
  cfg.validate();
  if (cfg.adapter_kind != AdapterKind::kCase)
    throw ConfigError("gamma statistics need adapter.kind = case");
  OutputLock lock(cfg.out_dir);
  write_echo(cfg);

  Backbone backbone = restore_backbone(cfg, model_in_path(cfg));
  std::vector<SyntheticDomain> domains = test_domains(cfg);
  DomainTaskSampler sampler(source_ptrs(domains), cfg.sampler);
  RandomStream rng(derive_stream(cfg.seed, "gamma"));
  std::vector<Task> tasks;
  tasks.reserve(static_cast<size_t>(cfg.gamma_num_tasks));
  for (int i = 0; i < cfg.gamma_num_tasks; ++i)
    tasks.push_back(sampler.next(rng));

  std::vector<GammaRow> rows = dump_gamma_stats(backbone, tasks);
  auto os = open_out(join_path(cfg.out_dir, "gamma_stats.csv"));
  os << "block_index,stage_index,channels,count,median,q1,q3,whisker_lo,"
        "whisker_hi,outliers\n";
  for (const GammaRow& row : rows) {
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "%d,%d,%d,%lld,%.6f,%.6f,%.6f,%.6f,%.6f,%lld\n",
                  row.block_index, row.stage_index, row.channels,
                  static_cast<long long>(row.count), row.median, row.q1,
                  row.q3, row.whisker_lo, row.whisker_hi,
                  static_cast<long long>(row.outliers));
    os << buf;
  }
  std::cout << "gamma-stats: " << rows.size() << " blocks over "
            << cfg.gamma_num_tasks << " tasks\n";
}

int run_command(const std::string& name, const RunConfig& cfg) {
  using Command = void (*)(const RunConfig&);
  static const std::map<std::string, Command> commands = {
      {"pretrain", cmd_pretrain}, {"meta-train", cmd_metatrain},
      {"eval", cmd_eval},         {"ablate", cmd_ablate},
      {"cost", cmd_cost},         {"gamma-stats", cmd_gamma_stats},
  };
  auto it = commands.find(name);
  if (it == commands.end()) {
    std::cerr << "unknown command '" << name << "'\n";
    return 1;
  }
  try {
    it->second(cfg);
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}

}  // namespace caselab
