#include "caselab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "caselab/adam.hpp"
#include "caselab/errors.hpp"
#include "caselab/tape.hpp"

namespace caselab {

namespace {

// [n,...] and [m,...] with matching trailing dims -> [n+m,...].
Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank()) throw ShapeError("concat_rows rank mismatch");
  for (int i = 1; i < a.rank(); ++i)
    if (a.dim(i) != b.dim(i)) throw ShapeError("concat_rows dim mismatch");
  std::vector<int> shape = a.shape;
  shape[0] = a.dim(0) + b.dim(0);
  Tensor out = Tensor::zeros(shape);
  std::copy(a.data.begin(), a.data.end(), out.data.begin());
  std::copy(b.data.begin(), b.data.end(), out.data.begin() + a.numel());
  return out;
}

int argmax_row(const Tensor& logits, int row) {
  int way = logits.dim(1);
  int best = 0;
  for (int k = 1; k < way; ++k)
    if (logits.data[size_t(row) * way + size_t(k)] >
        logits.data[size_t(row) * way + size_t(best)])
      best = k;
  return best;
}

// Head-fit seed folded from the task's context identity, so identical tasks
// fit identical heads regardless of their position in the stream.
uint64_t task_head_seed(uint64_t root, const Task& task) {
  uint64_t h = root;
  for (int64_t id : task.context_ids) {
    uint64_t s = h ^ static_cast<uint64_t>(id);
    h = splitmix64_next(s);
  }
  return h;
}

Prediction score_targets(const LinearHead& head, const Tensor& target_emb,
                         const std::vector<int>& target_labels) {
  Prediction p;
  p.logits = predict(head, target_emb);
  int m = p.logits.dim(0);
  p.labels.resize(static_cast<size_t>(m));
  int correct = 0;
  for (int r = 0; r < m; ++r) {
    p.labels[static_cast<size_t>(r)] = argmax_row(p.logits, r);
    correct +=
        p.labels[static_cast<size_t>(r)] == target_labels[static_cast<size_t>(r)]
            ? 1
            : 0;
  }
  p.accuracy = m > 0 ? static_cast<float>(correct) / static_cast<float>(m) : 0.f;
  return p;
}

}  // namespace

void TrainerConfig::validate() const {
  if (total_tasks < 0) throw ConfigError("trainer.total_tasks must be >= 0");
  if (tasks_per_outer_update < 1)
    throw ConfigError("trainer.tasks_per_outer_update must be >= 1");
  if (inner_steps < 0) throw ConfigError("trainer.inner_steps must be >= 0");
  if (inner_batch < 1) throw ConfigError("trainer.inner_batch must be >= 1");
  if (body_lr_start <= 0.f || head_lr_start <= 0.f)
    throw ConfigError("trainer learning rates must be positive");
  if (body_lr_end > body_lr_start || head_lr_end > head_lr_start)
    throw ConfigError("trainer learning-rate schedules must be non-increasing");
}

HeadFitConfig TrainerConfig::head_fit() const {
  HeadFitConfig cfg;
  cfg.steps = inner_steps;
  cfg.batch_size = inner_batch;
  cfg.lr_start = head_lr_start;
  cfg.lr_end = head_lr_end;
  return cfg;
}

const char* baseline_mode_name(BaselineMode m) {
  switch (m) {
    case BaselineMode::kHeadOnly:
      return "head_only";
    case BaselineMode::kFullFinetune:
      return "full_finetune";
  }
  return "?";
}

BaselineMode parse_baseline_mode(const std::string& s) {
  if (s == "head_only") return BaselineMode::kHeadOnly;
  if (s == "full_finetune") return BaselineMode::kFullFinetune;
  throw ConfigError("unknown baseline mode '" + s + "'");
}

void BaselineConfig::validate() const {
  if (finetune_steps < 0)
    throw ConfigError("baseline.finetune_steps must be >= 0");
  if (finetune_lr <= 0.f) throw ConfigError("baseline.finetune_lr must be > 0");
}

DomainTaskSampler::DomainTaskSampler(std::vector<const TaskSource*> sources,
                                     SamplerConfig cfg)
    : sources_(std::move(sources)), cfg_(cfg) {
  if (sources_.empty())
    throw ConfigError("task sampler needs at least one source");
  cfg_.validate();
}

Task DomainTaskSampler::next(RandomStream& rng) {
  int idx = sources_.size() == 1
                ? 0
                : rng.uniform_int(0, static_cast<int>(sources_.size()) - 1);
  return sample_task(cfg_, *sources_[static_cast<size_t>(idx)], rng);
}

MetaTrainResult meta_train(Backbone& backbone, const TrainerConfig& cfg,
                           TaskSampler& sampler) {
  cfg.validate();
  if (!backbone.theta_frozen())
    throw StateError("meta_train wants a frozen body; pretrain first");
  if (backbone.adapter_kind() == AdapterKind::kNone)
    throw StateError("meta_train wants adapters attached to the body");

  NamedTensors phi = backbone.adapter_params();
  for (auto& [name, param] : phi) param->requires_grad = true;
  zero_grads(phi);
  AdamState opt(phi);

  RandomStream task_rng(derive_stream(cfg.seed, "meta-train/tasks"));
  uint64_t head_root = derive_stream(cfg.seed, "meta-train/heads");
  HeadFitConfig head_cfg = cfg.head_fit();

  MetaTrainResult result;
  int num_updates =
      cfg.total_tasks == 0
          ? 0
          : (cfg.total_tasks + cfg.tasks_per_outer_update - 1) /
                cfg.tasks_per_outer_update;
  int update_idx = 0;
  int group_contributed = 0;
  double group_loss = 0.0;

  for (int t = 0; t < cfg.total_tasks; ++t) {
    Task task = sampler.next(task_rng);
    bool contributed = false;
    float loss_val = 0.f;
    try {
      EmbeddingBuffer buffer;
      buffer.embeddings =
          backbone.embed(task.context_images, AdapterUse::kAdaptive);
      buffer.labels = task.context_labels;
      LinearHead head =
          fit_head(buffer, head_cfg, task_head_seed(head_root, task));

      // Outer pass: body recomputed in adaptive mode over context and target
      // jointly; the fitted head enters as a constant so no gradient reaches
      // it, and theta is frozen, leaving the adapters as the only gradient
      // sinks.
      Tape tape;
      Var x = tape.input(concat_rows(task.context_images, task.target_images));
      Var z = backbone.forward(tape, x, AdapterUse::kAdaptive);
      Var logits = linear(z, tape.input(head.w), tape.input(head.b));
      std::vector<int> labels = task.context_labels;
      labels.insert(labels.end(), task.target_labels.begin(),
                    task.target_labels.end());
      Var loss = softmax_cross_entropy(logits, labels);
      loss_val = loss.value().data[0];
      if (!std::isfinite(loss_val))
        throw NumericError("non-finite task loss");
      tape.backward(loss);
      contributed = true;
    } catch (const NumericError&) {
      ++result.tasks_skipped;
      if (static_cast<int64_t>(result.tasks_skipped) * 100 >
          static_cast<int64_t>(cfg.total_tasks))
        throw NumericError(
            "meta_train aborted: skipped " +
            std::to_string(result.tasks_skipped) + " of " +
            std::to_string(cfg.total_tasks) + " tasks (limit 1%)");
    }
    ++result.tasks_processed;
    if (contributed) {
      ++group_contributed;
      group_loss += loss_val;
    }

    bool boundary = (t + 1) % cfg.tasks_per_outer_update == 0 ||
                    t + 1 == cfg.total_tasks;
    if (!boundary) continue;

    TrainLogRow row;
    row.step = update_idx + 1;
    row.skip_count = result.tasks_skipped;
    if (group_contributed > 0) {
      scale_grads(phi, 1.f / static_cast<float>(group_contributed));
      opt.step(linear_lr(cfg.body_lr_start, cfg.body_lr_end, update_idx,
                         num_updates));
      row.task_loss =
          static_cast<float>(group_loss / group_contributed);
    } else {
      zero_grads(phi);
      row.task_loss = std::numeric_limits<float>::quiet_NaN();
    }
    result.rows.push_back(row);
    ++update_idx;
    group_contributed = 0;
    group_loss = 0.0;
  }
  return result;
}

Prediction adapt_and_predict(Backbone& backbone, const Task& task,
                             const HeadFitConfig& head_cfg, uint64_t seed) {
  uint64_t evals_before = backbone.eval_count();
  EmbeddingBuffer buffer;
  buffer.embeddings =
      backbone.embed(task.context_images, AdapterUse::kAdaptive);
  buffer.labels = task.context_labels;
  LinearHead head = fit_head(buffer, head_cfg, seed);
  Tensor target_emb =
      backbone.embed(task.target_images, AdapterUse::kInference);
  Prediction p = score_targets(head, target_emb, task.target_labels);
  p.body_evals = backbone.eval_count() - evals_before;
  return p;
}

EvalReport evaluate(Backbone& backbone, TaskSampler& sampler, int num_tasks,
                    const HeadFitConfig& head_cfg, uint64_t seed) {
  if (num_tasks < 1) throw ConfigError("evaluate wants at least one task");
  RandomStream task_rng(derive_stream(seed, "eval/tasks"));
  uint64_t head_root = derive_stream(seed, "eval/heads");

  EvalReport report;
  report.task_count = num_tasks;
  double sum = 0.0;
  for (int i = 0; i < num_tasks; ++i) {
    Task task = sampler.next(task_rng);
    Prediction p = adapt_and_predict(backbone, task, head_cfg,
                                     task_head_seed(head_root, task));
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

Prediction run_baseline(Backbone& backbone, const BaselineConfig& cfg,
                        const Task& task, uint64_t seed) {
  cfg.validate();
  if (cfg.mode == BaselineMode::kHeadOnly) {
    uint64_t evals_before = backbone.eval_count();
    EmbeddingBuffer buffer;
    buffer.embeddings =
        backbone.embed(task.context_images, AdapterUse::kDisabled);
    buffer.labels = task.context_labels;
    LinearHead head = fit_head(buffer, cfg.head, seed);
    Tensor target_emb =
        backbone.embed(task.target_images, AdapterUse::kDisabled);
    Prediction p = score_targets(head, target_emb, task.target_labels);
    p.body_evals = backbone.eval_count() - evals_before;
    return p;
  }

  Backbone tuned = backbone.clone();
  tuned.unfreeze_theta();
  int emb_dim = tuned.spec().embedding_dim();
  LinearHead head;
  head.w = Tensor::zeros({task.way, emb_dim});
  head.b = Tensor::zeros({task.way});
  head.w.requires_grad = true;
  head.b.requires_grad = true;

  NamedTensors params = tuned.theta_trainable_params();
  params.emplace_back("head/w", &head.w);
  params.emplace_back("head/b", &head.b);
  AdamState opt(params);
  for (int step = 0; step < cfg.finetune_steps; ++step) {
    Tape tape;
    Var z = tape.input(task.context_images);
    Var emb = tuned.forward(tape, z, AdapterUse::kDisabled);
    Var logits = linear(emb, tape.leaf(head.w), tape.leaf(head.b));
    Var loss = softmax_cross_entropy(logits, task.context_labels);
    tape.backward(loss);
    opt.step(cfg.finetune_lr);
  }
  head.w.requires_grad = false;
  head.b.requires_grad = false;
  head.w.clear_grad();
  head.b.clear_grad();

  Tensor target_emb = tuned.embed(task.target_images, AdapterUse::kDisabled);
  Prediction p = score_targets(head, target_emb, task.target_labels);
  p.body_evals = tuned.eval_count();
  return p;
}

void write_train_log_csv(std::ostream& os, const MetaTrainResult& result) {
  os << "step,task_loss,skip_count\n";
  for (const TrainLogRow& row : result.rows)
    os << row.step << ',' << row.task_loss << ',' << row.skip_count << '\n';
}

void write_eval_csv(std::ostream& os, const EvalReport& report) {
  os << "task_id,way,shots,accuracy\n";
  for (const EvalTaskRow& row : report.rows)
    os << row.task_id << ',' << row.way << ',' << row.shots << ','
       << row.accuracy << '\n';
}

}  // namespace caselab
