#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "caselab/backbone.hpp"
#include "caselab/episodes.hpp"
#include "caselab/heads.hpp"
#include "caselab/rng.hpp"

namespace caselab {

struct TrainerConfig {
  int total_tasks = 10000;
  int tasks_per_outer_update = 16;
  int inner_steps = 500;
  int inner_batch = 128;
  float body_lr_start = 1e-3f;
  float body_lr_end = 1e-5f;
  float head_lr_start = 1e-3f;
  float head_lr_end = 1e-5f;
  uint64_t seed = 0;

  void validate() const;
  HeadFitConfig head_fit() const;
};

enum class BaselineMode { kHeadOnly, kFullFinetune };

const char* baseline_mode_name(BaselineMode m);
BaselineMode parse_baseline_mode(const std::string& s);

struct BaselineConfig {
  BaselineMode mode = BaselineMode::kHeadOnly;
  float finetune_lr = 1e-3f;
  int finetune_steps = 50;
  HeadFitConfig head;

  void validate() const;
};

// Pull interface for episodic tasks; implementations decide the domain mix.
class TaskSampler {
 public:
  virtual ~TaskSampler() = default;
  virtual Task next(RandomStream& rng) = 0;
};

// Uniform choice over a fixed set of sources, then an episode from it.
class DomainTaskSampler : public TaskSampler {
 public:
  DomainTaskSampler(std::vector<const TaskSource*> sources, SamplerConfig cfg);
  Task next(RandomStream& rng) override;

 private:
  std::vector<const TaskSource*> sources_;
  SamplerConfig cfg_;
};

struct TrainLogRow {
  int step = 0;          // outer update index, 1-based
  float task_loss = 0.f; // mean loss over the update's contributing tasks
  int skip_count = 0;    // cumulative skipped tasks so far
};

struct MetaTrainResult {
  std::vector<TrainLogRow> rows;
  int tasks_processed = 0;
  int tasks_skipped = 0;
};

// Coordinate-descent meta-training of the adapter parameters. Per task: a
// gradient-free adaptive context pass fills the embedding buffer, a fresh
// zero-initialized head is fitted on it, then one backward pass through the
// body (adapters adaptive, head held constant) accumulates adapter gradients.
// Gradients are averaged over each group of tasks_per_outer_update tasks
// before the Adam step. Non-finite task losses are skipped; more than 1% of
// total_tasks skipped aborts the run.
MetaTrainResult meta_train(Backbone& backbone, const TrainerConfig& cfg,
                           TaskSampler& sampler);

struct Prediction {
  Tensor logits;            // [targets, way]
  std::vector<int> labels;  // argmax per row
  float accuracy = 0.f;     // agreement with the task's target labels
  uint64_t body_evals = 0;  // instance forwards spent producing this
};

// One adaptive context pass (adapters refresh their caches), head fit on the
// buffered embeddings, then an inference-mode target pass reusing the caches.
Prediction adapt_and_predict(Backbone& backbone, const Task& task,
                             const HeadFitConfig& head_cfg, uint64_t seed);

struct EvalTaskRow {
  int task_id = 0;
  int way = 0;
  int shots = 0;  // context examples per class (averaged when imbalanced)
  float accuracy = 0.f;
};

struct EvalReport {
  std::vector<EvalTaskRow> rows;
  std::vector<float> accuracies;
  float mean = 0.f;
  float ci95 = 0.f;  // 1.96 * sample std / sqrt(n); 0 for a single task
  int task_count = 0;
};

EvalReport evaluate(Backbone& backbone, TaskSampler& sampler, int num_tasks,
                    const HeadFitConfig& head_cfg, uint64_t seed);

// head_only: adapters disabled, fit a head on frozen embeddings, predict.
// full_finetune: clone the backbone, unfreeze theta, joint full-batch Adam on
// the context through body and head, predict. The input backbone is never
// mutated beyond its evaluation counter (head_only embeds through it).
Prediction run_baseline(Backbone& backbone, const BaselineConfig& cfg,
                        const Task& task, uint64_t seed);

// "step,task_loss,skip_count"
void write_train_log_csv(std::ostream& os, const MetaTrainResult& result);
// "task_id,way,shots,accuracy"
void write_eval_csv(std::ostream& os, const EvalReport& report);

}  // namespace caselab
