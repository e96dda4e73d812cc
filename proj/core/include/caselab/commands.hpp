#pragma once

#include <string>

#include "caselab/config.hpp"

namespace caselab {

// Holds cfg.out_dir for the duration of one command: creates the directory,
// refuses to start while another run's lockfile is present, releases on exit.
class OutputLock {
 public:
  explicit OutputLock(const std::string& dir);
  ~OutputLock();
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  std::string lock_path_;
};

// Restores a model from a checkpoint: body tensors are required, adapter
// tensors are applied when present (a body-only checkpoint leaves freshly
// attached adapters at their identity initialization).
void load_model(Backbone& backbone, const std::string& path);

// Each command takes a fully resolved RunConfig, locks cfg.out_dir, writes
// its resolved-config echo beside its artifacts, and throws on failure.
void cmd_pretrain(const RunConfig& cfg);    // pretrained.ckpt, pretrain_summary.csv
void cmd_metatrain(const RunConfig& cfg);   // metatrained.ckpt, train_log.csv, metatrain_summary.csv
void cmd_eval(const RunConfig& cfg);        // eval_<label>.csv, summary_<label>.csv
void cmd_ablate(const RunConfig& cfg);      // ablation.csv
void cmd_cost(const RunConfig& cfg);        // cost.csv, cost_breakdown.csv, cost_report.txt, pareto.csv
void cmd_gamma_stats(const RunConfig& cfg); // gamma_stats.csv

// Dispatch by CLI command name ("pretrain", "meta-train", "eval", "ablate",
// "cost", "gamma-stats") mapping outcomes to exit codes: 0 success, 1 unknown
// command, 2 configuration error, 3 runtime error.
int run_command(const std::string& name, const RunConfig& cfg);

}  // namespace caselab
