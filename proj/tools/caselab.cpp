#include <cstdint>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "caselab/commands.hpp"
#include "caselab/config.hpp"
#include "caselab/errors.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Per-task channel-scaling adapters on a small conv backbone"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::string checkpoint;
  uint64_t seed = 0;

  struct Sub {
    const char* name;
    const char* desc;
  };
  const Sub subs[] = {
      {"pretrain", "supervised pretraining of the backbone on the base data"},
      {"meta-train", "coordinate-descent training of the adapters"},
      {"eval", "episodic evaluation on the held-out domains"},
      {"ablate", "adapter-architecture sweep, one CSV row per point"},
      {"cost", "analytic adaptation-cost report and pareto CSV"},
      {"gamma-stats", "per-block scaling statistics over sampled tasks"},
  };
  for (const Sub& s : subs) {
    CLI::App* sub = app.add_subcommand(s.name, s.desc);
    sub->add_option("--config", config_path, "run configuration file");
    sub->add_option("--out", out_dir, "output directory (overrides out_dir)");
    sub->add_option("--seed", seed, "root seed (overrides seed)");
    sub->add_option("--checkpoint", checkpoint,
                    "checkpoint path (overrides checkpoint)");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;  // 0 covers --help and --version
  }

  CLI::App* parsed = app.get_subcommands().front();
  caselab::RunConfig cfg;
  try {
    if (!config_path.empty()) cfg = caselab::load_run_config(config_path);
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  }
  if (parsed->count("--out")) cfg.out_dir = out_dir;
  if (parsed->count("--seed")) cfg.seed = seed;
  if (parsed->count("--checkpoint")) cfg.checkpoint = checkpoint;

  return caselab::run_command(parsed->get_name(), cfg);
}
