#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "pdtb/bandit.hpp"
#include "pdtb/config.hpp"
#include "pdtb/datasets.hpp"
#include "pdtb/pdt_model.hpp"
#include "pdtb/perturb.hpp"

namespace pdtb {

inline constexpr const char* kVersion = "0.1.0";

enum class TuneMethod { none, eps_greedy, ucb, perturb };
TuneMethod tune_method_from_name(const std::string& name);
std::string tune_method_name(TuneMethod m);

// Named task selections: ring8/ring3/ring16 (radius-2.9 ring subsets),
// train48, test12, all60, "ids:41,43,...".
std::vector<TaskSpec> select_tasks(const std::string& spec);

// A run: resolved config + output root + master seed. Every emitted file
// embeds (config hash, seed, version).
struct RunContext {
  Config config;
  std::filesystem::path out = "runs/default";
  uint64_t seed = 1;
  int jobs = 1;

  EnvConfig env_config() const;
  PdtConfig pdt_config() const;
  TrainConfig train_config() const;
  BanditConfig bandit_config() const;
  PerturbConfig perturb_config() const;

  std::vector<TaskSpec> tasks(const std::string& key, const std::string& fallback) const;

  std::filesystem::path data_dir() const { return out / "data"; }
  std::filesystem::path ckpt_dir() const { return out / "ckpt"; }
  std::filesystem::path log_dir() const { return out / "logs"; }
  std::filesystem::path results_dir() const { return out / "results"; }

  std::filesystem::path d_file(int task_id) const;
  std::filesystem::path p_file(int task_id) const;
  std::filesystem::path ckpt_file(int J, int H) const;

  void write_meta(std::ostream& os) const;
};

// Precedence: profile defaults, then the config file, then key=value
// overrides. Unknown profiles are a config error.
RunContext make_context(const std::string& config_file, const std::string& profile,
                        const std::vector<std::string>& overrides, const std::string& out,
                        uint64_t seed, int jobs);

DemoSet load_d(const RunContext& ctx, int task_id);
DemoSet load_p(const RunContext& ctx, int task_id);

struct TuneParams {
  TuneMethod method = TuneMethod::eps_greedy;
  int rounds = 250;
  int window = 50;
  FeatureMode feature_mode = FeatureMode::raw;
  BanditConfig bandit;
  PerturbConfig perturb;
  double target_return = 10.0;
};

struct TuneCellResult {
  TuneHistory history;
  double window_mean = 0.0;
};

double final_window_mean(const TuneHistory& history, int window);

// One (task, seed) cell: 'rounds' online rollouts of the frozen model with
// the chosen prompt-selection method.
TuneCellResult run_tune_cell(PdtModel& model, const EnvConfig& env_cfg, const TaskSpec& task,
                             const DemoSet& prompts, const TuneParams& params, uint64_t seed);

void write_history_csv(const std::filesystem::path& path, const RunContext& ctx,
                       const TaskSpec& task, const std::string& method, uint64_t cell_seed,
                       int J, int H, const TuneHistory& history);

struct HistoryFile {
  int task_id = -1;
  int J = 0;
  int H = 0;
  std::string method;
  TuneHistory history;
};
HistoryFile read_history_csv(const std::filesystem::path& path);

int cmd_gen_data(RunContext& ctx, bool force);
int cmd_train(RunContext& ctx, bool dt_baseline);
int cmd_tune(RunContext& ctx, const std::string& method);
int cmd_mixture(RunContext& ctx);
int cmd_ood(RunContext& ctx, bool skip_finetune);
int cmd_plot(const std::vector<std::filesystem::path>& histories,
             const std::filesystem::path& out_dir, const std::string& data_file);

// Exit codes: 0 success, 2 config error, 3 missing inputs.
int run_cli(int argc, const char* const* argv);

}  // namespace pdtb
