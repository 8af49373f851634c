#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "pdtb/point_env.hpp"
#include "pdtb/trajectory.hpp"

namespace pdtb {

enum class Quality { expert, novice, mixture };

std::string quality_name(Quality q);
Quality quality_from_name(const std::string& name);

// Per-task bundle of trajectories: either a training dataset D_i or a
// demonstration/prompt set P_i.
struct DemoSet {
  int task_id = -1;
  std::vector<Trajectory> trajectories;
  Quality quality = Quality::expert;
  double expert_fraction = 1.0;

  int size() const { return static_cast<int>(trajectories.size()); }
};

// Straight-line controller: moves toward the goal at clamped max speed with
// additive uniform noise, stops once within the bonus radius. noise_scale 0
// returns exactly the optimal +10 episode.
Trajectory scripted_expert(const EnvConfig& cfg, const TaskSpec& task, double noise_scale,
                           uint64_t seed);

// Rolls `pool` random-policy episodes (uniform moves, stop probability 0.05
// per step) and keeps those at or below the 5th percentile of pool returns.
std::vector<Trajectory> scripted_novice(const EnvConfig& cfg, const TaskSpec& task,
                                        uint64_t seed, int pool);

// High-return demonstration set P_i: noisy-expert candidate pool, top returns
// kept, n of them sampled.
DemoSet build_prompt_dataset(const EnvConfig& cfg, const TaskSpec& task, int n, uint64_t seed,
                             double noise_scale = 0.05);

// Expert/novice mixture of the expert set's size with round(j% * n) expert
// members first, novices after. Deterministic in its inputs.
DemoSet mix_datasets(const DemoSet& expert, const DemoSet& novice, int j_percent);

// Offline training dataset D_i: noisy experts over a spread of noise scales
// plus random-policy episodes. Episode 0 is always the noise-free optimum.
DemoSet build_training_dataset(const EnvConfig& cfg, const TaskSpec& task, int episodes,
                               uint64_t seed);

// One JSON object per line: a header carrying schema version and environment
// config hash, then one line per trajectory. Writes are atomic.
void save_demoset(const DemoSet& set, const std::filesystem::path& path, const EnvConfig& cfg);

// Throws on malformed lines (with the line number), wrong schema version, or
// a header env hash that disagrees with `cfg`. Trajectory invariants are
// re-validated on load.
DemoSet load_demoset(const std::filesystem::path& path, const EnvConfig* cfg = nullptr);

}  // namespace pdtb
