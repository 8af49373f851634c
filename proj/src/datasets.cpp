#include "pdtb/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "pdtb/rng.hpp"

namespace pdtb {

namespace {

using ActFn = std::function<EnvAction(const EnvState&, Rng&)>;

Trajectory run_episode(const EnvConfig& cfg, const TaskSpec& task, Rng& rng, const ActFn& act) {
  Trajectory traj;
  traj.task_id = task.id;
  EnvState state = env_reset(task);
  std::vector<double> rewards;
  while (!state.done) {
    EnvAction a = act(state, rng);
    StepResult r = env_step(cfg, task, state, a);

    Transition tr;
    tr.state = {state.position[0], state.position[1]};
    tr.action = {std::clamp(a.move[0], -cfg.a_max, cfg.a_max),
                 std::clamp(a.move[1], -cfg.a_max, cfg.a_max), a.stop ? 1.0 : 0.0};
    tr.reward = r.reward;
    tr.timestep = state.t;
    traj.transitions.push_back(std::move(tr));

    rewards.push_back(r.reward);
    state = r.state;
  }
  std::vector<double> rtg = compute_returns_to_go(rewards);
  for (int t = 0; t < traj.length(); ++t) traj.transitions[t].return_to_go = rtg[t];
  traj.total_return = rtg.empty() ? 0.0 : rtg.front();
  return traj;
}

double novice_threshold(std::vector<double> returns) {
  // Nearest-rank 5th percentile.
  std::sort(returns.begin(), returns.end());
  const int rank = static_cast<int>(std::ceil(0.05 * static_cast<double>(returns.size())));
  return returns[std::max(0, rank - 1)];
}

}  // namespace

std::string quality_name(Quality q) {
  switch (q) {
    case Quality::expert: return "expert";
    case Quality::novice: return "novice";
    case Quality::mixture: return "mixture";
  }
  return "expert";
}

Quality quality_from_name(const std::string& name) {
  if (name == "expert") return Quality::expert;
  if (name == "novice") return Quality::novice;
  if (name == "mixture") return Quality::mixture;
  throw std::runtime_error("unknown quality label: " + name);
}

Trajectory scripted_expert(const EnvConfig& cfg, const TaskSpec& task, double noise_scale,
                           uint64_t seed) {
  if (noise_scale < 0) throw std::invalid_argument("scripted_expert: noise_scale must be >= 0");
  Rng rng(seed);
  return run_episode(cfg, task, rng, [&](const EnvState& s, Rng& r) {
    EnvAction a;
    const double dx = task.goal[0] - s.position[0];
    const double dy = task.goal[1] - s.position[1];
    const double dist = std::sqrt(dx * dx + dy * dy);
    if (dist <= cfg.stop_radius) {
      a.stop = true;
      return a;
    }
    const double speed = std::min(cfg.a_max, dist);
    a.move = {dx / dist * speed + r.uniform(-noise_scale, noise_scale),
              dy / dist * speed + r.uniform(-noise_scale, noise_scale)};
    return a;
  });
}

std::vector<Trajectory> scripted_novice(const EnvConfig& cfg, const TaskSpec& task,
                                        uint64_t seed, int pool) {
  if (pool < 20) throw std::invalid_argument("scripted_novice: pool must be >= 20");
  std::vector<Trajectory> episodes;
  episodes.reserve(pool);
  for (int e = 0; e < pool; ++e) {
    Rng rng(derive_seed(seed, {static_cast<uint64_t>(e)}));
    episodes.push_back(run_episode(cfg, task, rng, [&](const EnvState&, Rng& r) {
      EnvAction a;
      if (r.bernoulli(0.05)) {
        a.stop = true;
      } else {
        a.move = {r.uniform(-cfg.a_max, cfg.a_max), r.uniform(-cfg.a_max, cfg.a_max)};
      }
      return a;
    }));
  }
  std::vector<double> returns;
  for (const Trajectory& t : episodes) returns.push_back(t.total_return);
  const double cut = novice_threshold(returns);

  std::vector<Trajectory> out;
  for (Trajectory& t : episodes) {
    if (t.total_return <= cut) out.push_back(std::move(t));
  }
  return out;
}

DemoSet build_prompt_dataset(const EnvConfig& cfg, const TaskSpec& task, int n, uint64_t seed,
                             double noise_scale) {
  if (n < 1) throw std::invalid_argument("build_prompt_dataset: n must be >= 1");
  const int pool = std::max(3 * n, 30);
  std::vector<Trajectory> candidates;
  candidates.reserve(pool);
  for (int e = 0; e < pool; ++e) {
    candidates.push_back(
        scripted_expert(cfg, task, noise_scale, derive_seed(seed, {0xE, static_cast<uint64_t>(e)})));
  }
  // Highest-return candidates first; stable on ties so the draw is seeded.
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const Trajectory& a, const Trajectory& b) {
                     return a.total_return > b.total_return;
                   });
  const int keep = std::min<int>(candidates.size(), std::max(n, 2 * n));
  candidates.resize(keep);

  Rng rng(derive_seed(seed, {0xD}));
  DemoSet set;
  set.task_id = task.id;
  set.quality = Quality::expert;
  set.expert_fraction = 1.0;
  for (int i = 0; i < n; ++i) {
    const int pick = rng.uniform_int(static_cast<int>(candidates.size()));
    set.trajectories.push_back(candidates[pick]);
    candidates.erase(candidates.begin() + pick);
  }
  return set;
}

DemoSet mix_datasets(const DemoSet& expert, const DemoSet& novice, int j_percent) {
  if (j_percent < 0 || j_percent > 100 || j_percent % 10 != 0) {
    throw std::invalid_argument("mix_datasets: j_percent must be one of {0,10,...,100}");
  }
  if (expert.task_id != novice.task_id) {
    throw std::invalid_argument("mix_datasets: expert and novice sets belong to different tasks");
  }
  const int n = expert.size();
  const int n_expert = static_cast<int>(std::lround(j_percent / 100.0 * n));
  const int n_novice = n - n_expert;
  if (novice.size() < n_novice) {
    throw std::invalid_argument("mix_datasets: novice set too small (" +
                                std::to_string(novice.size()) + " < " +
                                std::to_string(n_novice) + ")");
  }
  DemoSet out;
  out.task_id = expert.task_id;
  out.quality = Quality::mixture;
  out.expert_fraction = j_percent / 100.0;
  out.trajectories.assign(expert.trajectories.begin(), expert.trajectories.begin() + n_expert);
  out.trajectories.insert(out.trajectories.end(), novice.trajectories.begin(),
                          novice.trajectories.begin() + n_novice);
  return out;
}

DemoSet build_training_dataset(const EnvConfig& cfg, const TaskSpec& task, int episodes,
                               uint64_t seed) {
  if (episodes < 1) throw std::invalid_argument("build_training_dataset: episodes must be >= 1");
  DemoSet set;
  set.task_id = task.id;
  set.quality = Quality::mixture;
  int n_expert = 0;
  for (int e = 0; e < episodes; ++e) {
    const uint64_t eseed = derive_seed(seed, {0x7, static_cast<uint64_t>(e)});
    if (e == 0) {
      set.trajectories.push_back(scripted_expert(cfg, task, 0.0, eseed));
      ++n_expert;
    } else if (e % 4 == 0) {
      // Random-policy episode.
      Rng rng(eseed);
      set.trajectories.push_back(run_episode(cfg, task, rng, [&](const EnvState&, Rng& r) {
        EnvAction a;
        if (r.bernoulli(0.05)) {
          a.stop = true;
        } else {
          a.move = {r.uniform(-cfg.a_max, cfg.a_max), r.uniform(-cfg.a_max, cfg.a_max)};
        }
        return a;
      }));
    } else {
      Rng pick(derive_seed(seed, {0x8, static_cast<uint64_t>(e)}));
      double noise = 0.0;
      switch (e % 4) {
        case 1: noise = pick.uniform(0.02, 0.3); break;
        case 2: noise = pick.uniform(0.3, 0.8); break;
        default: noise = pick.uniform(0.8, 1.5); break;
      }
      set.trajectories.push_back(scripted_expert(cfg, task, noise, eseed));
      ++n_expert;
    }
  }
  set.expert_fraction = static_cast<double>(n_expert) / episodes;
  return set;
}

void save_demoset(const DemoSet& set, const std::filesystem::path& path, const EnvConfig& cfg) {
  nlohmann::json header;
  header["schema_version"] = 1;
  header["kind"] = "pdtb.demoset";
  header["task_id"] = set.task_id;
  header["quality"] = quality_name(set.quality);
  header["expert_fraction"] = set.expert_fraction;
  char hex[32];
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(cfg.hash()));
  header["env_config_hash"] = hex;
  header["count"] = set.size();

  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw std::runtime_error("save_demoset: cannot open " + tmp.string());
    out << header.dump() << "\n";
    for (const Trajectory& t : set.trajectories) {
      nlohmann::json j;
      j["task_id"] = t.task_id;
      auto& states = j["states"] = nlohmann::json::array();
      auto& actions = j["actions"] = nlohmann::json::array();
      auto& rewards = j["rewards"] = nlohmann::json::array();
      auto& rtg = j["returns_to_go"] = nlohmann::json::array();
      auto& steps = j["timesteps"] = nlohmann::json::array();
      for (const Transition& tr : t.transitions) {
        states.push_back(tr.state);
        actions.push_back(tr.action);
        rewards.push_back(tr.reward);
        rtg.push_back(tr.return_to_go);
        steps.push_back(tr.timestep);
      }
      out << j.dump() << "\n";
    }
  }
  std::filesystem::rename(tmp, path);
}

DemoSet load_demoset(const std::filesystem::path& path, const EnvConfig* cfg) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_demoset: cannot open " + path.string());

  std::string line;
  int lineno = 0;
  auto parse_line = [&](const std::string& text) {
    try {
      return nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw std::runtime_error("load_demoset: parse error at line " + std::to_string(lineno) +
                               " of " + path.string() + ": " + e.what());
    }
  };

  if (!std::getline(in, line)) {
    throw std::runtime_error("load_demoset: empty file " + path.string());
  }
  ++lineno;
  nlohmann::json header = parse_line(line);
  if (!header.contains("schema_version") || header["schema_version"] != 1) {
    throw std::runtime_error("load_demoset: unsupported schema version in " + path.string());
  }
  if (cfg != nullptr) {
    char hex[32];
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(cfg->hash()));
    if (header.value("env_config_hash", "") != hex) {
      throw std::runtime_error("load_demoset: env config hash mismatch in " + path.string());
    }
  }

  DemoSet set;
  set.task_id = header.value("task_id", -1);
  set.quality = quality_from_name(header.value("quality", "expert"));
  set.expert_fraction = header.value("expert_fraction", 1.0);

  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j = parse_line(line);
    Trajectory t;
    t.task_id = j.value("task_id", set.task_id);
    const auto& states = j.at("states");
    const auto& actions = j.at("actions");
    const auto& rewards = j.at("rewards");
    const auto& rtg = j.at("returns_to_go");
    const auto& steps = j.at("timesteps");
    const size_t n = states.size();
    if (actions.size() != n || rewards.size() != n || rtg.size() != n || steps.size() != n) {
      throw std::runtime_error("load_demoset: ragged trajectory at line " +
                               std::to_string(lineno));
    }
    for (size_t i = 0; i < n; ++i) {
      Transition tr;
      tr.state = states[i].get<std::vector<double>>();
      tr.action = actions[i].get<std::vector<double>>();
      tr.reward = rewards[i].get<double>();
      tr.return_to_go = rtg[i].get<double>();
      tr.timestep = steps[i].get<int>();
      t.transitions.push_back(std::move(tr));
    }
    t.total_return = t.length() > 0 ? t.transitions.front().return_to_go : 0.0;
    t.validate();
    set.trajectories.push_back(std::move(t));
  }
  return set;
}

}  // namespace pdtb
