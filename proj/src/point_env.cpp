#include "pdtb/point_env.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace pdtb {

namespace {
constexpr double kPi = 3.14159265358979323846;

double dist_to_goal(const TaskSpec& task, const std::array<double, 2>& p) {
  const double dx = p[0] - task.goal[0];
  const double dy = p[1] - task.goal[1];
  return std::sqrt(dx * dx + dy * dy);
}

uint64_t mix64(uint64_t h, uint64_t v) {
  h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  return h;
}

uint64_t double_bits(double d) {
  uint64_t u;
  static_assert(sizeof(u) == sizeof(d));
  __builtin_memcpy(&u, &d, sizeof(u));
  return u;
}
}  // namespace

uint64_t EnvConfig::hash() const {
  uint64_t h = 0x5bd1e9955bd1e995ULL;
  h = mix64(h, double_bits(a_max));
  h = mix64(h, static_cast<uint64_t>(horizon));
  h = mix64(h, double_bits(stop_radius));
  h = mix64(h, double_bits(bonus));
  h = mix64(h, double_bits(bonus_decay));
  return h;
}

int TaskSpec::min_steps(const EnvConfig& cfg) const {
  return static_cast<int>(std::ceil(radius / cfg.a_max));
}

std::vector<TaskSpec> enumerate_tasks() {
  // The published grid claims 20 angles and a 48/12 split with test tasks at
  // angle > 1.5pi; that forces angles k*0.1pi for k = 0..19.
  const double radii[3] = {0.9, 1.9, 2.9};
  std::vector<TaskSpec> tasks;
  tasks.reserve(60);
  int id = 0;
  for (double r : radii) {
    for (int k = 0; k < 20; ++k) {
      TaskSpec t;
      t.id = id++;
      t.radius = r;
      t.angle = 0.1 * kPi * k;
      t.goal = {r * std::cos(t.angle), r * std::sin(t.angle)};
      t.gamma = 1.0;
      t.is_test = t.angle > 1.5 * kPi;
      tasks.push_back(t);
    }
  }
  return tasks;
}

std::vector<TaskSpec> training_tasks() {
  std::vector<TaskSpec> out;
  for (const TaskSpec& t : enumerate_tasks()) {
    if (!t.is_test) out.push_back(t);
  }
  return out;
}

std::vector<TaskSpec> test_tasks() {
  std::vector<TaskSpec> out;
  for (const TaskSpec& t : enumerate_tasks()) {
    if (t.is_test) out.push_back(t);
  }
  return out;
}

EnvState env_reset(const TaskSpec&) {
  return EnvState{};
}

StepResult env_step(const EnvConfig& cfg, const TaskSpec& task, const EnvState& state,
                    const EnvAction& action) {
  if (state.done) throw std::logic_error("env_step: episode is already done");

  StepResult r;
  r.state = state;

  if (action.stop) {
    // Stop ends the episode where the agent stands; the move component is
    // ignored on a stop step.
    const double d = dist_to_goal(task, state.position);
    r.reward = -d;
    if (d <= cfg.stop_radius) {
      const int wasted = std::max(0, state.t - task.min_steps(cfg));
      r.reward += cfg.bonus * std::pow(cfg.bonus_decay, wasted);
    }
    r.state.done = true;
    r.done = true;
    return r;
  }

  r.state.position[0] += std::clamp(action.move[0], -cfg.a_max, cfg.a_max);
  r.state.position[1] += std::clamp(action.move[1], -cfg.a_max, cfg.a_max);
  r.state.t = state.t + 1;

  if (r.state.t >= cfg.horizon) {
    // Out of time: distance penalty, never the bonus.
    r.reward = -dist_to_goal(task, r.state.position);
    r.state.done = true;
    r.done = true;
  }
  return r;
}

}  // namespace pdtb
