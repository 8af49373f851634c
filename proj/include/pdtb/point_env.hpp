#pragma once

#include <array>
#include <cstdint>
#include <vector>

namespace pdtb {

// Dynamics/reward constants shared by every task. The values are declared
// defaults, not dictated by the task grid.
struct EnvConfig {
  double a_max = 0.5;        // per-component move clamp
  int horizon = 20;          // forced termination step T
  double stop_radius = 0.2;  // proximity threshold for the bonus
  double bonus = 10.0;
  double bonus_decay = 0.95;  // per wasted step

  uint64_t hash() const;
};

// Goal on a circle: (radius*cos(angle), radius*sin(angle)). Tasks with
// angle > 1.5*pi form the holdout test set.
struct TaskSpec {
  int id = -1;
  double radius = 0.0;
  double angle = 0.0;
  std::array<double, 2> goal{0.0, 0.0};
  double gamma = 1.0;
  bool is_test = false;

  // Minimal number of move steps to reach the goal from the origin.
  int min_steps(const EnvConfig& cfg) const;
};

struct EnvState {
  std::array<double, 2> position{0.0, 0.0};
  int t = 0;
  bool done = false;
};

struct EnvAction {
  std::array<double, 2> move{0.0, 0.0};
  bool stop = false;
};

struct StepResult {
  EnvState state;
  double reward = 0.0;
  bool done = false;
};

// The full 60-task grid: radii {0.9, 1.9, 2.9} x 20 angles {0.0, 0.1pi, ...,
// 1.9pi}, ordered by (radius, angle). 48 train + 12 test.
std::vector<TaskSpec> enumerate_tasks();

std::vector<TaskSpec> training_tasks();
std::vector<TaskSpec> test_tasks();

EnvState env_reset(const TaskSpec& task);

// Moves are clamped per component; a stop action ends the episode at the
// current position with reward -dist (+ decayed bonus when within
// stop_radius). Reaching the horizon without stopping terminates with the
// plain distance penalty. Throws std::logic_error if state.done.
StepResult env_step(const EnvConfig& cfg, const TaskSpec& task, const EnvState& state,
                    const EnvAction& action);

// Stateful convenience wrapper around the pure reset/step functions.
class PointEnv {
 public:
  PointEnv(const EnvConfig& cfg, const TaskSpec& task) : cfg_(cfg), task_(task) {}

  const EnvState& reset() {
    state_ = env_reset(task_);
    return state_;
  }

  StepResult step(const EnvAction& action) {
    StepResult r = env_step(cfg_, task_, state_, action);
    state_ = r.state;
    return r;
  }

  const EnvState& state() const { return state_; }
  const TaskSpec& task() const { return task_; }
  const EnvConfig& config() const { return cfg_; }

 private:
  EnvConfig cfg_;
  TaskSpec task_;
  EnvState state_;
};

}  // namespace pdtb
