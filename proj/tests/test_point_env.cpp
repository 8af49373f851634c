#include <doctest.h>

#include <stdexcept>

#include <cmath>

#include "pdtb/datasets.hpp"
#include "pdtb/point_env.hpp"
#include "pdtb/rng.hpp"

using namespace pdtb;

TEST_CASE("task grid counts and split") {
  auto tasks = enumerate_tasks();
  REQUIRE(tasks.size() == 60);

  int train = 0, test = 0;
  for (const TaskSpec& t : tasks) (t.is_test ? test : train)++;
  CHECK(train == 48);
  CHECK(test == 12);
  CHECK(training_tasks().size() == 48);
  CHECK(test_tasks().size() == 12);

  // Ordered by (radius, angle) with derivable goals.
  for (size_t i = 1; i < tasks.size(); ++i) {
    const bool ordered = tasks[i - 1].radius < tasks[i].radius ||
                         (tasks[i - 1].radius == tasks[i].radius &&
                          tasks[i - 1].angle < tasks[i].angle);
    CHECK(ordered);
  }
  for (const TaskSpec& t : tasks) {
    CHECK(t.goal[0] == doctest::Approx(t.radius * std::cos(t.angle)).epsilon(1e-15));
    CHECK(t.goal[1] == doctest::Approx(t.radius * std::sin(t.angle)).epsilon(1e-15));
    CHECK(t.is_test == (t.angle > 1.5 * 3.14159265358979323846));
  }
}

TEST_CASE("goal trigonometry example") {
  auto tasks = enumerate_tasks();
  // radius 0.9, angle 0.1*pi
  const TaskSpec& t = tasks[1];
  CHECK(t.radius == doctest::Approx(0.9));
  CHECK(t.goal[0] == doctest::Approx(0.8560).epsilon(1e-3));
  CHECK(t.goal[1] == doctest::Approx(0.2781).epsilon(1e-3));
}

TEST_CASE("reset gives the origin, deterministically") {
  auto tasks = enumerate_tasks();
  EnvState s = env_reset(tasks[17]);
  CHECK(s.position[0] == 0.0);
  CHECK(s.position[1] == 0.0);
  CHECK(s.t == 0);
  CHECK(!s.done);

  EnvConfig cfg;
  PointEnv env(cfg, tasks[17]);
  env.reset();
  env.step({{0.2, 0.2}, false});
  EnvAction stop;
  stop.stop = true;
  env.step(stop);
  const EnvState& fresh = env.reset();
  CHECK(fresh.position[0] == 0.0);
  CHECK(fresh.t == 0);
  CHECK(!fresh.done);

  EnvState again = env_reset(tasks[17]);
  CHECK(again.position == fresh.position);
}

TEST_CASE("step dynamics, stop reward, truncation") {
  EnvConfig cfg;
  auto tasks = enumerate_tasks();

  SUBCASE("plain move gives zero reward") {
    const TaskSpec& task = tasks[45];
    EnvState s = env_reset(task);
    StepResult r = env_step(cfg, task, s, {{0.3, 0.4}, false});
    CHECK(r.reward == 0.0);
    CHECK(!r.done);
    CHECK(r.state.position[0] == doctest::Approx(0.3));
    CHECK(r.state.position[1] == doctest::Approx(0.4));
    CHECK(r.state.t == 1);
  }

  SUBCASE("moves are clamped") {
    const TaskSpec& task = tasks[45];
    EnvState s = env_reset(task);
    StepResult r = env_step(cfg, task, s, {{5.0, -5.0}, false});
    CHECK(r.state.position[0] == doctest::Approx(0.5));
    CHECK(r.state.position[1] == doctest::Approx(-0.5));
  }

  SUBCASE("stop on the goal at t_min earns the full bonus") {
    // Walk the optimal line on a radius-2.9 task, then stop.
    const TaskSpec& task = tasks[46];  // radius 2.9
    REQUIRE(task.min_steps(cfg) == 6);
    EnvState s = env_reset(task);
    double total = 0.0;
    for (int i = 0; i < 6; ++i) {
      const double dx = task.goal[0] - s.position[0];
      const double dy = task.goal[1] - s.position[1];
      const double d = std::hypot(dx, dy);
      const double speed = std::min(cfg.a_max, d);
      StepResult r = env_step(cfg, task, s, {{dx / d * speed, dy / d * speed}, false});
      total += r.reward;
      s = r.state;
    }
    EnvAction stop;
    stop.stop = true;
    StepResult r = env_step(cfg, task, s, stop);
    total += r.reward;
    CHECK(r.done);
    CHECK(r.reward == doctest::Approx(10.0).epsilon(1e-9));
    CHECK(total == doctest::Approx(10.0).epsilon(1e-9));
  }

  SUBCASE("stop far away pays the distance") {
    const TaskSpec& task = tasks[21];  // radius 1.9, angle 0.1pi
    EnvState s = env_reset(task);
    // Move to a point at distance exactly 1.0 from the goal, along the ray.
    const double d0 = task.radius;
    const double frac = (d0 - 1.0) / d0;
    EnvState mid = s;
    mid.position = {task.goal[0] * frac, task.goal[1] * frac};
    mid.t = 2;
    EnvAction stop;
    stop.stop = true;
    StepResult r = env_step(cfg, task, mid, stop);
    CHECK(r.reward == doctest::Approx(-1.0).epsilon(1e-9));
    CHECK(r.done);
  }

  SUBCASE("late stop decays the bonus") {
    const TaskSpec& task = tasks[46];
    EnvState at_goal;
    at_goal.position = {task.goal[0], task.goal[1]};
    at_goal.t = 8;  // two wasted steps
    EnvAction stop;
    stop.stop = true;
    StepResult r = env_step(cfg, task, at_goal, stop);
    CHECK(r.reward == doctest::Approx(10.0 * 0.95 * 0.95).epsilon(1e-12));
  }

  SUBCASE("horizon truncation applies the penalty and no bonus") {
    const TaskSpec& task = tasks[46];
    EnvState s = env_reset(task);
    StepResult r{};
    for (int i = 0; i < cfg.horizon; ++i) {
      r = env_step(cfg, task, s, {{0.0, 0.0}, false});
      s = r.state;
    }
    CHECK(r.done);
    CHECK(r.reward == doctest::Approx(-task.radius).epsilon(1e-9));

    // Sitting on the goal at truncation still forfeits the bonus.
    EnvState near_goal = env_reset(task);
    near_goal.t = cfg.horizon - 1;
    near_goal.position = {task.goal[0], task.goal[1]};
    StepResult rr = env_step(cfg, task, near_goal, {{0.0, 0.0}, false});
    CHECK(rr.done);
    CHECK(rr.reward == doctest::Approx(0.0).epsilon(1e-9));
  }

  SUBCASE("stepping a done state is a protocol error") {
    const TaskSpec& task = tasks[3];
    EnvState s = env_reset(task);
    EnvAction stop;
    stop.stop = true;
    StepResult r = env_step(cfg, task, s, stop);
    REQUIRE(r.done);
    CHECK_THROWS_AS(env_step(cfg, task, r.state, stop), std::logic_error);
  }
}

TEST_CASE("episode return is the single terminal reward") {
  EnvConfig cfg;
  auto tasks = enumerate_tasks();
  Rng rng(99);
  for (int rep = 0; rep < 20; ++rep) {
    const TaskSpec& task = tasks[rng.uniform_int(60)];
    EnvState s = env_reset(task);
    double sum = 0.0;
    double last = 0.0;
    while (!s.done) {
      EnvAction a;
      if (rng.bernoulli(0.1)) {
        a.stop = true;
      } else {
        a.move = {rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)};
      }
      StepResult r = env_step(cfg, task, s, a);
      sum += r.reward;
      last = r.reward;
      s = r.state;
    }
    CHECK(sum == doctest::Approx(last).epsilon(1e-12));
  }
}

TEST_CASE("scripted expert attains the +10 optimum on every task") {
  EnvConfig cfg;
  for (const TaskSpec& task : enumerate_tasks()) {
    Trajectory t = scripted_expert(cfg, task, 0.0, 1);
    CHECK(t.total_return == doctest::Approx(10.0).epsilon(1e-9));
  }
}

TEST_CASE("dynamics are deterministic") {
  EnvConfig cfg;
  auto tasks = enumerate_tasks();
  const TaskSpec& task = tasks[33];
  Rng rng(5);
  std::vector<EnvAction> actions;
  for (int i = 0; i < 12; ++i) {
    actions.push_back({{rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)}, false});
  }
  auto run = [&]() {
    EnvState s = env_reset(task);
    std::vector<double> xs;
    for (const EnvAction& a : actions) {
      StepResult r = env_step(cfg, task, s, a);
      s = r.state;
      xs.push_back(s.position[0]);
      xs.push_back(s.position[1]);
    }
    return xs;
  };
  CHECK(run() == run());
}
