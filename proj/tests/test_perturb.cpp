#include <doctest.h>

#include <stdexcept>

#include <cmath>

#include "pdtb/perturb.hpp"
#include "pdtb/rng.hpp"

using namespace pdtb;

namespace {

PdtConfig two_segment_config() {
  PdtConfig cfg;
  cfg.blocks = 1;
  cfg.embed_dim = 16;
  cfg.head_width = 16;
  cfg.prompt_J = 2;
  cfg.prompt_H = 3;
  return cfg;
}

SegmentFeatures demo_features(const PdtConfig& cfg, int n_traj) {
  EnvConfig env;
  auto tasks = enumerate_tasks();
  DemoSet p = build_prompt_dataset(env, tasks[46], n_traj, 19);
  return featurize(p, cfg.prompt_H, FeatureMode::raw);
}

double l2_to(const PromptTokens& p, const PromptTokens& q) {
  double s = 0.0;
  for (std::int64_t i = 0; i < p.rtg.size(); ++i) s += std::pow(p.rtg[i] - q.rtg[i], 2);
  for (std::int64_t i = 0; i < p.states.size(); ++i) s += std::pow(p.states[i] - q.states[i], 2);
  for (std::int64_t i = 0; i < p.actions.size(); ++i) {
    s += std::pow(p.actions[i] - q.actions[i], 2);
  }
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("perturb: identity at sigma 0, full coverage otherwise") {
  PdtConfig cfg = two_segment_config();
  SegmentFeatures f = demo_features(cfg, 4);
  Rng rng(3);
  PromptTokens base =
      prompt_tokens(assemble_prompt({f.segments[0], f.segments[1]}, 2), cfg);

  PromptTokens same = perturb(base, 0.0, rng);
  CHECK(l2_to(base, same) == 0.0);

  PromptTokens moved = perturb(base, 0.5, rng);
  // noise lands on every token of every segment
  for (std::int64_t i = 0; i < base.rtg.size(); ++i) CHECK(moved.rtg[i] != base.rtg[i]);
  for (std::int64_t i = 0; i < base.states.size(); ++i) CHECK(moved.states[i] != base.states[i]);
  for (std::int64_t i = 0; i < base.actions.size(); ++i) {
    CHECK(moved.actions[i] != base.actions[i]);
  }

  CHECK_THROWS_AS(perturb(base, -0.1, rng), std::invalid_argument);
}

TEST_CASE("perturb: mean displacement is zero within 3 standard errors") {
  PdtConfig cfg = two_segment_config();
  SegmentFeatures f = demo_features(cfg, 4);
  PromptTokens base = prompt_tokens(assemble_prompt({f.segments[0], f.segments[1]}, 2), cfg);
  Rng rng(7);
  const double sigma = 0.3;
  const int draws = 10000;
  double sum = 0.0;
  std::int64_t count = 0;
  for (int i = 0; i < draws; ++i) {
    PromptTokens p = perturb(base, sigma, rng);
    for (std::int64_t j = 0; j < p.states.size(); ++j) {
      sum += p.states[j] - base.states[j];
      ++count;
    }
  }
  const double mean = sum / count;
  const double se = sigma / std::sqrt(static_cast<double>(count));
  CHECK(std::abs(mean) < 3.0 * se);
}

TEST_CASE("sigma schedule endpoints and midpoint") {
  PerturbConfig cfg;
  CHECK(sigma_at(cfg, 0, 250) == doctest::Approx(1.1));
  CHECK(sigma_at(cfg, 249, 250) == doctest::Approx(0.1));
  CHECK(sigma_at(cfg, 124, 250) == doctest::Approx(0.6).epsilon(0.01));
}

TEST_CASE("hill climb on a concave stub") {
  PdtConfig cfg = two_segment_config();
  SegmentFeatures f = demo_features(cfg, 4);

  // Stub objective: negative distance of the prompt's state block to a fixed
  // target vector; hill climbing must never let the incumbent get worse.
  PromptTokens target = prompt_tokens(assemble_prompt({f.segments[2], f.segments[3]}, 2), cfg);
  auto objective = [&](const PromptTokens& p, int) { return -l2_to(p, target); };

  PerturbState final_state;
  TuneHistory h = hill_climb(f, 2, 250, PerturbConfig{}, cfg, 11, objective, &final_state);
  REQUIRE(h.size() == 250);

  double best = -1e300;
  for (const TuneRecord& r : h) {
    best = std::max(best, r.G);
  }
  CHECK(final_state.incumbent_return == doctest::Approx(best));

  // Incumbent sequence (prefix maxima of candidate returns) is non-decreasing
  // and improves over the first candidate.
  CHECK(best > h.front().G);

  SUBCASE("fixed seed reproduces the run") {
    TuneHistory h2 = hill_climb(f, 2, 250, PerturbConfig{}, cfg, 11, objective);
    REQUIRE(h2.size() == h.size());
    for (size_t i = 0; i < h.size(); ++i) CHECK(h[i].G == h2[i].G);
  }

  SUBCASE("history carries the anneal") {
    CHECK(h.front().explore == doctest::Approx(1.1));
    CHECK(h.back().explore == doctest::Approx(0.1));
  }
}
