#include "pdtb/perturb.hpp"

#include <stdexcept>

namespace pdtb {

double sigma_at(const PerturbConfig& cfg, int round, int rounds) {
  if (rounds <= 1) return cfg.sigma_hi;
  const double f = static_cast<double>(round) / (rounds - 1);
  return cfg.sigma_hi + (cfg.sigma_lo - cfg.sigma_hi) * f;
}

PromptTokens perturb(const PromptTokens& prompt, double sigma, Rng& rng) {
  if (sigma < 0.0) throw std::invalid_argument("perturb: sigma must be >= 0");
  PromptTokens out = prompt;
  if (sigma == 0.0) return out;
  for (std::int64_t i = 0; i < out.rtg.size(); ++i) out.rtg[i] += rng.normal(0.0, sigma);
  for (std::int64_t i = 0; i < out.states.size(); ++i) out.states[i] += rng.normal(0.0, sigma);
  for (std::int64_t i = 0; i < out.actions.size(); ++i) out.actions[i] += rng.normal(0.0, sigma);
  return out;
}

TuneHistory hill_climb(const SegmentFeatures& features, int J, int rounds,
                       const PerturbConfig& cfg, const PdtConfig& model_cfg, uint64_t seed,
                       const TokenEvaluator& evaluate, PerturbState* final_state) {
  if (rounds < 1) throw std::invalid_argument("hill_climb: rounds must be >= 1");
  if (features.count() == 0) throw std::invalid_argument("hill_climb: empty segment pool");

  Rng rng(derive_seed(seed, {0x9C}));
  std::vector<int> initial;
  std::vector<Segment> segs;
  for (int j = 0; j < J; ++j) {
    const int idx = rng.uniform_int(features.count());
    initial.push_back(idx);
    segs.push_back(features.segments[idx]);
  }

  PerturbState state;
  state.incumbent = prompt_tokens(assemble_prompt(std::move(segs), J), model_cfg);

  TuneHistory history;
  for (int k = 0; k < rounds; ++k) {
    state.round = k;
    state.sigma = sigma_at(cfg, k, rounds);
    PromptTokens candidate = perturb(state.incumbent, state.sigma, rng);
    const double G = evaluate(candidate, k);
    if (!state.evaluated || G > state.incumbent_return) {
      state.incumbent = std::move(candidate);
      state.incumbent_return = G;
      state.evaluated = true;
    }

    TuneRecord rec;
    rec.round = k;
    rec.chosen = initial;
    for (int idx : initial) rec.provenance.push_back(features.provenance[idx]);
    rec.G = G;
    rec.explore = state.sigma;
    history.push_back(std::move(rec));
  }
  if (final_state) *final_state = state;
  return history;
}

}  // namespace pdtb
