#pragma once

#include <functional>

#include "pdtb/bandit.hpp"
#include "pdtb/pdt_model.hpp"

namespace pdtb {

struct PerturbConfig {
  double sigma_hi = 1.1;
  double sigma_lo = 0.1;
};

// Linear anneal across the run; the final round sits exactly at sigma_lo.
double sigma_at(const PerturbConfig& cfg, int round, int rounds);

// i.i.d. zero-mean Gaussian noise on every token value of the prompt:
// returns-to-go, states and actions alike, across all segments at once.
PromptTokens perturb(const PromptTokens& prompt, double sigma, Rng& rng);

struct PerturbState {
  PromptTokens incumbent;
  double incumbent_return = 0.0;
  bool evaluated = false;  // incumbent_return is meaningless until first accept
  double sigma = 0.0;
  int round = 0;
};

using TokenEvaluator = std::function<double(const PromptTokens&, int round)>;

// Hill climbing in raw prompt space: start from J segments drawn uniformly
// from the pool, evaluate a perturbed candidate each round, keep it only on
// strict improvement. Candidates live in continuous token space and are never
// re-projected onto real demonstrations.
TuneHistory hill_climb(const SegmentFeatures& features, int J, int rounds,
                       const PerturbConfig& cfg, const PdtConfig& model_cfg, uint64_t seed,
                       const TokenEvaluator& evaluate, PerturbState* final_state = nullptr);

}  // namespace pdtb
