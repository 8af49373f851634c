#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "pdtb/autodiff.hpp"
#include "pdtb/datasets.hpp"
#include "pdtb/pdt_model.hpp"
#include "pdtb/trajectory.hpp"

namespace pdtb {

enum class FeatureMode { raw, transformer };

// One feature vector per extractable segment, in extract_segments order.
// raw: the H*(1+|S|+|A|) flattened transition values; transformer: the
// frozen model's segment embedding Psi.
struct SegmentFeatures {
  FeatureMode mode = FeatureMode::raw;
  int dim = 0;
  std::vector<std::vector<double>> vectors;
  std::vector<std::pair<int, int>> provenance;  // (trajectory, offset)
  std::vector<Segment> segments;

  int count() const { return static_cast<int>(vectors.size()); }
};

// model may be null in raw mode and is required in transformer mode.
SegmentFeatures featurize(const DemoSet& demos, int H, FeatureMode mode,
                          PdtModel* model = nullptr);

struct EpsSchedule {
  enum class Kind { constant, anneal };
  Kind kind = Kind::anneal;
  double eps = 0.1;        // constant schedule value
  int anneal_rounds = 30;  // linear 1 -> 0 over this many rounds
};

double epsilon_at(const EpsSchedule& schedule, int round);

struct BanditConfig {
  int hidden = 16;
  int hidden_layers = 2;
  double lr = 1e-3;
  int gd_steps = 50;  // full-batch iterations per bandit round
  EpsSchedule schedule;
  double ucb_c = 3.0;
};

// Width-16 ReLU MLP regressor with a zero-initialized output layer, so an
// untrained model predicts exactly 0 for every segment.
class RewardModel {
 public:
  RewardModel(int input_dim, const BanditConfig& cfg, uint64_t seed);

  double predict(const std::vector<double>& x);
  std::vector<double> predict_all(const SegmentFeatures& features);

  // Full-batch gradient descent on MSE; returns the per-step loss trace.
  std::vector<double> fit(const std::vector<const std::vector<double>*>& xs,
                          const std::vector<double>& ys, double lr, int steps);

  ParamStore& params() { return params_; }

 private:
  Graph::NodeId forward(Graph& g, Graph::NodeId x);
  int input_dim_;
  int hidden_layers_;
  ParamStore params_;
};

// J independent per-slot reward models plus the bookkeeping the update rule
// needs: visit counts, the replay buffer of (chosen indices, return), and the
// running return normalizer (std floored at 1e-6).
class BanditState {
 public:
  BanditState(int J, int segment_count, int feature_dim, const BanditConfig& cfg, uint64_t seed);

  int slots() const { return static_cast<int>(models_.size()); }
  int segment_count() const { return static_cast<int>(counts_.empty() ? 0 : counts_[0].size()); }
  int rounds() const { return static_cast<int>(buffer_.size()); }
  const std::vector<std::vector<int>>& counts() const { return counts_; }

  double normalize(double g) const;
  double denormalize(double z) const;

  // Y[j][m] = phi_j(segment m); row j depends only on model j.
  DenseArray predict_matrix(const SegmentFeatures& features);

  void observe(const std::vector<int>& chosen, double g);

  // Per-slot full-batch regression of normalized returns on the features of
  // the segments each slot actually chose. Returns per-slot loss traces.
  // Throws std::logic_error when the buffer is empty.
  std::vector<std::vector<double>> update(const SegmentFeatures& features, double lr, int steps);

  RewardModel& model(int j) { return models_[j]; }

 private:
  struct Entry {
    std::vector<int> chosen;
    double g;
  };
  std::vector<RewardModel> models_;
  std::vector<std::vector<int>> counts_;
  std::vector<Entry> buffer_;
  double mean_ = 0.0;
  double std_ = 0.0;
};

// Row-wise argmax; ties break toward the lowest segment index.
std::vector<int> select_greedy(const DenseArray& Y);

// Per slot independently: explore uniformly with probability eps, exploit
// otherwise.
std::vector<int> select_eps_greedy(const DenseArray& Y, double eps, Rng& rng);

// score = Y + c * sqrt(ln(k+1) / (1 + n)); while k is within the first
// segment_count rounds and c > 0, unvisited segments take priority.
std::vector<int> select_ucb(const DenseArray& Y, const std::vector<std::vector<int>>& counts,
                            double c, int k);

enum class TunePolicy { eps_greedy, ucb };

struct TuneRecord {
  int round = 0;
  std::vector<int> chosen;
  std::vector<std::pair<int, int>> provenance;
  double G = 0.0;
  double explore = 0.0;  // epsilon, ucb bonus scale, or perturbation sigma
};
using TuneHistory = std::vector<TuneRecord>;

using PromptEvaluator = std::function<double(const StochasticPrompt&, int round)>;

// Algorithm loop: select a prompt with the current models, evaluate it, store
// the pair, refit. The evaluator wraps a real rollout in production and a
// stub in tests.
TuneHistory tuning_loop(const SegmentFeatures& features, int J, int rounds, TunePolicy policy,
                        const BanditConfig& cfg, uint64_t seed, const PromptEvaluator& evaluate);

// Prefix sums of (oracle_best - G_k).
std::vector<double> cumulative_regret(const TuneHistory& history, double oracle_best);

}  // namespace pdtb
