#include "pdtb/bandit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "pdtb/optimizer.hpp"

namespace pdtb {

SegmentFeatures featurize(const DemoSet& demos, int H, FeatureMode mode, PdtModel* model) {
  if (mode == FeatureMode::transformer && model == nullptr) {
    throw std::invalid_argument("featurize: transformer mode needs the pre-trained model");
  }
  SegmentFeatures out;
  out.mode = mode;
  out.segments = extract_segments(demos.trajectories, H);
  for (const Segment& seg : out.segments) {
    out.provenance.emplace_back(seg.source_trajectory, seg.source_offset);
    if (mode == FeatureMode::raw) {
      std::vector<double> v;
      for (const Transition& tr : seg.transitions) {
        v.push_back(tr.return_to_go);
        v.insert(v.end(), tr.state.begin(), tr.state.end());
        v.insert(v.end(), tr.action.begin(), tr.action.end());
      }
      out.vectors.push_back(std::move(v));
    } else {
      out.vectors.push_back(model->encode_segment(seg));
    }
  }
  out.dim = out.vectors.empty() ? 0 : static_cast<int>(out.vectors.front().size());
  for (const auto& v : out.vectors) {
    if (static_cast<int>(v.size()) != out.dim) {
      throw std::logic_error("featurize: inconsistent feature lengths");
    }
  }
  return out;
}

double epsilon_at(const EpsSchedule& schedule, int round) {
  if (schedule.kind == EpsSchedule::Kind::constant) return schedule.eps;
  if (round >= schedule.anneal_rounds) return 0.0;
  return 1.0 - static_cast<double>(round) / schedule.anneal_rounds;
}

RewardModel::RewardModel(int input_dim, const BanditConfig& cfg, uint64_t seed)
    : input_dim_(input_dim), hidden_layers_(cfg.hidden_layers) {
  Rng rng(derive_seed(seed, {0xA12}));
  int in = input_dim;
  for (int l = 0; l < hidden_layers_; ++l) {
    params_.add("fc" + std::to_string(l) + ".w", init_linear(in, cfg.hidden, rng));
    params_.add("fc" + std::to_string(l) + ".b", DenseArray::zeros({cfg.hidden}));
    in = cfg.hidden;
  }
  // Zero output layer: round-0 predictions are constant, so early behavior is
  // driven by the exploration rule alone.
  params_.add("out.w", DenseArray::zeros({in, 1}));
  params_.add("out.b", DenseArray::zeros({1}));
}

Graph::NodeId RewardModel::forward(Graph& g, Graph::NodeId x) {
  Graph::NodeId h = x;
  for (int l = 0; l < hidden_layers_; ++l) {
    const std::string p = "fc" + std::to_string(l);
    h = g.relu(g.add(g.matmul(h, g.param(params_.at(p + ".w"))), g.param(params_.at(p + ".b"))));
  }
  return g.add(g.matmul(h, g.param(params_.at("out.w"))), g.param(params_.at("out.b")));
}

double RewardModel::predict(const std::vector<double>& x) {
  if (static_cast<int>(x.size()) != input_dim_) {
    throw std::invalid_argument("RewardModel::predict: feature length mismatch");
  }
  Graph g;
  Graph::NodeId in = g.input(DenseArray::from({1, input_dim_}, x));
  return g.value(forward(g, in))[0];
}

std::vector<double> RewardModel::predict_all(const SegmentFeatures& features) {
  const int M = features.count();
  DenseArray x({M, input_dim_});
  for (int m = 0; m < M; ++m) {
    if (static_cast<int>(features.vectors[m].size()) != input_dim_) {
      throw std::invalid_argument("RewardModel::predict_all: feature length mismatch");
    }
    std::copy(features.vectors[m].begin(), features.vectors[m].end(),
              x.data() + static_cast<std::int64_t>(m) * input_dim_);
  }
  Graph g;
  const DenseArray& y = g.value(forward(g, g.input(std::move(x))));
  return std::vector<double>(y.data(), y.data() + y.size());
}

std::vector<double> RewardModel::fit(const std::vector<const std::vector<double>*>& xs,
                                     const std::vector<double>& ys, double lr, int steps) {
  const int N = static_cast<int>(xs.size());
  if (N == 0 || ys.size() != xs.size()) {
    throw std::invalid_argument("RewardModel::fit: empty or ragged batch");
  }
  DenseArray x({N, input_dim_});
  DenseArray t({N, 1});
  for (int i = 0; i < N; ++i) {
    std::copy(xs[i]->begin(), xs[i]->end(), x.data() + static_cast<std::int64_t>(i) * input_dim_);
    t[i] = ys[i];
  }
  std::vector<double> trace;
  for (int s = 0; s < steps; ++s) {
    params_.zero_grad();
    Graph g;
    Graph::NodeId pred = forward(g, g.input(x));
    Graph::NodeId loss =
        g.mse_loss(pred, g.input(t), g.input(DenseArray::full({N}, 1.0)));
    g.backward(loss);
    sgd_step(params_, lr);
    trace.push_back(g.value(loss)[0]);
  }
  return trace;
}

BanditState::BanditState(int J, int segment_count, int feature_dim, const BanditConfig& cfg,
                         uint64_t seed) {
  if (J < 1) throw std::invalid_argument("BanditState: J must be >= 1");
  if (segment_count < 1) throw std::invalid_argument("BanditState: empty segment pool");
  for (int j = 0; j < J; ++j) {
    models_.emplace_back(feature_dim, cfg, derive_seed(seed, {0xB0, static_cast<uint64_t>(j)}));
    counts_.emplace_back(segment_count, 0);
  }
}

double BanditState::normalize(double g) const {
  return (g - mean_) / std::max(std_, 1e-6);
}

double BanditState::denormalize(double z) const {
  return z * std::max(std_, 1e-6) + mean_;
}

DenseArray BanditState::predict_matrix(const SegmentFeatures& features) {
  const int J = slots();
  const int M = features.count();
  if (M != segment_count()) {
    throw std::invalid_argument("predict_matrix: feature count does not match the pool");
  }
  DenseArray Y({J, M});
  for (int j = 0; j < J; ++j) {
    std::vector<double> row = models_[j].predict_all(features);
    std::copy(row.begin(), row.end(), Y.data() + static_cast<std::int64_t>(j) * M);
  }
  return Y;
}

void BanditState::observe(const std::vector<int>& chosen, double g) {
  if (static_cast<int>(chosen.size()) != slots()) {
    throw std::invalid_argument("observe: one index per slot required");
  }
  for (int j = 0; j < slots(); ++j) {
    if (chosen[j] < 0 || chosen[j] >= segment_count()) {
      throw std::invalid_argument("observe: segment index out of range");
    }
    counts_[j][chosen[j]]++;
  }
  buffer_.push_back({chosen, g});

  double sum = 0.0;
  for (const Entry& e : buffer_) sum += e.g;
  mean_ = sum / buffer_.size();
  double var = 0.0;
  for (const Entry& e : buffer_) var += (e.g - mean_) * (e.g - mean_);
  std_ = std::sqrt(var / buffer_.size());
}

std::vector<std::vector<double>> BanditState::update(const SegmentFeatures& features, double lr,
                                                     int steps) {
  if (buffer_.empty()) throw std::logic_error("update: buffer is empty");
  std::vector<std::vector<double>> traces;
  std::vector<double> ys;
  for (const Entry& e : buffer_) ys.push_back(normalize(e.g));
  for (int j = 0; j < slots(); ++j) {
    std::vector<const std::vector<double>*> xs;
    for (const Entry& e : buffer_) xs.push_back(&features.vectors[e.chosen[j]]);
    traces.push_back(models_[j].fit(xs, ys, lr, steps));
  }
  return traces;
}

std::vector<int> select_greedy(const DenseArray& Y) {
  if (Y.ndim() != 2 || Y.size() == 0) throw std::invalid_argument("select_greedy: Y must be [J,M]");
  const int J = Y.dim(0), M = Y.dim(1);
  std::vector<int> out(J, 0);
  for (int j = 0; j < J; ++j) {
    const double* row = Y.data() + static_cast<std::int64_t>(j) * M;
    int best = 0;
    for (int m = 1; m < M; ++m) {
      if (row[m] > row[best]) best = m;
    }
    out[j] = best;
  }
  return out;
}

std::vector<int> select_eps_greedy(const DenseArray& Y, double eps, Rng& rng) {
  if (eps < 0.0 || eps > 1.0) throw std::invalid_argument("select_eps_greedy: eps outside [0,1]");
  std::vector<int> out = select_greedy(Y);
  const int M = Y.dim(1);
  for (int j = 0; j < Y.dim(0); ++j) {
    if (eps > 0.0 && rng.bernoulli(eps)) out[j] = rng.uniform_int(M);
  }
  return out;
}

std::vector<int> select_ucb(const DenseArray& Y, const std::vector<std::vector<int>>& counts,
                            double c, int k) {
  if (Y.ndim() != 2) throw std::invalid_argument("select_ucb: Y must be [J,M]");
  const int J = Y.dim(0), M = Y.dim(1);
  if (static_cast<int>(counts.size()) != J) {
    throw std::invalid_argument("select_ucb: counts do not match Y");
  }
  std::vector<int> out(J, 0);
  for (int j = 0; j < J; ++j) {
    const double* row = Y.data() + static_cast<std::int64_t>(j) * M;
    double best_score = -std::numeric_limits<double>::infinity();
    int best = 0;
    for (int m = 0; m < M; ++m) {
      double score;
      if (c > 0.0 && k < M && counts[j][m] == 0) {
        score = std::numeric_limits<double>::infinity();
      } else {
        score = row[m] + c * std::sqrt(std::log(static_cast<double>(k) + 1.0) /
                                       (1.0 + counts[j][m]));
      }
      if (score > best_score) {
        best_score = score;
        best = m;
      }
    }
    out[j] = best;
  }
  return out;
}

TuneHistory tuning_loop(const SegmentFeatures& features, int J, int rounds, TunePolicy policy,
                        const BanditConfig& cfg, uint64_t seed, const PromptEvaluator& evaluate) {
  if (rounds < 1) throw std::invalid_argument("tuning_loop: rounds must be >= 1");
  if (features.count() == 0) throw std::invalid_argument("tuning_loop: empty segment pool");

  BanditState state(J, features.count(), features.dim, cfg, seed);
  Rng rng(derive_seed(seed, {0xC}));
  TuneHistory history;

  for (int k = 0; k < rounds; ++k) {
    DenseArray Y = state.predict_matrix(features);
    std::vector<int> chosen;
    double explore;
    if (policy == TunePolicy::eps_greedy) {
      explore = epsilon_at(cfg.schedule, k);
      chosen = select_eps_greedy(Y, explore, rng);
    } else {
      explore = cfg.ucb_c;
      chosen = select_ucb(Y, state.counts(), cfg.ucb_c, k);
    }

    std::vector<Segment> segs;
    for (int idx : chosen) segs.push_back(features.segments[idx]);
    StochasticPrompt prompt = assemble_prompt(std::move(segs), J);

    const double G = evaluate(prompt, k);
    state.observe(chosen, G);
    state.update(features, cfg.lr, cfg.gd_steps);

    TuneRecord rec;
    rec.round = k;
    rec.chosen = chosen;
    for (int idx : chosen) rec.provenance.push_back(features.provenance[idx]);
    rec.G = G;
    rec.explore = explore;
    history.push_back(std::move(rec));
  }
  return history;
}

std::vector<double> cumulative_regret(const TuneHistory& history, double oracle_best) {
  std::vector<double> out;
  double sum = 0.0;
  for (const TuneRecord& r : history) {
    sum += oracle_best - r.G;
    out.push_back(sum);
  }
  return out;
}

}  // namespace pdtb
