#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <tuple>
#include <vector>

#include "pdtb/autodiff.hpp"
#include "pdtb/datasets.hpp"
#include "pdtb/point_env.hpp"
#include "pdtb/trajectory.hpp"

namespace pdtb {

struct PdtConfig {
  int blocks = 3;
  int heads = 1;
  int embed_dim = 128;
  int context_K = 5;
  int prompt_J = 1;
  int prompt_H = 3;
  int state_dim = 2;
  int action_dim = 3;  // move x, move y, stop flag
  double target_return = 10.0;
  double mse_weight = 1.0;
  double bce_weight = 1.0;
  int head_width = 128;  // action head: 2 hidden ReLU layers of this width
  int mlp_ratio = 4;     // transformer feed-forward width multiple

  int prompt_transitions() const { return prompt_J * prompt_H; }
  int max_transitions() const { return prompt_transitions() + context_K; }
  int max_tokens() const { return 3 * max_transitions(); }

  void validate() const;
};

// A prompt flattened to raw per-transition token values. This is what the
// model consumes and what the perturbation baseline mutates; it need not
// correspond to any real demonstration.
struct PromptTokens {
  DenseArray rtg;      // [JH, 1]
  DenseArray states;   // [JH, S]
  DenseArray actions;  // [JH, A]
  int transitions = 0;
};

PromptTokens prompt_tokens(const StochasticPrompt& prompt, const PdtConfig& cfg);

// Packed model input. Sequences are prompt transitions followed by the
// window, the window left-padded to K with zero tokens and masked out.
struct PdtBatch {
  int B = 0;
  int L = 0;  // transitions per sequence: J*H + K
  DenseArray rtg;            // [B, L, 1]
  DenseArray states;         // [B, L, S]
  DenseArray actions;        // [B, L, A]
  DenseArray action_target;  // [B, L, A]
  DenseArray loss_mask;      // [B, L]; 1 on real window transitions only
  DenseArray attn_mask;      // [B*heads, 3L, 3L] additive causal+padding mask
};

// The Prompting Decision Transformer. All evaluation paths are read-only on
// the parameters, so a frozen model may serve concurrent rollouts.
class PdtModel {
 public:
  PdtModel(PdtConfig cfg, uint64_t seed);

  const PdtConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  PdtBatch make_batch(const std::vector<const PromptTokens*>& prompts,
                      const std::vector<std::vector<Transition>>& windows) const;

  // Final hidden states [B, 3L, d] after the last block's norm.
  Graph::NodeId hidden_states(Graph& g, const PdtBatch& batch);
  // Predictions at the state-token position of each transition: [B, L, A].
  Graph::NodeId action_predictions(Graph& g, const PdtBatch& batch);
  // MSE on move dims + BCE on the stop logit over unmasked window positions.
  Graph::NodeId loss(Graph& g, const PdtBatch& batch);

  DenseArray predict(const PdtBatch& batch);

  // Psi: mean final hidden state of the segment run as a prompt-only
  // sequence; length embed_dim.
  std::vector<double> encode_segment(const Segment& segment);

  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);

 private:
  Graph::NodeId head(Graph& g, Graph::NodeId hs);
  PdtConfig cfg_;
  ParamStore params_;
};

StochasticPrompt sample_uniform_prompt(const std::vector<Segment>& pool, int J, Rng& rng);

struct TrainConfig {
  int steps = 5000;
  int batch_per_task = 8;
  int tasks_per_step = 8;  // round-robin subset when the train set is larger
  double lr = 1e-4;
  double weight_decay = 1e-4;
  uint64_t seed = 1;
};

struct TrainResult {
  std::vector<double> loss_curve;  // per-step loss, averaged over that step's tasks
};

// Offline multi-task training: per task and step, a batch of context windows
// from D_i conditioned on one prompt drawn uniformly from P_i's segments.
// With J*H = 0 this is the plain decision-transformer baseline. loss_csv, when
// given, receives rows "step,task_id,loss".
TrainResult train_offline(PdtModel& model, const std::vector<DemoSet>& data,
                          const std::vector<DemoSet>& prompts, const TrainConfig& tc,
                          std::ostream* loss_csv = nullptr);

// Minimal environment surface the rollout loop needs. Actions arrive as
// (move x, move y, stop in {0,1}).
class RolloutEnv {
 public:
  virtual ~RolloutEnv() = default;
  virtual std::vector<double> reset() = 0;
  virtual std::tuple<std::vector<double>, double, bool> step(const std::vector<double>& action) = 0;
};

class PointRolloutEnv : public RolloutEnv {
 public:
  PointRolloutEnv(const EnvConfig& cfg, const TaskSpec& task) : env_(cfg, task) {}
  std::vector<double> reset() override;
  std::tuple<std::vector<double>, double, bool> step(const std::vector<double>& action) override;

 private:
  PointEnv env_;
};

struct RolloutResult {
  double total_return = 0.0;
  Trajectory trajectory;
};

// Online episode with a fixed prompt: the window slides over the K most
// recent transitions and the conditioning return starts at target_return,
// decremented by received rewards. Stop fires when sigmoid(logit) > 0.5.
RolloutResult rollout(PdtModel& model, const PromptTokens& prompt, RolloutEnv& env,
                      double target_return);

struct FinetuneResult {
  std::vector<double> epoch_loss;
  std::vector<std::pair<int, double>> online_probe;  // (epoch, mean return)
};

// Continues offline training on a single task's data. epochs = 0 leaves the
// parameters untouched. When probe_every > 0 and an environment is supplied,
// logs a small online evaluation after every probe_every epochs.
FinetuneResult finetune(PdtModel& model, const DemoSet& data, const DemoSet& prompts, int epochs,
                        const TrainConfig& tc, const EnvConfig* probe_env = nullptr,
                        const TaskSpec* probe_task = nullptr, int probe_every = 0);

}  // namespace pdtb
