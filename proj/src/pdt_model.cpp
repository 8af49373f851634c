#include "pdtb/pdt_model.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <stdexcept>
#include <string>

#include "pdtb/checkpoint.hpp"
#include "pdtb/optimizer.hpp"

namespace pdtb {

void PdtConfig::validate() const {
  if (blocks < 1 || heads < 1 || embed_dim < 1) {
    throw std::invalid_argument("PdtConfig: blocks/heads/embed_dim must be positive");
  }
  if (embed_dim % heads != 0) {
    throw std::invalid_argument("PdtConfig: embed_dim must be divisible by heads");
  }
  if (context_K < 1) throw std::invalid_argument("PdtConfig: context_K must be >= 1");
  if (prompt_J < 0 || prompt_H < 0 || (prompt_J == 0) != (prompt_H == 0)) {
    throw std::invalid_argument("PdtConfig: prompt_J and prompt_H must both be positive or both zero");
  }
  if (state_dim < 1 || action_dim < 2) {
    throw std::invalid_argument("PdtConfig: bad state/action dims");
  }
}

PromptTokens prompt_tokens(const StochasticPrompt& prompt, const PdtConfig& cfg) {
  if (prompt.num_segments() != cfg.prompt_J) {
    throw std::invalid_argument("prompt_tokens: expected " + std::to_string(cfg.prompt_J) +
                                " segments, got " + std::to_string(prompt.num_segments()));
  }
  PromptTokens out;
  out.transitions = cfg.prompt_transitions();
  out.rtg = DenseArray::zeros({out.transitions, 1});
  out.states = DenseArray::zeros({out.transitions, cfg.state_dim});
  out.actions = DenseArray::zeros({out.transitions, cfg.action_dim});
  int row = 0;
  for (const Segment& seg : prompt.segments) {
    if (seg.length() != cfg.prompt_H) {
      throw std::invalid_argument("prompt_tokens: segment length " +
                                  std::to_string(seg.length()) + " != H=" +
                                  std::to_string(cfg.prompt_H));
    }
    for (const Transition& tr : seg.transitions) {
      if (static_cast<int>(tr.state.size()) != cfg.state_dim ||
          static_cast<int>(tr.action.size()) != cfg.action_dim) {
        throw std::invalid_argument("prompt_tokens: transition dims do not match the config");
      }
      out.rtg[row] = tr.return_to_go;
      for (int i = 0; i < cfg.state_dim; ++i) out.states[row * cfg.state_dim + i] = tr.state[i];
      for (int i = 0; i < cfg.action_dim; ++i) out.actions[row * cfg.action_dim + i] = tr.action[i];
      ++row;
    }
  }
  return out;
}

PdtModel::PdtModel(PdtConfig cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  const int d = cfg_.embed_dim;
  Rng rng(derive_seed(seed, {0xF00D}));

  auto linear = [&](const std::string& name, int fan_in, int fan_out) {
    params_.add(name + ".w", init_linear(fan_in, fan_out, rng));
    params_.add(name + ".b", DenseArray::zeros({fan_out}));
  };

  linear("embed.rtg", 1, d);
  linear("embed.state", cfg_.state_dim, d);
  linear("embed.action", cfg_.action_dim, d);
  params_.add("pos", init_normal({cfg_.max_tokens(), d}, 0.02, rng));

  for (int b = 0; b < cfg_.blocks; ++b) {
    const std::string p = "blk" + std::to_string(b) + ".";
    params_.add(p + "ln1.g", DenseArray::full({d}, 1.0));
    params_.add(p + "ln1.b", DenseArray::zeros({d}));
    linear(p + "attn.q", d, d);
    linear(p + "attn.k", d, d);
    linear(p + "attn.v", d, d);
    linear(p + "attn.o", d, d);
    params_.add(p + "ln2.g", DenseArray::full({d}, 1.0));
    params_.add(p + "ln2.b", DenseArray::zeros({d}));
    linear(p + "mlp.fc", d, cfg_.mlp_ratio * d);
    linear(p + "mlp.proj", cfg_.mlp_ratio * d, d);
  }
  params_.add("final_ln.g", DenseArray::full({d}, 1.0));
  params_.add("final_ln.b", DenseArray::zeros({d}));

  linear("head.fc1", d, cfg_.head_width);
  linear("head.fc2", cfg_.head_width, cfg_.head_width);
  linear("head.out", cfg_.head_width, cfg_.action_dim);

  // Configuration fingerprint rides along in the checkpoint so that a reload
  // into a mismatched architecture fails loudly.
  params_.add("meta.config",
              DenseArray::from({10}, {static_cast<double>(cfg_.blocks),
                                      static_cast<double>(cfg_.heads),
                                      static_cast<double>(d),
                                      static_cast<double>(cfg_.context_K),
                                      static_cast<double>(cfg_.prompt_J),
                                      static_cast<double>(cfg_.prompt_H),
                                      static_cast<double>(cfg_.state_dim),
                                      static_cast<double>(cfg_.action_dim),
                                      cfg_.target_return,
                                      static_cast<double>(cfg_.head_width)}));
}

PdtBatch PdtModel::make_batch(const std::vector<const PromptTokens*>& prompts,
                              const std::vector<std::vector<Transition>>& windows) const {
  if (prompts.size() != windows.size() || windows.empty()) {
    throw std::invalid_argument("make_batch: prompts/windows sizes differ or are empty");
  }
  const int B = static_cast<int>(windows.size());
  const int JH = cfg_.prompt_transitions();
  const int K = cfg_.context_K;
  const int L = JH + K;
  const int S = cfg_.state_dim;
  const int A = cfg_.action_dim;
  const int T = 3 * L;

  PdtBatch batch;
  batch.B = B;
  batch.L = L;
  batch.rtg = DenseArray::zeros({B, L, 1});
  batch.states = DenseArray::zeros({B, L, S});
  batch.actions = DenseArray::zeros({B, L, A});
  batch.action_target = DenseArray::zeros({B, L, A});
  batch.loss_mask = DenseArray::zeros({B, L});
  batch.attn_mask = DenseArray::zeros({B * cfg_.heads, T, T});

  std::vector<char> valid(static_cast<size_t>(B) * L, 0);

  for (int b = 0; b < B; ++b) {
    if (JH > 0) {
      const PromptTokens* p = prompts[b];
      if (p == nullptr || p->transitions != JH) {
        throw std::invalid_argument("make_batch: prompt missing or of wrong length");
      }
      for (int r = 0; r < JH; ++r) {
        batch.rtg[(static_cast<std::int64_t>(b) * L + r)] = p->rtg[r];
        for (int i = 0; i < S; ++i) {
          batch.states[(static_cast<std::int64_t>(b) * L + r) * S + i] = p->states[r * S + i];
        }
        for (int i = 0; i < A; ++i) {
          batch.actions[(static_cast<std::int64_t>(b) * L + r) * A + i] = p->actions[r * A + i];
        }
        valid[static_cast<size_t>(b) * L + r] = 1;
      }
    }
    const auto& w = windows[b];
    const int n = std::min<int>(K, static_cast<int>(w.size()));
    if (n == 0) throw std::invalid_argument("make_batch: empty window");
    const int pad = K - n;
    for (int i = 0; i < n; ++i) {
      const Transition& tr = w[w.size() - n + i];
      if (static_cast<int>(tr.state.size()) != S || static_cast<int>(tr.action.size()) != A) {
        throw std::invalid_argument("make_batch: transition dims do not match the config");
      }
      const int r = JH + pad + i;
      batch.rtg[(static_cast<std::int64_t>(b) * L + r)] = tr.return_to_go;
      for (int j = 0; j < S; ++j) {
        batch.states[(static_cast<std::int64_t>(b) * L + r) * S + j] = tr.state[j];
      }
      for (int j = 0; j < A; ++j) {
        batch.actions[(static_cast<std::int64_t>(b) * L + r) * A + j] = tr.action[j];
        batch.action_target[(static_cast<std::int64_t>(b) * L + r) * A + j] = tr.action[j];
      }
      batch.loss_mask[static_cast<std::int64_t>(b) * L + r] = 1.0;
      valid[static_cast<size_t>(b) * L + r] = 1;
    }
  }

  // Additive mask: position i sees j <= i when token j belongs to a real
  // transition. Padded rows stay finite via the max-subtraction in softmax.
  for (int b = 0; b < B; ++b) {
    for (int h = 0; h < cfg_.heads; ++h) {
      double* m = batch.attn_mask.data() +
                  (static_cast<std::int64_t>(b) * cfg_.heads + h) * T * T;
      for (int i = 0; i < T; ++i) {
        for (int j = 0; j < T; ++j) {
          const bool ok = j <= i && valid[static_cast<size_t>(b) * L + j / 3] != 0;
          m[static_cast<std::int64_t>(i) * T + j] = ok ? 0.0 : -1e9;
        }
      }
    }
  }
  return batch;
}

Graph::NodeId PdtModel::hidden_states(Graph& g, const PdtBatch& batch) {
  const int d = cfg_.embed_dim;
  const int T = 3 * batch.L;
  if (T > cfg_.max_tokens()) {
    throw std::invalid_argument("hidden_states: sequence longer than the configured maximum");
  }
  auto P = [&](const std::string& name) { return g.param(params_.at(name)); };

  Graph::NodeId er = g.add(g.matmul(g.input(batch.rtg), P("embed.rtg.w")), P("embed.rtg.b"));
  Graph::NodeId es = g.add(g.matmul(g.input(batch.states), P("embed.state.w")), P("embed.state.b"));
  Graph::NodeId ea = g.add(g.matmul(g.input(batch.actions), P("embed.action.w")), P("embed.action.b"));

  Graph::NodeId h = g.interleave3(er, es, ea);  // [B, 3L, d]
  h = g.add(h, g.slice_tokens(P("pos"), 0, T));

  Graph::NodeId mask = g.input(batch.attn_mask);
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(d / cfg_.heads));

  for (int b = 0; b < cfg_.blocks; ++b) {
    const std::string p = "blk" + std::to_string(b) + ".";
    Graph::NodeId x = g.layer_norm(h, P(p + "ln1.g"), P(p + "ln1.b"));
    Graph::NodeId q = g.split_heads(g.add(g.matmul(x, P(p + "attn.q.w")), P(p + "attn.q.b")), cfg_.heads);
    Graph::NodeId k = g.split_heads(g.add(g.matmul(x, P(p + "attn.k.w")), P(p + "attn.k.b")), cfg_.heads);
    Graph::NodeId v = g.split_heads(g.add(g.matmul(x, P(p + "attn.v.w")), P(p + "attn.v.b")), cfg_.heads);
    Graph::NodeId att = g.softmax(g.add(g.scale(g.bmatmul_nt(q, k), att_scale), mask));
    Graph::NodeId ctx = g.merge_heads(g.bmatmul(att, v), cfg_.heads);
    h = g.add(h, g.add(g.matmul(ctx, P(p + "attn.o.w")), P(p + "attn.o.b")));

    Graph::NodeId y = g.layer_norm(h, P(p + "ln2.g"), P(p + "ln2.b"));
    y = g.gelu(g.add(g.matmul(y, P(p + "mlp.fc.w")), P(p + "mlp.fc.b")));
    y = g.add(g.matmul(y, P(p + "mlp.proj.w")), P(p + "mlp.proj.b"));
    h = g.add(h, y);
  }
  return g.layer_norm(h, P("final_ln.g"), P("final_ln.b"));
}

Graph::NodeId PdtModel::head(Graph& g, Graph::NodeId hs) {
  auto P = [&](const std::string& name) { return g.param(params_.at(name)); };
  Graph::NodeId y = g.relu(g.add(g.matmul(hs, P("head.fc1.w")), P("head.fc1.b")));
  y = g.relu(g.add(g.matmul(y, P("head.fc2.w")), P("head.fc2.b")));
  return g.add(g.matmul(y, P("head.out.w")), P("head.out.b"));
}

Graph::NodeId PdtModel::action_predictions(Graph& g, const PdtBatch& batch) {
  Graph::NodeId h = hidden_states(g, batch);
  Graph::NodeId hs = g.stride3(h, 1);  // state-token positions
  return head(g, hs);
}

Graph::NodeId PdtModel::loss(Graph& g, const PdtBatch& batch) {
  Graph::NodeId pred = action_predictions(g, batch);
  const int A = cfg_.action_dim;
  Graph::NodeId move_pred = g.slice_last(pred, 0, A - 1);
  Graph::NodeId stop_logit = g.slice_last(pred, A - 1, A);
  Graph::NodeId target = g.input(batch.action_target);
  Graph::NodeId move_tgt = g.slice_last(target, 0, A - 1);
  Graph::NodeId stop_tgt = g.slice_last(target, A - 1, A);
  Graph::NodeId w = g.input(batch.loss_mask);
  Graph::NodeId l = g.scale(g.mse_loss(move_pred, move_tgt, w), cfg_.mse_weight);
  return g.add(l, g.scale(g.bce_with_logits_loss(stop_logit, stop_tgt, w), cfg_.bce_weight));
}

DenseArray PdtModel::predict(const PdtBatch& batch) {
  Graph g;
  return g.value(action_predictions(g, batch));
}

std::vector<double> PdtModel::encode_segment(const Segment& segment) {
  if (segment.length() != cfg_.prompt_H) {
    throw std::invalid_argument("encode_segment: segment length " +
                                std::to_string(segment.length()) + " != H=" +
                                std::to_string(cfg_.prompt_H));
  }
  const int H = cfg_.prompt_H;
  const int S = cfg_.state_dim;
  const int A = cfg_.action_dim;
  PdtBatch batch;
  batch.B = 1;
  batch.L = H;
  batch.rtg = DenseArray::zeros({1, H, 1});
  batch.states = DenseArray::zeros({1, H, S});
  batch.actions = DenseArray::zeros({1, H, A});
  for (int r = 0; r < H; ++r) {
    const Transition& tr = segment.transitions[r];
    batch.rtg[r] = tr.return_to_go;
    for (int i = 0; i < S; ++i) batch.states[r * S + i] = tr.state[i];
    for (int i = 0; i < A; ++i) batch.actions[r * A + i] = tr.action[i];
  }
  const int T = 3 * H;
  batch.attn_mask = DenseArray::zeros({cfg_.heads, T, T});
  for (int h = 0; h < cfg_.heads; ++h) {
    double* m = batch.attn_mask.data() + static_cast<std::int64_t>(h) * T * T;
    for (int i = 0; i < T; ++i) {
      for (int j = 0; j < T; ++j) m[static_cast<std::int64_t>(i) * T + j] = j <= i ? 0.0 : -1e9;
    }
  }

  Graph g;
  Graph::NodeId h = hidden_states(g, batch);
  const DenseArray& mean = g.value(g.mean_tokens(h));  // [1, d]
  return std::vector<double>(mean.data(), mean.data() + mean.size());
}

void PdtModel::save(const std::filesystem::path& path) const { save_checkpoint(params_, path); }

void PdtModel::load(const std::filesystem::path& path) { load_checkpoint(params_, path); }

StochasticPrompt sample_uniform_prompt(const std::vector<Segment>& pool, int J, Rng& rng) {
  if (J == 0) return StochasticPrompt{};
  if (pool.empty()) throw std::invalid_argument("sample_uniform_prompt: empty segment pool");
  std::vector<Segment> chosen;
  for (int j = 0; j < J; ++j) chosen.push_back(pool[rng.uniform_int(static_cast<int>(pool.size()))]);
  return assemble_prompt(std::move(chosen), J);
}

namespace {

std::vector<Transition> sample_window(const Trajectory& traj, int K, Rng& rng) {
  const int L = traj.length();
  const int end = rng.uniform_int(L);
  const int from = std::max(0, end - K + 1);
  return std::vector<Transition>(traj.transitions.begin() + from,
                                 traj.transitions.begin() + end + 1);
}

// One task's contribution to a training step: builds the graph, backpropagates
// scaled by 1/group so accumulated gradients form the group mean, returns the
// unscaled loss.
double task_step(PdtModel& model, const DemoSet& data, const std::vector<Segment>& pool,
                 int batch, int group, uint64_t seed) {
  Rng rng(seed);
  const PdtConfig& cfg = model.config();

  PromptTokens prompt;
  const bool use_prompt = cfg.prompt_transitions() > 0;
  if (use_prompt) {
    prompt = prompt_tokens(sample_uniform_prompt(pool, cfg.prompt_J, rng), cfg);
  }

  std::vector<const PromptTokens*> prompts;
  std::vector<std::vector<Transition>> windows;
  for (int i = 0; i < batch; ++i) {
    const Trajectory& traj = data.trajectories[rng.uniform_int(data.size())];
    windows.push_back(sample_window(traj, cfg.context_K, rng));
    prompts.push_back(use_prompt ? &prompt : nullptr);
  }

  PdtBatch b = model.make_batch(prompts, windows);
  Graph g;
  Graph::NodeId l = model.loss(g, b);
  g.backward(g.scale(l, 1.0 / group));
  return g.value(l)[0];
}

}  // namespace

TrainResult train_offline(PdtModel& model, const std::vector<DemoSet>& data,
                          const std::vector<DemoSet>& prompts, const TrainConfig& tc,
                          std::ostream* loss_csv) {
  if (data.empty()) throw std::invalid_argument("train_offline: no training tasks");
  if (data.size() != prompts.size()) {
    throw std::invalid_argument("train_offline: data/prompt task lists differ in size");
  }
  const PdtConfig& cfg = model.config();
  const int n_tasks = static_cast<int>(data.size());

  std::vector<std::vector<Segment>> pools(n_tasks);
  for (int i = 0; i < n_tasks; ++i) {
    if (data[i].size() == 0) {
      throw std::invalid_argument("train_offline: empty dataset for task " +
                                  std::to_string(data[i].task_id));
    }
    if (cfg.prompt_transitions() > 0) {
      pools[i] = extract_segments(prompts[i].trajectories, cfg.prompt_H);
      if (pools[i].empty()) {
        throw std::invalid_argument("train_offline: no length-H segments for task " +
                                    std::to_string(prompts[i].task_id));
      }
    }
  }

  Adam opt(model.params(), {tc.lr, 0.9, 0.999, 1e-8, tc.weight_decay});
  const int group = std::min(tc.tasks_per_step, n_tasks);

  TrainResult result;
  for (int step = 0; step < tc.steps; ++step) {
    model.params().zero_grad();
    double sum = 0.0;
    for (int j = 0; j < group; ++j) {
      const int ti = (static_cast<std::int64_t>(step) * group + j) % n_tasks;
      const double l = task_step(model, data[ti], pools[ti], tc.batch_per_task, group,
                                 derive_seed(tc.seed, {0x11, static_cast<uint64_t>(step),
                                                       static_cast<uint64_t>(ti)}));
      sum += l;
      if (loss_csv) {
        (*loss_csv) << step << "," << data[ti].task_id << "," << l << "\n";
      }
    }
    opt.step();
    result.loss_curve.push_back(sum / group);
  }
  return result;
}

std::vector<double> PointRolloutEnv::reset() {
  const EnvState& s = env_.reset();
  return {s.position[0], s.position[1]};
}

std::tuple<std::vector<double>, double, bool> PointRolloutEnv::step(
    const std::vector<double>& action) {
  EnvAction a;
  a.move = {action[0], action[1]};
  a.stop = action[2] > 0.5;
  StepResult r = env_.step(a);
  return {{r.state.position[0], r.state.position[1]}, r.reward, r.done};
}

RolloutResult rollout(PdtModel& model, const PromptTokens& prompt, RolloutEnv& env,
                      double target_return) {
  const PdtConfig& cfg = model.config();
  const int K = cfg.context_K;

  std::vector<double> state = env.reset();
  std::vector<Transition> past;
  std::vector<double> rewards;
  double rtg = target_return;
  double G = 0.0;
  int t = 0;
  bool done = false;

  Trajectory traj;
  while (!done) {
    Transition current;
    current.return_to_go = rtg;
    current.state = state;
    current.action.assign(cfg.action_dim, 0.0);
    current.timestep = t;

    std::vector<Transition> window;
    const int tail = std::min<int>(K - 1, static_cast<int>(past.size()));
    window.assign(past.end() - tail, past.end());
    window.push_back(current);

    PdtBatch batch = model.make_batch({&prompt}, {window});
    DenseArray pred = model.predict(batch);  // [1, L, A]
    const std::int64_t last = static_cast<std::int64_t>(batch.L - 1) * cfg.action_dim;
    const double mx = pred[last + 0];
    const double my = pred[last + 1];
    const double stop_sig = 1.0 / (1.0 + std::exp(-pred[last + 2]));
    const bool stop = stop_sig > 0.5;

    auto [next_state, reward, env_done] = env.step({mx, my, stop ? 1.0 : 0.0});

    current.action = {mx, my, stop ? 1.0 : 0.0};
    current.reward = reward;
    past.push_back(current);
    rewards.push_back(reward);

    G += reward;
    rtg -= reward;
    state = next_state;
    done = env_done;
    ++t;
  }

  std::vector<double> honest = compute_returns_to_go(rewards);
  traj.transitions = std::move(past);
  for (size_t i = 0; i < honest.size(); ++i) traj.transitions[i].return_to_go = honest[i];
  traj.total_return = G;
  RolloutResult result;
  result.total_return = G;
  result.trajectory = std::move(traj);
  return result;
}

FinetuneResult finetune(PdtModel& model, const DemoSet& data, const DemoSet& prompts, int epochs,
                        const TrainConfig& tc, const EnvConfig* probe_env,
                        const TaskSpec* probe_task, int probe_every) {
  FinetuneResult result;
  if (epochs == 0) return result;
  if (data.size() == 0) throw std::invalid_argument("finetune: empty dataset");

  const PdtConfig& cfg = model.config();
  std::vector<Segment> pool;
  if (cfg.prompt_transitions() > 0) {
    pool = extract_segments(prompts.trajectories, cfg.prompt_H);
    if (pool.empty()) throw std::invalid_argument("finetune: no length-H prompt segments");
  }

  Adam opt(model.params(), {tc.lr, 0.9, 0.999, 1e-8, tc.weight_decay});
  const int steps_per_epoch = std::max(1, data.size() / tc.batch_per_task);

  for (int epoch = 0; epoch < epochs; ++epoch) {
    double sum = 0.0;
    for (int s = 0; s < steps_per_epoch; ++s) {
      model.params().zero_grad();
      sum += task_step(model, data, pool, tc.batch_per_task, 1,
                       derive_seed(tc.seed, {0x22, static_cast<uint64_t>(epoch),
                                             static_cast<uint64_t>(s)}));
      opt.step();
    }
    result.epoch_loss.push_back(sum / steps_per_epoch);

    if (probe_every > 0 && probe_env && probe_task && (epoch + 1) % probe_every == 0) {
      Rng rng(derive_seed(tc.seed, {0x23, static_cast<uint64_t>(epoch)}));
      double mean = 0.0;
      const int trials = 5;
      for (int i = 0; i < trials; ++i) {
        PromptTokens p = prompt_tokens(sample_uniform_prompt(pool, cfg.prompt_J, rng), cfg);
        PointRolloutEnv env(*probe_env, *probe_task);
        mean += rollout(model, p, env, cfg.target_return).total_return;
      }
      result.online_probe.emplace_back(epoch, mean / trials);
    }
  }
  return result;
}

}  // namespace pdtb
