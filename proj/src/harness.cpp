#include "pdtb/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "pdtb/svg.hpp"

namespace pdtb {

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

double mean_of(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return xs.empty() ? 0.0 : s / xs.size();
}

// Sample standard deviation, the way result tables usually quote spread.
double std_of(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  const double m = mean_of(xs);
  double s = 0.0;
  for (double x : xs) s += (x - m) * (x - m);
  return std::sqrt(s / (xs.size() - 1));
}

void ensure_dir(const std::filesystem::path& p) { std::filesystem::create_directories(p); }

}  // namespace

TuneMethod tune_method_from_name(const std::string& name) {
  if (name == "none") return TuneMethod::none;
  if (name == "eps_greedy") return TuneMethod::eps_greedy;
  if (name == "ucb") return TuneMethod::ucb;
  if (name == "perturb") return TuneMethod::perturb;
  throw ConfigError("unknown tune method: " + name);
}

std::string tune_method_name(TuneMethod m) {
  switch (m) {
    case TuneMethod::none: return "none";
    case TuneMethod::eps_greedy: return "eps_greedy";
    case TuneMethod::ucb: return "ucb";
    case TuneMethod::perturb: return "perturb";
  }
  return "none";
}

std::vector<TaskSpec> select_tasks(const std::string& spec) {
  const auto all = enumerate_tasks();
  auto by_ids = [&](const std::vector<int>& ids) {
    std::vector<TaskSpec> out;
    for (int id : ids) {
      if (id < 0 || id >= static_cast<int>(all.size())) {
        throw ConfigError("task id out of range: " + std::to_string(id));
      }
      out.push_back(all[id]);
    }
    return out;
  };

  if (spec == "ring8") return by_ids({41, 43, 45, 47, 49, 51, 53, 55});
  if (spec == "ring3") return by_ids({41, 47, 53});
  if (spec == "ring16") {
    std::vector<int> ids;
    for (int k = 0; k <= 15; ++k) ids.push_back(40 + k);
    return by_ids(ids);
  }
  if (spec == "train48") return training_tasks();
  if (spec == "test12") return test_tasks();
  if (spec == "all60") return all;
  if (spec.rfind("ids:", 0) == 0) {
    std::vector<int> ids;
    std::stringstream ss(spec.substr(4));
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      try {
        ids.push_back(std::stoi(tok));
      } catch (...) {
        throw ConfigError("bad task id list: " + spec);
      }
    }
    if (ids.empty()) throw ConfigError("empty task id list: " + spec);
    return by_ids(ids);
  }
  throw ConfigError("unknown task selection: " + spec);
}

EnvConfig RunContext::env_config() const {
  EnvConfig e;
  e.a_max = config.get_double("env.a_max", 0.5);
  e.horizon = config.get_int("env.horizon", 20);
  e.stop_radius = config.get_double("env.stop_radius", 0.2);
  e.bonus = config.get_double("env.bonus", 10.0);
  e.bonus_decay = config.get_double("env.bonus_decay", 0.95);
  return e;
}

PdtConfig RunContext::pdt_config() const {
  PdtConfig c;
  c.blocks = config.get_int("model.blocks", 3);
  c.heads = config.get_int("model.heads", 1);
  c.embed_dim = config.get_int("model.embed_dim", 128);
  c.context_K = config.get_int("model.context_K", 5);
  c.prompt_J = config.get_int("model.J", 1);
  c.prompt_H = config.get_int("model.H", 3);
  c.target_return = config.get_double("model.target_return", 10.0);
  c.head_width = config.get_int("model.head_width", 128);
  c.mse_weight = config.get_double("model.mse_weight", 1.0);
  c.bce_weight = config.get_double("model.bce_weight", 1.0);
  c.validate();
  return c;
}

TrainConfig RunContext::train_config() const {
  TrainConfig t;
  t.steps = config.get_int("train.steps", 5000);
  t.batch_per_task = config.get_int("train.batch_per_task", 8);
  t.tasks_per_step = config.get_int("train.tasks_per_step", 8);
  t.lr = config.get_double("train.lr", 1e-4);
  t.weight_decay = config.get_double("train.weight_decay", 1e-4);
  t.seed = derive_seed(seed, {0x7127});
  return t;
}

BanditConfig RunContext::bandit_config() const {
  BanditConfig b;
  b.hidden = config.get_int("tune.hidden", 16);
  b.hidden_layers = config.get_int("tune.hidden_layers", 2);
  b.lr = config.get_double("tune.lr", 1e-3);
  b.gd_steps = config.get_int("tune.gd_steps", 50);
  const std::string sched = config.get_str("tune.eps_schedule", "anneal");
  if (sched == "anneal") {
    b.schedule.kind = EpsSchedule::Kind::anneal;
  } else if (sched == "constant") {
    b.schedule.kind = EpsSchedule::Kind::constant;
  } else {
    throw ConfigError("tune.eps_schedule must be anneal or constant");
  }
  b.schedule.eps = config.get_double("tune.eps", 0.1);
  b.schedule.anneal_rounds = config.get_int("tune.anneal_rounds", 30);
  b.ucb_c = config.get_double("tune.ucb_c", 3.0);
  return b;
}

PerturbConfig RunContext::perturb_config() const {
  PerturbConfig p;
  p.sigma_hi = config.get_double("perturb.sigma_hi", 1.1);
  p.sigma_lo = config.get_double("perturb.sigma_lo", 0.1);
  return p;
}

std::vector<TaskSpec> RunContext::tasks(const std::string& key, const std::string& fallback) const {
  return select_tasks(config.get_str(key, fallback));
}

std::filesystem::path RunContext::d_file(int task_id) const {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "D_%02d.jsonl", task_id);
  return data_dir() / buf;
}

std::filesystem::path RunContext::p_file(int task_id) const {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "P_%02d.jsonl", task_id);
  return data_dir() / buf;
}

std::filesystem::path RunContext::ckpt_file(int J, int H) const {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "pdt_J%dxH%d_d%d_s%llu.ckpt", J, H,
                config.get_int("model.embed_dim", 128), static_cast<unsigned long long>(seed));
  return ckpt_dir() / buf;
}

void RunContext::write_meta(std::ostream& os) const {
  os << "# version=" << kVersion << "\n";
  os << "# config_hash=" << config.hash_hex() << "\n";
  os << "# seed=" << seed << "\n";
}

RunContext make_context(const std::string& config_file, const std::string& profile,
                        const std::vector<std::string>& overrides, const std::string& out,
                        uint64_t seed, int jobs) {
  RunContext ctx;
  ctx.seed = seed;
  ctx.jobs = std::max(1, jobs);
  ctx.out = out;

  Config& c = ctx.config;
  c.set("profile", profile);
  if (profile == "desk") {
    c.set("tasks", "ring8");
    c.set("eval_tasks", "ring8");
    c.set("model.embed_dim", "128");
    c.set("model.blocks", "3");
    c.set("train.steps", "5000");
    c.set("data.episodes", "200");
    c.set("tune.rounds", "250");
    c.set("tune.window", "50");
    c.set("tune.seeds", "3");
  } else if (profile == "ci") {
    c.set("tasks", "ring3");
    c.set("eval_tasks", "ring3");
    c.set("model.embed_dim", "64");
    c.set("model.blocks", "2");
    c.set("model.head_width", "64");
    c.set("train.steps", "1000");
    c.set("data.episodes", "80");
    c.set("tune.rounds", "80");
    c.set("tune.window", "25");
    c.set("tune.seeds", "2");
  } else {
    throw ConfigError("unknown profile: " + profile);
  }

  if (!config_file.empty()) ctx.config.merge_file(config_file);

  for (const std::string& ov : overrides) {
    const auto eq = ov.find('=');
    if (eq == std::string::npos) throw ConfigError("override is not key=value: " + ov);
    c.set(ov.substr(0, eq), ov.substr(eq + 1));
  }
  return ctx;
}

DemoSet load_d(const RunContext& ctx, int task_id) {
  const auto path = ctx.d_file(task_id);
  if (!std::filesystem::exists(path)) {
    throw MissingInputError("missing dataset " + path.string() + " (run gen-data first)");
  }
  const EnvConfig env = ctx.env_config();
  return load_demoset(path, &env);
}

DemoSet load_p(const RunContext& ctx, int task_id) {
  const auto path = ctx.p_file(task_id);
  if (!std::filesystem::exists(path)) {
    throw MissingInputError("missing demonstrations " + path.string() + " (run gen-data first)");
  }
  const EnvConfig env = ctx.env_config();
  return load_demoset(path, &env);
}

double final_window_mean(const TuneHistory& history, int window) {
  if (history.empty()) return 0.0;
  const int n = static_cast<int>(history.size());
  const int w = std::min(window, n);
  double s = 0.0;
  for (int i = n - w; i < n; ++i) s += history[i].G;
  return s / w;
}

TuneCellResult run_tune_cell(PdtModel& model, const EnvConfig& env_cfg, const TaskSpec& task,
                             const DemoSet& prompts, const TuneParams& params, uint64_t seed) {
  const PdtConfig& cfg = model.config();
  TuneCellResult out;

  auto evaluate_tokens = [&](const PromptTokens& tokens) {
    PointRolloutEnv env(env_cfg, task);
    return rollout(model, tokens, env, params.target_return).total_return;
  };

  if (params.method == TuneMethod::none) {
    // Vanilla evaluation: a fresh uniformly random prompt every rollout.
    std::vector<Segment> pool;
    if (cfg.prompt_transitions() > 0) {
      pool = extract_segments(prompts.trajectories, cfg.prompt_H);
      if (pool.empty()) {
        throw std::invalid_argument("run_tune_cell: no length-H segments for task " +
                                    std::to_string(task.id));
      }
    }
    Rng rng(derive_seed(seed, {0x40}));
    for (int k = 0; k < params.rounds; ++k) {
      StochasticPrompt p = sample_uniform_prompt(pool, cfg.prompt_J, rng);
      TuneRecord rec;
      rec.round = k;
      for (const Segment& s : p.segments) {
        rec.provenance.emplace_back(s.source_trajectory, s.source_offset);
        rec.chosen.push_back(-1);
      }
      rec.G = evaluate_tokens(prompt_tokens(p, cfg));
      rec.explore = 1.0;
      out.history.push_back(std::move(rec));
    }
  } else if (params.method == TuneMethod::perturb) {
    SegmentFeatures features = featurize(prompts, cfg.prompt_H, FeatureMode::raw);
    out.history = hill_climb(
        features, cfg.prompt_J, params.rounds, params.perturb, cfg,
        derive_seed(seed, {0x41}),
        [&](const PromptTokens& tokens, int) { return evaluate_tokens(tokens); });
  } else {
    SegmentFeatures features =
        featurize(prompts, cfg.prompt_H, params.feature_mode,
                  params.feature_mode == FeatureMode::transformer ? &model : nullptr);
    const TunePolicy policy =
        params.method == TuneMethod::eps_greedy ? TunePolicy::eps_greedy : TunePolicy::ucb;
    out.history = tuning_loop(
        features, cfg.prompt_J, params.rounds, policy, params.bandit, derive_seed(seed, {0x42}),
        [&](const StochasticPrompt& p, int) { return evaluate_tokens(prompt_tokens(p, cfg)); });
  }

  out.window_mean = final_window_mean(out.history, params.window);
  return out;
}

void write_history_csv(const std::filesystem::path& path, const RunContext& ctx,
                       const TaskSpec& task, const std::string& method, uint64_t cell_seed,
                       int J, int H, const TuneHistory& history) {
  ensure_dir(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp);
    if (!os) throw std::runtime_error("write_history_csv: cannot open " + tmp.string());
    os << "# pdtb_history_v1\n";
    ctx.write_meta(os);
    os << "# cell_seed=" << cell_seed << "\n";
    os << "# method=" << method << "\n";
    os << "# task_id=" << task.id << "\n";
    os << "# goal_x=" << fmt(task.goal[0]) << "\n";
    os << "# goal_y=" << fmt(task.goal[1]) << "\n";
    os << "# J=" << J << "\n";
    os << "# H=" << H << "\n";
    os << "round";
    for (int j = 0; j < J; ++j) os << ",slot_" << j << "_traj,slot_" << j << "_offset";
    os << ",G,explore\n";
    for (const TuneRecord& r : history) {
      os << r.round;
      for (int j = 0; j < J; ++j) {
        if (j < static_cast<int>(r.provenance.size())) {
          os << "," << r.provenance[j].first << "," << r.provenance[j].second;
        } else {
          os << ",-1,-1";
        }
      }
      os << "," << fmt(r.G) << "," << fmt(r.explore) << "\n";
    }
  }
  std::filesystem::rename(tmp, path);
}

HistoryFile read_history_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingInputError("cannot open history " + path.string());
  HistoryFile out;
  std::string line;
  int lineno = 0;
  bool saw_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto eq = line.find('=');
      if (eq != std::string::npos) {
        const std::string key = line.substr(2, eq - 2);
        const std::string value = line.substr(eq + 1);
        if (key == "task_id") out.task_id = std::stoi(value);
        if (key == "J") out.J = std::stoi(value);
        if (key == "H") out.H = std::stoi(value);
        if (key == "method") out.method = value;
      }
      continue;
    }
    if (!saw_header) {
      saw_header = true;  // column names
      continue;
    }
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) cells.push_back(tok);
    const size_t expect = 1 + 2 * static_cast<size_t>(out.J) + 2;
    if (cells.size() != expect) {
      throw std::runtime_error("history parse error at line " + std::to_string(lineno) + " of " +
                               path.string());
    }
    try {
      TuneRecord r;
      r.round = std::stoi(cells[0]);
      for (int j = 0; j < out.J; ++j) {
        r.provenance.emplace_back(std::stoi(cells[1 + 2 * j]), std::stoi(cells[2 + 2 * j]));
        r.chosen.push_back(-1);
      }
      r.G = std::stod(cells[1 + 2 * out.J]);
      r.explore = std::stod(cells[2 + 2 * out.J]);
      out.history.push_back(std::move(r));
    } catch (const std::exception&) {
      throw std::runtime_error("history parse error at line " + std::to_string(lineno) + " of " +
                               path.string());
    }
  }
  return out;
}

int cmd_gen_data(RunContext& ctx, bool force) {
  const EnvConfig env = ctx.env_config();
  ensure_dir(ctx.data_dir());
  const int episodes = ctx.config.get_int("data.episodes", 200);
  const int prompt_n = ctx.config.get_int("data.prompt_n", 10);
  const double noise = ctx.config.get_double("data.prompt_noise", 0.05);

  const auto tasks = enumerate_tasks();
  if (!force) {
    for (const TaskSpec& t : tasks) {
      if (std::filesystem::exists(ctx.d_file(t.id)) || std::filesystem::exists(ctx.p_file(t.id))) {
        std::cerr << "gen-data: refusing to overwrite " << ctx.data_dir()
                  << " (use --force)\n";
        return 1;
      }
    }
  }
  for (const TaskSpec& t : tasks) {
    DemoSet d = build_training_dataset(env, t, episodes,
                                       derive_seed(ctx.seed, {0xDA, static_cast<uint64_t>(t.id)}));
    save_demoset(d, ctx.d_file(t.id), env);
    DemoSet p = build_prompt_dataset(env, t, prompt_n,
                                     derive_seed(ctx.seed, {0xDB, static_cast<uint64_t>(t.id)}),
                                     noise);
    save_demoset(p, ctx.p_file(t.id), env);
  }
  std::cout << "gen-data: wrote " << tasks.size() << " D files and " << tasks.size()
            << " P files to " << ctx.data_dir() << "\n";
  return 0;
}

int cmd_train(RunContext& ctx, bool dt_baseline) {
  const auto tasks = ctx.tasks("tasks", "ring8");

  std::vector<int> missing;
  for (const TaskSpec& t : tasks) {
    if (!std::filesystem::exists(ctx.d_file(t.id)) || !std::filesystem::exists(ctx.p_file(t.id))) {
      missing.push_back(t.id);
    }
  }
  if (!missing.empty()) {
    std::string list;
    for (int id : missing) list += (list.empty() ? "" : ",") + std::to_string(id);
    throw MissingInputError("cmd_train: missing data for tasks " + list);
  }

  std::vector<DemoSet> data, prompts;
  for (const TaskSpec& t : tasks) {
    data.push_back(load_d(ctx, t.id));
    prompts.push_back(load_p(ctx, t.id));
  }

  ensure_dir(ctx.ckpt_dir());
  ensure_dir(ctx.log_dir());

  auto train_one = [&](PdtConfig cfg, const std::string& tag) {
    PdtModel model(cfg, derive_seed(ctx.seed, {0x1A17}));
    TrainConfig tc = ctx.train_config();
    char lossname[96];
    std::snprintf(lossname, sizeof(lossname), "train_loss_%s_s%llu.csv", tag.c_str(),
                  static_cast<unsigned long long>(ctx.seed));
    std::ofstream loss_csv(ctx.log_dir() / lossname);
    ctx.write_meta(loss_csv);
    loss_csv << "step,task_id,loss\n";
    TrainResult r = train_offline(model, data, prompts, tc, &loss_csv);
    const auto path = ctx.ckpt_file(cfg.prompt_J, cfg.prompt_H);
    model.save(path);
    std::cout << "train: " << tag << " final loss " << fmt(r.loss_curve.back()) << " -> " << path
              << "\n";
  };

  PdtConfig cfg = ctx.pdt_config();
  char tag[32];
  std::snprintf(tag, sizeof(tag), "J%dxH%d", cfg.prompt_J, cfg.prompt_H);
  train_one(cfg, tag);

  if (dt_baseline) {
    PdtConfig dt = cfg;
    dt.prompt_J = 0;
    dt.prompt_H = 0;
    train_one(dt, "J0xH0");
  }
  return 0;
}

namespace {

struct Cell {
  TaskSpec task;
  int seed_index = 0;
  uint64_t cell_seed = 0;
  double window_mean = 0.0;
  TuneHistory history;
};

// (task, seed) cells are independent; run them on a small worker pool with
// GEMM threading folded down to keep the cores busy exactly once.
void run_cells(std::vector<Cell>& cells, int jobs,
               const std::function<void(Cell&)>& run_one) {
  if (jobs <= 1) {
    for (Cell& c : cells) run_one(c);
    return;
  }
  const int saved = compute_threads();
  set_compute_threads(1);
  std::mutex mu;
  size_t next = 0;
  std::vector<std::thread> workers;
  for (int w = 0; w < jobs; ++w) {
    workers.emplace_back([&] {
      while (true) {
        size_t i;
        {
          std::lock_guard<std::mutex> lk(mu);
          if (next >= cells.size()) return;
          i = next++;
        }
        run_one(cells[i]);
      }
    });
  }
  for (auto& t : workers) t.join();
  set_compute_threads(saved);
}

}  // namespace

int cmd_tune(RunContext& ctx, const std::string& method_name) {
  const TuneMethod method = tune_method_from_name(method_name);
  const PdtConfig cfg = ctx.pdt_config();
  const EnvConfig env = ctx.env_config();

  const auto ckpt = ctx.ckpt_file(cfg.prompt_J, cfg.prompt_H);
  if (!std::filesystem::exists(ckpt)) {
    throw MissingInputError("cmd_tune: missing checkpoint " + ckpt.string() +
                            " (run train first)");
  }
  PdtModel model(cfg, derive_seed(ctx.seed, {0x1A17}));
  model.load(ckpt);

  TuneParams params;
  params.method = method;
  params.rounds = ctx.config.get_int("tune.rounds", 250);
  params.window = ctx.config.get_int("tune.window", 50);
  params.feature_mode = ctx.config.get_str("tune.feature_mode", "raw") == "transformer"
                            ? FeatureMode::transformer
                            : FeatureMode::raw;
  params.bandit = ctx.bandit_config();
  params.perturb = ctx.perturb_config();
  params.target_return = cfg.target_return;

  const auto tasks = ctx.tasks("eval_tasks", ctx.config.get_str("tasks", "ring8"));
  const int n_seeds = ctx.config.get_int("tune.seeds", 3);

  std::vector<Cell> cells;
  for (const TaskSpec& t : tasks) {
    for (int si = 0; si < n_seeds; ++si) {
      Cell c;
      c.task = t;
      c.seed_index = si;
      c.cell_seed = derive_seed(ctx.seed, {0xCE11, static_cast<uint64_t>(t.id),
                                           static_cast<uint64_t>(si)});
      cells.push_back(std::move(c));
    }
  }

  std::vector<DemoSet> prompt_sets;
  for (const TaskSpec& t : tasks) prompt_sets.push_back(load_p(ctx, t.id));
  auto prompts_for = [&](int task_id) -> const DemoSet& {
    for (size_t i = 0; i < tasks.size(); ++i) {
      if (tasks[i].id == task_id) return prompt_sets[i];
    }
    throw std::logic_error("prompts_for: unknown task");
  };

  run_cells(cells, ctx.jobs, [&](Cell& c) {
    TuneCellResult r = run_tune_cell(model, env, c.task, prompts_for(c.task.id), params,
                                     c.cell_seed);
    c.window_mean = r.window_mean;
    c.history = std::move(r.history);
  });

  const std::string feat =
      params.feature_mode == FeatureMode::transformer ? "psi" : "raw";
  ensure_dir(ctx.log_dir());
  ensure_dir(ctx.results_dir());
  for (const Cell& c : cells) {
    char name[128];
    std::snprintf(name, sizeof(name), "tune_%s_%s_J%d_task%02d_s%d.csv", method_name.c_str(),
                  feat.c_str(), cfg.prompt_J, c.task.id, c.seed_index);
    write_history_csv(ctx.log_dir() / name, ctx, c.task, method_name, c.cell_seed, cfg.prompt_J,
                      cfg.prompt_H, c.history);
  }

  // Per-cell table plus the aggregate row the summary tables are built from.
  char resname[128];
  std::snprintf(resname, sizeof(resname), "tune_%s_%s_J%d.csv", method_name.c_str(), feat.c_str(),
                cfg.prompt_J);
  const auto respath = ctx.results_dir() / resname;
  const std::filesystem::path tmp = respath.string() + ".tmp";
  {
    std::ofstream os(tmp);
    os << "# pdtb_results_v1\n";
    ctx.write_meta(os);
    os << "method,feature_mode,J,H,task_id,seed_index,window_mean\n";
    std::vector<double> all;
    std::vector<double> per_seed(n_seeds, 0.0);
    for (const Cell& c : cells) {
      os << method_name << "," << feat << "," << cfg.prompt_J << "," << cfg.prompt_H << ","
         << c.task.id << "," << c.seed_index << "," << fmt(c.window_mean) << "\n";
      all.push_back(c.window_mean);
      per_seed[c.seed_index] += c.window_mean / static_cast<double>(tasks.size());
    }
    os << "# aggregate mean=" << fmt(mean_of(all)) << " std_seeds=" << fmt(std_of(per_seed))
       << " std_cells=" << fmt(std_of(all)) << "\n";
    std::cout << "tune " << method_name << " (" << feat << ", J=" << cfg.prompt_J
              << "): mean=" << fmt(mean_of(all)) << " +/- " << fmt(std_of(per_seed))
              << " over " << tasks.size() << " tasks x " << n_seeds << " seeds\n";
  }
  std::filesystem::rename(tmp, respath);
  return 0;
}

int cmd_mixture(RunContext& ctx) {
  const PdtConfig cfg = ctx.pdt_config();
  const EnvConfig env = ctx.env_config();
  const auto ckpt = ctx.ckpt_file(cfg.prompt_J, cfg.prompt_H);
  if (!std::filesystem::exists(ckpt)) {
    throw MissingInputError("cmd_mixture: missing checkpoint " + ckpt.string());
  }
  PdtModel model(cfg, derive_seed(ctx.seed, {0x1A17}));
  model.load(ckpt);

  const int task_id = ctx.config.get_int("mixture.task", 49);
  const auto all = enumerate_tasks();
  if (task_id < 0 || task_id >= static_cast<int>(all.size())) {
    throw ConfigError("mixture.task out of range");
  }
  const TaskSpec task = all[task_id];

  DemoSet expert = load_p(ctx, task_id);
  DemoSet novice;
  novice.task_id = task_id;
  novice.quality = Quality::novice;
  novice.expert_fraction = 0.0;
  {
    auto pool = scripted_novice(env, task, derive_seed(ctx.seed, {0x0B}), 400);
    if (static_cast<int>(pool.size()) < expert.size()) {
      throw std::runtime_error("cmd_mixture: novice pool too small");
    }
    novice.trajectories.assign(pool.begin(), pool.begin() + expert.size());
  }

  TuneParams base;
  base.rounds = ctx.config.get_int("tune.rounds", 250);
  base.window = ctx.config.get_int("tune.window", 50);
  base.feature_mode = FeatureMode::raw;
  base.bandit = ctx.bandit_config();
  base.perturb = ctx.perturb_config();
  base.target_return = cfg.target_return;
  const int n_seeds = ctx.config.get_int("mixture.seeds", 3);

  struct MixCell {
    int j;
    TuneMethod method;
    int seed_index;
    double mean = 0.0;
  };
  std::vector<MixCell> cells;
  const TuneMethod methods[3] = {TuneMethod::none, TuneMethod::eps_greedy, TuneMethod::ucb};
  for (int j = 0; j <= 100; j += 10) {
    for (TuneMethod m : methods) {
      for (int si = 0; si < n_seeds; ++si) cells.push_back({j, m, si, 0.0});
    }
  }

  std::mutex mu;
  size_t next = 0;
  auto worker = [&]() {
    while (true) {
      size_t i;
      {
        std::lock_guard<std::mutex> lk(mu);
        if (next >= cells.size()) return;
        i = next++;
      }
      MixCell& c = cells[i];
      DemoSet mixed = mix_datasets(expert, novice, c.j);
      TuneParams params = base;
      params.method = c.method;
      const uint64_t cell_seed = derive_seed(
          ctx.seed, {0x317, static_cast<uint64_t>(c.j),
                     static_cast<uint64_t>(static_cast<int>(c.method)),
                     static_cast<uint64_t>(c.seed_index)});
      c.mean = run_tune_cell(model, env, task, mixed, params, cell_seed).window_mean;
    }
  };
  if (ctx.jobs > 1) {
    const int saved = compute_threads();
    set_compute_threads(1);
    std::vector<std::thread> ws;
    for (int w = 0; w < ctx.jobs; ++w) ws.emplace_back(worker);
    for (auto& t : ws) t.join();
    set_compute_threads(saved);
  } else {
    worker();
  }

  ensure_dir(ctx.results_dir());
  const auto respath = ctx.results_dir() / "mixture_results.csv";
  const std::filesystem::path tmp = respath.string() + ".tmp";
  {
    std::ofstream os(tmp);
    os << "# pdtb_mixture_v1\n";
    ctx.write_meta(os);
    os << "# task_id=" << task_id << "\n";
    os << "j_percent,no_tuning_mean,no_tuning_std,eps_greedy_mean,eps_greedy_std,"
          "ucb_mean,ucb_std\n";
    for (int j = 0; j <= 100; j += 10) {
      os << j;
      for (TuneMethod m : methods) {
        std::vector<double> vals;
        for (const MixCell& c : cells) {
          if (c.j == j && c.method == m) vals.push_back(c.mean);
        }
        os << "," << fmt(mean_of(vals)) << "," << fmt(std_of(vals));
      }
      os << "\n";
    }
  }
  std::filesystem::rename(tmp, respath);
  std::cout << "mixture: wrote " << respath << "\n";
  return 0;
}

int cmd_ood(RunContext& ctx, bool skip_finetune) {
  const PdtConfig cfg = ctx.pdt_config();
  const EnvConfig env = ctx.env_config();
  const auto ckpt = ctx.ckpt_file(cfg.prompt_J, cfg.prompt_H);
  if (!std::filesystem::exists(ckpt)) {
    throw MissingInputError("cmd_ood: missing checkpoint " + ckpt.string());
  }
  PdtModel pretrained(cfg, derive_seed(ctx.seed, {0x1A17}));
  pretrained.load(ckpt);

  const auto tasks = test_tasks();
  const int n_seeds = ctx.config.get_int("ood.seeds", 3);
  const int ft_epochs = ctx.config.get_int("ood.finetune_epochs", 250);

  TuneParams none_params, eps_params;
  none_params.method = TuneMethod::none;
  eps_params.method = TuneMethod::eps_greedy;
  for (TuneParams* p : {&none_params, &eps_params}) {
    p->rounds = ctx.config.get_int("tune.rounds", 250);
    p->window = ctx.config.get_int("tune.window", 50);
    p->feature_mode = FeatureMode::raw;
    p->bandit = ctx.bandit_config();
    p->target_return = cfg.target_return;
  }

  struct Row {
    std::string method, params;
    std::vector<double> per_seed;
  };
  std::vector<Row> rows = {{"none", "pretrained", {}}, {"eps_greedy", "pretrained", {}}};
  if (!skip_finetune) {
    rows.push_back({"none", "finetuned", {}});
    rows.push_back({"eps_greedy", "finetuned", {}});
  }

  // Fine-tuned weights are per task, derived once from the pretrained model.
  std::vector<std::unique_ptr<PdtModel>> finetuned;
  if (!skip_finetune) {
    for (const TaskSpec& t : tasks) {
      auto m = std::make_unique<PdtModel>(cfg, derive_seed(ctx.seed, {0x1A17}));
      m->params().copy_values_from(pretrained.params());
      TrainConfig tc = ctx.train_config();
      tc.seed = derive_seed(ctx.seed, {0xF7, static_cast<uint64_t>(t.id)});
      finetune(*m, load_d(ctx, t.id), load_p(ctx, t.id), ft_epochs, tc);
      finetuned.push_back(std::move(m));
      std::cout << "ood: finetuned task " << t.id << "\n";
    }
  }

  for (int si = 0; si < n_seeds; ++si) {
    for (size_t ti = 0; ti < tasks.size(); ++ti) {
      const TaskSpec& t = tasks[ti];
      DemoSet prompts = load_p(ctx, t.id);
      const uint64_t cell_seed =
          derive_seed(ctx.seed, {0x00D, static_cast<uint64_t>(t.id), static_cast<uint64_t>(si)});
      for (Row& row : rows) {
        PdtModel& m = row.params == "pretrained" ? pretrained : *finetuned[ti];
        const TuneParams& p = row.method == "none" ? none_params : eps_params;
        const double g = run_tune_cell(m, env, t, prompts, p, cell_seed).window_mean;
        if (static_cast<int>(row.per_seed.size()) <= si) row.per_seed.resize(si + 1, 0.0);
        row.per_seed[si] += g / static_cast<double>(tasks.size());
      }
    }
    std::cout << "ood: seed " << si << " done\n";
  }

  ensure_dir(ctx.results_dir());
  const auto respath = ctx.results_dir() / "ood_results.csv";
  const std::filesystem::path tmp = respath.string() + ".tmp";
  {
    std::ofstream os(tmp);
    os << "# pdtb_ood_v1\n";
    ctx.write_meta(os);
    os << "method,params,mean,std\n";
    for (const Row& r : rows) {
      os << r.method << "," << r.params << "," << fmt(mean_of(r.per_seed)) << ","
         << fmt(std_of(r.per_seed)) << "\n";
    }
  }
  std::filesystem::rename(tmp, respath);
  std::cout << "ood: wrote " << respath << "\n";
  return 0;
}

namespace {

struct PlotFrame {
  double x0, y0, x1, y1;          // canvas box
  double wx0, wy0, wx1, wy1;      // world box
  double px(double wx) const { return x0 + (wx - wx0) / (wx1 - wx0) * (x1 - x0); }
  double py(double wy) const { return y1 - (wy - wy0) / (wy1 - wy0) * (y1 - y0); }
};

void draw_axes(SvgCanvas& svg, const PlotFrame& f, const std::string& xlabel,
               const std::string& ylabel) {
  svg.line(f.x0, f.y1, f.x1, f.y1, "#333333", 1.2);
  svg.line(f.x0, f.y0, f.x0, f.y1, "#333333", 1.2);
  for (int i = 0; i <= 5; ++i) {
    const double wx = f.wx0 + (f.wx1 - f.wx0) * i / 5.0;
    const double wy = f.wy0 + (f.wy1 - f.wy0) * i / 5.0;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.1f", wx);
    svg.text(f.px(wx), f.y1 + 16, buf, 10, "middle");
    std::snprintf(buf, sizeof(buf), "%.1f", wy);
    svg.text(f.x0 - 6, f.py(wy) + 3, buf, 10, "end");
    svg.line(f.px(wx), f.y1, f.px(wx), f.y1 + 4, "#333333", 1.0);
    svg.line(f.x0 - 4, f.py(wy), f.x0, f.py(wy), "#333333", 1.0);
  }
  svg.text((f.x0 + f.x1) / 2, f.y1 + 32, xlabel, 12, "middle");
  svg.text(f.x0 - 34, (f.y0 + f.y1) / 2, ylabel, 12, "middle");
}

}  // namespace

int cmd_plot(const std::vector<std::filesystem::path>& histories,
             const std::filesystem::path& out_dir, const std::string& data_file) {
  ensure_dir(out_dir);

  std::vector<HistoryFile> files;
  for (const auto& p : histories) files.push_back(read_history_csv(p));

  // Learning curves: mean +/- std of G per round, grouped by method.
  {
    std::map<std::string, std::vector<const HistoryFile*>> groups;
    for (const HistoryFile& h : files) groups[h.method.empty() ? "run" : h.method].push_back(&h);

    SvgCanvas svg(800, 600);
    svg.comment("pdtb learning curves");
    PlotFrame f{60, 30, 770, 550, 0, -20, 1, 12};
    size_t max_rounds = 1;
    for (const HistoryFile& h : files) max_rounds = std::max(max_rounds, h.history.size());
    f.wx1 = static_cast<double>(max_rounds);
    double lo = -20, hi = 12;
    f.wy0 = lo;
    f.wy1 = hi;
    draw_axes(svg, f, "round", "return");
    svg.line(f.px(0), f.py(10), f.px(f.wx1), f.py(10), "#888888", 1.0);
    svg.text(f.x1 - 4, f.py(10) - 4, "optimal +10", 10, "end", "#888888");

    const std::string palette[4] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd"};
    int color_idx = 0;
    double legend_y = f.y0 + 14;
    for (const auto& [name, members] : groups) {
      const std::string color = palette[color_idx++ % 4];
      size_t rounds = 0;
      for (const HistoryFile* h : members) rounds = std::max(rounds, h->history.size());
      std::vector<std::pair<double, double>> mean_pts, up, dn;
      for (size_t k = 0; k < rounds; ++k) {
        std::vector<double> gs;
        for (const HistoryFile* h : members) {
          if (k < h->history.size()) gs.push_back(h->history[k].G);
        }
        if (gs.empty()) continue;
        const double m = mean_of(gs);
        const double s = std_of(gs);
        const double x = f.px(static_cast<double>(k));
        mean_pts.emplace_back(x, f.py(std::clamp(m, lo, hi)));
        up.emplace_back(x, f.py(std::clamp(m + s, lo, hi)));
        dn.emplace_back(x, f.py(std::clamp(m - s, lo, hi)));
      }
      std::vector<std::pair<double, double>> band = up;
      band.insert(band.end(), dn.rbegin(), dn.rend());
      svg.polygon(band, color, 0.15);
      svg.polyline(mean_pts, color, 1.6);
      svg.text(f.x0 + 10, legend_y, name, 11, "start", color);
      legend_y += 14;
    }
    svg.save(out_dir / "curves.svg");
  }

  // Spatio-temporal selection scatter: mean segment coordinates colored by G.
  if (!data_file.empty()) {
    DemoSet demos = load_demoset(data_file);
    SvgCanvas svg(620, 620);
    svg.comment("pdtb selected-segment coordinates");
    PlotFrame f{50, 30, 590, 570, -3.4, -3.4, 3.4, 3.4};
    draw_axes(svg, f, "x", "y");

    double glo = 1e300, ghi = -1e300;
    for (const HistoryFile& h : files) {
      for (const TuneRecord& r : h.history) {
        glo = std::min(glo, r.G);
        ghi = std::max(ghi, r.G);
      }
    }
    if (glo > ghi) {
      glo = 0;
      ghi = 1;
    }

    const auto all_tasks = enumerate_tasks();
    for (const HistoryFile& h : files) {
      for (const TuneRecord& r : h.history) {
        const int H = std::max(1, h.H);
        for (const auto& [traj, offset] : r.provenance) {
          if (traj < 0 || traj >= demos.size()) continue;
          const Trajectory& t = demos.trajectories[traj];
          double sx = 0, sy = 0;
          int n = 0;
          for (int i = offset; i < std::min(t.length(), offset + H); ++i) {
            sx += t.transitions[i].state[0];
            sy += t.transitions[i].state[1];
            ++n;
          }
          if (n == 0) continue;
          svg.circle(f.px(sx / n), f.py(sy / n), 3.0, heat_color(r.G, glo, ghi), 0.7);
        }
      }
      if (h.task_id >= 0 && h.task_id < static_cast<int>(all_tasks.size())) {
        const TaskSpec& task = all_tasks[h.task_id];
        // goal star
        std::vector<std::pair<double, double>> star;
        const double cx = f.px(task.goal[0]), cy = f.py(task.goal[1]);
        for (int i = 0; i < 10; ++i) {
          const double ang = -1.5707963 + i * 0.62831853;
          const double rad = (i % 2 == 0) ? 8.0 : 3.5;
          star.emplace_back(cx + rad * std::cos(ang), cy + rad * std::sin(ang));
        }
        svg.polygon(star, "#cc0000", 0.9);
      }
    }
    // start marker
    const double sxp = f.px(0), syp = f.py(0);
    svg.polygon({{sxp, syp - 7}, {sxp + 7, syp}, {sxp, syp + 7}, {sxp - 7, syp}}, "#cc0000", 0.9);
    svg.save(out_dir / "scatter.svg");
  }

  std::cout << "plot: wrote " << (out_dir / "curves.svg") << "\n";
  return 0;
}

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"pdtb: prompting decision transformer with bandit prompt tuning"};
  app.require_subcommand(1);

  std::string config_file, profile = "desk", out = "runs/default", method = "eps_greedy";
  std::string plot_data;
  std::vector<std::string> overrides;
  std::vector<std::string> plot_files;
  uint64_t seed = 1;
  int jobs = 1;
  bool force = false, dt_baseline = false, skip_finetune = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_file, "config file (key = value lines)");
    sub->add_option("--profile", profile, "desk or ci");
    sub->add_option("--set", overrides, "override config keys, key=value")->take_all();
    sub->add_option("--out", out, "output directory");
    sub->add_option("--seed", seed, "master seed");
    sub->add_option("--jobs", jobs, "parallel (task, seed) jobs");
  };

  CLI::App* gen = app.add_subcommand("gen-data", "generate per-task datasets D_i and prompts P_i");
  add_common(gen);
  gen->add_flag("--force", force, "overwrite existing dataset files");

  CLI::App* train = app.add_subcommand("train", "train the model on the configured tasks");
  add_common(train);
  train->add_flag("--dt-baseline", dt_baseline, "also train the prompt-free baseline");

  CLI::App* tune = app.add_subcommand("tune", "online prompt tuning against a checkpoint");
  add_common(tune);
  tune->add_option("--method", method, "none | eps_greedy | ucb | perturb");

  CLI::App* mixture = app.add_subcommand("mixture", "expert/novice prompt-quality sweep");
  add_common(mixture);

  CLI::App* ood = app.add_subcommand("ood", "held-out task evaluation");
  add_common(ood);
  ood->add_flag("--skip-finetune", skip_finetune, "only evaluate the pretrained checkpoint");

  CLI::App* plot = app.add_subcommand("plot", "render history CSVs to SVG");
  plot->add_option("files", plot_files, "history CSV files")->required();
  plot->add_option("--out", out, "output directory");
  plot->add_option("--data", plot_data, "P_i dataset for the segment scatter");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (plot->parsed()) {
      std::vector<std::filesystem::path> paths(plot_files.begin(), plot_files.end());
      return cmd_plot(paths, out, plot_data);
    }
    RunContext ctx = make_context(config_file, profile, overrides, out, seed, jobs);
    if (gen->parsed()) return cmd_gen_data(ctx, force);
    if (train->parsed()) return cmd_train(ctx, dt_baseline);
    if (tune->parsed()) return cmd_tune(ctx, method);
    if (mixture->parsed()) return cmd_mixture(ctx);
    if (ood->parsed()) return cmd_ood(ctx, skip_finetune);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const MissingInputError& e) {
    std::cerr << "missing input: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace pdtb
