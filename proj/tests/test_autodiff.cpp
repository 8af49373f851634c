#include <doctest.h>

#include <stdexcept>

#include <cmath>

#include "pdtb/autodiff.hpp"
#include "pdtb/pdt_model.hpp"
#include "pdtb/rng.hpp"

using namespace pdtb;

namespace {

DenseArray random_array(std::vector<int> shape, Rng& rng, double scale = 1.0) {
  DenseArray a(std::move(shape));
  for (std::int64_t i = 0; i < a.size(); ++i) a[i] = rng.uniform(-scale, scale);
  return a;
}

}  // namespace

TEST_CASE("backward basics") {
  SUBCASE("loss = mean(x*x) at x=3 gives gradient 6") {
    ParamStore ps;
    Parameter* x = ps.add("x", DenseArray::from({1, 1}, {3.0}));
    Graph g;
    auto nx = g.param(x);
    // x^2 via mse against 0 with weight 1: mean((x-0)^2) = x^2
    auto loss = g.mse_loss(nx, g.input(DenseArray::zeros({1, 1})),
                           g.input(DenseArray::full({1}, 1.0)));
    g.backward(loss);
    CHECK(g.value(loss)[0] == doctest::Approx(9.0));
    CHECK(x->grad[0] == doctest::Approx(6.0));
  }

  SUBCASE("gradient of a mean is 1/n") {
    ParamStore ps;
    Parameter* x = ps.add("x", DenseArray::from({5}, {1, 2, 3, 4, 5}));
    Graph g;
    auto loss = g.mean_all(g.param(x));
    g.backward(loss);
    for (int i = 0; i < 5; ++i) CHECK(x->grad[i] == doctest::Approx(0.2));
  }

  SUBCASE("non-scalar loss is rejected") {
    Graph g;
    auto v = g.input(DenseArray::zeros({2, 2}));
    CHECK_THROWS_AS(g.backward(v), std::invalid_argument);
  }

  SUBCASE("gradients accumulate across backward calls") {
    ParamStore ps;
    Parameter* x = ps.add("x", DenseArray::from({1}, {2.0}));
    for (int i = 0; i < 2; ++i) {
      Graph g;
      auto loss = g.mean_all(g.scale(g.param(x), 3.0));
      g.backward(loss);
    }
    CHECK(x->grad[0] == doctest::Approx(6.0));
  }
}

TEST_CASE("gradient check: each op in isolation") {
  Rng rng(11);

  SUBCASE("linear layer is exact to rounding") {
    ParamStore ps;
    Parameter* w = ps.add("w", init_linear(4, 3, rng));
    Parameter* b = ps.add("b", random_array({3}, rng, 0.1));
    DenseArray x = random_array({5, 4}, rng);
    DenseArray t = random_array({5, 3}, rng);
    double err = grad_check(ps, [&](Graph& g) {
      auto y = g.add(g.matmul(g.input(x), g.param(w)), g.param(b));
      return g.mse_loss(y, g.input(t), g.input(DenseArray::full({5}, 1.0)));
    });
    CHECK(err < 1e-8);
  }

  SUBCASE("smooth ops") {
    ParamStore ps;
    Parameter* w = ps.add("w", random_array({6, 6}, rng, 0.5));
    DenseArray x = random_array({4, 6}, rng);
    double err = grad_check(ps, [&](Graph& g) {
      auto h = g.matmul(g.input(x), g.param(w));
      auto soft = g.softmax(h);
      auto act = g.gelu(g.sigmoid(soft));
      return g.mean_all(act);
    });
    CHECK(err < 1e-6);
  }

  SUBCASE("layer norm") {
    ParamStore ps;
    Parameter* w = ps.add("w", random_array({5, 5}, rng, 0.6));
    Parameter* gain = ps.add("g", random_array({5}, rng, 1.0));
    Parameter* bias = ps.add("b", random_array({5}, rng, 0.2));
    DenseArray x = random_array({6, 5}, rng);
    double err = grad_check(ps, [&](Graph& g) {
      auto h = g.layer_norm(g.matmul(g.input(x), g.param(w)), g.param(gain), g.param(bias));
      return g.mean_all(g.gelu(h));
    });
    CHECK(err < 1e-6);
  }

  SUBCASE("batched matmuls") {
    ParamStore ps;
    Parameter* a = ps.add("a", random_array({3, 4, 5}, rng, 0.7));
    Parameter* b = ps.add("b", random_array({3, 5, 2}, rng, 0.7));
    Parameter* c = ps.add("c", random_array({3, 6, 5}, rng, 0.7));
    double err = grad_check(ps, [&](Graph& g) {
      auto ab = g.bmatmul(g.param(a), g.param(b));           // [3,4,2]
      auto an = g.bmatmul_nt(g.param(a), g.param(c));        // [3,4,6]
      return g.add(g.mean_all(g.gelu(ab)), g.mean_all(g.sigmoid(an)));
    });
    CHECK(err < 1e-6);
  }

  SUBCASE("structural ops and gather") {
    ParamStore ps;
    Parameter* a = ps.add("a", random_array({2, 3, 4}, rng));
    Parameter* b = ps.add("b", random_array({2, 3, 4}, rng));
    Parameter* c = ps.add("c", random_array({2, 3, 4}, rng));
    Parameter* table = ps.add("t", random_array({7, 4}, rng));
    double err = grad_check(ps, [&](Graph& g) {
      auto inter = g.interleave3(g.param(a), g.param(b), g.param(c));  // [2,9,4]
      auto s = g.stride3(inter, 1);
      auto cat = g.concat_tokens(s, g.slice_tokens(inter, 0, 2));
      auto sl = g.slice_last(cat, 1, 3);
      auto heads = g.merge_heads(g.split_heads(sl, 2), 2);
      auto gathered = g.embedding_gather(g.param(table), {1, 5, 1});
      return g.add(g.mean_all(g.gelu(heads)), g.mean_all(g.sigmoid(gathered)));
    });
    CHECK(err < 1e-6);
  }

  SUBCASE("losses with masks") {
    ParamStore ps;
    Parameter* w = ps.add("w", random_array({4, 3}, rng, 0.8));
    DenseArray x = random_array({6, 4}, rng);
    DenseArray t = random_array({6, 3}, rng, 0.5);
    DenseArray tb = DenseArray::zeros({6, 3});
    for (std::int64_t i = 0; i < tb.size(); ++i) tb[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
    DenseArray mask = DenseArray::from({6}, {1, 0, 1, 1, 0, 1});
    double err = grad_check(ps, [&](Graph& g) {
      auto y = g.matmul(g.input(x), g.param(w));
      auto l1 = g.mse_loss(y, g.input(t), g.input(mask));
      auto l2 = g.bce_with_logits_loss(y, g.input(tb), g.input(mask));
      return g.add(l1, g.scale(l2, 0.7));
    });
    CHECK(err < 1e-6);
  }

  SUBCASE("relu away from kinks") {
    ParamStore ps;
    Parameter* w1 = ps.add("w1", init_linear(2, 16, rng));
    Parameter* b1 = ps.add("b1", random_array({16}, rng, 0.3));
    Parameter* w2 = ps.add("w2", init_linear(16, 16, rng));
    Parameter* b2 = ps.add("b2", random_array({16}, rng, 0.3));
    Parameter* w3 = ps.add("w3", init_linear(16, 1, rng));
    DenseArray x = random_array({8, 2}, rng);
    DenseArray t = random_array({8, 1}, rng);
    double err = grad_check(ps, [&](Graph& g) {
      auto h = g.relu(g.add(g.matmul(g.input(x), g.param(w1)), g.param(b1)));
      h = g.relu(g.add(g.matmul(h, g.param(w2)), g.param(b2)));
      auto y = g.matmul(h, g.param(w3));
      return g.mse_loss(y, g.input(t), g.input(DenseArray::full({8}, 1.0)));
    });
    CHECK(err < 1e-6);
  }
}

TEST_CASE("gradient check: attention block and composed graphs") {
  Rng rng(21);
  const int d = 8, T = 6, B = 2, heads = 2;
  ParamStore ps;
  Parameter* wq = ps.add("wq", init_linear(d, d, rng));
  Parameter* wk = ps.add("wk", init_linear(d, d, rng));
  Parameter* wv = ps.add("wv", init_linear(d, d, rng));
  Parameter* wo = ps.add("wo", init_linear(d, d, rng));
  DenseArray x = random_array({B, T, d}, rng);
  DenseArray mask = DenseArray::zeros({B * heads, T, T});
  for (int b = 0; b < B * heads; ++b) {
    for (int i = 0; i < T; ++i) {
      for (int j = 0; j < T; ++j) {
        mask[(static_cast<std::int64_t>(b) * T + i) * T + j] = j <= i ? 0.0 : -1e9;
      }
    }
  }
  double err = grad_check(ps, [&](Graph& g) {
    auto nx = g.input(x);
    auto q = g.split_heads(g.matmul(nx, g.param(wq)), heads);
    auto k = g.split_heads(g.matmul(nx, g.param(wk)), heads);
    auto v = g.split_heads(g.matmul(nx, g.param(wv)), heads);
    auto att = g.softmax(g.add(g.scale(g.bmatmul_nt(q, k), 1.0 / std::sqrt(d / heads)),
                               g.input(mask)));
    auto ctx = g.matmul(g.merge_heads(g.bmatmul(att, v), heads), g.param(wo));
    return g.mean_all(g.gelu(ctx));
  });
  CHECK(err < 1e-4);
}

TEST_CASE("gradient check: full 3-block transformer at d=16") {
  PdtConfig cfg;
  cfg.blocks = 3;
  cfg.heads = 2;
  cfg.embed_dim = 16;
  cfg.context_K = 3;
  cfg.prompt_J = 1;
  cfg.prompt_H = 2;
  cfg.head_width = 16;
  PdtModel model(cfg, 99);

  // A tiny synthetic batch with one padded window row.
  Rng rng(5);
  EnvConfig env;
  auto tasks = enumerate_tasks();
  Trajectory demo = scripted_expert(env, tasks[46], 0.1, 7);
  auto segs = extract_segments(demo, cfg.prompt_H);
  PromptTokens prompt = prompt_tokens(assemble_prompt({segs[0]}, 1), cfg);
  std::vector<Transition> win(demo.transitions.begin(), demo.transitions.begin() + 2);
  PdtBatch batch = model.make_batch({&prompt, &prompt}, {win, demo.transitions});

  double err = grad_check(model.params(), [&](Graph& g) { return model.loss(g, batch); });
  CHECK(err < 1e-4);
}

TEST_CASE("randomized composed-graph gradient property") {
  Rng rng(31);
  for (int rep = 0; rep < 5; ++rep) {
    const int din = 2 + rng.uniform_int(4);
    const int dmid = 2 + rng.uniform_int(5);
    ParamStore ps;
    Parameter* w1 = ps.add("w1", init_linear(din, dmid, rng));
    Parameter* w2 = ps.add("w2", init_linear(dmid, dmid, rng));
    Parameter* gain = ps.add("g", DenseArray::full({dmid}, 1.0));
    Parameter* bias = ps.add("b", DenseArray::zeros({dmid}));
    DenseArray x = random_array({3, din}, rng);
    const int pick = rep % 3;
    double err = grad_check(ps, [&](Graph& g) {
      auto h = g.matmul(g.input(x), g.param(w1));
      h = g.layer_norm(h, g.param(gain), g.param(bias));
      if (pick == 0) h = g.gelu(h);
      if (pick == 1) h = g.sigmoid(h);
      if (pick == 2) h = g.softmax(h);
      h = g.matmul(h, g.param(w2));
      return g.mean_all(h);
    });
    CHECK(err < 1e-5);
  }
}

TEST_CASE("grad_check input validation") {
  ParamStore ps;
  ps.add("x", DenseArray::from({1}, {1.0}));
  CHECK_THROWS_AS(grad_check(ps, [](Graph& g) { return g.input(DenseArray::scalar(0)); }, 0.0),
                  std::invalid_argument);
}
