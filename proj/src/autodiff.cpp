#include "pdtb/autodiff.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>

namespace pdtb {

namespace {
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;
}  // namespace

Parameter* ParamStore::add(const std::string& name, DenseArray init) {
  if (find(name) != nullptr) {
    throw std::invalid_argument("ParamStore: duplicate parameter " + name);
  }
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->grad = DenseArray::zeros(init.shape());
  p->value = std::move(init);
  params_.push_back(std::move(p));
  return params_.back().get();
}

Parameter* ParamStore::find(const std::string& name) const {
  for (const auto& p : params_) {
    if (p->name == name) return p.get();
  }
  return nullptr;
}

Parameter* ParamStore::at(const std::string& name) const {
  Parameter* p = find(name);
  if (!p) throw std::invalid_argument("ParamStore: no parameter named " + name);
  return p;
}

void ParamStore::zero_grad() {
  for (const auto& p : params_) p->grad.fill(0.0);
}

std::int64_t ParamStore::scalar_count() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += p->value.size();
  return n;
}

void ParamStore::copy_values_from(const ParamStore& other) {
  if (other.params_.size() != params_.size()) {
    throw std::invalid_argument("copy_values_from: stores differ in parameter count");
  }
  for (auto& p : params_) {
    Parameter* src = other.find(p->name);
    if (!src || !src->value.same_shape(p->value)) {
      throw std::invalid_argument("copy_values_from: no matching parameter " + p->name);
    }
    p->value = src->value;
  }
}

DenseArray init_linear(int fan_in, int fan_out, Rng& rng) {
  DenseArray w({fan_in, fan_out});
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (std::int64_t i = 0; i < w.size(); ++i) w[i] = rng.uniform(-bound, bound);
  return w;
}

DenseArray init_normal(std::vector<int> shape, double stddev, Rng& rng) {
  DenseArray w(std::move(shape));
  for (std::int64_t i = 0; i < w.size(); ++i) w[i] = rng.normal(0.0, stddev);
  return w;
}

struct Graph::Node {
  enum class Op {
    input, param, matmul, bmatmul, bmatmul_nt, add, scale, layer_norm, softmax,
    gelu, relu, sigmoid, gather, concat_t, slice_t, slice_last, interleave3,
    stride3, split_heads, merge_heads, mean_all, mean_tokens, mse, bce
  };

  Op op = Op::input;
  std::array<NodeId, 3> in{-1, -1, -1};
  DenseArray value;
  DenseArray grad;
  Parameter* parameter = nullptr;
  double s0 = 0.0;           // scale factor, eps, loss normalizer
  int i0 = 0, i1 = 0;        // slice bounds / heads / stride offset
  std::vector<int> indices;  // gather
  DenseArray aux, aux2;      // cached row stats
};

Graph::Graph() = default;
Graph::~Graph() = default;

int Graph::node_count() const { return static_cast<int>(nodes_.size()); }

Graph::NodeId Graph::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

Graph::Node& Graph::at(NodeId id) { return nodes_[static_cast<size_t>(id)]; }

const Graph::Node& Graph::cat(NodeId id) const { return nodes_[static_cast<size_t>(id)]; }

const DenseArray& Graph::value(NodeId id) const {
  const Node& n = cat(id);
  return n.parameter ? n.parameter->value : n.value;
}

const DenseArray& Graph::grad(NodeId id) const { return cat(id).grad; }

namespace {
[[noreturn]] void shape_fail(const char* op, int node, const std::string& detail) {
  throw std::invalid_argument(std::string(op) + ": " + detail + " (node " +
                              std::to_string(node) + ")");
}
}  // namespace

Graph::NodeId Graph::input(DenseArray v) {
  Node n;
  n.op = Node::Op::input;
  n.value = std::move(v);
  return push(n);
}

Graph::NodeId Graph::param(Parameter* p) {
  Node n;
  n.op = Node::Op::param;
  n.parameter = p;
  return push(n);
}

Graph::NodeId Graph::matmul(NodeId a, NodeId w) {
  const DenseArray& av = value(a);
  const DenseArray& wv = value(w);
  const int here = node_count();
  if (av.ndim() < 2 || wv.ndim() != 2) shape_fail("matmul", here, "needs [..,M,K] @ [K,N]");
  const int k = av.cols();
  if (k != wv.dim(0)) {
    shape_fail("matmul", here, "inner dims differ: " + av.shape_str() + " @ " + wv.shape_str());
  }
  std::vector<int> oshape = av.shape();
  oshape.back() = wv.dim(1);
  Node n;
  n.op = Node::Op::matmul;
  n.in = {a, w, -1};
  n.value = DenseArray::zeros(oshape);
  gemm_nn(av.data(), wv.data(), n.value.data(), static_cast<int>(av.rows()), k, wv.dim(1), false);
  return push(std::move(n));
}

Graph::NodeId Graph::bmatmul(NodeId a, NodeId b) {
  const DenseArray& av = value(a);
  const DenseArray& bv = value(b);
  const int here = node_count();
  if (av.ndim() != 3 || bv.ndim() != 3 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(1)) {
    shape_fail("bmatmul", here, av.shape_str() + " @ " + bv.shape_str());
  }
  const int B = av.dim(0), M = av.dim(1), K = av.dim(2), N = bv.dim(2);
  Node n;
  n.op = Node::Op::bmatmul;
  n.in = {a, b, -1};
  n.value = DenseArray::zeros({B, M, N});
  const double* ap = av.data();
  const double* bp = bv.data();
  double* cp = n.value.data();
  parallel_for(B, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t i = lo; i < hi; ++i) {
      gemm_nn(ap + i * M * K, bp + i * K * N, cp + i * M * N, M, K, N, false);
    }
  });
  return push(std::move(n));
}

Graph::NodeId Graph::bmatmul_nt(NodeId a, NodeId b) {
  const DenseArray& av = value(a);
  const DenseArray& bv = value(b);
  const int here = node_count();
  if (av.ndim() != 3 || bv.ndim() != 3 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2)) {
    shape_fail("bmatmul_nt", here, av.shape_str() + " @ " + bv.shape_str() + "^T");
  }
  const int B = av.dim(0), M = av.dim(1), K = av.dim(2), N = bv.dim(1);
  Node n;
  n.op = Node::Op::bmatmul_nt;
  n.in = {a, b, -1};
  n.value = DenseArray::zeros({B, M, N});
  const double* ap = av.data();
  const double* bp = bv.data();
  double* cp = n.value.data();
  parallel_for(B, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t i = lo; i < hi; ++i) {
      gemm_nt(ap + i * M * K, bp + i * N * K, cp + i * M * N, M, K, N, false);
    }
  });
  return push(std::move(n));
}

Graph::NodeId Graph::add(NodeId a, NodeId b) {
  const DenseArray& av = value(a);
  const DenseArray& bv = value(b);
  const int here = node_count();
  const bool same = av.same_shape(bv);
  if (!same) {
    // b must be a trailing suffix of a.
    if (bv.ndim() >= av.ndim() || bv.size() == 0 || av.size() % bv.size() != 0) {
      shape_fail("add", here, av.shape_str() + " + " + bv.shape_str());
    }
    for (int i = 0; i < bv.ndim(); ++i) {
      if (bv.dim(i) != av.dim(av.ndim() - bv.ndim() + i)) {
        shape_fail("add", here, av.shape_str() + " + " + bv.shape_str());
      }
    }
  }
  Node n;
  n.op = Node::Op::add;
  n.in = {a, b, -1};
  n.value = DenseArray::zeros(av.shape());
  const std::int64_t bs = bv.size();
  for (std::int64_t i = 0; i < av.size(); ++i) n.value[i] = av[i] + bv[i % bs];
  return push(std::move(n));
}

Graph::NodeId Graph::scale(NodeId a, double s) {
  Node n;
  n.op = Node::Op::scale;
  n.in = {a, -1, -1};
  n.s0 = s;
  const DenseArray& av = value(a);
  n.value = DenseArray::zeros(av.shape());
  for (std::int64_t i = 0; i < av.size(); ++i) n.value[i] = s * av[i];
  return push(std::move(n));
}

Graph::NodeId Graph::layer_norm(NodeId x, NodeId gain, NodeId bias, double eps) {
  const DenseArray& xv = value(x);
  const DenseArray& gv = value(gain);
  const DenseArray& bv = value(bias);
  const int here = node_count();
  const int D = xv.cols();
  if (gv.ndim() != 1 || gv.dim(0) != D || bv.ndim() != 1 || bv.dim(0) != D) {
    shape_fail("layer_norm", here, "gain/bias must be [" + std::to_string(D) + "]");
  }
  const std::int64_t R = xv.rows();
  Node n;
  n.op = Node::Op::layer_norm;
  n.in = {x, gain, bias};
  n.s0 = eps;
  n.value = DenseArray::zeros(xv.shape());
  n.aux = DenseArray::zeros(xv.shape());  // normalized rows
  n.aux2 = DenseArray::zeros({static_cast<int>(R)});
  for (std::int64_t r = 0; r < R; ++r) {
    const double* xr = xv.data() + r * D;
    double mu = 0.0;
    for (int j = 0; j < D; ++j) mu += xr[j];
    mu /= D;
    double var = 0.0;
    for (int j = 0; j < D; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= D;
    const double rstd = 1.0 / std::sqrt(var + eps);
    n.aux2[r] = rstd;
    double* hat = n.aux.data() + r * D;
    double* yr = n.value.data() + r * D;
    for (int j = 0; j < D; ++j) {
      hat[j] = (xr[j] - mu) * rstd;
      yr[j] = hat[j] * gv[j] + bv[j];
    }
  }
  return push(std::move(n));
}

Graph::NodeId Graph::softmax(NodeId x) {
  const DenseArray& xv = value(x);
  const int D = xv.cols();
  const std::int64_t R = xv.rows();
  Node n;
  n.op = Node::Op::softmax;
  n.in = {x, -1, -1};
  n.value = DenseArray::zeros(xv.shape());
  for (std::int64_t r = 0; r < R; ++r) {
    const double* xr = xv.data() + r * D;
    double* yr = n.value.data() + r * D;
    double mx = xr[0];
    for (int j = 1; j < D; ++j) mx = std::max(mx, xr[j]);
    double sum = 0.0;
    for (int j = 0; j < D; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      sum += yr[j];
    }
    const double inv = 1.0 / sum;
    for (int j = 0; j < D; ++j) yr[j] *= inv;
  }
  return push(std::move(n));
}

Graph::NodeId Graph::gelu(NodeId x) {
  const DenseArray& xv = value(x);
  Node n;
  n.op = Node::Op::gelu;
  n.in = {x, -1, -1};
  n.value = DenseArray::zeros(xv.shape());
  for (std::int64_t i = 0; i < xv.size(); ++i) {
    n.value[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * kInvSqrt2));
  }
  return push(std::move(n));
}

Graph::NodeId Graph::relu(NodeId x) {
  const DenseArray& xv = value(x);
  Node n;
  n.op = Node::Op::relu;
  n.in = {x, -1, -1};
  n.value = DenseArray::zeros(xv.shape());
  for (std::int64_t i = 0; i < xv.size(); ++i) n.value[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  return push(std::move(n));
}

Graph::NodeId Graph::sigmoid(NodeId x) {
  const DenseArray& xv = value(x);
  Node n;
  n.op = Node::Op::sigmoid;
  n.in = {x, -1, -1};
  n.value = DenseArray::zeros(xv.shape());
  for (std::int64_t i = 0; i < xv.size(); ++i) n.value[i] = 1.0 / (1.0 + std::exp(-xv[i]));
  return push(std::move(n));
}

Graph::NodeId Graph::embedding_gather(NodeId table, std::vector<int> indices) {
  const DenseArray& tv = value(table);
  const int here = node_count();
  if (tv.ndim() != 2) shape_fail("embedding_gather", here, "table must be 2D");
  const int V = tv.dim(0), D = tv.dim(1);
  for (int idx : indices) {
    if (idx < 0 || idx >= V) shape_fail("embedding_gather", here, "index out of range");
  }
  Node n;
  n.op = Node::Op::gather;
  n.in = {table, -1, -1};
  n.indices = std::move(indices);
  n.value = DenseArray::zeros({static_cast<int>(n.indices.size()), D});
  for (size_t i = 0; i < n.indices.size(); ++i) {
    const double* src = tv.data() + static_cast<std::int64_t>(n.indices[i]) * D;
    std::copy(src, src + D, n.value.data() + static_cast<std::int64_t>(i) * D);
  }
  return push(std::move(n));
}

namespace {
// Token-axis geometry: B batch items of T rows by D columns.
struct TokenView {
  std::int64_t B;
  int T, D;
};
TokenView token_view(const DenseArray& a, const char* op, int node) {
  if (a.ndim() < 2) shape_fail(op, node, "needs a token axis: " + a.shape_str());
  TokenView v;
  v.T = a.dim(a.ndim() - 2);
  v.D = a.dim(a.ndim() - 1);
  v.B = a.size() / (static_cast<std::int64_t>(v.T) * v.D);
  return v;
}
}  // namespace

Graph::NodeId Graph::concat_tokens(NodeId a, NodeId b) {
  const DenseArray& av = value(a);
  const DenseArray& bv = value(b);
  const int here = node_count();
  TokenView va = token_view(av, "concat_tokens", here);
  TokenView vb = token_view(bv, "concat_tokens", here);
  if (va.B != vb.B || va.D != vb.D || av.ndim() != bv.ndim()) {
    shape_fail("concat_tokens", here, av.shape_str() + " ++ " + bv.shape_str());
  }
  std::vector<int> oshape = av.shape();
  oshape[oshape.size() - 2] = va.T + vb.T;
  Node n;
  n.op = Node::Op::concat_t;
  n.in = {a, b, -1};
  n.i0 = va.T;
  n.value = DenseArray::zeros(oshape);
  for (std::int64_t i = 0; i < va.B; ++i) {
    std::copy(av.data() + i * va.T * va.D, av.data() + (i + 1) * va.T * va.D,
              n.value.data() + i * (va.T + vb.T) * va.D);
    std::copy(bv.data() + i * vb.T * vb.D, bv.data() + (i + 1) * vb.T * vb.D,
              n.value.data() + i * (va.T + vb.T) * va.D + static_cast<std::int64_t>(va.T) * va.D);
  }
  return push(std::move(n));
}

Graph::NodeId Graph::slice_tokens(NodeId x, int from, int to) {
  const DenseArray& xv = value(x);
  const int here = node_count();
  TokenView v = token_view(xv, "slice_tokens", here);
  if (from < 0 || to > v.T || from >= to) shape_fail("slice_tokens", here, "bad range");
  std::vector<int> oshape = xv.shape();
  oshape[oshape.size() - 2] = to - from;
  Node n;
  n.op = Node::Op::slice_t;
  n.in = {x, -1, -1};
  n.i0 = from;
  n.i1 = to;
  n.value = DenseArray::zeros(oshape);
  for (std::int64_t i = 0; i < v.B; ++i) {
    const double* src = xv.data() + (i * v.T + from) * v.D;
    std::copy(src, src + static_cast<std::int64_t>(to - from) * v.D,
              n.value.data() + i * static_cast<std::int64_t>(to - from) * v.D);
  }
  return push(std::move(n));
}

Graph::NodeId Graph::slice_last(NodeId x, int from, int to) {
  const DenseArray& xv = value(x);
  const int here = node_count();
  const int D = xv.cols();
  if (from < 0 || to > D || from >= to) shape_fail("slice_last", here, "bad range");
  std::vector<int> oshape = xv.shape();
  oshape.back() = to - from;
  Node n;
  n.op = Node::Op::slice_last;
  n.in = {x, -1, -1};
  n.i0 = from;
  n.i1 = to;
  n.value = DenseArray::zeros(oshape);
  const std::int64_t R = xv.rows();
  for (std::int64_t r = 0; r < R; ++r) {
    const double* src = xv.data() + r * D + from;
    std::copy(src, src + (to - from), n.value.data() + r * (to - from));
  }
  return push(std::move(n));
}

Graph::NodeId Graph::interleave3(NodeId a, NodeId b, NodeId c) {
  const DenseArray& av = value(a);
  const DenseArray& bv = value(b);
  const DenseArray& cv = value(c);
  const int here = node_count();
  if (!av.same_shape(bv) || !av.same_shape(cv)) {
    shape_fail("interleave3", here, "inputs must share a shape");
  }
  TokenView v = token_view(av, "interleave3", here);
  std::vector<int> oshape = av.shape();
  oshape[oshape.size() - 2] = 3 * v.T;
  Node n;
  n.op = Node::Op::interleave3;
  n.in = {a, b, c};
  n.value = DenseArray::zeros(oshape);
  const DenseArray* srcs[3] = {&av, &bv, &cv};
  for (std::int64_t i = 0; i < v.B; ++i) {
    for (int t = 0; t < v.T; ++t) {
      for (int s = 0; s < 3; ++s) {
        const double* src = srcs[s]->data() + (i * v.T + t) * v.D;
        std::copy(src, src + v.D, n.value.data() + ((i * 3 * v.T) + 3 * t + s) * v.D);
      }
    }
  }
  return push(std::move(n));
}

Graph::NodeId Graph::stride3(NodeId x, int offset) {
  const DenseArray& xv = value(x);
  const int here = node_count();
  TokenView v = token_view(xv, "stride3", here);
  if (offset < 0 || offset > 2 || v.T % 3 != 0) shape_fail("stride3", here, "needs 3L tokens");
  const int L = v.T / 3;
  std::vector<int> oshape = xv.shape();
  oshape[oshape.size() - 2] = L;
  Node n;
  n.op = Node::Op::stride3;
  n.in = {x, -1, -1};
  n.i0 = offset;
  n.value = DenseArray::zeros(oshape);
  for (std::int64_t i = 0; i < v.B; ++i) {
    for (int l = 0; l < L; ++l) {
      const double* src = xv.data() + (i * v.T + 3 * l + offset) * v.D;
      std::copy(src, src + v.D, n.value.data() + (i * L + l) * v.D);
    }
  }
  return push(std::move(n));
}

Graph::NodeId Graph::split_heads(NodeId x, int heads) {
  const DenseArray& xv = value(x);
  const int here = node_count();
  if (xv.ndim() != 3 || xv.dim(2) % heads != 0) {
    shape_fail("split_heads", here, xv.shape_str() + " into " + std::to_string(heads));
  }
  const int B = xv.dim(0), T = xv.dim(1), D = xv.dim(2), Dh = D / heads;
  Node n;
  n.op = Node::Op::split_heads;
  n.in = {x, -1, -1};
  n.i0 = heads;
  n.value = DenseArray::zeros({B * heads, T, Dh});
  for (int b = 0; b < B; ++b) {
    for (int h = 0; h < heads; ++h) {
      for (int t = 0; t < T; ++t) {
        const double* src = xv.data() + (static_cast<std::int64_t>(b) * T + t) * D + h * Dh;
        double* dst =
            n.value.data() + ((static_cast<std::int64_t>(b) * heads + h) * T + t) * Dh;
        std::copy(src, src + Dh, dst);
      }
    }
  }
  return push(std::move(n));
}

Graph::NodeId Graph::merge_heads(NodeId x, int heads) {
  const DenseArray& xv = value(x);
  const int here = node_count();
  if (xv.ndim() != 3 || xv.dim(0) % heads != 0) {
    shape_fail("merge_heads", here, xv.shape_str() + " from " + std::to_string(heads));
  }
  const int B = xv.dim(0) / heads, T = xv.dim(1), Dh = xv.dim(2);
  Node n;
  n.op = Node::Op::merge_heads;
  n.in = {x, -1, -1};
  n.i0 = heads;
  n.value = DenseArray::zeros({B, T, heads * Dh});
  for (int b = 0; b < B; ++b) {
    for (int h = 0; h < heads; ++h) {
      for (int t = 0; t < T; ++t) {
        const double* src =
            xv.data() + ((static_cast<std::int64_t>(b) * heads + h) * T + t) * Dh;
        double* dst =
            n.value.data() + (static_cast<std::int64_t>(b) * T + t) * (heads * Dh) + h * Dh;
        std::copy(src, src + Dh, dst);
      }
    }
  }
  return push(std::move(n));
}

Graph::NodeId Graph::mean_all(NodeId x) {
  const DenseArray& xv = value(x);
  Node n;
  n.op = Node::Op::mean_all;
  n.in = {x, -1, -1};
  double s = 0.0;
  for (std::int64_t i = 0; i < xv.size(); ++i) s += xv[i];
  n.value = DenseArray::scalar(xv.size() > 0 ? s / static_cast<double>(xv.size()) : 0.0);
  return push(std::move(n));
}

Graph::NodeId Graph::mean_tokens(NodeId x) {
  const DenseArray& xv = value(x);
  const int here = node_count();
  TokenView v = token_view(xv, "mean_tokens", here);
  std::vector<int> oshape = xv.shape();
  oshape.erase(oshape.end() - 2);
  Node n;
  n.op = Node::Op::mean_tokens;
  n.in = {x, -1, -1};
  n.value = DenseArray::zeros(oshape);
  for (std::int64_t i = 0; i < v.B; ++i) {
    double* out = n.value.data() + i * v.D;
    for (int t = 0; t < v.T; ++t) {
      const double* src = xv.data() + (i * v.T + t) * v.D;
      for (int j = 0; j < v.D; ++j) out[j] += src[j];
    }
    for (int j = 0; j < v.D; ++j) out[j] /= v.T;
  }
  return push(std::move(n));
}

Graph::NodeId Graph::mse_loss(NodeId pred, NodeId target, NodeId weight) {
  const DenseArray& pv = value(pred);
  const DenseArray& tv = value(target);
  const DenseArray& wv = value(weight);
  const int here = node_count();
  if (!pv.same_shape(tv)) shape_fail("mse_loss", here, "pred/target shapes differ");
  const int C = pv.cols();
  const std::int64_t R = pv.rows();
  if (wv.size() != R) shape_fail("mse_loss", here, "weight must have one entry per row");
  double wsum = 0.0;
  for (std::int64_t r = 0; r < R; ++r) wsum += wv[r];
  if (wsum <= 0.0) shape_fail("mse_loss", here, "weight sum is zero");
  Node n;
  n.op = Node::Op::mse;
  n.in = {pred, target, weight};
  n.s0 = 1.0 / (wsum * C);
  double loss = 0.0;
  for (std::int64_t r = 0; r < R; ++r) {
    const double w = wv[r];
    if (w == 0.0) continue;
    for (int c = 0; c < C; ++c) {
      const double d = pv[r * C + c] - tv[r * C + c];
      loss += w * d * d;
    }
  }
  n.value = DenseArray::scalar(loss * n.s0);
  return push(std::move(n));
}

Graph::NodeId Graph::bce_with_logits_loss(NodeId logit, NodeId target, NodeId weight) {
  const DenseArray& zv = value(logit);
  const DenseArray& tv = value(target);
  const DenseArray& wv = value(weight);
  const int here = node_count();
  if (!zv.same_shape(tv)) shape_fail("bce_with_logits_loss", here, "logit/target shapes differ");
  const int C = zv.cols();
  const std::int64_t R = zv.rows();
  if (wv.size() != R) shape_fail("bce_with_logits_loss", here, "weight must have one entry per row");
  double wsum = 0.0;
  for (std::int64_t r = 0; r < R; ++r) wsum += wv[r];
  if (wsum <= 0.0) shape_fail("bce_with_logits_loss", here, "weight sum is zero");
  Node n;
  n.op = Node::Op::bce;
  n.in = {logit, target, weight};
  n.s0 = 1.0 / (wsum * C);
  double loss = 0.0;
  for (std::int64_t r = 0; r < R; ++r) {
    const double w = wv[r];
    if (w == 0.0) continue;
    for (int c = 0; c < C; ++c) {
      const double z = zv[r * C + c];
      const double t = tv[r * C + c];
      loss += w * (std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z))));
    }
  }
  n.value = DenseArray::scalar(loss * n.s0);
  return push(std::move(n));
}

void Graph::backward(NodeId loss) {
  if (value(loss).size() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got " +
                                value(loss).shape_str());
  }
  for (Node& n : nodes_) {
    n.grad = DenseArray::zeros(n.parameter ? n.parameter->value.shape() : n.value.shape());
  }
  at(loss).grad[0] = 1.0;

  for (NodeId id = loss; id >= 0; --id) {
    Node& n = at(id);
    const DenseArray& g = n.grad;
    auto in_val = [&](int slot) -> const DenseArray& { return value(n.in[slot]); };
    auto in_grad = [&](int slot) -> DenseArray& { return at(n.in[slot]).grad; };

    switch (n.op) {
      case Node::Op::input:
      case Node::Op::param:
        break;

      case Node::Op::matmul: {
        const DenseArray& a = in_val(0);
        const DenseArray& w = in_val(1);
        const int rows = static_cast<int>(a.rows());
        const int K = a.cols(), N = w.dim(1);
        gemm_nt(g.data(), w.data(), in_grad(0).data(), rows, N, K, true);
        gemm_tn(a.data(), g.data(), in_grad(1).data(), rows, K, N, true);
        break;
      }

      case Node::Op::bmatmul: {
        const DenseArray& a = in_val(0);
        const DenseArray& b = in_val(1);
        const int B = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(2);
        double* da = in_grad(0).data();
        double* db = in_grad(1).data();
        const double* ap = a.data();
        const double* bp = b.data();
        const double* gp = g.data();
        parallel_for(B, [&](std::int64_t lo, std::int64_t hi) {
          for (std::int64_t i = lo; i < hi; ++i) {
            gemm_nt(gp + i * M * N, bp + i * K * N, da + i * M * K, M, N, K, true);
            gemm_tn(ap + i * M * K, gp + i * M * N, db + i * K * N, M, K, N, true);
          }
        });
        break;
      }

      case Node::Op::bmatmul_nt: {
        const DenseArray& a = in_val(0);
        const DenseArray& b = in_val(1);
        const int B = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(1);
        double* da = in_grad(0).data();
        double* db = in_grad(1).data();
        const double* ap = a.data();
        const double* bp = b.data();
        const double* gp = g.data();
        parallel_for(B, [&](std::int64_t lo, std::int64_t hi) {
          for (std::int64_t i = lo; i < hi; ++i) {
            gemm_nn(gp + i * M * N, bp + i * N * K, da + i * M * K, M, N, K, true);
            gemm_tn(gp + i * M * N, ap + i * M * K, db + i * N * K, M, N, K, true);
          }
        });
        break;
      }

      case Node::Op::add: {
        DenseArray& da = in_grad(0);
        DenseArray& db = in_grad(1);
        for (std::int64_t i = 0; i < g.size(); ++i) da[i] += g[i];
        const std::int64_t bs = db.size();
        for (std::int64_t i = 0; i < g.size(); ++i) db[i % bs] += g[i];
        break;
      }

      case Node::Op::scale: {
        DenseArray& da = in_grad(0);
        for (std::int64_t i = 0; i < g.size(); ++i) da[i] += n.s0 * g[i];
        break;
      }

      case Node::Op::layer_norm: {
        const DenseArray& gain = in_val(1);
        DenseArray& dx = in_grad(0);
        DenseArray& dg = in_grad(1);
        DenseArray& db = in_grad(2);
        const int D = in_val(0).cols();
        const std::int64_t R = in_val(0).rows();
        for (std::int64_t r = 0; r < R; ++r) {
          const double* hat = n.aux.data() + r * D;
          const double* gr = g.data() + r * D;
          const double rstd = n.aux2[r];
          double mean_dh = 0.0, mean_dhh = 0.0;
          for (int j = 0; j < D; ++j) {
            const double dh = gr[j] * gain[j];
            mean_dh += dh;
            mean_dhh += dh * hat[j];
          }
          mean_dh /= D;
          mean_dhh /= D;
          double* dxr = dx.data() + r * D;
          for (int j = 0; j < D; ++j) {
            const double dh = gr[j] * gain[j];
            dxr[j] += rstd * (dh - mean_dh - hat[j] * mean_dhh);
            dg[j] += gr[j] * hat[j];
            db[j] += gr[j];
          }
        }
        break;
      }

      case Node::Op::softmax: {
        DenseArray& dx = in_grad(0);
        const int D = n.value.cols();
        const std::int64_t R = n.value.rows();
        for (std::int64_t r = 0; r < R; ++r) {
          const double* y = n.value.data() + r * D;
          const double* gr = g.data() + r * D;
          double dot = 0.0;
          for (int j = 0; j < D; ++j) dot += gr[j] * y[j];
          double* dxr = dx.data() + r * D;
          for (int j = 0; j < D; ++j) dxr[j] += y[j] * (gr[j] - dot);
        }
        break;
      }

      case Node::Op::gelu: {
        const DenseArray& x = in_val(0);
        DenseArray& dx = in_grad(0);
        for (std::int64_t i = 0; i < x.size(); ++i) {
          const double cdf = 0.5 * (1.0 + std::erf(x[i] * kInvSqrt2));
          const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x[i] * x[i]);
          dx[i] += g[i] * (cdf + x[i] * pdf);
        }
        break;
      }

      case Node::Op::relu: {
        const DenseArray& x = in_val(0);
        DenseArray& dx = in_grad(0);
        for (std::int64_t i = 0; i < x.size(); ++i) {
          if (x[i] > 0.0) dx[i] += g[i];
        }
        break;
      }

      case Node::Op::sigmoid: {
        DenseArray& dx = in_grad(0);
        for (std::int64_t i = 0; i < n.value.size(); ++i) {
          dx[i] += g[i] * n.value[i] * (1.0 - n.value[i]);
        }
        break;
      }

      case Node::Op::gather: {
        DenseArray& dt = in_grad(0);
        const int D = n.value.cols();
        for (size_t i = 0; i < n.indices.size(); ++i) {
          const double* src = g.data() + static_cast<std::int64_t>(i) * D;
          double* dst = dt.data() + static_cast<std::int64_t>(n.indices[i]) * D;
          for (int j = 0; j < D; ++j) dst[j] += src[j];
        }
        break;
      }

      case Node::Op::concat_t: {
        DenseArray& da = in_grad(0);
        DenseArray& db = in_grad(1);
        const int D = n.value.cols();
        const int T = n.value.dim(n.value.ndim() - 2);
        const int Ta = n.i0, Tb = T - n.i0;
        const std::int64_t B = n.value.size() / (static_cast<std::int64_t>(T) * D);
        for (std::int64_t i = 0; i < B; ++i) {
          const double* ga = g.data() + i * T * D;
          const double* gb = ga + static_cast<std::int64_t>(Ta) * D;
          for (std::int64_t j = 0; j < static_cast<std::int64_t>(Ta) * D; ++j) {
            da[i * Ta * D + j] += ga[j];
          }
          for (std::int64_t j = 0; j < static_cast<std::int64_t>(Tb) * D; ++j) {
            db[i * Tb * D + j] += gb[j];
          }
        }
        break;
      }

      case Node::Op::slice_t: {
        DenseArray& dx = in_grad(0);
        const DenseArray& x = in_val(0);
        const int D = x.cols();
        const int T = x.dim(x.ndim() - 2);
        const int W = n.i1 - n.i0;
        const std::int64_t B = x.size() / (static_cast<std::int64_t>(T) * D);
        for (std::int64_t i = 0; i < B; ++i) {
          const double* gr = g.data() + i * W * D;
          double* dst = dx.data() + (i * T + n.i0) * D;
          for (std::int64_t j = 0; j < static_cast<std::int64_t>(W) * D; ++j) dst[j] += gr[j];
        }
        break;
      }

      case Node::Op::slice_last: {
        DenseArray& dx = in_grad(0);
        const DenseArray& x = in_val(0);
        const int D = x.cols();
        const int W = n.i1 - n.i0;
        const std::int64_t R = x.rows();
        for (std::int64_t r = 0; r < R; ++r) {
          for (int j = 0; j < W; ++j) dx[r * D + n.i0 + j] += g[r * W + j];
        }
        break;
      }

      case Node::Op::interleave3: {
        const DenseArray& a = in_val(0);
        const int D = a.cols();
        const int T = a.dim(a.ndim() - 2);
        const std::int64_t B = a.size() / (static_cast<std::int64_t>(T) * D);
        for (int s = 0; s < 3; ++s) {
          DenseArray& d = in_grad(s);
          for (std::int64_t i = 0; i < B; ++i) {
            for (int t = 0; t < T; ++t) {
              const double* gr = g.data() + ((i * 3 * T) + 3 * t + s) * D;
              double* dst = d.data() + (i * T + t) * D;
              for (int j = 0; j < D; ++j) dst[j] += gr[j];
            }
          }
        }
        break;
      }

      case Node::Op::stride3: {
        DenseArray& dx = in_grad(0);
        const DenseArray& x = in_val(0);
        const int D = x.cols();
        const int T = x.dim(x.ndim() - 2);
        const int L = T / 3;
        const std::int64_t B = x.size() / (static_cast<std::int64_t>(T) * D);
        for (std::int64_t i = 0; i < B; ++i) {
          for (int l = 0; l < L; ++l) {
            const double* gr = g.data() + (i * L + l) * D;
            double* dst = dx.data() + (i * T + 3 * l + n.i0) * D;
            for (int j = 0; j < D; ++j) dst[j] += gr[j];
          }
        }
        break;
      }

      case Node::Op::split_heads: {
        DenseArray& dx = in_grad(0);
        const DenseArray& x = in_val(0);
        const int B = x.dim(0), T = x.dim(1), D = x.dim(2);
        const int heads = n.i0, Dh = D / heads;
        for (int b = 0; b < B; ++b) {
          for (int h = 0; h < heads; ++h) {
            for (int t = 0; t < T; ++t) {
              const double* gr =
                  g.data() + ((static_cast<std::int64_t>(b) * heads + h) * T + t) * Dh;
              double* dst = dx.data() + (static_cast<std::int64_t>(b) * T + t) * D + h * Dh;
              for (int j = 0; j < Dh; ++j) dst[j] += gr[j];
            }
          }
        }
        break;
      }

      case Node::Op::merge_heads: {
        DenseArray& dx = in_grad(0);
        const DenseArray& x = in_val(0);
        const int BH = x.dim(0), T = x.dim(1), Dh = x.dim(2);
        const int heads = n.i0, B = BH / heads;
        for (int b = 0; b < B; ++b) {
          for (int h = 0; h < heads; ++h) {
            for (int t = 0; t < T; ++t) {
              const double* gr =
                  g.data() + (static_cast<std::int64_t>(b) * T + t) * (heads * Dh) + h * Dh;
              double* dst =
                  dx.data() + ((static_cast<std::int64_t>(b) * heads + h) * T + t) * Dh;
              for (int j = 0; j < Dh; ++j) dst[j] += gr[j];
            }
          }
        }
        break;
      }

      case Node::Op::mean_all: {
        DenseArray& dx = in_grad(0);
        const double s = g[0] / static_cast<double>(dx.size());
        for (std::int64_t i = 0; i < dx.size(); ++i) dx[i] += s;
        break;
      }

      case Node::Op::mean_tokens: {
        DenseArray& dx = in_grad(0);
        const DenseArray& x = in_val(0);
        const int D = x.cols();
        const int T = x.dim(x.ndim() - 2);
        const std::int64_t B = x.size() / (static_cast<std::int64_t>(T) * D);
        for (std::int64_t i = 0; i < B; ++i) {
          const double* gr = g.data() + i * D;
          for (int t = 0; t < T; ++t) {
            double* dst = dx.data() + (i * T + t) * D;
            for (int j = 0; j < D; ++j) dst[j] += gr[j] / T;
          }
        }
        break;
      }

      case Node::Op::mse: {
        const DenseArray& p = in_val(0);
        const DenseArray& t = in_val(1);
        const DenseArray& w = in_val(2);
        DenseArray& dp = in_grad(0);
        DenseArray& dt = in_grad(1);
        const int C = p.cols();
        const std::int64_t R = p.rows();
        const double go = g[0] * n.s0;
        for (std::int64_t r = 0; r < R; ++r) {
          const double wr = w[r];
          if (wr == 0.0) continue;
          for (int c = 0; c < C; ++c) {
            const double d = 2.0 * wr * (p[r * C + c] - t[r * C + c]) * go;
            dp[r * C + c] += d;
            dt[r * C + c] -= d;
          }
        }
        break;
      }

      case Node::Op::bce: {
        const DenseArray& z = in_val(0);
        const DenseArray& t = in_val(1);
        const DenseArray& w = in_val(2);
        DenseArray& dz = in_grad(0);
        DenseArray& dt = in_grad(1);
        const int C = z.cols();
        const std::int64_t R = z.rows();
        const double go = g[0] * n.s0;
        for (std::int64_t r = 0; r < R; ++r) {
          const double wr = w[r];
          if (wr == 0.0) continue;
          for (int c = 0; c < C; ++c) {
            const double sig = 1.0 / (1.0 + std::exp(-z[r * C + c]));
            dz[r * C + c] += wr * (sig - t[r * C + c]) * go;
            dt[r * C + c] -= wr * z[r * C + c] * go;
          }
        }
        break;
      }
    }
  }

  // Fold gradients of parameter leaves into their owners.
  for (Node& n : nodes_) {
    if (n.parameter) {
      for (std::int64_t i = 0; i < n.grad.size(); ++i) n.parameter->grad[i] += n.grad[i];
    }
  }
}

double grad_check(ParamStore& params, const std::function<Graph::NodeId(Graph&)>& build,
                  double eps) {
  if (eps <= 0) throw std::invalid_argument("grad_check: eps must be positive");
  params.zero_grad();
  {
    Graph g;
    g.backward(build(g));
  }
  std::vector<std::vector<double>> analytic;
  for (const auto& p : params.all()) {
    analytic.emplace_back(p->grad.data(), p->grad.data() + p->grad.size());
  }

  auto eval = [&]() {
    Graph g;
    return g.value(build(g))[0];
  };

  // Near-zero entries are judged against the overall gradient scale, not
  // against themselves; otherwise finite-difference roundoff on a dead weight
  // dominates the report.
  double scale = 0.0;
  for (const auto& g : analytic) {
    for (double v : g) scale = std::max(scale, std::abs(v));
  }
  const double floor = std::max(1e-3 * scale, 1e-8);

  double max_rel = 0.0;
  size_t pi = 0;
  for (const auto& p : params.all()) {
    for (std::int64_t i = 0; i < p->value.size(); ++i) {
      const double v0 = p->value[i];
      p->value[i] = v0 + eps;
      const double f1 = eval();
      p->value[i] = v0 - eps;
      const double f2 = eval();
      p->value[i] = v0;
      const double numeric = (f1 - f2) / (2.0 * eps);
      const double a = analytic[pi][static_cast<size_t>(i)];
      const double rel = std::abs(a - numeric) / std::max(std::abs(a) + std::abs(numeric), floor);
      max_rel = std::max(max_rel, rel);
    }
    ++pi;
  }
  return max_rel;
}

}  // namespace pdtb
