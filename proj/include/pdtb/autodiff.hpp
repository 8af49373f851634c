#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "pdtb/rng.hpp"
#include "pdtb/tensor.hpp"

namespace pdtb {

struct Parameter {
  std::string name;
  DenseArray value;
  DenseArray grad;
};

class ParamStore {
 public:
  Parameter* add(const std::string& name, DenseArray init);
  Parameter* find(const std::string& name) const;  // nullptr when missing
  Parameter* at(const std::string& name) const;    // throws when missing

  const std::vector<std::unique_ptr<Parameter>>& all() const { return params_; }
  void zero_grad();
  std::int64_t scalar_count() const;

  // Copies values from a store with identical names and shapes.
  void copy_values_from(const ParamStore& other);

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
};

// Scaled-uniform init, gain 1/sqrt(fan_in). Weight layout is [fan_in, fan_out].
DenseArray init_linear(int fan_in, int fan_out, Rng& rng);
DenseArray init_normal(std::vector<int> shape, double stddev, Rng& rng);

// Reverse-mode tape over rank<=3 dense arrays. Nodes are evaluated eagerly as
// they are built; backward() runs one reverse sweep and accumulates parameter
// gradients into Parameter::grad.
class Graph {
 public:
  using NodeId = int;

  Graph();
  ~Graph();
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  NodeId input(DenseArray v);
  NodeId param(Parameter* p);

  // [.., M, K] @ [K, N]; the 2D right-hand side is shared across the batch.
  NodeId matmul(NodeId a, NodeId w);
  // [B, M, K] @ [B, K, N]
  NodeId bmatmul(NodeId a, NodeId b);
  // [B, M, K] @ [B, N, K]^T
  NodeId bmatmul_nt(NodeId a, NodeId b);

  // Same shape, or b's shape equal to a trailing suffix of a's (bias over
  // rows, positional table over a batch).
  NodeId add(NodeId a, NodeId b);
  NodeId scale(NodeId a, double s);

  // Normalization over the last dimension, then affine gain/bias.
  NodeId layer_norm(NodeId x, NodeId gain, NodeId bias, double eps = 1e-5);
  NodeId softmax(NodeId x);  // last dimension
  NodeId gelu(NodeId x);
  NodeId relu(NodeId x);
  NodeId sigmoid(NodeId x);

  NodeId embedding_gather(NodeId table, std::vector<int> indices);

  // Token axis = second-to-last dimension.
  NodeId concat_tokens(NodeId a, NodeId b);
  NodeId slice_tokens(NodeId x, int from, int to);
  NodeId slice_last(NodeId x, int from, int to);
  // (a_l, b_l, c_l) rows interleaved: [B?, L, D] x3 -> [B?, 3L, D]
  NodeId interleave3(NodeId a, NodeId b, NodeId c);
  // Rows 3l+offset: [B?, 3L, D] -> [B?, L, D]
  NodeId stride3(NodeId x, int offset);
  // [B, T, D] -> [B*h, T, D/h] and back.
  NodeId split_heads(NodeId x, int heads);
  NodeId merge_heads(NodeId x, int heads);

  NodeId mean_all(NodeId x);     // scalar
  NodeId mean_tokens(NodeId x);  // mean over the token axis

  // Weighted means over unmasked rows; weight has one entry per row of the
  // prediction's leading dims. Throws if the weight sum is zero.
  NodeId mse_loss(NodeId pred, NodeId target, NodeId weight);
  NodeId bce_with_logits_loss(NodeId logit, NodeId target, NodeId weight);

  const DenseArray& value(NodeId id) const;
  const DenseArray& grad(NodeId id) const;

  // Loss must be scalar. Gradients of parameters accumulate (callers zero
  // them between optimizer steps, which is what lets several graphs share
  // one backward pass worth of accumulation).
  void backward(NodeId loss);

  int node_count() const;

 private:
  struct Node;
  NodeId push(Node n);
  Node& at(NodeId id);
  const Node& cat(NodeId id) const;
  std::vector<Node> nodes_;
};

// Compares backward() against central finite differences over every parameter
// scalar; returns the max relative error. build must construct a fresh loss
// on the current parameter values each call.
double grad_check(ParamStore& params, const std::function<Graph::NodeId(Graph&)>& build,
                  double eps = 1e-5);

}  // namespace pdtb
