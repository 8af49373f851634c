#pragma once

#include <cstdint>
#include <vector>

#include "pdtb/autodiff.hpp"

namespace pdtb {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled; applied to rank>=2 parameters only
};

// Adaptive-moment optimizer with bias correction and decoupled weight decay.
// Owns one pair of moment accumulators per parameter, in store order.
class Adam {
 public:
  Adam(ParamStore& store, AdamConfig cfg);

  void step();  // consumes Parameter::grad
  std::int64_t steps() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  ParamStore* store_;
  AdamConfig cfg_;
  std::int64_t t_ = 0;
  std::vector<DenseArray> m_, v_;
};

// Plain full-batch gradient descent step.
void sgd_step(ParamStore& store, double lr);

}  // namespace pdtb
