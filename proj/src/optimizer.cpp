#include "pdtb/optimizer.hpp"

#include <cmath>

namespace pdtb {

Adam::Adam(ParamStore& store, AdamConfig cfg) : store_(&store), cfg_(cfg) {
  for (const auto& p : store.all()) {
    m_.push_back(DenseArray::zeros(p->value.shape()));
    v_.push_back(DenseArray::zeros(p->value.shape()));
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  size_t idx = 0;
  for (const auto& p : store_->all()) {
    DenseArray& m = m_[idx];
    DenseArray& v = v_[idx];
    ++idx;
    const bool decay = cfg_.weight_decay > 0.0 && p->value.ndim() >= 2;
    for (std::int64_t i = 0; i < p->value.size(); ++i) {
      const double g = p->grad[i];
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      double upd = mhat / (std::sqrt(vhat) + cfg_.eps);
      if (decay) upd += cfg_.weight_decay * p->value[i];
      p->value[i] -= cfg_.lr * upd;
    }
  }
}

void sgd_step(ParamStore& store, double lr) {
  for (const auto& p : store.all()) {
    for (std::int64_t i = 0; i < p->value.size(); ++i) {
      p->value[i] -= lr * p->grad[i];
    }
  }
}

}  // namespace pdtb
