#include "clipo/optim.hpp"

#include <cmath>
#include <string>

#include "clipo/error.hpp"

namespace clipo {

void AdamW::step(const std::vector<Tensor*>& params) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->has_grad()) {
      throw ContractError("AdamW: parameter " + std::to_string(i) + " has no gradient");
    }
  }
  if (m_.empty()) {
    for (const Tensor* p : params) {
      m_.emplace_back(p->shape());
      v_.emplace_back(p->shape());
    }
  }
  if (m_.size() != params.size()) throw ContractError("AdamW: parameter list changed size");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (m_[i].shape() != params[i]->shape())
      throw DimensionError("AdamW: moment shape mismatch for parameter " + std::to_string(i));
  }

  ++step_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  const double lr = cfg_.learning_rate;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    auto g = p.grad();
    auto m = m_[i].data();
    auto v = v_[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = b1 * m[j] + (1.0 - b1) * g[j];
      v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
      // With beta = 0 the bias corrections are exactly 1.
      const double mhat = bc1 > 0.0 ? m[j] / bc1 : m[j];
      const double vhat = bc2 > 0.0 ? v[j] / bc2 : v[j];
      p[j] -= lr * (mhat / (std::sqrt(vhat) + cfg_.epsilon) + cfg_.weight_decay * p[j]);
    }
  }
}

void AdamW::restore(std::uint64_t step, std::vector<Tensor> m, std::vector<Tensor> v) {
  if (m.size() != v.size()) throw ContractError("AdamW::restore: moment lists differ in length");
  step_ = step;
  m_ = std::move(m);
  v_ = std::move(v);
}

double clip_grad_norm(const std::vector<Tensor*>& params, double max_norm) {
  double ss = 0.0;
  for (const Tensor* p : params)
    for (double g : p->grad()) ss += g * g;
  const double norm = std::sqrt(ss);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (Tensor* p : params)
      for (double& g : p->grad()) g *= s;
  }
  return norm;
}

}  // namespace clipo
