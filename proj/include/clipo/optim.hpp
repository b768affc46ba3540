#pragma once

#include <cstdint>
#include <vector>

#include "clipo/tensor.hpp"

namespace clipo {

struct AdamWConfig {
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Decoupled-weight-decay Adam. Moment buffers are created on the first step
// and are kept in parameter order.
class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

  // theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta). Throws
  // ContractError when a parameter has no gradient.
  void step(const std::vector<Tensor*>& params);

  const AdamWConfig& config() const { return cfg_; }
  AdamWConfig& config() { return cfg_; }
  std::uint64_t steps() const { return step_; }

  // Raw state, used by checkpointing.
  std::vector<Tensor>& first_moments() { return m_; }
  std::vector<Tensor>& second_moments() { return v_; }
  const std::vector<Tensor>& first_moments() const { return m_; }
  const std::vector<Tensor>& second_moments() const { return v_; }
  void restore(std::uint64_t step, std::vector<Tensor> m, std::vector<Tensor> v);

 private:
  AdamWConfig cfg_;
  std::uint64_t step_ = 0;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
};

// Scales all gradients so their global L2 norm is at most max_norm. Returns
// the norm before clipping.
double clip_grad_norm(const std::vector<Tensor*>& params, double max_norm);

}  // namespace clipo
