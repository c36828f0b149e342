#pragma once

// Adam with bias correction, one moment pair per parameter tensor.

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "bridge/tensor.hpp"

namespace bridge {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Adam {
 public:
  Adam() = default;
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  std::uint64_t steps() const { return step_; }
  std::vector<Matrix>& first_moments() { return m_; }
  std::vector<Matrix>& second_moments() { return v_; }
  const std::vector<Matrix>& first_moments() const { return m_; }
  const std::vector<Matrix>& second_moments() const { return v_; }
  void set_steps(std::uint64_t s) { step_ = s; }

  // Applies one update to every parameter using its grad; grads are left untouched.
  void step(std::span<Param* const> params) {
    if (m_.empty()) {
      for (const Param* p : params) {
        m_.emplace_back(p->value.rows, p->value.cols);
        v_.emplace_back(p->value.rows, p->value.cols);
      }
    }
    if (m_.size() != params.size()) throw std::logic_error("Adam: parameter list changed between steps");
    ++step_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      Param& p = *params[k];
      if (!p.grad.same_shape(p.value)) continue;
      Matrix& m = m_[k];
      Matrix& v = v_[k];
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = p.grad.data[i];
        m.data[i] = cfg_.beta1 * m.data[i] + (1.0 - cfg_.beta1) * g;
        v.data[i] = cfg_.beta2 * v.data[i] + (1.0 - cfg_.beta2) * g * g;
        const double mh = m.data[i] / c1;
        const double vh = v.data[i] / c2;
        p.value.data[i] -= cfg_.learning_rate * mh / (std::sqrt(vh) + cfg_.epsilon);
      }
    }
  }

 private:
  AdamConfig cfg_;
  std::uint64_t step_ = 0;
  std::vector<Matrix> m_, v_;
};

}  // namespace bridge
