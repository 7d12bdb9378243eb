#pragma once

#include "m3/tensor.hpp"

#include <cmath>
#include <vector>

namespace m3 {

// Adam with bias correction over a fixed parameter list. Construct one
// instance per training phase: moment estimates always start at zero for
// the parameter set being optimized.
template <class S>
class Adam {
 public:
  struct Config {
    S lr = S(1e-3);
    S beta1 = S(0.9);
    S beta2 = S(0.999);
    S eps = S(1e-8);
  };

  explicit Adam(std::vector<Tensor<S>> params, Config cfg = {})
      : params_(std::move(params)), cfg_(cfg) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
      require(p.requires_grad(), "Adam: parameter '" + std::string(p.op()) +
                                     "' does not require grad");
      m_.push_back(Array<S>::Zero(p.size()));
      v_.push_back(Array<S>::Zero(p.size()));
    }
  }

  S lr() const { return cfg_.lr; }
  int64_t step_count() const { return t_; }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  // One update from the gradients currently stored on the parameters. A
  // parameter whose gradient has been zero at every step of this phase has
  // zero moments and is left bit-for-bit unchanged; a non-finite gradient
  // is a hard error.
  void step() {
    ++t_;
    const S bc1 = S(1) - std::pow(cfg_.beta1, S(t_));
    const S bc2 = S(1) - std::pow(cfg_.beta2, S(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const Array<S>& g = params_[i].grad();
      require(g.allFinite(), "Adam: non-finite gradient for parameter " + std::to_string(i));
      m_[i] = cfg_.beta1 * m_[i] + (S(1) - cfg_.beta1) * g;
      v_[i] = cfg_.beta2 * v_[i] + (S(1) - cfg_.beta2) * g.square();
      Array<S> mhat = m_[i] / bc1;
      Array<S> vhat = v_[i] / bc2;
      params_[i].value() -= cfg_.lr * mhat / (vhat.sqrt() + cfg_.eps);
    }
  }

 private:
  std::vector<Tensor<S>> params_;
  Config cfg_;
  std::vector<Array<S>> m_, v_;
  int64_t t_ = 0;
};

}  // namespace m3
