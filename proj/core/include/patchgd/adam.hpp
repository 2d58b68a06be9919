#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "patchgd/errors.hpp"
#include "patchgd/tensor.hpp"

namespace patchgd {

template <typename S>
struct NamedParam {
  std::string name;
  Tensor<S> tensor;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One bias-corrected Adam update on a single parameter buffer.
// `t` is the post-increment step count (>= 1).
template <typename S>
void adam_step(std::span<S> param, std::span<const S> grad, std::span<S> m,
               std::span<S> v, std::int64_t t, double lr, const AdamConfig& cfg,
               const std::string& param_name) {
  if (grad.size() != param.size() || m.size() != param.size() ||
      v.size() != param.size()) {
    throw ShapeError("adam_step: buffer sizes disagree for parameter '" +
                     param_name + "'");
  }
  if (lr < 0) throw ValueError("adam_step: negative learning rate");
  for (const S g : grad) {
    if (!std::isfinite(static_cast<double>(g))) {
      throw TrainError("adam_step: non-finite gradient for parameter '" +
                       param_name + "'");
    }
  }
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = static_cast<double>(grad[i]);
    const double mi = cfg.beta1 * static_cast<double>(m[i]) + (1.0 - cfg.beta1) * g;
    const double vi = cfg.beta2 * static_cast<double>(v[i]) + (1.0 - cfg.beta2) * g * g;
    m[i] = static_cast<S>(mi);
    v[i] = static_cast<S>(vi);
    const double m_hat = mi / bc1;
    const double v_hat = vi / bc2;
    param[i] = static_cast<S>(static_cast<double>(param[i]) -
                              lr * m_hat / (std::sqrt(v_hat) + cfg.eps));
  }
}

// Adam over a fixed parameter list. Moment buffers and the shared step
// counter are exposed for checkpointing.
template <typename S>
class Adam {
 public:
  Adam() = default;
  explicit Adam(std::vector<NamedParam<S>> params, AdamConfig cfg = {})
      : params_(std::move(params)), cfg_(cfg) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(params_[i].tensor.size(), S(0));
      v_[i].assign(params_[i].tensor.size(), S(0));
    }
  }

  // Applies one update from explicit gradient buffers (parameter order).
  void step(double lr, const std::vector<std::vector<S>>& grads) {
    if (grads.size() != params_.size()) {
      throw ShapeError("Adam::step: got " + std::to_string(grads.size()) +
                       " gradient buffers for " + std::to_string(params_.size()) +
                       " parameters");
    }
    ++t_;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      adam_step<S>(params_[i].tensor.values_mut(), grads[i], m_[i], v_[i], t_, lr,
                   cfg_, params_[i].name);
    }
  }

  // Applies one update from the tensors' own grad buffers.
  void step_from_grads(double lr) {
    ++t_;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.tensor.has_grad()) {
        throw StateError("Adam::step_from_grads: no gradient for parameter '" +
                         p.name + "'");
      }
      adam_step<S>(p.tensor.values_mut(), p.tensor.grad(), m_[i], v_[i], t_, lr,
                   cfg_, p.name);
    }
  }

  std::int64_t step_count() const { return t_; }
  const AdamConfig& config() const { return cfg_; }
  const std::vector<NamedParam<S>>& params() const { return params_; }
  std::size_t param_count() const { return params_.size(); }

  std::span<const S> moment1(std::size_t i) const { return m_[i]; }
  std::span<const S> moment2(std::size_t i) const { return v_[i]; }

  // Checkpoint restore.
  void restore(std::int64_t t, std::vector<std::vector<S>> m,
               std::vector<std::vector<S>> v) {
    if (m.size() != params_.size() || v.size() != params_.size()) {
      throw ShapeError("Adam::restore: moment buffer count mismatch");
    }
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (m[i].size() != params_[i].tensor.size() ||
          v[i].size() != params_[i].tensor.size()) {
        throw ShapeError("Adam::restore: moment size mismatch for parameter '" +
                         params_[i].name + "'");
      }
    }
    t_ = t;
    m_ = std::move(m);
    v_ = std::move(v);
  }

 private:
  std::vector<NamedParam<S>> params_;
  AdamConfig cfg_;
  std::vector<std::vector<S>> m_, v_;
  std::int64_t t_ = 0;
};

}  // namespace patchgd
