#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "dbconformer/tensor.hpp"

namespace dbc {

/// Adam moments for a fixed list of parameters.
struct AdamState {
  std::vector<Buffer> m;
  std::vector<Buffer> v;
  std::size_t step = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  AdamState() = default;
  AdamState(std::span<const Tensor> params, double learning_rate) : lr(learning_rate) {
    for (const auto& p : params) {
      m.emplace_back(p.size(), 0.0);
      v.emplace_back(p.size(), 0.0);
    }
  }
};

/// One bias-corrected Adam update (no weight decay) using explicit gradients.
inline void adam_step(std::span<Tensor> params, std::span<const std::span<const double>> grads, AdamState& state) {
  if (params.size() != state.m.size() || grads.size() != params.size()) {
    throw DimensionError("adam_step: " + std::to_string(params.size()) + " parameters, " +
                         std::to_string(grads.size()) + " gradients, state for " + std::to_string(state.m.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].size() != state.m[i].size() || grads[i].size() != params[i].size()) {
      throw DimensionError("adam_step: parameter " + std::to_string(i) + " of shape " +
                           to_string(params[i].shape()) + " does not match its gradient/moment buffers");
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = state.m[i];
    auto& v = state.v[i];
    auto p = params[i].data();
    const auto g = grads[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      p[j] -= state.lr * mhat / (std::sqrt(vhat) + state.epsilon);
    }
  }
}

/// Adam update from the parameters' own gradient buffers (absent = zero).
inline void adam_step(std::span<Tensor> params, AdamState& state) {
  std::vector<Buffer> zeros;
  std::vector<std::span<const double>> grads;
  grads.reserve(params.size());
  for (auto& p : params) {
    if (p.has_grad()) {
      grads.emplace_back(p.grad());
    } else {
      zeros.emplace_back(p.size(), 0.0);
      grads.emplace_back(zeros.back());
    }
  }
  // `zeros` may reallocate while filling; rebuild spans pointing at stable storage.
  std::size_t z = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) grads[i] = zeros[z++];
  }
  adam_step(params, grads, state);
}

}  // namespace dbc
