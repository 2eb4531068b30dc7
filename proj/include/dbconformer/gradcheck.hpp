#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "dbconformer/tensor.hpp"

namespace dbc {

/// Relative error with the denominator floored at 1e-8.
inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

struct BlockGradError {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t elements = 0;
};

/// Compares reverse-mode gradients of scalar `f` w.r.t. every tensor in
/// `blocks` against central differences (f(x+h) - f(x-h)) / 2h, one block
/// report per tensor. `f` must read the tensors by handle so perturbations
/// are seen.
///
/// With several steps, each coordinate is scored at the step where the
/// difference quotient agrees best: large steps lose to curvature, small
/// steps to rounding, and which dominates varies by coordinate.
inline std::vector<BlockGradError> grad_check_blocks(const std::function<Tensor()>& f,
                                                     std::vector<std::pair<std::string, Tensor>> blocks,
                                                     const std::vector<double>& steps) {
  if (steps.empty()) throw ContractError("grad_check: no finite-difference step given");
  std::vector<bool> had_flag;
  for (auto& [name, t] : blocks) {
    had_flag.push_back(t.requires_grad());
    t.set_requires_grad(true);
    t.zero_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    Graph graph;
    Tensor y;
    {
      Graph::Scope scope(graph);
      y = f();
    }
    if (y.size() != 1) {
      throw ContractError("grad_check: function must be scalar-valued, got shape " + to_string(y.shape()));
    }
    graph.backward(y);
    for (auto& [name, t] : blocks) {
      auto g = t.grad();
      analytic.emplace_back(g.begin(), g.end());
    }
  }
  std::vector<BlockGradError> report;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    Tensor& t = blocks[b].second;
    BlockGradError e{blocks[b].first, 0.0, t.size()};
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double saved = t[i];
      double best = std::numeric_limits<double>::infinity();
      for (double h : steps) {
        t[i] = saved + h;
        const double fp = f().item();
        t[i] = saved - h;
        const double fm = f().item();
        t[i] = saved;
        best = std::min(best, relative_error(analytic[b][i], (fp - fm) / (2.0 * h)));
      }
      e.max_rel_error = std::max(e.max_rel_error, best);
    }
    report.push_back(std::move(e));
  }
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    blocks[b].second.set_requires_grad(had_flag[b]);
  }
  return report;
}

inline std::vector<BlockGradError> grad_check_blocks(const std::function<Tensor()>& f,
                                                     std::vector<std::pair<std::string, Tensor>> blocks, double h) {
  return grad_check_blocks(f, std::move(blocks), std::vector<double>{h});
}

/// Steps spanning [1e-5, 1e-4] used by the full-model check.
inline const std::vector<double> kModelCheckSteps{1e-4, 3e-5, 1e-5};

/// Max relative error between the autodiff gradient of scalar `f` at `x` and
/// central finite differences with step `h`.
inline double grad_check(const std::function<Tensor()>& f, Tensor x, double h = 1e-5) {
  return grad_check_blocks(f, {{"x", std::move(x)}}, h).front().max_rel_error;
}

}  // namespace dbc
