#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "dbconformer/rng.hpp"
#include "dbconformer/tensor.hpp"

namespace dbc::test {

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0, bool grad = true) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(-scale, scale);
  return t.set_requires_grad(grad);
}

struct FdErrors {
  double max_rel = 0.0;
  double max_abs = 0.0;
};

/// Central-difference oracle: max relative error (floor 1e-8) between the
/// tape gradient of scalar f and (f(x+h) - f(x-h)) / 2h over all inputs.
inline FdErrors fd_errors(const std::function<Tensor()>& f, std::vector<Tensor> inputs, double h) {
  for (auto& t : inputs) t.zero_grad();
  Graph g;
  Tensor y;
  {
    Graph::Scope s(g);
    y = f();
  }
  g.backward(y);
  FdErrors worst;
  for (auto& t : inputs) {
    std::vector<double> analytic(t.grad().begin(), t.grad().end());
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double keep = t[i];
      t[i] = keep + h;
      const double fp = f().item();
      t[i] = keep - h;
      const double fm = f().item();
      t[i] = keep;
      const double num = (fp - fm) / (2 * h);
      const double denom = std::max({std::abs(num), std::abs(analytic[i]), 1e-8});
      worst.max_rel = std::max(worst.max_rel, std::abs(num - analytic[i]) / denom);
      worst.max_abs = std::max({worst.max_abs, std::abs(num), std::abs(analytic[i])});
    }
  }
  return worst;
}

inline double fd_max_rel_error(const std::function<Tensor()>& f, std::vector<Tensor> inputs, double h) {
  return fd_errors(f, std::move(inputs), h).max_rel;
}

/// Largest gradient magnitude, analytic or numeric; for blocks whose exact gradient is zero.
inline double fd_max_magnitude(const std::function<Tensor()>& f, std::vector<Tensor> inputs, double h) {
  return fd_errors(f, std::move(inputs), h).max_abs;
}

}  // namespace dbc::test
