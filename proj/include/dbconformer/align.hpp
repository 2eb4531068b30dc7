#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "dbconformer/error.hpp"

namespace dbc {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
/// Read-only C×T view of one trial inside a larger buffer.
using TrialMap = Eigen::Map<const Matrix>;

namespace detail {

/// Adds X·Xᵀ into the lower triangle of acc, then mirrors it so acc stays exactly symmetric.
template <class Trial>
void add_outer(Matrix& acc, const Trial& x) {
  acc.selfadjointView<Eigen::Lower>().rankUpdate(x);
  acc.triangularView<Eigen::StrictlyUpper>() = acc.transpose();
}

}  // namespace detail

/// (1/n)·Σ Xᵢ·Xᵢᵀ over a range of C×T matrices (raw second moment, no centering).
template <class Range>
Matrix reference_covariance(const Range& trials) {
  auto it = std::begin(trials);
  if (it == std::end(trials)) throw EmptyInputError("reference_covariance: no trials");
  const auto C = it->rows();
  Matrix sum = Matrix::Zero(C, C);
  std::size_t n = 0;
  for (const auto& x : trials) {
    if (x.rows() != C) {
      throw DimensionError("reference_covariance: trial has " + std::to_string(x.rows()) + " channels, expected " +
                           std::to_string(C));
    }
    detail::add_outer(sum, x);
    ++n;
  }
  return sum / static_cast<double>(n);
}

/// Q·diag(1/sqrt(max(λ, epsilon)))·Qᵀ for symmetric m.
inline Matrix inverse_sqrt(const Matrix& m, double epsilon) {
  if (m.rows() != m.cols()) {
    throw DimensionError("inverse_sqrt: matrix is " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
  }
  const double scale = m.cwiseAbs().maxCoeff();
  const double asym = (m - m.transpose()).cwiseAbs().maxCoeff();
  if (asym > 1e-8 * std::max(scale, std::numeric_limits<double>::min())) {
    throw SymmetryError("inverse_sqrt: asymmetry " + std::to_string(asym) + " relative to magnitude " +
                        std::to_string(scale));
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m);
  if (eig.info() != Eigen::Success) throw Error("inverse_sqrt: eigendecomposition failed");
  const Eigen::VectorXd inv = eig.eigenvalues().cwiseMax(epsilon).cwiseSqrt().cwiseInverse();
  const Eigen::MatrixXd& q = eig.eigenvectors();
  Matrix out = q * inv.asDiagonal() * q.transpose();
  // Symmetrize away rounding from the two products.
  return 0.5 * (out + out.transpose());
}

/// Running reference covariance for Euclidean alignment.
class AlignState {
 public:
  static constexpr double kEpsilonScale = 1e-10;

  explicit AlignState(std::size_t channels) : sum_cov_(Matrix::Zero(channels, channels)) {}

  template <class Trial>
  static AlignState from_trials(std::size_t channels, const std::vector<Trial>& trials) {
    AlignState s(channels);
    for (const auto& t : trials) s.update(t);
    return s;
  }

  std::size_t channels() const { return static_cast<std::size_t>(sum_cov_.rows()); }
  std::size_t count() const { return n_; }
  const Matrix& sum_cov() const { return sum_cov_; }

  /// Absorbs X·Xᵀ of one trial and drops the cached inverse square root.
  /// `tag` is recorded for auditing which trials fed the reference.
  template <class Trial>
  void update(const Trial& x, std::optional<std::int64_t> tag = std::nullopt) {
    if (static_cast<std::size_t>(x.rows()) != channels()) {
      throw DimensionError("AlignState: trial has " + std::to_string(x.rows()) + " channels, state has " +
                           std::to_string(channels()));
    }
    detail::add_outer(sum_cov_, x);
    ++n_;
    cached_.reset();
    if (tag) absorbed_.push_back(*tag);
  }

  Matrix reference() const {
    require_nonempty();
    return sum_cov_ / static_cast<double>(n_);
  }

  /// Eigenvalue floor 1e-10·trace(R̄)/C.
  double epsilon() const {
    const double floor = kEpsilonScale * reference().trace() / static_cast<double>(channels());
    return floor > 0.0 ? floor : std::numeric_limits<double>::min();
  }

  const Matrix& inv_sqrt() const {
    require_nonempty();
    if (!cached_) cached_ = inverse_sqrt(reference(), epsilon());
    return *cached_;
  }

  bool has_cache() const { return cached_.has_value(); }
  const std::vector<std::int64_t>& absorbed_tags() const { return absorbed_; }

 private:
  void require_nonempty() const {
    if (n_ == 0) throw ContractError("AlignState: no trials absorbed yet");
  }

  Matrix sum_cov_;
  std::size_t n_ = 0;
  mutable std::optional<Matrix> cached_;
  std::vector<std::int64_t> absorbed_;
};

/// R̄^{-1/2}·X for one trial.
template <class Trial>
Matrix align(const Trial& x, const AlignState& state) {
  if (static_cast<std::size_t>(x.rows()) != state.channels()) {
    throw DimensionError("align: trial has " + std::to_string(x.rows()) + " channels, state has " +
                         std::to_string(state.channels()));
  }
  return state.inv_sqrt() * x;
}

template <class Trial>
std::vector<Matrix> align(const std::vector<Trial>& trials, const AlignState& state) {
  std::vector<Matrix> out;
  out.reserve(trials.size());
  for (const auto& t : trials) out.push_back(align(t, state));
  return out;
}

}  // namespace dbc
