#include <gtest/gtest.h>

#include <Eigen/QR>
#include <cmath>
#include <vector>

#include "dbconformer/align.hpp"
#include "dbconformer/rng.hpp"

using namespace dbc;

namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.normal();
  return m;
}

std::vector<Matrix> random_trials(std::size_t n, Eigen::Index c, Eigen::Index t, Rng& rng) {
  std::vector<Matrix> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(random_matrix(c, t, rng));
  return out;
}

Matrix random_orthogonal(Eigen::Index n, Rng& rng) {
  Eigen::HouseholderQR<Matrix> qr(random_matrix(n, n, rng));
  return qr.householderQ();
}

Matrix random_spd(Eigen::Index n, Rng& rng) {
  Matrix a = random_matrix(n, n, rng);
  Matrix m = a * a.transpose() + Matrix::Identity(n, n);
  return 0.5 * (m + m.transpose());
}

double rel_frobenius(const Matrix& a, const Matrix& b) { return (a - b).norm() / b.norm(); }

/// Aligns by explicit eigendecomposition, scaling and multiplication, one element at a time.
Matrix explicit_align(const Matrix& x, const Matrix& ref) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(ref);
  const auto& q = eig.eigenvectors();
  const auto& lam = eig.eigenvalues();
  const Eigen::Index C = ref.rows();
  Matrix r = Matrix::Zero(C, C);
  for (Eigen::Index i = 0; i < C; ++i)
    for (Eigen::Index j = 0; j < C; ++j)
      for (Eigen::Index k = 0; k < C; ++k) r(i, j) += q(i, k) * q(j, k) / std::sqrt(lam[k]);
  Matrix out = Matrix::Zero(C, x.cols());
  for (Eigen::Index i = 0; i < C; ++i)
    for (Eigen::Index t = 0; t < x.cols(); ++t)
      for (Eigen::Index k = 0; k < C; ++k) out(i, t) += r(i, k) * x(k, t);
  return out;
}

}  // namespace

TEST(ReferenceCovariance, IdentityTrial) {
  // Rows orthonormal: X·Xᵀ = I.
  Matrix x = Matrix::Zero(2, 4);
  x(0, 0) = 1.0;
  x(1, 3) = 1.0;
  EXPECT_EQ(reference_covariance(std::vector<Matrix>{x}), Matrix::Identity(2, 2));
}

TEST(ReferenceCovariance, SignInvariance) {
  Rng rng(1);
  Matrix x = random_matrix(3, 10, rng);
  Matrix neg = -x;
  Matrix ref = reference_covariance(std::vector<Matrix>{x, neg});
  EXPECT_LT((ref - x * x.transpose()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ReferenceCovariance, MatchesLoopSummation) {
  Rng rng(2);
  auto trials = random_trials(3, 2, 8, rng);
  Matrix oracle = Matrix::Zero(2, 2);
  for (const auto& x : trials)
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j)
        for (int t = 0; t < 8; ++t) oracle(i, j) += x(i, t) * x(j, t);
  oracle /= 3.0;
  EXPECT_LT((reference_covariance(trials) - oracle).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ReferenceCovariance, ExactlySymmetric) {
  Rng rng(3);
  Matrix ref = reference_covariance(random_trials(7, 5, 33, rng));
  EXPECT_EQ(ref, ref.transpose());
}

TEST(ReferenceCovariance, Errors) {
  EXPECT_THROW(reference_covariance(std::vector<Matrix>{}), EmptyInputError);
  Rng rng(4);
  std::vector<Matrix> mixed{random_matrix(2, 5, rng), random_matrix(3, 5, rng)};
  EXPECT_THROW(reference_covariance(mixed), DimensionError);
}

TEST(InverseSqrt, IdentityAndDiagonal) {
  EXPECT_LT((inverse_sqrt(Matrix::Identity(3, 3), 1e-12) - Matrix::Identity(3, 3)).norm(), 1e-15);
  Matrix d = Matrix::Zero(2, 2);
  d(0, 0) = 4.0;
  d(1, 1) = 9.0;
  Matrix r = inverse_sqrt(d, 1e-12);
  EXPECT_NEAR(r(0, 0), 0.5, 1e-15);
  EXPECT_NEAR(r(1, 1), 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(r(0, 1), 0.0, 1e-15);
  EXPECT_NEAR(r(1, 0), 0.0, 1e-15);
}

TEST(InverseSqrt, ReconstructsIdentity) {
  Rng rng(5);
  for (int rep = 0; rep < 10; ++rep) {
    Matrix m = random_spd(4, rng);
    Matrix r = inverse_sqrt(m, 1e-12);
    EXPECT_LT((r * m * r - Matrix::Identity(4, 4)).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_EQ(r, r.transpose());
  }
}

TEST(InverseSqrt, OrthogonalConjugationInvariance) {
  Rng rng(6);
  for (int rep = 0; rep < 20; ++rep) {
    const Eigen::Index n = 2 + static_cast<Eigen::Index>(rep % 5);
    Matrix m = random_spd(n, rng);
    Matrix q = random_orthogonal(n, rng);
    Matrix conj = q * m * q.transpose();
    conj = 0.5 * (conj + conj.transpose());
    Matrix lhs = inverse_sqrt(conj, 1e-12);
    Matrix rhs = q * inverse_sqrt(m, 1e-12) * q.transpose();
    EXPECT_LT((lhs - rhs).cwiseAbs().maxCoeff(), 1e-8) << "n=" << n;
  }
}

TEST(InverseSqrt, EigenvalueFloor) {
  Matrix m = Matrix::Zero(2, 2);
  m(0, 0) = 1.0;  // second eigenvalue 0 gets floored
  Matrix r = inverse_sqrt(m, 1e-6);
  EXPECT_NEAR(r(1, 1), 1e3, 1e-9);
  EXPECT_NEAR(r(0, 0), 1.0, 1e-15);
}

TEST(InverseSqrt, RejectsAsymmetry) {
  Matrix m = Matrix::Identity(2, 2);
  m(0, 1) = 1e-3;
  EXPECT_THROW(inverse_sqrt(m, 1e-12), SymmetryError);
  m(0, 1) = 1e-12;  // below tolerance
  EXPECT_NO_THROW(inverse_sqrt(m, 1e-12));
  EXPECT_THROW(inverse_sqrt(Matrix::Zero(2, 3), 1e-12), DimensionError);
}

TEST(Align, UnitReferenceLeavesTrialUnchanged) {
  Matrix x = Matrix::Zero(2, 3);
  x(0, 1) = 1.0;
  x(1, 2) = 1.0;
  AlignState s(2);
  s.update(x);
  EXPECT_LT((align(x, s) - x).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Align, MatchesExplicitOracle) {
  Rng rng(7);
  auto trials = random_trials(2, 3, 16, rng);
  AlignState s = AlignState::from_trials(3, trials);
  for (const auto& x : trials) {
    EXPECT_LT((align(x, s) - explicit_align(x, s.reference())).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(Align, WhitensItsOwnReferenceSet) {
  Rng rng(8);
  for (Eigen::Index C : {3, 8, 22}) {
    for (Eigen::Index T : {64, 256}) {
      auto trials = random_trials(12, C, T, rng);
      // Correlate channels so whitening has work to do.
      Matrix mix = random_matrix(C, C, rng) + 3.0 * Matrix::Identity(C, C);
      for (auto& x : trials) x = mix * x;
      AlignState s = AlignState::from_trials(static_cast<std::size_t>(C), trials);
      Matrix cov = reference_covariance(align(trials, s));
      EXPECT_LT(rel_frobenius(cov, Matrix::Identity(C, C)), 1e-6) << "C=" << C << " T=" << T;
    }
  }
}

TEST(Align, ChannelMismatch) {
  AlignState s(3);
  Rng rng(9);
  EXPECT_THROW(s.update(random_matrix(2, 5, rng)), DimensionError);
  s.update(random_matrix(3, 5, rng));
  EXPECT_THROW(align(random_matrix(4, 5, rng), s), DimensionError);
}

TEST(AlignState, EmptyStateRefusesToAlign) {
  AlignState s(2);
  Matrix x = Matrix::Ones(2, 4);
  EXPECT_THROW(align(x, s), ContractError);
}

TEST(OnlineUpdate, ZeroTrialRescalesReference) {
  Rng rng(10);
  auto trials = random_trials(4, 3, 20, rng);
  AlignState s = AlignState::from_trials(3, trials);
  const Matrix ref = s.reference();
  const Matrix inv = s.inv_sqrt();
  s.update(Matrix::Zero(3, 20));
  const double n = 4.0;
  EXPECT_LT((s.reference() - ref * (n / (n + 1))).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((s.inv_sqrt() - inv * std::sqrt((n + 1) / n)).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(OnlineUpdate, IncrementalEqualsBatch) {
  Rng rng(11);
  auto trials = random_trials(100, 4, 32, rng);
  AlignState s(4);
  for (std::size_t k = 0; k < trials.size(); ++k) {
    s.update(trials[k]);
    std::vector<Matrix> prefix(trials.begin(), trials.begin() + static_cast<std::ptrdiff_t>(k + 1));
    const Matrix batch = reference_covariance(prefix);
    ASSERT_LT((s.reference() - batch).cwiseAbs().maxCoeff(), 1e-12 * std::max(1.0, batch.cwiseAbs().maxCoeff()))
        << "k=" << k + 1;
  }
}

TEST(OnlineUpdate, InvalidatesCacheAndChangesOutput) {
  Rng rng(12);
  auto trials = random_trials(3, 3, 16, rng);
  AlignState s = AlignState::from_trials(3, std::vector<Matrix>{trials[0], trials[1]});
  const Matrix before = align(trials[2], s);
  EXPECT_TRUE(s.has_cache());
  s.update(trials[2]);
  EXPECT_FALSE(s.has_cache());
  const Matrix after = align(trials[2], s);
  const Matrix oracle = explicit_align(trials[2], reference_covariance(trials));
  EXPECT_LT((after - oracle).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_GT((after - before).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(AlignState, CacheMatchesFreshInverse) {
  Rng rng(13);
  AlignState s = AlignState::from_trials(5, random_trials(6, 5, 40, rng));
  const Matrix& cached = s.inv_sqrt();
  EXPECT_LT((cached - inverse_sqrt(s.reference(), s.epsilon())).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(AlignState, SumCovStaysSymmetric) {
  Rng rng(14);
  AlignState s(6);
  for (int i = 0; i < 50; ++i) s.update(random_matrix(6, 17, rng));
  EXPECT_EQ(s.sum_cov(), s.sum_cov().transpose());
}

TEST(AlignState, RecordsTagsInUpdateOrder) {
  AlignState s(2);
  Matrix x = Matrix::Ones(2, 3);
  s.update(x, 7);
  s.update(x);
  s.update(x, 3);
  EXPECT_EQ(s.absorbed_tags(), (std::vector<std::int64_t>{7, 3}));
  EXPECT_EQ(s.count(), 3u);
}

TEST(AlignState, RankDeficientReferenceStaysFinite) {
  // One trial with more channels than samples: R̄ is singular.
  Rng rng(15);
  AlignState s(8);
  s.update(random_matrix(8, 3, rng));
  EXPECT_TRUE(s.inv_sqrt().allFinite());
  EXPECT_GT(s.epsilon(), 0.0);
}
