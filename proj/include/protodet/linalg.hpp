#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace protodet::linalg {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

class SvdNotConverged : public std::runtime_error {
 public:
  explicit SvdNotConverged(int sweeps)
      : std::runtime_error("one-sided Jacobi SVD did not converge after " + std::to_string(sweeps) + " sweeps"),
        sweeps_(sweeps) {}
  int sweeps() const { return sweeps_; }

 private:
  int sweeps_;
};

/// Thin factorization M = U diag(sigma) V^T of a C x D matrix with
/// r = min(C, D): U is C x r, sigma has r entries sorted non-increasing,
/// V is D x r. Both U and V have orthonormal columns.
template <typename Scalar>
struct SvdFactors {
  Matrix<Scalar> U;
  Vector<Scalar> sigma;
  Matrix<Scalar> V;
  int sweeps = 0;

  Matrix<Scalar> reconstruct() const { return U * sigma.asDiagonal() * V.transpose(); }
};

struct JacobiOptions {
  double tolerance = 1e-12;
  int max_sweeps = 60;
};

namespace detail {

// Fills columns flagged in `missing` so that Q gets orthonormal columns.
// Candidates are canonical basis vectors, tried in order.
template <typename Scalar>
void complete_orthonormal(Matrix<Scalar>& Q, const std::vector<bool>& missing) {
  const Eigen::Index n = Q.rows();
  Eigen::Index next_basis = 0;
  for (Eigen::Index k = 0; k < Q.cols(); ++k) {
    if (!missing[static_cast<std::size_t>(k)]) continue;
    while (next_basis < n) {
      Vector<Scalar> v = Vector<Scalar>::Unit(n, next_basis++);
      // Two Gram-Schmidt passes against every column already in place.
      for (int pass = 0; pass < 2; ++pass) {
        for (Eigen::Index j = 0; j < Q.cols(); ++j) {
          if (j == k || (missing[static_cast<std::size_t>(j)] && j > k)) continue;
          v -= Q.col(j).dot(v) * Q.col(j);
        }
      }
      const Scalar norm = v.norm();
      if (norm > Scalar(1e-6)) {
        Q.col(k) = v / norm;
        break;
      }
    }
  }
}

// Orthogonalizes the columns of A (m x n, m >= n) in place and accumulates
// the rotations into J (n x n). Returns the sweep count.
template <typename Scalar>
int hestenes_jacobi(Matrix<Scalar>& A, Matrix<Scalar>& J, const JacobiOptions& opts) {
  const Eigen::Index n = A.cols();
  J = Matrix<Scalar>::Identity(n, n);
  const Scalar frob2 = A.squaredNorm();
  // Columns below this squared norm are numerically zero and never rotated.
  const Scalar negligible = frob2 * Scalar(1e-30) + std::numeric_limits<Scalar>::min();
  // float dot products cannot resolve correlations much below m * eps
  const Scalar tol = std::max(Scalar(opts.tolerance), Scalar(4 * A.rows()) * std::numeric_limits<Scalar>::epsilon());
  for (int sweep = 1; sweep <= opts.max_sweeps; ++sweep) {
    bool rotated = false;
    for (Eigen::Index i = 0; i + 1 < n; ++i) {
      for (Eigen::Index j = i + 1; j < n; ++j) {
        const Scalar alpha = A.col(i).squaredNorm();
        const Scalar beta = A.col(j).squaredNorm();
        if (alpha <= negligible || beta <= negligible) continue;
        const Scalar gamma = A.col(i).dot(A.col(j));
        if (std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const Scalar zeta = (beta - alpha) / (Scalar(2) * gamma);
        const Scalar t = (zeta >= 0 ? Scalar(1) : Scalar(-1)) / (std::abs(zeta) + std::sqrt(Scalar(1) + zeta * zeta));
        const Scalar c = Scalar(1) / std::sqrt(Scalar(1) + t * t);
        const Scalar s = c * t;
        for (Eigen::Index r = 0; r < A.rows(); ++r) {
          const Scalar ai = A(r, i);
          const Scalar aj = A(r, j);
          A(r, i) = c * ai - s * aj;
          A(r, j) = s * ai + c * aj;
        }
        for (Eigen::Index r = 0; r < n; ++r) {
          const Scalar ji = J(r, i);
          const Scalar jj = J(r, j);
          J(r, i) = c * ji - s * jj;
          J(r, j) = s * ji + c * jj;
        }
      }
    }
    if (!rotated) return sweep;
  }
  throw SvdNotConverged(opts.max_sweeps);
}

}  // namespace detail

/// Thin SVD by one-sided (Hestenes) Jacobi rotations. Converged when every
/// normalized column correlation is below `opts.tolerance`.
template <typename Derived>
SvdFactors<typename Derived::Scalar> svd(const Eigen::MatrixBase<Derived>& M, const JacobiOptions& opts = {}) {
  using Scalar = typename Derived::Scalar;
  if (M.rows() < 1 || M.cols() < 1) throw std::invalid_argument("svd: empty matrix");
  if (!M.allFinite()) throw std::domain_error("svd: non-finite entry");

  const bool wide = M.rows() <= M.cols();
  // Work on a tall matrix whose columns get orthogonalized.
  Matrix<Scalar> A = wide ? Matrix<Scalar>(M.transpose()) : Matrix<Scalar>(M);
  Matrix<Scalar> J;
  SvdFactors<Scalar> out;
  out.sweeps = detail::hestenes_jacobi(A, J, opts);

  const Eigen::Index r = A.cols();
  Vector<Scalar> sigma = A.colwise().norm().transpose();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(r));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return sigma[a] > sigma[b]; });

  const Scalar smax = r > 0 ? sigma.maxCoeff() : Scalar(0);
  const Scalar rank_tol = std::max(smax, Scalar(1)) * Scalar(A.rows()) * std::numeric_limits<Scalar>::epsilon();

  Matrix<Scalar> W(A.rows(), r);
  Matrix<Scalar> Jsorted(r, r);
  out.sigma.resize(r);
  std::vector<bool> missing(static_cast<std::size_t>(r), false);
  for (Eigen::Index k = 0; k < r; ++k) {
    const Eigen::Index src = order[static_cast<std::size_t>(k)];
    out.sigma[k] = sigma[src];
    Jsorted.col(k) = J.col(src);
    if (sigma[src] > rank_tol) {
      W.col(k) = A.col(src) / sigma[src];
    } else {
      W.col(k).setZero();
      missing[static_cast<std::size_t>(k)] = true;
    }
  }
  detail::complete_orthonormal(W, missing);

  if (wide) {
    out.U = std::move(Jsorted);
    out.V = std::move(W);
  } else {
    out.U = std::move(W);
    out.V = std::move(Jsorted);
  }
  return out;
}

/// ||M - U S V^T||_F / max(||M||_F, 1e-12)
template <typename Derived>
double svd_reconstruction_error(const Eigen::MatrixBase<Derived>& M,
                                const SvdFactors<typename Derived::Scalar>& f) {
  const double num = static_cast<double>((M - f.reconstruct()).norm());
  return num / std::max(static_cast<double>(M.norm()), 1e-12);
}

/// max |Q^T Q - I| entry, used for the orthogonality contracts.
template <typename Scalar>
double orthogonality_residual(const Matrix<Scalar>& Q) {
  const Matrix<Scalar> G = Q.transpose() * Q - Matrix<Scalar>::Identity(Q.cols(), Q.cols());
  return G.size() == 0 ? 0.0 : static_cast<double>(G.cwiseAbs().maxCoeff());
}

}  // namespace protodet::linalg
