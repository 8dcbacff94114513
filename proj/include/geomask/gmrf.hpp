#pragma once

#include <cmath>
#include <memory>
#include <string>

#include <Eigen/Core>
#include <Eigen/SparseCholesky>
#include <Eigen/SparseCore>

#include "error.hpp"
#include "rng.hpp"

namespace geomask {

using SpMat = Eigen::SparseMatrix<double>;
using SpMatRow = Eigen::SparseMatrix<double, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

// Copyable Cholesky factor kept for drawing from N(0, A^-1) after the
// owning solver moved on.
struct CholeskySnapshot {
  SpMat l;
  Eigen::PermutationMatrix<Eigen::Dynamic, Eigen::Dynamic, int> pinv;

  Eigen::Index rows() const { return l.rows(); }

  Vec sample_from(const Vec& z) const {
    Vec y = l.transpose().triangularView<Eigen::Upper>().solve(z);
    return pinv * y;
  }

  Vec sample(Rng& rng) const {
    Vec z(l.rows());
    for (Eigen::Index k = 0; k < l.rows(); ++k) z[k] = rng.normal();
    return sample_from(z);
  }
};

// Sparse Cholesky P A P^T = L L^T with the symbolic analysis cached so that
// repeated factorizations of matrices sharing one sparsity pattern only redo
// the numeric phase.
class SparseFactor {
public:
  SparseFactor() : llt_(std::make_unique<Solver>()) {}

  void analyze(const SpMat& a) {
    llt_->analyzePattern(a);
    nnz_ = a.nonZeros();
    rows_ = a.rows();
    analyzed_ = true;
  }

  // Numeric factorization; re-analyzes when the pattern size changed.
  bool factorize(const SpMat& a) {
    if (!analyzed_ || a.nonZeros() != nnz_ || a.rows() != rows_) analyze(a);
    llt_->factorize(a);
    ok_ = llt_->info() == Eigen::Success;
    if (ok_) {
      const auto& l = llt_->matrixL().nestedExpression();
      log_det_ = 0.0;
      for (Eigen::Index k = 0; k < l.outerSize(); ++k) {
        const double d = l.valuePtr()[l.outerIndexPtr()[k]];
        if (!(d > 0.0) || !std::isfinite(d)) {
          ok_ = false;
          break;
        }
        log_det_ += 2.0 * std::log(d);
      }
    }
    return ok_;
  }

  bool ok() const { return ok_; }
  double log_det() const { return log_det_; }
  Eigen::Index rows() const { return rows_; }

  Vec solve(const Vec& b) const { return llt_->solve(b); }

  // x ~ N(0, A^-1) given standard normal z: x = P^-1 L^-T z.
  Vec sample_from(const Vec& z) const {
    Vec y = llt_->matrixU().solve(z);
    return llt_->permutationPinv() * y;
  }

  CholeskySnapshot snapshot() const {
    return {SpMat(llt_->matrixL().nestedExpression()), llt_->permutationPinv()};
  }

  Vec sample(Rng& rng) const {
    Vec z(rows_);
    for (Eigen::Index k = 0; k < rows_; ++k) z[k] = rng.normal();
    return sample_from(z);
  }

private:
  using Solver = Eigen::SimplicialLLT<SpMat, Eigen::Lower, Eigen::AMDOrdering<int>>;
  std::unique_ptr<Solver> llt_;
  Eigen::Index nnz_ = -1;
  Eigen::Index rows_ = 0;
  bool analyzed_ = false;
  bool ok_ = false;
  double log_det_ = 0.0;
};

}  // namespace geomask
