#pragma once

#include <optional>
#include <vector>

#include "dacm/tensor.hpp"

namespace dacm {

// Lower-triangular Cholesky factor of a symmetric positive-definite matrix,
// plus the diagonal jitter that had to be added to get there.
struct CholeskyFactor {
  int n = 0;
  std::vector<double> lower;  // row-major n x n, upper part zero
  double jitter = 0.0;        // added to every diagonal entry before factoring

  // Solves (L L^T) x = b.
  std::vector<double> solve(const std::vector<double>& b) const;
  // log det(L L^T) = 2 sum log L_ii
  double log_det() const;
};

// Plain Cholesky; nullopt if a non-positive pivot shows up.
std::optional<CholeskyFactor> cholesky(const Tensor& A);

// Jitter policy: on failure add 1e-8 * trace(A)/n to the diagonal and retry,
// up to 3 retries with x10 growth.  Throws NumericalError when all fail.
CholeskyFactor cholesky_with_jitter(const Tensor& A);

// C = A * B for row-major rank-2 tensors.
Tensor matmul(const Tensor& A, const Tensor& B);

}  // namespace dacm
