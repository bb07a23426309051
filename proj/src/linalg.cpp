#include "dacm/linalg.hpp"

#include <cmath>

#include "dacm/errors.hpp"

namespace dacm {

std::vector<double> CholeskyFactor::solve(const std::vector<double>& b) const {
  if (static_cast<int>(b.size()) != n) throw DimensionError("solve rhs length mismatch");
  std::vector<double> x(b);
  // forward substitution L y = b
  for (int i = 0; i < n; ++i) {
    double s = x[i];
    const double* row = lower.data() + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < i; ++j) s -= row[j] * x[j];
    x[i] = s / row[i];
  }
  // back substitution L^T x = y
  for (int i = n - 1; i >= 0; --i) {
    double s = x[i];
    for (int j = i + 1; j < n; ++j) s -= lower[static_cast<std::size_t>(j) * n + i] * x[j];
    x[i] = s / lower[static_cast<std::size_t>(i) * n + i];
  }
  return x;
}

double CholeskyFactor::log_det() const {
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += std::log(lower[static_cast<std::size_t>(i) * n + i]);
  return 2.0 * s;
}

namespace {

std::optional<CholeskyFactor> cholesky_impl(const Tensor& A, double jitter) {
  const int n = A.dim(0);
  CholeskyFactor f;
  f.n = n;
  f.jitter = jitter;
  f.lower.assign(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j) {
      double s = A.at(i, j);
      if (i == j) s += jitter;
      const double* ri = f.lower.data() + static_cast<std::size_t>(i) * n;
      const double* rj = f.lower.data() + static_cast<std::size_t>(j) * n;
      for (int k = 0; k < j; ++k) s -= ri[k] * rj[k];
      if (i == j) {
        if (!(s > 0.0) || !std::isfinite(s)) return std::nullopt;
        f.lower[static_cast<std::size_t>(i) * n + j] = std::sqrt(s);
      } else {
        f.lower[static_cast<std::size_t>(i) * n + j] = s / rj[j];
      }
    }
  }
  return f;
}

}  // namespace

std::optional<CholeskyFactor> cholesky(const Tensor& A) {
  if (A.rank() != 2 || A.dim(0) != A.dim(1)) throw DimensionError("cholesky wants square matrix");
  return cholesky_impl(A, 0.0);
}

CholeskyFactor cholesky_with_jitter(const Tensor& A) {
  if (A.rank() != 2 || A.dim(0) != A.dim(1)) throw DimensionError("cholesky wants square matrix");
  const int n = A.dim(0);
  if (auto f = cholesky_impl(A, 0.0)) return *f;
  double trace = 0.0;
  for (int i = 0; i < n; ++i) trace += A.at(i, i);
  double jitter = 1e-8 * trace / n;
  for (int attempt = 0; attempt < 3; ++attempt, jitter *= 10.0) {
    if (auto f = cholesky_impl(A, jitter)) return *f;
  }
  throw NumericalError("cholesky failed after jitter retries");
}

Tensor matmul(const Tensor& A, const Tensor& B) {
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0))
    throw DimensionError("matmul shape mismatch " + A.dims_str() + " x " + B.dims_str());
  const int n = A.dim(0), k = A.dim(1), m = B.dim(1);
  Tensor C({n, m});
  for (int i = 0; i < n; ++i) {
    const double* a = A.data() + static_cast<std::int64_t>(i) * k;
    double* c = C.data() + static_cast<std::int64_t>(i) * m;
    for (int p = 0; p < k; ++p) {
      const double av = a[p];
      if (av == 0.0) continue;
      const double* b = B.data() + static_cast<std::int64_t>(p) * m;
      for (int j = 0; j < m; ++j) c[j] += av * b[j];
    }
  }
  return C;
}

}  // namespace dacm
