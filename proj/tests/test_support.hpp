#pragma once

// Shared helpers and independent oracles for the test suites.  Everything
// here is deliberately written as plain loops, independent of the library's
// own linear algebra and attention paths.

#include <cmath>
#include <vector>

#include "dacm/rng.hpp"
#include "dacm/tensor.hpp"

namespace oracle {

inline dacm::Tensor random_tensor(std::vector<int> dims, dacm::Rng& rng, double lo = -1.0,
                                  double hi = 1.0) {
  dacm::Tensor t(std::move(dims));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

inline double max_abs_diff(const dacm::Tensor& a, const dacm::Tensor& b) {
  double m = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Gauss-Jordan solve of A x = b for a dense symmetric system (test-only
// oracle; the library uses Cholesky).
inline std::vector<double> dense_solve(std::vector<std::vector<double>> a,
                                       std::vector<double> b) {
  const int n = static_cast<int>(b.size());
  for (int col = 0; col < n; ++col) {
    int pivot = col;
    for (int r = col + 1; r < n; ++r)
      if (std::abs(a[r][col]) > std::abs(a[pivot][col])) pivot = r;
    std::swap(a[col], a[pivot]);
    std::swap(b[col], b[pivot]);
    const double d = a[col][col];
    for (int c = 0; c < n; ++c) a[col][c] /= d;
    b[col] /= d;
    for (int r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = a[r][col];
      if (f == 0.0) continue;
      for (int c = 0; c < n; ++c) a[r][c] -= f * a[col][c];
      b[r] -= f * b[col];
    }
  }
  return b;
}

// log|A| through an LU sweep (partial pivoting); assumes A is positive definite.
inline double dense_log_det(std::vector<std::vector<double>> a) {
  const int n = static_cast<int>(a.size());
  double log_det = 0.0;
  for (int col = 0; col < n; ++col) {
    int pivot = col;
    for (int r = col + 1; r < n; ++r)
      if (std::abs(a[r][col]) > std::abs(a[pivot][col])) pivot = r;
    std::swap(a[col], a[pivot]);
    log_det += std::log(std::abs(a[col][col]));
    for (int r = col + 1; r < n; ++r) {
      const double f = a[r][col] / a[col][col];
      for (int c = col; c < n; ++c) a[r][c] -= f * a[col][c];
    }
  }
  return log_det;
}

// Jacobi rotations; returns the eigenvalues of a symmetric matrix.
inline std::vector<double> symmetric_eigenvalues(std::vector<std::vector<double>> a) {
  const int n = static_cast<int>(a.size());
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) off += a[i][j] * a[i][j];
    if (off < 1e-24) break;
    for (int p = 0; p < n; ++p) {
      for (int q = p + 1; q < n; ++q) {
        if (std::abs(a[p][q]) < 1e-300) continue;
        const double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int k = 0; k < n; ++k) {
          const double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (int k = 0; k < n; ++k) {
          const double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
      }
    }
  }
  std::vector<double> eig(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) eig[static_cast<std::size_t>(i)] = a[i][i];
  return eig;
}

// Direct four-corner bilinear formula at a normalized coordinate with
// border clamping; mirrors the convention (-1,-1) = top-left.
inline double bilinear_at(const dacm::Tensor& grid, int ch, double py, double px) {
  const int h = grid.dim(1), w = grid.dim(2);
  auto axis = [](double p, int extent, int* lo, double* frac) {
    if (extent == 1) { *lo = 0; *frac = 0.0; return; }
    p = std::min(1.0, std::max(-1.0, p));
    double f = (p + 1.0) * 0.5 * (extent - 1);
    int l = static_cast<int>(std::floor(f));
    if (l > extent - 2) l = extent - 2;
    if (l < 0) l = 0;
    *lo = l;
    *frac = f - l;
  };
  int y0, x0;
  double ay, ax;
  axis(py, h, &y0, &ay);
  axis(px, w, &x0, &ax);
  const int y1 = h == 1 ? y0 : y0 + 1;
  const int x1 = w == 1 ? x0 : x0 + 1;
  return (1 - ay) * ((1 - ax) * grid.at(ch, y0, x0) + ax * grid.at(ch, y0, x1)) +
         ay * ((1 - ax) * grid.at(ch, y1, x0) + ax * grid.at(ch, y1, x1));
}

// Plain same-padded cross-correlation, the reference for conv2d.
inline dacm::Tensor conv2d_naive(const dacm::Tensor& x, const dacm::Tensor& w,
                                 const dacm::Tensor* bias) {
  const int ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  dacm::Tensor out({co, h, wd});
  for (int oc = 0; oc < co; ++oc)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < wd; ++xx) {
        double acc = bias ? (*bias)[oc] : 0.0;
        for (int ic = 0; ic < ci; ++ic)
          for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
              const int iy = y + ky - kh / 2, ix = xx + kx - kw / 2;
              if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
              acc += w.at(oc, ic, ky, kx) * x.at(ic, iy, ix);
            }
        out.at(oc, y, xx) = acc;
      }
  return out;
}

}  // namespace oracle
