#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dacm/gradcheck.hpp"
#include "dacm/kernels.hpp"
#include "dacm/linalg.hpp"
#include "dacm/rng.hpp"
#include "test_support.hpp"

using namespace dacm;

namespace {

KernelHyperparams params_with(double log_out, std::vector<double> log_ls, double log_noise,
                              double log_v) {
  KernelHyperparams p;
  p.log_output_scale = log_out;
  p.log_lengthscales = std::move(log_ls);
  p.log_noise = log_noise;
  p.log_linear_variance = log_v;
  return p;
}

}  // namespace

TEST_CASE("rbf at zero displacement is the output scale") {
  KernelHyperparams p = KernelHyperparams::init(2);
  std::vector<double> x = {0.3, 0.7};
  CHECK(eval_kernel(KernelKind::RbfArd, p, x, x) == doctest::Approx(1.0).epsilon(1e-15));
  p.log_lengthscales = {2.0, -1.3};  // any lengthscales
  CHECK(eval_kernel(KernelKind::RbfArd, p, x, x) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("linear kernel on orthogonal vectors is zero") {
  KernelHyperparams p = KernelHyperparams::init(2);
  CHECK(eval_kernel(KernelKind::Linear, p, {1.0, 0.0}, {0.0, 1.0}) == 0.0);
}

TEST_CASE("rbf fixed-point value: sigma0^2=2, unit lengthscales") {
  // independent scalar evaluation: 2 * exp(-0.5 * 1) = 1.2130613194252668
  KernelHyperparams p = params_with(std::log(2.0), {0.0, 0.0}, std::log(0.1), 0.0);
  const double k = eval_kernel(KernelKind::RbfArd, p, {1.0, 0.0}, {0.0, 0.0});
  CHECK(k == doctest::Approx(1.2130613194252668).epsilon(1e-12));
}

TEST_CASE("dimension mismatch raises DimensionError") {
  KernelHyperparams p = KernelHyperparams::init(2);
  CHECK_THROWS_AS(eval_kernel(KernelKind::RbfArd, p, {1.0, 0.0, 0.0}, {0.0, 1.0, 0.0}),
                  DimensionError);
  CHECK_THROWS_AS(eval_kernel(KernelKind::Linear, p, {1.0}, {0.0, 1.0}), DimensionError);
}

TEST_CASE("single-point gram is the output scale; 2x2 gram matches entrywise loop") {
  KernelHyperparams p = params_with(std::log(1.7), {0.2}, std::log(0.1), 0.0);
  Tensor x({1, 1}, {0.4});
  Tensor g = gram_matrix(KernelKind::RbfArd, p, x, x);
  CHECK(g.at(0, 0) == doctest::Approx(1.7).epsilon(1e-15));

  Tensor a({2, 3}, {0.1, -0.4, 0.9, 0.5, 0.2, -0.2});
  Tensor b({2, 3}, {0.0, 0.3, -0.1, -0.7, 0.8, 0.6});
  KernelHyperparams p3 = params_with(0.3, {0.1, -0.2, 0.4}, std::log(0.1), -0.3);
  for (KernelKind kind : {KernelKind::Linear, KernelKind::RbfArd, KernelKind::Additive}) {
    Tensor g2 = gram_matrix(kind, p3, a, b);
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) {
        std::vector<double> xi(a.data() + i * 3, a.data() + i * 3 + 3);
        std::vector<double> yj(b.data() + j * 3, b.data() + j * 3 + 3);
        CHECK(g2.at(i, j) == doctest::Approx(eval_kernel(kind, p3, xi, yj)).epsilon(1e-15));
      }
  }
}

TEST_CASE("gram(X,X) is symmetric for random draws") {
  Rng rng(11);
  for (int draw = 0; draw < 100; ++draw) {
    const int n = 2 + rng.uniform_int(6);
    const int d = 1 + rng.uniform_int(4);
    Tensor x = oracle::random_tensor({n, d}, rng);
    KernelHyperparams p = KernelHyperparams::init(d);
    for (double& l : p.log_lengthscales) l = rng.uniform(-0.5, 0.5);
    p.log_output_scale = rng.uniform(-0.5, 0.5);
    const KernelKind kind =
        draw % 3 == 0 ? KernelKind::Linear
                      : (draw % 3 == 1 ? KernelKind::RbfArd : KernelKind::Additive);
    Tensor g = gram_matrix(kind, p, x, x);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) CHECK(g.at(i, j) == doctest::Approx(g.at(j, i)).epsilon(1e-12));
  }
}

TEST_CASE("pairwise symmetry of eval_kernel") {
  Rng rng(12);
  for (int draw = 0; draw < 100; ++draw) {
    const int d = 1 + rng.uniform_int(5);
    KernelHyperparams p = KernelHyperparams::init(d);
    for (double& l : p.log_lengthscales) l = rng.uniform(-1.0, 1.0);
    std::vector<double> x1(static_cast<std::size_t>(d)), x2(static_cast<std::size_t>(d));
    for (double& v : x1) v = rng.uniform(-1.0, 1.0);
    for (double& v : x2) v = rng.uniform(-1.0, 1.0);
    for (KernelKind kind : {KernelKind::Linear, KernelKind::RbfArd, KernelKind::Additive}) {
      const double a = eval_kernel(kind, p, x1, x2);
      const double b = eval_kernel(kind, p, x2, x1);
      CHECK(std::abs(a - b) <= 1e-12 * std::max(1.0, std::abs(a)));
    }
  }
}

TEST_CASE("additive kernel equals linear plus rbf") {
  Rng rng(13);
  for (int draw = 0; draw < 200; ++draw) {
    const int d = 1 + rng.uniform_int(5);
    KernelHyperparams p = KernelHyperparams::init(d);
    p.log_output_scale = rng.uniform(-1.0, 1.0);
    p.log_linear_variance = rng.uniform(-1.0, 1.0);
    for (double& l : p.log_lengthscales) l = rng.uniform(-1.0, 1.0);
    std::vector<double> x1(static_cast<std::size_t>(d)), x2(static_cast<std::size_t>(d));
    for (double& v : x1) v = rng.uniform(-1.0, 1.0);
    for (double& v : x2) v = rng.uniform(-1.0, 1.0);
    const double sum = eval_kernel(KernelKind::Linear, p, x1, x2) +
                       eval_kernel(KernelKind::RbfArd, p, x1, x2);
    CHECK(eval_kernel(KernelKind::Additive, p, x1, x2) ==
          doctest::Approx(sum).epsilon(1e-12));
  }
}

TEST_CASE("gram + noise is positive semidefinite across random draws") {
  Rng rng(14);
  for (int draw = 0; draw < 100; ++draw) {
    const int n = 2 + rng.uniform_int(31);  // N <= 32
    const int d = 1 + rng.uniform_int(4);
    Tensor x = oracle::random_tensor({n, d}, rng);
    KernelHyperparams p = KernelHyperparams::init(d);
    p.log_output_scale = rng.uniform(-1.0, 1.0);
    p.log_noise = rng.uniform(std::log(0.01), 0.0);
    for (double& l : p.log_lengthscales) l = rng.uniform(-1.0, 1.0);
    const KernelKind kind =
        draw % 3 == 0 ? KernelKind::Linear
                      : (draw % 3 == 1 ? KernelKind::RbfArd : KernelKind::Additive);
    Tensor k = gram_matrix(kind, p, x, x);
    const double noise = p.noise();
    for (int i = 0; i < n; ++i) k.at(i, i) += noise;

    CHECK_NOTHROW(cholesky_with_jitter(k));

    std::vector<std::vector<double>> dense(static_cast<std::size_t>(n),
                                           std::vector<double>(static_cast<std::size_t>(n)));
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) dense[i][j] = k.at(i, j);
    const std::vector<double> eig = oracle::symmetric_eigenvalues(dense);
    double smallest = eig[0];
    for (double e : eig) smallest = std::min(smallest, e);
    CHECK(smallest >= noise * (1.0 - 1e-6));
  }
}

TEST_CASE("analytic gradients: trivial cases") {
  KernelHyperparams p = params_with(std::log(2.5), {0.3, -0.4}, std::log(0.1), 0.7);
  std::vector<double> x = {0.2, -0.6};
  HyperGrad g = kernel_param_gradients(KernelKind::RbfArd, p, x, x);
  CHECK(g.d_log_output_scale == doctest::Approx(2.5).epsilon(1e-14));
  CHECK(g.d_log_lengthscales[0] == 0.0);
  CHECK(g.d_log_lengthscales[1] == 0.0);
  CHECK(g.d_log_noise == 0.0);
  CHECK(g.d_log_linear_variance == 0.0);

  std::vector<double> a = {0.5, 1.0}, b = {-0.25, 2.0};
  HyperGrad gl = kernel_param_gradients(KernelKind::Linear, p, a, b);
  const double v = std::exp(0.7);
  CHECK(gl.d_log_linear_variance ==
        doctest::Approx(v * (0.5 * -0.25 + 1.0 * 2.0)).epsilon(1e-14));
  CHECK(gl.d_log_output_scale == 0.0);
}

TEST_CASE("analytic gradients match finite differences over random draws") {
  gradcheck::Report report = gradcheck::check_kernels(20250810);
  REQUIRE(report.ops.size() == 1);
  CHECK(report.ops[0].configs >= 50);
  CHECK(report.ops[0].max_rel_err < 1e-6);
  CHECK(report.all_pass);
}

TEST_CASE("jitter policy rescues a rank-deficient gram matrix") {
  // duplicated points with zero noise make K singular
  Tensor x({2, 1}, {0.4, 0.4});
  KernelHyperparams p = KernelHyperparams::init(1);
  Tensor k = gram_matrix(KernelKind::RbfArd, p, x, x);
  CHECK(!cholesky(k).has_value());
  CholeskyFactor f = cholesky_with_jitter(k);
  CHECK(f.jitter > 0.0);
  CHECK(f.log_det() == f.log_det());  // finite
}
