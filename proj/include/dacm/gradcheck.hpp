#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dacm/tensor.hpp"

namespace dacm::gradcheck {

// Central finite differences of a scalar function at the given point.
std::vector<double> central_diff(const std::function<double(const std::vector<double>&)>& f,
                                 std::vector<double> at, double step = 1e-5);

// max_i |a_i - b_i| / max(max|a|, max|b|, floor); one number per gradient block.
double rel_err(const std::vector<double>& analytic, const std::vector<double>& numeric,
               double floor = 1e-6);

struct OpReport {
  std::string op;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  int configs = 0;
  bool pass = false;
};

struct Report {
  std::vector<OpReport> ops;
  bool all_pass = true;

  void add(OpReport r) {
    all_pass = all_pass && r.pass;
    ops.push_back(std::move(r));
  }
};

// Analytic kernel hyperparameter gradients vs finite differences
// (tolerance 1e-6, 60 random draws across all kernel kinds).
Report check_kernels(std::uint64_t seed);

// Marginal log-likelihood gradients vs finite differences (tolerance 1e-5).
Report check_gp(std::uint64_t seed);

// offset_network, deformable_attention_2d, ddt_forward and sparse_conv4d
// parameter + input gradients vs finite differences (tolerance 1e-4,
// >= 20 configs each).  Random configs are redrawn when a sampling
// coordinate sits within finite-difference reach of a bilinear kink.
Report check_aggregation(std::uint64_t seed);

// Decoder gradients vs finite differences (tolerance 1e-4).
Report check_pipeline(std::uint64_t seed);

std::string to_text(const Report& report);

}  // namespace dacm::gradcheck
