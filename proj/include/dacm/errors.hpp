#pragma once

#include <stdexcept>
#include <string>

namespace dacm {

// Shape or channel-count disagreement between arguments.
struct DimensionError : std::runtime_error {
  explicit DimensionError(const std::string& what) : std::runtime_error(what) {}
};

// Factorization failure, non-finite values, or anything else that makes
// the linear algebra untrustworthy.
struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

// The Bernoulli sampler selected no cells.
struct EmptySampleError : std::runtime_error {
  explicit EmptySampleError(const std::string& what) : std::runtime_error(what) {}
};

// Malformed tensor file, manifest, or config text.
struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace dacm
