#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "dacm/kernels.hpp"
#include "dacm/tensor.hpp"

namespace dacm {

// Binary tensor record: magic "DACM", version u8 (=1), rank u8 (<=6),
// dims as u32 little-endian, payload as f64 little-endian, row-major.
inline constexpr std::uint8_t kTensorFileVersion = 1;

void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);  // throws FormatError

void write_tensor_file(const std::string& path, const Tensor& t);
Tensor read_tensor_file(const std::string& path);

// A file may hold several consecutive records (e.g. gp-fit data is X then y).
void write_tensor_records(const std::string& path, const std::vector<Tensor>& ts);
std::vector<Tensor> read_tensor_records(const std::string& path);

// ---- checkpoints: text manifest plus a blob of tensor records --------------

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Writes <prefix>.manifest and <prefix>.tensors.
void save_checkpoint(const std::string& prefix, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_checkpoint(const std::string& prefix);

// ---- run configuration (line-oriented "key = value" text) ------------------

struct RunConfig {
  std::uint64_t seed = 42;
  KernelKind kernel = KernelKind::RbfArd;
  double lambda = 1.0;
  double epsilon = 1e-12;
  int heads = 4;
  int head_dim = 8;
  int ddt_layers = 2;          // 0 disables the DDT (sparse-conv-only baseline)
  double gp_learning_rate = 1e-2;
  double agg_learning_rate = 1e-3;
  int epochs = 50;
  int image_size = 32;
  std::vector<int> pyramid_resolutions = {16, 8, 4};
  std::vector<int> pyramid_channels = {8, 16, 32};
  int train_episodes = 200;
  int eval_episodes = 100;
  int shots = 1;
  int classes = 8;

  void validate() const;  // throws FormatError on nonsense values
};

RunConfig parse_run_config(const std::string& text);       // throws FormatError
RunConfig load_run_config(const std::string& path);
std::string run_config_to_text(const RunConfig& config);

// ---- kernel hyperparameter snapshots (same key=value format) ---------------

std::string hyperparams_to_text(KernelKind kind, const KernelHyperparams& p);
std::pair<KernelKind, KernelHyperparams> parse_hyperparams(const std::string& text);

// ---- PGM dumps --------------------------------------------------------------

// Min-max scaled 8-bit binary PGM (P5).  A constant map renders as all
// zeros (the same degenerate-range rule as the sampler).
void write_pgm(const std::string& path, const Tensor& map2d);

}  // namespace dacm
