#include "dacm/serialize.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "dacm/errors.hpp"

namespace dacm {

namespace {

void put_u32le(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32le(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw FormatError("truncated tensor header");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f64le(std::ostream& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 8);
}

double get_f64le(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw FormatError("truncated tensor payload");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::vector<int> parse_int_list(const std::string& s, const std::string& key) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) throw FormatError("empty list entry for " + key);
    try {
      out.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw FormatError("bad integer '" + item + "' for " + key);
    }
  }
  if (out.empty()) throw FormatError("empty list for " + key);
  return out;
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& t) {
  if (t.rank() > 6) throw FormatError("tensor rank > 6 not supported by the file format");
  out.write("DACM", 4);
  const unsigned char version = kTensorFileVersion;
  const unsigned char rank = static_cast<unsigned char>(t.rank());
  out.write(reinterpret_cast<const char*>(&version), 1);
  out.write(reinterpret_cast<const char*>(&rank), 1);
  for (int i = 0; i < t.rank(); ++i) put_u32le(out, static_cast<std::uint32_t>(t.dim(i)));
  for (std::int64_t i = 0; i < t.numel(); ++i) put_f64le(out, t[i]);
}

Tensor read_tensor(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in) throw FormatError("missing tensor magic");
  if (std::memcmp(magic, "DACM", 4) != 0) throw FormatError("bad tensor magic");
  unsigned char version = 0, rank = 0;
  in.read(reinterpret_cast<char*>(&version), 1);
  in.read(reinterpret_cast<char*>(&rank), 1);
  if (!in) throw FormatError("truncated tensor header");
  if (version != kTensorFileVersion)
    throw FormatError("unsupported tensor file version " + std::to_string(version));
  if (rank > 6) throw FormatError("tensor rank > 6");
  std::vector<int> dims(rank);
  std::int64_t numel = 1;
  for (int i = 0; i < rank; ++i) {
    const std::uint32_t d = get_u32le(in);
    if (d > (1u << 28)) throw FormatError("implausible tensor dim");
    dims[static_cast<std::size_t>(i)] = static_cast<int>(d);
    numel *= d;
    if (numel > (std::int64_t{1} << 31)) throw FormatError("implausible tensor size");
  }
  Tensor t(dims);
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = get_f64le(in);
  return t;
}

void write_tensor_file(const std::string& path, const Tensor& t) {
  write_tensor_records(path, {t});
}

Tensor read_tensor_file(const std::string& path) {
  std::vector<Tensor> ts = read_tensor_records(path);
  if (ts.size() != 1) throw FormatError("expected a single tensor record in " + path);
  return std::move(ts[0]);
}

void write_tensor_records(const std::string& path, const std::vector<Tensor>& ts) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  for (const Tensor& t : ts) write_tensor(out, t);
  if (!out) throw FormatError("write failed for " + path);
}

std::vector<Tensor> read_tensor_records(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  std::vector<Tensor> out;
  while (true) {
    in.peek();
    if (in.eof()) break;
    out.push_back(read_tensor(in));
  }
  if (out.empty()) throw FormatError("no tensor records in " + path);
  return out;
}

void save_checkpoint(const std::string& prefix, const std::vector<NamedTensor>& tensors) {
  std::ofstream manifest(prefix + ".manifest");
  if (!manifest) throw FormatError("cannot open " + prefix + ".manifest for writing");
  for (const NamedTensor& nt : tensors) {
    manifest << nt.name << " " << nt.tensor.rank();
    for (int i = 0; i < nt.tensor.rank(); ++i) manifest << " " << nt.tensor.dim(i);
    manifest << "\n";
  }
  std::ofstream blob(prefix + ".tensors", std::ios::binary);
  if (!blob) throw FormatError("cannot open " + prefix + ".tensors for writing");
  for (const NamedTensor& nt : tensors) write_tensor(blob, nt.tensor);
}

std::vector<NamedTensor> load_checkpoint(const std::string& prefix) {
  std::ifstream manifest(prefix + ".manifest");
  if (!manifest) throw FormatError("cannot open " + prefix + ".manifest");
  std::ifstream blob(prefix + ".tensors", std::ios::binary);
  if (!blob) throw FormatError("cannot open " + prefix + ".tensors");
  std::vector<NamedTensor> out;
  std::string line;
  while (std::getline(manifest, line)) {
    line = trim(line);
    if (line.empty()) continue;
    std::stringstream ss(line);
    NamedTensor nt;
    int rank = 0;
    if (!(ss >> nt.name >> rank) || rank < 0 || rank > 6)
      throw FormatError("bad manifest line: " + line);
    std::vector<int> dims(static_cast<std::size_t>(rank));
    for (int i = 0; i < rank; ++i)
      if (!(ss >> dims[static_cast<std::size_t>(i)]))
        throw FormatError("bad manifest line: " + line);
    nt.tensor = read_tensor(blob);
    if (nt.tensor.dims() != dims)
      throw FormatError("manifest/blob shape mismatch for " + nt.name);
    out.push_back(std::move(nt));
  }
  return out;
}

void RunConfig::validate() const {
  if (lambda < 0.0) throw FormatError("lambda must be >= 0");
  if (epsilon <= 0.0) throw FormatError("epsilon must be > 0");
  if (heads < 1 || head_dim < 1) throw FormatError("heads and head_dim must be >= 1");
  if (ddt_layers < 0 || ddt_layers > 3) throw FormatError("ddt_layers must be in 0..3");
  if (epochs < 1) throw FormatError("epochs must be >= 1");
  if (image_size < 4) throw FormatError("image_size must be >= 4");
  if (pyramid_resolutions.size() != 3 || pyramid_channels.size() != 3)
    throw FormatError("pyramid wants exactly 3 levels");
  for (std::size_t i = 0; i + 1 < pyramid_resolutions.size(); ++i)
    if (pyramid_resolutions[i] <= pyramid_resolutions[i + 1])
      throw FormatError("pyramid resolutions must be strictly decreasing");
  if (pyramid_resolutions.back() < 1) throw FormatError("pyramid resolution must be >= 1");
  if (pyramid_resolutions.front() > image_size)
    throw FormatError("finest pyramid level exceeds image size");
  for (int c : pyramid_channels)
    if (c < 1) throw FormatError("pyramid channels must be >= 1");
  if (train_episodes < 1 || eval_episodes < 1) throw FormatError("episode counts must be >= 1");
  if (shots < 1) throw FormatError("shots must be >= 1");
  if (classes < 2) throw FormatError("need at least 2 classes");
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig config;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw FormatError("config line " + std::to_string(lineno) + " has no '='");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty())
      throw FormatError("config line " + std::to_string(lineno) + " is malformed");
    try {
      if (key == "seed") config.seed = std::stoull(value);
      else if (key == "kernel") config.kernel = kernel_kind_from_name(value);
      else if (key == "lambda") config.lambda = std::stod(value);
      else if (key == "epsilon") config.epsilon = std::stod(value);
      else if (key == "heads") config.heads = std::stoi(value);
      else if (key == "head_dim") config.head_dim = std::stoi(value);
      else if (key == "ddt_layers") config.ddt_layers = std::stoi(value);
      else if (key == "gp_learning_rate") config.gp_learning_rate = std::stod(value);
      else if (key == "agg_learning_rate") config.agg_learning_rate = std::stod(value);
      else if (key == "epochs") config.epochs = std::stoi(value);
      else if (key == "image_size") config.image_size = std::stoi(value);
      else if (key == "pyramid_resolutions") config.pyramid_resolutions = parse_int_list(value, key);
      else if (key == "pyramid_channels") config.pyramid_channels = parse_int_list(value, key);
      else if (key == "train_episodes") config.train_episodes = std::stoi(value);
      else if (key == "eval_episodes") config.eval_episodes = std::stoi(value);
      else if (key == "shots") config.shots = std::stoi(value);
      else if (key == "classes") config.classes = std::stoi(value);
      else throw FormatError("unknown config key '" + key + "'");
    } catch (const FormatError&) {
      throw;
    } catch (const std::exception&) {
      throw FormatError("bad value '" + value + "' for key '" + key + "'");
    }
  }
  config.validate();
  return config;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt_int_list(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(v[i]);
  }
  return s;
}

}  // namespace

std::string run_config_to_text(const RunConfig& c) {
  std::string s;
  s += "seed = " + std::to_string(c.seed) + "\n";
  s += "kernel = " + std::string(kernel_kind_name(c.kernel)) + "\n";
  s += "lambda = " + fmt_double(c.lambda) + "\n";
  s += "epsilon = " + fmt_double(c.epsilon) + "\n";
  s += "heads = " + std::to_string(c.heads) + "\n";
  s += "head_dim = " + std::to_string(c.head_dim) + "\n";
  s += "ddt_layers = " + std::to_string(c.ddt_layers) + "\n";
  s += "gp_learning_rate = " + fmt_double(c.gp_learning_rate) + "\n";
  s += "agg_learning_rate = " + fmt_double(c.agg_learning_rate) + "\n";
  s += "epochs = " + std::to_string(c.epochs) + "\n";
  s += "image_size = " + std::to_string(c.image_size) + "\n";
  s += "pyramid_resolutions = " + fmt_int_list(c.pyramid_resolutions) + "\n";
  s += "pyramid_channels = " + fmt_int_list(c.pyramid_channels) + "\n";
  s += "train_episodes = " + std::to_string(c.train_episodes) + "\n";
  s += "eval_episodes = " + std::to_string(c.eval_episodes) + "\n";
  s += "shots = " + std::to_string(c.shots) + "\n";
  s += "classes = " + std::to_string(c.classes) + "\n";
  return s;
}

std::string hyperparams_to_text(KernelKind kind, const KernelHyperparams& p) {
  std::string s;
  s += "kernel = " + std::string(kernel_kind_name(kind)) + "\n";
  s += "log_output_scale = " + fmt_double(p.log_output_scale) + "\n";
  for (int d = 0; d < p.feature_dim(); ++d)
    s += "log_lengthscale_" + std::to_string(d) + " = " +
         fmt_double(p.log_lengthscales[static_cast<std::size_t>(d)]) + "\n";
  s += "log_noise = " + fmt_double(p.log_noise) + "\n";
  s += "log_linear_variance = " + fmt_double(p.log_linear_variance) + "\n";
  s += "tied_lengthscales = " + std::string(p.tied_lengthscales ? "1" : "0") + "\n";
  return s;
}

std::pair<KernelKind, KernelHyperparams> parse_hyperparams(const std::string& text) {
  KernelKind kind = KernelKind::RbfArd;
  KernelHyperparams p;
  std::vector<std::pair<int, double>> scales;
  std::stringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("hyperparam line has no '='");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    try {
      if (key == "kernel") kind = kernel_kind_from_name(value);
      else if (key == "log_output_scale") p.log_output_scale = std::stod(value);
      else if (key == "log_noise") p.log_noise = std::stod(value);
      else if (key == "log_linear_variance") p.log_linear_variance = std::stod(value);
      else if (key == "tied_lengthscales") p.tied_lengthscales = value != "0";
      else if (key.rfind("log_lengthscale_", 0) == 0)
        scales.emplace_back(std::stoi(key.substr(16)), std::stod(value));
      else throw FormatError("unknown hyperparam key '" + key + "'");
    } catch (const FormatError&) {
      throw;
    } catch (const std::exception&) {
      throw FormatError("bad value '" + value + "' for key '" + key + "'");
    }
  }
  p.log_lengthscales.assign(scales.size(), 0.0);
  for (const auto& [idx, v] : scales) {
    if (idx < 0 || idx >= static_cast<int>(scales.size()))
      throw FormatError("lengthscale index out of range");
    p.log_lengthscales[static_cast<std::size_t>(idx)] = v;
  }
  return {kind, p};
}

void write_pgm(const std::string& path, const Tensor& map2d) {
  if (map2d.rank() != 2) throw DimensionError("pgm wants a 2D map");
  const int h = map2d.dim(0), w = map2d.dim(1);
  double lo = map2d[0], hi = map2d[0];
  for (std::int64_t i = 1; i < map2d.numel(); ++i) {
    lo = std::min(lo, map2d[i]);
    hi = std::max(hi, map2d[i]);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  out << "P5\n" << w << " " << h << "\n255\n";
  const bool degenerate = hi - lo < 1e-12;
  const double inv = degenerate ? 0.0 : 255.0 / (hi - lo);
  for (std::int64_t i = 0; i < map2d.numel(); ++i) {
    const long v = degenerate ? 0 : std::lround((map2d[i] - lo) * inv);
    const unsigned char byte = static_cast<unsigned char>(std::min(255L, std::max(0L, v)));
    out.write(reinterpret_cast<const char*>(&byte), 1);
  }
  if (!out) throw FormatError("write failed for " + path);
}

}  // namespace dacm
