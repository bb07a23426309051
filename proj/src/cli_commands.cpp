#include "dacm/cli_commands.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>

#include "dacm/errors.hpp"
#include "dacm/gp.hpp"
#include "dacm/gradcheck.hpp"
#include "dacm/pipeline.hpp"

namespace dacm::cli {

namespace {

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  out << text;
  if (!out) throw FormatError("write failed for " + path);
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw FormatError("cannot create output directory " + dir);
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

}  // namespace

std::optional<RunConfig> resolve_config(const std::string& config_path,
                                        std::optional<std::uint64_t> seed_override,
                                        std::ostream& err) {
  try {
    RunConfig config = config_path.empty() ? RunConfig{} : load_run_config(config_path);
    if (seed_override) config.seed = *seed_override;
    config.validate();
    return config;
  } catch (const FormatError& e) {
    err << "config error: " << e.what() << "\n";
    return std::nullopt;
  }
}

int cmd_gradcheck(const std::string& target, std::uint64_t seed, std::ostream& out) {
  gradcheck::Report report;
  if (target == "kernels") report = gradcheck::check_kernels(seed);
  else if (target == "gp") report = gradcheck::check_gp(seed);
  else if (target == "aggregation") report = gradcheck::check_aggregation(seed);
  else if (target == "pipeline") report = gradcheck::check_pipeline(seed);
  else {
    out << "unknown gradcheck target '" << target
        << "' (expected kernels, gp, aggregation or pipeline)\n";
    return kExitUsage;
  }
  out << gradcheck::to_text(report);
  return report.all_pass ? kExitOk : kExitNumerical;
}

int cmd_gp_fit(const RunConfig& config, const std::string& data_path,
               const std::string& out_dir, int max_steps, std::ostream& out) {
  std::vector<Tensor> records;
  try {
    records = read_tensor_records(data_path);
  } catch (const FormatError& e) {
    out << "data error: " << e.what() << "\n";
    return kExitData;
  }
  if (records.size() != 2 || records[0].rank() != 2 || records[1].rank() != 1 ||
      records[0].dim(0) != records[1].dim(0)) {
    out << "data error: expected records X (N x D) and y (N) in " << data_path << "\n";
    return kExitData;
  }
  GpTrainingSet set;
  set.X = std::move(records[0]);
  set.y = records[1].vec();

  try {
    const int dim = set.feature_dim();
    GpModel model(config.kernel, KernelHyperparams::init(dim), std::move(set));
    const double initial = model.marginal_log_likelihood();
    FitResult fitted = fit(std::move(model), max_steps, config.gp_learning_rate);
    const double final_mll = fitted.mll_trace.back();

    out << "kernel = " << kernel_kind_name(config.kernel) << "\n";
    out << "steps = " << max_steps << "\n";
    out << "initial_mll = " << fmt(initial) << "\n";
    out << "final_mll = " << fmt(final_mll) << "\n";
    const std::string snapshot =
        hyperparams_to_text(fitted.model.kind(), fitted.model.params());
    out << snapshot;
    ensure_dir(out_dir);
    write_text(out_dir + "/gp_fit_params.txt", snapshot);
  } catch (const NumericalError& e) {
    out << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  }
  return kExitOk;
}

int cmd_train(const RunConfig& config, const std::string& out_dir, std::ostream& out) {
  try {
    ensure_dir(out_dir);
    TrainResult result = train(config);
    write_text(out_dir + "/trace.csv", trace_to_csv(result.trace));
    write_text(out_dir + "/config.txt", run_config_to_text(config));
    save_checkpoint(out_dir + "/checkpoint", result.model.to_named_tensors());
    if (result.zero_feature_vectors > 0)
      out << "note: " << result.zero_feature_vectors
          << " zero feature vectors were normalized to zero\n";
    out << "epochs = " << config.epochs << "\n";
    out << "initial_epoch_loss = " << fmt(result.epoch_loss.front()) << "\n";
    out << "final_epoch_loss = " << fmt(result.epoch_loss.back()) << "\n";
    out << "trace = " << out_dir << "/trace.csv\n";
    out << "checkpoint = " << out_dir << "/checkpoint.{manifest,tensors}\n";
  } catch (const NumericalError& e) {
    ensure_dir(out_dir);
    write_text(out_dir + "/numerical_failure.txt", std::string(e.what()) + "\n");
    out << "numerical failure: " << e.what() << "\n";
    out << "dump = " << out_dir << "/numerical_failure.txt\n";
    return kExitNumerical;
  }
  return kExitOk;
}

int cmd_eval(const RunConfig& config, const std::string& checkpoint_prefix,
             const std::string& out_dir, bool oracle_predictions, std::ostream& out) {
  ModelParams model = ModelParams::init(config);
  if (!oracle_predictions) {
    try {
      model = ModelParams::from_named_tensors(config, load_checkpoint(checkpoint_prefix));
    } catch (const FormatError& e) {
      out << "checkpoint error: " << e.what() << "\n";
      return kExitData;
    }
  }
  try {
    const std::vector<Episode> episodes = make_eval_episodes(config);
    EvalReport report;
    if (oracle_predictions) {
      // debug path: score the ground truth against itself
      IouAccumulator acc;
      for (const Episode& ep : episodes) acc.add(ep.query_mask, ep.query_mask, ep.class_id);
      report = acc.report(config.seed);
    } else {
      report = evaluate(model, episodes, config.seed);
    }
    const std::string text = report_to_text(report);
    out << text;
    ensure_dir(out_dir);
    write_text(out_dir + "/report.txt", text);
  } catch (const NumericalError& e) {
    out << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  }
  return kExitOk;
}

int cmd_viz(const std::string& input_path, const std::string& output_path, std::ostream& out) {
  Tensor t;
  try {
    t = read_tensor_file(input_path);
  } catch (const FormatError& e) {
    out << "data error: " << e.what() << "\n";
    return kExitData;
  }
  if (t.rank() != 2) {
    out << "viz wants a rank-2 tensor, got rank " << t.rank() << "\n";
    return kExitUsage;
  }
  write_pgm(output_path, t);
  out << "wrote " << output_path << " (" << t.dim(1) << "x" << t.dim(0) << ")\n";
  return kExitOk;
}

}  // namespace dacm::cli
