#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include "dacm/cli_commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"dacm: covariance-kernel cost volumes with doubly deformable aggregation"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir = ".";
  std::optional<std::uint64_t> seed;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "run configuration file (key = value lines)");
    sub->add_option("--seed", seed, "seed override");
    sub->add_option("--out", out_dir, "output directory");
  };

  std::string gradcheck_target;
  CLI::App* gradcheck = app.add_subcommand(
      "gradcheck", "finite-difference checks for one module's gradients");
  gradcheck->add_option("target", gradcheck_target, "kernels | gp | aggregation | pipeline")
      ->required();
  add_common(gradcheck);

  std::string gp_data;
  int gp_steps = 100;
  CLI::App* gp_fit = app.add_subcommand("gp-fit", "fit GP hyperparameters to a data file");
  gp_fit->add_option("data", gp_data, "tensor file with records X (NxD) and y (N)")->required();
  gp_fit->add_option("--steps", gp_steps, "ascent steps")->check(CLI::NonNegativeNumber);
  add_common(gp_fit);

  CLI::App* train = app.add_subcommand("train", "train on synthetic episodes");
  add_common(train);

  std::string checkpoint;
  bool oracle = false;
  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on synthetic episodes");
  eval->add_option("--checkpoint", checkpoint, "checkpoint prefix (from train)");
  eval->add_flag("--oracle-predictions", oracle,
                 "debug: score the ground truth against itself");
  add_common(eval);

  std::string viz_in, viz_out;
  CLI::App* viz = app.add_subcommand("viz", "dump a 2D tensor as a PGM image");
  viz->add_option("input", viz_in, "tensor file with one 2D record")->required();
  viz->add_option("output", viz_out, "output .pgm path")->required();
  add_common(viz);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return dacm::cli::kExitUsage;
  }

  if (gradcheck->parsed())
    return dacm::cli::cmd_gradcheck(gradcheck_target, seed.value_or(42), std::cout);

  if (viz->parsed()) return dacm::cli::cmd_viz(viz_in, viz_out, std::cout);

  std::optional<dacm::RunConfig> config =
      dacm::cli::resolve_config(config_path, seed, std::cerr);
  if (!config) return dacm::cli::kExitUsage;

  if (gp_fit->parsed())
    return dacm::cli::cmd_gp_fit(*config, gp_data, out_dir, gp_steps, std::cout);
  if (train->parsed()) return dacm::cli::cmd_train(*config, out_dir, std::cout);
  if (eval->parsed()) {
    if (!oracle && checkpoint.empty()) {
      std::cerr << "eval needs --checkpoint (or --oracle-predictions)\n";
      return dacm::cli::kExitUsage;
    }
    return dacm::cli::cmd_eval(*config, checkpoint, out_dir, oracle, std::cout);
  }
  return dacm::cli::kExitUsage;
}
