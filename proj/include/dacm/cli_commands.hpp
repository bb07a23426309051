#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>

#include "dacm/serialize.hpp"

namespace dacm::cli {

// Exit codes shared by every command: 0 success, 2 usage/config error,
// 3 data format error, 4 numerical failure.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumerical = 4;

// Loads the config (defaults when path is empty) and applies the seed
// override; prints to `err` and returns nullopt on config errors.
std::optional<RunConfig> resolve_config(const std::string& config_path,
                                        std::optional<std::uint64_t> seed_override,
                                        std::ostream& err);

int cmd_gradcheck(const std::string& target, std::uint64_t seed, std::ostream& out);

int cmd_gp_fit(const RunConfig& config, const std::string& data_path,
               const std::string& out_dir, int max_steps, std::ostream& out);

int cmd_train(const RunConfig& config, const std::string& out_dir, std::ostream& out);

int cmd_eval(const RunConfig& config, const std::string& checkpoint_prefix,
             const std::string& out_dir, bool oracle_predictions, std::ostream& out);

int cmd_viz(const std::string& input_path, const std::string& output_path, std::ostream& out);

}  // namespace dacm::cli
