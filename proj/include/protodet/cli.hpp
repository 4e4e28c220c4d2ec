#pragma once

// Command-line front end. Each subcommand has a flat JSON config with
// defaults; a --config file overrides the defaults and flags override the
// file. The resolved config is written next to the command's outputs.

#include "protodet/data.hpp"
#include "protodet/train.hpp"

#include <json.hpp>

#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>

namespace protodet::cli {

using Json = nlohmann::ordered_json;

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitValidation = 2;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

Json synth_defaults();
Json train_defaults();
Json eval_defaults();

/// Overlays a config object on defaults. Unknown keys and type mismatches
/// throw ValidationError.
Json merge_config(const Json& defaults, const Json& overrides, const std::string& source);
Json load_config(const std::filesystem::path& path, const Json& defaults);

SceneSpec scene_spec_from(const Json& config);
TrainConfig train_config_from(const Json& config);

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace protodet::cli
