#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "distillforge/distiller.hpp"
#include "distillforge/eval.hpp"
#include "distillforge/teacher.hpp"

namespace distillforge {

/// Invalid or unknown configuration; the message names the offending key.
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct DataConfig {
    std::string source = "synth";  // "synth" or a class-per-directory root
    std::uint64_t seed = 0;        // synthetic templates and samples, and the train/test split
    std::size_t resize = 0;        // square side; 0 keeps the native size
    double test_fraction = 0.2;    // used when the root has no train/ and test/ subdirectories
    SynthSpec synthetic;           // used when source == "synth"; per_class applies to each split
};

struct TeacherConfig {
    std::size_t epochs = 50;
    std::size_t count = 8;
    OptimizerDescriptor optimizer;
    std::optional<AugmentationSpec> augmentation;
};

struct EvalConfig {
    EvalOptions options;
    std::size_t seeds = 5;
    bool baseline = true;  // also evaluate a random-real subset of the same size
    bool full = false;     // also evaluate students trained on the whole training set
    std::size_t validation = 500;  // training images held aside for periodic evaluation
};

/// Every tunable of a run. `seed` drives teachers, initialization, distillation and evaluation;
/// the data has its own seed so that runs with different seeds share one dataset.
struct RunConfig {
    std::uint64_t seed = 0;
    std::size_t threads = 1;
    std::string precision = "f32";
    std::size_t model_depth = 3;
    std::size_t model_width = 128;
    DataConfig data;
    TeacherConfig teacher;
    DistillConfig distill;
    EvalConfig eval;

    void validate() const;
};

nlohmann::json to_json(const RunConfig& c);
RunConfig run_config_from_json(const nlohmann::json& j);

/// Resolution order: defaults, then the config file, then `overrides` (JSON pointer -> value).
/// Unknown keys and type mismatches throw ConfigError naming the key.
RunConfig resolve_config(const nlohmann::json& file, const std::map<std::string, nlohmann::json>& overrides);

/// Canonical serialization (sorted keys, shortest round-trip floats) and its SHA-256.
std::string canonical_json(const RunConfig& c);
std::string config_digest(const RunConfig& c);

}  // namespace distillforge
