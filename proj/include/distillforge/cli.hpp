#pragma once

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "distillforge/data.hpp"
#include "distillforge/model.hpp"
#include "distillforge/run_config.hpp"

namespace distillforge {

/// Exit codes of the command-line tool.
enum ExitCode : int { kExitOk = 0, kExitInternal = 1, kExitConfig = 2, kExitNumeric = 3, kExitIo = 4 };

/// Train and test splits in normalized space, with the training-set statistics.
struct Splits {
    LabeledDataset train;
    LabeledDataset test;
    NormStats stats;
};

Splits load_splits(const DataConfig& data);
ModelConfig model_config(const RunConfig& config, const LabeledDataset& train);

/// Runs one subcommand. `args` excludes the program name. Progress goes to `out`; failures
/// print a single line "error: <config|numeric|io|internal>: <message>" to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace distillforge
