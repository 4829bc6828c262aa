#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "distillforge/distiller.hpp"
#include "distillforge/eval.hpp"
#include "distillforge/image_io.hpp"

namespace distillforge {

struct PlotInputs {
    std::vector<LogRow> log;
    std::vector<EvalReport> reports;
    std::optional<AuditReport> audit;
    std::optional<DistilledDataset> distilled;
};

/// Writes loss_curve.svg, accuracy_vs_ipc.csv, accuracy_vs_ipc.svg, audit_hist.svg and
/// distilled_grid.png into `dir`. Missing inputs give empty-but-valid artifacts, except the
/// grid which needs a distilled dataset. Returns the written paths.
std::vector<std::filesystem::path> emit_plots(const std::filesystem::path& dir, const PlotInputs& in);

/// One row per report: `ipc,kind,mean,std,seeds,failed`.
std::string accuracy_csv(const std::vector<EvalReport>& reports);

/// Classes as rows, images per class as columns, pixels de-normalized and clipped.
Image8 distilled_grid(const DistilledDataset& dc);

/// Parses the CSV written by format_log.
std::vector<LogRow> parse_log(const std::string& csv);

}  // namespace distillforge
