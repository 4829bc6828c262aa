#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "distillforge/distiller.hpp"

namespace distillforge {

struct EvalOptions {
    std::size_t epochs = 100;
    double momentum = 0.9;
    std::size_t batch_size = 64;
    /// Learning rate for real-data students; distilled students use exp(log_alpha).
    double lr = 0.01;
    std::optional<AugmentationSpec> augmentation;
    std::size_t threads = 1;
};

nlohmann::json to_json(const EvalOptions& o);
EvalOptions eval_options_from_json(const nlohmann::json& j);

/// Per-seed test accuracies of freshly trained students. Failed (diverged) seeds are kept in
/// the list, flagged, and left out of mean and std.
struct EvalReport {
    std::string kind;  // distilled | random-real | full
    std::size_t ipc = 0;
    std::size_t epochs = 0;
    double lr = 0.0;
    std::string config_hash;
    std::vector<std::uint64_t> seeds;
    std::vector<double> accuracies;
    std::vector<char> failed;
    double mean = 0.0;
    double std = 0.0;  // sample standard deviation

    std::size_t succeeded() const;
    /// Recomputes mean and std from the per-seed list.
    void aggregate();
};

nlohmann::json to_json(const EvalReport& r);
EvalReport eval_report_from_json(const nlohmann::json& j);

/// Top-1 accuracy on `test` of a student trained on `train`. Datasets are in normalized space.
/// Returns nullopt when training diverges.
std::optional<double> train_and_test(const LabeledDataset& train, const LabeledDataset& test,
                                     const ModelConfig& config, std::uint64_t seed, const EvalOptions& options,
                                     double lr);

/// View of a distilled dataset as labeled data.
LabeledDataset as_labeled(const DistilledDataset& dc);

/// Students trained on the distilled images with learning rate exp(log_alpha). Refuses a test
/// set whose digest matches the data the distilled set was built from.
EvalReport eval_student(const DistilledDataset& dc, const LabeledDataset& test, const std::vector<std::uint64_t>& seeds,
                        const EvalOptions& options);

/// Class-balanced random subset of `ipc` images per class; depends only on (train, ipc, seed).
std::vector<std::size_t> random_real_indices(const LabeledDataset& train, std::size_t ipc, std::uint64_t seed);

/// Students trained on a fresh random real subset per seed, at options.lr.
EvalReport baseline_random_real(const LabeledDataset& train, const LabeledDataset& test, const ModelConfig& config,
                                std::size_t ipc, const std::vector<std::uint64_t>& seeds, const EvalOptions& options);

/// Students trained on the whole training set, at options.lr.
EvalReport eval_full(const LabeledDataset& train, const LabeledDataset& test, const ModelConfig& config,
                     const std::vector<std::uint64_t>& seeds, const EvalOptions& options);

// ---- audit --------------------------------------------------------------------------------

/// RMS pixel distance sqrt(mean((a-b)^2)) from every query image to its nearest reference,
/// by exhaustive search. With `skip_same_index`, query i never matches reference i.
struct NearestNeighbors {
    std::vector<double> distances;
    std::vector<std::size_t> indices;
};
NearestNeighbors nearest_neighbors(const Tensor& queries, const Tensor& refs, bool skip_same_index = false);

struct AuditReport {
    std::vector<double> distances;     // per distilled image, pixel space [0,1]
    std::vector<std::size_t> nearest;  // index into the training set
    double min_distance = 0.0;
    std::size_t argmin = 0;
    std::vector<double> bin_edges;
    std::vector<std::size_t> histogram;
    double compression_ratio = 0.0;  // distilled images / training images
};

nlohmann::json to_json(const AuditReport& r);
AuditReport audit_report_from_json(const nlohmann::json& j);

/// Nearest training image for every distilled image in [0,1] pixel space. `train` is in the
/// same normalized space as `dc`; both go through to_pixels with dc.stats, so an exact copy
/// of a training image scores 0.
AuditReport audit(const DistilledDataset& dc, const LabeledDataset& train, std::size_t bins = 20);

/// Linear-interpolated percentile (q in [0,100]) of a non-empty sample.
double percentile(std::vector<double> values, double q);

}  // namespace distillforge
