#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "distillforge/augment.hpp"
#include "distillforge/data.hpp"
#include "distillforge/model.hpp"

namespace distillforge {

struct OptimizerDescriptor {
    std::string kind = "sgd";
    double lr = 0.01;
    double momentum = 0.9;
    std::size_t batch_size = 64;
};

nlohmann::json to_json(const OptimizerDescriptor& o);
OptimizerDescriptor optimizer_from_json(const nlohmann::json& j);

/// Parameter snapshots of one teacher, one per epoch boundary starting at initialization.
struct Trajectory {
    ModelConfig config;
    std::string config_hash;
    std::string dataset_digest;
    std::uint64_t seed = 0;
    std::vector<std::size_t> steps;  // epoch index of each snapshot
    OptimizerDescriptor optimizer;
    std::optional<AugmentationSpec> augmentation;
    ParamLayout layout;
    std::vector<Tensor> snapshots;  // rank-1, layout order

    std::size_t length() const { return snapshots.size(); }
    ParamVector snapshot(std::size_t i) const { return {snapshots.at(i), layout}; }
    /// Checks the structural invariants; throws FormatError.
    void validate() const;
};

struct TeacherOptions {
    std::size_t epochs = 50;
    OptimizerDescriptor optimizer;
    /// Apply this augmentation (non-differentiably) to every teacher minibatch.
    std::optional<AugmentationSpec> augmentation;
};

/// Minibatch SGD with momentum on class-balanced shuffled batches from a fresh model built
/// from `seed`. Calls on_epoch(0, init) and then on_epoch(e, params) after every epoch; returns
/// the final parameters. Throws NumericError naming the epoch on divergence.
Tensor fit(const LabeledDataset& train, const ModelConfig& config, const TeacherOptions& options,
           std::uint64_t seed, const std::function<void(std::size_t, const Tensor&)>& on_epoch = {});

/// Minibatch SGD with momentum on class-balanced shuffled batches; records a snapshot at
/// step 0 and after every epoch. Throws NumericError naming the epoch on divergence.
Trajectory train_teacher(const LabeledDataset& train, const ModelConfig& config, const TeacherOptions& options,
                         std::uint64_t seed);

/// Trains `count` teachers with seeds derived from `seed`, using up to `threads` workers.
/// The result is identical for any thread count.
std::vector<Trajectory> train_teachers(const LabeledDataset& train, const ModelConfig& config,
                                       const TeacherOptions& options, std::size_t count, std::uint64_t seed,
                                       std::size_t threads);

/// Class-balanced sample order for one epoch: classes cycle through shuffled rounds and
/// each class draws from its own reshuffled pool.
std::vector<std::size_t> balanced_epoch_order(const std::vector<std::vector<std::size_t>>& by_class,
                                              std::size_t total, Rng& rng);

/// Mean cross-entropy and accuracy of a parameter vector over a dataset (no graph).
struct LossAccuracy {
    double loss = 0.0;
    double accuracy = 0.0;
};
LossAccuracy evaluate_params(const ModelConfig& config, const Tensor& theta, const LabeledDataset& ds,
                             std::size_t chunk = 256);

// ---- trajectory files -------------------------------------------------------------------

void write_trajectory(const std::filesystem::path& path, const Trajectory& t);
Trajectory read_trajectory(const std::filesystem::path& path);

/// Directory of trajectory files plus a manifest. All members share the model config hash
/// and dataset digest.
class TrajectoryStore {
public:
    /// Writes every trajectory and the manifest; rejects empty or mixed fleets.
    static TrajectoryStore record(const std::filesystem::path& dir, const std::vector<Trajectory>& trajectories);
    static TrajectoryStore open(const std::filesystem::path& dir);

    std::size_t count() const { return files_.size(); }
    const std::string& config_hash() const { return config_hash_; }
    const std::string& dataset_digest() const { return dataset_digest_; }
    const std::filesystem::path& dir() const { return dir_; }
    Trajectory load(std::size_t index) const;
    /// Every trajectory, in index order.
    std::vector<Trajectory> load_all() const;

private:
    std::filesystem::path dir_;
    std::vector<std::string> files_;
    std::string config_hash_;
    std::string dataset_digest_;
};

}  // namespace distillforge
