#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "distillforge/augment.hpp"
#include "distillforge/data.hpp"
#include "distillforge/model.hpp"
#include "distillforge/rng.hpp"
#include "distillforge/teacher.hpp"

namespace distillforge {

struct DistillError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Teacher segment whose endpoints (almost) coincide; the caller should draw another.
struct DegenerateSegment : DistillError {
    using DistillError::DistillError;
};

/// theta, batch -> logits. The ConvNet is the usual choice; tests plug in toy models.
using StudentForward = std::function<Tensor(const Tensor& theta, const Tensor& batch)>;
StudentForward convnet_forward(const ModelConfig& config);

enum class InitMode { Noise, RealSample };
std::string to_string(InitMode m);
InitMode init_mode_from_string(const std::string& s);

/// Synthetic images in normalized space with fixed class-major labels and a trainable
/// log learning rate.
struct DistilledDataset {
    Tensor images;  // [classes*ipc, C, H, W]
    std::vector<int> labels;
    double log_alpha = 0.0;
    std::size_t ipc = 0;
    ModelConfig config;
    NormStats stats;
    std::vector<std::string> class_names;
    nlohmann::json provenance = nlohmann::json::object();

    std::size_t classes() const { return config.classes; }
    std::size_t size() const { return labels.size(); }
    double alpha() const;
    /// Images mapped back to pixel space and clipped to [0, 1].
    Tensor export_pixels() const;
};

/// Maps normalized images back to pixel space (identity for empty stats) and clips to [0, 1].
Tensor to_pixels(const Tensor& images, const NormStats& stats);

/// Noise mode draws standard-normal pixels; real-sample copies `ipc` random images per class
/// from `real`, which must already be normalized.
DistilledDataset init_distilled(const ModelConfig& config, std::size_t ipc, InitMode mode, std::uint64_t seed,
                                const LabeledDataset* real = nullptr, const NormStats& stats = {});

struct DistillConfig {
    std::size_t ipc = 1;
    InitMode init = InitMode::Noise;
    std::size_t J = 20;
    std::size_t K = 2;
    std::optional<std::size_t> max_start;  // unset: half the shortest trajectory
    std::size_t outer_steps = 500;
    double lr_images = 100.0;
    double lr_alpha = 1e-5;
    double momentum = 0.5;
    std::size_t inner_batch = 0;  // 0: every distilled image in each inner step
    std::size_t eval_every = 0;   // 0: no periodic evaluation
    std::uint64_t seed = 0;
    std::optional<AugmentationSpec> augmentation = AugmentationSpec::defaults();

    /// Resolves max_start against the fleet and checks ranges; throws std::invalid_argument.
    std::size_t resolved_max_start(std::size_t shortest_trajectory) const;
    void validate() const;
};

nlohmann::json to_json(const DistillConfig& c);
DistillConfig distill_config_from_json(const nlohmann::json& j);

/// Inputs to one inner step: which distilled images and which augmentation.
struct InnerPlan {
    std::vector<std::size_t> batch;  // empty: all images
    std::optional<AugDraw> draw;
};

std::vector<InnerPlan> sample_plans(const DistillConfig& cfg, std::size_t images, std::size_t steps, Rng& rng);

/// theta - alpha * grad(mean CE(f(theta, A(images[batch]))), theta), keeping the graph so the
/// result stays differentiable wrt theta, images and alpha.
Tensor inner_step(const StudentForward& f, const Tensor& theta, const Tensor& images, std::span<const int> labels,
                  const Tensor& alpha, const InnerPlan& plan);

/// One inner_step per plan.
Tensor unroll(const StudentForward& f, const Tensor& theta, const Tensor& images, std::span<const int> labels,
              const Tensor& alpha, std::span<const InnerPlan> plans);

/// ||student - target||^2 / ||start - target||^2. The teacher endpoints are constants; throws
/// DegenerateSegment when the denominator is below 1e-12.
Tensor match_loss(const Tensor& student, const Tensor& start, const Tensor& target);
double segment_norm2(const Tensor& start, const Tensor& target);

struct MatchState {
    std::size_t step = 0;
    Rng rng;
    std::vector<double> losses;
    std::vector<double> image_velocity;
    double alpha_velocity = 0.0;
    std::optional<DistilledDataset> best;
    double best_accuracy = -1.0;
};

MatchState init_state(const DistillConfig& cfg, const DistilledDataset& dc);

/// One meta-gradient update of dc.images and dc.log_alpha; returns the match loss.
double outer_step(MatchState& state, const std::vector<Trajectory>& fleet, DistilledDataset& dc,
                  const DistillConfig& cfg, const StudentForward& f);

struct LogRow {
    std::size_t step = 0;
    double loss = 0.0;
    double alpha = 0.0;
    std::optional<double> eval_accuracy;
};

std::string format_log(const std::vector<LogRow>& rows);

/// Test accuracy of a distilled dataset, used for periodic evaluation.
using Evaluator = std::function<double(const DistilledDataset&)>;

struct RunResult {
    DistilledDataset best;   // best-eval snapshot, or the final state without evaluation
    DistilledDataset final;
    std::vector<LogRow> log;
    std::optional<std::size_t> best_step;
};

RunResult run(const std::vector<Trajectory>& fleet, DistilledDataset dc, const DistillConfig& cfg,
              const Evaluator& evaluator = {});

void write_distilled(const std::filesystem::path& path, const DistilledDataset& dc);
DistilledDataset read_distilled(const std::filesystem::path& path);

}  // namespace distillforge
