#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "distillforge/tensor.hpp"

namespace distillforge {

/// I/O or content problem with input data (unreadable file, empty class, bad layout).
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct LabeledDataset {
    Tensor images;  // [N, C, H, W]
    std::vector<int> labels;
    std::vector<std::string> class_names;
    std::string split = "all";  // all | train | test
    std::string source_id;      // lowercase hex SHA-256

    std::size_t size() const { return labels.size(); }
    std::size_t classes() const { return class_names.size(); }
    std::size_t channels() const { return images.shape()[1]; }
    std::size_t height() const { return images.shape()[2]; }
    std::size_t width() const { return images.shape()[3]; }
    /// Indices of each class, in dataset order.
    std::vector<std::vector<std::size_t>> indices_by_class() const;
};

/// Checks the dataset invariants; throws DataError.
void validate(const LabeledDataset& ds);

LabeledDataset subset(const LabeledDataset& ds, const std::vector<std::size_t>& indices,
                      const std::string& tag);

/// Reads `root/<class>/*.png`. Classes and files are taken in lexicographic order; labels
/// follow sorted class-directory names. 8-bit grayscale or RGB only.
LabeledDataset load_image_dir(const std::filesystem::path& root);

/// Digest of the ordered (relative name, bytes) stream of every file under the tree.
std::string directory_digest(const std::filesystem::path& root);

/// Bilinear resize with half-pixel centers (corners not aligned).
LabeledDataset resize(const LabeledDataset& ds, std::size_t height, std::size_t width);

struct SynthSpec {
    std::size_t classes = 4;
    std::size_t per_class = 500;
    std::size_t channels = 1;
    std::size_t height = 16;
    std::size_t width = 16;
    /// Scale of the class templates around mid-gray.
    double separation = 0.1;
    /// Per-pixel noise standard deviation.
    double noise = 0.25;
    /// Side of the coarse grid the smooth templates are upsampled from.
    std::size_t template_grid = 4;
};

nlohmann::json to_json(const SynthSpec& s);
SynthSpec synth_spec_from_json(const nlohmann::json& j);

/// Class c is drawn from N(template_c, noise^2 I) clipped to [0,1], where template_c is a
/// smooth unit-RMS random field scaled by `separation` around 0.5. Templates depend on
/// `seed` only, samples on (seed, stream), so streams give independent splits.
LabeledDataset synth_gaussians(const SynthSpec& spec, std::uint64_t seed, std::uint64_t stream = 0);

/// Stratified split into disjoint train and test parts.
std::pair<LabeledDataset, LabeledDataset> split(const LabeledDataset& ds, double test_fraction,
                                                std::uint64_t seed);

struct NormStats {
    std::vector<double> mean;
    std::vector<double> std;
};

nlohmann::json to_json(const NormStats& s);
NormStats norm_stats_from_json(const nlohmann::json& j);

/// Per-channel statistics; refuses test splits and zero-variance channels.
NormStats compute_stats(const LabeledDataset& ds);
LabeledDataset normalize(const LabeledDataset& ds, const NormStats& stats);
Tensor normalize(const Tensor& images, const NormStats& stats);
Tensor denormalize(const Tensor& images, const NormStats& stats);

}  // namespace distillforge
