#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "distillforge/rng.hpp"
#include "distillforge/tensor.hpp"

namespace distillforge {

enum class AugKind { Flip, Translate, Rotate, Scale, Cutout, Brightness, Contrast };

std::string to_string(AugKind k);
AugKind aug_kind_from_string(const std::string& s);

/// One stage of the pipeline. Meaning of lo/hi per kind:
///   flip: unused; translate: hi = max shift as a fraction of the extent;
///   rotate: hi = max degrees; scale: [lo, hi] zoom factor; cutout: hi = hole side as a
///   fraction of the extent; brightness: hi = max additive shift; contrast: [lo, hi] factor.
struct AugOp {
    AugKind kind = AugKind::Flip;
    double probability = 0.5;
    double lo = 0.0;
    double hi = 0.0;
};

/// Ordered augmentation pipeline. An empty op list is the identity.
struct AugmentationSpec {
    std::vector<AugOp> ops;
    std::uint64_t stream = 0;

    /// flip, translate 12.5%, rotate 15 deg, scale 0.85-1.15, cutout 25%,
    /// brightness +-0.2, contrast 0.8-1.2, each with probability 0.5.
    static AugmentationSpec defaults();
    void validate() const;
};

nlohmann::json to_json(const AugmentationSpec& s);
AugmentationSpec augmentation_from_json(const nlohmann::json& j);

/// Concrete parameters for one application to a batch. Applying the same draw twice
/// gives the same result.
struct AugDraw {
    struct Stage {
        AugKind kind;
        std::vector<char> active;  // per image
        std::vector<double> a, b;  // per-image parameters (see sample())
        double extent = 0.0;       // cutout hole side fraction
    };
    std::size_t batch = 0;
    std::vector<Stage> stages;

    /// True when no stage is active for any image.
    bool identity() const;
};

/// Draws per-image parameters for every op; `rng` advances.
AugDraw sample(const AugmentationSpec& spec, std::size_t batch, Rng& rng);

/// Applies the draw to [N,C,H,W] images. Geometric stages go through bilinear
/// resampling with reflect padding; gradients flow to the pixels, never to the draw.
Tensor apply(const Tensor& batch, const AugDraw& draw);

}  // namespace distillforge
