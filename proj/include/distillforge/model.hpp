#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "distillforge/tensor.hpp"

namespace distillforge {

/// Named sub-tensor of a flattened parameter vector.
struct ParamBlock {
    std::string name;
    Shape shape;
};

using ParamLayout = std::vector<ParamBlock>;

std::size_t layout_size(const ParamLayout& layout);

/// Flattened model parameters plus the layout that gives them structure.
struct ParamVector {
    Tensor data;  // rank 1
    ParamLayout layout;

    std::size_t size() const { return data.size(); }
};

/// Concatenates tensors in layout order into one rank-1 tensor (differentiable).
ParamVector flatten(const std::vector<Tensor>& parts, const ParamLayout& layout);
/// Splits a rank-1 tensor back into layout-shaped tensors (differentiable).
std::vector<Tensor> unflatten(const Tensor& data, const ParamLayout& layout);

/// ConvNet family: `depth` blocks of conv3x3(pad 1) -> instance norm -> ReLU -> avgpool 2x2,
/// then a linear classifier on the flattened features.
struct ModelConfig {
    std::size_t depth = 3;
    std::size_t width = 128;
    std::size_t channels = 1;
    std::size_t height = 32;
    std::size_t width_px = 32;
    std::size_t classes = 4;

    /// Throws std::invalid_argument naming the offending field.
    void validate() const;
    Shape input_shape(std::size_t batch) const { return {batch, channels, height, width_px}; }
    std::string hash() const;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

ParamLayout make_layout(const ModelConfig& config);
/// Closed-form parameter count.
std::size_t parameter_count(const ModelConfig& config);

struct Model {
    ModelConfig config;
    ParamVector params;
};

/// Fan-in scaled uniform initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and
/// biases alike. Bit-identical for identical (config, seed).
Model build(const ModelConfig& config, std::uint64_t seed);

/// Logits [batch, classes] for a flat parameter tensor; differentiable in both arguments.
Tensor forward(const ModelConfig& config, const Tensor& theta, const Tensor& batch);
Tensor forward(const Model& model, const Tensor& batch);

/// Top-1 predictions, evaluated in chunks without recording a graph.
std::vector<int> predict(const ModelConfig& config, const Tensor& theta, const Tensor& images,
                         std::size_t chunk = 256);

}  // namespace distillforge
