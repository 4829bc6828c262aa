#include "distillforge/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "distillforge/digest.hpp"
#include "distillforge/rng.hpp"

namespace distillforge {

std::size_t layout_size(const ParamLayout& layout) {
    std::size_t n = 0;
    for (const auto& b : layout) n += numel(b.shape);
    return n;
}

ParamVector flatten(const std::vector<Tensor>& parts, const ParamLayout& layout) {
    if (parts.size() != layout.size()) throw ShapeError("flatten: part count does not match layout");
    std::vector<Tensor> flat;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (parts[i].shape() != layout[i].shape)
            throw ShapeError("flatten: " + layout[i].name + " has shape " + shape_str(parts[i].shape()) +
                             ", layout says " + shape_str(layout[i].shape));
        flat.push_back(reshape(parts[i], {parts[i].size()}));
    }
    return {concat0(flat), layout};
}

std::vector<Tensor> unflatten(const Tensor& data, const ParamLayout& layout) {
    if (data.rank() != 1 || data.size() != layout_size(layout))
        throw ShapeError("unflatten: vector " + shape_str(data.shape()) + " does not match layout of " +
                         std::to_string(layout_size(layout)));
    std::vector<Tensor> out;
    std::size_t offset = 0;
    for (const auto& b : layout) {
        const std::size_t n = numel(b.shape);
        out.push_back(reshape(slice0(data, offset, offset + n), b.shape));
        offset += n;
    }
    return out;
}

void ModelConfig::validate() const {
    auto positive = [](std::size_t v, const char* name) {
        if (v == 0) throw std::invalid_argument(std::string("model.") + name + " must be positive");
    };
    positive(depth, "depth");
    positive(width, "width");
    positive(channels, "channels");
    positive(height, "height");
    positive(width_px, "width_px");
    if (classes < 2) throw std::invalid_argument("model.classes must be at least 2");
    if (depth >= 32 || (height >> depth) == 0 || (width_px >> depth) == 0)
        throw std::invalid_argument("model.depth: input " + std::to_string(height) + "x" +
                                    std::to_string(width_px) + " too small for depth " +
                                    std::to_string(depth));
}

nlohmann::json to_json(const ModelConfig& c) {
    return {{"depth", c.depth}, {"width", c.width},       {"channels", c.channels},
            {"height", c.height}, {"width_px", c.width_px}, {"classes", c.classes}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.depth = j.at("depth").get<std::size_t>();
    c.width = j.at("width").get<std::size_t>();
    c.channels = j.at("channels").get<std::size_t>();
    c.height = j.at("height").get<std::size_t>();
    c.width_px = j.at("width_px").get<std::size_t>();
    c.classes = j.at("classes").get<std::size_t>();
    return c;
}

std::string ModelConfig::hash() const { return sha256_hex(to_json(*this).dump()); }

ParamLayout make_layout(const ModelConfig& config) {
    config.validate();
    ParamLayout layout;
    std::size_t in = config.channels;
    for (std::size_t b = 0; b < config.depth; ++b) {
        const std::string prefix = "block" + std::to_string(b) + ".conv.";
        layout.push_back({prefix + "weight", {config.width, in, 3, 3}});
        layout.push_back({prefix + "bias", {config.width}});
        in = config.width;
    }
    const std::size_t features = config.width * (config.height >> config.depth) * (config.width_px >> config.depth);
    layout.push_back({"head.weight", {config.classes, features}});
    layout.push_back({"head.bias", {config.classes}});
    return layout;
}

std::size_t parameter_count(const ModelConfig& c) {
    const std::size_t first = c.width * c.channels * 9 + c.width;
    const std::size_t rest = (c.depth - 1) * (c.width * c.width * 9 + c.width);
    const std::size_t features = c.width * (c.height >> c.depth) * (c.width_px >> c.depth);
    return first + rest + c.classes * features + c.classes;
}

Model build(const ModelConfig& config, std::uint64_t seed) {
    const ParamLayout layout = make_layout(config);
    Rng rng(seed);
    std::vector<double> values;
    values.reserve(layout_size(layout));
    for (std::size_t i = 0; i < layout.size(); i += 2) {
        const Shape& w = layout[i].shape;
        const std::size_t fan_in = numel(w) / w[0];
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        const std::size_t n = numel(w) + numel(layout[i + 1].shape);
        for (std::size_t k = 0; k < n; ++k) {
            double v = rng.uniform(-bound, bound);
            if (precision() == Precision::F32) v = static_cast<float>(v);
            values.push_back(v);
        }
    }
    const std::size_t total = values.size();
    Tensor data({total}, std::move(values));
    return {config, {data, layout}};
}

Tensor forward(const ModelConfig& config, const Tensor& theta, const Tensor& batch) {
    if (batch.rank() != 4 || batch.shape()[1] != config.channels || batch.shape()[2] != config.height ||
        batch.shape()[3] != config.width_px)
        throw ShapeError("forward: batch " + shape_str(batch.shape()) + " does not match model input " +
                         shape_str(config.input_shape(0)));
    const std::vector<Tensor> p = unflatten(theta, make_layout(config));
    const std::size_t n = batch.shape()[0];
    Tensor x = batch;
    for (std::size_t b = 0; b < config.depth; ++b) {
        Tensor y = conv2d(x, p[2 * b], 1);
        y = add(y, broadcast_to(reshape(p[2 * b + 1], {1, config.width, 1, 1}), y.shape()));
        x = avg_pool2(relu(instance_norm(y)));
    }
    const Tensor features = reshape(x, {n, x.size() / n});
    const Tensor& head_w = p[2 * config.depth];
    const Tensor& head_b = p[2 * config.depth + 1];
    const Tensor logits = matmul(features, transpose(head_w));
    return add(logits, broadcast_to(reshape(head_b, {1, config.classes}), logits.shape()));
}

Tensor forward(const Model& model, const Tensor& batch) { return forward(model.config, model.params.data, batch); }

std::vector<int> predict(const ModelConfig& config, const Tensor& theta, const Tensor& images, std::size_t chunk) {
    const Tensor params = theta.detach();
    const std::size_t n = images.shape()[0];
    std::vector<int> out;
    out.reserve(n);
    for (std::size_t begin = 0; begin < n; begin += chunk) {
        const std::size_t end = std::min(n, begin + chunk);
        const Tensor logits = forward(config, params, slice0(images.detach(), begin, end));
        const auto v = logits.values();
        for (std::size_t i = 0; i < end - begin; ++i) {
            const double* row = &v[i * config.classes];
            out.push_back(static_cast<int>(std::max_element(row, row + config.classes) - row));
        }
    }
    return out;
}

}  // namespace distillforge
