#include "distillforge/data.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "distillforge/digest.hpp"
#include "distillforge/image_io.hpp"
#include "distillforge/rng.hpp"

namespace fs = std::filesystem;

namespace distillforge {

std::vector<std::vector<std::size_t>> LabeledDataset::indices_by_class() const {
    std::vector<std::vector<std::size_t>> out(classes());
    for (std::size_t i = 0; i < labels.size(); ++i) out[static_cast<std::size_t>(labels[i])].push_back(i);
    return out;
}

void validate(const LabeledDataset& ds) {
    if (ds.images.rank() != 4) throw DataError("dataset images must be [N,C,H,W]");
    if (ds.images.shape()[0] != ds.labels.size())
        throw DataError("dataset has " + std::to_string(ds.images.shape()[0]) + " images but " +
                        std::to_string(ds.labels.size()) + " labels");
    for (int l : ds.labels)
        if (l < 0 || static_cast<std::size_t>(l) >= ds.class_names.size())
            throw DataError("label " + std::to_string(l) + " outside class range");
}

LabeledDataset subset(const LabeledDataset& ds, const std::vector<std::size_t>& indices, const std::string& tag) {
    LabeledDataset out;
    out.images = gather0(ds.images.detach(), indices);
    for (std::size_t i : indices) out.labels.push_back(ds.labels[i]);
    out.class_names = ds.class_names;
    out.split = ds.split;
    out.source_id = sha256_hex(ds.source_id + ":" + tag);
    return out;
}

namespace {

std::vector<fs::path> sorted_entries(const fs::path& dir, bool directories) {
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (directories ? e.is_directory() : (e.is_regular_file() && e.path().extension() == ".png"))
            out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

void hash_entry(Sha256Hasher& h, const std::string& name, std::span<const std::uint8_t> bytes) {
    h.update(name);
    const std::uint8_t nul = 0;
    h.update(std::span<const std::uint8_t>(&nul, 1));
    std::uint8_t len[8];
    std::uint64_t n = bytes.size();
    for (int i = 0; i < 8; ++i) len[i] = static_cast<std::uint8_t>(n >> (8 * i));
    h.update(std::span<const std::uint8_t>(len, 8));
    h.update(bytes);
}

}  // namespace

std::string directory_digest(const fs::path& root) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    Sha256Hasher h;
    for (const auto& f : files) hash_entry(h, fs::relative(f, root).generic_string(), read_file(f));
    const auto d = h.finish();
    return to_hex(d);
}

LabeledDataset load_image_dir(const fs::path& root) {
    if (!fs::is_directory(root)) throw DataError("data directory not found: " + root.string());
    const auto class_dirs = sorted_entries(root, true);
    if (class_dirs.size() < 2) throw DataError("need at least two class directories under " + root.string());

    LabeledDataset ds;
    Sha256Hasher h;
    std::vector<double> values;
    std::size_t channels = 0, height = 0, width = 0;
    for (std::size_t c = 0; c < class_dirs.size(); ++c) {
        ds.class_names.push_back(class_dirs[c].filename().string());
        const auto files = sorted_entries(class_dirs[c], false);
        if (files.empty()) throw DataError("empty class: " + ds.class_names.back());
        for (const auto& f : files) {
            const auto bytes = read_file(f);
            hash_entry(h, fs::relative(f, root).generic_string(), bytes);
            const Image8 img = decode_png(bytes, f);
            if (values.empty()) {
                channels = img.channels;
                height = img.height;
                width = img.width;
            } else if (img.channels != channels || img.height != height || img.width != width) {
                throw DataError("image " + f.string() + " differs in size or channels from the first image");
            }
            // interleaved HWC bytes -> planar CHW in [0,1]
            for (std::size_t ch = 0; ch < channels; ++ch)
                for (std::size_t p = 0; p < height * width; ++p)
                    values.push_back(img.pixels[p * channels + ch] / 255.0);
            ds.labels.push_back(static_cast<int>(c));
        }
    }
    ds.images = Tensor({ds.labels.size(), channels, height, width}, std::move(values));
    const auto d = h.finish();
    ds.source_id = to_hex(d);
    return ds;
}

LabeledDataset resize(const LabeledDataset& ds, std::size_t height, std::size_t width) {
    if (height == 0 || width == 0) throw std::invalid_argument("resize: target extents must be positive");
    if (height == ds.height() && width == ds.width()) return ds;
    const std::size_t n = ds.size(), c = ds.channels(), ih = ds.height(), iw = ds.width();
    struct Axis {
        std::size_t lo, hi;
        double frac;
    };
    auto axis = [](std::size_t out, std::size_t in) {
        std::vector<Axis> a(out);
        const double s = static_cast<double>(in) / static_cast<double>(out);
        for (std::size_t i = 0; i < out; ++i) {
            double src = (static_cast<double>(i) + 0.5) * s - 0.5;
            src = std::clamp(src, 0.0, static_cast<double>(in - 1));
            const auto lo = static_cast<std::size_t>(std::floor(src));
            a[i] = {lo, std::min(lo + 1, in - 1), src - static_cast<double>(lo)};
        }
        return a;
    };
    const auto ys = axis(height, ih), xs = axis(width, iw);
    std::vector<double> v(n * c * height * width);
    const auto src = ds.images.values();
    for (std::size_t p = 0; p < n * c; ++p) {
        const double* in = &src[p * ih * iw];
        double* out = &v[p * height * width];
        for (std::size_t y = 0; y < height; ++y)
            for (std::size_t x = 0; x < width; ++x) {
                const auto& ay = ys[y];
                const auto& ax = xs[x];
                const double top = in[ay.lo * iw + ax.lo] * (1 - ax.frac) + in[ay.lo * iw + ax.hi] * ax.frac;
                const double bot = in[ay.hi * iw + ax.lo] * (1 - ax.frac) + in[ay.hi * iw + ax.hi] * ax.frac;
                out[y * width + x] = std::clamp(top * (1 - ay.frac) + bot * ay.frac, 0.0, 1.0);
            }
    }
    LabeledDataset out = ds;
    out.images = Tensor({n, c, height, width}, std::move(v));
    out.source_id = sha256_hex(ds.source_id + ":resize:" + std::to_string(height) + "x" + std::to_string(width));
    return out;
}

nlohmann::json to_json(const SynthSpec& s) {
    return {{"classes", s.classes},     {"per_class", s.per_class},  {"channels", s.channels},
            {"height", s.height},       {"width", s.width},          {"separation", s.separation},
            {"noise", s.noise},         {"template_grid", s.template_grid}};
}

SynthSpec synth_spec_from_json(const nlohmann::json& j) {
    SynthSpec s;
    s.classes = j.at("classes").get<std::size_t>();
    s.per_class = j.at("per_class").get<std::size_t>();
    s.channels = j.at("channels").get<std::size_t>();
    s.height = j.at("height").get<std::size_t>();
    s.width = j.at("width").get<std::size_t>();
    s.separation = j.at("separation").get<double>();
    s.noise = j.at("noise").get<double>();
    s.template_grid = j.at("template_grid").get<std::size_t>();
    return s;
}

LabeledDataset synth_gaussians(const SynthSpec& spec, std::uint64_t seed, std::uint64_t stream) {
    if (spec.classes < 2) throw std::invalid_argument("synth: classes must be at least 2");
    if (spec.separation < 0.0) throw std::invalid_argument("synth: separation must be non-negative");
    if (spec.template_grid == 0 || spec.per_class == 0) throw std::invalid_argument("synth: empty spec");
    const std::size_t c = spec.channels, h = spec.height, w = spec.width, px = c * h * w;

    // Smooth templates: a coarse Gaussian grid upsampled bilinearly, scaled to unit RMS.
    Rng trng(derive_seed(seed, 0));
    std::vector<std::vector<double>> templates;
    for (std::size_t k = 0; k < spec.classes; ++k) {
        const std::size_t g = spec.template_grid;
        std::vector<double> grid(c * g * g);
        for (double& v : grid) v = trng.normal();
        std::vector<double> t(px);
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x) {
                    const double sy = std::clamp((y + 0.5) * g / h - 0.5, 0.0, g - 1.0);
                    const double sx = std::clamp((x + 0.5) * g / w - 0.5, 0.0, g - 1.0);
                    const auto y0 = static_cast<std::size_t>(sy), x0 = static_cast<std::size_t>(sx);
                    const std::size_t y1 = std::min(y0 + 1, g - 1), x1 = std::min(x0 + 1, g - 1);
                    const double fy = sy - y0, fx = sx - x0;
                    const double* gr = &grid[ch * g * g];
                    t[(ch * h + y) * w + x] = (gr[y0 * g + x0] * (1 - fx) + gr[y0 * g + x1] * fx) * (1 - fy) +
                                              (gr[y1 * g + x0] * (1 - fx) + gr[y1 * g + x1] * fx) * fy;
                }
        double ms = 0.0;
        for (double v : t) ms += v * v;
        const double rms = std::sqrt(ms / static_cast<double>(px));
        for (double& v : t) v = 0.5 + spec.separation * v / rms;
        templates.push_back(std::move(t));
    }

    Rng srng(derive_seed(seed, 1 + stream));
    LabeledDataset ds;
    std::vector<double> values;
    values.reserve(spec.classes * spec.per_class * px);
    for (std::size_t k = 0; k < spec.classes; ++k) {
        ds.class_names.push_back("class" + std::to_string(k));
        for (std::size_t i = 0; i < spec.per_class; ++i) {
            for (std::size_t p = 0; p < px; ++p)
                values.push_back(std::clamp(templates[k][p] + spec.noise * srng.normal(), 0.0, 1.0));
            ds.labels.push_back(static_cast<int>(k));
        }
    }
    ds.images = Tensor({ds.labels.size(), c, h, w}, std::move(values));
    ds.source_id = sha256_hex("synth:" + to_json(spec).dump() + ":" + std::to_string(seed) + ":" +
                              std::to_string(stream));
    return ds;
}

std::pair<LabeledDataset, LabeledDataset> split(const LabeledDataset& ds, double test_fraction, std::uint64_t seed) {
    if (!(test_fraction > 0.0 && test_fraction < 1.0))
        throw std::invalid_argument("data.test_fraction must be in (0, 1)");
    Rng rng(seed);
    std::vector<std::size_t> train, test;
    for (auto idx : ds.indices_by_class()) {
        rng.shuffle(idx);
        auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(idx.size())));
        n_test = std::clamp<std::size_t>(n_test, 1, idx.size() > 1 ? idx.size() - 1 : 1);
        std::vector<std::size_t> te(idx.begin(), idx.begin() + static_cast<long>(n_test));
        std::vector<std::size_t> tr(idx.begin() + static_cast<long>(n_test), idx.end());
        std::sort(te.begin(), te.end());
        std::sort(tr.begin(), tr.end());
        test.insert(test.end(), te.begin(), te.end());
        train.insert(train.end(), tr.begin(), tr.end());
    }
    std::sort(train.begin(), train.end());
    std::sort(test.begin(), test.end());
    std::ostringstream tag;
    tag.precision(17);
    tag << "split:" << test_fraction << ':' << seed << ':';
    LabeledDataset tr = subset(ds, train, tag.str() + "train");
    LabeledDataset te = subset(ds, test, tag.str() + "test");
    tr.split = "train";
    te.split = "test";
    return {std::move(tr), std::move(te)};
}

nlohmann::json to_json(const NormStats& s) { return {{"mean", s.mean}, {"std", s.std}}; }

NormStats norm_stats_from_json(const nlohmann::json& j) {
    return {j.at("mean").get<std::vector<double>>(), j.at("std").get<std::vector<double>>()};
}

NormStats compute_stats(const LabeledDataset& ds) {
    if (ds.split == "test") throw std::invalid_argument("compute_stats: statistics come from the train split only");
    const std::size_t n = ds.size(), c = ds.channels(), px = ds.height() * ds.width();
    NormStats s{std::vector<double>(c, 0.0), std::vector<double>(c, 0.0)};
    const auto v = ds.images.values();
    for (std::size_t ch = 0; ch < c; ++ch) {
        double sum = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t p = 0; p < px; ++p) sum += v[(i * c + ch) * px + p];
        const double m = sum / static_cast<double>(n * px);
        double sq = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t p = 0; p < px; ++p) {
                const double d = v[(i * c + ch) * px + p] - m;
                sq += d * d;
            }
        const double sd = std::sqrt(sq / static_cast<double>(n * px));
        if (!(sd > 0.0)) throw std::invalid_argument("compute_stats: channel " + std::to_string(ch) + " has zero variance");
        s.mean[ch] = m;
        s.std[ch] = sd;
    }
    return s;
}

namespace {

Tensor affine_per_channel(const Tensor& images, const NormStats& stats, bool forward) {
    const std::size_t n = images.shape()[0], c = images.shape()[1], px = images.shape()[2] * images.shape()[3];
    if (stats.mean.size() != c || stats.std.size() != c)
        throw std::invalid_argument("normalization stats do not match channel count");
    std::vector<double> v(images.values().begin(), images.values().end());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t p = 0; p < px; ++p) {
                double& x = v[(i * c + ch) * px + p];
                x = forward ? (x - stats.mean[ch]) / stats.std[ch] : x * stats.std[ch] + stats.mean[ch];
            }
    return Tensor(images.shape(), std::move(v));
}

}  // namespace

Tensor normalize(const Tensor& images, const NormStats& stats) { return affine_per_channel(images, stats, true); }
Tensor denormalize(const Tensor& images, const NormStats& stats) { return affine_per_channel(images, stats, false); }

LabeledDataset normalize(const LabeledDataset& ds, const NormStats& stats) {
    LabeledDataset out = ds;
    out.images = normalize(ds.images, stats);
    return out;
}

}  // namespace distillforge
