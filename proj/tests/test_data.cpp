#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "distillforge/data.hpp"
#include "distillforge/image_io.hpp"
#include "distillforge/rng.hpp"

using namespace distillforge;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("distillforge_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

void write_gray(const fs::path& path, std::size_t w, std::size_t h, std::uint8_t base) {
    Image8 img{w, h, 1, {}};
    for (std::size_t i = 0; i < w * h; ++i) img.pixels.push_back(static_cast<std::uint8_t>(base + i));
    write_png(path, img);
}

/// Two-class logistic regression on raw pixels by plain gradient descent; returns train accuracy.
double linear_probe_accuracy(const LabeledDataset& ds) {
    const std::size_t n = ds.size(), d = ds.images.size() / n;
    std::vector<double> w(d, 0.0);
    double b = 0.0;
    const auto x = ds.images.values();
    for (int it = 0; it < 200; ++it) {
        std::vector<double> gw(d, 0.0);
        double gb = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double z = b;
            for (std::size_t j = 0; j < d; ++j) z += w[j] * (x[i * d + j] - 0.5);
            const double err = 1.0 / (1.0 + std::exp(-z)) - ds.labels[i];
            for (std::size_t j = 0; j < d; ++j) gw[j] += err * (x[i * d + j] - 0.5);
            gb += err;
        }
        for (std::size_t j = 0; j < d; ++j) w[j] -= 0.5 * gw[j] / n;
        b -= 0.5 * gb / n;
    }
    std::size_t correct = 0;
    for (std::size_t i = 0; i < n; ++i) {
        double z = b;
        for (std::size_t j = 0; j < d; ++j) z += w[j] * (x[i * d + j] - 0.5);
        correct += (z > 0) == (ds.labels[i] == 1);
    }
    return static_cast<double>(correct) / n;
}

}  // namespace

TEST_CASE("class-per-directory ingestion") {
    const fs::path root = fresh_dir("ingest");
    for (const char* cls : {"normal", "covid"}) {
        fs::create_directories(root / cls);
        for (int i = 0; i < 3; ++i) write_gray(root / cls / ("img" + std::to_string(i) + ".png"), 4, 3, i * 10);
    }
    const LabeledDataset ds = load_image_dir(root);
    CHECK(ds.size() == 6);
    CHECK(ds.classes() == 2);
    CHECK(ds.class_names == std::vector<std::string>{"covid", "normal"});
    CHECK(ds.labels == std::vector<int>{0, 0, 0, 1, 1, 1});
    CHECK(ds.images.shape() == Shape{6, 1, 3, 4});
    CHECK(ds.images[1] == doctest::Approx(1.0 / 255.0));
    for (double v : ds.images.values()) CHECK((v >= 0.0 && v <= 1.0));

    const LabeledDataset again = load_image_dir(root);
    CHECK(again.source_id == ds.source_id);
    CHECK(ds.source_id == directory_digest(root));
    CHECK(ds.source_id.size() == 64);

    write_gray(root / "covid" / "img0.png", 4, 3, 99);
    CHECK(load_image_dir(root).source_id != ds.source_id);
}

TEST_CASE("ingestion errors") {
    const fs::path root = fresh_dir("ingest_err");
    fs::create_directories(root / "a");
    fs::create_directories(root / "b");
    write_gray(root / "a" / "x.png", 2, 2, 0);
    CHECK_THROWS_WITH_AS(load_image_dir(root), doctest::Contains("empty class"), DataError);
    {
        std::ofstream(root / "b" / "bad.png") << "not a png";
    }
    CHECK_THROWS_WITH_AS(load_image_dir(root), doctest::Contains("bad.png"), DataError);
    CHECK_THROWS_AS(load_image_dir(root / "missing"), DataError);
}

TEST_CASE("resize") {
    SynthSpec spec;
    spec.height = spec.width = 224;
    spec.per_class = 1;
    spec.classes = 2;
    const LabeledDataset big = synth_gaussians(spec, 1);
    const LabeledDataset half = resize(big, 112, 112);
    CHECK(half.images.shape() == Shape{2, 1, 112, 112});
    for (double v : half.images.values()) CHECK((v >= 0.0 && v <= 1.0));

    const LabeledDataset same = resize(big, 224, 224);
    for (std::size_t i = 0; i < big.images.size(); ++i) CHECK(same.images[i] == big.images[i]);

    LabeledDataset flat = big;
    flat.images = Tensor::full(big.images.shape(), 0.375);
    for (auto [h, w] : {std::pair{7, 5}, {300, 17}, {1, 1}}) {
        const LabeledDataset r = resize(flat, h, w);
        for (double v : r.images.values()) CHECK(v == 0.375);
    }
    CHECK_THROWS(resize(big, 0, 3));
}

TEST_CASE("synthetic Gaussians") {
    SynthSpec spec;
    spec.classes = 2;
    spec.per_class = 40;
    spec.height = spec.width = 8;
    spec.separation = 0.3;
    spec.noise = 0.1;
    const LabeledDataset a = synth_gaussians(spec, 5), b = synth_gaussians(spec, 5);
    for (std::size_t i = 0; i < a.images.size(); ++i) CHECK(a.images[i] == b.images[i]);
    CHECK(a.source_id == b.source_id);
    CHECK(synth_gaussians(spec, 5, 1).source_id != a.source_id);
    CHECK(linear_probe_accuracy(a) == 1.0);

    // No separation: every class template is mid-gray, so noise-free samples coincide.
    spec.separation = 0.0;
    spec.noise = 0.0;
    const LabeledDataset flat = synth_gaussians(spec, 5);
    for (double v : flat.images.values()) CHECK(v == 0.5);
}

TEST_CASE("normalization") {
    SynthSpec spec;
    spec.classes = 3;
    spec.per_class = 10;
    spec.channels = 2;
    spec.height = spec.width = 6;
    LabeledDataset ds = synth_gaussians(spec, 2);
    const NormStats stats = compute_stats(ds);
    const LabeledDataset z = normalize(ds, stats);
    const Tensor back = denormalize(z.images, stats);
    for (std::size_t i = 0; i < back.size(); ++i) CHECK(std::abs(back[i] - ds.images[i]) < 1e-6);

    PrecisionGuard f64(Precision::F64);
    const LabeledDataset z64 = normalize(ds, stats);
    const NormStats again = compute_stats(z64);
    for (std::size_t c = 0; c < 2; ++c) {
        CHECK(std::abs(again.mean[c]) < 1e-6);
        CHECK(std::abs(again.std[c] - 1.0) < 1e-6);
    }

    LabeledDataset flat = ds;
    flat.images = Tensor::full(ds.images.shape(), 0.5);
    CHECK_THROWS_WITH(compute_stats(flat), doctest::Contains("zero variance"));
    ds.split = "test";
    CHECK_THROWS(compute_stats(ds));
}

TEST_CASE("stratified split is disjoint and reproducible") {
    SynthSpec spec;
    spec.classes = 3;
    spec.per_class = 20;
    spec.height = spec.width = 4;
    const LabeledDataset ds = synth_gaussians(spec, 3);
    const auto [tr, te] = split(ds, 0.25, 9);
    CHECK(tr.size() + te.size() == ds.size());
    CHECK(te.size() == 15);
    CHECK(tr.split == "train");
    CHECK(te.split == "test");
    CHECK(tr.source_id != te.source_id);
    std::set<std::vector<double>> rows;
    const std::size_t d = ds.images.size() / ds.size();
    for (const auto* part : {&tr, &te})
        for (std::size_t i = 0; i < part->size(); ++i)
            rows.insert(std::vector<double>(part->images.values().begin() + i * d,
                                            part->images.values().begin() + (i + 1) * d));
    CHECK(rows.size() == ds.size());
    const auto [tr2, te2] = split(ds, 0.25, 9);
    CHECK(tr2.labels == tr.labels);
    CHECK(tr2.source_id == tr.source_id);
    for (std::size_t i = 0; i < tr.images.size(); ++i) CHECK(tr2.images[i] == tr.images[i]);
}
