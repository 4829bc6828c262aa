#include "distillforge/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "distillforge/parallel.hpp"
#include "distillforge/teacher.hpp"

namespace distillforge {

nlohmann::json to_json(const EvalOptions& o) {
    return {{"epochs", o.epochs},
            {"momentum", o.momentum},
            {"batch_size", o.batch_size},
            {"lr", o.lr},
            {"augmentation", o.augmentation ? to_json(*o.augmentation) : nlohmann::json(nullptr)}};
}

EvalOptions eval_options_from_json(const nlohmann::json& j) {
    EvalOptions o;
    o.epochs = j.at("epochs").get<std::size_t>();
    o.momentum = j.at("momentum").get<double>();
    o.batch_size = j.at("batch_size").get<std::size_t>();
    o.lr = j.at("lr").get<double>();
    if (!j.at("augmentation").is_null()) o.augmentation = augmentation_from_json(j.at("augmentation"));
    return o;
}

std::size_t EvalReport::succeeded() const {
    return static_cast<std::size_t>(std::count(failed.begin(), failed.end(), 0));
}

void EvalReport::aggregate() {
    const std::size_t n = succeeded();
    double s = 0.0;
    for (std::size_t i = 0; i < accuracies.size(); ++i)
        if (!failed[i]) s += accuracies[i];
    mean = n ? s / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
    double ss = 0.0;
    for (std::size_t i = 0; i < accuracies.size(); ++i)
        if (!failed[i]) ss += (accuracies[i] - mean) * (accuracies[i] - mean);
    std = n > 1 ? std::sqrt(ss / static_cast<double>(n - 1)) : 0.0;
}

nlohmann::json to_json(const EvalReport& r) {
    nlohmann::json acc = nlohmann::json::array();
    for (std::size_t i = 0; i < r.accuracies.size(); ++i)
        acc.push_back(r.failed[i] ? nlohmann::json(nullptr) : nlohmann::json(r.accuracies[i]));
    return {{"kind", r.kind},
            {"ipc", r.ipc},
            {"epochs", r.epochs},
            {"lr", r.lr},
            {"config_hash", r.config_hash},
            {"seeds", r.seeds},
            {"accuracies", acc},
            {"failed_seeds", r.accuracies.size() - r.succeeded()},
            {"mean", r.succeeded() ? nlohmann::json(r.mean) : nlohmann::json(nullptr)},
            {"std", r.std}};
}

EvalReport eval_report_from_json(const nlohmann::json& j) {
    EvalReport r;
    r.kind = j.at("kind").get<std::string>();
    r.ipc = j.at("ipc").get<std::size_t>();
    r.epochs = j.at("epochs").get<std::size_t>();
    r.lr = j.at("lr").get<double>();
    r.config_hash = j.at("config_hash").get<std::string>();
    r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    for (const auto& a : j.at("accuracies")) {
        r.failed.push_back(a.is_null());
        r.accuracies.push_back(a.is_null() ? 0.0 : a.get<double>());
    }
    r.aggregate();
    return r;
}

std::optional<double> train_and_test(const LabeledDataset& train, const LabeledDataset& test,
                                     const ModelConfig& config, std::uint64_t seed, const EvalOptions& options,
                                     double lr) {
    TeacherOptions t;
    t.epochs = options.epochs;
    t.optimizer.lr = lr;
    t.optimizer.momentum = options.momentum;
    t.optimizer.batch_size = options.batch_size;
    t.augmentation = options.augmentation;
    try {
        const Tensor theta = fit(train, config, t, seed);
        return evaluate_params(config, theta, test).accuracy;
    } catch (const NumericError&) {
        return std::nullopt;
    }
}

LabeledDataset as_labeled(const DistilledDataset& dc) {
    LabeledDataset ds;
    ds.images = dc.images.detach();
    ds.labels = dc.labels;
    ds.class_names = dc.class_names;
    ds.split = "distilled";
    ds.source_id = "distilled";
    return ds;
}

namespace {

EvalReport run_seeds(const std::string& kind, std::size_t ipc, const ModelConfig& config,
                     const std::vector<std::uint64_t>& seeds, const EvalOptions& options, double lr,
                     const std::function<std::optional<double>(std::uint64_t)>& one) {
    EvalReport r;
    r.kind = kind;
    r.ipc = ipc;
    r.epochs = options.epochs;
    r.lr = lr;
    r.config_hash = config.hash();
    r.seeds = seeds;
    r.accuracies.assign(seeds.size(), 0.0);
    r.failed.assign(seeds.size(), 0);
    parallel_for(seeds.size(), options.threads, [&](std::size_t i) {
        const auto acc = one(seeds[i]);
        if (acc)
            r.accuracies[i] = *acc;
        else
            r.failed[i] = 1;
    });
    r.aggregate();
    return r;
}

void check_test_split(const LabeledDataset& test, const ModelConfig& config) {
    if (test.split == "train") throw std::invalid_argument("evaluation needs a held-out split, got the train split");
    if (test.images.shape() != config.input_shape(test.size()) || test.classes() != config.classes)
        throw ShapeError("test set " + shape_str(test.images.shape()) + " does not match the model config");
}

}  // namespace

EvalReport eval_student(const DistilledDataset& dc, const LabeledDataset& test, const std::vector<std::uint64_t>& seeds,
                        const EvalOptions& options) {
    check_test_split(test, dc.config);
    for (const char* key : {"source", "dataset_digest"})
        if (dc.provenance.contains(key) && dc.provenance[key] == test.source_id)
            throw std::invalid_argument("test set digest matches the distillation source data");
    const LabeledDataset train = as_labeled(dc);
    const double lr = dc.alpha();
    return run_seeds("distilled", dc.ipc, dc.config, seeds, options, lr, [&](std::uint64_t seed) {
        return train_and_test(train, test, dc.config, seed, options, lr);
    });
}

std::vector<std::size_t> random_real_indices(const LabeledDataset& train, std::size_t ipc, std::uint64_t seed) {
    const auto by_class = train.indices_by_class();
    Rng rng(derive_seed(seed, 99));
    std::vector<std::size_t> out;
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        if (by_class[c].size() < ipc)
            throw DataError("class " + train.class_names[c] + " has fewer than ipc=" + std::to_string(ipc) +
                            " examples");
        auto pool = by_class[c];
        rng.shuffle(pool);
        out.insert(out.end(), pool.begin(), pool.begin() + static_cast<long>(ipc));
    }
    return out;
}

EvalReport baseline_random_real(const LabeledDataset& train, const LabeledDataset& test, const ModelConfig& config,
                                std::size_t ipc, const std::vector<std::uint64_t>& seeds, const EvalOptions& options) {
    check_test_split(test, config);
    for (auto seed : seeds) random_real_indices(train, ipc, seed);
    return run_seeds("random-real", ipc, config, seeds, options, options.lr, [&](std::uint64_t seed) {
        const auto sub = subset(train, random_real_indices(train, ipc, seed), "random-real");
        return train_and_test(sub, test, config, seed, options, options.lr);
    });
}

EvalReport eval_full(const LabeledDataset& train, const LabeledDataset& test, const ModelConfig& config,
                     const std::vector<std::uint64_t>& seeds, const EvalOptions& options) {
    check_test_split(test, config);
    const std::size_t per_class = train.size() / std::max<std::size_t>(1, train.classes());
    return run_seeds("full", per_class, config, seeds, options, options.lr, [&](std::uint64_t seed) {
        return train_and_test(train, test, config, seed, options, options.lr);
    });
}

// ---- audit --------------------------------------------------------------------------------

NearestNeighbors nearest_neighbors(const Tensor& queries, const Tensor& refs, bool skip_same_index) {
    const std::size_t nq = queries.shape().at(0), nr = refs.shape().at(0);
    if (nq == 0 || nr == 0) throw std::invalid_argument("nearest_neighbors: empty input");
    const std::size_t d = queries.size() / nq;
    if (refs.size() / nr != d) throw ShapeError("nearest_neighbors: image sizes differ");
    const auto q = queries.values(), r = refs.values();
    NearestNeighbors out;
    out.distances.resize(nq);
    out.indices.resize(nq);
    for (std::size_t i = 0; i < nq; ++i) {
        double best = std::numeric_limits<double>::infinity();
        std::size_t arg = 0;
        const double* a = q.data() + i * d;
        for (std::size_t j = 0; j < nr; ++j) {
            if (skip_same_index && i == j) continue;
            const double* b = r.data() + j * d;
            double s = 0.0;
            for (std::size_t k = 0; k < d; ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
            if (s < best) {
                best = s;
                arg = j;
            }
        }
        out.distances[i] = std::sqrt(best / static_cast<double>(d));
        out.indices[i] = arg;
    }
    return out;
}

AuditReport audit(const DistilledDataset& dc, const LabeledDataset& train, std::size_t bins) {
    if (bins == 0) throw std::invalid_argument("audit: bins must be positive");
    const Tensor px = dc.export_pixels();
    const auto nn = nearest_neighbors(px, to_pixels(train.images, dc.stats));
    AuditReport r;
    r.distances = nn.distances;
    r.nearest = nn.indices;
    r.argmin = static_cast<std::size_t>(std::min_element(r.distances.begin(), r.distances.end()) - r.distances.begin());
    r.min_distance = r.distances[r.argmin];
    const double hi = std::max(*std::max_element(r.distances.begin(), r.distances.end()), 1e-12);
    for (std::size_t b = 0; b <= bins; ++b) r.bin_edges.push_back(hi * static_cast<double>(b) / static_cast<double>(bins));
    r.histogram.assign(bins, 0);
    for (double v : r.distances)
        ++r.histogram[std::min(bins - 1, static_cast<std::size_t>(v / hi * static_cast<double>(bins)))];
    r.compression_ratio = static_cast<double>(dc.size()) / static_cast<double>(train.size());
    return r;
}

nlohmann::json to_json(const AuditReport& r) {
    return {{"distances", r.distances},         {"nearest", r.nearest},     {"min_distance", r.min_distance},
            {"argmin", r.argmin},               {"bin_edges", r.bin_edges}, {"histogram", r.histogram},
            {"compression_ratio", r.compression_ratio}};
}

AuditReport audit_report_from_json(const nlohmann::json& j) {
    AuditReport r;
    r.distances = j.at("distances").get<std::vector<double>>();
    r.nearest = j.at("nearest").get<std::vector<std::size_t>>();
    r.min_distance = j.at("min_distance").get<double>();
    r.argmin = j.at("argmin").get<std::size_t>();
    r.bin_edges = j.at("bin_edges").get<std::vector<double>>();
    r.histogram = j.at("histogram").get<std::vector<std::size_t>>();
    r.compression_ratio = j.at("compression_ratio").get<double>();
    return r;
}

double percentile(std::vector<double> values, double q) {
    if (values.empty()) throw std::invalid_argument("percentile of an empty sample");
    std::sort(values.begin(), values.end());
    const double pos = std::clamp(q, 0.0, 100.0) / 100.0 * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

}  // namespace distillforge
