#include "distillforge/teacher.hpp"

#include <cmath>
#include <cstdio>

#include "distillforge/envelope.hpp"
#include "distillforge/image_io.hpp"
#include "distillforge/parallel.hpp"

namespace fs = std::filesystem;

namespace distillforge {

nlohmann::json to_json(const OptimizerDescriptor& o) {
    return {{"kind", o.kind}, {"lr", o.lr}, {"momentum", o.momentum}, {"batch_size", o.batch_size}};
}

OptimizerDescriptor optimizer_from_json(const nlohmann::json& j) {
    return {j.at("kind").get<std::string>(), j.at("lr").get<double>(), j.at("momentum").get<double>(),
            j.at("batch_size").get<std::size_t>()};
}

void Trajectory::validate() const {
    if (snapshots.empty()) throw FormatError("trajectory has no snapshots");
    if (steps.size() != snapshots.size()) throw FormatError("trajectory steps and snapshots differ in count");
    if (steps.front() != 0) throw FormatError("trajectory must start at step 0");
    for (std::size_t i = 1; i < steps.size(); ++i)
        if (steps[i] <= steps[i - 1]) throw FormatError("trajectory steps must be strictly increasing");
    const std::size_t p = layout_size(layout);
    for (const auto& s : snapshots)
        if (s.rank() != 1 || s.size() != p) throw FormatError("trajectory snapshot does not match layout");
}

std::vector<std::size_t> balanced_epoch_order(const std::vector<std::vector<std::size_t>>& by_class,
                                              std::size_t total, Rng& rng) {
    std::vector<std::size_t> classes;
    for (std::size_t c = 0; c < by_class.size(); ++c)
        if (!by_class[c].empty()) classes.push_back(c);
    std::vector<std::vector<std::size_t>> pools(by_class.size());
    std::vector<std::size_t> cursor(by_class.size(), 0);
    std::vector<std::size_t> round;
    std::vector<std::size_t> order;
    order.reserve(total);
    while (order.size() < total) {
        if (round.empty()) {
            round = classes;
            rng.shuffle(round);
        }
        const std::size_t c = round.back();
        round.pop_back();
        if (cursor[c] == pools[c].size()) {
            pools[c] = by_class[c];
            rng.shuffle(pools[c]);
            cursor[c] = 0;
        }
        order.push_back(pools[c][cursor[c]++]);
    }
    return order;
}

LossAccuracy evaluate_params(const ModelConfig& config, const Tensor& theta, const LabeledDataset& ds,
                             std::size_t chunk) {
    const Tensor params = theta.detach();
    double loss = 0.0;
    std::size_t correct = 0;
    for (std::size_t begin = 0; begin < ds.size(); begin += chunk) {
        const std::size_t end = std::min(ds.size(), begin + chunk);
        const Tensor logits = forward(config, params, slice0(ds.images.detach(), begin, end));
        const std::span<const int> labels(ds.labels.data() + begin, end - begin);
        loss += softmax_cross_entropy(logits, labels).item() * static_cast<double>(end - begin);
        const auto v = logits.values();
        for (std::size_t i = 0; i < end - begin; ++i) {
            const double* row = &v[i * config.classes];
            correct += (std::max_element(row, row + config.classes) - row) == labels[i];
        }
    }
    const auto n = static_cast<double>(std::max<std::size_t>(ds.size(), 1));
    return {loss / n, static_cast<double>(correct) / n};
}

Tensor fit(const LabeledDataset& train, const ModelConfig& config, const TeacherOptions& options,
           std::uint64_t seed, const std::function<void(std::size_t, const Tensor&)>& on_epoch) {
    if (train.size() == 0) throw std::invalid_argument("training set is empty");
    if (options.optimizer.batch_size == 0) throw std::invalid_argument("batch_size must be positive");
    validate(train);

    const Model init = build(config, derive_seed(seed, 0));
    Rng order_rng(derive_seed(seed, 1));
    Rng aug_rng(derive_seed(seed, 2));
    const auto by_class = train.indices_by_class();
    const auto& opt = options.optimizer;
    if (on_epoch) on_epoch(0, init.params.data);

    const std::size_t p = init.params.size();
    std::vector<double> theta(init.params.data.values().begin(), init.params.data.values().end());
    std::vector<double> velocity(p, 0.0);
    Tensor current = init.params.data;
    const Tensor images = train.images.detach();

    for (std::size_t epoch = 1; epoch <= options.epochs; ++epoch) {
        const auto order = balanced_epoch_order(by_class, train.size(), order_rng);
        try {
            for (std::size_t begin = 0; begin < order.size(); begin += opt.batch_size) {
                const std::size_t end = std::min(order.size(), begin + opt.batch_size);
                const std::span<const std::size_t> idx(order.data() + begin, end - begin);
                Tensor x = gather0(images, idx);
                if (options.augmentation) x = apply(x, sample(*options.augmentation, idx.size(), aug_rng));
                std::vector<int> labels;
                for (std::size_t i : idx) labels.push_back(train.labels[i]);

                Graph g;
                const Tensor th = g.leaf(current);
                const Tensor loss = softmax_cross_entropy(forward(config, th, x), labels);
                const Tensor gr = grad(loss, {th})[0];
                const auto gv = gr.values();
                for (std::size_t k = 0; k < p; ++k) {
                    velocity[k] = opt.momentum * velocity[k] + gv[k];
                    theta[k] -= opt.lr * velocity[k];
                    if (!std::isfinite(theta[k])) throw NumericError("sgd", "non-finite parameter");
                }
                current = Tensor({p}, theta);
                const auto rounded = current.values();
                std::copy(rounded.begin(), rounded.end(), theta.begin());
            }
        } catch (const NumericError& e) {
            throw NumericError(e.op, "training diverged in epoch " + std::to_string(epoch) + ": " + e.what());
        }
        if (on_epoch) on_epoch(epoch, current);
    }
    return current;
}

Trajectory train_teacher(const LabeledDataset& train, const ModelConfig& config, const TeacherOptions& options,
                         std::uint64_t seed) {
    if (options.epochs == 0) throw std::invalid_argument("teacher.epochs must be at least 1");
    Trajectory t;
    t.config = config;
    t.config_hash = config.hash();
    t.dataset_digest = train.source_id;
    t.seed = seed;
    t.optimizer = options.optimizer;
    t.augmentation = options.augmentation;
    t.layout = make_layout(config);
    fit(train, config, options, seed, [&t](std::size_t epoch, const Tensor& theta) {
        t.snapshots.push_back(theta);
        t.steps.push_back(epoch);
    });
    return t;
}

std::vector<Trajectory> train_teachers(const LabeledDataset& train, const ModelConfig& config,
                                       const TeacherOptions& options, std::size_t count, std::uint64_t seed,
                                       std::size_t threads) {
    std::vector<Trajectory> out(count);
    parallel_for(count, threads, [&](std::size_t i) {
        out[i] = train_teacher(train, config, options, derive_seed(seed, 1000 + i));
    });
    return out;
}

// ---- files ------------------------------------------------------------------------------

namespace {

constexpr std::array<char, 4> kTrajectoryMagic{'D', 'F', 'T', 'J'};

nlohmann::json layout_json(const ParamLayout& layout) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& b : layout) j.push_back({{"name", b.name}, {"shape", b.shape}});
    return j;
}

ParamLayout layout_from_json(const nlohmann::json& j) {
    ParamLayout layout;
    for (const auto& b : j) layout.push_back({b.at("name").get<std::string>(), b.at("shape").get<Shape>()});
    return layout;
}

}  // namespace

void write_trajectory(const fs::path& path, const Trajectory& t) {
    t.validate();
    Envelope e;
    e.magic = kTrajectoryMagic;
    e.metadata = {{"kind", "trajectory"},
                  {"config", to_json(t.config)},
                  {"config_hash", t.config_hash},
                  {"dataset_digest", t.dataset_digest},
                  {"seed", t.seed},
                  {"steps", t.steps},
                  {"optimizer", to_json(t.optimizer)},
                  {"augmentation", t.augmentation ? to_json(*t.augmentation) : nlohmann::json(nullptr)},
                  {"layout", layout_json(t.layout)},
                  {"param_count", layout_size(t.layout)},
                  {"snapshot_count", t.snapshots.size()}};
    for (const auto& s : t.snapshots)
        for (double v : s.values()) e.payload.push_back(static_cast<float>(v));
    write_envelope(path, e);
}

Trajectory read_trajectory(const fs::path& path) {
    const Envelope e = read_envelope(path, kTrajectoryMagic);
    Trajectory t;
    try {
        const auto& m = e.metadata;
        t.config = model_config_from_json(m.at("config"));
        t.config_hash = m.at("config_hash").get<std::string>();
        t.dataset_digest = m.at("dataset_digest").get<std::string>();
        t.seed = m.at("seed").get<std::uint64_t>();
        t.steps = m.at("steps").get<std::vector<std::size_t>>();
        t.optimizer = optimizer_from_json(m.at("optimizer"));
        if (!m.at("augmentation").is_null()) t.augmentation = augmentation_from_json(m.at("augmentation"));
        t.layout = layout_from_json(m.at("layout"));
        const auto p = m.at("param_count").get<std::size_t>();
        const auto count = m.at("snapshot_count").get<std::size_t>();
        if (p != layout_size(t.layout) || p * count != e.payload.size())
            throw FormatError("payload size does not match metadata");
        for (std::size_t s = 0; s < count; ++s) {
            std::vector<double> v(e.payload.begin() + static_cast<long>(s * p),
                                  e.payload.begin() + static_cast<long>((s + 1) * p));
            t.snapshots.push_back(Tensor::from_storage({p}, std::make_shared<const std::vector<double>>(std::move(v))));
        }
    } catch (const nlohmann::json::exception& ex) {
        throw FormatError(path.string() + ": malformed metadata: " + ex.what());
    }
    t.validate();
    return t;
}

TrajectoryStore TrajectoryStore::record(const fs::path& dir, const std::vector<Trajectory>& trajectories) {
    if (trajectories.empty()) throw std::invalid_argument("store: no trajectories to record");
    for (const auto& t : trajectories) {
        if (t.config_hash != trajectories.front().config_hash)
            throw std::invalid_argument("store: mixed model config hashes");
        if (t.dataset_digest != trajectories.front().dataset_digest)
            throw std::invalid_argument("store: mixed dataset digests");
    }
    fs::create_directories(dir);
    TrajectoryStore store;
    store.dir_ = dir;
    store.config_hash_ = trajectories.front().config_hash;
    store.dataset_digest_ = trajectories.front().dataset_digest;
    for (std::size_t i = 0; i < trajectories.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "teacher_%04zu.dftj", i);
        write_trajectory(dir / name, trajectories[i]);
        store.files_.push_back(name);
    }
    const nlohmann::json manifest = {{"format", "distillforge-trajectory-store"},
                                     {"version", 1},
                                     {"count", store.files_.size()},
                                     {"config_hash", store.config_hash_},
                                     {"dataset_digest", store.dataset_digest_},
                                     {"files", store.files_}};
    write_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
    return store;
}

TrajectoryStore TrajectoryStore::open(const fs::path& dir) {
    const fs::path mpath = dir / "manifest.json";
    if (!fs::exists(mpath)) throw DataError("no trajectory store manifest at " + mpath.string());
    const auto bytes = read_file(mpath);
    TrajectoryStore store;
    store.dir_ = dir;
    try {
        const auto m = nlohmann::json::parse(bytes.begin(), bytes.end());
        store.files_ = m.at("files").get<std::vector<std::string>>();
        store.config_hash_ = m.at("config_hash").get<std::string>();
        store.dataset_digest_ = m.at("dataset_digest").get<std::string>();
        if (m.at("count").get<std::size_t>() != store.files_.size())
            throw FormatError(mpath.string() + ": count does not match file list");
    } catch (const nlohmann::json::exception& ex) {
        throw FormatError(mpath.string() + ": malformed manifest: " + ex.what());
    }
    if (store.files_.empty()) throw FormatError(mpath.string() + ": empty store");
    return store;
}

Trajectory TrajectoryStore::load(std::size_t index) const {
    if (index >= files_.size()) throw std::out_of_range("store: trajectory index out of range");
    Trajectory t = read_trajectory(dir_ / files_[index]);
    if (t.config_hash != config_hash_ || t.dataset_digest != dataset_digest_)
        throw FormatError(files_[index] + ": does not belong to this store");
    return t;
}

std::vector<Trajectory> TrajectoryStore::load_all() const {
    std::vector<Trajectory> out;
    for (std::size_t i = 0; i < count(); ++i) out.push_back(load(i));
    return out;
}

}  // namespace distillforge
