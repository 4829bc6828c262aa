#include "distillforge/distiller.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "distillforge/envelope.hpp"

namespace distillforge {

StudentForward convnet_forward(const ModelConfig& config) {
    return [config](const Tensor& theta, const Tensor& batch) { return forward(config, theta, batch); };
}

std::string to_string(InitMode m) { return m == InitMode::Noise ? "noise" : "real"; }

InitMode init_mode_from_string(const std::string& s) {
    if (s == "noise") return InitMode::Noise;
    if (s == "real") return InitMode::RealSample;
    throw std::invalid_argument("unknown init mode '" + s + "' (expected noise or real)");
}

double DistilledDataset::alpha() const { return std::exp(log_alpha); }

Tensor to_pixels(const Tensor& images, const NormStats& stats) {
    const Tensor px = stats.mean.empty() ? images.detach() : denormalize(images.detach(), stats);
    std::vector<double> v(px.values().begin(), px.values().end());
    for (auto& x : v) x = std::clamp(x, 0.0, 1.0);
    return Tensor(px.shape(), std::move(v));
}

Tensor DistilledDataset::export_pixels() const { return to_pixels(images, stats); }

DistilledDataset init_distilled(const ModelConfig& config, std::size_t ipc, InitMode mode, std::uint64_t seed,
                                const LabeledDataset* real, const NormStats& stats) {
    config.validate();
    if (ipc == 0) throw std::invalid_argument("ipc must be at least 1");
    DistilledDataset dc;
    dc.ipc = ipc;
    dc.config = config;
    dc.stats = stats;
    dc.log_alpha = std::log(0.01);
    for (std::size_t c = 0; c < config.classes; ++c)
        for (std::size_t k = 0; k < ipc; ++k) dc.labels.push_back(static_cast<int>(c));
    const Shape shape = config.input_shape(dc.labels.size());
    Rng rng(seed);
    dc.provenance = {{"init", to_string(mode)}, {"seed", seed}, {"config_hash", config.hash()}};

    if (mode == InitMode::Noise) {
        std::vector<double> v(numel(shape));
        for (auto& x : v) x = rng.normal();
        dc.images = Tensor(shape, std::move(v));
        for (std::size_t c = 0; c < config.classes; ++c) dc.class_names.push_back("class" + std::to_string(c));
        if (real) dc.class_names = real->class_names;
        return dc;
    }

    if (!real) throw std::invalid_argument("real-sample init needs a dataset");
    if (real->classes() != config.classes || real->images.shape() != config.input_shape(real->size()))
        throw ShapeError("real-sample init: dataset does not match the model config");
    const auto by_class = real->indices_by_class();
    std::vector<std::size_t> picks;
    for (std::size_t c = 0; c < config.classes; ++c) {
        if (by_class[c].size() < ipc)
            throw DataError("class " + real->class_names[c] + " has " + std::to_string(by_class[c].size()) +
                            " examples, fewer than ipc=" + std::to_string(ipc));
        auto pool = by_class[c];
        rng.shuffle(pool);
        picks.insert(picks.end(), pool.begin(), pool.begin() + static_cast<long>(ipc));
    }
    dc.images = gather0(real->images.detach(), picks).detach();
    dc.class_names = real->class_names;
    dc.provenance["source"] = real->source_id;
    dc.provenance["source_indices"] = picks;
    return dc;
}

// ---- config -------------------------------------------------------------------------------

std::size_t DistillConfig::resolved_max_start(std::size_t shortest_trajectory) const {
    if (shortest_trajectory < 2) throw std::invalid_argument("trajectories need at least two snapshots");
    const std::size_t last = shortest_trajectory - 1;
    const std::size_t ms = max_start.value_or(last / 2);
    if (ms + K > last)
        throw std::invalid_argument("distill.max_start + distill.K = " + std::to_string(ms + K) +
                                    " exceeds the last teacher epoch " + std::to_string(last));
    return ms;
}

void DistillConfig::validate() const {
    if (ipc == 0) throw std::invalid_argument("distill.ipc must be at least 1");
    if (J == 0) throw std::invalid_argument("distill.J must be at least 1");
    if (K == 0) throw std::invalid_argument("distill.K must be at least 1");
    if (!(lr_images >= 0) || !(lr_alpha >= 0)) throw std::invalid_argument("distill learning rates must be >= 0");
    if (!(momentum >= 0 && momentum < 1)) throw std::invalid_argument("distill.momentum must be in [0, 1)");
    if (augmentation) augmentation->validate();
}

nlohmann::json to_json(const DistillConfig& c) {
    return {{"ipc", c.ipc},
            {"init", to_string(c.init)},
            {"J", c.J},
            {"K", c.K},
            {"max_start", c.max_start ? nlohmann::json(*c.max_start) : nlohmann::json(nullptr)},
            {"outer_steps", c.outer_steps},
            {"lr_images", c.lr_images},
            {"lr_alpha", c.lr_alpha},
            {"momentum", c.momentum},
            {"inner_batch", c.inner_batch},
            {"eval_every", c.eval_every},
            {"seed", c.seed},
            {"augmentation", c.augmentation ? to_json(*c.augmentation) : nlohmann::json(nullptr)}};
}

DistillConfig distill_config_from_json(const nlohmann::json& j) {
    DistillConfig c;
    c.ipc = j.at("ipc").get<std::size_t>();
    c.init = init_mode_from_string(j.at("init").get<std::string>());
    c.J = j.at("J").get<std::size_t>();
    c.K = j.at("K").get<std::size_t>();
    if (!j.at("max_start").is_null()) c.max_start = j.at("max_start").get<std::size_t>();
    c.outer_steps = j.at("outer_steps").get<std::size_t>();
    c.lr_images = j.at("lr_images").get<double>();
    c.lr_alpha = j.at("lr_alpha").get<double>();
    c.momentum = j.at("momentum").get<double>();
    c.inner_batch = j.at("inner_batch").get<std::size_t>();
    c.eval_every = j.at("eval_every").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    if (j.at("augmentation").is_null())
        c.augmentation.reset();
    else
        c.augmentation = augmentation_from_json(j.at("augmentation"));
    return c;
}

// ---- inner loop ---------------------------------------------------------------------------

std::vector<InnerPlan> sample_plans(const DistillConfig& cfg, std::size_t images, std::size_t steps, Rng& rng) {
    std::vector<InnerPlan> plans(steps);
    for (auto& p : plans) {
        std::size_t n = images;
        if (cfg.inner_batch != 0 && cfg.inner_batch < images) {
            std::vector<std::size_t> all(images);
            std::iota(all.begin(), all.end(), 0);
            rng.shuffle(all);
            p.batch.assign(all.begin(), all.begin() + static_cast<long>(cfg.inner_batch));
            n = cfg.inner_batch;
        }
        if (cfg.augmentation) p.draw = sample(*cfg.augmentation, n, rng);
    }
    return plans;
}

Tensor inner_step(const StudentForward& f, const Tensor& theta, const Tensor& images, std::span<const int> labels,
                  const Tensor& alpha, const InnerPlan& plan) {
    if (alpha.size() != 1 || !(alpha[0] >= 0)) throw std::invalid_argument("inner_step: alpha must be a scalar >= 0");
    Tensor x = images;
    std::vector<int> selected;
    if (!plan.batch.empty()) {
        x = gather0(images, plan.batch);
        for (std::size_t i : plan.batch) selected.push_back(labels[i]);
        labels = selected;
    }
    if (plan.draw) x = apply(x, *plan.draw);
    const Tensor loss = softmax_cross_entropy(f(theta, x), labels);
    const Tensor g = grad(loss, {theta}, true)[0];
    return sub(theta, mul(broadcast_to(reshape(alpha, {1}), theta.shape()), g));
}

Tensor unroll(const StudentForward& f, const Tensor& theta, const Tensor& images, std::span<const int> labels,
              const Tensor& alpha, std::span<const InnerPlan> plans) {
    Tensor t = theta;
    for (const auto& p : plans) t = inner_step(f, t, images, labels, alpha, p);
    return t;
}

double segment_norm2(const Tensor& start, const Tensor& target) {
    if (start.shape() != target.shape()) throw ShapeError("match_loss: teacher endpoints differ in shape");
    const auto a = start.values(), b = target.values();
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
}

Tensor match_loss(const Tensor& student, const Tensor& start, const Tensor& target) {
    if (student.shape() != target.shape()) throw ShapeError("match_loss: student and teacher differ in shape");
    const double den = segment_norm2(start, target);
    if (den < 1e-12) throw DegenerateSegment("degenerate teacher segment: squared distance " + std::to_string(den));
    const Tensor d = sub(student, target.detach());
    return scale(sum(mul(d, d)), 1.0 / den);
}

// ---- outer loop ---------------------------------------------------------------------------

MatchState init_state(const DistillConfig& cfg, const DistilledDataset& dc) {
    MatchState s;
    s.rng = Rng(derive_seed(cfg.seed, 17));
    s.image_velocity.assign(dc.images.size(), 0.0);
    return s;
}

double outer_step(MatchState& state, const std::vector<Trajectory>& fleet, DistilledDataset& dc,
                  const DistillConfig& cfg, const StudentForward& f) {
    if (fleet.empty()) throw DistillError("no teacher trajectories");
    const std::string hash = dc.config.hash();
    std::size_t shortest = fleet.front().length();
    for (const auto& t : fleet) {
        if (t.config_hash != hash) throw DistillError("teacher trajectory was recorded for a different model config");
        shortest = std::min(shortest, t.length());
    }
    const std::size_t max_start = cfg.resolved_max_start(shortest);

    const Trajectory* traj = nullptr;
    std::size_t start = 0;
    for (int attempt = 0; attempt < 10 && !traj; ++attempt) {
        const auto t = state.rng.below(fleet.size());
        const auto i = state.rng.below(max_start + 1);
        if (segment_norm2(fleet[t].snapshots[i], fleet[t].snapshots[i + cfg.K]) >= 1e-12) {
            traj = &fleet[t];
            start = i;
        }
    }
    if (!traj) throw DistillError("10 consecutive degenerate teacher segments; did the teachers train at all?");

    const auto plans = sample_plans(cfg, dc.size(), cfg.J, state.rng);
    Graph g;
    const Tensor x = g.leaf(dc.images);
    const Tensor la = g.leaf(Tensor::scalar(dc.log_alpha));
    const Tensor theta = g.leaf(traj->snapshots[start]);
    double loss = 0.0;
    std::vector<Tensor> grads;
    try {
        const Tensor final = unroll(f, theta, x, dc.labels, exp(la), plans);
        const Tensor l = match_loss(final, traj->snapshots[start], traj->snapshots[start + cfg.K]);
        loss = l.item();
        grads = grad(l, {x, la});
    } catch (const NumericError& e) {
        throw NumericError(e.op, "outer step " + std::to_string(state.step + 1) + " (teacher seed " +
                                     std::to_string(traj->seed) + ", start epoch " + std::to_string(start) +
                                     ", alpha " + std::to_string(dc.alpha()) + "): " + e.what());
    }

    const auto gx = grads[0].values();
    std::vector<double> px(dc.images.values().begin(), dc.images.values().end());
    for (std::size_t k = 0; k < px.size(); ++k) {
        state.image_velocity[k] = cfg.momentum * state.image_velocity[k] + gx[k];
        px[k] -= cfg.lr_images * state.image_velocity[k];
    }
    state.alpha_velocity = cfg.momentum * state.alpha_velocity + grads[1].item();
    dc.log_alpha -= cfg.lr_alpha * state.alpha_velocity;
    dc.images = Tensor(dc.images.shape(), std::move(px));
    if (!std::isfinite(dc.log_alpha)) throw NumericError("outer_step", "log learning rate became non-finite");
    for (double v : dc.images.values())
        if (!std::isfinite(v)) throw NumericError("outer_step", "distilled pixels became non-finite");

    ++state.step;
    state.losses.push_back(loss);
    return loss;
}

std::string format_log(const std::vector<LogRow>& rows) {
    std::string out = "step,loss,alpha,eval_acc\n";
    char buf[128];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,", r.step, r.loss, r.alpha);
        out += buf;
        if (r.eval_accuracy) {
            std::snprintf(buf, sizeof buf, "%.6f", *r.eval_accuracy);
            out += buf;
        }
        out += '\n';
    }
    return out;
}

RunResult run(const std::vector<Trajectory>& fleet, DistilledDataset dc, const DistillConfig& cfg,
              const Evaluator& evaluator) {
    cfg.validate();
    dc.provenance["distill"] = to_json(cfg);
    MatchState state = init_state(cfg, dc);
    const StudentForward f = convnet_forward(dc.config);
    RunResult result;
    for (std::size_t s = 0; s < cfg.outer_steps; ++s) {
        LogRow row;
        row.loss = outer_step(state, fleet, dc, cfg, f);
        row.step = state.step;
        row.alpha = dc.alpha();
        const bool due = cfg.eval_every != 0 && (state.step % cfg.eval_every == 0 || state.step == cfg.outer_steps);
        if (evaluator && due) {
            const double acc = evaluator(dc);
            row.eval_accuracy = acc;
            if (acc > state.best_accuracy) {
                state.best_accuracy = acc;
                state.best = dc;
                result.best_step = state.step;
            }
        }
        result.log.push_back(row);
    }
    result.final = dc;
    result.best = state.best ? *state.best : dc;
    if (result.best_step) result.best.provenance["best_step"] = *result.best_step;
    return result;
}

// ---- files --------------------------------------------------------------------------------

namespace {
constexpr std::array<char, 4> kDistilledMagic{'D', 'F', 'D', 'C'};
}

void write_distilled(const std::filesystem::path& path, const DistilledDataset& dc) {
    Envelope e;
    e.magic = kDistilledMagic;
    e.metadata = {{"kind", "distilled"},
                  {"ipc", dc.ipc},
                  {"classes", dc.classes()},
                  {"class_names", dc.class_names},
                  {"shape", dc.images.shape()},
                  {"labels", dc.labels},
                  {"log_alpha", dc.log_alpha},
                  {"alpha", dc.alpha()},
                  {"config", to_json(dc.config)},
                  {"config_hash", dc.config.hash()},
                  {"norm", to_json(dc.stats)},
                  {"provenance", dc.provenance}};
    for (double v : dc.images.values()) e.payload.push_back(static_cast<float>(v));
    write_envelope(path, e);
}

DistilledDataset read_distilled(const std::filesystem::path& path) {
    const Envelope e = read_envelope(path, kDistilledMagic);
    DistilledDataset dc;
    try {
        const auto& m = e.metadata;
        dc.ipc = m.at("ipc").get<std::size_t>();
        dc.class_names = m.at("class_names").get<std::vector<std::string>>();
        dc.labels = m.at("labels").get<std::vector<int>>();
        dc.log_alpha = m.at("log_alpha").get<double>();
        dc.config = model_config_from_json(m.at("config"));
        dc.stats = norm_stats_from_json(m.at("norm"));
        dc.provenance = m.at("provenance");
        const auto shape = m.at("shape").get<Shape>();
        if (numel(shape) != e.payload.size() || shape != dc.config.input_shape(dc.labels.size()))
            throw FormatError(path.string() + ": payload does not match metadata shape");
        dc.images = Tensor(shape, std::vector<double>(e.payload.begin(), e.payload.end()));
    } catch (const nlohmann::json::exception& ex) {
        throw FormatError(path.string() + ": malformed metadata: " + ex.what());
    }
    return dc;
}

}  // namespace distillforge
