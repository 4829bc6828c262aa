#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "distillforge/digest.hpp"
#include "distillforge/distiller.hpp"

using namespace distillforge;
namespace fs = std::filesystem;

namespace {

/// 38 parameters: one 2-channel conv block on 4x4 inputs, two classes.
ModelConfig tiny_config() {
    ModelConfig c;
    c.depth = 1;
    c.width = 2;
    c.channels = 1;
    c.height = 4;
    c.width_px = 4;
    c.classes = 2;
    return c;
}

ModelConfig small_config() {
    ModelConfig c;
    c.depth = 1;
    c.width = 4;
    c.channels = 1;
    c.height = 8;
    c.width_px = 8;
    c.classes = 4;
    return c;
}

Tensor random_tensor(Shape shape, Rng& rng, double sd = 1.0) {
    std::vector<double> v(numel(shape));
    for (double& x : v) x = sd * rng.normal();
    return Tensor(std::move(shape), std::move(v));
}

/// A fake trajectory of random snapshots; only the values matter to the distiller.
Trajectory random_trajectory(const ModelConfig& c, std::size_t length, std::uint64_t seed, double sd = 0.3) {
    Trajectory t;
    t.config = c;
    t.config_hash = c.hash();
    t.dataset_digest = sha256_hex("fixture");
    t.seed = seed;
    t.layout = make_layout(c);
    Rng rng(seed);
    for (std::size_t s = 0; s < length; ++s) {
        t.snapshots.push_back(random_tensor({layout_size(t.layout)}, rng, sd));
        t.steps.push_back(s);
    }
    return t;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && std::memcmp(a.values().data(), b.values().data(), a.size() * sizeof(double)) == 0;
}

/// logits [w*x, 0] for scalar inputs x.
Tensor logistic_forward(const Tensor& theta, const Tensor& batch) {
    const std::size_t n = batch.shape()[0];
    const Tensor w = mul(broadcast_to(reshape(theta, {1, 1}), {1, 2}), Tensor({1, 2}, {1.0, 0.0}));
    return matmul(reshape(batch, {n, 1}), w);
}

/// logits [a*x + b*x^2, 0] for scalar inputs x.
Tensor quadratic_forward(const Tensor& theta, const Tensor& batch) {
    const std::size_t n = batch.shape()[0];
    const Tensor x = reshape(batch, {n, 1});
    const Tensor mask({1, 2}, {1.0, 0.0});
    const Tensor a = mul(broadcast_to(reshape(slice0(theta, 0, 1), {1, 1}), {1, 2}), mask);
    const Tensor b = mul(broadcast_to(reshape(slice0(theta, 1, 2), {1, 1}), {1, 2}), mask);
    return add(matmul(x, a), matmul(pow(x, 2.0), b));
}

/// Outer objective as a function of (images, log_alpha, theta_start), for finite differences.
std::function<Tensor(const std::vector<Tensor>&)> outer_objective(StudentForward f, std::vector<int> labels,
                                                                 std::vector<InnerPlan> plans, Tensor start,
                                                                 Tensor target) {
    return [=](const std::vector<Tensor>& xs) {
        std::vector<Tensor> in = xs;
        Graph local;
        if (!xs[0].requires_grad())
            for (auto& x : in) x = local.leaf(x);
        const Tensor final = unroll(f, in[2], in[0], labels, exp(in[1]), plans);
        const Tensor l = match_loss(final, start, target);
        return xs[0].requires_grad() ? l : l.detach();
    };
}

LabeledDataset small_data(std::uint64_t seed, std::size_t per_class) {
    SynthSpec s;
    s.classes = 4;
    s.per_class = per_class;
    s.height = 8;
    s.width = 8;
    s.separation = 0.15;
    s.noise = 0.2;
    return synth_gaussians(s, seed);
}

}  // namespace

TEST_CASE("initialization") {
    const ModelConfig c = small_config();
    const auto a = init_distilled(c, 1, InitMode::Noise, 3);
    CHECK(a.size() == 4);
    CHECK(a.labels == std::vector<int>{0, 1, 2, 3});
    CHECK(a.images.shape() == Shape{4, 1, 8, 8});
    CHECK(a.alpha() == doctest::Approx(0.01).epsilon(1e-12));
    CHECK(bit_equal(a.images, init_distilled(c, 1, InitMode::Noise, 3).images));
    CHECK_FALSE(bit_equal(a.images, init_distilled(c, 1, InitMode::Noise, 4).images));

    const auto real = small_data(1, 5);
    const auto b = init_distilled(c, 3, InitMode::RealSample, 9, &real);
    CHECK(b.labels == std::vector<int>{0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3});
    const auto picks = b.provenance.at("source_indices").get<std::vector<std::size_t>>();
    const std::size_t px = 64;
    for (std::size_t i = 0; i < b.size(); ++i) {
        CHECK(real.labels[picks[i]] == b.labels[i]);
        CHECK(std::memcmp(b.images.values().data() + i * px, real.images.values().data() + picks[i] * px,
                          px * sizeof(double)) == 0);
    }
    CHECK_THROWS_WITH(init_distilled(c, 6, InitMode::RealSample, 9, &real), doctest::Contains("fewer than ipc"));
    CHECK_THROWS(init_distilled(c, 0, InitMode::Noise, 9));
}

TEST_CASE("match loss anchors on random triples") {
    PrecisionGuard f64(Precision::F64);
    Rng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 1 + rng.below(200);
        const Tensor start = random_tensor({n}, rng), target = random_tensor({n}, rng);
        CHECK(std::abs(match_loss(target, start, target).item()) <= 1e-12);
        CHECK(std::abs(match_loss(start, start, target).item() - 1.0) <= 1e-12);
    }
    CHECK(match_loss(Tensor({2}, {1.0, 0.0}), Tensor({2}, {0.0, 0.0}), Tensor({2}, {1.0, 1.0})).item() ==
          doctest::Approx(0.5).epsilon(1e-15));
    CHECK_THROWS_AS(match_loss(Tensor({2}, {1.0, 0.0}), Tensor({2}, {1.0, 1.0}), Tensor({2}, {1.0, 1.0})),
                    DegenerateSegment);
}

TEST_CASE("inner step hand values") {
    PrecisionGuard f64(Precision::F64);
    const int label[] = {0};
    Graph g;
    const Tensor w = g.leaf(Tensor({1}, {0.0}));
    const Tensor x({1, 1, 1, 1}, {1.0});
    const Tensor w1 = inner_step(logistic_forward, w, x, label, Tensor::scalar(0.1), {});
    CHECK(w1.item() == doctest::Approx(0.05).epsilon(1e-15));

    Graph h;
    Rng rng(2);
    const ModelConfig c = tiny_config();
    const Tensor theta = h.leaf(random_tensor({parameter_count(c)}, rng));
    const Tensor images = random_tensor(c.input_shape(2), rng);
    const int labels[] = {0, 1};
    CHECK(bit_equal(inner_step(convnet_forward(c), theta, images, labels, Tensor::scalar(0.0), {}), theta));
    CHECK_THROWS(inner_step(convnet_forward(c), theta, images, labels, Tensor::scalar(-1.0), {}));
}

TEST_CASE("unroll equals repeated inner steps") {
    const ModelConfig c = small_config();
    DistillConfig cfg;
    cfg.inner_batch = 3;
    Rng rng(8);
    const auto plans = sample_plans(cfg, 8, 4, rng);
    const auto dc = init_distilled(c, 2, InitMode::Noise, 1);
    const auto traj = random_trajectory(c, 2, 4);
    const auto f = convnet_forward(c);

    Graph g1;
    const Tensor a = unroll(f, g1.leaf(traj.snapshots[0]), g1.leaf(dc.images), dc.labels,
                            g1.leaf(Tensor::scalar(0.01)), plans);
    Graph g2;
    Tensor t = g2.leaf(traj.snapshots[0]);
    const Tensor images = g2.leaf(dc.images);
    const Tensor alpha = g2.leaf(Tensor::scalar(0.01));
    for (const auto& p : plans) t = inner_step(f, t, images, dc.labels, alpha, p);
    CHECK(bit_equal(a, t));
}

TEST_CASE("meta-gradient matches central differences") {
    PrecisionGuard f64(Precision::F64);
    const ModelConfig c = tiny_config();
    REQUIRE(parameter_count(c) <= 50);
    const auto traj = random_trajectory(c, 3, 21);
    for (std::size_t J = 1; J <= 3; ++J) {
        for (std::size_t K = 1; K <= 2; ++K) {
            CAPTURE(J);
            CAPTURE(K);
            DistillConfig cfg;
            Rng rng(100 + J * 10 + K);
            auto dc = init_distilled(c, 2, InitMode::Noise, J + 7 * K);
            const auto plans = sample_plans(cfg, dc.size(), J, rng);
            const auto obj = outer_objective(convnet_forward(c), dc.labels, plans, traj.snapshots[0],
                                             traj.snapshots[K]);
            const std::vector<Tensor> xs{dc.images, Tensor::scalar(std::log(0.5)), traj.snapshots[0]};
            CHECK(finite_diff_check(obj, xs) < 1e-4);
        }
    }

    const Tensor images({2, 1, 1, 1}, {0.7, -0.4});
    const auto obj = outer_objective(quadratic_forward, {0, 1}, {InnerPlan{}}, Tensor({2}, {0.1, -0.2}),
                                     Tensor({2}, {0.5, 0.3}));
    CHECK(finite_diff_check(obj, {images, Tensor::scalar(std::log(0.3)), Tensor({2}, {0.1, -0.2})}) < 1e-4);
}

TEST_CASE("outer step with zero learning rates leaves the dataset unchanged") {
    const ModelConfig c = small_config();
    std::vector<Trajectory> fleet{random_trajectory(c, 5, 1), random_trajectory(c, 5, 2)};
    DistillConfig cfg;
    cfg.J = 2;
    cfg.K = 1;
    cfg.lr_images = 0.0;
    cfg.lr_alpha = 0.0;
    auto dc = init_distilled(c, 1, InitMode::Noise, 3);
    const auto before = dc;
    auto state = init_state(cfg, dc);
    const double loss = outer_step(state, fleet, dc, cfg, convnet_forward(c));
    CHECK(std::isfinite(loss));
    CHECK(loss > 0.0);
    CHECK(bit_equal(dc.images, before.images));
    CHECK(dc.log_alpha == before.log_alpha);
    CHECK(state.step == 1);
}

TEST_CASE("degenerate segments are resampled, then rejected") {
    const ModelConfig c = small_config();
    Trajectory flat = random_trajectory(c, 4, 1);
    for (auto& s : flat.snapshots) s = flat.snapshots[0];
    DistillConfig cfg;
    cfg.J = 1;
    cfg.K = 1;
    auto dc = init_distilled(c, 1, InitMode::Noise, 3);
    auto state = init_state(cfg, dc);
    CHECK_THROWS_WITH_AS(outer_step(state, {flat}, dc, cfg, convnet_forward(c)), doctest::Contains("degenerate"),
                         DistillError);
    auto state2 = init_state(cfg, dc);
    for (int i = 0; i < 5; ++i) CHECK(std::isfinite(outer_step(state2, {flat, random_trajectory(c, 4, 2)}, dc, cfg,
                                                                convnet_forward(c))));
}

TEST_CASE("config validation") {
    DistillConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    CHECK(cfg.resolved_max_start(21) == 10);
    cfg.K = 5;
    cfg.max_start = 17;
    CHECK_THROWS_WITH(cfg.resolved_max_start(21), doctest::Contains("exceeds"));
    cfg.J = 0;
    CHECK_THROWS(cfg.validate());
    DistillConfig d;
    d.max_start = 3;
    d.augmentation.reset();
    const auto e = distill_config_from_json(to_json(d));
    CHECK(to_json(e) == to_json(d));
}

TEST_CASE("run: empty loop, determinism, labels, alpha and best snapshot") {
    const ModelConfig c = small_config();
    std::vector<Trajectory> fleet{random_trajectory(c, 5, 1), random_trajectory(c, 5, 2)};
    DistillConfig cfg;
    cfg.J = 2;
    cfg.K = 1;
    cfg.lr_alpha = 10.0;
    cfg.outer_steps = 0;
    const auto dc = init_distilled(c, 1, InitMode::Noise, 3);
    const auto empty = run(fleet, dc, cfg);
    CHECK(bit_equal(empty.best.images, dc.images));
    CHECK(empty.log.empty());

    cfg.outer_steps = 6;
    cfg.eval_every = 2;
    std::vector<double> scores{0.3, 0.3, 0.2};
    std::size_t calls = 0;
    const Evaluator fake = [&](const DistilledDataset&) { return scores[calls++ % 3]; };
    const auto r1 = run(fleet, dc, cfg, fake);
    calls = 0;
    const auto r2 = run(fleet, dc, cfg, fake);
    CHECK(format_log(r1.log) == format_log(r2.log));
    CHECK(format_log(r1.log).rfind("step,loss,alpha,eval_acc\n1,", 0) == 0);
    CHECK(r1.log.size() == 6);
    REQUIRE(r1.best_step.has_value());
    CHECK(*r1.best_step == 2);
    CHECK(r1.final.labels == dc.labels);
    for (const auto& row : r1.log) CHECK(row.alpha > 0.0);
    CHECK_FALSE(bit_equal(r1.final.images, dc.images));
}

TEST_CASE("alpha stays positive under a huge log-rate step") {
    const ModelConfig c = small_config();
    std::vector<Trajectory> fleet{random_trajectory(c, 4, 1)};
    DistillConfig cfg;
    cfg.J = 1;
    cfg.K = 1;
    cfg.lr_alpha = 1e3;
    cfg.lr_images = 0.0;
    auto dc = init_distilled(c, 1, InitMode::Noise, 3);
    auto state = init_state(cfg, dc);
    for (int i = 0; i < 3; ++i) {
        outer_step(state, fleet, dc, cfg, convnet_forward(c));
        CHECK(dc.alpha() > 0.0);
    }
}

TEST_CASE("match loss falls on synthetic data across seeds") {
    const ModelConfig c = small_config();
    const auto train = small_data(4, 40);
    const auto stats = compute_stats(train);
    const auto norm = normalize(train, stats);
    TeacherOptions o;
    o.epochs = 6;
    o.optimizer.lr = 0.01;
    o.optimizer.batch_size = 16;
    const auto fleet = train_teachers(norm, c, o, 2, 1, 1);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        CAPTURE(seed);
        DistillConfig cfg;
        cfg.J = 5;
        cfg.K = 2;
        cfg.outer_steps = 200;
        cfg.lr_images = 10.0;
        cfg.seed = seed;
        const auto r = run(fleet, init_distilled(c, 1, InitMode::Noise, seed, nullptr, stats), cfg);
        double first = 0, last = 0;
        for (std::size_t i = 0; i < 20; ++i) {
            first += r.log[i].loss;
            last += r.log[r.log.size() - 1 - i].loss;
        }
        CHECK(last < first);
    }
}

TEST_CASE("distilled file round trip") {
    const fs::path dir = fs::temp_directory_path() / "distillforge_test_dfdc";
    fs::remove_all(dir);
    fs::create_directories(dir);
    const auto real = small_data(1, 5);
    auto dc = init_distilled(small_config(), 2, InitMode::RealSample, 4, &real, compute_stats(real));
    dc.log_alpha = -3.25;
    write_distilled(dir / "d.dfdc", dc);
    const auto back = read_distilled(dir / "d.dfdc");
    CHECK(bit_equal(back.images, dc.images));
    CHECK(back.labels == dc.labels);
    CHECK(back.log_alpha == dc.log_alpha);
    CHECK(back.config.hash() == dc.config.hash());
    CHECK(back.stats.mean == dc.stats.mean);
    CHECK(back.provenance == dc.provenance);
    const auto px = back.export_pixels().values();
    CHECK(*std::min_element(px.begin(), px.end()) >= 0.0);
    CHECK(*std::max_element(px.begin(), px.end()) <= 1.0);
}
