// Acceptance run: one PASS/FAIL line per primary criterion. Exit status is nonzero if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>

#include "distillforge/augment.hpp"
#include "distillforge/cli.hpp"
#include "distillforge/digest.hpp"
#include "distillforge/distiller.hpp"
#include "distillforge/envelope.hpp"
#include "distillforge/eval.hpp"
#include "distillforge/image_io.hpp"
#include "distillforge/plots.hpp"
#include "distillforge/teacher.hpp"

#ifndef DISTILLFORGE_TOY_CONFIG
#define DISTILLFORGE_TOY_CONFIG "configs/toy.json"
#endif

using namespace distillforge;
namespace fs = std::filesystem;
using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

constexpr double kGradTol = 1e-4;
constexpr double kGradSeconds = 120.0;
constexpr double kAnchorTol = 1e-12;
constexpr double kLoadSeconds = 1.0;
constexpr double kMarginPoints = 0.10;
constexpr double kLossRatio = 0.5;
constexpr double kToySeconds = 30 * 60.0;
constexpr double kAugTol = 1e-4;
const double kBaselineRates[] = {0.001, 0.01, 0.1};

int failures = 0;

void report(const char* name, bool ok, const std::string& detail) {
    std::printf("%s %s: %s\n", ok ? "PASS" : "FAIL", name, detail.c_str());
    std::fflush(stdout);
    failures += !ok;
}

std::string fmt(const char* spec, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, spec, args...);
    return buf;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

Tensor random_tensor(Shape shape, Rng& rng, double sd = 1.0) {
    std::vector<double> v(numel(shape));
    for (double& x : v) x = sd * rng.normal();
    return Tensor(std::move(shape), std::move(v));
}

bool bit_equal(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && std::memcmp(a.values().data(), b.values().data(), a.size() * sizeof(double)) == 0;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

json read_json(const fs::path& p) {
    std::ifstream in(p);
    return json::parse(in);
}

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

void gradient_suite() {
    const PrecisionGuard f64(Precision::F64);
    const auto t0 = Clock::now();
    const ModelConfig c = tiny_config();
    const std::size_t params = parameter_count(c);
    Rng rng(21);
    std::vector<Tensor> snaps;
    for (int s = 0; s < 3; ++s) snaps.push_back(random_tensor({params}, rng, 0.3));
    double worst = 0;
    for (std::size_t J = 1; J <= 3; ++J)
        for (std::size_t K = 1; K <= 2; ++K) {
            DistillConfig cfg;
            Rng prng(100 + J * 10 + K);
            const auto dc = init_distilled(c, 2, InitMode::Noise, J + 7 * K);
            const auto plans = sample_plans(cfg, dc.size(), J, prng);
            const auto f = convnet_forward(c);
            const Tensor start = snaps[0], target = snaps[K];
            auto objective = [&](const std::vector<Tensor>& xs) {
                std::vector<Tensor> in = xs;
                Graph local;
                if (!xs[0].requires_grad())
                    for (auto& x : in) x = local.leaf(x);
                const Tensor l = match_loss(unroll(f, in[2], in[0], dc.labels, exp(in[1]), plans), start, target);
                return xs[0].requires_grad() ? l : l.detach();
            };
            worst = std::max(worst, finite_diff_check(objective, {dc.images, Tensor::scalar(std::log(0.5)), start}));
        }
    const double secs = seconds_since(t0);
    report("gradient-correctness", params <= 50 && worst < kGradTol && secs < kGradSeconds,
           fmt("%zu params, J in 1..3, K in 1..2, max rel err %.3g (tol %.0e), %.1fs (limit %.0fs)", params, worst,
               kGradTol, secs, kGradSeconds));
}

void anchor_suite() {
    const PrecisionGuard f64(Precision::F64);
    Rng rng(5);
    double worst0 = 0, worst1 = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 1 + rng.below(500);
        const Tensor start = random_tensor({n}, rng), target = random_tensor({n}, rng);
        worst0 = std::max(worst0, std::abs(match_loss(target, start, target).item()));
        worst1 = std::max(worst1, std::abs(match_loss(start, start, target).item() - 1.0));
    }
    report("loss-anchors", worst0 <= kAnchorTol && worst1 <= kAnchorTol,
           fmt("100 random triples, max |L(target)| %.3g, max |L(start)-1| %.3g (tol %.0e)", worst0, worst1,
               kAnchorTol));
}

void unroll_suite() {
    bool all = true;
    std::string detail;
    for (Precision p : {Precision::F32, Precision::F64}) {
        const PrecisionGuard guard(p);
        ModelConfig c;
        c.depth = 2;
        c.width = 4;
        c.channels = 1;
        c.height = 8;
        c.width_px = 8;
        c.classes = 4;
        DistillConfig cfg;
        cfg.inner_batch = 3;
        Rng rng(8);
        const auto plans = sample_plans(cfg, 8, 5, rng);
        const auto dc = init_distilled(c, 2, InitMode::Noise, 1);
        const Tensor theta0 = build(c, 4).params.data;
        const auto f = convnet_forward(c);
        Graph g1;
        const Tensor a = unroll(f, g1.leaf(theta0), g1.leaf(dc.images), dc.labels, g1.leaf(Tensor::scalar(0.01)), plans);
        Graph g2;
        Tensor t = g2.leaf(theta0);
        const Tensor images = g2.leaf(dc.images), alpha = g2.leaf(Tensor::scalar(0.01));
        for (const auto& plan : plans) t = inner_step(f, t, images, dc.labels, alpha, plan);
        const bool same = bit_equal(a, t);
        Graph g3;
        const Tensor th = g3.leaf(theta0);
        const bool noop = bit_equal(inner_step(f, th, g3.leaf(dc.images), dc.labels, Tensor::scalar(0.0), plans[0]), th);
        all = all && same && noop;
        detail += fmt("%s: unroll==5 steps %s, alpha=0 no-op %s; ", p == Precision::F32 ? "f32" : "f64",
                      same ? "bit-exact" : "DIFFERS", noop ? "bit-exact" : "DIFFERS");
    }
    report("unroll-equivalence", all, detail.substr(0, detail.size() - 2));
}

void augmentation_suite() {
    Rng brng(4);
    const Tensor x = random_tensor({3, 2, 6, 5}, brng);
    AugmentationSpec off = AugmentationSpec::defaults();
    for (auto& op : off.ops) op.probability = 0.0;
    Rng rng(2);
    const Tensor y = apply(x, sample(off, 3, rng));
    const bool identity = bit_equal(x, y);

    std::vector<double> wv(x.size());
    for (double& v : wv) v = brng.uniform(-1, 1);
    const Tensor weights(x.shape(), wv);
    double worst = 0;
    for (const auto& op : AugmentationSpec::defaults().ops) {
        AugmentationSpec one;
        one.ops = {op};
        one.ops[0].probability = 1.0;
        Rng r(31);
        const AugDraw draw = sample(one, 3, r);
        worst = std::max(worst, finite_diff_check([&](const Tensor& in) { return sum(mul(apply(in, draw), weights)); }, x));
    }
    Rng r(5);
    const AugDraw full = sample(AugmentationSpec::defaults(), 3, r);
    worst = std::max(worst, finite_diff_check([&](const Tensor& in) { return sum(mul(apply(in, full), weights)); }, x));

    AugmentationSpec flip;
    flip.ops = {{AugKind::Flip, 1.0}};
    Rng fr(0);
    const Tensor f = apply(Tensor({1, 1, 2, 2}, {1, 2, 3, 4}), sample(flip, 1, fr));
    const bool flip_ok = std::vector<double>(f.values().begin(), f.values().end()) == std::vector<double>{2, 1, 4, 3};
    const Tensor img({1, 1, 2, 3}, {1, 2, 3, 4, 5, 6});
    const Tensor t = apply(img, AugDraw{1, {{AugKind::Translate, {1}, {1.0 / 3.0}, {0.0}, 0.0}}});
    const bool shift_ok =
        std::vector<double>(t.values().begin(), t.values().end()) == std::vector<double>{1, 1, 2, 4, 4, 5};
    report("augmentation-suite", identity && worst < kAugTol && flip_ok && shift_ok,
           fmt("identity %s, max fixed-draw rel err %.3g over 7 ops and the full chain (tol %.0e), flip %s, "
               "translate %s",
               identity ? "bit-exact" : "DIFFERS", worst, kAugTol, flip_ok ? "ok" : "WRONG",
               shift_ok ? "ok" : "WRONG"));
}

void trajectory_format(const fs::path& store_dir, const fs::path& scratch) {
    const auto store = TrajectoryStore::open(store_dir);
    const auto t0 = Clock::now();
    const auto fleet = store.load_all();
    const double load = seconds_since(t0);

    const Trajectory& a = fleet.front();
    write_trajectory(scratch / "copy.dftj", a);
    const Trajectory b = read_trajectory(scratch / "copy.dftj");
    bool exact = b.snapshots.size() == a.snapshots.size() && b.seed == a.seed && b.config_hash == a.config_hash &&
                 b.dataset_digest == a.dataset_digest && b.steps == a.steps;
    for (std::size_t i = 0; exact && i < a.snapshots.size(); ++i) exact = bit_equal(a.snapshots[i], b.snapshots[i]);
    exact = exact && slurp(scratch / "copy.dftj") == slurp(store_dir / "teacher_0000.dftj");

    auto rejected = [&](const std::string& bytes) {
        const fs::path p = scratch / "bad.dftj";
        std::ofstream(p, std::ios::binary) << bytes;
        try {
            read_trajectory(p);
        } catch (const FormatError& e) {
            return std::string(e.what()).find("checksum") != std::string::npos;
        }
        return false;
    };
    const std::string good = slurp(store_dir / "teacher_0000.dftj");
    std::string flipped = good;
    flipped[good.size() / 2] ^= 0x10;
    const bool corrupt = rejected(flipped) && rejected(good.substr(0, good.size() - 7));
    report("trajectory-format", exact && corrupt && store.count() == 8 && load < kLoadSeconds,
           fmt("roundtrip %s, flipped/truncated files %s, T=%zu store (%zu snapshots each) loaded in %.3fs (limit "
               "%.0fs)",
               exact ? "bit-exact" : "DIFFERS", corrupt ? "rejected with checksum errors" : "NOT rejected",
               store.count(), a.snapshots.size(), load, kLoadSeconds));
}

int cli(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    if (code != 0) std::fprintf(stderr, "%s", err.str().c_str());
    return code;
}

double loss_ratio(const fs::path& log, double* first, double* last) {
    const auto rows = parse_log(slurp(log));
    const std::size_t n = rows.size(), w = std::max<std::size_t>(1, n / 10);
    double a = 0, b = 0;
    for (std::size_t i = 0; i < w; ++i) a += rows[i].loss, b += rows[n - 1 - i].loss;
    *first = a / w, *last = b / w;
    return *last / *first;
}

EvalReport distilled_report(const fs::path& eval_json) {
    return eval_report_from_json(read_json(eval_json).at("reports").at(0));
}

}  // namespace

int main(int argc, char** argv) {
    const fs::path config = argc > 1 ? argv[1] : DISTILLFORGE_TOY_CONFIG;
    const fs::path work = fs::temp_directory_path() / "distillforge_acceptance";
    fs::remove_all(work);
    fs::create_directories(work);
    std::printf("toy config: %s\nworking directory: %s\n", config.c_str(), work.c_str());

    gradient_suite();
    anchor_suite();
    unroll_suite();
    augmentation_suite();

    const std::string cfg = config.string(), store = (work / "store").string();
    const RunConfig rc = resolve_config(read_json(config), {});
    const auto toy0 = Clock::now();
    if (cli({"teach", "--config", cfg, "--out", store}) != 0) {
        report("toy-end-to-end", false, "teach failed");
        return 1;
    }
    std::printf("teachers trained in %.1fs\n", seconds_since(toy0));
    trajectory_format(store, work);

    const fs::path ipc1 = work / "ipc1", again = work / "ipc1_again", ipc5 = work / "ipc5";
    const bool ran1 = cli({"distill", "--config", cfg, "--store", store, "--out", ipc1.string(), "--ipc", "1"}) == 0 &&
                      cli({"eval", "--config", cfg, "--distilled", (ipc1 / "distilled.dfdc").string()}) == 0;
    if (!ran1) {
        report("toy-end-to-end", false, "distill or eval failed");
        return 1;
    }
    const EvalReport d1 = distilled_report(ipc1 / "eval_ipc1.json");

    const Splits data = load_splits(rc.data);
    const ModelConfig mc = model_config(rc, data.train);
    EvalOptions opts = rc.eval.options;
    double best_baseline = -1, best_rate = 0;
    std::string grid;
    for (double lr : kBaselineRates) {
        opts.lr = lr;
        const auto b = baseline_random_real(data.train, data.test, mc, 1, d1.seeds, opts);
        grid += fmt("%s%.3f@%g", grid.empty() ? "" : " ", b.mean, lr);
        if (b.succeeded() > 0 && b.mean > best_baseline) best_baseline = b.mean, best_rate = lr;
    }
    double first = 0, last = 0;
    const double ratio = loss_ratio(ipc1 / "loss_log.csv", &first, &last);
    const double toy_secs = seconds_since(toy0);
    const double margin = d1.mean - best_baseline;
    report("toy-end-to-end",
           d1.succeeded() == d1.seeds.size() && margin >= kMarginPoints && ratio <= kLossRatio && toy_secs < kToySeconds,
           fmt("distilled IPC1 %.2f%% +- %.2f over %zu/%zu seeds vs best random-real IPC1 %.2f%% (lr %g; grid %s), "
               "margin %.2f pp (need %.0f); loss first10%% %.4f last10%% %.4f ratio %.3f (need <= %.2f); %.0fs (limit "
               "%.0fs)",
               100 * d1.mean, 100 * d1.std, d1.succeeded(), d1.seeds.size(), 100 * best_baseline, best_rate,
               grid.c_str(), 100 * margin, 100 * kMarginPoints, first, last, ratio, kLossRatio, toy_secs,
               kToySeconds));

    const bool ran5 = cli({"distill", "--config", cfg, "--store", store, "--out", ipc5.string(), "--ipc", "5"}) == 0 &&
                      cli({"eval", "--config", cfg, "--distilled", (ipc5 / "distilled.dfdc").string()}) == 0;
    if (ran5) {
        const EvalReport d5 = distilled_report(ipc5 / "eval_ipc5.json");
        report("ipc-trend", d5.succeeded() >= 5 && d1.succeeded() >= 5 && d5.mean >= d1.mean,
               fmt("IPC5 %.2f%% +- %.2f vs IPC1 %.2f%% +- %.2f over %zu seeds", 100 * d5.mean, 100 * d5.std,
                   100 * d1.mean, 100 * d1.std, d5.seeds.size()));
    } else {
        report("ipc-trend", false, "IPC5 distill or eval failed");
    }

    {
        const DistilledDataset noise = read_distilled(ipc1 / "distilled.dfdc");
        const AuditReport a = audit(noise, data.train);
        const Tensor px = to_pixels(data.train.images, data.stats);
        const auto v = px.values();
        const std::size_t n = data.train.size(), d = v.size() / n;
        std::vector<double> pairs;
        pairs.reserve(n * (n - 1) / 2);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) {
                double s = 0;
                for (std::size_t k = 0; k < d; ++k) {
                    const double t = static_cast<float>(v[i * d + k]) - static_cast<double>(static_cast<float>(v[j * d + k]));
                    s += t * t;
                }
                pairs.push_back(std::sqrt(s / static_cast<double>(d)));
            }
        const double p1 = percentile(pairs, 1);
        const DistilledDataset control =
            init_distilled(mc, 1, InitMode::RealSample, derive_seed(rc.seed, 2), &data.train, data.stats);
        const AuditReport c = audit(control, data.train);
        report("anonymization-audit", a.min_distance > 0 && a.min_distance > p1 && c.min_distance == 0.0,
               fmt("noise-init IPC1 min NN distance %.4f vs real-real pairwise p1 %.4f over %zu pairs; real-init "
                   "control min %.3g",
                   a.min_distance, p1, pairs.size(), c.min_distance));
    }

    const bool ran_again =
        cli({"distill", "--config", cfg, "--store", store, "--out", again.string(), "--ipc", "1"}) == 0;
    const std::string log1 = slurp(ipc1 / "loss_log.csv");
    report("determinism", ran_again && !log1.empty() && log1 == slurp(again / "loss_log.csv"),
           fmt("two IPC1 runs at %zu thread(s): loss logs %s (%zu bytes), config digest %s", rc.threads,
               ran_again && log1 == slurp(again / "loss_log.csv") ? "byte-identical" : "DIFFER", log1.size(),
               config_digest(rc).substr(0, 12).c_str()));

    std::printf("summary: %d of 9 criteria failed\n", failures);
    return failures ? 1 : 0;
}
