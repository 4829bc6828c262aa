#include "distillforge/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <regex>

#include "distillforge/digest.hpp"
#include "distillforge/distiller.hpp"
#include "distillforge/envelope.hpp"
#include "distillforge/eval.hpp"
#include "distillforge/image_io.hpp"
#include "distillforge/plots.hpp"
#include "distillforge/teacher.hpp"

#ifndef DISTILLFORGE_VERSION
#define DISTILLFORGE_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace distillforge {

Splits load_splits(const DataConfig& data) {
    Splits s;
    LabeledDataset train, test;
    if (data.source == "synth") {
        train = synth_gaussians(data.synthetic, data.seed, 0);
        test = synth_gaussians(data.synthetic, data.seed, 1);
        train.split = "train";
        test.split = "test";
    } else {
        const fs::path root = data.source;
        if (!fs::is_directory(root)) throw DataError("data directory " + root.string() + " does not exist");
        if (fs::is_directory(root / "train") && fs::is_directory(root / "test")) {
            train = load_image_dir(root / "train");
            test = load_image_dir(root / "test");
            if (train.class_names != test.class_names)
                throw DataError("train/ and test/ under " + root.string() + " have different classes");
            train.split = "train";
            test.split = "test";
        } else {
            std::tie(train, test) = split(load_image_dir(root), data.test_fraction, data.seed);
        }
    }
    if (data.resize != 0) {
        train = resize(train, data.resize, data.resize);
        test = resize(test, data.resize, data.resize);
    }
    s.stats = compute_stats(train);
    s.train = normalize(train, s.stats);
    s.test = normalize(test, s.stats);
    return s;
}

ModelConfig model_config(const RunConfig& config, const LabeledDataset& train) {
    const auto& shape = train.images.shape();
    ModelConfig m;
    m.depth = config.model_depth;
    m.width = config.model_width;
    m.channels = shape[1];
    m.height = shape[2];
    m.width_px = shape[3];
    m.classes = train.classes();
    m.validate();
    return m;
}

namespace {

enum class Kind { Int, Float, Str };

/// A command-line flag that overrides one config value.
struct Override {
    std::string pointer;
    Kind kind;
    std::string value;
    CLI::Option* option = nullptr;
};

struct Command {
    std::string name;
    std::string config_file;
    std::string out;
    std::string store;
    std::string distilled;
    std::string run_dir;
    std::optional<std::size_t> threads;
    std::vector<Override> overrides;
};

json parse_value(const Override& o) {
    const std::string& v = o.value;
    try {
        std::size_t used = 0;
        switch (o.kind) {
            case Kind::Int: {
                if (v.empty() || v[0] == '-') throw std::invalid_argument(v);
                const auto n = std::stoull(v, &used);
                if (used != v.size()) throw std::invalid_argument(v);
                return n;
            }
            case Kind::Float: {
                const double d = std::stod(v, &used);
                if (used != v.size()) throw std::invalid_argument(v);
                return d;
            }
            case Kind::Str:
                return v;
        }
    } catch (const std::logic_error&) {
    }
    throw ConfigError("bad value '" + v + "' for " + o.option->get_name());
}

json read_config_file(const std::string& path) {
    if (path.empty()) return nullptr;
    std::ifstream in(path);
    if (!in) throw DataError("cannot read config file " + path);
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("config file " + path + ": " + e.what());
    }
}

std::optional<std::size_t> env_threads() {
    const char* env = std::getenv("DISTILLFORGE_THREADS");
    if (!env || !*env) return std::nullopt;
    char* end = nullptr;
    const unsigned long long n = std::strtoull(env, &end, 10);
    if (*end != '\0' || n == 0) throw ConfigError(std::string("DISTILLFORGE_THREADS must be a positive integer, got ") + env);
    return static_cast<std::size_t>(n);
}

RunConfig resolve(Command& cmd, json base = nullptr) {
    std::map<std::string, json> overrides;
    for (auto& o : cmd.overrides)
        if (o.option->count() > 0) overrides[o.pointer] = parse_value(o);
    if (cmd.threads) {
        if (*cmd.threads == 0) throw ConfigError("--threads must be at least 1");
        overrides["/threads"] = *cmd.threads;
    } else if (const auto env = env_threads()) {
        overrides["/threads"] = *env;
    }
    if (!cmd.config_file.empty()) base = read_config_file(cmd.config_file);
    return resolve_config(base, overrides);
}

class Manifest {
public:
    Manifest(fs::path dir, const std::string& command, const RunConfig& config)
        : path_(std::move(dir) / (command + "_manifest.json")) {
        fs::create_directories(path_.parent_path());
        doc_ = {{"command", command},
                {"status", "running"},
                {"version", DISTILLFORGE_VERSION},
                {"config", to_json(config)},
                {"config_digest", config_digest(config)},
                {"threads", config.threads},
                {"outputs", json::array()}};
        flush();
    }

    Manifest(const Manifest&) = delete;
    Manifest& operator=(const Manifest&) = delete;

    ~Manifest() {
        if (done_) return;
        try {
            doc_["status"] = "failed";
            flush();
        } catch (...) {
        }
    }

    void output(const fs::path& p) { doc_["outputs"].push_back(p.filename().string()); }
    json& doc() { return doc_; }

    void complete() {
        doc_["status"] = "complete";
        flush();
        done_ = true;
    }

private:
    void flush() { write_atomic(path_, doc_.dump(2) + "\n"); }

    fs::path path_;
    json doc_;
    bool done_ = false;
};

std::vector<std::uint64_t> eval_seeds(const RunConfig& c) {
    std::vector<std::uint64_t> seeds;
    for (std::size_t i = 0; i < c.eval.seeds; ++i) seeds.push_back(derive_seed(c.seed, 100 + i));
    return seeds;
}

std::string pct(const EvalReport& r) {
    if (r.succeeded() == 0) return "failed";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f%% +- %.2f", 100 * r.mean, 100 * r.std);
    return buf;
}

int teach(Command& cmd, std::ostream& out) {
    const RunConfig cfg = resolve(cmd);
    const PrecisionGuard precision(cfg.precision == "f64" ? Precision::F64 : Precision::F32);
    const fs::path dir = cmd.out;
    Manifest manifest(dir, "teach", cfg);
    const Splits data = load_splits(cfg.data);
    const ModelConfig mc = model_config(cfg, data.train);
    TeacherOptions options{cfg.teacher.epochs, cfg.teacher.optimizer, cfg.teacher.augmentation};
    out << "training " << cfg.teacher.count << " teachers for " << cfg.teacher.epochs << " epochs ("
        << parameter_count(mc) << " parameters)\n";
    const auto fleet = train_teachers(data.train, mc, options, cfg.teacher.count, derive_seed(cfg.seed, 1), cfg.threads);
    for (std::size_t i = 0; i < fleet.size(); ++i) {
        const auto m = evaluate_params(mc, fleet[i].snapshots.back(), data.test);
        out << "teacher " << i << " test accuracy " << m.accuracy << "\n";
    }
    const auto store = TrajectoryStore::record(dir, fleet);
    manifest.doc()["store"] = {{"count", store.count()},
                               {"config_hash", store.config_hash()},
                               {"dataset_digest", store.dataset_digest()}};
    manifest.output(dir / "manifest.json");
    manifest.complete();
    return kExitOk;
}

int distill(Command& cmd, std::ostream& out) {
    const RunConfig cfg = resolve(cmd);
    const PrecisionGuard precision(cfg.precision == "f64" ? Precision::F64 : Precision::F32);
    const fs::path dir = cmd.out;
    Manifest manifest(dir, "distill", cfg);
    const Splits data = load_splits(cfg.data);
    const ModelConfig mc = model_config(cfg, data.train);
    const auto store = TrajectoryStore::open(cmd.store);
    if (store.config_hash() != mc.hash())
        throw ConfigError("--store " + cmd.store + " was recorded for a different model configuration");
    if (store.dataset_digest() != data.train.source_id)
        throw DataError("--store " + cmd.store + " was recorded on a different dataset");
    const auto fleet = store.load_all();

    DistilledDataset dc = init_distilled(mc, cfg.distill.ipc, cfg.distill.init, derive_seed(cfg.seed, 2), &data.train,
                                         data.stats);
    Evaluator evaluator;
    LabeledDataset validation;
    if (cfg.distill.eval_every != 0) {
        const std::size_t per_class = std::max<std::size_t>(1, cfg.eval.validation / mc.classes);
        validation = subset(data.train, random_real_indices(data.train, per_class, derive_seed(cfg.seed, 4)), "validation");
        validation.split = "validation";
        evaluator = [&](const DistilledDataset& d) {
            const auto r = eval_student(d, validation, {derive_seed(cfg.seed, 5)}, cfg.eval.options);
            return r.succeeded() ? r.mean : 0.0;
        };
    }
    out << "distilling ipc " << cfg.distill.ipc << " from " << fleet.size() << " trajectories, "
        << cfg.distill.outer_steps << " outer steps\n";
    RunResult result = run(fleet, std::move(dc), cfg.distill, evaluator);
    const std::string digest = config_digest(cfg);
    result.best.provenance["config_digest"] = digest;
    result.final.provenance["config_digest"] = digest;
    result.best.provenance["store"] = {{"count", store.count()}, {"config_hash", store.config_hash()}};
    result.final.provenance["store"] = result.best.provenance["store"];

    write_distilled(dir / "distilled.dfdc", result.best);
    write_distilled(dir / "distilled_final.dfdc", result.final);
    write_atomic(dir / "loss_log.csv", format_log(result.log));
    for (const char* f : {"distilled.dfdc", "distilled_final.dfdc", "loss_log.csv"}) manifest.output(dir / f);
    manifest.doc()["reported_snapshot"] = result.best_step ? "best validation accuracy" : "final step";
    if (result.best_step) manifest.doc()["best_step"] = *result.best_step;
    manifest.doc()["alpha"] = result.best.alpha();
    if (!result.log.empty())
        out << "final loss " << result.log.back().loss << ", alpha " << result.final.alpha() << "\n";
    manifest.complete();
    return kExitOk;
}

int eval(Command& cmd, std::ostream& out) {
    const RunConfig cfg = resolve(cmd);
    const PrecisionGuard precision(cfg.precision == "f64" ? Precision::F64 : Precision::F32);
    const DistilledDataset dc = read_distilled(cmd.distilled);
    const fs::path dir = cmd.out.empty() ? fs::path(cmd.distilled).parent_path() : fs::path(cmd.out);
    Manifest manifest(dir, "eval", cfg);
    const Splits data = load_splits(cfg.data);
    const auto seeds = eval_seeds(cfg);
    std::vector<EvalReport> reports{eval_student(dc, data.test, seeds, cfg.eval.options)};
    if (cfg.eval.baseline)
        reports.push_back(baseline_random_real(data.train, data.test, dc.config, dc.ipc, seeds, cfg.eval.options));
    if (cfg.eval.full) reports.push_back(eval_full(data.train, data.test, dc.config, seeds, cfg.eval.options));
    json doc = {{"config_digest", config_digest(cfg)}, {"distilled", cmd.distilled}, {"reports", json::array()}};
    for (const auto& r : reports) {
        doc["reports"].push_back(to_json(r));
        out << r.kind << " ipc " << r.ipc << ": " << pct(r) << " over " << r.succeeded() << "/" << r.seeds.size()
            << " seeds\n";
    }
    const fs::path file = dir / ("eval_ipc" + std::to_string(dc.ipc) + ".json");
    write_atomic(file, doc.dump(2) + "\n");
    manifest.output(file);
    manifest.complete();
    return kExitOk;
}

int audit_cmd(Command& cmd, std::ostream& out) {
    const RunConfig cfg = resolve(cmd);
    const PrecisionGuard precision(cfg.precision == "f64" ? Precision::F64 : Precision::F32);
    const DistilledDataset dc = read_distilled(cmd.distilled);
    const fs::path dir = cmd.out.empty() ? fs::path(cmd.distilled).parent_path() : fs::path(cmd.out);
    Manifest manifest(dir, "audit", cfg);
    const Splits data = load_splits(cfg.data);
    const AuditReport r = audit(dc, data.train);
    json doc = to_json(r);
    doc["config_digest"] = config_digest(cfg);
    doc["distilled"] = cmd.distilled;
    const fs::path file = dir / "audit.json";
    write_atomic(file, doc.dump(2) + "\n");
    manifest.output(file);
    out << "nearest real image: min RMS distance " << r.min_distance << " (distilled image " << r.argmin
        << "), compression ratio " << r.compression_ratio << "\n";
    manifest.complete();
    return kExitOk;
}

json read_json(const fs::path& p) {
    const auto bytes = read_file(p);
    try {
        return json::parse(bytes.begin(), bytes.end());
    } catch (const json::parse_error& e) {
        throw FormatError(p.string() + ": " + e.what());
    }
}

int plot(Command& cmd, std::ostream& out) {
    const fs::path run_dir = cmd.run_dir;
    if (!fs::is_directory(run_dir)) throw DataError("run directory " + run_dir.string() + " does not exist");
    json base = nullptr;
    if (fs::exists(run_dir / "distill_manifest.json")) base = read_json(run_dir / "distill_manifest.json").at("config");
    const RunConfig cfg = resolve(cmd, base);
    const fs::path dir = cmd.out.empty() ? run_dir : fs::path(cmd.out);
    Manifest manifest(dir, "plot", cfg);
    PlotInputs in;
    if (fs::exists(run_dir / "loss_log.csv")) {
        const auto bytes = read_file(run_dir / "loss_log.csv");
        in.log = parse_log(std::string(bytes.begin(), bytes.end()));
    }
    std::vector<std::pair<std::size_t, fs::path>> evals;
    const std::regex pattern("eval_ipc([0-9]+)\\.json");
    for (const auto& e : fs::directory_iterator(run_dir)) {
        std::smatch m;
        const std::string name = e.path().filename().string();
        if (std::regex_match(name, m, pattern)) evals.emplace_back(std::stoul(m[1]), e.path());
    }
    std::sort(evals.begin(), evals.end());
    for (const auto& [ipc, p] : evals) {
        const json doc = read_json(p);
        for (const auto& r : doc.at("reports")) in.reports.push_back(eval_report_from_json(r));
    }
    if (fs::exists(run_dir / "audit.json")) in.audit = audit_report_from_json(read_json(run_dir / "audit.json"));
    if (fs::exists(run_dir / "distilled.dfdc")) in.distilled = read_distilled(run_dir / "distilled.dfdc");
    for (const auto& f : emit_plots(dir, in)) {
        manifest.output(f);
        out << "wrote " << f.string() << "\n";
    }
    manifest.complete();
    return kExitOk;
}

int fail(std::ostream& err, const char* category, int code, std::string message) {
    std::replace(message.begin(), message.end(), '\n', ' ');
    err << "error: " << category << ": " << message << "\n";
    return code;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app("distillforge: dataset distillation by trajectory matching", "distillforge");
    app.set_version_flag("--version", DISTILLFORGE_VERSION);
    app.require_subcommand(1);

    std::map<std::string, Command> commands;
    auto sub = [&](const std::string& name, const std::string& help) {
        Command& cmd = commands[name];
        cmd.name = name;
        CLI::App* s = app.add_subcommand(name, help);
        s->add_option("--config", cmd.config_file, "JSON config file")->check(CLI::ExistingFile);
        s->add_option("--threads", cmd.threads, "worker cap; falls back to DISTILLFORGE_THREADS");
        return std::pair<CLI::App*, Command*>{s, &cmd};
    };
    std::vector<std::tuple<CLI::App*, Command*, std::string, std::string, Kind, std::string>> flags;
    auto with_common = [&](CLI::App* s, Command* cmd) {
        flags.emplace_back(s, cmd, "--seed", "/seed", Kind::Int, "master seed");
        flags.emplace_back(s, cmd, "--precision", "/precision", Kind::Str, "f32 or f64");
        flags.emplace_back(s, cmd, "--data", "/data/source", Kind::Str, "image directory or 'synth'");
    };

    auto [teach_app, teach_cmd] = sub("teach", "train teachers and record their trajectories");
    with_common(teach_app, teach_cmd);
    teach_app->add_option("--out", teach_cmd->out, "trajectory store directory")->required();
    flags.emplace_back(teach_app, teach_cmd, "--epochs", "/teacher/epochs", Kind::Int, "epochs per teacher");
    flags.emplace_back(teach_app, teach_cmd, "--teachers", "/teacher/count", Kind::Int, "number of teachers");

    auto [distill_app, distill_cmd] = sub("distill", "distill a dataset by matching stored trajectories");
    with_common(distill_app, distill_cmd);
    distill_app->add_option("--store", distill_cmd->store, "trajectory store directory")->required();
    distill_app->add_option("--out", distill_cmd->out, "run directory")->required();
    flags.emplace_back(distill_app, distill_cmd, "--ipc", "/distill/ipc", Kind::Int, "images per class");
    flags.emplace_back(distill_app, distill_cmd, "--J", "/distill/J", Kind::Int, "student steps per segment");
    flags.emplace_back(distill_app, distill_cmd, "--K", "/distill/K", Kind::Int, "teacher epochs per segment");
    flags.emplace_back(distill_app, distill_cmd, "--max-start", "/distill/max_start", Kind::Int, "latest start epoch");
    flags.emplace_back(distill_app, distill_cmd, "--outer-steps", "/distill/outer_steps", Kind::Int, "outer steps");
    flags.emplace_back(distill_app, distill_cmd, "--init", "/distill/init", Kind::Str, "noise or real");
    flags.emplace_back(distill_app, distill_cmd, "--eval-every", "/distill/eval_every", Kind::Int,
                       "validation interval in outer steps; 0 disables");

    auto [eval_app, eval_cmd] = sub("eval", "train students on a distilled set and report test accuracy");
    with_common(eval_app, eval_cmd);
    eval_app->add_option("--distilled", eval_cmd->distilled, "distilled dataset file")->required();
    eval_app->add_option("--out", eval_cmd->out, "output directory; defaults to the distilled file's directory");
    flags.emplace_back(eval_app, eval_cmd, "--seeds", "/eval/seeds", Kind::Int, "student seeds");
    flags.emplace_back(eval_app, eval_cmd, "--epochs", "/eval/epochs", Kind::Int, "student epochs");

    auto [audit_app, audit_cmd_] = sub("audit", "nearest-real-image distances of a distilled set");
    with_common(audit_app, audit_cmd_);
    audit_app->add_option("--distilled", audit_cmd_->distilled, "distilled dataset file")->required();
    audit_app->add_option("--out", audit_cmd_->out, "output directory; defaults to the distilled file's directory");

    auto [plot_app, plot_cmd] = sub("plot", "render plots from a completed run directory");
    plot_app->add_option("--run", plot_cmd->run_dir, "run directory")->required();
    plot_app->add_option("--out", plot_cmd->out, "output directory; defaults to the run directory");

    for (auto& [s, cmd, flag, pointer, kind, help] : flags) cmd->overrides.push_back({pointer, kind, {}, nullptr});
    {
        std::map<Command*, std::size_t> next;
        for (auto& [s, cmd, flag, pointer, kind, help] : flags) {
            Override& o = cmd->overrides[next[cmd]++];
            o.option = s->add_option(flag, o.value, help);
        }
    }

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        try {
            app.parse(reversed);
        } catch (const CLI::CallForHelp&) {
            out << app.help();
            return kExitOk;
        } catch (const CLI::CallForAllHelp&) {
            out << app.help("", CLI::AppFormatMode::All);
            return kExitOk;
        } catch (const CLI::CallForVersion&) {
            out << DISTILLFORGE_VERSION << "\n";
            return kExitOk;
        }
        for (auto& [name, cmd] : commands) {
            if (!app.got_subcommand(name)) continue;
            if (name == "teach") return teach(cmd, out);
            if (name == "distill") return distill(cmd, out);
            if (name == "eval") return eval(cmd, out);
            if (name == "audit") return audit_cmd(cmd, out);
            if (name == "plot") return plot(cmd, out);
        }
        throw ConfigError("no subcommand");
    } catch (const CLI::ParseError& e) {
        return fail(err, "config", kExitConfig, e.what());
    } catch (const NumericError& e) {
        return fail(err, "numeric", kExitNumeric, e.what());
    } catch (const DistillError& e) {
        return fail(err, "numeric", kExitNumeric, e.what());
    } catch (const DataError& e) {
        return fail(err, "io", kExitIo, e.what());
    } catch (const FormatError& e) {
        return fail(err, "io", kExitIo, e.what());
    } catch (const fs::filesystem_error& e) {
        return fail(err, "io", kExitIo, e.what());
    } catch (const json::exception& e) {
        return fail(err, "config", kExitConfig, e.what());
    } catch (const std::invalid_argument& e) {
        return fail(err, "config", kExitConfig, e.what());
    } catch (const std::exception& e) {
        return fail(err, "internal", kExitInternal, e.what());
    }
}

}  // namespace distillforge
