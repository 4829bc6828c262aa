#include "distillforge/run_config.hpp"

#include "distillforge/digest.hpp"

namespace distillforge {

namespace {

using json = nlohmann::json;

json optional_aug(const std::optional<AugmentationSpec>& a) { return a ? to_json(*a) : json(nullptr); }

std::optional<AugmentationSpec> optional_aug_from(const json& j) {
    if (j.is_null()) return std::nullopt;
    return augmentation_from_json(j);
}

bool nullable(const std::string& key) { return key == "augmentation" || key == "max_start"; }
bool atomic(const std::string& key) { return key == "augmentation"; }

bool same_kind(const json& def, const json& given) {
    if (def.is_number_unsigned() || def.is_number_integer())
        return given.is_number_unsigned() || (given.is_number_integer() && given.get<long long>() >= 0);
    if (def.is_number_float()) return given.is_number();
    return def.type() == given.type();
}

/// Checks `given` against the defaults and merges it into `into`.
void merge_checked(json& into, const json& given, const std::string& path) {
    if (!given.is_object()) throw ConfigError("config" + (path.empty() ? "" : " key " + path) + " must be an object");
    for (const auto& [key, value] : given.items()) {
        const std::string name = path.empty() ? key : path + "." + key;
        if (!into.contains(key)) throw ConfigError("unknown config key " + name);
        json& slot = into[key];
        if (value.is_null()) {
            if (!nullable(key)) throw ConfigError("config key " + name + " cannot be null");
            slot = nullptr;
        } else if (atomic(key) || slot.is_null()) {
            slot = value;
        } else if (slot.is_object()) {
            merge_checked(slot, value, name);
        } else {
            if (!same_kind(slot, value))
                throw ConfigError("config key " + name + " expects " + std::string(slot.type_name()) + ", got " +
                                  value.dump());
            slot = value;
        }
    }
}

}  // namespace

void RunConfig::validate() const {
    if (precision != "f32" && precision != "f64") throw ConfigError("precision must be f32 or f64");
    if (threads == 0) throw ConfigError("threads must be at least 1");
    if (model_depth == 0 || model_width == 0) throw ConfigError("model.depth and model.width must be positive");
    if (!(data.test_fraction > 0 && data.test_fraction < 1)) throw ConfigError("data.test_fraction must be in (0, 1)");
    if (data.source.empty()) throw ConfigError("data.source must name a directory or 'synth'");
    if (teacher.epochs == 0) throw ConfigError("teacher.epochs must be at least 1");
    if (teacher.count == 0) throw ConfigError("teacher.count must be at least 1");
    if (teacher.optimizer.kind != "sgd") throw ConfigError("teacher.optimizer must be sgd");
    if (!(teacher.optimizer.lr >= 0)) throw ConfigError("teacher.lr must be >= 0");
    if (!(teacher.optimizer.momentum >= 0 && teacher.optimizer.momentum < 1))
        throw ConfigError("teacher.momentum must be in [0, 1)");
    if (teacher.optimizer.batch_size == 0) throw ConfigError("teacher.batch_size must be positive");
    if (eval.seeds == 0) throw ConfigError("eval.seeds must be at least 1");
    if (eval.options.batch_size == 0) throw ConfigError("eval.batch_size must be positive");
    try {
        distill.validate();
        if (teacher.augmentation) teacher.augmentation->validate();
        if (eval.options.augmentation) eval.options.augmentation->validate();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    if (distill.max_start && *distill.max_start + distill.K > teacher.epochs)
        throw ConfigError("distill.max_start + distill.K exceeds teacher.epochs");
    if (!distill.max_start && teacher.epochs / 2 + distill.K > teacher.epochs)
        throw ConfigError("distill.K exceeds half of teacher.epochs; set distill.max_start");
}

json to_json(const RunConfig& c) {
    json distill = to_json(c.distill);
    distill.erase("seed");
    json eval = to_json(c.eval.options);
    eval["seeds"] = c.eval.seeds;
    eval["baseline"] = c.eval.baseline;
    eval["full"] = c.eval.full;
    eval["validation"] = c.eval.validation;
    return {{"seed", c.seed},
            {"threads", c.threads},
            {"precision", c.precision},
            {"model", {{"depth", c.model_depth}, {"width", c.model_width}}},
            {"data",
             {{"source", c.data.source},
              {"seed", c.data.seed},
              {"resize", c.data.resize},
              {"test_fraction", c.data.test_fraction},
              {"synthetic", to_json(c.data.synthetic)}}},
            {"teacher",
             {{"epochs", c.teacher.epochs},
              {"count", c.teacher.count},
              {"optimizer", c.teacher.optimizer.kind},
              {"lr", c.teacher.optimizer.lr},
              {"momentum", c.teacher.optimizer.momentum},
              {"batch_size", c.teacher.optimizer.batch_size},
              {"augmentation", optional_aug(c.teacher.augmentation)}}},
            {"distill", distill},
            {"eval", eval}};
}

RunConfig run_config_from_json(const json& j) {
    RunConfig c;
    try {
        c.seed = j.at("seed").get<std::uint64_t>();
        c.threads = j.at("threads").get<std::size_t>();
        c.precision = j.at("precision").get<std::string>();
        c.model_depth = j.at("model").at("depth").get<std::size_t>();
        c.model_width = j.at("model").at("width").get<std::size_t>();
        const auto& d = j.at("data");
        c.data.source = d.at("source").get<std::string>();
        c.data.seed = d.at("seed").get<std::uint64_t>();
        c.data.resize = d.at("resize").get<std::size_t>();
        c.data.test_fraction = d.at("test_fraction").get<double>();
        c.data.synthetic = synth_spec_from_json(d.at("synthetic"));
        const auto& t = j.at("teacher");
        c.teacher.epochs = t.at("epochs").get<std::size_t>();
        c.teacher.count = t.at("count").get<std::size_t>();
        c.teacher.optimizer.kind = t.at("optimizer").get<std::string>();
        c.teacher.optimizer.lr = t.at("lr").get<double>();
        c.teacher.optimizer.momentum = t.at("momentum").get<double>();
        c.teacher.optimizer.batch_size = t.at("batch_size").get<std::size_t>();
        c.teacher.augmentation = optional_aug_from(t.at("augmentation"));
        json distill = j.at("distill");
        distill["seed"] = derive_seed(c.seed, 3);
        c.distill = distill_config_from_json(distill);
        const auto& e = j.at("eval");
        c.eval.options = eval_options_from_json(e);
        c.eval.options.threads = c.threads;
        c.eval.seeds = e.at("seeds").get<std::size_t>();
        c.eval.baseline = e.at("baseline").get<bool>();
        c.eval.full = e.at("full").get<bool>();
        c.eval.validation = e.at("validation").get<std::size_t>();
    } catch (const nlohmann::json::exception& ex) {
        throw ConfigError(std::string("malformed config: ") + ex.what());
    } catch (const ConfigError&) {
        throw;
    } catch (const std::invalid_argument& ex) {
        throw ConfigError(ex.what());
    }
    c.validate();
    return c;
}

RunConfig resolve_config(const json& file, const std::map<std::string, json>& overrides) {
    json merged = to_json(RunConfig{});
    if (!file.is_null()) merge_checked(merged, file, "");
    for (const auto& [pointer, value] : overrides) {
        const json::json_pointer ptr(pointer);
        if (!merged.contains(ptr)) throw ConfigError("unknown config key " + pointer);
        json patch = json::object();
        patch[ptr] = value;
        merge_checked(merged, patch, "");
    }
    return run_config_from_json(merged);
}

std::string canonical_json(const RunConfig& c) {
    json j = to_json(c);
    j.erase("threads");
    return j.dump();
}

std::string config_digest(const RunConfig& c) { return sha256_hex(canonical_json(c)); }

}  // namespace distillforge
