#include "koa/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>

#include "koa/errors.hpp"

namespace koa::config {

using nlohmann::json;

std::string task_name(Task t) { return t == Task::Binary ? "binary" : "multiclass"; }

Task task_from_name(const std::string& name) {
    if (name == "multiclass") return Task::Multiclass;
    if (name == "binary") return Task::Binary;
    throw ConfigError("config: task must be 'multiclass' or 'binary', got '" + name + "'");
}

RunConfig default_config() {
    RunConfig cfg;
    cfg.preprocess.target_width = 48;
    cfg.preprocess.target_height = 48;
    cfg.backbones = {
        {"densenet_role", {8, 16, 32}, 40},
        {"yolo_role", {16, 32}, 20},
        {"mobilenet_role", {8, 16}, 20},
    };
    cfg.grids = {
        {"knn", {{"k", {1, 2, 4, 6, 8}}}},
        {"random_forest", {{"n_trees", {50, 100}}, {"max_depth", {0}}, {"features_per_split", {0}}}},
        {"gbdt", {{"depth", {10, 15}}, {"iterations", {100}}, {"learning_rate", {0.1, 0.00005}}}},
    };
    return cfg;
}

namespace {

ensemble::SearchMetric metric_from_name(const std::string& name) {
    if (name == "accuracy") return ensemble::SearchMetric::Accuracy;
    if (name == "balanced_accuracy") return ensemble::SearchMetric::BalancedAccuracy;
    throw ConfigError("config: metric must be 'accuracy' or 'balanced_accuracy', got '" + name + "'");
}

std::string metric_name(ensemble::SearchMetric m) {
    return m == ensemble::SearchMetric::Accuracy ? "accuracy" : "balanced_accuracy";
}

void reject_unknown_keys(const json& j, const std::set<std::string>& known,
                         const std::string& scope) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!known.count(it.key())) {
            throw ConfigError("config: unknown key '" + it.key() + "' in " + scope);
        }
    }
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: bad value for '") + key + "': " + e.what());
    }
}

}  // namespace

RunConfig from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("config: root must be a JSON object");
    reject_unknown_keys(j, {"task", "seed", "data_root", "out_dir", "preprocess", "split",
                            "backbones", "training", "selection", "meta", "stacking", "synth"},
                        "root");

    RunConfig cfg = default_config();
    bool threshold_given = false;

    cfg.task = task_from_name(get_or<std::string>(j, "task", "multiclass"));
    cfg.seed = get_or<uint64_t>(j, "seed", cfg.seed);
    cfg.data_root = get_or<std::string>(j, "data_root", cfg.data_root);
    cfg.out_dir = get_or<std::string>(j, "out_dir", cfg.out_dir);

    if (j.contains("preprocess")) {
        const json& p = j.at("preprocess");
        reject_unknown_keys(p, {"crop", "clahe", "augment", "target_width", "target_height",
                                "augment_train"},
                            "preprocess");
        if (p.contains("crop")) {
            const json& c = p.at("crop");
            reject_unknown_keys(c, {"x_frac", "y_frac", "w_frac", "h_frac"}, "preprocess.crop");
            cfg.preprocess.crop.x_frac = get_or<double>(c, "x_frac", 0.0);
            cfg.preprocess.crop.y_frac = get_or<double>(c, "y_frac", 0.0);
            cfg.preprocess.crop.w_frac = get_or<double>(c, "w_frac", 1.0);
            cfg.preprocess.crop.h_frac = get_or<double>(c, "h_frac", 1.0);
        }
        if (p.contains("clahe")) {
            const json& c = p.at("clahe");
            reject_unknown_keys(c, {"clip_limit", "tiles_x", "tiles_y", "n_bins"}, "preprocess.clahe");
            cfg.preprocess.clahe.clip_limit = get_or<double>(c, "clip_limit", 3.0);
            cfg.preprocess.clahe.tiles_x = get_or<size_t>(c, "tiles_x", 8);
            cfg.preprocess.clahe.tiles_y = get_or<size_t>(c, "tiles_y", 8);
            cfg.preprocess.clahe.n_bins = get_or<size_t>(c, "n_bins", 256);
        }
        if (p.contains("augment")) {
            const json& a = p.at("augment");
            reject_unknown_keys(a, {"flip_probability", "zoom_fraction"}, "preprocess.augment");
            cfg.preprocess.augment.flip_probability = get_or<double>(a, "flip_probability", 0.5);
            cfg.preprocess.augment.zoom_fraction = get_or<double>(a, "zoom_fraction", 0.1);
        }
        cfg.preprocess.target_width = get_or<size_t>(p, "target_width", cfg.preprocess.target_width);
        cfg.preprocess.target_height =
            get_or<size_t>(p, "target_height", cfg.preprocess.target_height);
        cfg.augment_train = get_or<bool>(p, "augment_train", true);
    }

    if (j.contains("split")) {
        const json& s = j.at("split");
        reject_unknown_keys(s, {"ratios"}, "split");
        if (s.contains("ratios")) {
            auto r = s.at("ratios").get<std::vector<double>>();
            if (r.size() != 3) throw ConfigError("config: split.ratios needs 3 values");
            cfg.ratios = {r[0], r[1], r[2]};
        }
    }

    if (j.contains("backbones")) {
        cfg.backbones.clear();
        for (const json& b : j.at("backbones")) {
            reject_unknown_keys(b, {"name", "channels", "epochs"}, "backbones[]");
            BackboneConfig bc;
            bc.name = b.at("name").get<std::string>();
            bc.channels = get_or<std::vector<size_t>>(b, "channels", {8, 16, 32});
            bc.epochs = get_or<size_t>(b, "epochs", 10);
            cfg.backbones.push_back(std::move(bc));
        }
    }

    if (j.contains("training")) {
        const json& t = j.at("training");
        reject_unknown_keys(t, {"learning_rate", "momentum", "batch_size", "dropout",
                                "dense_units", "use_class_weights"},
                            "training");
        cfg.learning_rate = get_or<double>(t, "learning_rate", 0.001);
        cfg.momentum = get_or<double>(t, "momentum", 0.9);
        cfg.batch_size = get_or<size_t>(t, "batch_size", 32);
        cfg.dropout = get_or<double>(t, "dropout", 0.2);
        cfg.dense_units = get_or<size_t>(t, "dense_units", 320);
        cfg.use_class_weights = get_or<bool>(t, "use_class_weights", true);
    }

    if (j.contains("selection")) {
        const json& s = j.at("selection");
        reject_unknown_keys(s, {"threshold", "metric"}, "selection");
        if (s.contains("threshold") && !s.at("threshold").is_null()) {
            cfg.selection_threshold = s.at("threshold").get<double>();
            threshold_given = true;
        }
        cfg.selection_metric = metric_from_name(get_or<std::string>(s, "metric", "accuracy"));
    }
    if (!threshold_given) {
        cfg.selection_threshold = cfg.task == Task::Binary ? 0.7 : 0.5;
    }

    if (j.contains("meta")) {
        const json& m = j.at("meta");
        reject_unknown_keys(m, {"folds", "search", "n_draws", "metric", "grids"}, "meta");
        cfg.cv_folds = get_or<size_t>(m, "folds", 3);
        std::string mode = get_or<std::string>(m, "search", "exhaustive");
        if (mode != "exhaustive" && mode != "random") {
            throw ConfigError("config: meta.search must be 'exhaustive' or 'random'");
        }
        cfg.random_search = mode == "random";
        cfg.n_draws = get_or<size_t>(m, "n_draws", 10);
        cfg.cv_metric = metric_from_name(get_or<std::string>(m, "metric", "accuracy"));
        if (m.contains("grids")) {
            cfg.grids.clear();
            for (auto it = m.at("grids").begin(); it != m.at("grids").end(); ++it) {
                ensemble::meta_kind_from_name(it.key());  // validates the name
                std::map<std::string, std::vector<double>> grid;
                for (auto p = it.value().begin(); p != it.value().end(); ++p) {
                    grid[p.key()] = p.value().get<std::vector<double>>();
                }
                cfg.grids[it.key()] = std::move(grid);
            }
        }
    }

    if (j.contains("stacking")) {
        const json& s = j.at("stacking");
        reject_unknown_keys(s, {"mode", "oof_folds"}, "stacking");
        std::string mode = get_or<std::string>(s, "mode", "paper");
        if (mode == "paper") cfg.stack_mode = ensemble::StackMode::Paper;
        else if (mode == "out_of_fold") cfg.stack_mode = ensemble::StackMode::OutOfFold;
        else throw ConfigError("config: stacking.mode must be 'paper' or 'out_of_fold'");
        cfg.oof_folds = get_or<size_t>(s, "oof_folds", 5);
    }

    if (j.contains("synth")) {
        const json& s = j.at("synth");
        reject_unknown_keys(s, {"counts", "width", "height"}, "synth");
        if (s.contains("counts")) {
            auto c = s.at("counts").get<std::vector<size_t>>();
            if (c.size() != 5) throw ConfigError("config: synth.counts needs 5 values");
            std::copy(c.begin(), c.end(), cfg.synth.counts.begin());
        }
        cfg.synth.width = get_or<size_t>(s, "width", 64);
        cfg.synth.height = get_or<size_t>(s, "height", 64);
    }
    cfg.synth.seed = mix_seed(cfg.seed, "synth");

    cfg.validate();
    return cfg;
}

void RunConfig::validate() const {
    preprocess.crop.validate();
    preprocess.clahe.validate();
    preprocess.augment.validate();
    if (preprocess.target_width < 8 || preprocess.target_height < 8) {
        throw ConfigError("config: target size must be at least 8x8");
    }
    ratios.validate();
    if (backbones.empty()) throw ConfigError("config: at least one backbone required");
    std::set<std::string> names;
    for (const auto& b : backbones) {
        if (b.name.empty()) throw ConfigError("config: backbone names must be non-empty");
        if (!names.insert(b.name).second) {
            throw ConfigError("config: duplicate backbone name '" + b.name + "'");
        }
        if (b.epochs == 0) throw ConfigError("config: backbone '" + b.name + "' has 0 epochs");
    }
    if (!(learning_rate > 0.0)) throw ConfigError("config: learning_rate must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("config: momentum must lie in [0,1)");
    if (batch_size < 1) throw ConfigError("config: batch_size must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("config: dropout must lie in [0,1)");
    if (cv_folds < 2) throw ConfigError("config: meta.folds must be at least 2");
    if (grids.empty()) throw ConfigError("config: meta.grids must name at least one meta-learner");
}

json to_json(const RunConfig& cfg) {
    json j;
    j["task"] = task_name(cfg.task);
    j["seed"] = cfg.seed;
    j["data_root"] = cfg.data_root;
    j["out_dir"] = cfg.out_dir;
    j["preprocess"] = {
        {"crop",
         {{"x_frac", cfg.preprocess.crop.x_frac},
          {"y_frac", cfg.preprocess.crop.y_frac},
          {"w_frac", cfg.preprocess.crop.w_frac},
          {"h_frac", cfg.preprocess.crop.h_frac}}},
        {"clahe",
         {{"clip_limit", cfg.preprocess.clahe.clip_limit},
          {"tiles_x", cfg.preprocess.clahe.tiles_x},
          {"tiles_y", cfg.preprocess.clahe.tiles_y},
          {"n_bins", cfg.preprocess.clahe.n_bins}}},
        {"augment",
         {{"flip_probability", cfg.preprocess.augment.flip_probability},
          {"zoom_fraction", cfg.preprocess.augment.zoom_fraction}}},
        {"target_width", cfg.preprocess.target_width},
        {"target_height", cfg.preprocess.target_height},
        {"augment_train", cfg.augment_train},
    };
    j["split"] = {{"ratios", {cfg.ratios.train, cfg.ratios.val, cfg.ratios.test}}};
    json backbones = json::array();
    for (const auto& b : cfg.backbones) {
        backbones.push_back({{"name", b.name}, {"channels", b.channels}, {"epochs", b.epochs}});
    }
    j["backbones"] = std::move(backbones);
    j["training"] = {{"learning_rate", cfg.learning_rate}, {"momentum", cfg.momentum},
                     {"batch_size", cfg.batch_size},       {"dropout", cfg.dropout},
                     {"dense_units", cfg.dense_units},     {"use_class_weights", cfg.use_class_weights}};
    j["selection"] = {{"threshold", cfg.selection_threshold},
                      {"metric", metric_name(cfg.selection_metric)}};
    json grids;
    for (const auto& [kind, grid] : cfg.grids) {
        json g;
        for (const auto& [name, values] : grid) g[name] = values;
        grids[kind] = std::move(g);
    }
    j["meta"] = {{"folds", cfg.cv_folds},
                 {"search", cfg.random_search ? "random" : "exhaustive"},
                 {"n_draws", cfg.n_draws},
                 {"metric", metric_name(cfg.cv_metric)},
                 {"grids", std::move(grids)}};
    j["stacking"] = {{"mode", cfg.stack_mode == ensemble::StackMode::Paper ? "paper" : "out_of_fold"},
                     {"oof_folds", cfg.oof_folds}};
    j["synth"] = {{"counts", cfg.synth.counts}, {"width", cfg.synth.width},
                  {"height", cfg.synth.height}};
    return j;
}

RunConfig load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("config: cannot open " + path);
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config: invalid JSON in " + path + ": " + e.what());
    }
    return from_json(j);
}

std::string config_hash(const RunConfig& cfg) {
    json j = to_json(cfg);
    j.erase("data_root");
    j.erase("out_dir");
    std::string dump = j.dump();
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : dump) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    char buf[24];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void save_resolved(const RunConfig& cfg, const std::string& path) {
    json j = to_json(cfg);
    j["config_hash"] = config_hash(cfg);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("config: cannot write " + path);
    f << j.dump(2) << "\n";
}

}  // namespace koa::config
