#include "koa/pipeline.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "koa/csv.hpp"
#include "koa/errors.hpp"
#include "koa/imaging.hpp"
#include "koa/rng.hpp"

namespace fs = std::filesystem;

namespace koa::pipeline {

using nlohmann::json;

Paths Paths::from(const config::RunConfig& cfg) {
    Paths p;
    p.out = cfg.out_dir;
    p.resolved_config = (fs::path(cfg.out_dir) / "config.resolved.json").string();
    p.splits_csv = (fs::path(cfg.out_dir) / "splits.csv").string();
    p.prep_dir = (fs::path(cfg.out_dir) / "prep").string();
    p.models_dir = (fs::path(cfg.out_dir) / "models").string();
    p.history_dir = (fs::path(cfg.out_dir) / "history").string();
    p.probs_dir = (fs::path(cfg.out_dir) / "probs").string();
    p.reports_dir = (fs::path(cfg.out_dir) / "reports").string();
    p.search_dir = (fs::path(cfg.out_dir) / "search").string();
    p.meta_dir = (fs::path(cfg.out_dir) / "meta").string();
    p.summary_txt = (fs::path(cfg.out_dir) / "summary.txt").string();
    return p;
}

std::string Paths::prep_json(const std::string& split) const {
    return (fs::path(prep_dir) / (split + ".json")).string();
}
std::string Paths::prep_f64(const std::string& split) const {
    return (fs::path(prep_dir) / (split + ".f64")).string();
}
std::string Paths::model_json(const std::string& backbone) const {
    return (fs::path(models_dir) / (backbone + ".json")).string();
}
std::string Paths::history_csv(const std::string& backbone) const {
    return (fs::path(history_dir) / (backbone + ".csv")).string();
}
std::string Paths::probs_csv(const std::string& backbone, const std::string& split) const {
    return (fs::path(probs_dir) / (backbone + "_" + split + ".csv")).string();
}
std::string Paths::base_report_csv(const std::string& backbone) const {
    return (fs::path(reports_dir) / ("base_" + backbone + ".csv")).string();
}
std::string Paths::search_cells_csv(const std::string& kind) const {
    return (fs::path(search_dir) / (kind + "_cells.csv")).string();
}
std::string Paths::best_json() const { return (fs::path(search_dir) / "best.json").string(); }
std::string Paths::meta_model_json(const std::string& kind) const {
    return (fs::path(meta_dir) / ("meta_" + kind + ".json")).string();
}
std::string Paths::meta_report_csv(const std::string& kind) const {
    return (fs::path(reports_dir) / ("meta_" + kind + ".csv")).string();
}

namespace {

std::map<std::string, std::string> artifact_meta(const config::RunConfig& cfg) {
    return {{"config_hash", config::config_hash(cfg)}, {"seed", std::to_string(cfg.seed)}};
}

// Reads the config_hash stamp from a CSV or JSON artifact; empty if absent.
// Raw tensor files (.f64) carry their stamp in the sibling .json metadata.
std::string artifact_hash(const std::string& path) {
    if (path.size() > 4 && path.substr(path.size() - 4) == ".f64") {
        return artifact_hash(path.substr(0, path.size() - 4) + ".json");
    }
    if (path.size() > 5 && path.substr(path.size() - 5) == ".json") {
        std::ifstream f(path);
        if (!f) return "";
        json j;
        try {
            f >> j;
        } catch (...) {
            return "";
        }
        if (j.contains("meta") && j.at("meta").contains("config_hash")) {
            return j.at("meta").at("config_hash").get<std::string>();
        }
        return j.value("config_hash", "");
    }
    try {
        csv::Table t = csv::read(path);
        auto it = t.meta.find("config_hash");
        return it == t.meta.end() ? "" : it->second;
    } catch (...) {
        return "";
    }
}

// Resume contract: existing artifacts are never rewritten. Returns true when
// every path exists with the current config hash; throws if a stale artifact
// would otherwise be overwritten; returns false when everything is absent.
bool reuse_artifacts(const std::vector<std::string>& paths_list, const std::string& hash,
                     const std::string& stage) {
    bool any = false, all = true;
    for (const auto& p : paths_list) {
        if (fs::exists(p)) any = true;
        else all = false;
    }
    if (!any) return false;
    if (!all) {
        throw DataError(stage + ": output set is incomplete; remove the partial artifacts or use "
                                "a fresh out_dir");
    }
    for (const auto& p : paths_list) {
        std::string h = artifact_hash(p);
        if (h != hash) {
            throw DataError(stage + ": existing artifact " + p +
                            " was produced by a different config (hash " + h + " vs " + hash +
                            "); use a fresh out_dir");
        }
    }
    std::cout << "[" << stage << "] reusing existing artifacts (config hash verified)\n";
    return true;
}

void require_artifacts(const std::vector<std::string>& paths_list, const std::string& stage,
                       const std::string& upstream) {
    for (const auto& p : paths_list) {
        if (!fs::exists(p)) {
            throw DataError(stage + ": missing upstream artifact " + p + "; rerun the '" +
                            upstream + "' stage");
        }
    }
}

int source_class_count(const dataset::IngestResult& ingested) {
    return ingested.n_classes;
}

void check_task_classes(const config::RunConfig& cfg, int source_classes,
                        const std::map<int, size_t>& counts) {
    if (cfg.task == config::Task::Multiclass) {
        if (source_classes != 5) {
            throw DataError("multiclass task requires class directories 0..4 (found " +
                            std::to_string(source_classes) + " classes)");
        }
    } else {
        if (source_classes != 5 && source_classes != 2) {
            throw DataError("binary task requires a 5-grade source (remapped) or a 2-class "
                            "source, found " + std::to_string(source_classes) + " classes");
        }
    }
    for (int c = 0; c < source_classes; ++c) {
        auto it = counts.find(c);
        if (it == counts.end() || it->second == 0) {
            throw DataError("class " + std::to_string(c) + " has no readable samples");
        }
    }
}

}  // namespace

std::vector<int> task_labels(const std::vector<int>& source_grades, int source_classes,
                             config::Task task) {
    if (task == config::Task::Multiclass) return source_grades;
    std::vector<int> out(source_grades.size());
    for (size_t i = 0; i < source_grades.size(); ++i) {
        out[i] = source_classes == 5 ? dataset::remap_binary(source_grades[i]) : source_grades[i];
    }
    return out;
}

std::string run_synth(const config::RunConfig& cfg) {
    auto samples = dataset::synthesize(cfg.synth);
    dataset::write_dataset(samples, cfg.data_root);
    std::map<int, size_t> counts;
    for (const auto& s : samples) ++counts[s.grade];
    std::cout << "[synth] wrote " << samples.size() << " images to " << cfg.data_root << " (";
    for (int c = 0; c < 5; ++c) std::cout << (c ? "," : "") << counts[c];
    std::cout << " per grade)\n";
    return cfg.data_root;
}

void write_prep_split(const Paths& paths, const std::string& split, const PrepSplit& data) {
    json j;
    j["split"] = split;
    j["ids"] = data.ids;
    j["grades"] = data.grades;
    j["shape"] = data.x.shape;
    j["source_classes"] = data.source_classes;
    for (const auto& [k, v] : data.meta) j["meta"][k] = v;
    std::ofstream jf(paths.prep_json(split), std::ios::binary);
    if (!jf) throw DataError("prep: cannot write " + paths.prep_json(split));
    jf << j.dump(1) << "\n";

    std::ofstream bf(paths.prep_f64(split), std::ios::binary);
    if (!bf) throw DataError("prep: cannot write " + paths.prep_f64(split));
    bf.write(reinterpret_cast<const char*>(data.x.data.data()),
             static_cast<std::streamsize>(data.x.data.size() * sizeof(double)));
    if (!bf) throw DataError("prep: write failed: " + paths.prep_f64(split));
}

PrepSplit read_prep_split(const Paths& paths, const std::string& split) {
    std::ifstream jf(paths.prep_json(split));
    if (!jf) throw DataError("prep: cannot open " + paths.prep_json(split));
    json j;
    try {
        jf >> j;
    } catch (const json::exception& e) {
        throw DataError("prep: invalid metadata " + paths.prep_json(split) + ": " + e.what());
    }
    PrepSplit d;
    d.ids = j.at("ids").get<std::vector<std::string>>();
    d.grades = j.at("grades").get<std::vector<int>>();
    d.source_classes = j.at("source_classes").get<int>();
    if (j.contains("meta")) {
        for (auto it = j.at("meta").begin(); it != j.at("meta").end(); ++it) {
            d.meta[it.key()] = it.value().get<std::string>();
        }
    }
    d.x.shape = j.at("shape").get<std::vector<size_t>>();
    d.x.data.resize(d.x.shape_numel());
    std::ifstream bf(paths.prep_f64(split), std::ios::binary);
    if (!bf) throw DataError("prep: cannot open " + paths.prep_f64(split));
    bf.read(reinterpret_cast<char*>(d.x.data.data()),
            static_cast<std::streamsize>(d.x.data.size() * sizeof(double)));
    if (bf.gcount() != static_cast<std::streamsize>(d.x.data.size() * sizeof(double))) {
        throw DataError("prep: truncated tensor file " + paths.prep_f64(split));
    }
    return d;
}

void run_prep(const config::RunConfig& cfg, bool resume) {
    Paths paths = Paths::from(cfg);
    std::string hash = config::config_hash(cfg);
    fs::create_directories(paths.out);
    fs::create_directories(paths.prep_dir);
    config::save_resolved(cfg, paths.resolved_config);

    std::vector<std::string> outputs = {paths.splits_csv};
    for (const char* split : {"train", "val", "test"}) {
        outputs.push_back(paths.prep_json(split));
        outputs.push_back(paths.prep_f64(split));
    }
    if (resume && reuse_artifacts(outputs, hash, "prep")) return;

    dataset::IngestResult ingested = dataset::ingest(cfg.data_root);
    int source_classes = source_class_count(ingested);
    check_task_classes(cfg, source_classes, ingested.class_counts);
    std::cout << "[prep] ingested " << ingested.samples.size() << " samples, skipped "
              << ingested.skipped << " (classes:";
    for (const auto& [c, n] : ingested.class_counts) std::cout << " " << c << "=" << n;
    std::cout << ")\n";

    std::vector<int> grades;
    for (const auto& s : ingested.samples) grades.push_back(s.grade);
    dataset::SplitIndices split =
        dataset::stratified_split(grades, cfg.ratios, mix_seed(cfg.seed, "split"));
    auto meta = artifact_meta(cfg);
    meta["source_classes"] = std::to_string(source_classes);
    dataset::write_split_manifest(paths.splits_csv, ingested.samples, split, meta);

    auto materialize = [&](const std::vector<size_t>& idx, const std::string& name, bool is_train) {
        PrepSplit d;
        d.source_classes = source_classes;
        d.meta = meta;
        size_t h = cfg.preprocess.target_height, w = cfg.preprocess.target_width;
        d.x = Tensor::zeros({idx.size(), h, w, 1});
        imaging::PipelineParams pp = cfg.preprocess;
        pp.augment_enabled = is_train && cfg.augment_train;
        for (size_t i = 0; i < idx.size(); ++i) {
            const dataset::RawSample& s = ingested.samples[idx[i]];
            Rng rng(mix_seed(cfg.seed, "aug:" + s.source_id));
            Tensor t = imaging::preprocess(s.image, pp, rng);
            std::copy(t.data.begin(), t.data.end(), d.x.data.begin() + i * t.numel());
            d.ids.push_back(s.source_id);
            d.grades.push_back(s.grade);
        }
        write_prep_split(paths, name, d);
        std::cout << "[prep] " << name << ": " << idx.size() << " tensors\n";
    };
    materialize(split.train, "train", true);
    materialize(split.val, "val", false);
    materialize(split.test, "test", false);
}

namespace {

nn::TrainData to_train_data(const PrepSplit& split, config::Task task) {
    nn::TrainData d;
    d.x = split.x;
    d.y = task_labels(split.grades, split.source_classes, task);
    return d;
}

nn::ModelConfig backbone_model_config(const config::RunConfig& cfg,
                                      const config::BackboneConfig& b) {
    nn::ModelConfig mc;
    mc.conv_channels = b.channels;
    mc.dense_units = cfg.dense_units;
    mc.dropout_rate = cfg.dropout;
    mc.n_classes = cfg.n_task_classes();
    mc.head = cfg.task == config::Task::Binary ? nn::HeadKind::Sigmoid : nn::HeadKind::Softmax;
    mc.input_channels = 1;
    mc.init_seed = mix_seed(cfg.seed, "init:" + b.name);
    return mc;
}

nn::TrainConfig backbone_train_config(const config::RunConfig& cfg,
                                      const config::BackboneConfig& b,
                                      const std::vector<int>& train_labels) {
    nn::TrainConfig tc;
    tc.lr = cfg.learning_rate;
    tc.momentum = cfg.momentum;
    tc.epochs = b.epochs;
    tc.batch_size = cfg.batch_size;
    tc.seed = mix_seed(cfg.seed, "train:" + b.name);
    int n_classes = cfg.n_task_classes();
    std::vector<double> weights;
    if (cfg.use_class_weights) {
        weights = dataset::class_weights(train_labels, n_classes).weights;
    } else {
        weights.assign(static_cast<size_t>(n_classes), 1.0);
    }
    tc.loss = cfg.task == config::Task::Binary ? nn::LossSpec::binary(weights)
                                               : nn::LossSpec::categorical(weights);
    return tc;
}

}  // namespace

void run_train_base(const config::RunConfig& cfg, bool resume) {
    Paths paths = Paths::from(cfg);
    std::string hash = config::config_hash(cfg);
    fs::create_directories(paths.models_dir);
    fs::create_directories(paths.history_dir);

    std::vector<std::string> inputs;
    for (const char* split : {"train", "val"}) {
        inputs.push_back(paths.prep_json(split));
        inputs.push_back(paths.prep_f64(split));
    }
    require_artifacts(inputs, "train-base", "prep");

    std::vector<std::string> outputs;
    for (const auto& b : cfg.backbones) {
        outputs.push_back(paths.model_json(b.name));
        outputs.push_back(paths.history_csv(b.name));
    }
    if (resume && reuse_artifacts(outputs, hash, "train-base")) return;

    PrepSplit train_split = read_prep_split(paths, "train");
    PrepSplit val_split = read_prep_split(paths, "val");
    nn::TrainData train_data = to_train_data(train_split, cfg.task);
    nn::TrainData val_data = to_train_data(val_split, cfg.task);

    for (const auto& b : cfg.backbones) {
        nn::Model model = nn::build_model(backbone_model_config(cfg, b));
        nn::TrainConfig tc = backbone_train_config(cfg, b, train_data.y);
        auto history = nn::train(model, train_data, val_data, tc);
        auto meta = artifact_meta(cfg);
        meta["backbone"] = b.name;
        nn::save_model(model, paths.model_json(b.name), meta);
        nn::write_history_csv(paths.history_csv(b.name), history, meta);
        std::cout << "[train-base] " << b.name << ": " << history.size() << " epochs, final "
                  << "train_acc=" << (history.empty() ? 0.0 : history.back().train_accuracy)
                  << " val_acc=" << (history.empty() ? 0.0 : history.back().val_accuracy) << "\n";
    }
}

void run_extract(const config::RunConfig& cfg, bool resume) {
    Paths paths = Paths::from(cfg);
    std::string hash = config::config_hash(cfg);
    fs::create_directories(paths.probs_dir);
    fs::create_directories(paths.reports_dir);

    std::vector<std::string> inputs;
    for (const char* split : {"train", "val", "test"}) {
        inputs.push_back(paths.prep_json(split));
        inputs.push_back(paths.prep_f64(split));
    }
    require_artifacts(inputs, "extract", "prep");
    std::vector<std::string> model_files;
    for (const auto& b : cfg.backbones) model_files.push_back(paths.model_json(b.name));
    require_artifacts(model_files, "extract", "train-base");

    std::vector<std::string> outputs;
    for (const auto& b : cfg.backbones) {
        for (const char* split : {"train", "val", "test"}) {
            outputs.push_back(paths.probs_csv(b.name, split));
        }
        outputs.push_back(paths.base_report_csv(b.name));
    }
    if (resume && reuse_artifacts(outputs, hash, "extract")) return;

    std::map<std::string, PrepSplit> splits;
    for (const char* split : {"train", "val", "test"}) {
        splits[split] = read_prep_split(paths, split);
    }

    for (const auto& b : cfg.backbones) {
        nn::Model model = nn::load_model(paths.model_json(b.name));
        std::vector<metrics::EvalReport> reports;
        for (const char* split : {"train", "val", "test"}) {
            const PrepSplit& d = splits[split];
            Tensor probs = nn::predict_proba(model, d.x);
            auto meta = artifact_meta(cfg);
            meta["backbone"] = b.name;
            meta["split"] = split;
            ensemble::write_probs_csv(paths.probs_csv(b.name, split), probs, d.ids, meta);
            std::vector<int> labels = task_labels(d.grades, d.source_classes, cfg.task);
            reports.push_back(metrics::evaluate(split, probs, labels, cfg.n_task_classes()));
        }
        auto meta = artifact_meta(cfg);
        meta["backbone"] = b.name;
        metrics::write_reports_csv(paths.base_report_csv(b.name), reports, meta);
        std::cout << "[extract] " << b.name << ": test_acc=" << reports.back().accuracy
                  << " test_bal_acc=" << reports.back().balanced_accuracy << "\n";
    }
}

namespace {

double report_metric(const metrics::EvalReport& r, ensemble::SearchMetric metric) {
    return metric == ensemble::SearchMetric::Accuracy ? r.accuracy : r.balanced_accuracy;
}

struct TuneResult {
    std::vector<std::string> selected;
    std::string best_kind;
    ensemble::MetaLearnerSpec best_spec;
};

TuneResult read_best_json(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("stack: cannot open " + path);
    json j;
    f >> j;
    TuneResult t;
    t.selected = j.at("selected_bases").get<std::vector<std::string>>();
    t.best_kind = j.at("best_kind").get<std::string>();
    const json& spec = j.at("best_spec");
    t.best_spec.kind = ensemble::meta_kind_from_name(t.best_kind);
    switch (t.best_spec.kind) {
        case ensemble::MetaKind::Knn:
            t.best_spec.knn.k = spec.at("k").get<size_t>();
            break;
        case ensemble::MetaKind::RandomForest:
            t.best_spec.rf.n_trees = spec.at("n_trees").get<size_t>();
            t.best_spec.rf.max_depth = spec.at("max_depth").get<size_t>();
            t.best_spec.rf.features_per_split = spec.at("features_per_split").get<size_t>();
            break;
        case ensemble::MetaKind::Gbdt:
            t.best_spec.gbdt.depth = spec.at("depth").get<size_t>();
            t.best_spec.gbdt.iterations = spec.at("iterations").get<size_t>();
            t.best_spec.gbdt.learning_rate = spec.at("learning_rate").get<double>();
            break;
    }
    return t;
}

json spec_to_json(const ensemble::MetaLearnerSpec& spec) {
    switch (spec.kind) {
        case ensemble::MetaKind::Knn:
            return {{"k", spec.knn.k}};
        case ensemble::MetaKind::RandomForest:
            return {{"n_trees", spec.rf.n_trees},
                    {"max_depth", spec.rf.max_depth},
                    {"features_per_split", spec.rf.features_per_split}};
        case ensemble::MetaKind::Gbdt:
            return {{"depth", spec.gbdt.depth},
                    {"iterations", spec.gbdt.iterations},
                    {"learning_rate", spec.gbdt.learning_rate}};
    }
    throw ConfigError("spec_to_json: unknown kind");
}

}  // namespace

void run_tune_meta(const config::RunConfig& cfg, bool resume) {
    Paths paths = Paths::from(cfg);
    std::string hash = config::config_hash(cfg);
    fs::create_directories(paths.search_dir);

    std::vector<std::string> report_files;
    for (const auto& b : cfg.backbones) report_files.push_back(paths.base_report_csv(b.name));
    require_artifacts(report_files, "tune-meta", "extract");
    require_artifacts({paths.prep_json("train")}, "tune-meta", "prep");

    std::vector<std::string> outputs = {paths.best_json()};
    for (const auto& [kind, grid] : cfg.grids) outputs.push_back(paths.search_cells_csv(kind));
    if (resume && reuse_artifacts(outputs, hash, "tune-meta")) return;

    // Base-learner selection on the configured test metric.
    std::map<std::string, double> test_scores;
    for (const auto& b : cfg.backbones) {
        auto reports = metrics::read_reports_csv(paths.base_report_csv(b.name));
        for (const auto& r : reports) {
            if (r.split == "test") test_scores[b.name] = report_metric(r, cfg.selection_metric);
        }
    }
    std::vector<std::string> selected =
        ensemble::select_base_learners(test_scores, cfg.selection_threshold);
    std::cout << "[tune-meta] selected bases:";
    for (const auto& s : selected) std::cout << " " << s;
    std::cout << " (threshold " << cfg.selection_threshold << ")\n";

    // Stacked training features from the selected bases' train probabilities.
    PrepSplit train_split = read_prep_split(paths, "train");
    std::vector<int> train_y = task_labels(train_split.grades, train_split.source_classes, cfg.task);
    std::vector<Tensor> prob_mats;
    for (const auto& name : selected) {
        require_artifacts({paths.probs_csv(name, "train")}, "tune-meta", "extract");
        prob_mats.push_back(ensemble::read_probs_csv(paths.probs_csv(name, "train")));
    }
    ensemble::StackedFeatures feats =
        ensemble::stack_features(prob_mats, selected, cfg.n_task_classes());

    json per_kind = json::object();
    std::string best_kind;
    ensemble::MetaLearnerSpec best_spec;
    double best_score = -1.0;
    for (const auto& [kind_name, candidates] : cfg.grids) {
        ensemble::MetaKind kind = ensemble::meta_kind_from_name(kind_name);
        ensemble::SearchGrid grid;
        grid.candidates = candidates;
        grid.folds = cfg.cv_folds;
        grid.random_mode = cfg.random_search;
        grid.n_draws = cfg.n_draws;
        grid.seed = mix_seed(cfg.seed, "cv:" + kind_name);
        grid.metric = cfg.cv_metric;
        ensemble::SearchResult result =
            ensemble::cross_val_search(kind, grid, feats.matrix, train_y, cfg.n_task_classes());
        ensemble::write_search_csv(paths.search_cells_csv(kind_name), kind, result,
                                   artifact_meta(cfg));
        per_kind[kind_name] = {{"spec", spec_to_json(result.best)},
                               {"cv_score", result.best_score}};
        std::cout << "[tune-meta] " << kind_name << ": best " << result.best.describe()
                  << " cv_score=" << result.best_score << "\n";
        if (result.best_score > best_score) {
            best_score = result.best_score;
            best_kind = kind_name;
            best_spec = result.best;
        }
    }

    json best;
    best["selected_bases"] = selected;
    best["per_kind"] = std::move(per_kind);
    best["best_kind"] = best_kind;
    best["best_spec"] = spec_to_json(best_spec);
    best["best_cv_score"] = best_score;
    best["meta"] = {{"config_hash", hash}, {"seed", std::to_string(cfg.seed)}};
    std::ofstream f(paths.best_json(), std::ios::binary);
    if (!f) throw DataError("tune-meta: cannot write " + paths.best_json());
    f << best.dump(1) << "\n";
}

void run_stack_stage(const config::RunConfig& cfg, bool resume) {
    Paths paths = Paths::from(cfg);
    std::string hash = config::config_hash(cfg);
    fs::create_directories(paths.meta_dir);
    fs::create_directories(paths.reports_dir);

    require_artifacts({paths.best_json()}, "stack", "tune-meta");
    TuneResult tuned = read_best_json(paths.best_json());

    std::vector<std::string> outputs = {paths.meta_model_json(tuned.best_kind),
                                        paths.meta_report_csv(tuned.best_kind)};
    if (resume && reuse_artifacts(outputs, hash, "stack")) return;

    std::vector<std::string> inputs;
    for (const char* split : {"train", "val", "test"}) {
        inputs.push_back(paths.prep_json(split));
        inputs.push_back(paths.prep_f64(split));
    }
    require_artifacts(inputs, "stack", "prep");

    ensemble::SplitTensors splits;
    PrepSplit train_split = read_prep_split(paths, "train");
    PrepSplit val_split = read_prep_split(paths, "val");
    PrepSplit test_split = read_prep_split(paths, "test");
    splits.train = to_train_data(train_split, cfg.task);
    splits.val = to_train_data(val_split, cfg.task);
    splits.test = to_train_data(test_split, cfg.task);

    std::vector<ensemble::BaseLearner> bases;
    for (const auto& name : tuned.selected) {
        require_artifacts({paths.model_json(name)}, "stack", "train-base");
        const config::BackboneConfig* bc = nullptr;
        for (const auto& b : cfg.backbones) {
            if (b.name == name) bc = &b;
        }
        if (!bc) {
            throw ConfigError("stack: selected base '" + name + "' is not in the config");
        }
        ensemble::BaseLearner bl;
        bl.name = name;
        bl.model = nn::load_model(paths.model_json(name));
        bl.train_config = backbone_train_config(cfg, *bc, splits.train.y);
        bases.push_back(std::move(bl));
    }

    ensemble::StackRunResult result =
        ensemble::run_stack(bases, splits, cfg.n_task_classes(), tuned.best_spec, cfg.stack_mode,
                            cfg.oof_folds, mix_seed(cfg.seed, "stack"));

    auto meta = artifact_meta(cfg);
    meta["meta_learner"] = tuned.best_spec.describe();
    ensemble::save_meta(result.meta, paths.meta_model_json(tuned.best_kind), meta);
    metrics::write_reports_csv(paths.meta_report_csv(tuned.best_kind), result.reports, meta);
    std::cout << "[stack] " << tuned.best_spec.describe()
              << ": test_acc=" << result.reports.back().accuracy
              << " test_bal_acc=" << result.reports.back().balanced_accuracy
              << " test_auc=" << result.reports.back().auc << "\n";
}

void run_report(const config::RunConfig& cfg, bool resume) {
    Paths paths = Paths::from(cfg);
    std::string hash = config::config_hash(cfg);
    (void)resume;  // the summary is cheap; always regenerated

    std::vector<std::string> report_files;
    for (const auto& b : cfg.backbones) report_files.push_back(paths.base_report_csv(b.name));
    require_artifacts(report_files, "report", "extract");
    require_artifacts({paths.best_json()}, "report", "tune-meta");
    TuneResult tuned = read_best_json(paths.best_json());
    require_artifacts({paths.meta_report_csv(tuned.best_kind)}, "report", "stack");

    std::ostringstream os;
    os << "# config_hash=" << hash << " seed=" << cfg.seed << "\n";
    os << "task: " << config::task_name(cfg.task) << "\n";
    os << "selected bases:";
    for (const auto& s : tuned.selected) os << " " << s;
    os << "\nmeta-learner: " << tuned.best_spec.describe() << "\n\n";
    char header[160];
    std::snprintf(header, sizeof(header), "%-18s %-18s %8s %8s %8s\n", "Model", "Metric", "Train",
                  "Val", "Test");
    os << header;
    for (const auto& b : cfg.backbones) {
        auto reports = metrics::read_reports_csv(paths.base_report_csv(b.name));
        os << metrics::format_summary(b.name, reports);
    }
    auto meta_reports = metrics::read_reports_csv(paths.meta_report_csv(tuned.best_kind));
    os << metrics::format_summary("stacked_" + tuned.best_kind, meta_reports);

    std::ofstream f(paths.summary_txt, std::ios::binary);
    if (!f) throw DataError("report: cannot write " + paths.summary_txt);
    f << os.str();
    std::cout << os.str();
}

void run_all(const config::RunConfig& cfg, bool resume) {
    run_prep(cfg, resume);
    run_train_base(cfg, resume);
    run_extract(cfg, resume);
    run_tune_meta(cfg, resume);
    run_stack_stage(cfg, resume);
    run_report(cfg, resume);
}

metrics::EvalReport evaluate_model(const config::RunConfig& cfg, const std::string& model_path,
                                   const std::string& data_dir, const std::string& manifest_path,
                                   const std::string& split, const std::string& out_csv) {
    nn::Model model = nn::load_model(model_path);

    dataset::IngestResult ingested = dataset::ingest(data_dir);
    int source_classes = source_class_count(ingested);

    std::vector<const dataset::RawSample*> selected;
    if (!manifest_path.empty()) {
        auto manifest = dataset::read_split_manifest(manifest_path);
        std::set<std::string> wanted;
        for (const auto& row : manifest) {
            if (split.empty() || row.split == split) wanted.insert(row.source_id);
        }
        for (const auto& s : ingested.samples) {
            if (wanted.count(s.source_id)) selected.push_back(&s);
        }
        if (selected.empty()) {
            throw DataError("eval: no samples matched manifest split '" + split + "'");
        }
    } else {
        for (const auto& s : ingested.samples) selected.push_back(&s);
    }

    imaging::PipelineParams pp = cfg.preprocess;
    pp.augment_enabled = false;
    size_t h = pp.target_height, w = pp.target_width;
    Tensor x = Tensor::zeros({selected.size(), h, w, 1});
    std::vector<int> grades;
    for (size_t i = 0; i < selected.size(); ++i) {
        Rng rng(mix_seed(cfg.seed, "aug:" + selected[i]->source_id));
        Tensor t = imaging::preprocess(selected[i]->image, pp, rng);
        std::copy(t.data.begin(), t.data.end(), x.data.begin() + i * t.numel());
        grades.push_back(selected[i]->grade);
    }

    config::Task task = model.config.n_classes == 2 ? config::Task::Binary : config::Task::Multiclass;
    if (task == config::Task::Multiclass && source_classes != 5) {
        throw DataError("eval: model expects 5 classes but data has " +
                        std::to_string(source_classes));
    }
    std::vector<int> labels = task_labels(grades, source_classes, task);
    Tensor probs = nn::predict_proba(model, x);
    metrics::EvalReport report =
        metrics::evaluate(split.empty() ? "all" : split, probs, labels, model.config.n_classes);
    if (!out_csv.empty()) {
        fs::create_directories(fs::path(out_csv).parent_path());
        metrics::write_reports_csv(out_csv, {report}, artifact_meta(cfg));
    }
    return report;
}

}  // namespace koa::pipeline
