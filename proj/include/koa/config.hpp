#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "koa/dataset.hpp"
#include "koa/ensemble.hpp"
#include "koa/imaging.hpp"

namespace koa::config {

enum class Task { Multiclass, Binary };

struct BackboneConfig {
    std::string name;
    std::vector<size_t> channels = {8, 16, 32};
    size_t epochs = 10;
};

/// Fully materialized run configuration: every default is filled in on load,
/// so a resolved config dump reproduces the run exactly.
struct RunConfig {
    Task task = Task::Multiclass;
    uint64_t seed = 42;
    std::string data_root = "data";
    std::string out_dir = "out";

    imaging::PipelineParams preprocess;  // augment_enabled applies to train only
    bool augment_train = true;

    dataset::SplitRatios ratios;

    std::vector<BackboneConfig> backbones;

    double learning_rate = 0.001;
    double momentum = 0.9;
    size_t batch_size = 32;
    double dropout = 0.2;
    size_t dense_units = 320;
    bool use_class_weights = true;

    double selection_threshold = 0.5;  // materialized per task: 0.5 / 0.7
    ensemble::SearchMetric selection_metric = ensemble::SearchMetric::Accuracy;

    size_t cv_folds = 3;
    bool random_search = false;
    size_t n_draws = 10;
    ensemble::SearchMetric cv_metric = ensemble::SearchMetric::Accuracy;
    std::map<std::string, std::map<std::string, std::vector<double>>> grids;

    ensemble::StackMode stack_mode = ensemble::StackMode::Paper;
    size_t oof_folds = 5;

    dataset::SynthSpec synth;

    int n_task_classes() const { return task == Task::Binary ? 2 : 5; }

    void validate() const;
};

RunConfig default_config();

/// Parses JSON, fills defaults, validates. Unknown keys are rejected so typos
/// do not silently fall back to defaults.
RunConfig from_json(const nlohmann::json& j);
RunConfig load(const std::string& path);

nlohmann::json to_json(const RunConfig& cfg);

/// FNV-1a 64 over the canonical resolved dump with filesystem paths removed,
/// so identical experiments hash identically regardless of where they run.
std::string config_hash(const RunConfig& cfg);

void save_resolved(const RunConfig& cfg, const std::string& path);

std::string task_name(Task t);
Task task_from_name(const std::string& name);

}  // namespace koa::config
