#pragma once

#include <map>
#include <string>
#include <vector>

#include "koa/config.hpp"
#include "koa/dataset.hpp"
#include "koa/ensemble.hpp"
#include "koa/metrics.hpp"
#include "koa/nn.hpp"

namespace koa::pipeline {

/// Artifact locations under the configured output directory.
struct Paths {
    std::string out;
    std::string resolved_config;
    std::string splits_csv;
    std::string prep_dir;
    std::string models_dir;
    std::string history_dir;
    std::string probs_dir;
    std::string reports_dir;
    std::string search_dir;
    std::string meta_dir;
    std::string summary_txt;

    static Paths from(const config::RunConfig& cfg);

    std::string prep_json(const std::string& split) const;
    std::string prep_f64(const std::string& split) const;
    std::string model_json(const std::string& backbone) const;
    std::string history_csv(const std::string& backbone) const;
    std::string probs_csv(const std::string& backbone, const std::string& split) const;
    std::string base_report_csv(const std::string& backbone) const;
    std::string search_cells_csv(const std::string& kind) const;
    std::string best_json() const;
    std::string meta_model_json(const std::string& kind) const;
    std::string meta_report_csv(const std::string& kind) const;
};

/// Generates the synthetic dataset into cfg.data_root. Returns the root.
std::string run_synth(const config::RunConfig& cfg);

void run_prep(const config::RunConfig& cfg, bool resume);
void run_train_base(const config::RunConfig& cfg, bool resume);
void run_extract(const config::RunConfig& cfg, bool resume);
void run_tune_meta(const config::RunConfig& cfg, bool resume);
void run_stack_stage(const config::RunConfig& cfg, bool resume);
void run_report(const config::RunConfig& cfg, bool resume);

/// All stages in order: prep, train-base, extract, tune-meta, stack, report.
void run_all(const config::RunConfig& cfg, bool resume);

/// Evaluates a saved CNN model on a dataset directory (optionally restricted
/// to one split of a manifest). Writes an EvalReport CSV and returns the
/// report. Augmentation is always disabled on this path.
metrics::EvalReport evaluate_model(const config::RunConfig& cfg, const std::string& model_path,
                                   const std::string& data_dir, const std::string& manifest_path,
                                   const std::string& split, const std::string& out_csv);

/// Converts source grades to task labels: binary tasks remap 5-grade sources
/// through {0,1}->0, {2,3,4}->1 and pass 2-class sources through.
std::vector<int> task_labels(const std::vector<int>& source_grades, int source_classes,
                             config::Task task);

/// Preprocessed split tensors persisted by the prep stage.
struct PrepSplit {
    std::vector<std::string> ids;
    std::vector<int> grades;  // source grades
    Tensor x;
    int source_classes = 0;
    std::map<std::string, std::string> meta;
};

void write_prep_split(const Paths& paths, const std::string& split, const PrepSplit& data);
PrepSplit read_prep_split(const Paths& paths, const std::string& split);

}  // namespace koa::pipeline
