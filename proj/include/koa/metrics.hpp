#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "koa/tensor.hpp"

namespace koa::metrics {

/// Fraction of exactly matching predictions.
double accuracy(const std::vector<int>& pred, const std::vector<int>& truth);

/// Unweighted mean of per-class recall. Every class must appear in truth.
double balanced_accuracy(const std::vector<int>& pred, const std::vector<int>& truth,
                         int n_classes);

/// Ranking AUC: P(score_pos > score_neg) + 0.5 * P(equal), computed with the
/// rank statistic. Both classes must be present.
double auc_binary(const std::vector<double>& scores, const std::vector<int>& truth);

/// Unweighted mean over classes of auc_binary(class column, label == c).
double auc_macro_ovr(const Tensor& probs, const std::vector<int>& truth, int n_classes);

/// Entry (i, j) = count of true class i predicted as class j.
std::vector<std::vector<size_t>> confusion(const std::vector<int>& pred,
                                           const std::vector<int>& truth, int n_classes);

/// Metrics for one (model, split) pair.
struct EvalReport {
    std::string split;
    double accuracy = 0.0;
    double balanced_accuracy = 0.0;
    double auc = 0.0;
    int n_classes = 0;
    size_t n_samples = 0;
    std::vector<std::vector<size_t>> confusion;
};

/// Builds a report from per-sample class probabilities and true labels.
/// Predicted label = argmax (ties to the lower class index). AUC is binary
/// for 2 classes and macro one-vs-rest otherwise.
EvalReport evaluate(const std::string& split, const Tensor& probs,
                    const std::vector<int>& truth, int n_classes);

/// One row per report; confusion is flattened into conf_i_j columns.
void write_reports_csv(const std::string& path, const std::vector<EvalReport>& reports,
                       const std::map<std::string, std::string>& meta);

std::vector<EvalReport> read_reports_csv(const std::string& path);

/// Fixed-width text block: one row per metric, columns Train/Val/Test.
std::string format_summary(const std::string& model_name,
                           const std::vector<EvalReport>& reports);

}  // namespace koa::metrics
