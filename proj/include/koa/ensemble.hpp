#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "koa/metrics.hpp"
#include "koa/nn.hpp"
#include "koa/tensor.hpp"

namespace koa::ensemble {

/// Concatenated base-learner class probabilities, one row per sample.
/// Column layout: base_order[0] classes, then base_order[1] classes, ...
struct StackedFeatures {
    Tensor matrix;  // (N, n_base * n_classes)
    std::vector<std::string> base_order;
    int n_classes = 0;
};

/// Base learners whose accuracy strictly exceeds the threshold, ordered by
/// descending accuracy (ties by id). Empty selection is an error.
std::vector<std::string> select_base_learners(const std::map<std::string, double>& test_accuracies,
                                              double threshold);

/// Column-wise concatenation of probability matrices in base_order. Values
/// pass through untransformed.
StackedFeatures stack_features(const std::vector<Tensor>& prob_matrices,
                               const std::vector<std::string>& base_order, int n_classes);

/// Recovers one base learner's probability block (test/debug aid).
Tensor slice_base_block(const StackedFeatures& f, size_t base_index);

/// Argmax over one base learner's block: the pass-through baseline head.
std::vector<int> passthrough_labels(const StackedFeatures& f, size_t base_index);

// ---------------------------------------------------------------------------
// Meta-learners
// ---------------------------------------------------------------------------

struct KnnParams {
    size_t k = 6;
};

struct RandomForestParams {
    size_t n_trees = 200;
    size_t max_depth = 0;           // 0 = unlimited
    size_t features_per_split = 0;  // 0 = floor(sqrt(d))
};

struct GbdtParams {
    size_t depth = 10;
    size_t iterations = 100;
    double learning_rate = 0.1;
};

enum class MetaKind { Knn, RandomForest, Gbdt };

struct MetaLearnerSpec {
    MetaKind kind = MetaKind::Knn;
    KnnParams knn;
    RandomForestParams rf;
    GbdtParams gbdt;

    void validate() const;
    std::string describe() const;
};

std::string meta_kind_name(MetaKind kind);
MetaKind meta_kind_from_name(const std::string& name);

/// Exact Euclidean k-nearest-neighbour classifier. Distance ties break toward
/// the lower training index; vote ties toward the lower class index.
/// Probabilities are vote fractions.
class KnnModel {
public:
    KnnModel() = default;
    KnnModel(Tensor train_x, std::vector<int> train_y, int n_classes, size_t k);

    Tensor predict_proba(const Tensor& rows) const;

    size_t k() const { return k_; }
    const Tensor& train_x() const { return train_x_; }
    const std::vector<int>& train_y() const { return train_y_; }
    int n_classes() const { return n_classes_; }

private:
    Tensor train_x_;
    std::vector<int> train_y_;
    int n_classes_ = 0;
    size_t k_ = 1;
};

/// One node of an axis-aligned binary tree; leaves carry either a class
/// distribution (forest) or a scalar value (boosting).
struct TreeNode {
    bool is_leaf = true;
    size_t feature = 0;
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    std::vector<double> class_dist;  // forest leaves
    double value = 0.0;              // boosting leaves
};

/// CART forest: bootstrap samples, Gini splits, a random feature subset per
/// node. Prediction averages per-tree leaf class frequencies.
class RandomForestModel {
public:
    RandomForestModel() = default;
    static RandomForestModel fit(const Tensor& x, const std::vector<int>& y, int n_classes,
                                 const RandomForestParams& params, uint64_t seed);

    Tensor predict_proba(const Tensor& rows) const;

    const std::vector<std::vector<TreeNode>>& trees() const { return trees_; }
    int n_classes() const { return n_classes_; }

    std::vector<std::vector<TreeNode>> trees_;
    int n_classes_ = 0;
};

/// Gradient-boosted trees on softmax/logistic log-loss. One depth-limited
/// regression tree per class per iteration (a single tree for binary), leaf
/// values by Newton step, shrunk by the learning rate. Initial scores are the
/// class prior log-odds; zero iterations predicts the priors.
class GbdtModel {
public:
    GbdtModel() = default;
    static GbdtModel fit(const Tensor& x, const std::vector<int>& y, int n_classes,
                         const GbdtParams& params, uint64_t seed);

    Tensor predict_proba(const Tensor& rows) const;

    /// Training log-loss after each completed iteration.
    const std::vector<double>& loss_history() const { return loss_history_; }

    int n_classes() const { return n_classes_; }
    const std::vector<double>& init_scores() const { return init_scores_; }
    const std::vector<double>& priors() const { return priors_; }

    int n_classes_ = 0;
    double learning_rate_ = 0.1;
    std::vector<double> priors_;
    std::vector<double> init_scores_;
    // trees_[iteration][class]; binary task uses one tree per iteration.
    std::vector<std::vector<std::vector<TreeNode>>> trees_;
    std::vector<double> loss_history_;
};

/// Uniform fit/predict wrapper around the three meta-learner kinds.
struct MetaModel {
    MetaLearnerSpec spec;
    int n_classes = 0;
    KnnModel knn;
    RandomForestModel rf;
    GbdtModel gbdt;

    Tensor predict_proba(const Tensor& rows) const;
};

MetaModel fit_meta(const Tensor& x, const std::vector<int>& y, int n_classes,
                   const MetaLearnerSpec& spec, uint64_t seed);

void save_meta(const MetaModel& model, const std::string& path,
               const std::map<std::string, std::string>& meta = {});
MetaModel load_meta(const std::string& path);

// ---------------------------------------------------------------------------
// Cross-validated hyperparameter search
// ---------------------------------------------------------------------------

enum class SearchMetric { Accuracy, BalancedAccuracy };

struct SearchGrid {
    // Candidate lists keyed by hyperparameter name; missing keys fall back to
    // the kind's defaults. Cells enumerate row-major in canonical name order
    // (knn: k; rf: n_trees, max_depth, features_per_split;
    //  gbdt: depth, iterations, learning_rate), first name outermost.
    std::map<std::string, std::vector<double>> candidates;
    size_t folds = 3;
    bool random_mode = false;
    size_t n_draws = 10;
    uint64_t seed = 0;
    SearchMetric metric = SearchMetric::Accuracy;
};

struct CellResult {
    MetaLearnerSpec spec;
    std::vector<double> fold_scores;
    double mean_score = 0.0;
};

struct SearchResult {
    MetaLearnerSpec best;
    double best_score = 0.0;
    std::vector<CellResult> cells;
};

/// Stratified k-fold search. Exhaustive mode visits every cell; random mode
/// visits n_draws seeded cells. Ties break toward the earlier cell.
SearchResult cross_val_search(MetaKind kind, const SearchGrid& grid, const Tensor& x,
                              const std::vector<int>& y, int n_classes);

/// Stratified fold assignment: fold id per sample, seeded per class.
std::vector<size_t> stratified_folds(const std::vector<int>& y, size_t folds, uint64_t seed);

void write_search_csv(const std::string& path, MetaKind kind, const SearchResult& result,
                      const std::map<std::string, std::string>& meta = {});

// ---------------------------------------------------------------------------
// Stacking runner
// ---------------------------------------------------------------------------

enum class StackMode { Paper, OutOfFold };

/// A trained base learner plus everything needed to refit it on a fold.
struct BaseLearner {
    std::string name;
    nn::Model model;
    nn::TrainConfig train_config;
};

struct SplitTensors {
    nn::TrainData train;
    nn::TrainData val;
    nn::TrainData test;
};

struct StackRunResult {
    MetaModel meta;
    std::vector<metrics::EvalReport> reports;  // train, val, test
    StackedFeatures train_features;            // features the meta was fit on
    StackedFeatures test_features;
};

/// Fits the meta-learner on base probabilities and evaluates on all splits.
/// Paper mode uses train-split probabilities from the fitted bases (the
/// leakage-prone procedure; a warning is emitted). Out-of-fold mode refits
/// each base per fold and trains the meta on held-out-fold probabilities.
/// Test evaluation always uses the untouched test split through the fully
/// fitted bases, so both modes share the test feature matrix.
StackRunResult run_stack(const std::vector<BaseLearner>& bases, const SplitTensors& splits,
                         int n_classes, const MetaLearnerSpec& meta_spec, StackMode mode,
                         size_t oof_folds, uint64_t seed);

/// Probability matrix persistence: header id, class_0..class_{C-1}.
void write_probs_csv(const std::string& path, const Tensor& probs,
                     const std::vector<std::string>& ids,
                     const std::map<std::string, std::string>& meta = {});
Tensor read_probs_csv(const std::string& path, std::vector<std::string>* ids = nullptr);

}  // namespace koa::ensemble
