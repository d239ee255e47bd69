#include "koa/ensemble.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>

#include <json.hpp>

#include "koa/csv.hpp"
#include "koa/errors.hpp"
#include "koa/rng.hpp"

namespace koa::ensemble {

using nlohmann::json;

std::vector<std::string> select_base_learners(const std::map<std::string, double>& test_accuracies,
                                              double threshold) {
    if (test_accuracies.empty()) throw DataError("select_base_learners: no accuracies given");
    std::vector<std::pair<std::string, double>> kept;
    for (const auto& [id, acc] : test_accuracies) {
        if (acc > threshold) kept.emplace_back(id, acc);
    }
    if (kept.empty()) {
        throw DataError("select_base_learners: no base learner exceeds accuracy threshold " +
                        std::to_string(threshold) + "; lower the threshold or retrain");
    }
    std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    std::vector<std::string> ids;
    for (const auto& kv : kept) ids.push_back(kv.first);
    return ids;
}

StackedFeatures stack_features(const std::vector<Tensor>& prob_matrices,
                               const std::vector<std::string>& base_order, int n_classes) {
    if (prob_matrices.empty() || prob_matrices.size() != base_order.size()) {
        throw DataError("stack_features: matrix count does not match base order");
    }
    size_t n = prob_matrices.front().shape[0];
    for (const Tensor& m : prob_matrices) {
        if (m.rank() != 2 || m.shape[0] != n || m.shape[1] != static_cast<size_t>(n_classes)) {
            throw DataError("stack_features: inconsistent probability matrix shapes");
        }
    }
    StackedFeatures f;
    f.base_order = base_order;
    f.n_classes = n_classes;
    size_t c = static_cast<size_t>(n_classes);
    f.matrix = Tensor::zeros({n, prob_matrices.size() * c});
    for (size_t i = 0; i < n; ++i) {
        for (size_t b = 0; b < prob_matrices.size(); ++b) {
            for (size_t k = 0; k < c; ++k) {
                f.matrix.at2(i, b * c + k) = prob_matrices[b].at2(i, k);
            }
        }
    }
    return f;
}

Tensor slice_base_block(const StackedFeatures& f, size_t base_index) {
    if (base_index >= f.base_order.size()) throw DataError("slice_base_block: index out of range");
    size_t c = static_cast<size_t>(f.n_classes);
    size_t n = f.matrix.shape[0];
    Tensor out = Tensor::zeros({n, c});
    for (size_t i = 0; i < n; ++i) {
        for (size_t k = 0; k < c; ++k) out.at2(i, k) = f.matrix.at2(i, base_index * c + k);
    }
    return out;
}

std::vector<int> passthrough_labels(const StackedFeatures& f, size_t base_index) {
    return nn::argmax_labels(slice_base_block(f, base_index));
}

// ---------------------------------------------------------------------------
// KNN
// ---------------------------------------------------------------------------

void MetaLearnerSpec::validate() const {
    switch (kind) {
        case MetaKind::Knn:
            if (knn.k < 1) throw ConfigError("knn: k must be at least 1");
            break;
        case MetaKind::RandomForest:
            if (rf.n_trees < 1) throw ConfigError("random_forest: n_trees must be at least 1");
            break;
        case MetaKind::Gbdt:
            if (!(gbdt.learning_rate > 0.0)) throw ConfigError("gbdt: learning_rate must be positive");
            break;
    }
}

std::string meta_kind_name(MetaKind kind) {
    switch (kind) {
        case MetaKind::Knn: return "knn";
        case MetaKind::RandomForest: return "random_forest";
        case MetaKind::Gbdt: return "gbdt";
    }
    return "unknown";
}

MetaKind meta_kind_from_name(const std::string& name) {
    if (name == "knn") return MetaKind::Knn;
    if (name == "random_forest") return MetaKind::RandomForest;
    if (name == "gbdt") return MetaKind::Gbdt;
    throw ConfigError("unknown meta-learner kind: " + name);
}

std::string MetaLearnerSpec::describe() const {
    switch (kind) {
        case MetaKind::Knn:
            return "knn(k=" + std::to_string(knn.k) + ")";
        case MetaKind::RandomForest:
            return "random_forest(n_trees=" + std::to_string(rf.n_trees) +
                   ",max_depth=" + std::to_string(rf.max_depth) +
                   ",features_per_split=" + std::to_string(rf.features_per_split) + ")";
        case MetaKind::Gbdt: {
            char lr[32];
            std::snprintf(lr, sizeof(lr), "%g", gbdt.learning_rate);
            return "gbdt(depth=" + std::to_string(gbdt.depth) +
                   ",iterations=" + std::to_string(gbdt.iterations) + ",learning_rate=" + lr + ")";
        }
    }
    return "unknown";
}

KnnModel::KnnModel(Tensor train_x, std::vector<int> train_y, int n_classes, size_t k)
    : train_x_(std::move(train_x)), train_y_(std::move(train_y)), n_classes_(n_classes), k_(k) {
    if (train_y_.empty()) throw DataError("knn: empty training set");
    if (train_x_.rank() != 2 || train_x_.shape[0] != train_y_.size()) {
        throw DataError("knn: feature/label shape mismatch");
    }
    if (k_ < 1 || k_ > train_y_.size()) {
        throw ConfigError("knn: k=" + std::to_string(k_) + " outside [1, N_train=" +
                          std::to_string(train_y_.size()) + "]");
    }
}

Tensor KnnModel::predict_proba(const Tensor& rows) const {
    if (rows.rank() != 2 || rows.shape[1] != train_x_.shape[1]) {
        throw DataError("knn: query dimensionality mismatch");
    }
    size_t n = rows.shape[0];
    size_t d = rows.shape[1];
    size_t m = train_y_.size();
    Tensor out = Tensor::zeros({n, static_cast<size_t>(n_classes_)});

    std::vector<std::pair<double, size_t>> dist(m);
    for (size_t q = 0; q < n; ++q) {
        for (size_t t = 0; t < m; ++t) {
            double s = 0.0;
            for (size_t j = 0; j < d; ++j) {
                double diff = rows.at2(q, j) - train_x_.at2(t, j);
                s += diff * diff;
            }
            dist[t] = {s, t};
        }
        // (distance, training index) order implements the tie rule.
        std::partial_sort(dist.begin(), dist.begin() + static_cast<long>(k_), dist.end());
        for (size_t i = 0; i < k_; ++i) {
            out.at2(q, static_cast<size_t>(train_y_[dist[i].second])) += 1.0 / static_cast<double>(k_);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// CART trees (shared by forest and boosting)
// ---------------------------------------------------------------------------

namespace {

double row_value(const Tensor& x, size_t row, size_t col) { return x.at2(row, col); }

struct GiniSplit {
    bool found = false;
    size_t feature = 0;
    double threshold = 0.0;
    double impurity = 0.0;
};

// Weighted Gini impurity of a candidate split over `idx`, scanning each
// candidate feature in sorted order with running class counts.
GiniSplit best_gini_split(const Tensor& x, const std::vector<int>& y, int n_classes,
                          const std::vector<size_t>& idx, const std::vector<size_t>& features) {
    GiniSplit best;
    size_t n = idx.size();
    std::vector<size_t> total(static_cast<size_t>(n_classes), 0);
    for (size_t i : idx) ++total[static_cast<size_t>(y[i])];

    std::vector<size_t> order(idx);
    std::vector<size_t> left_counts(static_cast<size_t>(n_classes));
    for (size_t f : features) {
        std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
            double va = row_value(x, a, f), vb = row_value(x, b, f);
            if (va != vb) return va < vb;
            return a < b;
        });
        std::fill(left_counts.begin(), left_counts.end(), 0);
        size_t n_left = 0;
        for (size_t i = 0; i + 1 < n; ++i) {
            ++left_counts[static_cast<size_t>(y[order[i]])];
            ++n_left;
            double v = row_value(x, order[i], f);
            double v_next = row_value(x, order[i + 1], f);
            if (v == v_next) continue;
            double threshold = v + (v_next - v) / 2.0;

            double gl = 1.0, gr = 1.0;
            size_t n_right = n - n_left;
            for (int c = 0; c < n_classes; ++c) {
                double pl = static_cast<double>(left_counts[static_cast<size_t>(c)]) /
                            static_cast<double>(n_left);
                double pr = static_cast<double>(total[static_cast<size_t>(c)] -
                                                left_counts[static_cast<size_t>(c)]) /
                            static_cast<double>(n_right);
                gl -= pl * pl;
                gr -= pr * pr;
            }
            double impurity = (static_cast<double>(n_left) * gl + static_cast<double>(n_right) * gr) /
                              static_cast<double>(n);
            if (!best.found || impurity < best.impurity - 1e-15) {
                best.found = true;
                best.feature = f;
                best.threshold = threshold;
                best.impurity = impurity;
            }
        }
    }
    return best;
}

std::vector<size_t> draw_feature_subset(size_t d, size_t mtry, Rng& rng) {
    std::vector<size_t> all(d);
    std::iota(all.begin(), all.end(), 0);
    if (mtry >= d) return all;
    // Partial Fisher-Yates, then sorted for a deterministic scan order.
    for (size_t i = 0; i < mtry; ++i) {
        size_t j = i + rng.uniform_index(d - i);
        std::swap(all[i], all[j]);
    }
    all.resize(mtry);
    std::sort(all.begin(), all.end());
    return all;
}

int build_forest_node(std::vector<TreeNode>& nodes, const Tensor& x, const std::vector<int>& y,
                      int n_classes, std::vector<size_t>& idx, size_t depth,
                      const RandomForestParams& params, size_t mtry, Rng& rng) {
    std::vector<size_t> counts(static_cast<size_t>(n_classes), 0);
    for (size_t i : idx) ++counts[static_cast<size_t>(y[i])];

    auto make_leaf = [&]() {
        TreeNode leaf;
        leaf.is_leaf = true;
        leaf.class_dist.resize(static_cast<size_t>(n_classes));
        for (int c = 0; c < n_classes; ++c) {
            leaf.class_dist[static_cast<size_t>(c)] =
                static_cast<double>(counts[static_cast<size_t>(c)]) / static_cast<double>(idx.size());
        }
        nodes.push_back(std::move(leaf));
        return static_cast<int>(nodes.size() - 1);
    };

    bool pure = std::count_if(counts.begin(), counts.end(), [](size_t c) { return c > 0; }) <= 1;
    bool depth_capped = params.max_depth > 0 && depth >= params.max_depth;
    if (idx.size() < 2 || pure || depth_capped) return make_leaf();

    auto features = draw_feature_subset(x.shape[1], mtry, rng);
    GiniSplit split = best_gini_split(x, y, n_classes, idx, features);
    if (!split.found) return make_leaf();

    std::vector<size_t> left_idx, right_idx;
    for (size_t i : idx) {
        (row_value(x, i, split.feature) < split.threshold ? left_idx : right_idx).push_back(i);
    }
    if (left_idx.empty() || right_idx.empty()) return make_leaf();

    TreeNode node;
    node.is_leaf = false;
    node.feature = split.feature;
    node.threshold = split.threshold;
    nodes.push_back(std::move(node));
    int self = static_cast<int>(nodes.size() - 1);
    idx.clear();
    idx.shrink_to_fit();
    int left = build_forest_node(nodes, x, y, n_classes, left_idx, depth + 1, params, mtry, rng);
    int right = build_forest_node(nodes, x, y, n_classes, right_idx, depth + 1, params, mtry, rng);
    nodes[static_cast<size_t>(self)].left = left;
    nodes[static_cast<size_t>(self)].right = right;
    return self;
}

const TreeNode& descend(const std::vector<TreeNode>& nodes, const Tensor& x, size_t row) {
    const TreeNode* node = &nodes.front();
    while (!node->is_leaf) {
        node = row_value(x, row, node->feature) < node->threshold
                   ? &nodes[static_cast<size_t>(node->left)]
                   : &nodes[static_cast<size_t>(node->right)];
    }
    return *node;
}

}  // namespace

RandomForestModel RandomForestModel::fit(const Tensor& x, const std::vector<int>& y, int n_classes,
                                         const RandomForestParams& params, uint64_t seed) {
    if (y.empty() || x.rank() != 2 || x.shape[0] != y.size()) {
        throw DataError("random_forest: feature/label shape mismatch");
    }
    if (params.n_trees < 1) throw ConfigError("random_forest: n_trees must be at least 1");
    for (int l : y) {
        if (l < 0 || l >= n_classes) throw DataError("random_forest: label out of range");
    }
    size_t d = x.shape[1];
    size_t mtry = params.features_per_split > 0
                      ? std::min(params.features_per_split, d)
                      : std::max<size_t>(1, static_cast<size_t>(std::floor(std::sqrt(static_cast<double>(d)))));

    RandomForestModel model;
    model.n_classes_ = n_classes;
    size_t n = y.size();
    for (size_t t = 0; t < params.n_trees; ++t) {
        Rng rng(mix_seed(seed, "tree_" + std::to_string(t)));
        std::vector<size_t> bootstrap(n);
        for (size_t i = 0; i < n; ++i) bootstrap[i] = rng.uniform_index(n);
        std::sort(bootstrap.begin(), bootstrap.end());
        std::vector<TreeNode> nodes;
        build_forest_node(nodes, x, y, n_classes, bootstrap, 0, params, mtry, rng);
        model.trees_.push_back(std::move(nodes));
    }
    return model;
}

Tensor RandomForestModel::predict_proba(const Tensor& rows) const {
    if (trees_.empty()) throw DataError("random_forest: model not fitted");
    size_t n = rows.shape[0];
    Tensor out = Tensor::zeros({n, static_cast<size_t>(n_classes_)});
    for (size_t q = 0; q < n; ++q) {
        for (const auto& tree : trees_) {
            const TreeNode& leaf = descend(tree, rows, q);
            for (int c = 0; c < n_classes_; ++c) {
                out.at2(q, static_cast<size_t>(c)) += leaf.class_dist[static_cast<size_t>(c)];
            }
        }
        for (int c = 0; c < n_classes_; ++c) {
            out.at2(q, static_cast<size_t>(c)) /= static_cast<double>(trees_.size());
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// GBDT
// ---------------------------------------------------------------------------

namespace {

constexpr double kHessGuard = 1e-12;

struct NewtonSplit {
    bool found = false;
    size_t feature = 0;
    double threshold = 0.0;
    double gain = 0.0;
};

double newton_value(double g_sum, double h_sum) {
    if (h_sum < kHessGuard) return 0.0;
    return g_sum / h_sum;
}

double newton_score(double g_sum, double h_sum) {
    if (h_sum < kHessGuard) return 0.0;
    return g_sum * g_sum / h_sum;
}

// Maximizes the Newton gain G_L^2/H_L + G_R^2/H_R - G^2/H.
NewtonSplit best_newton_split(const Tensor& x, const std::vector<double>& grad,
                              const std::vector<double>& hess, const std::vector<size_t>& idx) {
    NewtonSplit best;
    size_t n = idx.size();
    if (n < 2) return best;
    double g_total = 0.0, h_total = 0.0;
    for (size_t i : idx) {
        g_total += grad[i];
        h_total += hess[i];
    }
    double parent = newton_score(g_total, h_total);

    std::vector<size_t> order(idx);
    for (size_t f = 0; f < x.shape[1]; ++f) {
        std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
            double va = x.at2(a, f), vb = x.at2(b, f);
            if (va != vb) return va < vb;
            return a < b;
        });
        double gl = 0.0, hl = 0.0;
        for (size_t i = 0; i + 1 < n; ++i) {
            gl += grad[order[i]];
            hl += hess[order[i]];
            double v = x.at2(order[i], f);
            double v_next = x.at2(order[i + 1], f);
            if (v == v_next) continue;
            double gain = newton_score(gl, hl) + newton_score(g_total - gl, h_total - hl) - parent;
            if (gain > best.gain + 1e-12) {
                best.found = true;
                best.feature = f;
                best.threshold = v + (v_next - v) / 2.0;
                best.gain = gain;
            }
        }
    }
    return best;
}

int build_regression_node(std::vector<TreeNode>& nodes, const Tensor& x,
                          const std::vector<double>& grad, const std::vector<double>& hess,
                          std::vector<size_t>& idx, size_t depth, size_t max_depth) {
    double g_sum = 0.0, h_sum = 0.0;
    for (size_t i : idx) {
        g_sum += grad[i];
        h_sum += hess[i];
    }
    auto make_leaf = [&]() {
        TreeNode leaf;
        leaf.is_leaf = true;
        leaf.value = newton_value(g_sum, h_sum);
        nodes.push_back(std::move(leaf));
        return static_cast<int>(nodes.size() - 1);
    };
    if (depth >= max_depth || idx.size() < 2) return make_leaf();
    NewtonSplit split = best_newton_split(x, grad, hess, idx);
    if (!split.found) return make_leaf();

    std::vector<size_t> left_idx, right_idx;
    for (size_t i : idx) {
        (x.at2(i, split.feature) < split.threshold ? left_idx : right_idx).push_back(i);
    }
    if (left_idx.empty() || right_idx.empty()) return make_leaf();
    TreeNode node;
    node.is_leaf = false;
    node.feature = split.feature;
    node.threshold = split.threshold;
    nodes.push_back(std::move(node));
    int self = static_cast<int>(nodes.size() - 1);
    idx.clear();
    idx.shrink_to_fit();
    int left = build_regression_node(nodes, x, grad, hess, left_idx, depth + 1, max_depth);
    int right = build_regression_node(nodes, x, grad, hess, right_idx, depth + 1, max_depth);
    nodes[static_cast<size_t>(self)].left = left;
    nodes[static_cast<size_t>(self)].right = right;
    return self;
}

double tree_value(const std::vector<TreeNode>& nodes, const Tensor& x, size_t row) {
    const TreeNode* node = &nodes.front();
    while (!node->is_leaf) {
        node = x.at2(row, node->feature) < node->threshold ? &nodes[static_cast<size_t>(node->left)]
                                                           : &nodes[static_cast<size_t>(node->right)];
    }
    return node->value;
}

void softmax_rows(const std::vector<std::vector<double>>& f, std::vector<std::vector<double>>& p) {
    size_t n = f.size();
    size_t k = f.front().size();
    for (size_t i = 0; i < n; ++i) {
        double mx = f[i][0];
        for (size_t c = 1; c < k; ++c) mx = std::max(mx, f[i][c]);
        double sum = 0.0;
        for (size_t c = 0; c < k; ++c) {
            p[i][c] = std::exp(f[i][c] - mx);
            sum += p[i][c];
        }
        for (size_t c = 0; c < k; ++c) p[i][c] /= sum;
    }
}

double clamped_log(double p) { return std::log(std::clamp(p, 1e-12, 1.0)); }

}  // namespace

GbdtModel GbdtModel::fit(const Tensor& x, const std::vector<int>& y, int n_classes,
                         const GbdtParams& params, uint64_t seed) {
    (void)seed;  // fitting is deterministic; the seed is part of the uniform interface
    if (y.empty() || x.rank() != 2 || x.shape[0] != y.size()) {
        throw DataError("gbdt: feature/label shape mismatch");
    }
    if (!(params.learning_rate > 0.0)) throw ConfigError("gbdt: learning_rate must be positive");
    for (double v : x.data) {
        if (!std::isfinite(v)) throw DataError("gbdt: non-finite feature value");
    }
    for (int l : y) {
        if (l < 0 || l >= n_classes) throw DataError("gbdt: label out of range");
    }

    GbdtModel model;
    model.n_classes_ = n_classes;
    model.learning_rate_ = params.learning_rate;
    size_t n = y.size();

    std::vector<size_t> counts(static_cast<size_t>(n_classes), 0);
    for (int l : y) ++counts[static_cast<size_t>(l)];
    model.priors_.resize(static_cast<size_t>(n_classes));
    for (int c = 0; c < n_classes; ++c) {
        model.priors_[static_cast<size_t>(c)] =
            static_cast<double>(counts[static_cast<size_t>(c)]) / static_cast<double>(n);
    }

    bool binary = n_classes == 2;
    if (binary) {
        double p1 = std::clamp(model.priors_[1], 1e-12, 1.0 - 1e-12);
        model.init_scores_ = {std::log(p1 / (1.0 - p1))};
    } else {
        model.init_scores_.resize(static_cast<size_t>(n_classes));
        for (int c = 0; c < n_classes; ++c) {
            model.init_scores_[static_cast<size_t>(c)] =
                std::log(std::max(model.priors_[static_cast<size_t>(c)], 1e-12));
        }
    }

    size_t score_dim = binary ? 1 : static_cast<size_t>(n_classes);
    std::vector<std::vector<double>> f(n, std::vector<double>(score_dim));
    for (size_t i = 0; i < n; ++i) {
        for (size_t c = 0; c < score_dim; ++c) f[i][c] = model.init_scores_[c];
    }
    std::vector<std::vector<double>> p(n, std::vector<double>(binary ? 1 : score_dim));
    std::vector<double> grad(n), hess(n);
    std::vector<size_t> all_idx(n);
    std::iota(all_idx.begin(), all_idx.end(), 0);

    for (size_t it = 0; it < params.iterations; ++it) {
        std::vector<std::vector<TreeNode>> iteration_trees;
        if (binary) {
            for (size_t i = 0; i < n; ++i) {
                double pi = 1.0 / (1.0 + std::exp(-f[i][0]));
                p[i][0] = pi;
                grad[i] = static_cast<double>(y[i]) - pi;  // negative gradient
                hess[i] = pi * (1.0 - pi);
            }
            std::vector<TreeNode> nodes;
            std::vector<size_t> idx = all_idx;
            build_regression_node(nodes, x, grad, hess, idx, 0, params.depth);
            for (size_t i = 0; i < n; ++i) {
                f[i][0] += params.learning_rate * tree_value(nodes, x, i);
            }
            iteration_trees.push_back(std::move(nodes));
        } else {
            softmax_rows(f, p);
            for (int c = 0; c < n_classes; ++c) {
                for (size_t i = 0; i < n; ++i) {
                    double pic = p[i][static_cast<size_t>(c)];
                    grad[i] = (y[i] == c ? 1.0 : 0.0) - pic;
                    hess[i] = pic * (1.0 - pic);
                }
                std::vector<TreeNode> nodes;
                std::vector<size_t> idx = all_idx;
                build_regression_node(nodes, x, grad, hess, idx, 0, params.depth);
                for (size_t i = 0; i < n; ++i) {
                    f[i][static_cast<size_t>(c)] += params.learning_rate * tree_value(nodes, x, i);
                }
                iteration_trees.push_back(std::move(nodes));
            }
        }
        model.trees_.push_back(std::move(iteration_trees));

        double loss = 0.0;
        if (binary) {
            for (size_t i = 0; i < n; ++i) {
                double pi = 1.0 / (1.0 + std::exp(-f[i][0]));
                loss -= y[i] == 1 ? clamped_log(pi) : clamped_log(1.0 - pi);
            }
        } else {
            softmax_rows(f, p);
            for (size_t i = 0; i < n; ++i) {
                loss -= clamped_log(p[i][static_cast<size_t>(y[i])]);
            }
        }
        model.loss_history_.push_back(loss / static_cast<double>(n));
    }
    return model;
}

Tensor GbdtModel::predict_proba(const Tensor& rows) const {
    if (priors_.empty()) throw DataError("gbdt: model not fitted");
    size_t n = rows.shape[0];
    size_t k = static_cast<size_t>(n_classes_);
    Tensor out = Tensor::zeros({n, k});
    if (trees_.empty()) {
        // Zero iterations: the class priors, exactly.
        for (size_t i = 0; i < n; ++i) {
            for (size_t c = 0; c < k; ++c) out.at2(i, c) = priors_[c];
        }
        return out;
    }
    bool binary = n_classes_ == 2;
    for (size_t i = 0; i < n; ++i) {
        if (binary) {
            double f = init_scores_[0];
            for (const auto& iteration : trees_) {
                f += learning_rate_ * tree_value(iteration[0], rows, i);
            }
            double p = 1.0 / (1.0 + std::exp(-f));
            out.at2(i, 0) = 1.0 - p;
            out.at2(i, 1) = p;
        } else {
            std::vector<double> f(init_scores_);
            for (const auto& iteration : trees_) {
                for (size_t c = 0; c < k; ++c) {
                    f[c] += learning_rate_ * tree_value(iteration[c], rows, i);
                }
            }
            double mx = f[0];
            for (size_t c = 1; c < k; ++c) mx = std::max(mx, f[c]);
            double sum = 0.0;
            for (size_t c = 0; c < k; ++c) {
                out.at2(i, c) = std::exp(f[c] - mx);
                sum += out.at2(i, c);
            }
            for (size_t c = 0; c < k; ++c) out.at2(i, c) /= sum;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// MetaModel wrapper + persistence
// ---------------------------------------------------------------------------

Tensor MetaModel::predict_proba(const Tensor& rows) const {
    switch (spec.kind) {
        case MetaKind::Knn: return knn.predict_proba(rows);
        case MetaKind::RandomForest: return rf.predict_proba(rows);
        case MetaKind::Gbdt: return gbdt.predict_proba(rows);
    }
    throw ConfigError("meta: unknown kind");
}

MetaModel fit_meta(const Tensor& x, const std::vector<int>& y, int n_classes,
                   const MetaLearnerSpec& spec, uint64_t seed) {
    spec.validate();
    MetaModel m;
    m.spec = spec;
    m.n_classes = n_classes;
    switch (spec.kind) {
        case MetaKind::Knn:
            m.knn = KnnModel(x, y, n_classes, spec.knn.k);
            break;
        case MetaKind::RandomForest:
            m.rf = RandomForestModel::fit(x, y, n_classes, spec.rf, seed);
            break;
        case MetaKind::Gbdt:
            m.gbdt = GbdtModel::fit(x, y, n_classes, spec.gbdt, seed);
            break;
    }
    return m;
}

namespace {

json tree_to_json(const std::vector<TreeNode>& nodes) {
    json arr = json::array();
    for (const auto& n : nodes) {
        json jn;
        jn["is_leaf"] = n.is_leaf;
        if (n.is_leaf) {
            if (!n.class_dist.empty()) jn["class_dist"] = n.class_dist;
            jn["value"] = n.value;
        } else {
            jn["feature"] = n.feature;
            jn["threshold"] = n.threshold;
            jn["left"] = n.left;
            jn["right"] = n.right;
        }
        arr.push_back(std::move(jn));
    }
    return arr;
}

std::vector<TreeNode> tree_from_json(const json& arr) {
    std::vector<TreeNode> nodes;
    for (const auto& jn : arr) {
        TreeNode n;
        n.is_leaf = jn.at("is_leaf").get<bool>();
        if (n.is_leaf) {
            if (jn.contains("class_dist")) n.class_dist = jn.at("class_dist").get<std::vector<double>>();
            n.value = jn.value("value", 0.0);
        } else {
            n.feature = jn.at("feature").get<size_t>();
            n.threshold = jn.at("threshold").get<double>();
            n.left = jn.at("left").get<int>();
            n.right = jn.at("right").get<int>();
        }
        nodes.push_back(std::move(n));
    }
    return nodes;
}

}  // namespace

void save_meta(const MetaModel& model, const std::string& path,
               const std::map<std::string, std::string>& meta) {
    json j;
    j["format"] = "koa-model";
    j["version"] = 1;
    j["kind"] = "meta_" + meta_kind_name(model.spec.kind);
    j["n_classes"] = model.n_classes;
    switch (model.spec.kind) {
        case MetaKind::Knn: {
            j["k"] = model.spec.knn.k;
            j["train_x"] = json{{"shape", model.knn.train_x().shape},
                                {"data", model.knn.train_x().data}};
            j["train_y"] = model.knn.train_y();
            break;
        }
        case MetaKind::RandomForest: {
            j["n_trees"] = model.spec.rf.n_trees;
            j["max_depth"] = model.spec.rf.max_depth;
            j["features_per_split"] = model.spec.rf.features_per_split;
            json trees = json::array();
            for (const auto& t : model.rf.trees()) trees.push_back(tree_to_json(t));
            j["trees"] = std::move(trees);
            break;
        }
        case MetaKind::Gbdt: {
            j["depth"] = model.spec.gbdt.depth;
            j["iterations"] = model.spec.gbdt.iterations;
            j["learning_rate"] = model.spec.gbdt.learning_rate;
            j["priors"] = model.gbdt.priors();
            j["init_scores"] = model.gbdt.init_scores();
            json its = json::array();
            for (const auto& iteration : model.gbdt.trees_) {
                json per_class = json::array();
                for (const auto& t : iteration) per_class.push_back(tree_to_json(t));
                its.push_back(std::move(per_class));
            }
            j["trees"] = std::move(its);
            break;
        }
    }
    for (const auto& [k, v] : meta) j["meta"][k] = v;
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("save_meta: cannot open " + path);
    f << j.dump(1) << "\n";
    if (!f) throw DataError("save_meta: write failed: " + path);
}

MetaModel load_meta(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("load_meta: cannot open " + path);
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw DataError("load_meta: invalid model file " + path + ": " + e.what());
    }
    std::string kind = j.value("kind", "");
    if (j.value("format", "") != "koa-model" || kind.rfind("meta_", 0) != 0) {
        throw DataError("load_meta: not a meta-learner model file: " + path);
    }
    MetaModel m;
    m.n_classes = j.at("n_classes").get<int>();
    m.spec.kind = meta_kind_from_name(kind.substr(5));
    switch (m.spec.kind) {
        case MetaKind::Knn: {
            m.spec.knn.k = j.at("k").get<size_t>();
            Tensor x;
            x.shape = j.at("train_x").at("shape").get<std::vector<size_t>>();
            x.data = j.at("train_x").at("data").get<std::vector<double>>();
            m.knn = KnnModel(std::move(x), j.at("train_y").get<std::vector<int>>(), m.n_classes,
                             m.spec.knn.k);
            break;
        }
        case MetaKind::RandomForest: {
            m.spec.rf.n_trees = j.at("n_trees").get<size_t>();
            m.spec.rf.max_depth = j.at("max_depth").get<size_t>();
            m.spec.rf.features_per_split = j.at("features_per_split").get<size_t>();
            m.rf.n_classes_ = m.n_classes;
            for (const auto& t : j.at("trees")) m.rf.trees_.push_back(tree_from_json(t));
            break;
        }
        case MetaKind::Gbdt: {
            m.spec.gbdt.depth = j.at("depth").get<size_t>();
            m.spec.gbdt.iterations = j.at("iterations").get<size_t>();
            m.spec.gbdt.learning_rate = j.at("learning_rate").get<double>();
            m.gbdt.n_classes_ = m.n_classes;
            m.gbdt.learning_rate_ = m.spec.gbdt.learning_rate;
            m.gbdt.priors_ = j.at("priors").get<std::vector<double>>();
            m.gbdt.init_scores_ = j.at("init_scores").get<std::vector<double>>();
            for (const auto& iteration : j.at("trees")) {
                std::vector<std::vector<TreeNode>> per_class;
                for (const auto& t : iteration) per_class.push_back(tree_from_json(t));
                m.gbdt.trees_.push_back(std::move(per_class));
            }
            break;
        }
    }
    return m;
}

// ---------------------------------------------------------------------------
// Cross-validated search
// ---------------------------------------------------------------------------

std::vector<size_t> stratified_folds(const std::vector<int>& y, size_t folds, uint64_t seed) {
    if (folds < 2) throw ConfigError("cross_val: need at least 2 folds");
    std::map<int, std::vector<size_t>> by_class;
    for (size_t i = 0; i < y.size(); ++i) by_class[y[i]].push_back(i);
    for (const auto& [cls, idx] : by_class) {
        if (idx.size() < folds) {
            throw DataError("cross_val: class " + std::to_string(cls) + " has " +
                            std::to_string(idx.size()) + " samples, fewer than " +
                            std::to_string(folds) + " folds");
        }
    }
    std::vector<size_t> fold_of(y.size(), 0);
    for (auto& [cls, idx] : by_class) {
        Rng rng(mix_seed(seed, "fold_class_" + std::to_string(cls)));
        rng.shuffle(idx);
        for (size_t i = 0; i < idx.size(); ++i) fold_of[idx[i]] = i % folds;
    }
    return fold_of;
}

namespace {

std::vector<std::string> canonical_param_names(MetaKind kind) {
    switch (kind) {
        case MetaKind::Knn: return {"k"};
        case MetaKind::RandomForest: return {"n_trees", "max_depth", "features_per_split"};
        case MetaKind::Gbdt: return {"depth", "iterations", "learning_rate"};
    }
    return {};
}

MetaLearnerSpec spec_from_cell(MetaKind kind, const std::map<std::string, double>& cell) {
    MetaLearnerSpec spec;
    spec.kind = kind;
    auto get = [&](const char* name, double fallback) {
        auto it = cell.find(name);
        return it == cell.end() ? fallback : it->second;
    };
    switch (kind) {
        case MetaKind::Knn:
            spec.knn.k = static_cast<size_t>(get("k", static_cast<double>(spec.knn.k)));
            break;
        case MetaKind::RandomForest:
            spec.rf.n_trees = static_cast<size_t>(get("n_trees", static_cast<double>(spec.rf.n_trees)));
            spec.rf.max_depth = static_cast<size_t>(get("max_depth", static_cast<double>(spec.rf.max_depth)));
            spec.rf.features_per_split =
                static_cast<size_t>(get("features_per_split", static_cast<double>(spec.rf.features_per_split)));
            break;
        case MetaKind::Gbdt:
            spec.gbdt.depth = static_cast<size_t>(get("depth", static_cast<double>(spec.gbdt.depth)));
            spec.gbdt.iterations =
                static_cast<size_t>(get("iterations", static_cast<double>(spec.gbdt.iterations)));
            spec.gbdt.learning_rate = get("learning_rate", spec.gbdt.learning_rate);
            break;
    }
    return spec;
}

std::vector<std::map<std::string, double>> enumerate_cells(MetaKind kind, const SearchGrid& grid) {
    std::vector<std::map<std::string, double>> cells = {{}};
    for (const std::string& name : canonical_param_names(kind)) {
        auto it = grid.candidates.find(name);
        if (it == grid.candidates.end()) continue;
        if (it->second.empty()) throw ConfigError("cross_val: empty candidate list for " + name);
        std::vector<std::map<std::string, double>> expanded;
        for (const auto& cell : cells) {
            for (double v : it->second) {
                auto next = cell;
                next[name] = v;
                expanded.push_back(std::move(next));
            }
        }
        cells = std::move(expanded);
    }
    return cells;
}

double score_fold(const MetaLearnerSpec& spec, const Tensor& x, const std::vector<int>& y,
                  int n_classes, const std::vector<size_t>& fold_of, size_t fold,
                  SearchMetric metric, uint64_t seed) {
    std::vector<size_t> train_idx, val_idx;
    for (size_t i = 0; i < y.size(); ++i) {
        (fold_of[i] == fold ? val_idx : train_idx).push_back(i);
    }
    size_t d = x.shape[1];
    auto subset = [&](const std::vector<size_t>& idx, Tensor& xs, std::vector<int>& ys) {
        xs = Tensor::zeros({idx.size(), d});
        ys.resize(idx.size());
        for (size_t i = 0; i < idx.size(); ++i) {
            for (size_t j = 0; j < d; ++j) xs.at2(i, j) = x.at2(idx[i], j);
            ys[i] = y[idx[i]];
        }
    };
    Tensor train_x, val_x;
    std::vector<int> train_y, val_y;
    subset(train_idx, train_x, train_y);
    subset(val_idx, val_x, val_y);

    MetaLearnerSpec fold_spec = spec;
    if (fold_spec.kind == MetaKind::Knn) {
        fold_spec.knn.k = std::min<size_t>(fold_spec.knn.k, train_y.size());
    }
    MetaModel model = fit_meta(train_x, train_y, n_classes, fold_spec, seed);
    std::vector<int> pred = nn::argmax_labels(model.predict_proba(val_x));
    if (metric == SearchMetric::Accuracy) {
        return metrics::accuracy(pred, val_y);
    }
    return metrics::balanced_accuracy(pred, val_y, n_classes);
}

}  // namespace

SearchResult cross_val_search(MetaKind kind, const SearchGrid& grid, const Tensor& x,
                              const std::vector<int>& y, int n_classes) {
    auto cells = enumerate_cells(kind, grid);
    if (cells.empty()) throw ConfigError("cross_val: empty grid");

    std::vector<size_t> visit(cells.size());
    std::iota(visit.begin(), visit.end(), 0);
    if (grid.random_mode && grid.n_draws < cells.size()) {
        Rng rng(mix_seed(grid.seed, "random_search"));
        for (size_t i = 0; i < grid.n_draws; ++i) {
            size_t j = i + rng.uniform_index(visit.size() - i);
            std::swap(visit[i], visit[j]);
        }
        visit.resize(grid.n_draws);
        std::sort(visit.begin(), visit.end());
    }

    std::vector<size_t> fold_of = stratified_folds(y, grid.folds, grid.seed);

    SearchResult result;
    bool have_best = false;
    for (size_t ci : visit) {
        CellResult cell;
        cell.spec = spec_from_cell(kind, cells[ci]);
        double sum = 0.0;
        for (size_t f = 0; f < grid.folds; ++f) {
            double s = score_fold(cell.spec, x, y, n_classes, fold_of, f, grid.metric,
                                  mix_seed(grid.seed, "fold_fit_" + std::to_string(f)));
            cell.fold_scores.push_back(s);
            sum += s;
        }
        cell.mean_score = sum / static_cast<double>(grid.folds);
        if (!have_best || cell.mean_score > result.best_score) {
            result.best = cell.spec;
            result.best_score = cell.mean_score;
            have_best = true;
        }
        result.cells.push_back(std::move(cell));
    }
    return result;
}

void write_search_csv(const std::string& path, MetaKind kind, const SearchResult& result,
                      const std::map<std::string, std::string>& meta) {
    std::vector<std::string> header = {"cell", "kind"};
    auto names = canonical_param_names(kind);
    for (const auto& n : names) header.push_back(n);
    size_t folds = result.cells.empty() ? 0 : result.cells.front().fold_scores.size();
    for (size_t f = 0; f < folds; ++f) header.push_back("fold_" + std::to_string(f));
    header.push_back("mean");

    auto param_value = [](const MetaLearnerSpec& s, const std::string& name) -> double {
        if (name == "k") return static_cast<double>(s.knn.k);
        if (name == "n_trees") return static_cast<double>(s.rf.n_trees);
        if (name == "max_depth") return static_cast<double>(s.rf.max_depth);
        if (name == "features_per_split") return static_cast<double>(s.rf.features_per_split);
        if (name == "depth") return static_cast<double>(s.gbdt.depth);
        if (name == "iterations") return static_cast<double>(s.gbdt.iterations);
        return s.gbdt.learning_rate;
    };

    std::vector<std::vector<std::string>> rows;
    for (size_t i = 0; i < result.cells.size(); ++i) {
        const CellResult& c = result.cells[i];
        std::vector<std::string> row = {std::to_string(i), meta_kind_name(kind)};
        for (const auto& n : names) row.push_back(csv::fmt_double(param_value(c.spec, n)));
        for (double s : c.fold_scores) row.push_back(csv::fmt_double(s));
        row.push_back(csv::fmt_double(c.mean_score));
        rows.push_back(std::move(row));
    }
    csv::write(path, header, rows, meta);
}

// ---------------------------------------------------------------------------
// Stacking runner
// ---------------------------------------------------------------------------

StackRunResult run_stack(const std::vector<BaseLearner>& bases, const SplitTensors& splits,
                         int n_classes, const MetaLearnerSpec& meta_spec, StackMode mode,
                         size_t oof_folds, uint64_t seed) {
    if (bases.empty()) throw DataError("run_stack: no base learners");

    std::vector<std::string> base_order;
    for (const auto& b : bases) base_order.push_back(b.name);

    auto predict_all = [&](const nn::TrainData& split) {
        std::vector<Tensor> mats;
        for (const auto& b : bases) mats.push_back(nn::predict_proba(b.model, split.x));
        return mats;
    };

    StackedFeatures train_feats;
    if (mode == StackMode::Paper) {
        std::cerr << "warning: stacking in paper mode trains the meta-learner on probabilities "
                     "the bases produced for their own training data (leakage risk); use "
                     "out_of_fold mode for a leakage-safe fit\n";
        train_feats = stack_features(predict_all(splits.train), base_order, n_classes);
    } else {
        if (oof_folds < 2) throw ConfigError("run_stack: out_of_fold mode needs at least 2 folds");
        std::vector<size_t> fold_of = stratified_folds(splits.train.y, oof_folds, mix_seed(seed, "oof"));
        size_t n = splits.train.y.size();
        size_t row = splits.train.x.numel() / n;
        std::vector<Tensor> oof_mats;
        for (size_t bi = 0; bi < bases.size(); ++bi) {
            Tensor probs = Tensor::zeros({n, static_cast<size_t>(n_classes)});
            for (size_t fold = 0; fold < oof_folds; ++fold) {
                std::vector<size_t> fit_idx, held_idx;
                for (size_t i = 0; i < n; ++i) {
                    (fold_of[i] == fold ? held_idx : fit_idx).push_back(i);
                }
                auto gather = [&](const std::vector<size_t>& idx) {
                    nn::TrainData d;
                    std::vector<size_t> shape = splits.train.x.shape;
                    shape[0] = idx.size();
                    d.x = Tensor::zeros(shape);
                    d.y.resize(idx.size());
                    for (size_t i = 0; i < idx.size(); ++i) {
                        const double* src = splits.train.x.data.data() + idx[i] * row;
                        std::copy(src, src + row, d.x.data.data() + i * row);
                        d.y[i] = splits.train.y[idx[i]];
                    }
                    return d;
                };
                nn::TrainData fit_data = gather(fit_idx);
                nn::TrainData held_data = gather(held_idx);

                nn::ModelConfig cfg = bases[bi].model.config;
                cfg.init_seed = mix_seed(cfg.init_seed, "oof_fold_" + std::to_string(fold));
                nn::Model fold_model = nn::build_model(cfg);
                nn::TrainConfig tc = bases[bi].train_config;
                tc.seed = mix_seed(tc.seed, "oof_fold_" + std::to_string(fold));
                nn::train(fold_model, fit_data, nn::TrainData{}, tc);

                Tensor held_probs = nn::predict_proba(fold_model, held_data.x);
                for (size_t i = 0; i < held_idx.size(); ++i) {
                    for (size_t k = 0; k < static_cast<size_t>(n_classes); ++k) {
                        probs.at2(held_idx[i], k) = held_probs.at2(i, k);
                    }
                }
            }
            oof_mats.push_back(std::move(probs));
        }
        train_feats = stack_features(oof_mats, base_order, n_classes);
    }

    StackedFeatures train_eval_feats =
        mode == StackMode::Paper ? train_feats
                                 : stack_features(predict_all(splits.train), base_order, n_classes);
    StackedFeatures val_feats = stack_features(predict_all(splits.val), base_order, n_classes);
    StackedFeatures test_feats = stack_features(predict_all(splits.test), base_order, n_classes);

    StackRunResult result;
    result.meta = fit_meta(train_feats.matrix, splits.train.y, n_classes, meta_spec,
                           mix_seed(seed, "meta_fit"));
    result.train_features = train_feats;
    result.test_features = test_feats;

    result.reports.push_back(metrics::evaluate(
        "train", result.meta.predict_proba(train_eval_feats.matrix), splits.train.y, n_classes));
    result.reports.push_back(metrics::evaluate(
        "val", result.meta.predict_proba(val_feats.matrix), splits.val.y, n_classes));
    result.reports.push_back(metrics::evaluate(
        "test", result.meta.predict_proba(test_feats.matrix), splits.test.y, n_classes));
    return result;
}

void write_probs_csv(const std::string& path, const Tensor& probs,
                     const std::vector<std::string>& ids,
                     const std::map<std::string, std::string>& meta) {
    if (probs.rank() != 2 || probs.shape[0] != ids.size()) {
        throw DataError("write_probs_csv: id/probability count mismatch");
    }
    std::vector<std::string> header = {"id"};
    for (size_t c = 0; c < probs.shape[1]; ++c) header.push_back("class_" + std::to_string(c));
    std::vector<std::vector<std::string>> rows;
    for (size_t i = 0; i < ids.size(); ++i) {
        std::vector<std::string> row = {ids[i]};
        for (size_t c = 0; c < probs.shape[1]; ++c) row.push_back(csv::fmt_double(probs.at2(i, c)));
        rows.push_back(std::move(row));
    }
    csv::write(path, header, rows, meta);
}

Tensor read_probs_csv(const std::string& path, std::vector<std::string>* ids) {
    csv::Table t = csv::read(path);
    if (t.header.empty() || t.header[0] != "id") {
        throw DataError("read_probs_csv: missing id column in " + path);
    }
    size_t c = t.header.size() - 1;
    Tensor probs = Tensor::zeros({t.rows.size(), c});
    if (ids) ids->clear();
    for (size_t i = 0; i < t.rows.size(); ++i) {
        if (ids) ids->push_back(t.rows[i][0]);
        for (size_t j = 0; j < c; ++j) probs.at2(i, j) = std::stod(t.rows[i][j + 1]);
    }
    return probs;
}

}  // namespace koa::ensemble
