#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "koa/rng.hpp"
#include "koa/tensor.hpp"

namespace koa::nn {

enum class LayerKind { Conv3x3, Relu, MaxPool2, GlobalAvgPool, Dense, Dropout };

enum class HeadKind { Softmax, Sigmoid };

/// Miniature CNN: configurable conv(3x3)+ReLU+maxpool(2x2) blocks, then
/// global-average-pool -> dense(dense_units, ReLU) -> dropout -> dense(out).
/// Softmax head emits n_classes probabilities; sigmoid head emits one.
struct ModelConfig {
    std::vector<size_t> conv_channels = {8, 16, 32};
    size_t dense_units = 320;
    double dropout_rate = 0.2;
    int n_classes = 5;
    HeadKind head = HeadKind::Softmax;
    size_t input_channels = 1;
    uint64_t init_seed = 1;

    void validate() const;
    size_t out_dim() const { return head == HeadKind::Softmax ? static_cast<size_t>(n_classes) : 1; }
};

struct Layer {
    LayerKind kind;
    // Conv3x3: w (out_c, in_c, 3, 3), b (out_c). Dense: w (in, out), b (out).
    Tensor w, b;
    double rate = 0.0;  // dropout
    size_t in_channels = 0, out_channels = 0;
    size_t in_dim = 0, out_dim = 0;
};

struct Model {
    ModelConfig config;
    std::vector<Layer> layers;

    std::vector<Tensor*> params();
    std::vector<const Tensor*> params() const;
    size_t param_count() const;
};

/// Fan-in-scaled uniform weight init, zero biases, seeded by config.init_seed.
Model build_model(const ModelConfig& config);

enum class Mode { Train, Eval };

struct LayerCache {
    Tensor input;
    std::vector<uint32_t> pool_argmax;
    std::vector<uint8_t> drop_mask;
};

struct ForwardCache {
    std::vector<LayerCache> layers;
    Tensor logits;
    Tensor probs;
    bool train = false;
    size_t batch = 0;
};

/// Runs the network on a (B, H, W, C) batch. Returns (B, n_classes) softmax
/// rows or (B, 1) sigmoid outputs. Train mode applies inverted dropout
/// (kept units divided by keep probability); eval mode is identity.
/// When `cache` is non-null, intermediates for backward are stored there.
Tensor forward(const Model& model, const Tensor& batch, Mode mode, Rng& rng,
               ForwardCache* cache = nullptr);

/// Mean over H, W of a (B, H, W, C) tensor -> (B, C).
Tensor global_avg_pool(const Tensor& x);

struct LossSpec {
    enum class Kind { Categorical, Binary };
    Kind kind = Kind::Categorical;
    std::vector<double> weights;  // one per class

    void validate(int n_classes) const;
    static LossSpec categorical(std::vector<double> weights);
    static LossSpec binary(std::vector<double> weights);
};

/// Class-weighted cross entropy, mean over the batch. Categorical per-sample
/// loss is -w[y] * log(p[y]); binary weights multiply their own BCE terms.
/// Probabilities are clamped to [1e-12, 1 - 1e-12] before the log.
double weighted_ce(const Tensor& probs, const std::vector<int>& labels, const LossSpec& spec);

/// Exact analytic gradients of the batch loss, one tensor per parameter, in
/// Model::params() order. Requires a train-mode cache from a matching forward.
std::vector<Tensor> backward(const Model& model, const ForwardCache& cache,
                             const std::vector<int>& labels, const LossSpec& spec);

struct OptimizerState {
    std::vector<Tensor> velocity;
    double lr = 0.001;
    double momentum = 0.9;
};

OptimizerState init_optimizer(const Model& model, double lr, double momentum);

/// v <- momentum * v + lr * g; w <- w - v, elementwise.
void sgd_momentum_step(std::vector<Tensor*> params, const std::vector<Tensor>& grads,
                       OptimizerState& state);

struct TrainConfig {
    double lr = 0.001;
    double momentum = 0.9;
    size_t epochs = 10;
    size_t batch_size = 32;
    LossSpec loss;
    uint64_t seed = 1;
};

struct EpochStats {
    size_t epoch = 0;
    double train_loss = 0.0;
    double train_accuracy = 0.0;
    double val_loss = 0.0;
    double val_accuracy = 0.0;
};

struct TrainData {
    Tensor x;  // (N, H, W, C)
    std::vector<int> y;
};

/// Mini-batch SGD with momentum: epochs * ceil(N/B) steps, seeded shuffling,
/// dropout active. Aborts with NumericError on a non-finite loss.
std::vector<EpochStats> train(Model& model, const TrainData& train_set,
                              const TrainData& val_set, const TrainConfig& config);

/// Eval-mode class probabilities, (N, n_classes). A sigmoid head expands
/// p to [1 - p, p].
Tensor predict_proba(const Model& model, const Tensor& batch);

/// Argmax labels from a probability matrix (ties to the lower class index).
std::vector<int> argmax_labels(const Tensor& probs);

/// Central finite differences over every parameter; returns the maximum
/// relative error |g_a - g_n| / max(1e-8, |g_a| + |g_n|). Model dropout must
/// be disabled.
double grad_check(Model& model, const Tensor& batch, const std::vector<int>& labels,
                  const LossSpec& spec, double eps = 1e-5);

void save_model(const Model& model, const std::string& path,
                const std::map<std::string, std::string>& meta = {});
Model load_model(const std::string& path);

void write_history_csv(const std::string& path, const std::vector<EpochStats>& history,
                       const std::map<std::string, std::string>& meta = {});

}  // namespace koa::nn
