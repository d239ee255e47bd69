#include "koa/nn.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "koa/csv.hpp"
#include "koa/errors.hpp"

namespace koa::nn {

using nlohmann::json;

namespace {

constexpr double kProbClamp = 1e-12;

size_t idx4(const Tensor& t, size_t a, size_t b, size_t c, size_t d) {
    return ((a * t.shape[1] + b) * t.shape[2] + c) * t.shape[3] + d;
}

}  // namespace

void ModelConfig::validate() const {
    if (n_classes < 2) throw ConfigError("model: n_classes must be at least 2");
    if (head == HeadKind::Sigmoid && n_classes != 2) {
        throw ConfigError("model: sigmoid head requires exactly 2 classes");
    }
    if (dense_units < 1) throw ConfigError("model: dense_units must be positive");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
        throw ConfigError("model: dropout_rate must lie in [0,1)");
    }
    for (size_t c : conv_channels) {
        if (c < 1) throw ConfigError("model: conv channel counts must be positive");
    }
    if (input_channels < 1) throw ConfigError("model: input_channels must be positive");
}

std::vector<Tensor*> Model::params() {
    std::vector<Tensor*> p;
    for (auto& l : layers) {
        if (l.kind == LayerKind::Conv3x3 || l.kind == LayerKind::Dense) {
            p.push_back(&l.w);
            p.push_back(&l.b);
        }
    }
    return p;
}

std::vector<const Tensor*> Model::params() const {
    std::vector<const Tensor*> p;
    for (const auto& l : layers) {
        if (l.kind == LayerKind::Conv3x3 || l.kind == LayerKind::Dense) {
            p.push_back(&l.w);
            p.push_back(&l.b);
        }
    }
    return p;
}

size_t Model::param_count() const {
    size_t n = 0;
    for (const auto* t : params()) n += t->numel();
    return n;
}

namespace {

Layer bare_layer(LayerKind kind) {
    Layer l;
    l.kind = kind;
    return l;
}

void init_uniform(Tensor& t, size_t fan_in, Rng& rng) {
    double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (double& v : t.data) v = rng.uniform(-bound, bound);
}

}  // namespace

Model build_model(const ModelConfig& config) {
    config.validate();
    Model m;
    m.config = config;
    Rng rng(mix_seed(config.init_seed, "weight_init"));

    size_t in_c = config.input_channels;
    for (size_t out_c : config.conv_channels) {
        Layer conv;
        conv.kind = LayerKind::Conv3x3;
        conv.in_channels = in_c;
        conv.out_channels = out_c;
        conv.w = Tensor::zeros({out_c, in_c, 3, 3});
        conv.b = Tensor::zeros({out_c});
        init_uniform(conv.w, in_c * 9, rng);
        m.layers.push_back(std::move(conv));
        m.layers.push_back(bare_layer(LayerKind::Relu));
        m.layers.push_back(bare_layer(LayerKind::MaxPool2));
        in_c = out_c;
    }
    m.layers.push_back(bare_layer(LayerKind::GlobalAvgPool));

    Layer dense1;
    dense1.kind = LayerKind::Dense;
    dense1.in_dim = in_c;
    dense1.out_dim = config.dense_units;
    dense1.w = Tensor::zeros({dense1.in_dim, dense1.out_dim});
    dense1.b = Tensor::zeros({dense1.out_dim});
    init_uniform(dense1.w, dense1.in_dim, rng);
    m.layers.push_back(std::move(dense1));
    m.layers.push_back(bare_layer(LayerKind::Relu));

    Layer drop;
    drop.kind = LayerKind::Dropout;
    drop.rate = config.dropout_rate;
    m.layers.push_back(std::move(drop));

    Layer dense2;
    dense2.kind = LayerKind::Dense;
    dense2.in_dim = config.dense_units;
    dense2.out_dim = config.out_dim();
    dense2.w = Tensor::zeros({dense2.in_dim, dense2.out_dim});
    dense2.b = Tensor::zeros({dense2.out_dim});
    init_uniform(dense2.w, dense2.in_dim, rng);
    m.layers.push_back(std::move(dense2));
    return m;
}

Tensor global_avg_pool(const Tensor& x) {
    if (x.rank() != 4) throw DataError("global_avg_pool: expected rank-4 input, got " + x.shape_str());
    size_t b = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3];
    Tensor out = Tensor::zeros({b, c});
    double inv = 1.0 / static_cast<double>(h * w);
    for (size_t bi = 0; bi < b; ++bi) {
        for (size_t y = 0; y < h; ++y) {
            for (size_t xi = 0; xi < w; ++xi) {
                for (size_t ci = 0; ci < c; ++ci) {
                    out.at2(bi, ci) += x.data[idx4(x, bi, y, xi, ci)];
                }
            }
        }
        for (size_t ci = 0; ci < c; ++ci) out.at2(bi, ci) *= inv;
    }
    return out;
}

namespace {

Tensor conv3x3_forward(const Layer& l, const Tensor& x, size_t layer_index) {
    if (x.rank() != 4 || x.shape[3] != l.in_channels) {
        throw DataError("layer " + std::to_string(layer_index) + " (conv3x3): expected (B,H,W," +
                        std::to_string(l.in_channels) + "), got " + x.shape_str());
    }
    size_t b = x.shape[0], h = x.shape[1], w = x.shape[2];
    Tensor out = Tensor::zeros({b, h, w, l.out_channels});
    for (size_t bi = 0; bi < b; ++bi) {
        for (size_t y = 0; y < h; ++y) {
            for (size_t xi = 0; xi < w; ++xi) {
                for (size_t oc = 0; oc < l.out_channels; ++oc) {
                    double acc = l.b.data[oc];
                    for (size_t ky = 0; ky < 3; ++ky) {
                        long sy = static_cast<long>(y) + static_cast<long>(ky) - 1;
                        if (sy < 0 || sy >= static_cast<long>(h)) continue;
                        for (size_t kx = 0; kx < 3; ++kx) {
                            long sx = static_cast<long>(xi) + static_cast<long>(kx) - 1;
                            if (sx < 0 || sx >= static_cast<long>(w)) continue;
                            for (size_t ic = 0; ic < l.in_channels; ++ic) {
                                acc += l.w.data[((oc * l.in_channels + ic) * 3 + ky) * 3 + kx] *
                                       x.data[idx4(x, bi, static_cast<size_t>(sy),
                                                   static_cast<size_t>(sx), ic)];
                            }
                        }
                    }
                    out.data[idx4(out, bi, y, xi, oc)] = acc;
                }
            }
        }
    }
    return out;
}

void conv3x3_backward(const Layer& l, const Tensor& x, const Tensor& dy, Tensor& dw, Tensor& db,
                      Tensor& dx) {
    size_t b = x.shape[0], h = x.shape[1], w = x.shape[2];
    dw = Tensor::zeros(l.w.shape);
    db = Tensor::zeros(l.b.shape);
    dx = Tensor::zeros(x.shape);
    for (size_t bi = 0; bi < b; ++bi) {
        for (size_t y = 0; y < h; ++y) {
            for (size_t xi = 0; xi < w; ++xi) {
                for (size_t oc = 0; oc < l.out_channels; ++oc) {
                    double g = dy.data[idx4(dy, bi, y, xi, oc)];
                    if (g == 0.0) continue;
                    db.data[oc] += g;
                    for (size_t ky = 0; ky < 3; ++ky) {
                        long sy = static_cast<long>(y) + static_cast<long>(ky) - 1;
                        if (sy < 0 || sy >= static_cast<long>(h)) continue;
                        for (size_t kx = 0; kx < 3; ++kx) {
                            long sx = static_cast<long>(xi) + static_cast<long>(kx) - 1;
                            if (sx < 0 || sx >= static_cast<long>(w)) continue;
                            for (size_t ic = 0; ic < l.in_channels; ++ic) {
                                size_t widx = ((oc * l.in_channels + ic) * 3 + ky) * 3 + kx;
                                size_t xidx = idx4(x, bi, static_cast<size_t>(sy),
                                                   static_cast<size_t>(sx), ic);
                                dw.data[widx] += g * x.data[xidx];
                                dx.data[xidx] += g * l.w.data[widx];
                            }
                        }
                    }
                }
            }
        }
    }
}

Tensor maxpool2_forward(const Tensor& x, std::vector<uint32_t>* argmax, size_t layer_index) {
    size_t b = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3];
    if (h < 2 || w < 2) {
        throw DataError("layer " + std::to_string(layer_index) +
                        " (maxpool2): spatial dims too small in " + x.shape_str());
    }
    size_t oh = h / 2, ow = w / 2;
    Tensor out = Tensor::zeros({b, oh, ow, c});
    if (argmax) argmax->assign(out.numel(), 0);
    for (size_t bi = 0; bi < b; ++bi) {
        for (size_t y = 0; y < oh; ++y) {
            for (size_t xi = 0; xi < ow; ++xi) {
                for (size_t ci = 0; ci < c; ++ci) {
                    double best = -1e308;
                    size_t best_idx = 0;
                    for (size_t dy = 0; dy < 2; ++dy) {
                        for (size_t dx = 0; dx < 2; ++dx) {
                            size_t idx = idx4(x, bi, 2 * y + dy, 2 * xi + dx, ci);
                            if (x.data[idx] > best) {
                                best = x.data[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    size_t oidx = idx4(out, bi, y, xi, ci);
                    out.data[oidx] = best;
                    if (argmax) (*argmax)[oidx] = static_cast<uint32_t>(best_idx);
                }
            }
        }
    }
    return out;
}

Tensor dense_forward(const Layer& l, const Tensor& x, size_t layer_index) {
    if (x.rank() != 2 || x.shape[1] != l.in_dim) {
        throw DataError("layer " + std::to_string(layer_index) + " (dense): expected (B," +
                        std::to_string(l.in_dim) + "), got " + x.shape_str());
    }
    size_t b = x.shape[0];
    Tensor out = Tensor::zeros({b, l.out_dim});
    for (size_t bi = 0; bi < b; ++bi) {
        for (size_t o = 0; o < l.out_dim; ++o) {
            double acc = l.b.data[o];
            for (size_t i = 0; i < l.in_dim; ++i) {
                acc += x.at2(bi, i) * l.w.at2(i, o);
            }
            out.at2(bi, o) = acc;
        }
    }
    return out;
}

Tensor apply_head(const Tensor& logits, HeadKind head) {
    Tensor probs = Tensor::zeros(logits.shape);
    size_t b = logits.shape[0], d = logits.shape[1];
    if (head == HeadKind::Softmax) {
        for (size_t bi = 0; bi < b; ++bi) {
            double mx = logits.at2(bi, 0);
            for (size_t k = 1; k < d; ++k) mx = std::max(mx, logits.at2(bi, k));
            double sum = 0.0;
            for (size_t k = 0; k < d; ++k) {
                double e = std::exp(logits.at2(bi, k) - mx);
                probs.at2(bi, k) = e;
                sum += e;
            }
            for (size_t k = 0; k < d; ++k) probs.at2(bi, k) /= sum;
        }
    } else {
        for (size_t bi = 0; bi < b; ++bi) {
            probs.at2(bi, 0) = 1.0 / (1.0 + std::exp(-logits.at2(bi, 0)));
        }
    }
    return probs;
}

}  // namespace

Tensor forward(const Model& model, const Tensor& batch, Mode mode, Rng& rng,
               ForwardCache* cache) {
    if (batch.rank() != 4) {
        throw DataError("forward: expected (B,H,W,C) batch, got " + batch.shape_str());
    }
    if (batch.shape[0] == 0) throw DataError("forward: empty batch");

    bool training = mode == Mode::Train;
    if (cache) {
        cache->layers.assign(model.layers.size(), {});
        cache->train = training;
        cache->batch = batch.shape[0];
    }

    Tensor x = batch;
    for (size_t li = 0; li < model.layers.size(); ++li) {
        const Layer& l = model.layers[li];
        LayerCache* lc = cache ? &cache->layers[li] : nullptr;
        if (lc) lc->input = x;
        switch (l.kind) {
            case LayerKind::Conv3x3:
                x = conv3x3_forward(l, x, li);
                break;
            case LayerKind::Relu:
                for (double& v : x.data) v = v > 0.0 ? v : 0.0;
                break;
            case LayerKind::MaxPool2:
                x = maxpool2_forward(x, lc ? &lc->pool_argmax : nullptr, li);
                break;
            case LayerKind::GlobalAvgPool:
                x = global_avg_pool(x);
                break;
            case LayerKind::Dense:
                x = dense_forward(l, x, li);
                break;
            case LayerKind::Dropout: {
                if (training && l.rate > 0.0) {
                    double keep = 1.0 - l.rate;
                    std::vector<uint8_t> mask(x.numel());
                    for (size_t i = 0; i < x.numel(); ++i) {
                        mask[i] = rng.bernoulli(keep) ? 1 : 0;
                        x.data[i] = mask[i] ? x.data[i] / keep : 0.0;
                    }
                    if (lc) lc->drop_mask = std::move(mask);
                }
                break;
            }
        }
    }

    Tensor probs = apply_head(x, model.config.head);
    if (cache) {
        cache->logits = std::move(x);
        cache->probs = probs;
    }
    return probs;
}

void LossSpec::validate(int n_classes) const {
    size_t want = kind == Kind::Categorical ? static_cast<size_t>(n_classes) : 2;
    if (weights.size() != want) {
        throw ConfigError("loss: expected " + std::to_string(want) + " class weights, got " +
                          std::to_string(weights.size()));
    }
    for (double w : weights) {
        if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("loss: weights must be finite and non-negative");
    }
}

LossSpec LossSpec::categorical(std::vector<double> weights) {
    LossSpec s;
    s.kind = Kind::Categorical;
    s.weights = std::move(weights);
    return s;
}

LossSpec LossSpec::binary(std::vector<double> weights) {
    LossSpec s;
    s.kind = Kind::Binary;
    s.weights = std::move(weights);
    return s;
}

double weighted_ce(const Tensor& probs, const std::vector<int>& labels, const LossSpec& spec) {
    if (probs.rank() != 2 || probs.shape[0] != labels.size()) {
        throw DataError("loss: probability matrix shape mismatch with labels");
    }
    if (labels.empty()) throw DataError("loss: empty batch");
    size_t b = probs.shape[0];
    double total = 0.0;
    if (spec.kind == LossSpec::Kind::Categorical) {
        size_t c = probs.shape[1];
        if (spec.weights.size() != c) {
            throw ConfigError("loss: weight count " + std::to_string(spec.weights.size()) +
                              " does not match class count " + std::to_string(c));
        }
        for (size_t i = 0; i < b; ++i) {
            int y = labels[i];
            if (y < 0 || y >= static_cast<int>(c)) {
                throw DataError("loss: label " + std::to_string(y) + " out of range");
            }
            double p = std::clamp(probs.at2(i, static_cast<size_t>(y)), kProbClamp, 1.0 - kProbClamp);
            total += -spec.weights[static_cast<size_t>(y)] * std::log(p);
        }
    } else {
        if (probs.shape[1] != 1) {
            throw DataError("loss: binary head expects one probability per sample");
        }
        if (spec.weights.size() != 2) throw ConfigError("loss: binary loss needs 2 weights");
        for (size_t i = 0; i < b; ++i) {
            int y = labels[i];
            if (y != 0 && y != 1) throw DataError("loss: binary label must be 0 or 1");
            double p = std::clamp(probs.at2(i, 0), kProbClamp, 1.0 - kProbClamp);
            total += y == 1 ? -spec.weights[1] * std::log(p)
                            : -spec.weights[0] * std::log(1.0 - p);
        }
    }
    return total / static_cast<double>(b);
}

std::vector<Tensor> backward(const Model& model, const ForwardCache& cache,
                             const std::vector<int>& labels, const LossSpec& spec) {
    if (!cache.train) {
        throw DataError("backward: cache was not produced by a train-mode forward");
    }
    if (cache.layers.size() != model.layers.size()) {
        throw DataError("backward: cache does not match this model (layer count)");
    }
    if (cache.batch != labels.size() || cache.batch == 0) {
        throw DataError("backward: cache batch size does not match labels");
    }

    size_t b = cache.batch;
    double inv_b = 1.0 / static_cast<double>(b);

    // Fused head+loss gradient w.r.t. logits.
    Tensor dx = Tensor::zeros(cache.logits.shape);
    if (spec.kind == LossSpec::Kind::Categorical) {
        size_t c = cache.probs.shape[1];
        for (size_t i = 0; i < b; ++i) {
            int y = labels[i];
            if (y < 0 || y >= static_cast<int>(c)) throw DataError("backward: label out of range");
            double alpha = spec.weights[static_cast<size_t>(y)];
            for (size_t k = 0; k < c; ++k) {
                double onehot = k == static_cast<size_t>(y) ? 1.0 : 0.0;
                dx.at2(i, k) = alpha * (cache.probs.at2(i, k) - onehot) * inv_b;
            }
        }
    } else {
        for (size_t i = 0; i < b; ++i) {
            int y = labels[i];
            double p = cache.probs.at2(i, 0);
            dx.at2(i, 0) = (y == 1 ? spec.weights[1] * (p - 1.0) : spec.weights[0] * p) * inv_b;
        }
    }

    std::vector<Tensor> grads;
    std::vector<std::pair<Tensor, Tensor>> param_grads(model.layers.size());

    for (size_t li = model.layers.size(); li-- > 0;) {
        const Layer& l = model.layers[li];
        const LayerCache& lc = cache.layers[li];
        switch (l.kind) {
            case LayerKind::Conv3x3: {
                Tensor dw, db, dxn;
                conv3x3_backward(l, lc.input, dx, dw, db, dxn);
                param_grads[li] = {std::move(dw), std::move(db)};
                dx = std::move(dxn);
                break;
            }
            case LayerKind::Relu: {
                for (size_t i = 0; i < dx.numel(); ++i) {
                    if (lc.input.data[i] <= 0.0) dx.data[i] = 0.0;
                }
                break;
            }
            case LayerKind::MaxPool2: {
                Tensor dxn = Tensor::zeros(lc.input.shape);
                for (size_t i = 0; i < dx.numel(); ++i) {
                    dxn.data[lc.pool_argmax[i]] += dx.data[i];
                }
                dx = std::move(dxn);
                break;
            }
            case LayerKind::GlobalAvgPool: {
                const Tensor& in = lc.input;
                size_t h = in.shape[1], w = in.shape[2], c = in.shape[3];
                double inv = 1.0 / static_cast<double>(h * w);
                Tensor dxn = Tensor::zeros(in.shape);
                for (size_t bi = 0; bi < in.shape[0]; ++bi) {
                    for (size_t y = 0; y < h; ++y) {
                        for (size_t xi = 0; xi < w; ++xi) {
                            for (size_t ci = 0; ci < c; ++ci) {
                                dxn.data[idx4(in, bi, y, xi, ci)] = dx.at2(bi, ci) * inv;
                            }
                        }
                    }
                }
                dx = std::move(dxn);
                break;
            }
            case LayerKind::Dense: {
                const Tensor& in = lc.input;
                Tensor dw = Tensor::zeros(l.w.shape);
                Tensor db = Tensor::zeros(l.b.shape);
                Tensor dxn = Tensor::zeros(in.shape);
                for (size_t bi = 0; bi < in.shape[0]; ++bi) {
                    for (size_t o = 0; o < l.out_dim; ++o) {
                        double g = dx.at2(bi, o);
                        if (g == 0.0) continue;
                        db.data[o] += g;
                        for (size_t i = 0; i < l.in_dim; ++i) {
                            dw.at2(i, o) += g * in.at2(bi, i);
                            dxn.at2(bi, i) += g * l.w.at2(i, o);
                        }
                    }
                }
                param_grads[li] = {std::move(dw), std::move(db)};
                dx = std::move(dxn);
                break;
            }
            case LayerKind::Dropout: {
                if (cache.train && l.rate > 0.0) {
                    if (lc.drop_mask.size() != dx.numel()) {
                        throw DataError("backward: dropout mask missing from cache");
                    }
                    double keep = 1.0 - l.rate;
                    for (size_t i = 0; i < dx.numel(); ++i) {
                        dx.data[i] = lc.drop_mask[i] ? dx.data[i] / keep : 0.0;
                    }
                }
                break;
            }
        }
    }

    for (size_t li = 0; li < model.layers.size(); ++li) {
        const Layer& l = model.layers[li];
        if (l.kind == LayerKind::Conv3x3 || l.kind == LayerKind::Dense) {
            grads.push_back(std::move(param_grads[li].first));
            grads.push_back(std::move(param_grads[li].second));
        }
    }
    return grads;
}

OptimizerState init_optimizer(const Model& model, double lr, double momentum) {
    OptimizerState s;
    s.lr = lr;
    s.momentum = momentum;
    for (const Tensor* p : model.params()) {
        s.velocity.push_back(Tensor::zeros(p->shape));
    }
    return s;
}

void sgd_momentum_step(std::vector<Tensor*> params, const std::vector<Tensor>& grads,
                       OptimizerState& state) {
    if (params.size() != grads.size() || params.size() != state.velocity.size()) {
        throw DataError("sgd: parameter/gradient/velocity count mismatch");
    }
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor& w = *params[i];
        const Tensor& g = grads[i];
        Tensor& v = state.velocity[i];
        if (!w.shape_equals(g) || !w.shape_equals(v)) {
            throw DataError("sgd: shape mismatch at parameter " + std::to_string(i) + ": " +
                            w.shape_str() + " vs " + g.shape_str());
        }
        for (size_t k = 0; k < w.numel(); ++k) {
            v.data[k] = state.momentum * v.data[k] + state.lr * g.data[k];
            w.data[k] -= v.data[k];
        }
    }
}

namespace {

Tensor slice_batch(const Tensor& x, const std::vector<size_t>& indices, size_t start, size_t count) {
    size_t row = x.numel() / x.shape[0];
    std::vector<size_t> shape = x.shape;
    shape[0] = count;
    Tensor out = Tensor::zeros(shape);
    for (size_t i = 0; i < count; ++i) {
        const double* src = x.data.data() + indices[start + i] * row;
        std::copy(src, src + row, out.data.data() + i * row);
    }
    return out;
}

std::vector<int> slice_labels(const std::vector<int>& y, const std::vector<size_t>& indices,
                              size_t start, size_t count) {
    std::vector<int> out(count);
    for (size_t i = 0; i < count; ++i) out[i] = y[indices[start + i]];
    return out;
}

int predicted_label(const Tensor& probs, size_t row, HeadKind head) {
    if (head == HeadKind::Sigmoid) {
        return probs.at2(row, 0) >= 0.5 ? 1 : 0;
    }
    int best = 0;
    for (size_t k = 1; k < probs.shape[1]; ++k) {
        if (probs.at2(row, k) > probs.at2(row, static_cast<size_t>(best))) {
            best = static_cast<int>(k);
        }
    }
    return best;
}

// Eval-mode loss and accuracy over a full set, batched.
std::pair<double, double> evaluate_set(const Model& model, const TrainData& data,
                                       const LossSpec& spec) {
    if (data.y.empty()) return {0.0, 0.0};
    size_t n = data.y.size();
    Rng dummy(0);
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    double loss_sum = 0.0;
    size_t correct = 0;
    size_t batch = 64;
    for (size_t start = 0; start < n; start += batch) {
        size_t count = std::min(batch, n - start);
        Tensor xb = slice_batch(data.x, order, start, count);
        std::vector<int> yb = slice_labels(data.y, order, start, count);
        Tensor probs = forward(model, xb, Mode::Eval, dummy);
        loss_sum += weighted_ce(probs, yb, spec) * static_cast<double>(count);
        for (size_t i = 0; i < count; ++i) {
            if (predicted_label(probs, i, model.config.head) == yb[i]) ++correct;
        }
    }
    return {loss_sum / static_cast<double>(n), static_cast<double>(correct) / static_cast<double>(n)};
}

}  // namespace

std::vector<EpochStats> train(Model& model, const TrainData& train_set,
                              const TrainData& val_set, const TrainConfig& config) {
    if (train_set.y.empty()) throw DataError("train: empty training split");
    if (train_set.x.shape[0] != train_set.y.size()) {
        throw DataError("train: tensor/label count mismatch");
    }
    config.loss.validate(model.config.n_classes);

    size_t n = train_set.y.size();
    size_t batch_size = std::max<size_t>(1, config.batch_size);
    OptimizerState opt = init_optimizer(model, config.lr, config.momentum);
    Rng shuffle_rng(mix_seed(config.seed, "shuffle"));
    Rng dropout_rng(mix_seed(config.seed, "dropout"));

    std::vector<EpochStats> history;
    size_t step = 0;
    for (size_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::vector<size_t> order(n);
        for (size_t i = 0; i < n; ++i) order[i] = i;
        shuffle_rng.shuffle(order);

        double loss_sum = 0.0;
        size_t correct = 0;
        for (size_t start = 0; start < n; start += batch_size) {
            size_t count = std::min(batch_size, n - start);
            Tensor xb = slice_batch(train_set.x, order, start, count);
            std::vector<int> yb = slice_labels(train_set.y, order, start, count);

            ForwardCache cache;
            Tensor probs = forward(model, xb, Mode::Train, dropout_rng, &cache);
            double loss = weighted_ce(probs, yb, config.loss);
            ++step;
            if (!std::isfinite(loss)) {
                throw NumericError("train: non-finite loss at step " + std::to_string(step) +
                                   " (lr=" + std::to_string(config.lr) + ")");
            }
            loss_sum += loss * static_cast<double>(count);
            for (size_t i = 0; i < count; ++i) {
                if (predicted_label(probs, i, model.config.head) == yb[i]) ++correct;
            }

            std::vector<Tensor> grads = backward(model, cache, yb, config.loss);
            sgd_momentum_step(model.params(), grads, opt);
        }

        EpochStats st;
        st.epoch = epoch + 1;
        st.train_loss = loss_sum / static_cast<double>(n);
        st.train_accuracy = static_cast<double>(correct) / static_cast<double>(n);
        auto [vl, va] = evaluate_set(model, val_set, config.loss);
        st.val_loss = vl;
        st.val_accuracy = va;
        history.push_back(st);
    }
    return history;
}

Tensor predict_proba(const Model& model, const Tensor& batch) {
    if (batch.rank() != 4 || batch.shape[0] == 0) {
        throw DataError("predict_proba: expected non-empty (B,H,W,C) batch");
    }
    size_t n = batch.shape[0];
    size_t n_classes = static_cast<size_t>(model.config.n_classes);
    Tensor out = Tensor::zeros({n, n_classes});
    Rng dummy(0);
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    size_t chunk = 64;
    for (size_t start = 0; start < n; start += chunk) {
        size_t count = std::min(chunk, n - start);
        Tensor xb = slice_batch(batch, order, start, count);
        Tensor probs = forward(model, xb, Mode::Eval, dummy);
        for (size_t i = 0; i < count; ++i) {
            if (model.config.head == HeadKind::Sigmoid) {
                double p = probs.at2(i, 0);
                out.at2(start + i, 0) = 1.0 - p;
                out.at2(start + i, 1) = p;
            } else {
                for (size_t k = 0; k < n_classes; ++k) out.at2(start + i, k) = probs.at2(i, k);
            }
        }
    }
    return out;
}

std::vector<int> argmax_labels(const Tensor& probs) {
    if (probs.rank() != 2) throw DataError("argmax_labels: expected a matrix");
    std::vector<int> labels(probs.shape[0]);
    for (size_t i = 0; i < probs.shape[0]; ++i) {
        size_t best = 0;
        for (size_t k = 1; k < probs.shape[1]; ++k) {
            if (probs.at2(i, k) > probs.at2(i, best)) best = k;
        }
        labels[i] = static_cast<int>(best);
    }
    return labels;
}

double grad_check(Model& model, const Tensor& batch, const std::vector<int>& labels,
                  const LossSpec& spec, double eps) {
    for (const Layer& l : model.layers) {
        if (l.kind == LayerKind::Dropout && l.rate > 0.0) {
            throw ConfigError("grad_check: dropout must be disabled");
        }
    }
    Rng dummy(0);
    ForwardCache cache;
    forward(model, batch, Mode::Train, dummy, &cache);
    std::vector<Tensor> analytic = backward(model, cache, labels, spec);

    double max_rel = 0.0;
    std::vector<Tensor*> params = model.params();
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& p = *params[pi];
        for (size_t k = 0; k < p.numel(); ++k) {
            double orig = p.data[k];
            p.data[k] = orig + eps;
            double lp = weighted_ce(forward(model, batch, Mode::Train, dummy), labels, spec);
            p.data[k] = orig - eps;
            double lm = weighted_ce(forward(model, batch, Mode::Train, dummy), labels, spec);
            p.data[k] = orig;
            double numeric = (lp - lm) / (2.0 * eps);
            double ga = analytic[pi].data[k];
            double rel = std::abs(ga - numeric) / std::max(1e-8, std::abs(ga) + std::abs(numeric));
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

namespace {

json config_to_json(const ModelConfig& c) {
    return json{{"conv_channels", c.conv_channels},
                {"dense_units", c.dense_units},
                {"dropout_rate", c.dropout_rate},
                {"n_classes", c.n_classes},
                {"head", c.head == HeadKind::Softmax ? "softmax" : "sigmoid"},
                {"input_channels", c.input_channels},
                {"init_seed", c.init_seed}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.conv_channels = j.at("conv_channels").get<std::vector<size_t>>();
    c.dense_units = j.at("dense_units").get<size_t>();
    c.dropout_rate = j.at("dropout_rate").get<double>();
    c.n_classes = j.at("n_classes").get<int>();
    c.head = j.at("head").get<std::string>() == "sigmoid" ? HeadKind::Sigmoid : HeadKind::Softmax;
    c.input_channels = j.at("input_channels").get<size_t>();
    c.init_seed = j.at("init_seed").get<uint64_t>();
    return c;
}

}  // namespace

void save_model(const Model& model, const std::string& path,
                const std::map<std::string, std::string>& meta) {
    json j;
    j["format"] = "koa-model";
    j["version"] = 1;
    j["kind"] = "cnn";
    j["config"] = config_to_json(model.config);
    json params = json::array();
    for (const Tensor* p : model.params()) {
        params.push_back(json{{"shape", p->shape}, {"data", p->data}});
    }
    j["params"] = std::move(params);
    for (const auto& [k, v] : meta) j["meta"][k] = v;

    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("save_model: cannot open " + path);
    f << j.dump(1) << "\n";
    if (!f) throw DataError("save_model: write failed: " + path);
}

Model load_model(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("load_model: cannot open " + path);
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw DataError("load_model: invalid model file " + path + ": " + e.what());
    }
    if (j.value("format", "") != "koa-model" || j.value("kind", "") != "cnn") {
        throw DataError("load_model: not a cnn model file: " + path);
    }
    Model m = build_model(config_from_json(j.at("config")));
    std::vector<Tensor*> params = m.params();
    const json& jp = j.at("params");
    if (jp.size() != params.size()) {
        throw DataError("load_model: parameter count mismatch in " + path);
    }
    for (size_t i = 0; i < params.size(); ++i) {
        auto shape = jp[i].at("shape").get<std::vector<size_t>>();
        auto data = jp[i].at("data").get<std::vector<double>>();
        if (shape != params[i]->shape || data.size() != params[i]->data.size()) {
            throw DataError("load_model: parameter shape mismatch in " + path);
        }
        params[i]->data = std::move(data);
    }
    return m;
}

void write_history_csv(const std::string& path, const std::vector<EpochStats>& history,
                       const std::map<std::string, std::string>& meta) {
    std::vector<std::vector<std::string>> rows;
    for (const auto& e : history) {
        rows.push_back({std::to_string(e.epoch), csv::fmt_double(e.train_loss),
                        csv::fmt_double(e.train_accuracy), csv::fmt_double(e.val_loss),
                        csv::fmt_double(e.val_accuracy)});
    }
    csv::write(path, {"epoch", "train_loss", "train_accuracy", "val_loss", "val_accuracy"}, rows,
               meta);
}

}  // namespace koa::nn
