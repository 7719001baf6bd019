#pragma once

#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "model.hpp"

namespace massive {

// Adam with bias correction. Moments are keyed by parameter name.
template <Scalar T>
class Adam {
public:
    Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    // Starts a new optimizer step; call once before the update() calls of that step.
    void begin_step() { ++t_; }
    std::size_t steps() const noexcept { return t_; }

    void update(const std::string& key, Tensor<T>& param, const Tensor<T>& grad, double lr) {
        auto [it, fresh] = moments_.try_emplace(key);
        if (fresh) {
            it->second.m = Tensor<double>(param.shape());
            it->second.v = Tensor<double>(param.shape());
        }
        auto& m = it->second.m;
        auto& v = it->second.v;
        const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < param.numel(); ++i) {
            const double g = static_cast<double>(grad[i]);
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
            const double mhat = m[i] / c1;
            const double vhat = v[i] / c2;
            param[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + eps_));
        }
    }

private:
    struct Moments {
        Tensor<double> m, v;
    };
    double beta1_, beta2_, eps_;
    std::size_t t_ = 0;
    std::map<std::string, Moments> moments_;
};

using Chunk = std::vector<std::uint32_t>; // length+1 tokens: inputs are [0, n-1), targets [1, n)

// Consecutive, padding-free training chunks; consecutive chunks share one
// boundary token so every token except the first is a target exactly once.
inline std::vector<Chunk> make_chunks(std::span<const std::uint32_t> stream, std::size_t length) {
    if (length == 0) {
        throw ConfigError("chunk length must be positive");
    }
    std::vector<Chunk> out;
    for (std::size_t begin = 0; begin + 1 < stream.size(); begin += length) {
        const std::size_t end = std::min(begin + length + 1, stream.size());
        out.emplace_back(stream.begin() + static_cast<std::ptrdiff_t>(begin),
                         stream.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return out;
}

// Linear warmup over ceil(warmup_ratio · total_steps) steps, then constant.
inline double warmup_lr(double lr, double warmup_ratio, std::size_t step, std::size_t total_steps) {
    const auto warm = static_cast<std::size_t>(std::ceil(warmup_ratio * static_cast<double>(total_steps)));
    if (warm == 0 || step >= warm) {
        return lr;
    }
    return lr * static_cast<double>(step) / static_cast<double>(warm);
}

template <Scalar T>
struct BatchGradients {
    double loss = 0; // mean over chunks
    std::map<std::string, Tensor<T>> base;
    std::map<std::string, std::pair<Tensor<T>, Tensor<T>>> lora;
};

// Forward + backward over a batch; gradients are averaged over chunks.
template <Scalar T>
BatchGradients<T> batch_gradients(const ModelConfig& config, const ParameterStore<T>& params,
                                  const LoraAdapterSet<T>* adapters, std::span<const Chunk> batch, bool grad_base,
                                  Rng* dropout_rng) {
    BatchGradients<T> out;
    const T inv = T{1} / static_cast<T>(batch.size());
    auto add_into = [inv](Tensor<T>& acc, const Tensor<T>& g) {
        if (acc.empty()) {
            acc = Tensor<T>(g.shape());
        }
        detail::axpy(inv, g.ptr(), acc.ptr(), g.numel());
    };
    for (const Chunk& chunk : batch) {
        if (chunk.size() < 2) {
            throw InputError("training chunk shorter than two tokens");
        }
        const std::span<const std::uint32_t> ids(chunk.data(), chunk.size() - 1);
        const std::span<const std::uint32_t> targets(chunk.data() + 1, chunk.size() - 1);
        ForwardOptions<T> opts;
        opts.training = true;
        opts.dropout_rng = dropout_rng;
        opts.adapters = adapters;
        opts.grad_adapters = adapters != nullptr;
        opts.grad_base = grad_base;
        Graph<T> g;
        const auto fg = build_forward(g, config, params, ids, opts);
        const auto loss = g.cross_entropy(fg.logits, targets);
        const double lv = static_cast<double>(g.value(loss)[0]);
        if (!std::isfinite(lv)) {
            throw NumericFault("non-finite training loss");
        }
        out.loss += lv / static_cast<double>(batch.size());
        g.backward(loss);
        if (grad_base) {
            for (const auto& [name, var] : fg.base) {
                add_into(out.base[name], g.grad(var));
            }
        }
        for (const auto& [name, vars] : fg.lora) {
            auto& slot = out.lora[name];
            add_into(slot.first, g.grad(vars.first));
            add_into(slot.second, g.grad(vars.second));
        }
    }
    return out;
}

// One adapter-only optimizer step; base weights are read but never written.
template <Scalar T>
double adapter_step(const ModelConfig& config, const ParameterStore<T>& params, LoraAdapterSet<T>& adapters,
                    std::span<const Chunk> batch, Adam<T>& optimizer, double lr, Rng* dropout_rng = nullptr) {
    auto grads = batch_gradients(config, params, &adapters, batch, false, dropout_rng);
    optimizer.begin_step();
    for (auto& [name, ad] : adapters.adapters) {
        auto it = grads.lora.find(name);
        if (it == grads.lora.end()) {
            continue;
        }
        optimizer.update(name + ".lora_A", ad.a, it->second.first, lr);
        optimizer.update(name + ".lora_B", ad.b, it->second.second, lr);
    }
    return grads.loss;
}

// Token-weighted mean next-token NLL over chunks.
template <Scalar T>
double mean_loss(const ModelConfig& config, const ParameterStore<T>& params, std::span<const Chunk> chunks,
                 const LoraAdapterSet<T>* adapters = nullptr) {
    double total = 0;
    std::size_t count = 0;
    for (const Chunk& chunk : chunks) {
        if (chunk.size() < 2) {
            continue;
        }
        const std::span<const std::uint32_t> ids(chunk.data(), chunk.size() - 1);
        const Tensor<T> lg = logits(config, params, ids, adapters);
        for (std::size_t t = 0; t + 1 < chunk.size(); ++t) {
            total -= log_softmax_at<T>(lg.row(t), chunk[t + 1]);
            ++count;
        }
    }
    if (count == 0) {
        throw InputError("no scorable tokens");
    }
    return total / static_cast<double>(count);
}

struct PretrainConfig {
    double lr = 3e-3;
    std::size_t steps = 2000;
    std::size_t batch_size = 4;
    std::size_t chunk_len = 64;
    double warmup_ratio = 0.05;
    double clip_norm = 1.0;
    std::uint64_t seed = 0;
};

// Full-parameter next-token training on random windows of `stream`.
// Returns the per-step training losses.
template <Scalar T>
std::vector<double> pretrain(const ModelConfig& config, ParameterStore<T>& params,
                             std::span<const std::uint32_t> stream, const PretrainConfig& pc) {
    if (stream.size() < pc.chunk_len + 1) {
        throw InputError("pretraining stream shorter than one chunk");
    }
    Rng data_rng(pc.seed);
    Rng dropout_rng(pc.seed ^ 0x5DEECE66DULL);
    Adam<T> adam;
    std::vector<double> losses;
    std::vector<Chunk> batch(pc.batch_size);
    for (std::size_t step = 1; step <= pc.steps; ++step) {
        for (Chunk& c : batch) {
            const std::size_t begin = data_rng.below(stream.size() - pc.chunk_len);
            c.assign(stream.begin() + static_cast<std::ptrdiff_t>(begin),
                     stream.begin() + static_cast<std::ptrdiff_t>(begin + pc.chunk_len + 1));
        }
        auto grads = batch_gradients<T>(config, params, nullptr, batch, true, &dropout_rng);
        double norm2 = 0;
        for (const auto& [_, gt] : grads.base) {
            for (T v : gt.data()) {
                norm2 += static_cast<double>(v) * static_cast<double>(v);
            }
        }
        const double norm = std::sqrt(norm2);
        if (pc.clip_norm > 0 && norm > pc.clip_norm) {
            const T s = static_cast<T>(pc.clip_norm / norm);
            for (auto& [_, gt] : grads.base) {
                for (T& v : gt.data()) {
                    v *= s;
                }
            }
        }
        adam.begin_step();
        const double lr = warmup_lr(pc.lr, pc.warmup_ratio, step, pc.steps);
        for (auto& [name, gt] : grads.base) {
            adam.update(name, params.at(name), gt, lr);
        }
        losses.push_back(grads.loss);
    }
    return losses;
}

} // namespace massive
