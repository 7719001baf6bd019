#pragma once

#include <cmath>
#include <map>
#include <string>

#include "params.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace massive {

// Low-rank update of one frozen projection W[out×in]: W + (alpha/rank)·B·A.
template <Scalar T>
struct LoraAdapter {
    Tensor<T> a; // [rank × in]
    Tensor<T> b; // [out × rank]
};

template <Scalar T>
struct LoraAdapterSet {
    std::size_t rank = 16;
    double alpha = 16.0;
    std::map<std::string, LoraAdapter<T>> adapters; // keyed by target tensor name

    T scaling() const { return static_cast<T>(alpha / static_cast<double>(rank)); }

    friend bool operator==(const LoraAdapterSet& x, const LoraAdapterSet& y) {
        if (x.rank != y.rank || x.alpha != y.alpha || x.adapters.size() != y.adapters.size()) {
            return false;
        }
        for (const auto& [name, ad] : x.adapters) {
            auto it = y.adapters.find(name);
            if (it == y.adapters.end() || !(it->second.a == ad.a) || !(it->second.b == ad.b)) {
                return false;
            }
        }
        return true;
    }
};

// Every attention and FFN projection; embedding, lm head and routers are not adapted.
inline std::vector<std::string> lora_targets(const ModelConfig& config) {
    std::vector<std::string> out;
    for (const auto& spec : architecture_schema(config)) {
        if (spec.role == TensorRole::projection) {
            out.push_back(spec.name);
        }
    }
    return out;
}

// A ~ U(-1/sqrt(in), 1/sqrt(in)), B = 0.
template <Scalar T>
LoraAdapterSet<T> make_lora_adapters(const ModelConfig& config, std::size_t rank, double alpha, std::uint64_t seed) {
    if (rank == 0) {
        throw ConfigError("lora rank must be positive");
    }
    LoraAdapterSet<T> set;
    set.rank = rank;
    set.alpha = alpha;
    Rng rng(seed);
    const auto schema = architecture_schema(config);
    for (const auto& spec : schema) {
        if (spec.role != TensorRole::projection) {
            continue;
        }
        const std::size_t out = spec.shape[0], in = spec.shape[1];
        LoraAdapter<T> ad{Tensor<T>({rank, in}), Tensor<T>({out, rank})};
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        for (T& v : ad.a.data()) {
            v = static_cast<T>(rng.uniform(-bound, bound));
        }
        set.adapters.emplace(spec.name, std::move(ad));
    }
    return set;
}

// W' = W + (alpha/rank)·B·A for every adapted tensor.
template <Scalar T>
ParameterStore<T> merge_adapters(const ParameterStore<T>& params, const LoraAdapterSet<T>& adapters) {
    ParameterStore<T> merged = params;
    const T s = adapters.scaling();
    for (const auto& [name, ad] : adapters.adapters) {
        Tensor<T>& w = merged.at(name);
        if (w.rank() != 2 || ad.b.dim(0) != w.dim(0) || ad.a.dim(1) != w.dim(1) || ad.a.dim(0) != ad.b.dim(1)) {
            throw DimensionError("adapter for " + name + " (" + shape_string(ad.b.shape()) + " x " +
                                 shape_string(ad.a.shape()) + ") does not fit " + shape_string(w.shape()));
        }
        const Tensor<T> delta = matmul(ad.b, ad.a);
        for (std::size_t i = 0; i < w.numel(); ++i) {
            w[i] += s * delta[i];
        }
    }
    return merged;
}

} // namespace massive
