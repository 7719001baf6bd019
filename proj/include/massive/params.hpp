#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "config.hpp"
#include "hash.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace massive {

// Internal tensor names. Layer numbers are 1-based.
namespace names {

inline std::string layer(std::size_t l) { return "layers." + std::to_string(l) + "."; }

inline std::string embed() { return "embed.weight"; }
inline std::string lm_head() { return "lm_head"; }
inline std::string final_norm() { return "final_norm.weight"; }
inline std::string final_norm_bias() { return "final_norm.bias"; }

inline std::string attn_norm(std::size_t l) { return layer(l) + "attn_norm.weight"; }
inline std::string ffn_norm(std::size_t l) { return layer(l) + "ffn_norm.weight"; }
inline std::string post_attn_norm(std::size_t l) { return layer(l) + "post_attn_norm.weight"; }
inline std::string post_ffn_norm(std::size_t l) { return layer(l) + "post_ffn_norm.weight"; }

// LayerNorm bias that pairs with a gain name.
inline std::string bias_of(const std::string& gain) { return gain.substr(0, gain.size() - 6) + "bias"; }

inline std::string wq(std::size_t l) { return layer(l) + "attn.wq"; }
inline std::string wk(std::size_t l) { return layer(l) + "attn.wk"; }
inline std::string wv(std::size_t l) { return layer(l) + "attn.wv"; }
inline std::string wo(std::size_t l) { return layer(l) + "attn.wo"; }

inline std::string router(std::size_t l) { return layer(l) + "router"; }

inline std::string ffn_prefix(std::size_t l, std::optional<std::size_t> expert) {
    return expert ? layer(l) + "experts." + std::to_string(*expert) + "." : layer(l) + "ffn.";
}
inline std::string w_gate(std::size_t l, std::optional<std::size_t> e = {}) { return ffn_prefix(l, e) + "w_gate"; }
inline std::string w_up(std::size_t l, std::optional<std::size_t> e = {}) { return ffn_prefix(l, e) + "w_up"; }
inline std::string w_down(std::size_t l, std::optional<std::size_t> e = {}) { return ffn_prefix(l, e) + "w_down"; }

} // namespace names

enum class TensorRole { embedding, projection, norm_gain, norm_bias, router, lm_head };

struct TensorSpec {
    std::string name;
    Shape shape;
    TensorRole role;
};

// Every tensor the architecture expects, in a fixed order.
inline std::vector<TensorSpec> architecture_schema(const ModelConfig& c) {
    const std::size_t d = c.hidden_dim, dff = c.ffn_dim;
    const std::size_t qw = c.num_heads * c.head_dim, kw = c.kv_heads() * c.head_dim;
    std::vector<TensorSpec> out;
    auto norm = [&](const std::string& gain) {
        out.push_back({gain, {d}, TensorRole::norm_gain});
        if (c.norm_kind == NormKind::layernorm) {
            out.push_back({names::bias_of(gain), {d}, TensorRole::norm_bias});
        }
    };
    auto ffn = [&](std::size_t l, std::optional<std::size_t> e) {
        out.push_back({names::w_gate(l, e), {dff, d}, TensorRole::projection});
        out.push_back({names::w_up(l, e), {dff, d}, TensorRole::projection});
        out.push_back({names::w_down(l, e), {d, dff}, TensorRole::projection});
    };
    out.push_back({names::embed(), {c.vocab_size, d}, TensorRole::embedding});
    for (std::size_t l = 1; l <= c.num_layers; ++l) {
        norm(names::attn_norm(l));
        out.push_back({names::wq(l), {qw, d}, TensorRole::projection});
        out.push_back({names::wk(l), {kw, d}, TensorRole::projection});
        out.push_back({names::wv(l), {kw, d}, TensorRole::projection});
        out.push_back({names::wo(l), {d, qw}, TensorRole::projection});
        if (c.residual_variant == ResidualVariant::sandwich_ln) {
            norm(names::post_attn_norm(l));
        }
        norm(names::ffn_norm(l));
        if (c.is_moe_layer(l)) {
            out.push_back({names::router(l), {d, c.moe->num_experts}, TensorRole::router});
            for (std::size_t e = 0; e < c.moe->num_experts; ++e) {
                ffn(l, e);
            }
        } else {
            ffn(l, std::nullopt);
        }
        if (c.residual_variant == ResidualVariant::sandwich_ln) {
            norm(names::post_ffn_norm(l));
        }
    }
    norm(names::final_norm());
    out.push_back({names::lm_head(), {d, c.vocab_size}, TensorRole::lm_head});
    return out;
}

template <Scalar T>
struct FfnWeights {
    Tensor<T>& w_gate;
    Tensor<T>& w_up;
    Tensor<T>& w_down;
};

template <Scalar T>
struct ConstFfnWeights {
    const Tensor<T>& w_gate;
    const Tensor<T>& w_up;
    const Tensor<T>& w_down;
};

// Named map of every model weight. Ordered so iteration is deterministic.
template <Scalar T>
class ParameterStore {
public:
    using Map = std::map<std::string, Tensor<T>>;

    ParameterStore() = default;
    explicit ParameterStore(Map tensors) : tensors_(std::move(tensors)) {}

    bool contains(const std::string& name) const { return tensors_.count(name) != 0; }

    const Tensor<T>& at(const std::string& name) const {
        auto it = tensors_.find(name);
        if (it == tensors_.end()) {
            throw InputError("no tensor named " + name);
        }
        return it->second;
    }

    Tensor<T>& at(const std::string& name) {
        auto it = tensors_.find(name);
        if (it == tensors_.end()) {
            throw InputError("no tensor named " + name);
        }
        return it->second;
    }

    void set(const std::string& name, Tensor<T> t) { tensors_[name] = std::move(t); }
    void erase(const std::string& name) { tensors_.erase(name); }

    const Map& tensors() const noexcept { return tensors_; }
    std::size_t size() const noexcept { return tensors_.size(); }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [_, t] : tensors_) {
            n += t.numel();
        }
        return n;
    }

    FfnWeights<T> ffn(std::size_t layer, std::optional<std::size_t> expert = {}) {
        return {at(names::w_gate(layer, expert)), at(names::w_up(layer, expert)), at(names::w_down(layer, expert))};
    }
    ConstFfnWeights<T> ffn(std::size_t layer, std::optional<std::size_t> expert = {}) const {
        return {at(names::w_gate(layer, expert)), at(names::w_up(layer, expert)), at(names::w_down(layer, expert))};
    }

    // Checks that every schema tensor is present with the right shape and nothing else is.
    void validate(const ModelConfig& config) const {
        const auto schema = architecture_schema(config);
        for (const auto& spec : schema) {
            auto it = tensors_.find(spec.name);
            if (it == tensors_.end()) {
                throw CheckpointError(CheckpointFault::missing_tensor, spec.name, "tensor absent");
            }
            if (it->second.shape() != spec.shape) {
                throw CheckpointError(CheckpointFault::shape_mismatch, spec.name,
                                      "expected " + shape_string(spec.shape) + ", found " +
                                          shape_string(it->second.shape()));
            }
        }
        if (schema.size() != tensors_.size()) {
            for (const auto& [name, _] : tensors_) {
                if (std::none_of(schema.begin(), schema.end(), [&](const TensorSpec& s) { return s.name == name; })) {
                    throw CheckpointError(CheckpointFault::shape_mismatch, name, "tensor not in the architecture");
                }
            }
        }
    }

    // Digest of every name, shape and raw value; equal digests mean bitwise-equal stores.
    std::string digest() const {
        Sha256 h;
        for (const auto& [name, t] : tensors_) {
            h.update(name);
            h.update(shape_string(t.shape()));
            h.update_raw(t.data());
        }
        return h.hex();
    }

    friend bool operator==(const ParameterStore& a, const ParameterStore& b) { return a.tensors_ == b.tensors_; }

private:
    Map tensors_;
};

// Seeded random initialisation: projections ~ N(0, std²), gains 1, biases 0.
template <Scalar T>
ParameterStore<T> init_parameters(const ModelConfig& config, std::uint64_t seed, double stddev = 0.02) {
    config.validate();
    Rng rng(seed);
    ParameterStore<T> params;
    for (const auto& spec : architecture_schema(config)) {
        Tensor<T> t(spec.shape);
        switch (spec.role) {
        case TensorRole::norm_gain: t.fill(T{1}); break;
        case TensorRole::norm_bias: break;
        default:
            for (T& v : t.data()) {
                v = static_cast<T>(rng.normal(0.0, stddev));
            }
        }
        params.set(spec.name, std::move(t));
    }
    return params;
}

} // namespace massive
