#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "autograd.hpp"
#include "config.hpp"
#include "lora.hpp"
#include "params.hpp"
#include "rng.hpp"

namespace massive {

template <Scalar T>
struct RoutedExpert {
    std::size_t expert = 0;
    T weight = 0; // renormalized combination weight
    Tensor<T> inter;
};

// States of one layer at the traced position. Every hidden-sized state is [d];
// `inter` is the FFN intermediate state [d_ff] (for MoE layers, the router's
// top-1 expert). `attn_branch` / `ffn_branch` are what the residual adds, which
// differ from attn_out / ffn_out only under sandwich normalisation.
template <Scalar T>
struct LayerTrace {
    Tensor<T> h_prev, ln1, attn_out, attn_branch, h_hat, ln2, ffn_out, ffn_branch, h, inter;
    std::optional<std::size_t> expert;
    std::vector<RoutedExpert<T>> routed;
    Tensor<T> router_probs;
    Tensor<T> attention; // [heads × T × T], post-softmax
};

template <Scalar T>
struct StateTrace {
    std::size_t position = 0;
    std::size_t sequence_length = 0;
    std::vector<LayerTrace<T>> layers; // index 0 is layer 1
};

template <Scalar T>
struct ForwardOptions {
    bool training = false; // enables residual dropout
    Rng* dropout_rng = nullptr;
    const LoraAdapterSet<T>* adapters = nullptr;
    bool grad_adapters = false;
    bool grad_base = false;
    std::optional<std::size_t> trace_position;
};

template <Scalar T>
struct ForwardGraph {
    using Var = typename Graph<T>::Var;
    Var logits;
    std::map<std::string, Var> base;
    std::map<std::string, std::pair<Var, Var>> lora; // (A, B)
};

namespace detail {

template <Scalar T>
Tensor<T> row_copy(const Tensor<T>& t, std::size_t r) {
    const auto row = t.row(r);
    return Tensor<T>({row.size()}, std::vector<T>(row.begin(), row.end()));
}

// Builds the decoder graph layer by layer. Kept separate from the public entry
// points so a caller can also run single layers against partial parameter
// stores (streaming probes over checkpoints too large to hold in memory).
template <Scalar T>
class ForwardBuilder {
public:
    using Var = typename Graph<T>::Var;

    ForwardBuilder(Graph<T>& g, const ModelConfig& config, const ParameterStore<T>& params,
                   const ForwardOptions<T>& opts, ForwardGraph<T>& out)
        : g_(g), c_(config), p_(params), opts_(opts), out_(out) {}

    Var embed(std::span<const std::uint32_t> ids) { return g_.embedding(leaf(names::embed()), ids); }

    Var layer(std::size_t l, Var h_prev, LayerTrace<T>* lt) {
        const std::optional<std::size_t> pos = opts_.trace_position;
        const Var ln1 = norm(names::attn_norm(l), h_prev);
        Var q = linear(ln1, names::wq(l));
        Var k = linear(ln1, names::wk(l));
        const Var v = linear(ln1, names::wv(l));
        if (c_.positional == Positional::rope) {
            q = g_.rope(q, c_.num_heads, c_.head_dim, c_.rope_theta);
            k = g_.rope(k, c_.kv_heads(), c_.head_dim, c_.rope_theta);
        }
        const Var att = g_.causal_attention(q, k, v, c_.num_heads, c_.kv_heads());
        const Var attn_out = linear(att, names::wo(l));
        const Var attn_branch = branch(attn_out, names::post_attn_norm(l));
        const Var h_hat = g_.add(h_prev, attn_branch);
        const Var ln2 = norm(names::ffn_norm(l), h_hat);

        Var ffn_out;
        Tensor<T> inter_row;
        if (c_.is_moe_layer(l)) {
            ffn_out = moe(l, ln2, lt);
        } else {
            Var inter;
            ffn_out = ffn(l, std::nullopt, ln2, &inter);
            if (lt) {
                inter_row = row_copy(g_.value(inter), *pos);
            }
        }
        const Var ffn_branch = branch(ffn_out, names::post_ffn_norm(l));
        const Var h = g_.add(h_hat, ffn_branch);
        if (!g_.value(h).all_finite()) {
            throw NumericFault("non-finite hidden state at layer " + std::to_string(l), static_cast<long>(l));
        }
        if (lt) {
            const std::size_t p = *pos;
            lt->h_prev = row_copy(g_.value(h_prev), p);
            lt->ln1 = row_copy(g_.value(ln1), p);
            lt->attn_out = row_copy(g_.value(attn_out), p);
            lt->attn_branch = row_copy(g_.value(attn_branch), p);
            lt->h_hat = row_copy(g_.value(h_hat), p);
            lt->ln2 = row_copy(g_.value(ln2), p);
            lt->ffn_out = row_copy(g_.value(ffn_out), p);
            lt->ffn_branch = row_copy(g_.value(ffn_branch), p);
            lt->h = row_copy(g_.value(h), p);
            if (!c_.is_moe_layer(l)) {
                lt->inter = std::move(inter_row);
            }
            lt->attention = g_.aux(att);
        }
        return h;
    }

    Var head(Var h) {
        const Var n = norm(names::final_norm(), h);
        const Var logits = g_.matmul(n, leaf(names::lm_head()));
        if (!g_.value(logits).all_finite()) {
            throw NumericFault("non-finite logits after the final projection (layer " +
                                   std::to_string(c_.num_layers + 1) + ")",
                               static_cast<long>(c_.num_layers + 1));
        }
        return logits;
    }

    // SiLU(x W_gateᵀ) ⊙ (x W_upᵀ), projected by W_down.
    Var ffn(std::size_t l, std::optional<std::size_t> expert, Var x, Var* inter_out) {
        const Var gate = linear(x, names::w_gate(l, expert));
        const Var up = linear(x, names::w_up(l, expert));
        const Var inter = g_.mul(g_.silu(gate), up);
        if (inter_out) {
            *inter_out = inter;
        }
        return linear(inter, names::w_down(l, expert));
    }

private:
    Var leaf(const std::string& name) {
        auto it = out_.base.find(name);
        if (it != out_.base.end()) {
            return it->second;
        }
        const Var v = g_.leaf(p_.at(name), opts_.grad_base);
        out_.base.emplace(name, v);
        return v;
    }

    Var linear(Var x, const std::string& name) {
        Var y = g_.linear(x, leaf(name));
        if (opts_.adapters) {
            auto it = opts_.adapters->adapters.find(name);
            if (it != opts_.adapters->adapters.end()) {
                const Var a = g_.leaf(it->second.a, opts_.grad_adapters);
                const Var b = g_.leaf(it->second.b, opts_.grad_adapters);
                out_.lora.emplace(name, std::make_pair(a, b));
                const Var delta = g_.linear(g_.linear(x, a), b);
                y = g_.add(y, g_.scale(delta, opts_.adapters->scaling()));
            }
        }
        return y;
    }

    Var norm(const std::string& gain, Var x) {
        if (c_.norm_kind == NormKind::layernorm) {
            return g_.layernorm(x, leaf(gain), leaf(names::bias_of(gain)), c_.norm_eps);
        }
        return g_.rmsnorm(x, leaf(gain), c_.norm_eps);
    }

    Var branch(Var out, const std::string& post_norm) {
        switch (c_.residual_variant) {
        case ResidualVariant::pre_ln: return out;
        case ResidualVariant::residual_dropout:
            if (opts_.training && c_.residual_dropout > 0) {
                if (!opts_.dropout_rng) {
                    throw ContractError("training with residual dropout needs a dropout generator");
                }
                return g_.dropout(out, c_.residual_dropout, *opts_.dropout_rng);
            }
            return out;
        case ResidualVariant::sandwich_ln: return norm(post_norm, out);
        }
        return out;
    }

    Var moe(std::size_t l, Var x, LayerTrace<T>* lt) {
        const std::size_t experts = c_.moe->num_experts;
        const Var probs = g_.softmax_lastdim(g_.matmul(x, leaf(names::router(l))));
        std::vector<Var> outs(experts), inters(experts);
        for (std::size_t e = 0; e < experts; ++e) {
            outs[e] = ffn(l, e, x, &inters[e]);
        }
        if (lt) {
            const std::size_t p = *opts_.trace_position;
            lt->router_probs = row_copy(g_.value(probs), p);
            const auto top = Graph<T>::top_indices(lt->router_probs.data(), c_.moe->top_t);
            T s = 0;
            for (std::size_t e : top) {
                s += lt->router_probs[e];
            }
            for (std::size_t e : top) {
                lt->routed.push_back({e, lt->router_probs[e] / s, row_copy(g_.value(inters[e]), p)});
            }
            lt->expert = top.front();
            lt->inter = lt->routed.front().inter;
        }
        return g_.moe_combine(outs, probs, c_.moe->top_t);
    }

    Graph<T>& g_;
    const ModelConfig& c_;
    const ParameterStore<T>& p_;
    const ForwardOptions<T>& opts_;
    ForwardGraph<T>& out_;
};

inline void check_token_ids(const ModelConfig& config, std::span<const std::uint32_t> ids) {
    if (ids.empty()) {
        throw InputError("forward needs at least one token");
    }
    for (std::size_t t = 0; t < ids.size(); ++t) {
        if (ids[t] >= config.vocab_size) {
            throw InputError("token id " + std::to_string(ids[t]) + " at position " + std::to_string(t) +
                             " is not below vocab_size " + std::to_string(config.vocab_size));
        }
    }
}

} // namespace detail

// Records the full decoder into `g`; returns the logits node and the leaves it
// created. `trace`, when given, receives per-layer states at opts.trace_position.
template <Scalar T>
ForwardGraph<T> build_forward(Graph<T>& g, const ModelConfig& config, const ParameterStore<T>& params,
                              std::span<const std::uint32_t> ids, const ForwardOptions<T>& opts = {},
                              StateTrace<T>* trace = nullptr) {
    detail::check_token_ids(config, ids);
    if (trace && (!opts.trace_position || *opts.trace_position >= ids.size())) {
        throw InputError("trace position outside the sequence");
    }
    ForwardGraph<T> out;
    detail::ForwardBuilder<T> b(g, config, params, opts, out);
    if (trace) {
        trace->position = *opts.trace_position;
        trace->sequence_length = ids.size();
        trace->layers.assign(config.num_layers, {});
    }
    auto h = b.embed(ids);
    for (std::size_t l = 1; l <= config.num_layers; ++l) {
        h = b.layer(l, h, trace ? &trace->layers[l - 1] : nullptr);
    }
    out.logits = b.head(h);
    return out;
}

template <Scalar T>
struct ForwardResult {
    Tensor<T> logits; // [T × V]
    std::optional<StateTrace<T>> trace;
};

template <Scalar T>
ForwardResult<T> forward(const ModelConfig& config, const ParameterStore<T>& params,
                         std::span<const std::uint32_t> ids, const ForwardOptions<T>& opts = {}) {
    Graph<T> g;
    ForwardResult<T> result;
    StateTrace<T> trace;
    const auto fg = build_forward(g, config, params, ids, opts, opts.trace_position ? &trace : nullptr);
    result.logits = g.value(fg.logits);
    if (opts.trace_position) {
        result.trace = std::move(trace);
    }
    return result;
}

template <Scalar T>
Tensor<T> logits(const ModelConfig& config, const ParameterStore<T>& params, std::span<const std::uint32_t> ids,
                 const LoraAdapterSet<T>* adapters = nullptr) {
    ForwardOptions<T> opts;
    opts.adapters = adapters;
    return forward(config, params, ids, opts).logits;
}

template <Scalar T>
struct RouteResult {
    Tensor<T> probabilities;          // [num_experts]
    std::vector<std::size_t> top;     // descending probability, ties to the lower index
};

// softmax(x · router) and its top_t experts.
template <Scalar T>
RouteResult<T> moe_route(const Tensor<T>& router, const Tensor<T>& x, std::size_t top_t = 2) {
    detail::require_matrix(router.shape(), "moe_route");
    if (router.dim(1) < 2) {
        throw ConfigError("routing needs at least two experts");
    }
    if (x.numel() != router.dim(0)) {
        throw DimensionError("router " + shape_string(router.shape()) + " vs input " + shape_string(x.shape()));
    }
    const Tensor<T> row = x.reshaped({1, x.numel()});
    RouteResult<T> r;
    r.probabilities = softmax_lastdim(matmul(row, router)).reshaped({router.dim(1)});
    r.top = Graph<T>::top_indices(r.probabilities.data(), top_t);
    return r;
}

template <Scalar T>
struct FfnIntermediate {
    Tensor<T> inter; // dense layer, or the top-1 routed expert
    std::vector<RoutedExpert<T>> routed;
    Tensor<T> router_probs;
};

// Intermediate state SiLU(W_gate x) ⊙ (W_up x) of `layer` for a normalized input x[d].
template <Scalar T>
FfnIntermediate<T> ffn_intermediate(const ModelConfig& config, const ParameterStore<T>& params, std::size_t layer,
                                    const Tensor<T>& x) {
    config.require_layer(layer);
    if (x.numel() != config.hidden_dim) {
        throw DimensionError("ffn input must have hidden_dim entries, got " + shape_string(x.shape()));
    }
    const Tensor<T> row = x.reshaped({1, x.numel()});
    auto inter_of = [&](std::optional<std::size_t> expert) {
        const auto w = params.ffn(layer, expert);
        return mul(silu(matmul_transposed(row, w.w_gate)), matmul_transposed(row, w.w_up)).reshaped({config.ffn_dim});
    };
    FfnIntermediate<T> out;
    if (!config.is_moe_layer(layer)) {
        out.inter = inter_of(std::nullopt);
        return out;
    }
    auto route = moe_route(params.at(names::router(layer)), x, config.moe->top_t);
    T s = 0;
    for (std::size_t e : route.top) {
        s += route.probabilities[e];
    }
    for (std::size_t e : route.top) {
        out.routed.push_back({e, route.probabilities[e] / s, inter_of(e)});
    }
    out.inter = out.routed.front().inter;
    out.router_probs = std::move(route.probabilities);
    return out;
}

} // namespace massive
