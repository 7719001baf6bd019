#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "trace.hpp"

namespace massive {

// What was planted, for checking a detector against.
struct PlantedSite {
    std::size_t layer = 0;
    std::optional<std::size_t> expert;
    std::vector<std::size_t> rows;
};

// FFN input (ln2) at `layer` under the bos token; planting at `layer` cannot
// change it because only later computations read the planted rows.
template <Scalar T>
Tensor<T> bos_ffn_input(const ModelConfig& config, const ParameterStore<T>& params, std::size_t layer) {
    config.require_layer(layer);
    const StateTrace<T> trace = trace_bos(config, params);
    return trace.layers[layer - 1].ln2;
}

// Scales rows of W_gate and W_up at (layer, expert) by `scale`, flipping each
// row's sign so both projections of the bos FFN input are positive. On MoE
// layers the router column of `expert` is pushed toward that input so the
// expert becomes the bos token's top-1 choice.
template <Scalar T>
PlantedSite plant_massive_rows(const ModelConfig& config, ParameterStore<T>& params, std::size_t layer,
                               const std::vector<std::size_t>& rows, double scale = 1000.0,
                               std::optional<std::size_t> expert = std::nullopt, double router_boost = 10.0) {
    config.require_layer(layer);
    if (expert.has_value() != config.is_moe_layer(layer)) {
        throw InputError("planting at layer " + std::to_string(layer) +
                         (expert ? " cannot name an expert" : " needs an expert"));
    }
    const Tensor<T> x = bos_ffn_input(config, params, layer);
    Tensor<T>& gate = params.at(names::w_gate(layer, expert));
    Tensor<T>& up = params.at(names::w_up(layer, expert));
    for (std::size_t r : rows) {
        if (r >= config.ffn_dim) {
            throw InputError("planted row " + std::to_string(r) + " outside ffn_dim");
        }
        for (Tensor<T>* w : {&gate, &up}) {
            auto row = w->row(r);
            const T s = detail::dot(row.data(), x.ptr(), row.size()) < 0 ? static_cast<T>(-scale)
                                                                        : static_cast<T>(scale);
            for (T& v : row) {
                v *= s;
            }
        }
    }
    if (expert) {
        Tensor<T>& router = params.at(names::router(layer));
        double norm = 0;
        for (T v : x.data()) {
            norm += static_cast<double>(v) * static_cast<double>(v);
        }
        norm = std::sqrt(norm);
        for (std::size_t i = 0; i < config.hidden_dim; ++i) {
            router.at(i, *expert) += static_cast<T>(router_boost * static_cast<double>(x[i]) / norm);
        }
    }
    return {layer, expert, rows};
}

// Rows whose gate and up projections of the bos FFN input are both at least
// `min_fraction` of their root-mean-square; planting there gives a clean gap.
template <Scalar T>
std::vector<std::size_t> well_conditioned_rows(const ModelConfig& config, const ParameterStore<T>& params,
                                               std::size_t layer, std::optional<std::size_t> expert,
                                               double min_fraction = 0.5) {
    const Tensor<T> x = bos_ffn_input(config, params, layer);
    const Tensor<T>& gate = params.at(names::w_gate(layer, expert));
    const Tensor<T>& up = params.at(names::w_up(layer, expert));
    std::vector<double> g(config.ffn_dim), u(config.ffn_dim);
    double gs = 0, us = 0;
    for (std::size_t r = 0; r < config.ffn_dim; ++r) {
        g[r] = std::abs(static_cast<double>(detail::dot(gate.row(r).data(), x.ptr(), x.numel())));
        u[r] = std::abs(static_cast<double>(detail::dot(up.row(r).data(), x.ptr(), x.numel())));
        gs += g[r] * g[r];
        us += u[r] * u[r];
    }
    const double grms = std::sqrt(gs / static_cast<double>(config.ffn_dim));
    const double urms = std::sqrt(us / static_cast<double>(config.ffn_dim));
    std::vector<std::size_t> out;
    for (std::size_t r = 0; r < config.ffn_dim; ++r) {
        if (g[r] >= min_fraction * grms && u[r] >= min_fraction * urms) {
            out.push_back(r);
        }
    }
    return out;
}

} // namespace massive
