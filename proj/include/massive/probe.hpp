#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "config.hpp"
#include "trace.hpp"

namespace massive {

enum class LayerRule {
    argmax,      // layer with the largest intermediate magnitude
    first_spike, // earliest layer whose maximum is ≥ spike_factor × the median of earlier maxima
};

NLOHMANN_JSON_SERIALIZE_ENUM(LayerRule, {
                                            {LayerRule::argmax, "argmax"},
                                            {LayerRule::first_spike, "first_spike"},
                                        })

inline constexpr double default_spike_factor = 50.0;

// Intermediate state of one layer under the bos token.
template <Scalar T>
struct BosIntermediate {
    Tensor<T> inter;
    std::optional<std::size_t> expert; // router argmax on MoE layers
    Tensor<T> router_probs;
};

template <Scalar T>
std::vector<BosIntermediate<T>> bos_intermediates(const ModelConfig& config, const ParameterStore<T>& params) {
    const StateTrace<T> trace = trace_bos(config, params);
    std::vector<BosIntermediate<T>> out;
    out.reserve(trace.layers.size());
    for (const auto& lt : trace.layers) {
        out.push_back({lt.inter, lt.expert, lt.router_probs});
    }
    return out;
}

struct LayerDetection {
    std::size_t layer = 0;
    std::optional<std::size_t> expert;
    LayerRule rule = LayerRule::argmax;
    std::size_t argmax_layer = 0;
    std::optional<std::size_t> first_spike_layer;
    bool rules_agree = true;
    std::vector<double> layer_maxima; // index 0 is layer 1
};

template <Scalar T>
LayerDetection detect_layer(const std::vector<BosIntermediate<T>>& inters, LayerRule rule,
                            double spike_factor = default_spike_factor) {
    LayerDetection det;
    det.rule = rule;
    for (const auto& bi : inters) {
        double m = 0;
        for (T v : bi.inter.data()) {
            m = std::max(m, std::abs(static_cast<double>(v)));
        }
        det.layer_maxima.push_back(m);
    }
    const auto& maxima = det.layer_maxima;
    if (std::all_of(maxima.begin(), maxima.end(), [](double m) { return m == 0.0; })) {
        throw DetectionError("every intermediate state under the bos token is identically zero");
    }
    // max_element returns the first maximum, i.e. the lowest layer on ties
    det.argmax_layer = static_cast<std::size_t>(std::max_element(maxima.begin(), maxima.end()) - maxima.begin()) + 1;
    for (std::size_t l = 2; l <= maxima.size(); ++l) {
        std::vector<double> prev(maxima.begin(), maxima.begin() + static_cast<std::ptrdiff_t>(l - 1));
        const std::size_t mid = (prev.size() - 1) / 2;
        std::nth_element(prev.begin(), prev.begin() + static_cast<std::ptrdiff_t>(mid), prev.end());
        if (maxima[l - 1] >= spike_factor * prev[mid] && maxima[l - 1] > 0) {
            det.first_spike_layer = l;
            break;
        }
    }
    det.rules_agree = det.first_spike_layer == det.argmax_layer;
    det.layer = (rule == LayerRule::first_spike && det.first_spike_layer) ? *det.first_spike_layer : det.argmax_layer;
    det.expert = inters[det.layer - 1].expert;
    return det;
}

// Feeds [bos] and locates the massive layer (and, for MoE, the dominant expert).
template <Scalar T>
LayerDetection find_massive_layer(const ModelConfig& config, const ParameterStore<T>& params,
                                  LayerRule rule = LayerRule::argmax, double spike_factor = default_spike_factor) {
    return detect_layer(bos_intermediates(config, params), rule, spike_factor);
}

struct MassiveWeightReport {
    std::size_t layer = 0;
    std::optional<std::size_t> expert;
    std::size_t k = 0;
    std::vector<std::size_t> indices;
    std::vector<double> magnitudes;
    LayerRule rule = LayerRule::argmax;
    std::string config_hash;
    std::optional<std::size_t> alternate_layer; // the other rule's answer when the two disagree
};

inline void to_json(json& j, const MassiveWeightReport& r) {
    j = json{{"layer", r.layer},
             {"expert", r.expert ? json(*r.expert) : json(nullptr)},
             {"k", r.k},
             {"indices", r.indices},
             {"magnitudes", r.magnitudes},
             {"rule", r.rule},
             {"config_hash", r.config_hash}};
    if (r.alternate_layer) {
        j["alternate_layer"] = *r.alternate_layer;
    }
}

inline void from_json(const json& j, MassiveWeightReport& r) {
    try {
        j.at("layer").get_to(r.layer);
        r.expert = j.at("expert").is_null() ? std::nullopt : std::optional<std::size_t>(j.at("expert").get<std::size_t>());
        j.at("k").get_to(r.k);
        j.at("indices").get_to(r.indices);
        j.at("magnitudes").get_to(r.magnitudes);
        r.rule = j.value("rule", LayerRule::argmax);
        r.config_hash = j.value("config_hash", std::string());
        if (j.contains("alternate_layer")) {
            r.alternate_layer = j.at("alternate_layer").get<std::size_t>();
        }
    } catch (const json::exception& e) {
        throw InputError(std::string("malformed massive-weight report: ") + e.what());
    }
}

// Indices of `inter` by descending magnitude, ties to the lower index.
template <Scalar T>
std::vector<std::size_t> magnitude_order(const Tensor<T>& inter) {
    std::vector<std::size_t> idx(inter.numel());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return std::abs(inter[a]) > std::abs(inter[b]); });
    return idx;
}

template <Scalar T>
MassiveWeightReport report_from(const ModelConfig& config, const std::vector<BosIntermediate<T>>& inters,
                                std::size_t k, LayerRule rule, double spike_factor = default_spike_factor) {
    if (k < 1 || k > config.ffn_dim) {
        throw InputError("k must lie in [1, ffn_dim = " + std::to_string(config.ffn_dim) + "], got " +
                         std::to_string(k));
    }
    const LayerDetection det = detect_layer(inters, rule, spike_factor);
    const Tensor<T>& inter = inters[det.layer - 1].inter;
    MassiveWeightReport r;
    r.layer = det.layer;
    r.expert = det.expert;
    r.k = k;
    r.rule = rule;
    r.config_hash = config_hash(config);
    auto order = magnitude_order(inter);
    order.resize(k);
    r.indices = order;
    for (std::size_t i : order) {
        r.magnitudes.push_back(std::abs(static_cast<double>(inter[i])));
    }
    if (!det.rules_agree) {
        r.alternate_layer = rule == LayerRule::argmax ? det.first_spike_layer : std::optional(det.argmax_layer);
    }
    return r;
}

// Top-k massive weights: the rows of W_gate / W_up at the massive layer whose
// intermediate entries under [bos] have the k largest magnitudes.
template <Scalar T>
MassiveWeightReport find_massive_weights(const ModelConfig& config, const ParameterStore<T>& params, std::size_t k,
                                         LayerRule rule = LayerRule::argmax,
                                         double spike_factor = default_spike_factor) {
    if (k < 1 || k > config.ffn_dim) {
        throw InputError("k must lie in [1, ffn_dim = " + std::to_string(config.ffn_dim) + "], got " +
                         std::to_string(k));
    }
    return report_from(config, bos_intermediates(config, params), k, rule, spike_factor);
}

// Number of scalar weights in the top-k rows of W_gate and W_up: 2·k·d.
inline std::size_t massive_weight_count(const ModelConfig& config, std::size_t k) {
    return 2 * k * config.hidden_dim;
}

inline constexpr double router_flag_threshold = 0.9;

struct RouterLayerProfile {
    std::size_t layer = 0;
    std::vector<double> probabilities;
    std::size_t argmax = 0;
    bool flagged = false; // max probability above router_flag_threshold
};

template <Scalar T>
std::vector<RouterLayerProfile> router_profile(const ModelConfig& config, const ParameterStore<T>& params,
                                               double threshold = router_flag_threshold) {
    if (!config.moe) {
        throw ConfigError("router profile requested for a model without mixture-of-experts layers");
    }
    const StateTrace<T> trace = trace_bos(config, params);
    std::vector<RouterLayerProfile> out;
    for (std::size_t l = 1; l <= config.num_layers; ++l) {
        if (!config.is_moe_layer(l)) {
            continue;
        }
        const auto& probs = trace.layers[l - 1].router_probs;
        RouterLayerProfile p;
        p.layer = l;
        p.probabilities.assign(probs.data().begin(), probs.data().end());
        p.argmax = static_cast<std::size_t>(std::max_element(p.probabilities.begin(), p.probabilities.end()) -
                                            p.probabilities.begin());
        p.flagged = p.probabilities[p.argmax] > threshold;
        out.push_back(std::move(p));
    }
    return out;
}

} // namespace massive
