#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <ostream>
#include <string>
#include <vector>

#include "model.hpp"

namespace massive {

// Runs the model and captures every tracked state at `position`.
template <Scalar T>
StateTrace<T> trace_forward(const ModelConfig& config, const ParameterStore<T>& params,
                            std::span<const std::uint32_t> ids, std::size_t position) {
    if (position >= ids.size()) {
        throw InputError("trace position " + std::to_string(position) + " outside a sequence of length " +
                         std::to_string(ids.size()));
    }
    ForwardOptions<T> opts;
    opts.trace_position = position;
    return std::move(*forward(config, params, ids, opts).trace);
}

// The bos token alone, traced at position 0.
template <Scalar T>
StateTrace<T> trace_bos(const ModelConfig& config, const ParameterStore<T>& params) {
    const std::uint32_t bos = config.bos_token_id;
    return trace_forward(config, params, std::span<const std::uint32_t>(&bos, 1), 0);
}

enum class StateKind { h_prev, ln1, attn_out, h_hat, ln2, ffn_out, h, inter };

inline constexpr std::array<StateKind, 8> all_state_kinds = {StateKind::h_prev, StateKind::ln1,  StateKind::attn_out,
                                                             StateKind::h_hat,  StateKind::ln2,  StateKind::ffn_out,
                                                             StateKind::h,      StateKind::inter};

inline const char* to_string(StateKind k) {
    switch (k) {
    case StateKind::h_prev: return "h_prev";
    case StateKind::ln1: return "ln1";
    case StateKind::attn_out: return "attn_out";
    case StateKind::h_hat: return "h_hat";
    case StateKind::ln2: return "ln2";
    case StateKind::ffn_out: return "ffn_out";
    case StateKind::h: return "h";
    case StateKind::inter: return "inter";
    }
    return "?";
}

template <Scalar T>
const Tensor<T>& state_of(const LayerTrace<T>& lt, StateKind k) {
    switch (k) {
    case StateKind::h_prev: return lt.h_prev;
    case StateKind::ln1: return lt.ln1;
    case StateKind::attn_out: return lt.attn_out;
    case StateKind::h_hat: return lt.h_hat;
    case StateKind::ln2: return lt.ln2;
    case StateKind::ffn_out: return lt.ffn_out;
    case StateKind::h: return lt.h;
    case StateKind::inter: return lt.inter;
    }
    return lt.h;
}

// Three largest absolute values (descending, zero-padded) and the median absolute value.
struct MagnitudeStats {
    double top1 = 0, top2 = 0, top3 = 0, median = 0;
};

// Median of an even-length vector is the lower middle element.
template <Scalar T>
MagnitudeStats magnitude_stats(std::span<const T> values) {
    std::vector<double> mags(values.size());
    std::transform(values.begin(), values.end(), mags.begin(), [](T v) { return std::abs(static_cast<double>(v)); });
    MagnitudeStats s;
    if (mags.empty()) {
        return s;
    }
    const std::size_t mid = (mags.size() - 1) / 2;
    std::nth_element(mags.begin(), mags.begin() + static_cast<std::ptrdiff_t>(mid), mags.end());
    s.median = mags[mid];
    const std::size_t top = std::min<std::size_t>(3, mags.size());
    std::partial_sort(mags.begin(), mags.begin() + static_cast<std::ptrdiff_t>(top), mags.end(), std::greater<>());
    s.top1 = mags[0];
    s.top2 = top > 1 ? mags[1] : 0.0;
    s.top3 = top > 2 ? mags[2] : 0.0;
    return s;
}

struct MagnitudeRow {
    std::size_t layer;
    StateKind kind;
    MagnitudeStats stats;
};

struct MagnitudeProfile {
    std::vector<MagnitudeRow> rows; // layer-major, kinds in all_state_kinds order

    const MagnitudeStats& at(std::size_t layer, StateKind kind) const {
        for (const auto& r : rows) {
            if (r.layer == layer && r.kind == kind) {
                return r.stats;
            }
        }
        throw InputError("no magnitude row for layer " + std::to_string(layer));
    }
};

template <Scalar T>
MagnitudeProfile magnitude_profile(const StateTrace<T>& trace) {
    MagnitudeProfile p;
    for (std::size_t i = 0; i < trace.layers.size(); ++i) {
        for (StateKind k : all_state_kinds) {
            p.rows.push_back({i + 1, k, magnitude_stats(state_of(trace.layers[i], k).data())});
        }
    }
    return p;
}

inline void write_profile_csv(std::ostream& os, const MagnitudeProfile& p) {
    os << "layer,state_kind,top1,top2,top3,median\n";
    os.precision(9);
    for (const auto& r : p.rows) {
        os << r.layer << ',' << to_string(r.kind) << ',' << r.stats.top1 << ',' << r.stats.top2 << ',' << r.stats.top3
           << ',' << r.stats.median << '\n';
    }
}

// Per layer: attention mass on `sink_position`, averaged over heads and over
// the query positions that can see it (queries ≥ sink_position).
template <Scalar T>
std::vector<double> attention_sink_fraction(const StateTrace<T>& trace, std::size_t sink_position) {
    if (sink_position >= trace.sequence_length) {
        throw InputError("sink position outside the sequence");
    }
    std::vector<double> out;
    for (const auto& lt : trace.layers) {
        const Tensor<T>& a = lt.attention;
        const std::size_t heads = a.dim(0), n = a.dim(1);
        double acc = 0;
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = sink_position; i < n; ++i) {
                acc += static_cast<double>(a[(h * n + i) * n + sink_position]);
            }
        }
        const double frac = acc / static_cast<double>(heads * (n - sink_position));
        out.push_back(std::clamp(frac, 0.0, 1.0));
    }
    return out;
}

} // namespace massive
