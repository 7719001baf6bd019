#pragma once

#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "probe.hpp"

namespace massive {

enum class AttackKind { zeroing, retaining };

NLOHMANN_JSON_SERIALIZE_ENUM(AttackKind, {
                                             {AttackKind::zeroing, "zeroing"},
                                             {AttackKind::retaining, "retaining"},
                                         })

inline const char* to_string(AttackKind k) { return k == AttackKind::zeroing ? "zeroing" : "retaining"; }

// Top-k zeroing sets the k massive rows of W_gate and W_up to zero; top-k
// retaining zeroes every other row. The target is the report's layer (and
// expert, for MoE); the first k report indices are used.
struct AttackSpec {
    AttackKind kind = AttackKind::zeroing;
    std::size_t k = 0;
    MassiveWeightReport report;
    bool in_place = false;

    std::size_t layer() const { return report.layer; }
    std::optional<std::size_t> expert() const { return report.expert; }

    std::string describe() const {
        std::string s = std::string(to_string(kind)) + ":k=" + std::to_string(k) + ":layer=" + std::to_string(layer());
        if (expert()) {
            s += ":expert=" + std::to_string(*expert());
        }
        return s;
    }

    void validate(const ModelConfig& config) const {
        config.require_layer(report.layer);
        if (k > config.ffn_dim) {
            throw InputError("attack k exceeds ffn_dim");
        }
        if (k > report.indices.size()) {
            throw InputError("attack k=" + std::to_string(k) + " exceeds the " +
                             std::to_string(report.indices.size()) + " indices in the report");
        }
        for (std::size_t i : report.indices) {
            if (i >= config.ffn_dim) {
                throw InputError("report index " + std::to_string(i) + " outside ffn_dim");
            }
        }
        if (report.expert.has_value() != config.is_moe_layer(report.layer)) {
            throw InputError("attack target layer " + std::to_string(report.layer) +
                             (report.expert ? " has no experts" : " needs an expert index"));
        }
        if (report.expert && *report.expert >= config.moe->num_experts) {
            throw InputError("attack expert outside num_experts");
        }
    }
};

// Mutates `params` per `spec`; W_down and every other tensor are untouched.
template <Scalar T>
void apply_attack_in_place(const ModelConfig& config, ParameterStore<T>& params, const AttackSpec& spec) {
    spec.validate(config);
    const std::string gate = names::w_gate(spec.layer(), spec.expert());
    const std::string up = names::w_up(spec.layer(), spec.expert());
    if (!params.contains(gate) || !params.contains(up)) {
        throw InputError("attack target layer " + std::to_string(spec.layer()) + " lacks FFN weights");
    }
    const std::set<std::size_t> massive(spec.report.indices.begin(),
                                        spec.report.indices.begin() + static_cast<std::ptrdiff_t>(spec.k));
    for (const std::string& name : {gate, up}) {
        Tensor<T>& w = params.at(name);
        for (std::size_t r = 0; r < w.rows(); ++r) {
            const bool is_massive = massive.count(r) != 0;
            if (is_massive == (spec.kind == AttackKind::zeroing)) {
                auto row = w.row(r);
                std::fill(row.begin(), row.end(), T{0});
            }
        }
    }
}

// Copy-on-write unless spec.in_place; returns the attacked store.
template <Scalar T>
ParameterStore<T> apply_attack(const ModelConfig& config, ParameterStore<T>& params, const AttackSpec& spec) {
    if (spec.in_place) {
        apply_attack_in_place(config, params, spec);
        return params;
    }
    ParameterStore<T> copy = params;
    apply_attack_in_place(config, copy, spec);
    return copy;
}

template <Scalar T>
ParameterStore<T> attacked_copy(const ModelConfig& config, const ParameterStore<T>& params, const AttackSpec& spec) {
    ParameterStore<T> copy = params;
    apply_attack_in_place(config, copy, spec);
    return copy;
}

struct SweepRow {
    std::size_t k = 0;
    std::optional<double> value;
    std::string error; // set when the evaluation failed for this k
};

// Evaluates every k on a fresh attacked copy; an evaluation error is recorded
// against its row and the sweep continues.
template <Scalar T>
std::vector<SweepRow> k_sweep(const ModelConfig& config, const ParameterStore<T>& params, AttackKind kind,
                              const std::vector<std::size_t>& k_values, const MassiveWeightReport& report,
                              const std::function<double(const ParameterStore<T>&)>& eval_fn) {
    std::vector<SweepRow> rows;
    for (std::size_t k : k_values) {
        SweepRow row;
        row.k = k;
        try {
            AttackSpec spec{kind, k, report, false};
            row.value = eval_fn(attacked_copy(config, params, spec));
        } catch (const std::exception& e) {
            row.error = e.what();
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

} // namespace massive
