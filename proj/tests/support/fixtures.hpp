#pragma once

#include <algorithm>
#include <set>

#include <massive/attack.hpp>
#include <massive/plant.hpp>
#include <massive/probe.hpp>

#include "random_model.hpp"

namespace support {

struct PlantedFixture {
    massive::ModelConfig config;
    massive::ParameterStore<float> params;
    massive::PlantedSite site;
};

// Random small decoder with 1..5 rows of one FFN (or one expert) scaled ×1000.
inline PlantedFixture planted_fixture(std::uint64_t seed, bool force_moe = false) {
    massive::Rng rng(seed);
    massive::ModelConfig c;
    c.num_layers = 2 + rng.below(3);
    c.num_heads = 2;
    c.head_dim = 4 + 2 * rng.below(5);
    c.hidden_dim = c.num_heads * c.head_dim;
    c.ffn_dim = 16 + rng.below(33);
    c.vocab_size = 32 + rng.below(64);
    c.bos_token_id = static_cast<std::uint32_t>(rng.below(c.vocab_size));
    c.residual_variant = static_cast<massive::ResidualVariant>(rng.below(3));
    const bool moe = force_moe || rng.below(3) == 0;
    const std::size_t layer = 1 + rng.below(c.num_layers);
    if (moe) {
        massive::MoeConfig m;
        m.num_experts = 2 + rng.below(4);
        m.top_t = 2;
        for (std::size_t l = 1; l <= c.num_layers; ++l) {
            if (l == layer || rng.below(2)) m.layers.insert(l);
        }
        c.moe = m;
    }
    c.validate();
    auto params = massive::init_parameters<float>(c, seed * 7 + 3);
    std::optional<std::size_t> expert;
    if (moe) expert = rng.below(c.moe->num_experts);
    auto rows = massive::well_conditioned_rows(c, params, layer, expert);
    rng.shuffle(rows.begin(), rows.end());
    rows.resize(std::min<std::size_t>(rows.size(), 1 + rng.below(5)));
    auto site = massive::plant_massive_rows(c, params, layer, rows, 1000.0, expert);
    return {c, std::move(params), site};
}

inline bool recovered(const massive::MassiveWeightReport& r, const massive::PlantedSite& s) {
    const std::set<std::size_t> got(r.indices.begin(), r.indices.end());
    const std::set<std::size_t> want(s.rows.begin(), s.rows.end());
    return r.layer == s.layer && r.expert == s.expert && got == want;
}

struct LogitGap {
    double massive_delta = 0; // L∞ logit change from zeroing the planted row
    double random_delta = 0;  // same for a random non-planted row
    std::size_t planted_row = 0, random_row = 0;
};

inline double max_abs_diff(const massive::Tensor<float>& a, const massive::Tensor<float>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
    return m;
}

// Pre-ln model with one row planted at layer 1; compares zeroing that row
// against zeroing a random other row, over bos-led random sequences.
inline LogitGap planted_logit_gap(std::uint64_t seed) {
    using namespace massive;
    ModelConfig c;
    c.vocab_size = 64, c.hidden_dim = 32, c.ffn_dim = 64, c.num_layers = 3, c.num_heads = 4, c.head_dim = 8;
    c.bos_token_id = 0;
    c.validate();
    // small weights keep every unplanted intermediate entry tiny
    auto p = init_parameters<float>(c, seed, 0.003);
    Rng rng(seed + 1);
    const auto good = well_conditioned_rows(c, p, 1, std::nullopt);
    const std::size_t planted = good[rng.below(good.size())];
    plant_massive_rows(c, p, 1, {planted});
    std::size_t other = planted;
    while (other == planted) other = rng.below(c.ffn_dim);

    MassiveWeightReport r = find_massive_weights(c, p, 1);
    r.indices = {planted};
    const auto zero_planted = attacked_copy(c, p, AttackSpec{AttackKind::zeroing, 1, r});
    r.indices = {other};
    const auto zero_other = attacked_copy(c, p, AttackSpec{AttackKind::zeroing, 1, r});

    LogitGap gap{0, 0, planted, other};
    for (int s = 0; s < 4; ++s) {
        std::vector<std::uint32_t> ids{c.bos_token_id};
        for (int t = 0; t < 7; ++t) ids.push_back(static_cast<std::uint32_t>(1 + rng.below(c.vocab_size - 1)));
        const auto base = logits(c, p, ids);
        gap.massive_delta = std::max(gap.massive_delta, max_abs_diff(base, logits(c, zero_planted, ids)));
        gap.random_delta = std::max(gap.random_delta, max_abs_diff(base, logits(c, zero_other, ids)));
    }
    return gap;
}

} // namespace support
