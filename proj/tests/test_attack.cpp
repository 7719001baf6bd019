#include <catch_amalgamated.hpp>

#include <massive/attack.hpp>
#include <massive/eval.hpp>

#include "support/fixtures.hpp"
#include "support/random_model.hpp"

using namespace massive;

namespace {

// Names of tensors that differ, with the rows that differ in each.
template <class T>
std::map<std::string, std::set<std::size_t>> changed_rows(const ParameterStore<T>& a, const ParameterStore<T>& b) {
    std::map<std::string, std::set<std::size_t>> out;
    REQUIRE(a.size() == b.size());
    for (const auto& [name, ta] : a.tensors()) {
        const auto& tb = b.at(name);
        REQUIRE(ta.shape() == tb.shape());
        for (std::size_t i = 0; i < ta.numel(); ++i) {
            if (std::memcmp(&ta[i], &tb[i], sizeof(T)) != 0) out[name].insert(i / ta.cols());
        }
    }
    return out;
}

bool all_zero(const Tensor<float>& t) {
    return std::all_of(t.data().begin(), t.data().end(), [](float v) { return v == 0.0f; });
}

} // namespace

TEST_CASE("trivial attacks leave the store bitwise unchanged") {
    for (std::uint64_t seed = 1; seed <= 6; ++seed) {
        auto fx = support::planted_fixture(seed);
        const auto report = find_massive_weights(fx.config, fx.params, fx.config.ffn_dim);
        const auto z = attacked_copy(fx.config, fx.params, AttackSpec{AttackKind::zeroing, 0, report});
        CHECK(changed_rows(fx.params, z).empty());
        const auto r = attacked_copy(fx.config, fx.params, AttackSpec{AttackKind::retaining, fx.config.ffn_dim, report});
        CHECK(changed_rows(fx.params, r).empty());
    }
}

TEST_CASE("attacks touch only the target rows of W_gate and W_up") {
    for (std::uint64_t seed = 1; seed <= 12; ++seed) {
        auto fx = support::planted_fixture(seed, seed % 3 == 0);
        const std::size_t k = fx.site.rows.size();
        const auto report = find_massive_weights(fx.config, fx.params, k);
        const std::string gate = names::w_gate(report.layer, report.expert);
        const std::string up = names::w_up(report.layer, report.expert);
        const std::set<std::size_t> target(report.indices.begin(), report.indices.end());

        const auto z = attacked_copy(fx.config, fx.params, AttackSpec{AttackKind::zeroing, k, report});
        const auto dz = changed_rows(fx.params, z);
        for (const auto& [name, rows] : dz) {
            CHECK((name == gate || name == up));
            for (std::size_t r : rows) CHECK(target.count(r) == 1);
        }
        CHECK(dz.count(gate) == 1);
        for (std::size_t r : target) {
            for (float v : z.at(gate).row(r)) CHECK(v == 0.0f);
            for (float v : z.at(up).row(r)) CHECK(v == 0.0f);
        }

        const auto rt = attacked_copy(fx.config, fx.params, AttackSpec{AttackKind::retaining, k, report});
        for (const auto& [name, rows] : changed_rows(fx.params, rt)) {
            CHECK((name == gate || name == up));
            for (std::size_t r : rows) CHECK(target.count(r) == 0);
        }
        CHECK(rt.at(names::w_down(report.layer, report.expert)) == fx.params.at(names::w_down(report.layer, report.expert)));

        SECTION("zeroing after retaining empties both matrices") {
            auto both = attacked_copy(fx.config, rt, AttackSpec{AttackKind::zeroing, k, report});
            CHECK(all_zero(both.at(gate)));
            CHECK(all_zero(both.at(up)));
        }
        SECTION("attacks are idempotent") {
            CHECK(attacked_copy(fx.config, z, AttackSpec{AttackKind::zeroing, k, report}) == z);
            CHECK(attacked_copy(fx.config, rt, AttackSpec{AttackKind::retaining, k, report}) == rt);
        }
    }
}

TEST_CASE("zeroed intermediate entries are exactly zero for any input") {
    Rng rng(77);
    for (std::uint64_t seed = 1; seed <= 8; ++seed) {
        auto fx = support::planted_fixture(seed, seed % 2 == 0);
        const auto report = find_massive_weights(fx.config, fx.params, fx.site.rows.size());
        const auto z = attacked_copy(fx.config, fx.params, AttackSpec{AttackKind::zeroing, report.k, report});
        for (int trial = 0; trial < 5; ++trial) {
            Tensor<float> x({fx.config.hidden_dim});
            for (float& v : x.data()) v = static_cast<float>(rng.normal(0.0, 10.0));
            const auto fi = ffn_intermediate(fx.config, z, report.layer, x);
            if (report.expert) {
                for (const auto& re : fi.routed) {
                    if (re.expert != *report.expert) continue;
                    for (std::size_t i : report.indices) CHECK(re.inter[i] == 0.0f);
                }
            } else {
                for (std::size_t i : report.indices) CHECK(fi.inter[i] == 0.0f);
            }
        }
        // and along a real forward pass
        const auto ids = support::random_ids(rng, 6, fx.config.vocab_size);
        for (std::size_t pos = 0; pos < ids.size(); ++pos) {
            const auto t = trace_forward<float>(fx.config, z, ids, pos);
            const auto& lt = t.layers[report.layer - 1];
            if (report.expert && lt.expert != report.expert) continue;
            for (std::size_t i : report.indices) CHECK(lt.inter[i] == 0.0f);
        }
    }
}

TEST_CASE("copy-on-write by default, in place on request") {
    auto fx = support::planted_fixture(5);
    const auto original = fx.params;
    const auto report = find_massive_weights(fx.config, fx.params, 1);
    AttackSpec spec{AttackKind::zeroing, 1, report};
    const auto attacked = apply_attack(fx.config, fx.params, spec);
    CHECK(fx.params == original);
    CHECK_FALSE(attacked == original);
    spec.in_place = true;
    apply_attack(fx.config, fx.params, spec);
    CHECK(fx.params == attacked);
    CHECK(spec.describe().rfind("zeroing:k=1:layer=", 0) == 0);
}

TEST_CASE("invalid attack specs") {
    auto fx = support::planted_fixture(2);
    auto report = find_massive_weights(fx.config, fx.params, 2);
    CHECK_THROWS_AS(attacked_copy(fx.config, fx.params, AttackSpec{AttackKind::zeroing, 3, report}), InputError);
    auto bad = report;
    bad.indices[0] = fx.config.ffn_dim;
    CHECK_THROWS_AS(attacked_copy(fx.config, fx.params, AttackSpec{AttackKind::zeroing, 1, bad}), InputError);
    bad = report;
    bad.layer = fx.config.num_layers + 1;
    CHECK_THROWS(attacked_copy(fx.config, fx.params, AttackSpec{AttackKind::zeroing, 1, bad}));
    auto missing = fx.params;
    missing.erase(names::w_gate(report.layer, report.expert));
    CHECK_THROWS_AS(attacked_copy(fx.config, missing, AttackSpec{AttackKind::zeroing, 1, report}), InputError);
}

TEST_CASE("k sweep") {
    auto fx = support::planted_fixture(3);
    const auto& c = fx.config;
    const auto report = find_massive_weights(c, fx.params, 5);
    Rng rng(4);
    auto ids = support::random_ids(rng, 40, c.vocab_size);
    ids[0] = c.bos_token_id;
    const std::function<double(const ParameterStore<float>&)> ppl = [&](const ParameterStore<float>& p) {
        return perplexity<float>(c, p, ids, 16, 8).value;
    };
    const auto rows = k_sweep<float>(c, fx.params, AttackKind::zeroing, {0, 1, 5}, report, ppl);
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].value == ppl(fx.params));
    CHECK(rows[1].value.has_value());

    SECTION("failures are recorded per row") {
        const auto r = k_sweep<float>(c, fx.params, AttackKind::zeroing, {0, 9, 1}, report, ppl);
        REQUIRE(r.size() == 3);
        CHECK(r[0].value);
        CHECK_FALSE(r[1].value);
        CHECK_FALSE(r[1].error.empty());
        CHECK(r[2].value);
    }
}

TEST_CASE("zeroing the planted row moves logits far more than a random row") {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const auto gap = support::planted_logit_gap(seed);
        INFO("seed " << seed << " rows " << gap.planted_row << "/" << gap.random_row);
        CHECK(gap.massive_delta > 1e-2);
        CHECK(gap.random_delta < 1e-4);
        CHECK(gap.massive_delta >= 100.0 * gap.random_delta);
    }
}
