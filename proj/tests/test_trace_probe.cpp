#include <catch_amalgamated.hpp>

#include <massive/plant.hpp>
#include <massive/probe.hpp>

#include "support/fixtures.hpp"
#include "support/naive_forward.hpp"
#include "support/random_model.hpp"

using namespace massive;

namespace {

ModelConfig dense_config(std::size_t layers = 4, ResidualVariant v = ResidualVariant::pre_ln) {
    ModelConfig c;
    c.vocab_size = 41, c.hidden_dim = 16, c.ffn_dim = 24, c.num_layers = layers, c.num_heads = 2, c.head_dim = 8;
    c.bos_token_id = 1;
    c.residual_variant = v;
    c.validate();
    return c;
}

// Per-layer |inter| maxima under [bos] from the naive oracle; MoE layers use
// the router's argmax expert.
template <class T>
std::vector<double> oracle_layer_maxima(const ModelConfig& c, const ParameterStore<T>& p) {
    std::vector<double> maxima(c.num_layers, 0.0);
    oracle::forward(c, p, {c.bos_token_id}, [&](std::size_t l, const oracle::Mat& x) {
        std::optional<std::size_t> e;
        if (c.is_moe_layer(l)) {
            const auto logits = oracle::right_multiply(x, p.at(names::router(l)))[0];
            e = static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
        }
        const auto g = oracle::project(x, p.at(names::w_gate(l, e)))[0];
        const auto u = oracle::project(x, p.at(names::w_up(l, e)))[0];
        for (std::size_t i = 0; i < g.size(); ++i) {
            maxima[l - 1] = std::max(maxima[l - 1], std::abs(oracle::silu(g[i]) * u[i]));
        }
    });
    return maxima;
}

} // namespace

TEST_CASE("magnitude statistics") {
    SECTION("documented example") {
        const std::vector<float> v{1, -4, 2};
        const auto s = magnitude_stats<float>(v);
        CHECK(s.top1 == 4);
        CHECK(s.top2 == 2);
        CHECK(s.top3 == 1);
        CHECK(s.median == 2);
    }
    SECTION("all-zero state") {
        const std::vector<double> v(10, 0.0);
        const auto s = magnitude_stats<double>(v);
        CHECK(s.top1 == 0);
        CHECK(s.top3 == 0);
        CHECK(s.median == 0);
    }
    SECTION("even length takes the lower middle") {
        const std::vector<double> v{4, -1, 3, 2};
        CHECK(magnitude_stats<double>(v).median == 2);
    }
    SECTION("random state matches a full sort") {
        Rng rng(5);
        std::vector<double> v(64);
        for (auto& x : v) x = rng.normal();
        std::vector<double> sorted(v.size());
        std::transform(v.begin(), v.end(), sorted.begin(), [](double x) { return std::abs(x); });
        std::sort(sorted.begin(), sorted.end());
        const auto s = magnitude_stats<double>(v);
        CHECK(s.top1 == sorted[63]);
        CHECK(s.top2 == sorted[62]);
        CHECK(s.top3 == sorted[61]);
        CHECK(s.median == sorted[31]);
    }
}

TEST_CASE("profile of every layer matches a full sort of each state") {
    Rng rng(17);
    for (int trial = 0; trial < 4; ++trial) {
        const auto c = support::random_config(rng, static_cast<ResidualVariant>(trial % 3));
        const auto p = support::random_params<float>(c, 100 + trial);
        const auto ids = support::random_ids(rng, 5, c.vocab_size);
        const auto trace = trace_forward<float>(c, p, ids, 3);
        const auto profile = magnitude_profile(trace);
        REQUIRE(profile.rows.size() == c.num_layers * all_state_kinds.size());
        for (std::size_t l = 1; l <= c.num_layers; ++l) {
            for (StateKind k : all_state_kinds) {
                const auto& t = state_of(trace.layers[l - 1], k);
                std::vector<double> m;
                for (float x : t.data()) m.push_back(std::abs(static_cast<double>(x)));
                std::sort(m.begin(), m.end(), std::greater<>());
                const auto& s = profile.at(l, k);
                CHECK(s.top1 == m[0]);
                CHECK(s.top2 == m[1]);
                CHECK(s.top3 == m[2]);
                CHECK(s.median == m[m.size() / 2]);
                CHECK(s.top1 >= s.top2);
                CHECK(s.top2 >= s.top3);
            }
        }
    }
}

TEST_CASE("profile CSV layout") {
    const auto c = dense_config(2);
    const auto p = init_parameters<float>(c, 1);
    std::ostringstream os;
    write_profile_csv(os, magnitude_profile(trace_bos(c, p)));
    const std::string csv = os.str();
    CHECK(csv.rfind("layer,state_kind,top1,top2,top3,median\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 2 * 8);
    CHECK(csv.find("\n2,inter,") != std::string::npos);
}

TEST_CASE("trace shapes and position checks") {
    const auto c = dense_config(3);
    const auto p = init_parameters<float>(c, 2);
    const auto t = trace_bos(c, p);
    CHECK(t.sequence_length == 1);
    CHECK(t.position == 0);
    REQUIRE(t.layers.size() == 3);
    for (const auto& lt : t.layers) {
        CHECK(lt.h.numel() == c.hidden_dim);
        CHECK(lt.inter.numel() == c.ffn_dim);
        CHECK(lt.attention.shape() == Shape{c.num_heads, 1, 1});
    }
    const std::vector<std::uint32_t> ids{1, 2};
    CHECK_THROWS_AS(trace_forward<float>(c, p, ids, 2), InputError);
}

TEST_CASE("tracing does not change logits") {
    Rng rng(23);
    for (int trial = 0; trial < 6; ++trial) {
        const auto c = support::random_config(rng, static_cast<ResidualVariant>(trial % 3));
        const auto p = support::random_params<float>(c, 200 + trial);
        const auto ids = support::random_ids(rng, 1 + rng.below(10), c.vocab_size);
        ForwardOptions<float> traced;
        traced.trace_position = ids.size() - 1;
        const auto a = forward<float>(c, p, ids);
        const auto b = forward<float>(c, p, ids, traced);
        CHECK(a.logits == b.logits);
        CHECK(b.trace.has_value());
    }
}

TEST_CASE("pre-ln residual algebra holds at every layer") {
    Rng rng(29);
    for (int trial = 0; trial < 6; ++trial) {
        const auto c = support::random_config(rng, ResidualVariant::pre_ln);
        const auto p = support::random_params<float>(c, 300 + trial);
        const auto ids = support::random_ids(rng, 4, c.vocab_size);
        const auto t = trace_forward<float>(c, p, ids, 2);
        for (const auto& lt : t.layers) {
            for (std::size_t i = 0; i < c.hidden_dim; ++i) {
                CHECK(std::abs(lt.h[i] - lt.h_hat[i] - lt.ffn_out[i]) <= 1e-5);
                CHECK(std::abs(lt.h_hat[i] - lt.h_prev[i] - lt.attn_out[i]) <= 1e-5);
            }
        }
    }
}

TEST_CASE("attention sink fraction") {
    SECTION("a single token takes all attention") {
        const auto c = dense_config(3);
        const auto p = init_parameters<float>(c, 3);
        for (double f : attention_sink_fraction(trace_bos(c, p), 0)) CHECK(f == 1.0);
    }
    SECTION("uniform causal attention over four tokens") {
        auto c = dense_config(2);
        auto p = init_parameters<float>(c, 4);
        // zero queries give equal scores, so each row is uniform over its prefix
        for (std::size_t l = 1; l <= c.num_layers; ++l) p.at(names::wq(l)).fill(0.0f);
        const std::vector<std::uint32_t> ids{1, 5, 7, 9};
        const auto fr = attention_sink_fraction(trace_forward<float>(c, p, ids, 0), 0);
        const double expected = (1.0 + 1.0 / 2 + 1.0 / 3 + 1.0 / 4) / 4;
        for (double f : fr) CHECK(f == Catch::Approx(expected).margin(1e-6));
        CHECK(expected == Catch::Approx(0.5208).margin(1e-4));
    }
    SECTION("always a fraction") {
        Rng rng(31);
        const auto c = support::random_config(rng, ResidualVariant::sandwich_ln);
        const auto p = support::random_params<float>(c, 5, 1.0);
        const auto ids = support::random_ids(rng, 9, c.vocab_size);
        const auto t = trace_forward<float>(c, p, ids, 8);
        for (std::size_t s = 0; s < ids.size(); ++s)
            for (double f : attention_sink_fraction(t, s)) CHECK((f >= 0.0 && f <= 1.0));
        CHECK_THROWS_AS(attention_sink_fraction(t, ids.size()), InputError);
    }
}

TEST_CASE("planted layer dominates the other layers' intermediates") {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        const auto fx = support::planted_fixture(seed);
        const auto t = trace_bos(fx.config, fx.params);
        const auto prof = magnitude_profile(t);
        std::vector<double> others;
        for (std::size_t l = 1; l <= fx.config.num_layers; ++l)
            if (l != fx.site.layer) others.push_back(prof.at(l, StateKind::inter).top1);
        std::sort(others.begin(), others.end());
        const double median = others[(others.size() - 1) / 2];
        CHECK(prof.at(fx.site.layer, StateKind::inter).top1 >= 100.0 * median);
    }
}

TEST_CASE("massive layer detection") {
    SECTION("layer three of four") {
        const auto c = dense_config(4);
        auto p = init_parameters<float>(c, 6);
        auto rows = well_conditioned_rows(c, p, 3, std::nullopt);
        rows.resize(2);
        plant_massive_rows(c, p, 3, rows);
        const auto det = find_massive_layer(c, p);
        CHECK(det.layer == 3);
        CHECK_FALSE(det.expert);
        CHECK(det.first_spike_layer == 3u);
        CHECK(det.rules_agree);
    }
    SECTION("random weights agree with an exhaustive per-layer maximum") {
        Rng rng(13);
        for (int trial = 0; trial < 8; ++trial) {
            const auto c = support::random_config(rng, static_cast<ResidualVariant>(trial % 3));
            const auto p = support::random_params<double>(c, 13 + trial, 0.5);
            const auto maxima = oracle_layer_maxima(c, p);
            const auto det = find_massive_layer(c, p);
            REQUIRE(det.layer_maxima.size() == maxima.size());
            for (std::size_t l = 0; l < maxima.size(); ++l)
                CHECK(det.layer_maxima[l] == Catch::Approx(maxima[l]).epsilon(1e-9));
            CHECK(det.layer == static_cast<std::size_t>(std::max_element(maxima.begin(), maxima.end()) - maxima.begin()) + 1);
        }
    }
    SECTION("all-zero intermediates are a detection error") {
        const auto c = dense_config(2);
        auto p = init_parameters<float>(c, 7);
        for (std::size_t l = 1; l <= 2; ++l) p.at(names::w_up(l)).fill(0.0f);
        CHECK_THROWS_AS(find_massive_layer(c, p), DetectionError);
        CHECK_THROWS_AS(find_massive_weights(c, p, 1), DetectionError);
    }
    SECTION("first-spike rule can disagree with argmax") {
        const auto c = dense_config(4);
        auto p = init_parameters<float>(c, 8);
        auto r2 = well_conditioned_rows(c, p, 2, std::nullopt);
        plant_massive_rows(c, p, 2, {r2.front()}, 100.0);
        auto r4 = well_conditioned_rows(c, p, 4, std::nullopt);
        plant_massive_rows(c, p, 4, {r4.front()}, 10000.0);
        const auto argmax = find_massive_weights(c, p, 1, LayerRule::argmax);
        const auto spike = find_massive_weights(c, p, 1, LayerRule::first_spike);
        CHECK(argmax.layer == 4);
        CHECK(spike.layer == 2);
        CHECK(argmax.alternate_layer == 2u);
        CHECK(spike.alternate_layer == 4u);
    }
}

TEST_CASE("massive weight reports") {
    const auto c = dense_config(4);
    auto p = init_parameters<float>(c, 9);
    const auto good = well_conditioned_rows(c, p, 2, std::nullopt);
    REQUIRE(good.size() >= 2);

    SECTION("planted rows come back in magnitude order") {
        plant_massive_rows(c, p, 2, {good[0], good[1]});
        const auto r = find_massive_weights(c, p, 2);
        CHECK(r.layer == 2);
        CHECK(std::set<std::size_t>(r.indices.begin(), r.indices.end()) == std::set<std::size_t>{good[0], good[1]});
        CHECK(r.magnitudes[0] >= r.magnitudes[1]);
        CHECK(r.config_hash == config_hash(c));
        const json j = r;
        for (const char* key : {"layer", "expert", "k", "indices", "magnitudes", "rule", "config_hash"})
            CHECK(j.contains(key));
        CHECK(j["expert"].is_null());
        CHECK(j.get<MassiveWeightReport>().indices == r.indices);
    }
    SECTION("k bounds") {
        CHECK_THROWS_AS(find_massive_weights(c, p, 0), InputError);
        CHECK_THROWS_AS(find_massive_weights(c, p, c.ffn_dim + 1), InputError);
    }
    SECTION("k = d_ff is a permutation") {
        const auto r = find_massive_weights(c, p, c.ffn_dim);
        std::vector<std::size_t> idx = r.indices;
        std::sort(idx.begin(), idx.end());
        for (std::size_t i = 0; i < c.ffn_dim; ++i) CHECK(idx[i] == i);
        CHECK(std::is_sorted(r.magnitudes.rbegin(), r.magnitudes.rend()));
    }
    SECTION("reports for k are prefixes of reports for k + 1") {
        auto prev = find_massive_weights(c, p, 1);
        for (std::size_t k = 2; k <= c.ffn_dim; ++k) {
            const auto next = find_massive_weights(c, p, k);
            CHECK(std::equal(prev.indices.begin(), prev.indices.end(), next.indices.begin()));
            prev = next;
        }
    }
    SECTION("ties break toward the lower index") {
        // two identical rows yield identical intermediate entries
        auto& gate = p.at(names::w_gate(2));
        auto& up = p.at(names::w_up(2));
        plant_massive_rows(c, p, 2, {good[0]});
        for (auto* w : {&gate, &up}) {
            auto src = w->row(good[0]);
            auto dst = w->row(good[1]);
            std::copy(src.begin(), src.end(), dst.begin());
        }
        const auto r = find_massive_weights(c, p, 2);
        CHECK(r.indices == std::vector<std::size_t>{std::min(good[0], good[1]), std::max(good[0], good[1])});
    }
    SECTION("probe only looks at the bos position") {
        const auto t = trace_bos(c, p);
        const std::vector<std::uint32_t> prompt{c.bos_token_id, 4, 9, 2};
        const auto tp = trace_forward<float>(c, p, prompt, 0);
        for (std::size_t l = 0; l < c.num_layers; ++l)
            for (std::size_t i = 0; i < c.ffn_dim; ++i)
                CHECK(tp.layers[l].inter[i] == Catch::Approx(t.layers[l].inter[i]).epsilon(1e-6).margin(1e-7));
    }
}

TEST_CASE("massive weight count") {
    ModelConfig c;
    c.hidden_dim = 4096;
    CHECK(massive_weight_count(c, 5) == 40960);
    CHECK(massive_weight_count(c, 0) == 0);
    const double percent = 100.0 * 40960 / 8.03e9;
    CHECK(percent == Catch::Approx(0.0005).margin(0.00005));
}

TEST_CASE("planted hidden-state dimension follows W_down") {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        ModelConfig c = dense_config(4);
        c.bos_token_id = static_cast<std::uint32_t>(seed);
        auto p = init_parameters<float>(c, 40 + seed);
        Rng rng(seed);
        const std::size_t layer = 1 + rng.below(3);
        const auto rows = well_conditioned_rows(c, p, layer, std::nullopt);
        const std::size_t r = rows[rng.below(rows.size())];
        const std::size_t j = rng.below(c.hidden_dim);
        // W_down column r routes the planted entry onto coordinate j only
        auto& down = p.at(names::w_down(layer));
        for (std::size_t i = 0; i < c.hidden_dim; ++i) down.at(i, r) = i == j ? 1.0f : 0.0f;
        plant_massive_rows(c, p, layer, {r});
        const auto t = trace_bos(c, p);
        CHECK(magnitude_order(t.layers[layer - 1].inter)[0] == r);
        for (std::size_t m = layer + 1; m <= c.num_layers; ++m) {
            CHECK(magnitude_order(t.layers[m - 1].h)[0] == j);
            CHECK(magnitude_order(t.layers[m - 1].h_prev)[0] == j);
        }
    }
}

TEST_CASE("planted fixtures are recovered exactly") {
    for (std::uint64_t seed = 1; seed <= 40; ++seed) {
        const auto fx = support::planted_fixture(seed, seed % 4 == 0);
        const auto r = find_massive_weights(fx.config, fx.params, fx.site.rows.size());
        INFO("seed " << seed);
        CHECK(support::recovered(r, fx.site));
    }
}

TEST_CASE("router profile") {
    ModelConfig c = dense_config(2);
    c.moe = MoeConfig{6, 2, {1, 2}};
    c.validate();
    auto p = init_parameters<float>(c, 10);

    SECTION("uniform router") {
        for (std::size_t l = 1; l <= 2; ++l) p.at(names::router(l)).fill(0.0f);
        for (const auto& lp : router_profile(c, p)) {
            for (double q : lp.probabilities) CHECK(q == Catch::Approx(1.0 / 6).margin(1e-7));
            CHECK_FALSE(lp.flagged);
        }
    }
    SECTION("planted router favouring expert 4") {
        auto rows = well_conditioned_rows(c, p, 2, std::size_t{4});
        plant_massive_rows(c, p, 2, {rows.front()}, 1000.0, std::size_t{4});
        const auto prof = router_profile(c, p);
        REQUIRE(prof.size() == 2);
        CHECK(prof[1].layer == 2);
        CHECK(prof[1].argmax == 4);
        CHECK(prof[1].flagged);
        for (const auto& lp : prof) {
            double s = 0;
            for (double q : lp.probabilities) s += q;
            CHECK(s == Catch::Approx(1.0).margin(1e-6));
        }
        const auto det = find_massive_layer(c, p);
        CHECK(det.layer == 2);
        CHECK(det.expert == 4u);
    }
    SECTION("dense models have no router") {
        CHECK_THROWS_AS(router_profile(dense_config(2), init_parameters<float>(dense_config(2), 1)), ConfigError);
    }
}
