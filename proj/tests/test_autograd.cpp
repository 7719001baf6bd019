#include <catch_amalgamated.hpp>

#include <massive/autograd.hpp>

#include "support/gradcheck.hpp"

using massive::Graph;
using massive::Tensor;

TEST_CASE("square has gradient 2x") {
    Graph<double> g;
    const Tensor<double> x({1}, 3.0);
    const auto xv = g.leaf(x, true);
    g.backward(g.mul(xv, xv));
    CHECK(g.grad(xv)[0] == 6.0);
}

TEST_CASE("sum of a matmul matches finite differences") {
    massive::Rng rng(1);
    auto gc = support::graph_case("matmul_sum", {support::randn(rng, {3, 4}), support::randn(rng, {4, 2})},
                                  [](Graph<double>& g, const std::vector<Graph<double>::Var>& v) {
                                      return g.sum(g.matmul(v[0], v[1]));
                                  },
                                  0);
    massive::Rng pick(2);
    const auto r = support::check_case(gc, pick, 40);
    CHECK(r.max_rel_error <= 1e-6);
}

TEST_CASE("a constant loss gives zero gradients") {
    Graph<double> g;
    const Tensor<double> x({2, 2}, 1.5);
    const auto xv = g.leaf(x, true);
    const auto c = g.constant(Tensor<double>({1}, 4.0));
    g.backward(c);
    const auto grad = g.grad(xv);
    for (double v : grad.data()) CHECK(v == 0.0);
}

TEST_CASE("backward rejects a non-scalar loss") {
    Graph<double> g;
    const Tensor<double> x({2}, 1.0);
    const auto xv = g.leaf(x, true);
    CHECK_THROWS_AS(g.backward(g.silu(xv)), massive::ContractError);
}

TEST_CASE("every op kind passes the finite-difference check") {
    massive::Rng pick(77);
    std::size_t total = 0;
    for (const auto& gc : support::all_grad_cases(2024)) {
        const auto r = support::check_case(gc, pick, 16);
        INFO(r.op << " max rel error " << r.max_rel_error);
        CHECK(r.max_rel_error <= 1e-6);
        total += r.coordinates;
    }
    CHECK(total >= 200);
}

TEST_CASE("dropout with p = 0 is the identity node") {
    Graph<float> g;
    const Tensor<float> x({2, 3}, 1.0f);
    massive::Rng rng(1);
    const auto xv = g.leaf(x, true);
    CHECK(g.dropout(xv, 0.0, rng).id == xv.id);
    CHECK_THROWS_AS(g.dropout(xv, 1.0, rng), massive::ConfigError);
}

TEST_CASE("top_indices breaks ties toward the lower index") {
    const std::vector<float> v{1, 3, 3, 0};
    const auto top = Graph<float>::top_indices(v, 2);
    CHECK(top == std::vector<std::size_t>{1, 2});
}
