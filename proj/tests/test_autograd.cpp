#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cmath>
#include <random>
#include <vector>

#include "cwsam/autograd.hpp"
#include "support.hpp"

using namespace cwsam;
using ag::Var;

namespace {

// Fixed random weighting so every output entry influences the scalar.
Var project(const Var& y, std::uint64_t seed = 99) {
    std::mt19937_64 rng(seed);
    return ag::sum(ag::mul(y, ag::constant(testing::random_matrix(y.rows(), y.cols(), rng))));
}

Var leaf(std::size_t r, std::size_t c, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    return Var(testing::random_matrix(r, c, rng, lo, hi), true);
}

}  // namespace

TEST_CASE("dense ops match central differences") {
    std::mt19937_64 rng(5);
    std::vector<Var> v{leaf(4, 3, rng), leaf(3, 5, rng), leaf(5, 3, rng), leaf(1, 5, rng)};

    SUBCASE("matmul") { CHECK(testing::gradcheck(std::span(v).first(2), [&] { return project(ag::matmul(v[0], v[1])); }) < 1e-6); }
    SUBCASE("matmul_nt") {
        std::array<Var, 2> l{v[0], v[2]};
        CHECK(testing::gradcheck(l, [&] { return project(ag::matmul_nt(v[0], v[2])); }) < 1e-6);
    }
    SUBCASE("linear with bias") {
        std::array<Var, 3> l{v[0], v[2], v[3]};
        CHECK(testing::gradcheck(l, [&] { return project(ag::linear(v[0], v[2], v[3])); }) < 1e-6);
    }
    SUBCASE("add, sub, mul, scale") {
        Var b = leaf(4, 3, rng);
        std::array<Var, 2> l{v[0], b};
        CHECK(testing::gradcheck(l, [&] {
                  return project(ag::scale(ag::mul(ag::add(v[0], b), ag::sub(v[0], b)), -1.7));
              }) < 1e-6);
    }
    SUBCASE("add_row broadcast") {
        Var row = leaf(1, 3, rng);
        std::array<Var, 2> l{v[0], row};
        CHECK(testing::gradcheck(l, [&] { return project(ag::add_row(v[0], row)); }) < 1e-6);
    }
}

TEST_CASE("pointwise nonlinearities and normalisation") {
    std::mt19937_64 rng(6);
    Var x = leaf(5, 8, rng, -2.0, 2.0);
    Var g = leaf(1, 8, rng, 0.5, 1.5), b = leaf(1, 8, rng);
    std::array<Var, 1> only{x};
    CHECK(testing::gradcheck(only, [&] { return project(ag::gelu(x)); }) < 1e-6);
    CHECK(testing::gradcheck(only, [&] { return project(ag::relu(x)); }) < 1e-6);
    CHECK(testing::gradcheck(only, [&] { return project(ag::softmax_rows(x)); }) < 1e-6);
    std::array<Var, 3> ln{x, g, b};
    CHECK(testing::gradcheck(ln, [&] { return project(ag::layer_norm(x, g, b, 1e-6)); }) < 1e-6);
}

TEST_CASE("gelu is the exact erf form") {
    const Matrix in(1, 4, std::vector<double>{-3.0, -0.5, 0.0, 1.25});
    const Matrix out = ag::gelu(ag::constant(in)).value();
    for (std::size_t i = 0; i < 4; ++i)
        CHECK(out[i] == doctest::Approx(0.5 * in[i] * (1.0 + std::erf(in[i] / std::sqrt(2.0)))).epsilon(1e-15));
}

TEST_CASE("layer_norm rows have zero mean and unit variance before the affine map") {
    std::mt19937_64 rng(7);
    const Var x = ag::constant(testing::random_matrix(6, 10, rng, -3, 5));
    const Matrix y = ag::layer_norm(x, ag::constant(Matrix(1, 10, 1.0)), ag::constant(Matrix(1, 10)), 0.0).value();
    for (std::size_t r = 0; r < 6; ++r) {
        double m = 0, s = 0;
        for (std::size_t c = 0; c < 10; ++c) m += y(r, c) / 10;
        for (std::size_t c = 0; c < 10; ++c) s += (y(r, c) - m) * (y(r, c) - m) / 10;
        CHECK(std::abs(m) < 1e-14);
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("shape ops route gradients exactly") {
    std::mt19937_64 rng(8);
    Var a = leaf(4, 6, rng), b = leaf(4, 2, rng), c = leaf(3, 6, rng);
    std::array<Var, 3> l{a, b, c};
    CHECK(testing::gradcheck(l, [&] {
              const std::array<Var, 2> cols{ag::slice_cols(a, 1, 3), b};
              const std::array<Var, 2> rows{ag::slice_rows(a, 1, 2), ag::slice_cols(c, 0, 6)};
              return ag::add(project(ag::concat_cols(cols), 1), project(ag::concat_rows(rows), 2));
          }) < 1e-6);
    CHECK(testing::gradcheck(l, [&] {
              // repeated and missing (-1) indices
              return project(ag::gather_rows(a, {3, -1, 0, 3, 2}));
          }) < 1e-6);
    CHECK(testing::gradcheck(l, [&] { return project(ag::reshape(a, 8, 3)); }) < 1e-6);
}

TEST_CASE("gather_rows fills -1 with zeros") {
    const Var x = ag::constant(Matrix(2, 2, std::vector<double>{1, 2, 3, 4}));
    const Matrix y = ag::gather_rows(x, {1, -1, 0}).value();
    CHECK(y == Matrix(3, 2, std::vector<double>{3, 4, 0, 0, 1, 2}));
}

TEST_CASE("fused attention matches a composed reference and central differences") {
    std::mt19937_64 rng(9);
    const std::size_t heads = 2, groups = 3, n = 4, d = 6;
    Var q = leaf(groups * n, d, rng), k = leaf(groups * n, d, rng), v = leaf(groups * n, d, rng);

    // Reference: per group and head, softmax(q k^T / sqrt(dh)) v from primitive ops.
    const std::size_t dh = d / heads;
    std::vector<Var> group_out;
    for (std::size_t g = 0; g < groups; ++g) {
        std::vector<Var> head_out;
        for (std::size_t h = 0; h < heads; ++h) {
            auto part = [&](const Var& x) { return ag::slice_cols(ag::slice_rows(x, g * n, n), h * dh, dh); };
            const Var att = ag::softmax_rows(ag::scale(ag::matmul_nt(part(q), part(k)), 1.0 / std::sqrt(double(dh))));
            head_out.push_back(ag::matmul(att, part(v)));
        }
        group_out.push_back(ag::concat_cols(head_out));
    }
    const Matrix want = ag::concat_rows(group_out).value();
    const Matrix got = ag::attention(q, k, v, heads, groups).value();
    CHECK(testing::max_abs_diff(want, got) < 1e-13);

    std::array<Var, 3> l{q, k, v};
    CHECK(testing::gradcheck(l, [&] { return project(ag::attention(q, k, v, heads, groups)); }) < 1e-6);
}

TEST_CASE("cross attention with different query and key counts") {
    std::mt19937_64 rng(10);
    Var q = leaf(3, 4, rng), k = leaf(7, 4, rng), v = leaf(7, 4, rng);
    std::array<Var, 3> l{q, k, v};
    CHECK(testing::gradcheck(l, [&] { return project(ag::attention(q, k, v, 2, 1)); }) < 1e-6);
}

TEST_CASE("gradients accumulate across backward calls and reset on zero_grad") {
    Var x(Matrix(1, 1, 3.0), true);
    ag::backward(ag::scale(x, 2.0));
    ag::backward(ag::scale(x, 2.0));
    CHECK(x.grad()[0] == 4.0);
    x.zero_grad();
    CHECK_FALSE(x.has_grad());
}

TEST_CASE("no-grad mode records no graph") {
    Var x(Matrix(2, 2, 1.0), true);
    ag::NoGradGuard guard;
    CHECK_FALSE(ag::grad_enabled());
    const Var y = ag::relu(ag::matmul(x, x));
    CHECK(y.node()->parents.empty());
    CHECK_FALSE(y.requires_grad());
}

TEST_CASE("constants receive no gradient") {
    Var x(Matrix(2, 2, 1.0), true);
    Var c = ag::constant(Matrix(2, 2, 2.0));
    ag::backward(ag::sum(ag::mul(x, c)));
    CHECK(x.has_grad());
    CHECK_FALSE(c.has_grad());
}

TEST_CASE("relu propagates NaN instead of hiding it") {
    const Var y = ag::relu(ag::constant(Matrix(1, 3, std::vector<double>{-1.0, std::nan(""), 2.0})));
    CHECK(y.value()[0] == 0.0);
    CHECK(std::isnan(y.value()[1]));
    CHECK(y.value()[2] == 2.0);
}
