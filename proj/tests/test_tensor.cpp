// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cmath>
#include <functional>
#include <string>

#include "mpdit/rng.hpp"
#include "mpdit/tensor.hpp"
#include "oracles.hpp"

using namespace mpdit;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double sigma = 1.0) {
    return Tensor::from_values(shape,
                               rng.normal_vec(static_cast<std::size_t>(shape_numel(shape)), sigma));
}

// FD-checks d(loss)/d(input) for a unary graph builder; the loss mixes the
// output with fixed random weights so every entry gets a distinct signal.
double check_op_gradient(const Tensor& input, const std::function<Tensor(const Tensor&)>& op,
                         std::uint64_t seed = 7) {
    Tensor x = input;
    Rng mix_rng(seed, 11);
    Tensor weights;
    auto loss_value = [&]() {
        Tensor out = op(x);
        if (!weights.defined()) weights = random_tensor(out.shape(), mix_rng);
        double acc = 0.0;
        auto ov = out.values();
        auto wv = weights.values();
        for (std::size_t i = 0; i < ov.size(); ++i) acc += ov[i] * wv[i];
        return acc;
    };
    (void)loss_value(); // materialize weights
    x.zero_grad();      // the same tensor is reused across op checks
    Tape tape;
    {
        Tape::Scope scope(tape);
        tape.backward(sum(mul(op(x), weights)));
    }
    return oracles::finite_diff_max_err(
        {x}, loss_value,
        [&](const Tensor& p, std::int64_t i) { return p.grad()[static_cast<std::size_t>(i)]; });
}

} // namespace

TEST_CASE("forward primitives: identity and constant examples") {
    Tensor eye = Tensor::from_values({2, 2}, {1, 0, 0, 1});
    Tensor col = Tensor::from_values({2, 1}, {3, 4});
    Tensor out = matmul(eye, col);
    CHECK(out.values()[0] == doctest::Approx(3.0));
    CHECK(out.values()[1] == doctest::Approx(4.0));

    CHECK(sum(Tensor::full({5}, 1.0)).scalar() == doctest::Approx(5.0));

    Tensor e = exp(Tensor::zeros({3}));
    for (double v : e.values()) CHECK(v == doctest::Approx(1.0));
}

TEST_CASE("shape mismatches are rejected with both shapes named") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 5});
    try {
        (void)matmul(a, b);
        FAIL("expected rejection");
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2,3]") != std::string::npos);
        CHECK(msg.find("[4,5]") != std::string::npos);
    }
    CHECK_THROWS_AS((void)add(a, b), std::invalid_argument);
    CHECK_THROWS_AS((void)concat_last(a, Tensor::zeros({3, 1})), std::invalid_argument);
}

TEST_CASE("backward: square and identity matmul") {
    Tensor x = Tensor::scalar_value(3.0);
    Tape tape;
    {
        Tape::Scope scope(tape);
        tape.backward(mul(x, x));
    }
    CHECK(x.grad()[0] == doctest::Approx(6.0));

    Tensor w = Tensor::from_values({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Tensor v = Tensor::from_values({3, 1}, {2, -1, 5});
    Tape tape2;
    {
        Tape::Scope scope(tape2);
        tape2.backward(sum(matmul(w, v)));
    }
    for (double g : v.grad()) CHECK(g == doctest::Approx(1.0));
}

TEST_CASE("backward rejects non-scalar loss") {
    Tensor x = Tensor::zeros({2});
    Tape tape;
    CHECK_THROWS_AS(tape.backward(x), std::invalid_argument);
}

TEST_CASE("random 3-layer MLP matches central finite differences") {
    Rng rng(42, 0);
    Tensor w1 = random_tensor({6, 5}, rng, 0.5);
    Tensor w2 = random_tensor({6, 6}, rng, 0.5);
    Tensor w3 = random_tensor({1, 6}, rng, 0.5);
    Tensor x = random_tensor({4, 5}, rng);

    auto build = [&]() {
        Tensor h1 = silu_raw(matmul_nt(x, w1));
        Tensor h2 = silu_raw(matmul_nt(h1, w2));
        return mean(matmul_nt(h2, w3));
    };
    Tape tape;
    {
        Tape::Scope scope(tape);
        tape.backward(build());
    }
    const double err = oracles::finite_diff_max_err(
        {w1, w2, w3, x}, [&]() { return build().scalar(); },
        [&](const Tensor& p, std::int64_t i) { return p.grad()[static_cast<std::size_t>(i)]; });
    CHECK(err < 1e-5);
}

TEST_CASE("gradient-check property across primitives") {
    Rng rng(1234, 0);
    Tensor x = random_tensor({4, 6}, rng);
    Tensor y = random_tensor({4, 6}, rng);
    Tensor vrow = random_tensor({6}, rng);
    Tensor pos = Tensor::from_values({3, 4}, {0.5, 1.2, 0.3, 2.0, 1.7, 0.9, 0.1, 1.1, 0.4, 2.2, 0.8, 1.5});

    CHECK(check_op_gradient(x, [&](const Tensor& t) { return add(t, y); }) < 1e-4);
    CHECK(check_op_gradient(x, [&](const Tensor& t) { return sub(t, y); }) < 1e-4);
    CHECK(check_op_gradient(x, [&](const Tensor& t) { return mul(t, y); }) < 1e-4);
    CHECK(check_op_gradient(x, [&](const Tensor& t) { return mul(t, vrow); }) < 1e-4);
    CHECK(check_op_gradient(x, [&](const Tensor& t) { return add(t, vrow); }) < 1e-4);
    CHECK(check_op_gradient(x, [&](const Tensor& t) { return scale(t, -1.7); }) < 1e-4);
    CHECK(check_op_gradient(x, [&](const Tensor& t) { return add_scalar(t, 0.3); }) < 1e-4);
    CHECK(check_op_gradient(x, [&](const Tensor& t) { return matmul_nt(t, y); }) < 1e-4);
    CHECK(check_op_gradient(x, [&](const Tensor& t) { return matmul(t, transpose2d(y)); }) < 1e-4);
    CHECK(check_op_gradient(x, [&](const Tensor& t) { return concat_last(t, y); }) < 1e-4);
    CHECK(check_op_gradient(x, [&](const Tensor& t) { return slice_last(t, 1, 3); }) < 1e-4);
    CHECK(check_op_gradient(x, [&](const Tensor& t) { return reshape(t, {6, 4}); }) < 1e-4);
    CHECK(check_op_gradient(x, [&](const Tensor& t) { return sum(t); }) < 1e-4);
    CHECK(check_op_gradient(x, [&](const Tensor& t) { return mean(t); }) < 1e-4);
    CHECK(check_op_gradient(x, [&](const Tensor& t) { return exp(scale(t, 0.3)); }) < 1e-4);
    CHECK(check_op_gradient(pos, [&](const Tensor& t) { return sqrt(t); }) < 1e-4);
    CHECK(check_op_gradient(x, [&](const Tensor& t) { return silu_raw(t); }) < 1e-4);
    CHECK(check_op_gradient(x, [&](const Tensor& t) { return leaky_relu_raw(t, 0.2); }) < 1e-4);
    CHECK(check_op_gradient(x, [&](const Tensor& t) { return row_normalize(t); }) < 1e-4);
    CHECK(check_op_gradient(x, [&](const Tensor& t) { return layer_norm(t); }) < 1e-4);
    CHECK(check_op_gradient(x, [&](const Tensor& t) { return softmax_rows(t, 0.7); }) < 1e-4);
    CHECK(check_op_gradient(x, [&](const Tensor& t) { return embedding_row(t, 2); }) < 1e-4);
}

TEST_CASE("expected magnitude: examples, Monte Carlo, scale invariance") {
    CHECK(expected_magnitude(Tensor::full({4}, 1.0)) == doctest::Approx(1.0));
    CHECK(expected_magnitude(Tensor::from_values({2}, {3, 4})) ==
          doctest::Approx(std::sqrt(12.5)));

    Rng rng(99, 0);
    Tensor big = random_tensor({1000, 1000}, rng, 2.0);
    CHECK(expected_magnitude(big) == doctest::Approx(2.0).epsilon(0.005));

    Tensor x = random_tensor({37}, rng);
    const double base = expected_magnitude(x);
    Tensor sx = Tensor::from_values({37}, [&] {
        std::vector<double> v(x.values().begin(), x.values().end());
        for (double& e : v) e *= -2.5;
        return v;
    }());
    CHECK(oracles::rel_err(expected_magnitude(sx), 2.5 * base) < 1e-12);
}

TEST_CASE("expected magnitude over axes") {
    Tensor x = Tensor::from_values({2, 3}, {1, 1, 1, 2, 2, 2});
    const std::array<int, 1> last{1};
    auto rows = expected_magnitude_over(x, last);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0] == doctest::Approx(1.0));
    CHECK(rows[1] == doctest::Approx(2.0));

    const std::array<int, 2> both{0, 1};
    auto all = expected_magnitude_over(x, both);
    REQUIRE(all.size() == 1);
    CHECK(all[0] == doctest::Approx(std::sqrt((3.0 + 12.0) / 6.0)));

    CHECK_THROWS_AS((void)expected_magnitude_over(x, std::span<const int>{}),
                    std::invalid_argument);
    const std::array<int, 2> repeated{0, 0};
    CHECK_THROWS_AS((void)expected_magnitude_over(x, repeated), std::invalid_argument);
}

TEST_CASE("rng: deterministic per (seed, stream), distinct across streams") {
    Rng a(7, 3), b(7, 3), c(7, 4);
    bool all_equal = true, any_diff = false;
    for (int i = 0; i < 100; ++i) {
        const double va = a.normal(), vb = b.normal(), vc = c.normal();
        all_equal = all_equal && (va == vb);
        any_diff = any_diff || (va != vc);
    }
    CHECK(all_equal);
    CHECK(any_diff);
}

TEST_CASE("gradients accumulate until cleared") {
    Tensor x = Tensor::scalar_value(2.0);
    for (int pass = 0; pass < 2; ++pass) {
        Tape tape;
        Tape::Scope scope(tape);
        tape.backward(mul(x, x));
    }
    CHECK(x.grad()[0] == doctest::Approx(8.0)); // two passes of d(x^2)/dx = 4
    x.zero_grad();
    CHECK(x.grad()[0] == doctest::Approx(0.0));
}
