// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mpdit/mp_ops.hpp"
#include "mpdit/rng.hpp"
#include "oracles.hpp"

using namespace mpdit;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double sigma = 1.0) {
    return Tensor::from_values(shape,
                               rng.normal_vec(static_cast<std::size_t>(shape_numel(shape)), sigma));
}

} // namespace

TEST_CASE("mp_linear: identity rows and single-row normalization") {
    Rng rng(1, 0);
    MPLinear layer(3, 3, /*mp=*/true, rng, 1.0);
    Tensor t = layer.weight;
    auto w = t.values_mut();
    const double eye[9] = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    for (int i = 0; i < 9; ++i) w[static_cast<std::size_t>(i)] = eye[i];
    Tensor out = mp_linear_forward(layer, Tensor::from_values({3}, {1, 2, 3}));
    CHECK(out.values()[0] == doctest::Approx(1.0));
    CHECK(out.values()[1] == doctest::Approx(2.0));
    CHECK(out.values()[2] == doctest::Approx(3.0));

    MPLinear row(1, 2, true, rng, 1.0);
    Tensor rt = row.weight;
    auto rw = rt.values_mut();
    rw[0] = 3.0;
    rw[1] = 4.0;
    Tensor y = row.forward(Tensor::from_values({2}, {1, 0}));
    CHECK(y.values()[0] == doctest::Approx(0.6));
}

TEST_CASE("mp_linear: normalized rows have unit norm, zero rows rejected") {
    Rng rng(2, 0);
    MPLinear layer(16, 8, true, rng, 1.0);
    Tensor w_hat = row_normalize(layer.weight);
    for (double n : row_magnitudes(w_hat)) {
        CHECK(std::fabs(n * std::sqrt(8.0) - 1.0) < 1e-6); // row L2 = 1
    }
    Tensor t = layer.weight;
    auto w = t.values_mut();
    for (int c = 0; c < 8; ++c) w[static_cast<std::size_t>(c)] = 0.0;
    CHECK_THROWS_AS((void)layer.forward(Tensor::zeros({8})), std::invalid_argument);
}

TEST_CASE("mp_linear: Monte Carlo magnitude preservation at several sigmas") {
    Rng rng(3, 0);
    MPLinear layer(64, 64, true, rng, 1.0);
    for (double sigma : {0.5, 1.0, 2.0}) {
        Tensor x = random_tensor({2048, 64}, rng, sigma);
        Tensor out = layer.forward(x);
        CHECK(expected_magnitude(out) == doctest::Approx(sigma).epsilon(0.02));
    }
}

TEST_CASE("mp_embedding: unit magnitude for every index, range checked") {
    Rng rng(4, 0);
    MPLinear table(10, 32, false, rng, 1.0);
    for (int i = 0; i < 10; ++i) {
        Tensor e = mp_embedding_lookup(table, i);
        CHECK(std::fabs(expected_magnitude(e) - 1.0) < 1e-6);
    }
    CHECK_THROWS_AS((void)mp_embedding_lookup(table, 10), std::invalid_argument);
    CHECK_THROWS_AS((void)mp_embedding_lookup(table, -1), std::invalid_argument);
}

TEST_CASE("concat_bias_ones: appends exact ones and keeps unit magnitude") {
    Tensor a = concat_bias_ones(Tensor::from_values({2}, {0.5, -0.5}));
    CHECK(a.values()[2] == 1.0);
    Tensor z = concat_bias_ones(Tensor::zeros({4}));
    CHECK(z.values()[4] == 1.0);

    Rng rng(5, 0);
    Tensor x = random_tensor({4096, 15}, rng);
    CHECK(expected_magnitude(concat_bias_ones(x)) == doctest::Approx(1.0).epsilon(0.01));
}

TEST_CASE("mp_residual: endpoint exactness and unit-magnitude mixing") {
    Rng rng(6, 0);
    Tensor x = random_tensor({8}, rng);
    Tensor y = random_tensor({8}, rng);
    Tensor at1 = mp_residual(x, y, {1.0});
    Tensor at0 = mp_residual(x, y, {0.0});
    for (int i = 0; i < 8; ++i) {
        CHECK(at1.values()[static_cast<std::size_t>(i)] == x.values()[static_cast<std::size_t>(i)]);
        CHECK(at0.values()[static_cast<std::size_t>(i)] == y.values()[static_cast<std::size_t>(i)]);
    }

    Tensor bx = random_tensor({4096, 256}, rng);
    Tensor by = random_tensor({4096, 256}, rng);
    CHECK(expected_magnitude(mp_residual(bx, by, {0.3})) == doctest::Approx(1.0).epsilon(0.02));

    CHECK_THROWS_AS((void)mp_residual(x, random_tensor({9}, rng), {0.5}), std::invalid_argument);
    CHECK_THROWS_AS((void)mp_residual(x, y, {1.5}), std::invalid_argument);
}

TEST_CASE("mp_silu: zero fixed point and quadrature constant") {
    Tensor z = mp_silu(Tensor::zeros({3}));
    for (double v : z.values()) CHECK(v == 0.0);

    const double second_moment = oracles::gauss_hermite_expectation([](double t) {
        const double s = t / (1.0 + std::exp(-t));
        return s * s;
    });
    CHECK(std::fabs(std::sqrt(second_moment) - kSiluInputRms) < 0.001);

    Rng rng(7, 0);
    Tensor x = random_tensor({1000, 1000}, rng);
    CHECK(expected_magnitude(mp_silu(x)) == doctest::Approx(1.0).epsilon(0.01));
}

TEST_CASE("mp_leaky_relu: gains and Monte Carlo") {
    CHECK(mp_leaky_relu_gain(1.0) == doctest::Approx(1.0));
    CHECK(mp_leaky_relu_gain(0.0) == std::sqrt(2.0));

    Rng rng(8, 0);
    Tensor x = random_tensor({64}, rng);
    Tensor id = mp_leaky_relu(x, 1.0);
    Tensor relu2 = mp_leaky_relu(x, 0.0);
    for (int i = 0; i < 64; ++i) {
        const double v = x.values()[static_cast<std::size_t>(i)];
        CHECK(id.values()[static_cast<std::size_t>(i)] == doctest::Approx(v).epsilon(1e-12));
        CHECK(relu2.values()[static_cast<std::size_t>(i)] ==
              doctest::Approx(std::sqrt(2.0) * (v > 0.0 ? v : 0.0)));
    }

    Tensor big = random_tensor({1000, 1000}, rng, 2.0);
    CHECK(expected_magnitude(mp_leaky_relu(big, 0.2)) == doctest::Approx(2.0).epsilon(0.01));
    // analytic second moment of the unscaled activation
    const double raw = expected_magnitude(leaky_relu_raw(big, 0.2));
    CHECK(raw * raw == doctest::Approx((0.2 * 0.2 + 1.0) / 2.0 * 4.0).epsilon(0.02));

    CHECK_THROWS_AS((void)mp_leaky_relu(x, -0.1), std::invalid_argument);
}

TEST_CASE("activation gains match their analytic constants") {
    const auto silu = ActivationGain::for_silu();
    const auto lrelu = ActivationGain::for_leaky_relu(0.2);
    const auto relu = ActivationGain::for_relu();
    CHECK(silu.gain == doctest::Approx(1.0 / 0.596));
    CHECK(lrelu.gain == doctest::Approx(std::sqrt(2.0 / 1.04)));
    CHECK(relu.gain == std::sqrt(2.0));

    Rng rng(20, 0);
    Tensor x = random_tensor({64}, rng);
    Tensor a = apply_mp_activation(x, lrelu);
    Tensor b = mp_leaky_relu(x, 0.2);
    for (std::size_t i = 0; i < a.values().size(); ++i) CHECK(a.values()[i] == b.values()[i]);
    Tensor c = apply_mp_activation(x, silu);
    Tensor d = mp_silu(x);
    for (std::size_t i = 0; i < c.values().size(); ++i) CHECK(c.values()[i] == d.values()[i]);
}

TEST_CASE("sinusoidal table: plain rows at 1/sqrt(2), unit rows at 1") {
    Tensor plain = sinusoidal_table(32, 16, false);
    Tensor unit = sinusoidal_table(32, 16, true);
    for (double m : row_magnitudes(plain)) CHECK(m == doctest::Approx(1.0 / std::sqrt(2.0)));
    for (double m : row_magnitudes(unit)) CHECK(m == doctest::Approx(1.0));
}

TEST_CASE("mp_positional_encoding: identity at alpha=1, bounded length, mixing") {
    Rng rng(9, 0);
    Tensor table = sinusoidal_table(64, 32, true);
    Tensor tokens = random_tensor({16, 32}, rng);
    Tensor same = mp_positional_encoding(tokens, table, {1.0});
    auto tv = tokens.values();
    auto sv = same.values();
    for (std::size_t i = 0; i < tv.size(); ++i) CHECK(sv[i] == tv[i]);

    Tensor long_table = sinusoidal_table(512, 32, true);
    Tensor big = random_tensor({512, 32}, rng);
    Tensor mixed = mp_positional_encoding(big, long_table, {0.5});
    CHECK(expected_magnitude(mixed) == doctest::Approx(1.0).epsilon(0.02));

    CHECK_THROWS_AS((void)mp_positional_encoding(random_tensor({65, 32}, rng), table, {0.5}),
                    std::invalid_argument);
}

TEST_CASE("mp ops pass the finite-difference gradient check") {
    Rng rng(10, 0);
    Tensor x = random_tensor({3, 8}, rng);
    Tensor w = random_tensor({4, 8}, rng);
    Rng mix(11, 0);
    Tensor weights;

    auto build = [&]() {
        Tensor h = matmul_nt(x, row_normalize(w));
        h = concat_bias_ones(h);
        h = mp_silu(h);
        Tensor r = mp_residual(h, scale(h, 0.5), {0.3});
        return r;
    };
    auto loss_value = [&]() {
        Tensor out = build();
        if (!weights.defined()) weights = random_tensor(out.shape(), mix);
        double acc = 0.0;
        auto ov = out.values();
        auto wv = weights.values();
        for (std::size_t i = 0; i < ov.size(); ++i) acc += ov[i] * wv[i];
        return acc;
    };
    (void)loss_value();
    Tape tape;
    {
        Tape::Scope scope(tape);
        tape.backward(sum(mul(build(), weights)));
    }
    const double err = oracles::finite_diff_max_err(
        {x, w}, loss_value,
        [&](const Tensor& p, std::int64_t i) { return p.grad()[static_cast<std::size_t>(i)]; });
    CHECK(err < 1e-4);
}
