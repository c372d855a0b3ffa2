// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "mpdit/attention.hpp"
#include "mpdit/rng.hpp"
#include "oracles.hpp"

using namespace mpdit;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double sigma = 1.0) {
    return Tensor::from_values(shape,
                               rng.normal_vec(static_cast<std::size_t>(shape_numel(shape)), sigma));
}

double row_entropy(std::span<const double> p) {
    double h = 0.0;
    for (double v : p) {
        if (v > 0.0) h -= v * std::log(v);
    }
    return h;
}

} // namespace

TEST_CASE("cosine similarity: analytic cases and zero rejection") {
    const std::vector<double> a{1.0, 0.0};
    const std::vector<double> b{1.0, 1.0};
    const std::vector<double> z{0.0, 0.0};
    CHECK(cosine_similarity(a, a) == doctest::Approx(1.0));
    CHECK(cosine_similarity(a, std::vector<double>{0.0, 2.0}) == doctest::Approx(0.0));
    CHECK(cosine_similarity(a, b) == doctest::Approx(1.0 / std::sqrt(2.0)));
    CHECK_THROWS_AS((void)cosine_similarity(a, z), std::invalid_argument);
}

TEST_CASE("softmax_beta: uniform rows, hand-computed row, one-hot limit") {
    Tensor uniform = softmax_beta(Tensor::full({2, 4}, 0.7), 1.0);
    for (double v : uniform.values()) CHECK(v == doctest::Approx(0.25));

    Tensor row = softmax_beta(Tensor::from_values({1, 2}, {0.0, std::log(3.0)}), 1.0);
    CHECK(row.values()[0] == doctest::Approx(0.25));
    CHECK(row.values()[1] == doctest::Approx(0.75));

    Rng rng(3, 0);
    Tensor logits = random_tensor({4, 8}, rng);
    Tensor hard = softmax_beta(logits, 1e-4);
    for (int r = 0; r < 4; ++r) {
        auto lv = logits.values().subspan(static_cast<std::size_t>(r) * 8, 8);
        auto hv = hard.values().subspan(static_cast<std::size_t>(r) * 8, 8);
        const auto arg = std::max_element(lv.begin(), lv.end()) - lv.begin();
        for (int i = 0; i < 8; ++i) {
            CHECK(std::fabs(hv[static_cast<std::size_t>(i)] - (i == arg ? 1.0 : 0.0)) < 1e-6);
        }
    }
}

TEST_CASE("softmax_beta: row stochasticity for random temperatures") {
    Rng rng(4, 0);
    for (double beta : {0.05, 0.5, 1.0, 7.0}) {
        Tensor p = softmax_beta(random_tensor({16, 16}, rng, 2.0), beta);
        auto v = p.values();
        for (int r = 0; r < 16; ++r) {
            double s = 0.0;
            for (int c = 0; c < 16; ++c) {
                const double e = v[static_cast<std::size_t>(r) * 16 + c];
                CHECK(e >= 0.0);
                s += e;
            }
            CHECK(std::fabs(s - 1.0) < 1e-6);
        }
    }
}

TEST_CASE("softmax_beta rejects bad inputs") {
    CHECK_THROWS_AS((void)softmax_beta(Tensor::zeros({2, 2}), 0.0), std::invalid_argument);
    CHECK_THROWS_AS((void)softmax_beta(Tensor::zeros({2, 2}), -1.0), std::invalid_argument);
    Tensor bad = Tensor::from_values({1, 2}, {1.0, std::numeric_limits<double>::infinity()});
    CHECK_THROWS_AS((void)softmax_beta(bad, 1.0), std::invalid_argument);
}

TEST_CASE("softmax_beta: row entropy is non-decreasing in beta") {
    Rng rng(5, 0);
    Tensor logits = random_tensor({8, 12}, rng, 2.0);
    double prev = -1.0;
    for (double beta : {0.1, 0.3, 1.0, 3.0, 10.0}) {
        Tensor p = softmax_beta(logits, beta);
        double total = 0.0;
        for (int r = 0; r < 8; ++r) {
            total += row_entropy(p.values().subspan(static_cast<std::size_t>(r) * 12, 12));
        }
        CHECK(total >= prev - 1e-12);
        prev = total;
    }
}

TEST_CASE("attention_forward: single token is the equality case") {
    Rng rng(6, 0);
    AttentionConfig cfg{1, 8, 0.5, true};
    Tensor q = random_tensor({1, 8}, rng);
    Tensor k = random_tensor({1, 8}, rng);
    Tensor v = random_tensor({1, 8}, rng);
    Tensor out = attention_forward(q, k, v, cfg);
    for (int i = 0; i < 8; ++i) {
        CHECK(out.values()[static_cast<std::size_t>(i)] ==
              doctest::Approx(v.values()[static_cast<std::size_t>(i)]));
    }
}

TEST_CASE("attention_forward: forced one-hot map copies the selected value row") {
    Rng rng(7, 0);
    AttentionConfig cfg{1, 16, 1e-4, false};
    const int T = 12;
    Tensor q = random_tensor({T, 16}, rng);
    Tensor k = random_tensor({T, 16}, rng);
    Tensor v = random_tensor({T, 16}, rng);
    Tensor logits = matmul_nt(q, k);
    Tensor out = attention_forward(q, k, v, cfg);
    for (int t = 0; t < T; ++t) {
        auto lrow = logits.values().subspan(static_cast<std::size_t>(t) * T, T);
        const auto sel = std::max_element(lrow.begin(), lrow.end()) - lrow.begin();
        for (int i = 0; i < 16; ++i) {
            CHECK(std::fabs(out.values()[static_cast<std::size_t>(t) * 16 + i] -
                            v.values()[static_cast<std::size_t>(sel) * 16 + i]) < 1e-6);
        }
    }
}

TEST_CASE("attention: zero query/key rows are rejected in cosine mode") {
    Rng rng(21, 0);
    AttentionConfig cosine{1, 4, 0.5, true};
    AttentionConfig dot{1, 4, 2.0, false};
    Tensor q = random_tensor({3, 4}, rng);
    Tensor k = random_tensor({3, 4}, rng);
    Tensor v = random_tensor({3, 4}, rng);
    Tensor zq = Tensor::from_values({3, 4}, [&] {
        std::vector<double> vals(q.values().begin(), q.values().end());
        for (int c = 0; c < 4; ++c) vals[static_cast<std::size_t>(4 + c)] = 0.0;
        return vals;
    }());
    CHECK_THROWS_AS((void)attention_forward(zq, k, v, cosine), std::invalid_argument);
    CHECK_NOTHROW((void)attention_forward(zq, k, v, dot)); // dot logits tolerate zero rows
}

TEST_CASE("attention: cosine logits stay inside [-1,1]") {
    Rng rng(8, 0);
    Tensor q = random_tensor({32, 16}, rng, 3.0);
    Tensor k = random_tensor({32, 16}, rng, 0.2);
    Tensor sims = matmul_nt(row_normalize(q), row_normalize(k));
    for (double s : sims.values()) {
        CHECK(s <= 1.0 + 1e-12);
        CHECK(s >= -1.0 - 1e-12);
    }
}

TEST_CASE("attention is non-expansive for both logit kinds") {
    Rng rng(9, 0);
    const int T = 32, dh = 16, trials = 128;
    const double sigma = 1.5;
    for (bool cosine : {false, true}) {
        AttentionConfig cfg{1, dh, cosine ? 0.25 : 4.0, cosine};
        double worst = 0.0;
        std::vector<double> sq(static_cast<std::size_t>(T), 0.0);
        for (int trial = 0; trial < trials; ++trial) {
            Tensor q = random_tensor({T, dh}, rng);
            Tensor k = random_tensor({T, dh}, rng);
            Tensor v = random_tensor({T, dh}, rng, sigma);
            Tensor out = attention_forward(q, k, v, cfg);
            auto mags = row_magnitudes(out);
            for (int t = 0; t < T; ++t) {
                sq[static_cast<std::size_t>(t)] +=
                    mags[static_cast<std::size_t>(t)] * mags[static_cast<std::size_t>(t)];
            }
        }
        for (double s : sq) worst = std::max(worst, std::sqrt(s / trials));
        CHECK(worst <= sigma * 1.02);
    }
}

TEST_CASE("multi_head_attention: heads=1 equals projections around the core") {
    Rng rng(10, 0);
    const int d = 16;
    MPLinear pq(d, d, true, rng, 1.0), pk(d, d, true, rng, 1.0), pv(d, d, true, rng, 1.0),
        po(d, d, true, rng, 1.0);
    AttentionConfig cfg{1, d, 0.5, true};
    Tensor x = random_tensor({6, d}, rng);
    Tensor fused = multi_head_attention(x, pq, pk, pv, po, cfg);
    Tensor manual =
        po.forward(attention_forward(pq.forward(x), pk.forward(x), pv.forward(x), cfg));
    for (std::size_t i = 0; i < fused.values().size(); ++i) {
        CHECK(fused.values()[i] == doctest::Approx(manual.values()[i]).epsilon(1e-12));
    }
}

TEST_CASE("multi_head_attention: token permutation equivariance") {
    Rng rng(11, 0);
    const int d = 12, T = 5;
    MPLinear pq(d, d, true, rng, 1.0), pk(d, d, true, rng, 1.0), pv(d, d, true, rng, 1.0),
        po(d, d, true, rng, 1.0);
    AttentionConfig cfg{3, 4, 0.5, true};
    Tensor x = random_tensor({T, d}, rng);
    const std::vector<int> perm{3, 0, 4, 1, 2};
    std::vector<double> px(static_cast<std::size_t>(T) * d);
    for (int t = 0; t < T; ++t) {
        for (int c = 0; c < d; ++c) {
            px[static_cast<std::size_t>(t) * d + c] =
                x.values()[static_cast<std::size_t>(perm[static_cast<std::size_t>(t)]) * d + c];
        }
    }
    Tensor out = multi_head_attention(x, pq, pk, pv, po, cfg);
    Tensor pout = multi_head_attention(Tensor::from_values({T, d}, px), pq, pk, pv, po, cfg);
    for (int t = 0; t < T; ++t) {
        for (int c = 0; c < d; ++c) {
            CHECK(pout.values()[static_cast<std::size_t>(t) * d + c] ==
                  doctest::Approx(
                      out.values()[static_cast<std::size_t>(perm[static_cast<std::size_t>(t)]) * d + c])
                      .epsilon(1e-10));
        }
    }
}

TEST_CASE("multi_head_attention: full MP stack keeps unit tokens non-expansive") {
    Rng rng(12, 0);
    const int d = 32;
    MPLinear pq(d, d, true, rng, 1.0), pk(d, d, true, rng, 1.0), pv(d, d, true, rng, 1.0),
        po(d, d, true, rng, 1.0);
    AttentionConfig cfg{2, 16, 0.25, true};
    double sq = 0.0;
    std::int64_t n = 0;
    for (int trial = 0; trial < 64; ++trial) {
        Tensor x = random_tensor({16, d}, rng);
        Tensor out = multi_head_attention(x, pq, pk, pv, po, cfg);
        for (double m : row_magnitudes(out)) {
            sq += m * m;
            ++n;
        }
    }
    CHECK(std::sqrt(sq / static_cast<double>(n)) <= 1.02);
}

TEST_CASE("attention config validation") {
    AttentionConfig bad{3, 5, 1.0, false};
    CHECK_THROWS_AS(bad.validate(16), std::invalid_argument);
    CHECK(default_beta(true, 16) == doctest::Approx(0.25));
    CHECK(default_beta(false, 16) == doctest::Approx(4.0));
}

TEST_CASE("attention gradients pass finite differences") {
    Rng rng(13, 0);
    AttentionConfig cfg{1, 6, 0.7, true};
    Tensor q = random_tensor({4, 6}, rng);
    Tensor k = random_tensor({4, 6}, rng);
    Tensor v = random_tensor({4, 6}, rng);
    Rng mix(14, 0);
    Tensor weights;
    auto loss_value = [&]() {
        Tensor out = attention_forward(q, k, v, cfg);
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
        tape.backward(sum(mul(attention_forward(q, k, v, cfg), weights)));
    }
    const double err = oracles::finite_diff_max_err(
        {q, k, v}, loss_value,
        [&](const Tensor& p, std::int64_t i) { return p.grad()[static_cast<std::size_t>(i)]; });
    CHECK(err < 1e-4);
}
