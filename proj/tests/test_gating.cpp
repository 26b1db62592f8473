#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "trisparse/gating.hpp"

using namespace trisparse;

namespace {

Tensor per_position(std::size_t h, std::size_t w, std::initializer_list<double> channels) {
    Tensor t({channels.size(), h, w});
    std::size_t c = 0;
    for (double v : channels) {
        for (std::size_t i = 0; i < h * w; ++i) t[c * h * w + i] = v;
        ++c;
    }
    return t;
}

GateParams random_gate(GateKind kind, std::size_t cin, std::size_t stride, std::mt19937_64& rng) {
    GateParams g = make_gate(kind, cin, stride);
    g.conv.kernel = oracle::random_tensor(g.conv.kernel.shape(), rng);
    g.conv.bias = oracle::random_tensor({gate_channels(kind)}, rng);
    return g;
}

}  // namespace

TEST_CASE("gumbel_softmax: uniform logits give one third everywhere") {
    for (double tau : {0.1, 1.0, 7.0}) {
        const Tensor soft = gumbel_softmax(per_position(2, 3, {0.5, 0.5, 0.5}), tau, Tensor({3, 2, 3}));
        for (double v : soft.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
    }
}

TEST_CASE("gumbel_softmax: [10,0,0] with zero noise") {
    const Tensor soft = gumbel_softmax(per_position(1, 1, {10.0, 0.0, 0.0}), 1.0, Tensor({3, 1, 1}));
    const double expected = std::exp(10.0) / (std::exp(10.0) + 2.0);
    CHECK(std::abs(soft[0] - expected) < 1e-12);
    CHECK(std::abs(soft[0] - 0.99990) < 1e-4);
}

TEST_CASE("gumbel_softmax: errors") {
    const Tensor p({3, 2, 2});
    CHECK_THROWS_AS(gumbel_softmax(p, 0.0, Tensor({3, 2, 2})), ShapeError);
    CHECK_THROWS_AS(gumbel_softmax(p, -1.0, Tensor({3, 2, 2})), ShapeError);
    CHECK_THROWS_AS(gumbel_softmax(p, 1.0, Tensor({3, 2, 1})), ShapeError);
    CHECK_THROWS_AS(make_gate(GateKind::Triple, 4, 1, 0.0), ConfigError);
}

TEST_CASE("gumbel noise: argmax frequencies follow softmax(P)") {
    const Tensor p = per_position(1, 1, {0.3, -0.7, 1.1});
    const Tensor probs = softmax(p, 0);
    Rng rng(2024);
    std::array<int, 3> hits{};
    const int samples = 100000;
    for (int i = 0; i < samples; ++i) {
        const Tensor soft = gumbel_softmax(p, 1.0, sample_gumbel({3, 1, 1}, rng));
        ++hits[argmax_channels(soft)[0]];
    }
    for (std::size_t c = 0; c < 3; ++c) CHECK(std::abs(hits[c] / double(samples) - probs[c]) < 0.01);
}

TEST_CASE("gumbel noise: samples are finite even at the clamp limits") {
    Rng rng(5);
    const Tensor g = sample_gumbel({3, 16, 16}, rng);
    CHECK(g.all_finite());
    CHECK(std::isfinite(-std::log(-std::log(kUniformClamp))));
    CHECK(std::isfinite(-std::log(-std::log(1.0 - kUniformClamp))));
}

TEST_CASE("harden: examples and tie rule") {
    SoftMask soft{Tensor({3, 1, 2}, {0.1, 0.4, 0.2, 0.4, 0.7, 0.2}), GateKind::Triple};
    const SparseMask m = harden(soft);
    CHECK(m.at(0, 0) == Policy::Compute);
    CHECK(m.at(0, 1) == Policy::Skip);

    SoftMask binary{Tensor({2, 1, 2}, {0.5, 0.3, 0.5, 0.7}), GateKind::Residual};
    const SparseMask r = harden(binary);
    CHECK(r.at(0, 0) == Policy::Reuse);
    CHECK(r.at(0, 1) == Policy::Compute);
    binary.kind = GateKind::Static;
    CHECK(harden(binary).at(0, 0) == Policy::Skip);
    binary.kind = GateKind::Triple;
    CHECK_THROWS_AS(harden(binary), ShapeError);
}

TEST_CASE("harden: tau-invariant under frozen noise, 1000 triples") {
    std::mt19937_64 rng(77);
    std::uniform_real_distribution<double> log_tau(std::log(0.01), std::log(100.0));
    int mismatches = 0;
    for (int i = 0; i < 1000; ++i) {
        const Tensor p = oracle::random_tensor({3, 2, 2}, rng, -4, 4);
        Rng noise_rng(rng());
        const Tensor g = sample_gumbel(p.shape(), noise_rng);
        const double tau = std::exp(log_tau(rng));
        const auto at_one = harden({gumbel_softmax(p, 1.0, g), GateKind::Triple});
        const auto at_tau = harden({gumbel_softmax(p, tau, g), GateKind::Triple});
        mismatches += !(at_one == at_tau);
    }
    CHECK(mismatches == 0);
}

TEST_CASE("soft mask channel sums are 1 over the temperature grid") {
    std::mt19937_64 rng(31);
    for (double tau : {0.01, 0.1, 0.5, 1.0, 5.0, 10.0, 100.0}) {
        for (int trial = 0; trial < 20; ++trial) {
            const Tensor p = oracle::random_tensor({3, 5, 4}, rng, -6, 6);
            Rng noise_rng(rng());
            const Tensor soft = gumbel_softmax(p, tau, sample_gumbel(p.shape(), noise_rng));
            for (std::size_t i = 0; i < 20; ++i) {
                const double s = soft[i] + soft[20 + i] + soft[40 + i];
                CHECK(std::abs(s - 1.0) < 1e-6);
                for (std::size_t c = 0; c < 3; ++c) {
                    CHECK(soft[c * 20 + i] >= 0.0);
                    CHECK(soft[c * 20 + i] <= 1.0);
                }
            }
        }
    }
}

TEST_CASE("triple_gate: zero-initialised gate skips everywhere in inference") {
    std::mt19937_64 rng(3);
    const GateParams gate = make_gate(GateKind::Triple, 4, 2);
    const Tensor prev = oracle::random_tensor({4, 9, 9}, rng), cur = oracle::random_tensor({4, 9, 9}, rng);
    const GateOutput out = triple_gate(prev, cur, gate);
    CHECK(out.hard.height == 5);
    CHECK(out.hard.width == 5);
    CHECK(out.hard.count(Policy::Skip) == 25);
    for (double v : out.soft.values.data()) CHECK(v == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("triple_gate: bias toward compute yields an all-2 mask") {
    std::mt19937_64 rng(4);
    GateParams gate = make_gate(GateKind::Triple, 3, 1);
    (*gate.conv.bias)[2] = 5.0;
    const Tensor prev = oracle::random_tensor({3, 6, 6}, rng), cur = oracle::random_tensor({3, 6, 6}, rng);
    CHECK(triple_gate(prev, cur, gate).hard.count(Policy::Compute) == 36);
}

TEST_CASE("triple_gate: frozen noise, hard mask equals argmax(log softmax(P) + G)") {
    std::mt19937_64 rng(8);
    const GateParams gate = random_gate(GateKind::Triple, 3, 1, rng);
    const Tensor prev = oracle::random_tensor({3, 8, 8}, rng), cur = oracle::random_tensor({3, 8, 8}, rng);
    Rng noise_rng(9);
    const Tensor g = sample_gumbel({3, 8, 8}, noise_rng);
    const GateOutput out = triple_gate(prev, cur, gate, {&g, nullptr});

    const Tensor p = oracle::direct_conv(concat(prev, cur, 0), gate.conv.kernel, &*gate.conv.bias, 1, 1);
    for (std::size_t y = 0; y < 8; ++y)
        for (std::size_t x = 0; x < 8; ++x) {
            double lse = 0.0;
            for (std::size_t c = 0; c < 3; ++c) lse += std::exp(p.at(c, y, x));
            std::size_t best = 0;
            double best_v = -1e300;
            for (std::size_t c = 0; c < 3; ++c) {
                const double v = p.at(c, y, x) - std::log(lse) + g.at(c, y, x);
                if (v > best_v) best_v = v, best = c;
            }
            CHECK(static_cast<std::size_t>(out.hard.at(y, x)) == best);
        }
}

TEST_CASE("gates: inference is deterministic, training draws fresh noise") {
    std::mt19937_64 rng(10);
    GateParams gate = random_gate(GateKind::Triple, 2, 1, rng);
    const Tensor prev = oracle::random_tensor({2, 7, 7}, rng), cur = oracle::random_tensor({2, 7, 7}, rng);
    const auto a = triple_gate(prev, cur, gate), b = triple_gate(prev, cur, gate);
    CHECK(a.hard == b.hard);
    CHECK(a.soft.values == b.soft.values);

    gate.train_mode = true;
    CHECK_THROWS_AS(triple_gate(prev, cur, gate), ContractError);
    Rng r1(1), r2(1), r3(2);
    const auto t1 = triple_gate(prev, cur, gate, {nullptr, &r1});
    const auto t2 = triple_gate(prev, cur, gate, {nullptr, &r2});
    const auto t3 = triple_gate(prev, cur, gate, {nullptr, &r3});
    CHECK(t1.soft.values == t2.soft.values);
    CHECK_FALSE(t1.soft.values == t3.soft.values);
}

TEST_CASE("static and residual gates: policy sets and input checks") {
    std::mt19937_64 rng(12);
    const Tensor prev = oracle::random_tensor({3, 6, 6}, rng), cur = oracle::random_tensor({3, 6, 6}, rng);

    GateParams st = make_gate(GateKind::Static, 3, 1);
    CHECK(st.conv.kernel.shape() == Shape{2, 3, 3, 3});
    CHECK(static_gate(cur, st).hard.count(Policy::Skip) == 36);
    (*st.conv.bias)[1] = 1.0;
    CHECK(static_gate(cur, st).hard.count(Policy::Compute) == 36);

    GateParams res = make_gate(GateKind::Residual, 3, 1);
    CHECK(res.conv.kernel.shape() == Shape{2, 6, 3, 3});
    CHECK(residual_gate(prev, cur, res).hard.count(Policy::Reuse) == 36);
    (*res.conv.bias)[1] = 1.0;
    CHECK(residual_gate(prev, cur, res).hard.count(Policy::Compute) == 36);

    for (int i = 0; i < 20; ++i) {
        const auto s = static_gate(cur, random_gate(GateKind::Static, 3, 1, rng)).hard;
        CHECK(s.count(Policy::Reuse) == 0);
        const auto r = residual_gate(prev, cur, random_gate(GateKind::Residual, 3, 1, rng)).hard;
        CHECK(r.count(Policy::Skip) == 0);
    }

    CHECK_THROWS_AS(static_gate(cur, res), ShapeError);
    CHECK_THROWS_AS(residual_gate(prev, cur, st), ShapeError);
    CHECK_THROWS_AS(triple_gate(prev, cur, res), ShapeError);
    CHECK_THROWS_AS(triple_gate(oracle::random_tensor({3, 5, 6}, rng), cur, make_gate(GateKind::Triple, 3, 1)), ShapeError);
    CHECK_THROWS_AS(triple_gate(prev, cur, make_gate(GateKind::Triple, 4, 1)), ShapeError);
    CHECK_THROWS_AS(evaluate_gate(make_gate(GateKind::Triple, 3, 1), nullptr, cur), ContractError);
}

TEST_CASE("gate kind names round-trip") {
    for (GateKind k : {GateKind::Triple, GateKind::Static, GateKind::Residual}) CHECK(gate_kind_from_string(to_string(k)) == k);
    CHECK_THROWS_AS(gate_kind_from_string("binary"), ConfigError);
}
