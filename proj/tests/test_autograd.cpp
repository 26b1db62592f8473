#include <doctest.h>

#include <random>

#include "grad_check.hpp"
#include "trisparse/autograd.hpp"

using namespace trisparse;
using oracle::max_op_grad_error;
using oracle::pick;
using oracle::VarFn;

namespace {

void check_op(const char* name, const VarFn& f, const std::function<std::vector<Tensor>(std::mt19937_64&)>& make_inputs,
              int instances = 50) {
    std::mt19937_64 rng(std::hash<std::string>{}(name));
    double worst = 0.0;
    for (int i = 0; i < instances; ++i) worst = std::max(worst, max_op_grad_error(f, make_inputs(rng), rng));
    INFO(name << " worst relative gradient error " << worst);
    CHECK(worst < 1e-5);
}

}  // namespace

TEST_CASE("backward: sum(x*x) gives 2x") {
    auto x = ag::parameter(Tensor({3}, {1.0, 2.0, 3.0}));
    const auto g = ag::backward(ag::sum(ag::mul(x, x)));
    CHECK(g.of(x) == Tensor({3}, {2.0, 4.0, 6.0}));
}

TEST_CASE("backward: conv kernel and input gradients match finite differences") {
    std::mt19937_64 rng(11);
    const Tensor x0 = oracle::random_tensor({2, 5, 5}, rng);
    const Tensor k0 = oracle::random_tensor({3, 2, 3, 3}, rng);
    auto x = ag::parameter(x0);
    auto k = ag::parameter(k0);
    const auto g = ag::backward(ag::sum(ag::conv2d(x, k, std::nullopt, 1, 0)));
    auto loss_k = [&](const Tensor& kk) { return sum(oracle::direct_conv(x0, kk, nullptr, 1, 0)); };
    auto loss_x = [&](const Tensor& xx) { return sum(oracle::direct_conv(xx, k0, nullptr, 1, 0)); };
    CHECK(oracle::grad_rel_error(g.of(k), oracle::numeric_grad(loss_k, k0)) < 1e-6);
    CHECK(oracle::grad_rel_error(g.of(x), oracle::numeric_grad(loss_x, x0)) < 1e-6);
}

TEST_CASE("backward: sum(softmax(x)) has zero gradient") {
    std::mt19937_64 rng(12);
    auto x = ag::parameter(oracle::random_tensor({5}, rng));
    const Tensor g = ag::backward(ag::sum(ag::softmax(x, 0))).of(x);
    for (double v : g.data()) CHECK(std::abs(v) < 1e-10);
}

TEST_CASE("backward: non-scalar loss is rejected") {
    auto x = ag::parameter(Tensor({2}, 1.0));
    CHECK_THROWS_AS(ag::backward(x), ShapeError);
}

TEST_CASE("backward: double use doubles the gradient, passes are independent") {
    std::mt19937_64 rng(13);
    const Tensor x0 = oracle::random_tensor({4}, rng);
    const Tensor w = oracle::random_tensor({4}, rng);
    auto x = ag::parameter(x0);
    const auto single = ag::backward(ag::sum(ag::mul(x, ag::constant(w))));
    auto once = ag::mul(x, ag::constant(w));
    const auto loss = ag::sum(ag::add(once, once));
    const auto twice = ag::backward(loss);
    CHECK(twice.of(x) == scale(single.of(x), 2.0));
    CHECK(ag::backward(loss).of(x) == twice.of(x));
}

TEST_CASE("ste_select: forward is hard, backward is identity to soft") {
    const Tensor hard({3}, {0.0, 0.0, 1.0});
    const Tensor w({3}, {0.5, -1.5, 2.25});
    auto soft = ag::parameter(Tensor({3}, {0.2, 0.3, 0.5}));
    const auto sel = ag::ste_select(hard, soft);
    const auto loss = ag::sum(ag::mul(sel, ag::constant(w)));
    CHECK(loss.value().item() == 2.25);
    CHECK(ag::backward(loss).of(soft) == w);

    auto same = ag::parameter(Tensor({3}, {0.0, 1.0, 0.0}));
    const auto id = ag::ste_select(same.value(), same);
    CHECK(id.value() == same.value());
    CHECK(ag::backward(ag::sum(ag::mul(id, ag::constant(w)))).of(same) == w);
    CHECK_THROWS_AS(ag::ste_select(Tensor({2}), soft), ShapeError);
}

TEST_CASE("gradient suite: every op against central differences, 50 instances each") {
    check_op("add", [](const auto& v) { return ag::add(v[0], v[1]); },
             [](auto& r) {
                 Shape s{pick(r, 1, 3), pick(r, 1, 4), pick(r, 1, 4)};
                 return std::vector<Tensor>{oracle::random_tensor(s, r), oracle::random_tensor(s, r)};
             });
    check_op("sub", [](const auto& v) { return ag::sub(v[0], v[1]); },
             [](auto& r) {
                 Shape s{pick(r, 1, 6)};
                 return std::vector<Tensor>{oracle::random_tensor(s, r), oracle::random_tensor(s, r)};
             });
    check_op("mul", [](const auto& v) { return ag::mul(v[0], v[1]); },
             [](auto& r) {
                 Shape s{pick(r, 1, 3), pick(r, 1, 4), pick(r, 1, 4)};
                 return std::vector<Tensor>{oracle::random_tensor(s, r), oracle::random_tensor(s, r)};
             });
    check_op("mul_broadcast", [](const auto& v) { return ag::mul(v[0], v[1]); },
             [](auto& r) {
                 const std::size_t c = pick(r, 1, 4), h = pick(r, 1, 4), w = pick(r, 1, 4);
                 return std::vector<Tensor>{oracle::random_tensor({c, h, w}, r), oracle::random_tensor({1, h, w}, r)};
             });
    check_op("scale_add_scalar", [](const auto& v) { return ag::add_scalar(ag::scale(v[0], -2.5), 0.75); },
             [](auto& r) { return std::vector<Tensor>{oracle::random_tensor({pick(r, 1, 8)}, r)}; });
    check_op("relu", [](const auto& v) { return ag::relu(v[0]); },
             [](auto& r) { return std::vector<Tensor>{oracle::random_tensor({pick(r, 1, 3), pick(r, 2, 5), pick(r, 2, 5)}, r)}; });
    check_op("conv2d",
             [](const auto& v) { return ag::conv2d(v[0], v[1], v[2], 1 + (v[0].shape()[1] % 2), v[1].shape()[2] / 2); },
             [](auto& r) {
                 const std::size_t ci = pick(r, 1, 3), co = pick(r, 1, 3), k = pick(r, 0, 1) ? 3 : 1;
                 return std::vector<Tensor>{oracle::random_tensor({ci, pick(r, 3, 6), pick(r, 3, 6)}, r),
                                            oracle::random_tensor({co, ci, k, k}, r), oracle::random_tensor({co}, r)};
             });
    check_op("softmax", [](const auto& v) { return ag::softmax(v[0], v[0].shape()[0] % 2); },
             [](auto& r) { return std::vector<Tensor>{oracle::random_tensor({pick(r, 2, 4), pick(r, 2, 4)}, r, -3, 3)}; });
    check_op("log_softmax", [](const auto& v) { return ag::log_softmax(v[0], 0); },
             [](auto& r) { return std::vector<Tensor>{oracle::random_tensor({pick(r, 2, 4), pick(r, 1, 4), 2}, r, -3, 3)}; });
    check_op("concat", [](const auto& v) { return ag::concat({v[0], v[1]}, 0); },
             [](auto& r) {
                 const std::size_t h = pick(r, 1, 4), w = pick(r, 1, 4);
                 return std::vector<Tensor>{oracle::random_tensor({pick(r, 1, 3), h, w}, r),
                                            oracle::random_tensor({pick(r, 1, 3), h, w}, r)};
             });
    check_op("slice", [](const auto& v) { return ag::slice(v[0], 1, 1, v[0].shape()[1]); },
             [](auto& r) { return std::vector<Tensor>{oracle::random_tensor({pick(r, 1, 3), pick(r, 2, 5), 3}, r)}; });
    for (int mode = 0; mode < 4; ++mode) {
        const bool ta = mode & 1, tb = mode & 2;
        check_op(("matmul" + std::to_string(mode)).c_str(), [ta, tb](const auto& v) { return ag::matmul(v[0], v[1], ta, tb); },
                 [ta, tb](auto& r) {
                     const std::size_t m = pick(r, 1, 4), k = pick(r, 1, 4), n = pick(r, 1, 4);
                     return std::vector<Tensor>{oracle::random_tensor(ta ? Shape{k, m} : Shape{m, k}, r),
                                                oracle::random_tensor(tb ? Shape{n, k} : Shape{k, n}, r)};
                 });
    }
    check_op("sum", [](const auto& v) { return ag::sum(ag::mul(v[0], v[0])); },
             [](auto& r) { return std::vector<Tensor>{oracle::random_tensor({pick(r, 1, 6), 2}, r)}; });
    check_op("reshape", [](const auto& v) { return ag::reshape(v[0], {v[0].value().size()}); },
             [](auto& r) { return std::vector<Tensor>{oracle::random_tensor({2, pick(r, 1, 4)}, r)}; });
    check_op("upsample_bilinear", [](const auto& v) { return ag::upsample_bilinear(v[0], 2 * v[0].shape()[1], 8); },
             [](auto& r) { return std::vector<Tensor>{oracle::random_tensor({pick(r, 1, 2), pick(r, 1, 4), pick(r, 1, 4)}, r)}; });
}

TEST_CASE("ste_gate: hard forward, soft-surrogate backward") {
    std::mt19937_64 rng(21);
    const Tensor t0 = oracle::random_tensor({3, 2, 4}, rng);
    const Tensor s0 = oracle::random_tensor({1, 2, 4}, rng, 0.0, 1.0);
    const Tensor w = oracle::random_tensor({3, 2, 4}, rng);
    Tensor hard({1, 2, 4});
    for (std::size_t i = 0; i < 8; i += 3) hard[i] = 1.0;

    auto term = ag::parameter(t0);
    auto soft = ag::parameter(s0);
    const auto gated = ag::ste_gate(term, hard, soft);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < 8; ++i) CHECK(gated.value()[c * 8 + i] == t0[c * 8 + i] * hard[i]);

    const auto g = ag::backward(ag::sum(ag::mul(gated, ag::constant(w))));
    auto surrogate = [&](const Tensor& tt, const Tensor& ss) {
        Tensor out = tt;
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t i = 0; i < 8; ++i) out[c * 8 + i] *= ss[i];
        return sum(mul(out, w));
    };
    CHECK(oracle::grad_rel_error(g.of(term), oracle::numeric_grad([&](const Tensor& x) { return surrogate(x, s0); }, t0)) < 1e-8);
    CHECK(oracle::grad_rel_error(g.of(soft), oracle::numeric_grad([&](const Tensor& x) { return surrogate(t0, x); }, s0)) < 1e-8);
    CHECK_THROWS_AS(ag::ste_gate(term, Tensor({1, 2, 3}), soft), ShapeError);
}
