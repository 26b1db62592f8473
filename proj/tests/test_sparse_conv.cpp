#include <doctest.h>

#include <random>

#include "oracles.hpp"
#include "trisparse/losses.hpp"
#include "trisparse/sparse_conv.hpp"

using namespace trisparse;

namespace {

std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

SparseLayer random_layer(std::mt19937_64& rng, std::size_t ci, std::size_t co, std::size_t k, std::size_t stride,
                         GateKind kind = GateKind::Triple) {
    SparseLayer layer;
    layer.id = "test";
    layer.spec.kernel = oracle::random_tensor({co, ci, k, k}, rng);
    layer.spec.bias = oracle::random_tensor({co}, rng);
    layer.spec.stride = stride;
    layer.spec.padding = k / 2;
    layer.gate = make_gate(kind, ci, stride);
    return layer;
}

// Literal per-pixel evaluation: dense convolution, then select by policy.
Tensor select_oracle(const Tensor& input, const SparseLayer& layer, const SparseMask& mask, const Tensor& prev) {
    const Tensor dense =
        oracle::direct_conv(input, layer.spec.kernel, &*layer.spec.bias, layer.spec.stride, layer.spec.padding);
    Tensor out(dense.shape());
    for (std::size_t c = 0; c < dense.dim(0); ++c)
        for (std::size_t y = 0; y < dense.dim(1); ++y)
            for (std::size_t x = 0; x < dense.dim(2); ++x) {
                const Policy p = mask.at(y, x);
                out.at(c, y, x) = p == Policy::Compute ? dense.at(c, y, x) : p == Policy::Reuse ? prev.at(c, y, x) : 0.0;
            }
    return out;
}

// Primes the layer with a dense frame so that sparse steps are allowed.
Tensor prime(SparseLayer& layer, const Tensor& frame) {
    return sparse_forward(layer, frame, nullptr, Processing::Dense).output;
}

SparseMask random_mask(std::size_t h, std::size_t w, std::mt19937_64& rng) {
    SparseMask m(h, w, Policy::Skip);
    for (auto& v : m.policy) v = static_cast<std::uint8_t>(pick(rng, 0, 2));
    return m;
}

}  // namespace

TEST_CASE("sparse_forward: all-compute equals dense over 200 random layers") {
    std::mt19937_64 rng(100);
    double worst = 0.0;
    for (int i = 0; i < 200; ++i) {
        const std::size_t ci = pick(rng, 1, 5), co = pick(rng, 1, 5), k = pick(rng, 0, 1) ? 3 : 1, s = pick(rng, 1, 2);
        SparseLayer layer = random_layer(rng, ci, co, k, s);
        const std::size_t h = pick(rng, 3, 10), w = pick(rng, 3, 10);
        const Tensor f0 = oracle::random_tensor({ci, h, w}, rng), f1 = oracle::random_tensor({ci, h, w}, rng);
        prime(layer, f0);
        SparseOptions opts;
        opts.forced_policy = Policy::Compute;
        const auto r = sparse_forward(layer, f1, nullptr, Processing::Sparse, opts);
        worst = std::max(worst, max_rel_diff(r.output, conv2d_dense(f1, layer.spec)));
        CHECK(r.flops == layer.spec.pixel_cost() * r.mask->area());
    }
    CHECK(worst <= 1e-12);
}

TEST_CASE("sparse_forward: all-reuse returns the cached output with zero flops") {
    std::mt19937_64 rng(101);
    SparseLayer layer = random_layer(rng, 3, 4, 3, 1);
    const Tensor first = prime(layer, oracle::random_tensor({3, 7, 7}, rng));
    SparseOptions opts;
    opts.forced_policy = Policy::Reuse;
    MacCounter macs;
    opts.counter = &macs;
    const auto r = sparse_forward(layer, oracle::random_tensor({3, 7, 7}, rng), nullptr, Processing::Sparse, opts);
    CHECK(r.output == first);
    CHECK(r.flops == 0);
    CHECK(macs.macs == 0);
}

TEST_CASE("sparse_forward: random masks on 4x9x9 agree with the select oracle") {
    std::mt19937_64 rng(102);
    for (int i = 0; i < 50; ++i) {
        SparseLayer layer = random_layer(rng, 4, 3, 3, pick(rng, 1, 2));
        prime(layer, oracle::random_tensor({4, 9, 9}, rng));
        const Tensor prev = *layer.state.prev_output;
        const Tensor cur = oracle::random_tensor({4, 9, 9}, rng);
        const SparseMask mask = random_mask(prev.dim(1), prev.dim(2), rng);
        SparseOptions opts;
        opts.forced_mask = &mask;
        const auto r = sparse_forward(layer, cur, nullptr, Processing::Sparse, opts);
        CHECK(max_abs_diff(r.output, select_oracle(cur, layer, mask, prev)) <= 1e-12 * std::max(1.0, max_abs_diff(prev, Tensor(prev.shape()))));
        CHECK(r.flops == layer.spec.pixel_cost() * mask.count(Policy::Compute));
    }
}

TEST_CASE("sparse_forward: exhaustive masks on a 2x2 output") {
    std::mt19937_64 rng(103);
    SparseLayer layer = random_layer(rng, 2, 3, 3, 2);
    const Tensor f0 = oracle::random_tensor({2, 4, 4}, rng), cur = oracle::random_tensor({2, 4, 4}, rng);
    int checked = 0;
    for (int code = 0; code < 81; ++code) {
        layer.reset_state();
        const Tensor prev = prime(layer, f0);
        SparseMask mask(2, 2, Policy::Skip);
        for (int i = 0, c = code; i < 4; ++i, c /= 3) mask.policy[i] = static_cast<std::uint8_t>(c % 3);
        SparseOptions opts;
        opts.forced_mask = &mask;
        const auto r = sparse_forward(layer, cur, nullptr, Processing::Sparse, opts);
        CHECK(max_abs_diff(r.output, select_oracle(cur, layer, mask, prev)) <= 1e-12);
        ++checked;
    }
    CHECK(checked == 81);
}

TEST_CASE("sparse_forward: flops grow by c_k per added compute position") {
    std::mt19937_64 rng(104);
    SparseLayer layer = random_layer(rng, 3, 5, 3, 1);
    const Tensor f0 = oracle::random_tensor({3, 5, 5}, rng), cur = oracle::random_tensor({3, 5, 5}, rng);
    SparseMask mask(5, 5, Policy::Reuse);
    std::uint64_t last = 0;
    for (std::size_t i = 0; i <= 25; ++i) {
        layer.reset_state();
        prime(layer, f0);
        SparseOptions opts;
        opts.forced_mask = &mask;
        const auto r = sparse_forward(layer, cur, nullptr, Processing::Sparse, opts);
        CHECK(r.flops == 3 * 5 * 9 * i);
        if (i > 0) CHECK(r.flops - last == layer.spec.pixel_cost());
        last = r.flops;
        if (i < 25) mask.policy[i] = 2;
    }
}

TEST_CASE("sparse_forward: gate-driven step matches the gate's own mask") {
    std::mt19937_64 rng(105);
    SparseLayer layer = random_layer(rng, 3, 4, 3, 2);
    layer.gate->conv.kernel = oracle::random_tensor(layer.gate->conv.kernel.shape(), rng);
    layer.gate->conv.bias = oracle::random_tensor({3}, rng);
    const Tensor f0 = oracle::random_tensor({3, 8, 8}, rng), cur = oracle::random_tensor({3, 8, 8}, rng);
    const Tensor prev = prime(layer, f0);
    MacCounter conv_macs, gate_macs;
    SparseOptions opts;
    opts.counter = &conv_macs;
    opts.gate_counter = &gate_macs;
    const auto r = sparse_forward(layer, cur, nullptr, Processing::Sparse, opts);
    const GateOutput expected = triple_gate(f0, cur, *layer.gate);
    CHECK(*r.mask == expected.hard);
    CHECK(max_abs_diff(r.output, select_oracle(cur, layer, expected.hard, prev)) <= 1e-12);
    CHECK(r.gate_flops == 3 * 6 * 9 * 16);
    CHECK(gate_macs.macs == r.gate_flops);
    CHECK(conv_macs.macs == r.flops);
    // zero-initialised gate: everything is skipped
    SparseLayer fresh = random_layer(rng, 3, 4, 3, 2);
    prime(fresh, f0);
    const auto z = sparse_forward(fresh, cur, nullptr, Processing::Sparse);
    CHECK(z.mask->count(Policy::Skip) == 16);
    CHECK(z.output == Tensor({4, 4, 4}));
}

TEST_CASE("sparse_forward: explicit previous input overrides the cache") {
    std::mt19937_64 rng(106);
    SparseLayer layer = random_layer(rng, 2, 2, 3, 1);
    layer.gate->conv.kernel = oracle::random_tensor(layer.gate->conv.kernel.shape(), rng);
    const Tensor f0 = oracle::random_tensor({2, 6, 6}, rng), other = oracle::random_tensor({2, 6, 6}, rng);
    const Tensor cur = oracle::random_tensor({2, 6, 6}, rng);
    prime(layer, f0);
    const auto r = sparse_forward(layer, cur, &other, Processing::Sparse);
    CHECK(*r.mask == triple_gate(other, cur, *layer.gate).hard);
}

TEST_CASE("reset_state: contract and idempotence") {
    std::mt19937_64 rng(107);
    SparseLayer layer = random_layer(rng, 2, 2, 3, 1);
    const Tensor f = oracle::random_tensor({2, 5, 5}, rng);
    CHECK_THROWS_AS(sparse_forward(layer, f, nullptr, Processing::Sparse), ContractError);
    prime(layer, f);
    CHECK(layer.state.prev_output.has_value());
    layer.reset_state();
    layer.reset_state();
    CHECK_FALSE(layer.state.prev_output.has_value());
    CHECK_FALSE(layer.state.prev_input.has_value());
    CHECK(layer.state.frame_index_of_prev == -1);
    try {
        sparse_forward(layer, f, nullptr, Processing::Sparse);
        FAIL("expected a contract violation");
    } catch (const ContractError& e) {
        CHECK(std::string(e.what()).find("mixed-processing contract violated") != std::string::npos);
    }
    prime(layer, f);
    SparseOptions opts;
    opts.frame_index = 7;
    CHECK_NOTHROW(sparse_forward(layer, f, nullptr, Processing::Sparse, opts));
    CHECK(layer.state.frame_index_of_prev == 7);
}

TEST_CASE("sparse_forward: shape errors") {
    std::mt19937_64 rng(108);
    SparseLayer layer = random_layer(rng, 2, 2, 3, 1);
    prime(layer, oracle::random_tensor({2, 5, 5}, rng));
    CHECK_THROWS_AS(sparse_forward(layer, oracle::random_tensor({3, 5, 5}, rng), nullptr, Processing::Dense), ShapeError);
    CHECK_THROWS_AS(sparse_forward(layer, oracle::random_tensor({2, 6, 5}, rng), nullptr, Processing::Sparse), ShapeError);
    prime(layer, oracle::random_tensor({2, 5, 5}, rng));
    SparseMask wrong(4, 5, Policy::Compute);
    SparseOptions opts;
    opts.forced_mask = &wrong;
    CHECK_THROWS_AS(sparse_forward(layer, oracle::random_tensor({2, 5, 5}, rng), nullptr, Processing::Sparse, opts), ShapeError);
}

TEST_CASE("baseline gates through the sparse layer") {
    std::mt19937_64 rng(109);
    const Tensor f0 = oracle::random_tensor({3, 6, 6}, rng), cur = oracle::random_tensor({3, 6, 6}, rng);

    SparseLayer st = random_layer(rng, 3, 2, 3, 1, GateKind::Static);
    prime(st, f0);
    SparseOptions all;
    all.forced_policy = Policy::Compute;
    CHECK(max_rel_diff(sparse_forward(st, cur, nullptr, Processing::Sparse, all).output, conv2d_dense(cur, st.spec)) <= 1e-12);
    CHECK(sparse_forward(st, cur, nullptr, Processing::Sparse).output == Tensor({2, 6, 6}));
    SparseOptions reuse;
    reuse.forced_policy = Policy::Reuse;
    CHECK_THROWS_AS(sparse_forward(st, cur, nullptr, Processing::Sparse, reuse), ContractError);

    SparseLayer res = random_layer(rng, 3, 2, 3, 1, GateKind::Residual);
    const Tensor prev = prime(res, f0);
    CHECK(sparse_forward(res, cur, nullptr, Processing::Sparse).output == prev);
    CHECK(max_rel_diff(sparse_forward(res, cur, nullptr, Processing::Sparse, all).output, conv2d_dense(cur, res.spec)) <= 1e-12);

    SparseLayer dense = random_layer(rng, 3, 2, 3, 1);
    dense.gate.reset();
    const auto d = sparse_forward(dense, cur, nullptr, Processing::Sparse);
    CHECK_FALSE(d.mask.has_value());
    CHECK(d.output == conv2d_dense(cur, dense.spec));
}

namespace {

LayerVars params_of(const SparseLayer& layer) {
    return {ag::parameter(layer.spec.kernel), ag::parameter(*layer.spec.bias), ag::parameter(layer.gate->conv.kernel),
            ag::parameter(*layer.gate->conv.bias)};
}

}  // namespace

TEST_CASE("sparse_forward_graph: forward value equals the executed layer") {
    std::mt19937_64 rng(110);
    for (GateKind kind : {GateKind::Triple, GateKind::Static, GateKind::Residual}) {
        SparseLayer a = random_layer(rng, 3, 4, 3, 2, kind);
        a.gate->conv.kernel = oracle::random_tensor(a.gate->conv.kernel.shape(), rng);
        a.gate->conv.bias = oracle::random_tensor({gate_channels(kind)}, rng);
        SparseLayer b = a;
        const Tensor f0 = oracle::random_tensor({3, 8, 8}, rng), cur = oracle::random_tensor({3, 8, 8}, rng);
        prime(a, f0);
        prime(b, f0);
        const auto exec = sparse_forward(a, cur, nullptr, Processing::Sparse);
        const auto graph = sparse_forward_graph(b, params_of(b), ag::parameter(cur), Processing::Sparse);
        CHECK(*exec.mask == *graph.mask);
        CHECK(max_abs_diff(exec.output, graph.output.value()) <= 1e-12);
        CHECK(exec.flops == graph.flops);
        CHECK(exec.gate_flops == graph.gate_flops);
        CHECK(*b.state.prev_output == graph.output.value());
    }
}

TEST_CASE("sparse_forward_graph: gate gradients match the soft surrogate (3x6x6)") {
    std::mt19937_64 rng(111);
    SparseLayer layer = random_layer(rng, 3, 2, 3, 1);
    layer.gate->conv.kernel = oracle::random_tensor(layer.gate->conv.kernel.shape(), rng, -0.3, 0.3);
    layer.gate->conv.bias = oracle::random_tensor({3}, rng);
    layer.gate->train_mode = true;
    const Tensor f0 = oracle::random_tensor({3, 6, 6}, rng), cur = oracle::random_tensor({3, 6, 6}, rng);
    const Tensor prev = prime(layer, f0);
    Rng noise_rng(5);
    const Tensor noise = sample_gumbel({3, 6, 6}, noise_rng);
    const Tensor w = oracle::random_tensor({2, 6, 6}, rng);

    const LayerVars vars = params_of(layer);
    SparseOptions opts;
    opts.noise.frozen = &noise;
    const auto r = sparse_forward_graph(layer, vars, ag::constant(cur), Processing::Sparse, opts);
    const auto grads = ag::backward(ag::sum(ag::mul(r.output, ag::constant(w))));

    // soft surrogate: s_compute * conv + s_reuse * prev
    const Tensor dense = oracle::direct_conv(cur, layer.spec.kernel, &*layer.spec.bias, 1, 1);
    auto surrogate = [&](const Tensor& gk, const Tensor& gb) {
        const Tensor logits = oracle::direct_conv(concat(f0, cur, 0), gk, &gb, 1, 1);
        const Tensor soft = softmax(add(log_softmax(logits, 0), noise), 0);
        double total = 0.0;
        for (std::size_t c = 0; c < 2; ++c)
            for (std::size_t i = 0; i < 36; ++i)
                total += w[c * 36 + i] * (soft[72 + i] * dense[c * 36 + i] + soft[36 + i] * prev[c * 36 + i]);
        return total;
    };
    const Tensor gb0 = *layer.gate->conv.bias;
    const Tensor gk0 = layer.gate->conv.kernel;
    const Tensor num_k = oracle::numeric_grad([&](const Tensor& k) { return surrogate(k, gb0); }, gk0);
    const Tensor num_b = oracle::numeric_grad([&](const Tensor& b) { return surrogate(gk0, b); }, gb0);
    CHECK(oracle::grad_rel_error(grads.of(vars.gate_kernel), num_k) < 1e-5);
    CHECK(oracle::grad_rel_error(grads.of(*vars.gate_bias), num_b) < 1e-5);
}

TEST_CASE("sparse_forward_graph: kernel gradients at all-compute equal dense gradients") {
    std::mt19937_64 rng(112);
    SparseLayer layer = random_layer(rng, 3, 4, 3, 2);
    const Tensor f0 = oracle::random_tensor({3, 7, 7}, rng), cur = oracle::random_tensor({3, 7, 7}, rng);
    const Tensor w = oracle::random_tensor({4, 4, 4}, rng);
    prime(layer, f0);
    const LayerVars vars = params_of(layer);
    SparseOptions opts;
    opts.forced_policy = Policy::Compute;
    const auto r = sparse_forward_graph(layer, vars, ag::constant(cur), Processing::Sparse, opts);
    const auto g_sparse = ag::backward(ag::sum(ag::mul(r.output, ag::constant(w))));

    const auto k = ag::parameter(layer.spec.kernel);
    const auto b = ag::parameter(*layer.spec.bias);
    const auto g_dense = ag::backward(ag::sum(ag::mul(ag::conv2d(ag::constant(cur), k, b, 2, 1), ag::constant(w))));
    CHECK(max_abs_diff(g_sparse.of(vars.kernel), g_dense.of(k)) <= 1e-10);
    CHECK(max_abs_diff(g_sparse.of(*vars.bias), g_dense.of(b)) <= 1e-10);
}

TEST_CASE("sparse_forward_graph: all-skip kernel gradients come from soft compute weights") {
    std::mt19937_64 rng(113);
    const Tensor f0 = oracle::random_tensor({2, 6, 6}, rng), cur = oracle::random_tensor({2, 6, 6}, rng);
    const Tensor w = oracle::random_tensor({3, 6, 6}, rng);

    // zero-initialised gate: hard mask all skip, soft compute channel 1/3
    SparseLayer layer = random_layer(rng, 2, 3, 3, 1);
    prime(layer, f0);
    LayerVars vars = params_of(layer);
    auto r = sparse_forward_graph(layer, vars, ag::constant(cur), Processing::Sparse);
    CHECK(r.mask->count(Policy::Skip) == 36);
    CHECK(r.output.value() == Tensor({3, 6, 6}));
    const Tensor gk = ag::backward(ag::sum(ag::mul(r.output, ag::constant(w)))).of(vars.kernel);

    const auto k = ag::parameter(layer.spec.kernel);
    const Tensor dense_gk =
        ag::backward(ag::sum(ag::mul(ag::conv2d(ag::constant(cur), k, std::nullopt, 1, 1), ag::constant(scale(w, 1.0 / 3.0)))))
            .of(k);
    CHECK(max_abs_diff(gk, dense_gk) <= 1e-12);
    CHECK(max_abs_diff(gk, Tensor(gk.shape())) > 0.0);

    // soft compute weight underflows to exactly 0: no kernel gradient
    (*layer.gate->conv.bias)[0] = 800.0;
    vars = params_of(layer);
    r = sparse_forward_graph(layer, vars, ag::constant(cur), Processing::Sparse);
    for (std::size_t i = 0; i < 36; ++i) REQUIRE(r.soft->value()[72 + i] == 0.0);
    const Tensor gz = ag::backward(ag::sum(ag::mul(r.output, ag::constant(w)))).of(vars.kernel);
    CHECK(gz == Tensor(gz.shape()));
}

TEST_CASE("mask images: 0/128/255 and back") {
    std::mt19937_64 rng(114);
    const SparseMask m = random_mask(5, 7, rng);
    const Image8 img = mask_to_image(m);
    CHECK(img.width == 7);
    CHECK(img.height == 5);
    for (std::size_t i = 0; i < m.area(); ++i) CHECK(img.pixels[i] == std::array<int, 3>{0, 128, 255}[m.policy[i]]);
    CHECK(mask_from_image(img) == m);
    Image8 bad = img;
    bad.pixels[3] = 17;
    CHECK_THROWS_AS(mask_from_image(bad), FormatError);
}

TEST_CASE("full chain: gate, sparse convolution, segmentation and sparsity losses") {
    // Straight-through gradients equal the exact gradient of the surrogate in
    // which the hard output is replaced by its soft mixture and the segmentation
    // loss by its linearisation at the hard output.
    LossConfig cfg;
    cfg.gamma = 0.7;
    cfg.beta = 1.3;
    cfg.sparse_target = 0.1;
    const ScheduleState band{0.06, 0.02, 0, 1};
    for (std::uint64_t instance = 0; instance < 5; ++instance) {
        std::mt19937_64 rng(500 + instance);
        SparseLayer layer = random_layer(rng, 3, 2, 3, 1);
        layer.gate->conv.kernel = oracle::random_tensor(layer.gate->conv.kernel.shape(), rng, -0.3, 0.3);
        layer.gate->conv.bias = oracle::random_tensor({3}, rng);
        layer.gate->train_mode = true;
        const Tensor f0 = oracle::random_tensor({3, 6, 6}, rng), cur = oracle::random_tensor({3, 6, 6}, rng);
        const Tensor prev = prime(layer, f0);
        Rng noise_rng(600 + instance);
        const Tensor noise = sample_gumbel({3, 6, 6}, noise_rng);
        const Tensor head = oracle::random_tensor({2, 2, 1, 1}, rng);
        Tensor target({6, 6});
        for (std::size_t i = 0; i < 36; ++i) target[i] = static_cast<double>(rng() % 2);

        SparseOptions opts;
        opts.noise.frozen = &noise;
        const LayerVars vars = params_of(layer);
        const auto r = sparse_forward_graph(layer, vars, ag::constant(cur), Processing::Sparse, opts);
        const ag::Var head_var = ag::parameter(head);
        const ag::Var seg = bootstrapped_ce(ag::conv2d(r.output, head_var, std::nullopt, 1, 0), target, 1.0);
        const ag::Var s = soft_sparsity(*r.soft, 2);
        const ag::Var loss = total_loss(seg, {layer_sparse_loss(s, band)},
                                        global_sparse_loss({{s, 54.0, 36.0}}, cfg.sparse_target), cfg);
        const auto grads = ag::backward(loss);

        // upstream gradient of the segmentation loss at the hard output
        const Tensor hard_out = r.output.value();
        const ag::Var out_leaf = ag::parameter(hard_out);
        const Tensor g_out =
            ag::backward(bootstrapped_ce(ag::conv2d(out_leaf, ag::constant(head), std::nullopt, 1, 0), target, 1.0))
                .of(out_leaf);

        auto surrogate = [&](const Tensor& gk, const Tensor& gb, const Tensor& k) {
            const Tensor dense = oracle::direct_conv(cur, k, &*layer.spec.bias, 1, 1);
            const Tensor logits = oracle::direct_conv(concat(f0, cur, 0), gk, &gb, 1, 1);
            const Tensor soft = softmax(add(log_softmax(logits, 0), noise), 0);
            double linear = 0.0, mean_compute = 0.0;
            for (std::size_t i = 0; i < 36; ++i) mean_compute += soft[72 + i] / 36.0;
            for (std::size_t c = 0; c < 2; ++c)
                for (std::size_t i = 0; i < 36; ++i)
                    linear += g_out[c * 36 + i] * (soft[72 + i] * dense[c * 36 + i] + soft[36 + i] * prev[c * 36 + i]);
            return total_loss(linear, {layer_sparse_loss(mean_compute, band)},
                              global_sparse_loss({{mean_compute, 54.0, 36.0}}, cfg.sparse_target), cfg);
        };
        const Tensor gk0 = layer.gate->conv.kernel, gb0 = *layer.gate->conv.bias, k0 = layer.spec.kernel;
        const Tensor num_gk = oracle::numeric_grad([&](const Tensor& t) { return surrogate(t, gb0, k0); }, gk0);
        const Tensor num_gb = oracle::numeric_grad([&](const Tensor& t) { return surrogate(gk0, t, k0); }, gb0);
        const Tensor num_k = oracle::numeric_grad([&](const Tensor& t) { return surrogate(gk0, gb0, t); }, k0);
        CHECK(oracle::grad_rel_error(grads.of(vars.gate_kernel), num_gk) < 1e-5);
        CHECK(oracle::grad_rel_error(grads.of(*vars.gate_bias), num_gb) < 1e-5);
        CHECK(oracle::grad_rel_error(grads.of(vars.kernel), num_k) < 1e-5);

        // the head sits after the hard output, so its gradient is exact
        const Tensor num_head = oracle::numeric_grad(
            [&](const Tensor& h) { return bootstrapped_ce(oracle::direct_conv(hard_out, h, nullptr, 1, 0), target, 1.0); },
            head);
        CHECK(oracle::grad_rel_error(grads.of(head_var), num_head) < 1e-5);
    }
}
