#include "trisparse/gating.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace trisparse {

namespace {

constexpr std::array<Policy, 3> kTriplePolicies{Policy::Skip, Policy::Reuse, Policy::Compute};
constexpr std::array<Policy, 2> kStaticPolicies{Policy::Skip, Policy::Compute};
constexpr std::array<Policy, 2> kResidualPolicies{Policy::Reuse, Policy::Compute};

}  // namespace

std::string to_string(GateKind kind) {
    switch (kind) {
        case GateKind::Triple: return "triple";
        case GateKind::Static: return "static";
        case GateKind::Residual: return "residual";
    }
    return "?";
}

GateKind gate_kind_from_string(const std::string& name) {
    if (name == "triple") return GateKind::Triple;
    if (name == "static") return GateKind::Static;
    if (name == "residual") return GateKind::Residual;
    throw ConfigError("unknown gate kind '" + name + "'");
}

std::size_t gate_channels(GateKind kind) { return kind == GateKind::Triple ? 3 : 2; }

std::span<const Policy> gate_policies(GateKind kind) {
    switch (kind) {
        case GateKind::Triple: return kTriplePolicies;
        case GateKind::Static: return kStaticPolicies;
        case GateKind::Residual: return kResidualPolicies;
    }
    return {};
}

bool gate_uses_previous(GateKind kind) { return kind != GateKind::Static; }

SparseMask::SparseMask(std::size_t h, std::size_t w, Policy fill)
    : height(h), width(w), policy(h * w, static_cast<std::uint8_t>(fill)) {}

std::size_t SparseMask::count(Policy p) const {
    std::size_t n = 0;
    for (auto v : policy) n += v == static_cast<std::uint8_t>(p);
    return n;
}

Tensor SparseMask::indicator(Policy p) const {
    Tensor t({1, height, width});
    for (std::size_t i = 0; i < policy.size(); ++i) t[i] = policy[i] == static_cast<std::uint8_t>(p) ? 1.0 : 0.0;
    return t;
}

GateParams make_gate(GateKind kind, std::size_t in_channels, std::size_t stride, double tau) {
    if (!(tau > 0.0)) throw ConfigError("gate temperature must be positive");
    GateParams g;
    g.kind = kind;
    g.tau = tau;
    const std::size_t cin = gate_uses_previous(kind) ? 2 * in_channels : in_channels;
    g.conv.kernel = Tensor({gate_channels(kind), cin, 3, 3});
    g.conv.bias = Tensor({gate_channels(kind)});
    g.conv.stride = stride;
    g.conv.padding = 1;
    return g;
}

Tensor sample_gumbel(const Shape& shape, Rng& rng) {
    Tensor g(shape);
    for (double& v : g.data()) {
        const double u = std::clamp(rng.uniform(), kUniformClamp, 1.0 - kUniformClamp);
        v = -std::log(-std::log(u));
    }
    return g;
}

Tensor gumbel_softmax(const Tensor& logits, double tau, const Tensor& noise) {
    return gumbel_softmax(ag::constant(logits), tau, noise).value();
}

ag::Var gumbel_softmax(const ag::Var& logits, double tau, const Tensor& noise) {
    if (!(tau > 0.0)) throw ShapeError("gumbel_softmax: temperature must be positive");
    if (!noise.same_shape(logits.value())) {
        throw ShapeError("gumbel_softmax: noise " + shape_str(noise.shape()) + " vs logits " + shape_str(logits.shape()));
    }
    const ag::Var perturbed = ag::add(ag::log_softmax(logits, 0), ag::constant(noise));
    return ag::softmax(ag::scale(perturbed, 1.0 / tau), 0);
}

std::vector<std::uint8_t> argmax_channels(const Tensor& values) {
    if (values.ndim() != 3) throw ShapeError("argmax_channels expects P x H x W, got " + shape_str(values.shape()));
    const std::size_t p = values.dim(0), area = values.dim(1) * values.dim(2);
    std::vector<std::uint8_t> out(area, 0);
    for (std::size_t i = 0; i < area; ++i) {
        double best = values[i];
        for (std::size_t c = 1; c < p; ++c) {
            if (values[c * area + i] > best) {  // strict: ties keep the lower index
                best = values[c * area + i];
                out[i] = static_cast<std::uint8_t>(c);
            }
        }
    }
    return out;
}

SparseMask harden(const SoftMask& soft) {
    const auto channels = argmax_channels(soft.values);
    const auto policies = gate_policies(soft.kind);
    if (soft.values.dim(0) != policies.size()) {
        throw ShapeError("harden: soft mask has " + std::to_string(soft.values.dim(0)) + " channels, gate kind " +
                         to_string(soft.kind) + " expects " + std::to_string(policies.size()));
    }
    SparseMask m(soft.height(), soft.width(), Policy::Skip);
    for (std::size_t i = 0; i < channels.size(); ++i) m.policy[i] = static_cast<std::uint8_t>(policies[channels[i]]);
    return m;
}

Tensor resolve_noise(const GateParams& params, const Shape& shape, const GateNoise& noise) {
    if (noise.frozen) {
        if (noise.frozen->shape() != shape) {
            throw ShapeError("gate noise " + shape_str(noise.frozen->shape()) + " vs logits " + shape_str(shape));
        }
        return *noise.frozen;
    }
    if (params.train_mode) {
        if (!noise.rng) throw ContractError("train-mode gate evaluation needs a random source");
        return sample_gumbel(shape, *noise.rng);
    }
    return Tensor(shape);
}

Tensor gate_input(GateKind kind, const Tensor* prev, const Tensor& cur) {
    if (!gate_uses_previous(kind)) return cur;
    if (!prev) throw ContractError(to_string(kind) + " gate requires the previous frame's input");
    if (!prev->same_shape(cur)) {
        throw ShapeError("gate: previous input " + shape_str(prev->shape()) + " vs current " + shape_str(cur.shape()));
    }
    return concat(*prev, cur, 0);
}

GateOutput evaluate_gate(const GateParams& params, const Tensor* prev, const Tensor& cur, const GateNoise& noise) {
    GateOutput out;
    out.logits = conv2d_dense(gate_input(params.kind, prev, cur), params.conv);
    if (out.logits.dim(0) != gate_channels(params.kind)) {
        throw ShapeError("gate convolution produces " + std::to_string(out.logits.dim(0)) + " channels, " +
                         to_string(params.kind) + " gate needs " + std::to_string(gate_channels(params.kind)));
    }
    out.soft.kind = params.kind;
    out.soft.values = gumbel_softmax(out.logits, params.tau, resolve_noise(params, out.logits.shape(), noise));
    out.hard = harden(out.soft);
    return out;
}

GateOutput triple_gate(const Tensor& prev, const Tensor& cur, const GateParams& params, const GateNoise& noise) {
    if (params.kind != GateKind::Triple) throw ShapeError("triple_gate called with " + to_string(params.kind) + " params");
    return evaluate_gate(params, &prev, cur, noise);
}

GateOutput static_gate(const Tensor& cur, const GateParams& params, const GateNoise& noise) {
    if (params.kind != GateKind::Static) throw ShapeError("static_gate called with " + to_string(params.kind) + " params");
    return evaluate_gate(params, nullptr, cur, noise);
}

GateOutput residual_gate(const Tensor& prev, const Tensor& cur, const GateParams& params, const GateNoise& noise) {
    if (params.kind != GateKind::Residual) throw ShapeError("residual_gate called with " + to_string(params.kind) + " params");
    return evaluate_gate(params, &prev, cur, noise);
}

}  // namespace trisparse
