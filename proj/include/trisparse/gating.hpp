#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "trisparse/autograd.hpp"
#include "trisparse/ops.hpp"
#include "trisparse/rng.hpp"

namespace trisparse {

/// Per-pixel execution policy of a sparse convolution.
enum class Policy : std::uint8_t { Skip = 0, Reuse = 1, Compute = 2 };

/// Gate families: the three-way gate and the two binary baselines.
///   Triple:   channels (skip, reuse, compute) over [F_prev; F_cur]
///   Static:   channels (skip, compute) over F_cur only
///   Residual: channels (reuse, compute) over [F_prev; F_cur]
enum class GateKind : std::uint8_t { Triple, Static, Residual };

std::string to_string(GateKind kind);
GateKind gate_kind_from_string(const std::string& name);

std::size_t gate_channels(GateKind kind);
/// Policy assigned to each gate channel, in channel order.
std::span<const Policy> gate_policies(GateKind kind);
bool gate_uses_previous(GateKind kind);

/// Relaxed policy distribution, one channel per gate policy (P x H_o x W_o).
/// Channel sums are 1 at every position.
struct SoftMask {
    Tensor values;
    GateKind kind = GateKind::Triple;

    std::size_t height() const { return values.dim(1); }
    std::size_t width() const { return values.dim(2); }
};

/// Hard per-pixel policy map with values in {0, 1, 2}.
struct SparseMask {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> policy;

    SparseMask() = default;
    SparseMask(std::size_t h, std::size_t w, Policy fill);

    Policy at(std::size_t y, std::size_t x) const { return static_cast<Policy>(policy[y * width + x]); }
    void set(std::size_t y, std::size_t x, Policy p) { policy[y * width + x] = static_cast<std::uint8_t>(p); }
    std::size_t count(Policy p) const;
    std::size_t area() const { return height * width; }
    /// 1 x H x W indicator tensor of positions holding `p`.
    Tensor indicator(Policy p) const;

    friend bool operator==(const SparseMask&, const SparseMask&) = default;
};

struct GateParams {
    GateKind kind = GateKind::Triple;
    ConvSpec conv;  // (gate_channels) x (C_i or 2*C_i) x 3 x 3
    double tau = 1.0;
    bool train_mode = false;
};

/// Zero-initialised 3x3 gate whose stride matches the wrapped convolution.
GateParams make_gate(GateKind kind, std::size_t in_channels, std::size_t stride, double tau = 1.0);

inline constexpr double kUniformClamp = 1e-12;

/// G = -log(-log(U)), U ~ Uniform(0,1) clamped into (eps, 1 - eps).
Tensor sample_gumbel(const Shape& shape, Rng& rng);

/// Softmax((log Softmax(P) + G) / tau) along axis 0.
Tensor gumbel_softmax(const Tensor& logits, double tau, const Tensor& noise);
ag::Var gumbel_softmax(const ag::Var& logits, double tau, const Tensor& noise);

/// Per-position argmax over channels, ties to the lowest index.
std::vector<std::uint8_t> argmax_channels(const Tensor& values);

/// Argmax of the soft mask mapped through the gate's channel policies.
SparseMask harden(const SoftMask& soft);

struct GateOutput {
    Tensor logits;  // P
    SoftMask soft;
    SparseMask hard;
};

/// Noise source for one gate evaluation. Train mode without explicit noise
/// draws fresh Gumbel samples; inference uses zero noise.
struct GateNoise {
    const Tensor* frozen = nullptr;
    Rng* rng = nullptr;
};

/// Resolves the noise tensor to use for a gate evaluation of `shape`.
Tensor resolve_noise(const GateParams& params, const Shape& shape, const GateNoise& noise);

/// Gate input: [F_prev; F_cur] for temporal gates, F_cur for the static gate.
Tensor gate_input(GateKind kind, const Tensor* prev, const Tensor& cur);

GateOutput triple_gate(const Tensor& prev, const Tensor& cur, const GateParams& params, const GateNoise& noise = {});
GateOutput static_gate(const Tensor& cur, const GateParams& params, const GateNoise& noise = {});
GateOutput residual_gate(const Tensor& prev, const Tensor& cur, const GateParams& params, const GateNoise& noise = {});

/// Dispatch on params.kind; `prev` may be null for the static gate.
GateOutput evaluate_gate(const GateParams& params, const Tensor* prev, const Tensor& cur, const GateNoise& noise = {});

}  // namespace trisparse
