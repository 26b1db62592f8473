#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "trisparse/autograd.hpp"
#include "trisparse/gating.hpp"
#include "trisparse/io.hpp"
#include "trisparse/ops.hpp"

namespace trisparse {

enum class Processing { Dense, Sparse };

/// Temporal cache of one sparse layer: the previous frame's input (for the
/// gate) and output (for reuse).
struct LayerState {
    std::optional<Tensor> prev_input;
    std::optional<Tensor> prev_output;
    long frame_index_of_prev = -1;

    void reset();
};

struct SparseLayer {
    std::string id;
    ConvSpec spec;
    std::optional<GateParams> gate;  // absent: the layer always runs dense
    LayerState state;

    void reset_state() { state.reset(); }
};

struct SparseOptions {
    GateNoise noise;
    /// Overrides the gate with a uniform policy (must be one the gate can emit).
    std::optional<Policy> forced_policy;
    /// Overrides the gate with an explicit mask.
    const SparseMask* forced_mask = nullptr;
    MacCounter* counter = nullptr;       // convolution MACs actually executed
    MacCounter* gate_counter = nullptr;  // gate convolution MACs
    long frame_index = 0;
};

struct SparseResult {
    Tensor output;
    std::optional<SparseMask> mask;
    std::optional<SoftMask> soft;
    std::uint64_t flops = 0;
    std::uint64_t gate_flops = 0;
};

/// Executes a policy mask: compute positions gather a contiguous patch and
/// multiply it against the C_o x (C_i*k*k) kernel matrix, reuse positions copy
/// `prev_output`, skip positions stay 0. Bias applies at computed positions.
Tensor execute_mask(const Tensor& input, const ConvSpec& spec, const SparseMask& mask, const Tensor* prev_output,
                    MacCounter* counter = nullptr);

/// One layer step. `prev_input` defaults to the cached state. In sparse mode
/// the state must hold the previous frame; either way it is replaced by this
/// frame afterwards.
SparseResult sparse_forward(SparseLayer& layer, const Tensor& input, const Tensor* prev_input, Processing mode,
                            const SparseOptions& opts = {});

/// Trainable handles for a layer's weights.
struct LayerVars {
    ag::Var kernel;
    std::optional<ag::Var> bias;
    ag::Var gate_kernel;
    std::optional<ag::Var> gate_bias;
};

struct SparseGraphResult {
    ag::Var output;
    std::optional<SparseMask> mask;
    std::optional<ag::Var> soft;  // P x H_o x W_o, differentiable w.r.t. gate weights and input
    std::uint64_t flops = 0;
    std::uint64_t gate_flops = 0;
};

/// Differentiable counterpart of sparse_forward. The convolution runs dense in
/// the graph; the output is sum over policies of ste_gate(term, I[M=p], soft_p)
/// with term = conv output for compute and the cached previous output for
/// reuse. Cached values enter as constants.
SparseGraphResult sparse_forward_graph(SparseLayer& layer, const LayerVars& vars, const ag::Var& input, Processing mode,
                                       const SparseOptions& opts = {});

/// Grey-level rendering: skip 0, reuse 128, compute 255.
Image8 mask_to_image(const SparseMask& mask);
SparseMask mask_from_image(const Image8& img);

}  // namespace trisparse
