#include "trisparse/sparse_conv.hpp"

#include <algorithm>

namespace trisparse {

namespace {

[[noreturn]] void contract_violation(const SparseLayer& layer, const std::string& what) {
    throw ContractError("mixed-processing contract violated at layer '" + layer.id + "': " + what);
}

std::size_t channel_of(GateKind kind, Policy p) {
    const auto policies = gate_policies(kind);
    const auto it = std::find(policies.begin(), policies.end(), p);
    if (it == policies.end()) {
        throw ContractError(to_string(kind) + " gate cannot emit policy " + std::to_string(static_cast<int>(p)));
    }
    return static_cast<std::size_t>(it - policies.begin());
}

Tensor one_hot(GateKind kind, const SparseMask& mask) {
    const std::size_t area = mask.area();
    const auto policies = gate_policies(kind);
    Tensor t({policies.size(), mask.height, mask.width});
    for (std::size_t i = 0; i < area; ++i) t[channel_of(kind, static_cast<Policy>(mask.policy[i])) * area + i] = 1.0;
    return t;
}

void check_mask_geometry(const SparseMask& mask, std::size_t ho, std::size_t wo) {
    if (mask.height != ho || mask.width != wo || mask.policy.size() != ho * wo) {
        throw ShapeError("mask " + std::to_string(mask.height) + "x" + std::to_string(mask.width) + " vs output " +
                         std::to_string(ho) + "x" + std::to_string(wo));
    }
    for (auto v : mask.policy)
        if (v > 2) throw ShapeError("mask value " + std::to_string(v) + " outside {0,1,2}");
}

struct Geometry {
    std::size_t ho, wo;
};

Geometry output_geometry(const SparseLayer& layer, const Tensor& input) {
    if (input.ndim() != 3) throw ShapeError("sparse layer '" + layer.id + "' expects C x H x W input");
    if (input.dim(0) != layer.spec.in_channels()) {
        throw ShapeError("sparse layer '" + layer.id + "': input has " + std::to_string(input.dim(0)) +
                         " channels, kernel expects " + std::to_string(layer.spec.in_channels()));
    }
    return {layer.spec.out_extent(input.dim(1)), layer.spec.out_extent(input.dim(2))};
}

// Validates the temporal state needed for a sparse step and returns the
// previous input used by the gate.
const Tensor* check_sparse_state(const SparseLayer& layer, const Tensor& input, const Tensor* prev_input, Geometry g,
                                 bool needs_gate) {
    if (!layer.state.prev_output) contract_violation(layer, "no previous output");
    const Shape expected{layer.spec.out_channels(), g.ho, g.wo};
    if (layer.state.prev_output->shape() != expected) {
        throw ShapeError("layer '" + layer.id + "': cached output " + shape_str(layer.state.prev_output->shape()) +
                         " vs " + shape_str(expected));
    }
    if (!prev_input && layer.state.prev_input) prev_input = &*layer.state.prev_input;
    if (needs_gate && gate_uses_previous(layer.gate->kind)) {
        if (!prev_input) contract_violation(layer, "no previous input");
        if (!prev_input->same_shape(input)) {
            throw ShapeError("layer '" + layer.id + "': previous input " + shape_str(prev_input->shape()) + " vs " +
                             shape_str(input.shape()));
        }
    }
    return prev_input;
}

SparseMask forced_mask(const SparseOptions& opts, Geometry g) {
    if (opts.forced_mask) {
        check_mask_geometry(*opts.forced_mask, g.ho, g.wo);
        return *opts.forced_mask;
    }
    return SparseMask(g.ho, g.wo, *opts.forced_policy);
}

void commit_state(SparseLayer& layer, const Tensor& input, const Tensor& output, long frame) {
    layer.state.prev_input = input;
    layer.state.prev_output = output;
    layer.state.frame_index_of_prev = frame;
}

}  // namespace

void LayerState::reset() {
    prev_input.reset();
    prev_output.reset();
    frame_index_of_prev = -1;
}

Tensor execute_mask(const Tensor& input, const ConvSpec& spec, const SparseMask& mask, const Tensor* prev_output,
                    MacCounter* counter) {
    spec.validate();
    if (input.ndim() != 3 || input.dim(0) != spec.in_channels()) {
        throw ShapeError("execute_mask: input " + shape_str(input.shape()) + " vs kernel " + shape_str(spec.kernel.shape()));
    }
    const std::size_t ci = input.dim(0), h = input.dim(1), w = input.dim(2);
    const std::size_t ho = spec.out_extent(h), wo = spec.out_extent(w);
    const std::size_t co = spec.out_channels(), k = spec.kernel_size();
    const std::size_t patch = ci * k * k, area = ho * wo;
    check_mask_geometry(mask, ho, wo);

    Tensor out({co, ho, wo});
    if (mask.count(Policy::Reuse) > 0) {
        if (!prev_output) throw ContractError("execute_mask: reuse positions without a previous output");
        if (prev_output->shape() != out.shape()) {
            throw ShapeError("execute_mask: previous output " + shape_str(prev_output->shape()) + " vs " +
                             shape_str(out.shape()));
        }
    }

    const auto kern = spec.kernel.data();
    std::vector<double> gathered(patch);
    for (std::size_t y = 0; y < ho; ++y) {
        for (std::size_t x = 0; x < wo; ++x) {
            const std::size_t pos = y * wo + x;
            const Policy p = mask.at(y, x);
            if (p == Policy::Skip) continue;
            if (p == Policy::Reuse) {
                for (std::size_t oc = 0; oc < co; ++oc) out[oc * area + pos] = (*prev_output)[oc * area + pos];
                continue;
            }
            // gather
            std::size_t j = 0;
            for (std::size_t c = 0; c < ci; ++c)
                for (std::size_t ky = 0; ky < k; ++ky)
                    for (std::size_t kx = 0; kx < k; ++kx, ++j) {
                        const long iy = static_cast<long>(y * spec.stride + ky) - static_cast<long>(spec.padding);
                        const long ix = static_cast<long>(x * spec.stride + kx) - static_cast<long>(spec.padding);
                        const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(h) && ix < static_cast<long>(w);
                        gathered[j] = inside ? input[(c * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)] : 0.0;
                    }
            // compute and scatter
            for (std::size_t oc = 0; oc < co; ++oc) {
                const double* krow = kern.data() + oc * patch;
                double acc = 0.0;
                for (std::size_t q = 0; q < patch; ++q) acc += krow[q] * gathered[q];
                if (spec.bias) acc += (*spec.bias)[oc];
                out[oc * area + pos] = acc;
            }
            if (counter) counter->macs += static_cast<std::uint64_t>(patch) * co;
        }
    }
    require_finite(out, "execute_mask");
    return out;
}

SparseResult sparse_forward(SparseLayer& layer, const Tensor& input, const Tensor* prev_input, Processing mode,
                            const SparseOptions& opts) {
    const Geometry g = output_geometry(layer, input);
    SparseResult r;
    const bool gated = mode == Processing::Sparse && layer.gate.has_value();
    if (!gated) {
        MacCounter local;
        r.output = conv2d_dense(input, layer.spec, &local);
        r.flops = local.macs;
    } else {
        const bool forced = opts.forced_mask || opts.forced_policy;
        const Tensor* prev = check_sparse_state(layer, input, prev_input, g, !forced);
        if (forced) {
            r.mask = forced_mask(opts, g);
            for (auto v : r.mask->policy) channel_of(layer.gate->kind, static_cast<Policy>(v));
        } else {
            MacCounter gate_macs;
            GateOutput go;
            go.logits = conv2d_dense(gate_input(layer.gate->kind, prev, input), layer.gate->conv, &gate_macs);
            go.soft.kind = layer.gate->kind;
            go.soft.values =
                gumbel_softmax(go.logits, layer.gate->tau, resolve_noise(*layer.gate, go.logits.shape(), opts.noise));
            r.mask = harden(go.soft);
            r.soft = std::move(go.soft);
            r.gate_flops = gate_macs.macs;
        }
        MacCounter local;
        r.output = execute_mask(input, layer.spec, *r.mask, &*layer.state.prev_output, &local);
        r.flops = local.macs;
    }
    if (opts.counter) opts.counter->macs += r.flops;
    if (opts.gate_counter) opts.gate_counter->macs += r.gate_flops;
    commit_state(layer, input, r.output, opts.frame_index);
    return r;
}

SparseGraphResult sparse_forward_graph(SparseLayer& layer, const LayerVars& vars, const ag::Var& input, Processing mode,
                                       const SparseOptions& opts) {
    const Geometry g = output_geometry(layer, input.value());
    if (vars.kernel.shape() != layer.spec.kernel.shape()) {
        throw ShapeError("layer '" + layer.id + "': kernel variable " + shape_str(vars.kernel.shape()) + " vs " +
                         shape_str(layer.spec.kernel.shape()));
    }
    SparseGraphResult r;
    const ag::Var conv = ag::conv2d(input, vars.kernel, vars.bias, layer.spec.stride, layer.spec.padding);
    const std::uint64_t pixel_cost = layer.spec.pixel_cost();
    const bool gated = mode == Processing::Sparse && layer.gate.has_value();
    if (!gated) {
        r.output = conv;
        r.flops = pixel_cost * g.ho * g.wo;
    } else {
        const GateKind kind = layer.gate->kind;
        const bool forced = opts.forced_mask || opts.forced_policy;
        const Tensor* prev = check_sparse_state(layer, input.value(), nullptr, g, !forced);
        ag::Var soft;
        if (forced) {
            r.mask = forced_mask(opts, g);
            soft = ag::constant(one_hot(kind, *r.mask));
        } else {
            const ag::Var gin = gate_uses_previous(kind) ? ag::concat({ag::constant(*prev), input}, 0) : input;
            const ag::Var logits =
                ag::conv2d(gin, vars.gate_kernel, vars.gate_bias, layer.gate->conv.stride, layer.gate->conv.padding);
            if (logits.shape() != Shape{gate_channels(kind), g.ho, g.wo}) {
                throw ShapeError("layer '" + layer.id + "': gate output " + shape_str(logits.shape()));
            }
            soft = gumbel_softmax(logits, layer.gate->tau, resolve_noise(*layer.gate, logits.shape(), opts.noise));
            r.mask = harden(SoftMask{soft.value(), kind});
            r.gate_flops = static_cast<std::uint64_t>(vars.gate_kernel.value().size()) * g.ho * g.wo;
            r.soft = soft;
        }
        const ag::Var prev_out = ag::constant(*layer.state.prev_output);
        ag::Var out;
        for (Policy p : gate_policies(kind)) {
            if (p == Policy::Skip) continue;
            const std::size_t c = channel_of(kind, p);
            const ag::Var term = ag::ste_gate(p == Policy::Compute ? conv : prev_out, r.mask->indicator(p),
                                              ag::slice(soft, 0, c, c + 1));
            out = out.defined() ? ag::add(out, term) : term;
        }
        r.output = out;
        r.flops = pixel_cost * r.mask->count(Policy::Compute);
    }
    if (opts.counter) opts.counter->macs += r.flops;
    if (opts.gate_counter) opts.gate_counter->macs += r.gate_flops;
    commit_state(layer, input.value(), r.output.value(), opts.frame_index);
    return r;
}

Image8 mask_to_image(const SparseMask& mask) {
    Image8 img{mask.width, mask.height, 1, std::vector<std::uint8_t>(mask.area())};
    for (std::size_t i = 0; i < mask.area(); ++i) {
        const auto p = static_cast<Policy>(mask.policy[i]);
        img.pixels[i] = p == Policy::Skip ? 0 : p == Policy::Reuse ? 128 : 255;
    }
    return img;
}

SparseMask mask_from_image(const Image8& img) {
    if (img.channels != 1) throw FormatError("mask image must be single-channel", 0);
    SparseMask m(img.height, img.width, Policy::Skip);
    for (std::size_t i = 0; i < m.area(); ++i) {
        switch (img.pixels[i]) {
            case 0: m.policy[i] = 0; break;
            case 128: m.policy[i] = 1; break;
            case 255: m.policy[i] = 2; break;
            default: throw FormatError("mask pixel value " + std::to_string(img.pixels[i]) + " is not 0/128/255", i);
        }
    }
    return m;
}

}  // namespace trisparse
