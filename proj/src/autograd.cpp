#include "trisparse/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace trisparse::ag {

namespace {

Var make(Tensor value, std::vector<NodePtr> parents, BackwardFn fn) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    const bool any = std::any_of(parents.begin(), parents.end(), [](const NodePtr& p) { return p->requires_grad; });
    if (any) {
        node->parents = std::move(parents);
        node->backward = std::move(fn);
        node->requires_grad = true;
    }
    return Var(std::move(node));
}

bool wants(const Node& self, std::size_t i) { return self.parents[i]->requires_grad; }

void require_defined(const Var& v, const char* op) {
    if (!v.defined()) throw ShapeError(std::string(op) + ": undefined operand");
}

// Sum of g over axis 0, keeping extent 1 there.
Tensor reduce_axis0(const Tensor& g) {
    Shape shape = g.shape();
    const std::size_t n = shape[0];
    shape[0] = 1;
    Tensor out(shape);
    const std::size_t inner = out.size();
    for (std::size_t c = 0; c < n; ++c)
        for (std::size_t i = 0; i < inner; ++i) out[i] += g[c * inner + i];
    return out;
}

bool broadcasts_axis0(const Shape& a, const Shape& b) {
    if (a.size() != b.size() || a.empty() || b[0] != 1) return false;
    for (std::size_t i = 1; i < a.size(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

Tensor conv_forward(const Tensor& cols, const Tensor& kernel, const Tensor* bias, std::size_t ho, std::size_t wo) {
    const std::size_t co = kernel.dim(0);
    const Tensor k2 = kernel.reshaped({co, kernel.size() / co});
    Tensor out = matmul(k2, cols);
    if (bias) {
        const std::size_t npos = ho * wo;
        for (std::size_t c = 0; c < co; ++c)
            for (std::size_t p = 0; p < npos; ++p) out[c * npos + p] += (*bias)[c];
    }
    return out.reshaped({co, ho, wo});
}

}  // namespace

const Tensor* Gradients::find(const Var& v) const {
    if (!v.defined()) return nullptr;
    auto it = grads_.find(v.node().get());
    return it == grads_.end() ? nullptr : &it->second;
}

Tensor Gradients::of(const Var& v) const {
    if (const Tensor* g = find(v)) return *g;
    return Tensor(v.shape());
}

Gradients backward(const Var& loss) {
    require_defined(loss, "backward");
    if (loss.value().size() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    Gradients out;
    if (!loss.requires_grad()) return out;

    // Iterative post-order DFS gives a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    auto& grads = out.grads_;
    grads[loss.node().get()] = Tensor(loss.shape(), 1.0);
    std::vector<Tensor> pgrads;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        auto g = grads.find(node);
        if (g == grads.end() || !node->backward) continue;
        pgrads.assign(node->parents.size(), Tensor());
        node->backward(*node, g->second, pgrads);
        for (std::size_t i = 0; i < node->parents.size(); ++i) {
            Node* p = node->parents[i].get();
            if (!p->requires_grad || (pgrads[i].empty() && pgrads[i].ndim() == 0)) continue;  // not produced
            if (!pgrads[i].same_shape(p->value)) {
                throw ShapeError("backward: gradient shape " + shape_str(pgrads[i].shape()) + " does not match value " +
                                 shape_str(p->value.shape()));
            }
            auto [slot, inserted] = grads.try_emplace(p, std::move(pgrads[i]));
            if (!inserted) {
                auto dst = slot->second.data();
                const auto src = pgrads[i].data();
                for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
            }
        }
    }
    return out;
}

Var constant(Tensor value) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    return Var(std::move(node));
}

Var parameter(Tensor value) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->requires_grad = true;
    return Var(std::move(node));
}

Var stop_gradient(const Var& v) { return constant(v.value()); }

Var add(const Var& a, const Var& b) {
    require_defined(a, "add");
    require_defined(b, "add");
    return make(trisparse::add(a.value(), b.value()), {a.node(), b.node()},
                [](const Node& self, const Tensor& g, std::vector<Tensor>& pg) {
                    if (wants(self, 0)) pg[0] = g;
                    if (wants(self, 1)) pg[1] = g;
                });
}

Var sub(const Var& a, const Var& b) {
    require_defined(a, "sub");
    require_defined(b, "sub");
    return make(trisparse::sub(a.value(), b.value()), {a.node(), b.node()},
                [](const Node& self, const Tensor& g, std::vector<Tensor>& pg) {
                    if (wants(self, 0)) pg[0] = g;
                    if (wants(self, 1)) pg[1] = trisparse::scale(g, -1.0);
                });
}

Var mul(const Var& a, const Var& b) {
    require_defined(a, "mul");
    require_defined(b, "mul");
    if (a.value().same_shape(b.value())) {
        return make(trisparse::mul(a.value(), b.value()), {a.node(), b.node()},
                    [](const Node& self, const Tensor& g, std::vector<Tensor>& pg) {
                        if (wants(self, 0)) pg[0] = trisparse::mul(g, self.parents[1]->value);
                        if (wants(self, 1)) pg[1] = trisparse::mul(g, self.parents[0]->value);
                    });
    }
    if (!broadcasts_axis0(a.shape(), b.shape())) {
        throw ShapeError("mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    const std::size_t inner = bv.size();
    Tensor out = av;
    for (std::size_t c = 0; c < av.dim(0); ++c)
        for (std::size_t i = 0; i < inner; ++i) out[c * inner + i] *= bv[i];
    return make(std::move(out), {a.node(), b.node()}, [inner](const Node& self, const Tensor& g, std::vector<Tensor>& pg) {
        const Tensor& av = self.parents[0]->value;
        const Tensor& bv = self.parents[1]->value;
        if (wants(self, 0)) {
            Tensor ga = g;
            for (std::size_t c = 0; c < av.dim(0); ++c)
                for (std::size_t i = 0; i < inner; ++i) ga[c * inner + i] *= bv[i];
            pg[0] = std::move(ga);
        }
        if (wants(self, 1)) pg[1] = reduce_axis0(trisparse::mul(g, av));
    });
}

Var scale(const Var& a, double factor) {
    require_defined(a, "scale");
    return make(trisparse::scale(a.value(), factor), {a.node()},
                [factor](const Node&, const Tensor& g, std::vector<Tensor>& pg) { pg[0] = trisparse::scale(g, factor); });
}

Var add_scalar(const Var& a, double offset) {
    require_defined(a, "add_scalar");
    Tensor out = a.value();
    for (double& v : out.data()) v += offset;
    return make(std::move(out), {a.node()}, [](const Node&, const Tensor& g, std::vector<Tensor>& pg) { pg[0] = g; });
}

Var relu(const Var& a) {
    require_defined(a, "relu");
    return make(trisparse::relu(a.value()), {a.node()}, [](const Node& self, const Tensor& g, std::vector<Tensor>& pg) {
        Tensor out = g;
        const Tensor& x = self.parents[0]->value;
        for (std::size_t i = 0; i < out.size(); ++i)
            if (!(x[i] > 0.0)) out[i] = 0.0;
        pg[0] = std::move(out);
    });
}

Var conv2d(const Var& input, const Var& kernel, const std::optional<Var>& bias, std::size_t stride, std::size_t padding) {
    require_defined(input, "conv2d");
    require_defined(kernel, "conv2d");
    ConvSpec geometry;
    geometry.kernel = Tensor(kernel.shape());  // shape only, for validation
    geometry.stride = stride;
    geometry.padding = padding;
    if (bias) geometry.bias = Tensor(bias->shape());
    geometry.validate();
    const Tensor& x = input.value();
    if (x.ndim() != 3 || x.dim(0) != geometry.in_channels()) {
        throw ShapeError("conv2d: input " + shape_str(x.shape()) + " incompatible with kernel " + shape_str(kernel.shape()));
    }
    const std::size_t ho = geometry.out_extent(x.dim(1));
    const std::size_t wo = geometry.out_extent(x.dim(2));
    const std::size_t k = geometry.kernel_size();
    auto cols = std::make_shared<Tensor>(im2col(x, k, stride, padding));
    Tensor out = conv_forward(*cols, kernel.value(), bias ? &bias->value() : nullptr, ho, wo);
    require_finite(out, "conv2d");

    std::vector<NodePtr> parents{input.node(), kernel.node()};
    if (bias) parents.push_back(bias->node());
    const std::size_t h = x.dim(1), w = x.dim(2);
    return make(std::move(out), std::move(parents),
                [cols, ho, wo, h, w, k, stride, padding](const Node& self, const Tensor& g, std::vector<Tensor>& pg) {
                    const Tensor& kern = self.parents[1]->value;
                    const std::size_t co = kern.dim(0);
                    const std::size_t ci = kern.dim(1);
                    const Tensor g2 = g.reshaped({co, ho * wo});
                    if (wants(self, 0)) {
                        const Tensor gcols = matmul(kern.reshaped({co, ci * k * k}), g2, true, false);
                        pg[0] = col2im(gcols, ci, h, w, k, stride, padding);
                    }
                    if (wants(self, 1)) pg[1] = matmul(g2, *cols, false, true).reshaped(kern.shape());
                    if (self.parents.size() > 2 && wants(self, 2)) {
                        Tensor gb({co});
                        for (std::size_t c = 0; c < co; ++c)
                            for (std::size_t p = 0; p < ho * wo; ++p) gb[c] += g2[c * ho * wo + p];
                        pg[2] = std::move(gb);
                    }
                });
}

Var conv2d(const Var& input, const ConvSpec& spec) {
    require_defined(input, "conv2d");
    Tensor out = conv2d_dense(input.value(), spec);
    const std::size_t h = input.value().dim(1), w = input.value().dim(2);
    return make(std::move(out), {input.node()}, [&spec, h, w](const Node&, const Tensor& g, std::vector<Tensor>& pg) {
        const std::size_t co = spec.out_channels(), ci = spec.in_channels(), k = spec.kernel_size();
        const Tensor g2 = g.reshaped({co, g.size() / co});
        const Tensor gcols = matmul(spec.kernel.reshaped({co, ci * k * k}), g2, true, false);
        pg[0] = col2im(gcols, ci, h, w, k, spec.stride, spec.padding);
    });
}

Var softmax(const Var& x, std::size_t axis) {
    require_defined(x, "softmax");
    return make(trisparse::softmax(x.value(), axis), {x.node()},
                [axis](const Node& self, const Tensor& g, std::vector<Tensor>& pg) {
                    const Tensor& y = self.value;
                    const Shape& s = y.shape();
                    std::size_t outer = 1, inner = 1;
                    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
                    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
                    const std::size_t ext = s[axis];
                    Tensor out(s);
                    for (std::size_t a = 0; a < outer; ++a) {
                        for (std::size_t i = 0; i < inner; ++i) {
                            const std::size_t base = a * ext * inner + i;
                            double dot = 0.0;
                            for (std::size_t e = 0; e < ext; ++e) dot += g[base + e * inner] * y[base + e * inner];
                            for (std::size_t e = 0; e < ext; ++e)
                                out[base + e * inner] = y[base + e * inner] * (g[base + e * inner] - dot);
                        }
                    }
                    pg[0] = std::move(out);
                });
}

Var log_softmax(const Var& x, std::size_t axis) {
    require_defined(x, "log_softmax");
    return make(trisparse::log_softmax(x.value(), axis), {x.node()},
                [axis](const Node& self, const Tensor& g, std::vector<Tensor>& pg) {
                    const Tensor& y = self.value;
                    const Shape& s = y.shape();
                    std::size_t outer = 1, inner = 1;
                    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
                    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
                    const std::size_t ext = s[axis];
                    Tensor out(s);
                    for (std::size_t a = 0; a < outer; ++a) {
                        for (std::size_t i = 0; i < inner; ++i) {
                            const std::size_t base = a * ext * inner + i;
                            double gs = 0.0;
                            for (std::size_t e = 0; e < ext; ++e) gs += g[base + e * inner];
                            for (std::size_t e = 0; e < ext; ++e)
                                out[base + e * inner] = g[base + e * inner] - std::exp(y[base + e * inner]) * gs;
                        }
                    }
                    pg[0] = std::move(out);
                });
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no operands");
    for (const auto& p : parts) require_defined(p, "concat");
    Tensor out = parts[0].value();
    for (std::size_t i = 1; i < parts.size(); ++i) out = trisparse::concat(out, parts[i].value(), axis);
    std::vector<NodePtr> parents;
    std::vector<std::size_t> extents;
    for (const auto& p : parts) {
        parents.push_back(p.node());
        extents.push_back(p.value().dim(axis));
    }
    return make(std::move(out), std::move(parents), [axis, extents](const Node& self, const Tensor& g, std::vector<Tensor>& pg) {
        std::size_t begin = 0;
        for (std::size_t i = 0; i < extents.size(); ++i) {
            if (wants(self, i)) pg[i] = trisparse::slice(g, axis, begin, begin + extents[i]);
            begin += extents[i];
        }
    });
}

Var slice(const Var& x, std::size_t axis, std::size_t begin, std::size_t end) {
    require_defined(x, "slice");
    return make(trisparse::slice(x.value(), axis, begin, end), {x.node()},
                [axis, begin, end](const Node& self, const Tensor& g, std::vector<Tensor>& pg) {
                    const Shape& s = self.parents[0]->value.shape();
                    std::size_t outer = 1, inner = 1;
                    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
                    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
                    Tensor out(s);
                    const std::size_t len = (end - begin) * inner;
                    for (std::size_t r = 0; r < outer; ++r)
                        std::copy_n(g.data().begin() + static_cast<std::ptrdiff_t>(r * len), len,
                                    out.data().begin() + static_cast<std::ptrdiff_t>((r * s[axis] + begin) * inner));
                    pg[0] = std::move(out);
                });
}

Var matmul(const Var& a, const Var& b, bool trans_a, bool trans_b) {
    require_defined(a, "matmul");
    require_defined(b, "matmul");
    return make(trisparse::matmul(a.value(), b.value(), trans_a, trans_b), {a.node(), b.node()},
                [trans_a, trans_b](const Node& self, const Tensor& g, std::vector<Tensor>& pg) {
                    const Tensor& av = self.parents[0]->value;
                    const Tensor& bv = self.parents[1]->value;
                    if (wants(self, 0)) {
                        if (!trans_a && !trans_b) pg[0] = trisparse::matmul(g, bv, false, true);
                        else if (!trans_a && trans_b) pg[0] = trisparse::matmul(g, bv);
                        else if (trans_a && !trans_b) pg[0] = trisparse::matmul(bv, g, false, true);
                        else pg[0] = trisparse::matmul(bv, g, true, true);
                    }
                    if (wants(self, 1)) {
                        if (!trans_a && !trans_b) pg[1] = trisparse::matmul(av, g, true, false);
                        else if (!trans_a && trans_b) pg[1] = trisparse::matmul(g, av, true, false);
                        else if (trans_a && !trans_b) pg[1] = trisparse::matmul(av, g);
                        else pg[1] = trisparse::matmul(g, av, true, true);
                    }
                });
}

Var sum(const Var& x) {
    require_defined(x, "sum");
    return make(Tensor::scalar(trisparse::sum(x.value())), {x.node()},
                [](const Node& self, const Tensor& g, std::vector<Tensor>& pg) {
                    pg[0] = Tensor(self.parents[0]->value.shape(), g.item());
                });
}

Var reshape(const Var& x, Shape shape) {
    require_defined(x, "reshape");
    return make(x.value().reshaped(std::move(shape)), {x.node()},
                [](const Node& self, const Tensor& g, std::vector<Tensor>& pg) {
                    pg[0] = g.reshaped(self.parents[0]->value.shape());
                });
}

Var upsample_bilinear(const Var& x, std::size_t out_h, std::size_t out_w) {
    require_defined(x, "upsample_bilinear");
    return make(trisparse::upsample_bilinear(x.value(), out_h, out_w), {x.node()},
                [](const Node& self, const Tensor& g, std::vector<Tensor>& pg) {
                    const Tensor& in = self.parents[0]->value;
                    pg[0] = upsample_bilinear_adjoint(g, in.dim(1), in.dim(2));
                });
}

Var ste_select(const Tensor& hard, const Var& soft) {
    require_defined(soft, "ste_select");
    if (!hard.same_shape(soft.value())) {
        throw ShapeError("ste_select: hard " + shape_str(hard.shape()) + " vs soft " + shape_str(soft.shape()));
    }
    return make(hard, {soft.node()}, [](const Node&, const Tensor& g, std::vector<Tensor>& pg) { pg[0] = g; });
}

Var ste_gate(const Var& term, const Tensor& hard, const Var& soft) {
    require_defined(term, "ste_gate");
    require_defined(soft, "ste_gate");
    if (!hard.same_shape(soft.value()) || !broadcasts_axis0(term.shape(), hard.shape())) {
        throw ShapeError("ste_gate: term " + shape_str(term.shape()) + ", hard " + shape_str(hard.shape()) + ", soft " +
                         shape_str(soft.shape()));
    }
    const std::size_t inner = hard.size();
    Tensor out = term.value();
    for (std::size_t c = 0; c < out.dim(0); ++c)
        for (std::size_t i = 0; i < inner; ++i) out[c * inner + i] *= hard[i];
    return make(std::move(out), {term.node(), soft.node()}, [inner](const Node& self, const Tensor& g, std::vector<Tensor>& pg) {
        const Tensor& tv = self.parents[0]->value;
        const Tensor& sv = self.parents[1]->value;
        if (wants(self, 0)) {
            Tensor gt = g;
            for (std::size_t c = 0; c < tv.dim(0); ++c)
                for (std::size_t i = 0; i < inner; ++i) gt[c * inner + i] *= sv[i];
            pg[0] = std::move(gt);
        }
        if (wants(self, 1)) pg[1] = reduce_axis0(trisparse::mul(g, tv));
    });
}

}  // namespace trisparse::ag
