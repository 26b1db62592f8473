#include "trisparse/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace trisparse {

namespace {

void require_rank(const Tensor& t, std::size_t rank, const char* what) {
    if (t.ndim() != rank) {
        throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
    }
}

// Splits a shape around `axis` into (outer, extent, inner) strides.
struct AxisView {
    std::size_t outer = 1, extent = 1, inner = 1;
};

AxisView axis_view(const Shape& shape, std::size_t axis) {
    if (axis >= shape.size()) throw ShapeError("axis " + std::to_string(axis) + " invalid for " + shape_str(shape));
    AxisView v;
    for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
    v.extent = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
    return v;
}

Tensor transpose2d(const Tensor& a) {
    const std::size_t r = a.dim(0), c = a.dim(1);
    Tensor out({c, r});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
    return out;
}

// Two-tap linear interpolation weights along one axis.
struct Tap {
    std::size_t i0, i1;
    double w1;
};

std::vector<Tap> bilinear_taps(std::size_t in, std::size_t out) {
    std::vector<Tap> taps(out);
    const double ratio = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
        double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
        src = std::clamp(src, 0.0, static_cast<double>(in - 1));
        const auto i0 = static_cast<std::size_t>(std::floor(src));
        const std::size_t i1 = std::min(i0 + 1, in - 1);
        taps[o] = {i0, i1, src - static_cast<double>(i0)};
    }
    return taps;
}

}  // namespace

std::size_t ConvSpec::out_extent(std::size_t in_extent) const {
    const std::size_t k = kernel_size();
    const std::size_t padded = in_extent + 2 * padding;
    if (stride == 0) throw ShapeError("convolution stride must be positive");
    if (padded < k) {
        throw ShapeError("convolution output size < 1 (input " + std::to_string(in_extent) + ", kernel " +
                         std::to_string(k) + ", padding " + std::to_string(padding) + ")");
    }
    return (padded - k) / stride + 1;
}

std::uint64_t ConvSpec::pixel_cost() const {
    const std::uint64_t k = kernel_size();
    return k * k * in_channels() * out_channels();
}

void ConvSpec::validate() const {
    require_rank(kernel, 4, "convolution kernel");
    if (kernel.dim(2) != kernel.dim(3)) throw ShapeError("convolution kernel must be square: " + shape_str(kernel.shape()));
    if (stride == 0) throw ShapeError("convolution stride must be positive");
    if (bias && (bias->ndim() != 1 || bias->dim(0) != out_channels())) {
        throw ShapeError("bias shape " + shape_str(bias->shape()) + " does not match " +
                         std::to_string(out_channels()) + " output channels");
    }
}

Tensor im2col(const Tensor& input, std::size_t k, std::size_t stride, std::size_t padding) {
    require_rank(input, 3, "im2col");
    const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
    if (h + 2 * padding < k || w + 2 * padding < k || stride == 0) throw ShapeError("im2col: output size < 1");
    const std::size_t ho = (h + 2 * padding - k) / stride + 1;
    const std::size_t wo = (w + 2 * padding - k) / stride + 1;
    Tensor cols({c * k * k, ho * wo});
    auto out = cols.data();
    const auto in = input.data();
    std::size_t row = 0;
    for (std::size_t ci = 0; ci < c; ++ci) {
        for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx, ++row) {
                double* dst = out.data() + row * ho * wo;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(padding);
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(padding);
                        double v = 0.0;
                        if (iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(h) && ix < static_cast<std::ptrdiff_t>(w)) {
                            v = in[(ci * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)];
                        }
                        dst[oy * wo + ox] = v;
                    }
                }
            }
        }
    }
    return cols;
}

Tensor col2im(const Tensor& cols, std::size_t channels, std::size_t height, std::size_t width, std::size_t k,
              std::size_t stride, std::size_t padding) {
    const std::size_t ho = (height + 2 * padding - k) / stride + 1;
    const std::size_t wo = (width + 2 * padding - k) / stride + 1;
    if (cols.ndim() != 2 || cols.dim(0) != channels * k * k || cols.dim(1) != ho * wo) {
        throw ShapeError("col2im: column matrix " + shape_str(cols.shape()) + " inconsistent with geometry");
    }
    Tensor img({channels, height, width});
    auto out = img.data();
    const auto in = cols.data();
    std::size_t row = 0;
    for (std::size_t ci = 0; ci < channels; ++ci) {
        for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx, ++row) {
                const double* src = in.data() + row * ho * wo;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(padding);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height)) continue;
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(padding);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(width)) continue;
                        out[(ci * height + static_cast<std::size_t>(iy)) * width + static_cast<std::size_t>(ix)] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
    return img;
}

Tensor conv2d_dense(const Tensor& input, const ConvSpec& spec, MacCounter* counter) {
    spec.validate();
    require_rank(input, 3, "conv2d input");
    if (input.dim(0) != spec.in_channels()) {
        throw ShapeError("conv2d: input has " + std::to_string(input.dim(0)) + " channels, kernel expects " +
                         std::to_string(spec.in_channels()));
    }
    const std::size_t ho = spec.out_extent(input.dim(1));
    const std::size_t wo = spec.out_extent(input.dim(2));
    const std::size_t k = spec.kernel_size();
    const std::size_t co = spec.out_channels();
    const std::size_t patch = spec.in_channels() * k * k;
    const std::size_t npos = ho * wo;

    const Tensor cols = im2col(input, k, spec.stride, spec.padding);
    Tensor out({co, ho, wo});
    auto o = out.data();
    const auto kern = spec.kernel.data();
    const auto cv = cols.data();
    for (std::size_t oc = 0; oc < co; ++oc) {
        double* dst = o.data() + oc * npos;
        const double* krow = kern.data() + oc * patch;
        for (std::size_t j = 0; j < patch; ++j) {
            const double a = krow[j];
            const double* src = cv.data() + j * npos;
            for (std::size_t p = 0; p < npos; ++p) dst[p] += a * src[p];
        }
        if (counter) counter->macs += static_cast<std::uint64_t>(patch) * npos;
        if (spec.bias) {
            const double b = (*spec.bias)[oc];
            for (std::size_t p = 0; p < npos; ++p) dst[p] += b;
        }
    }
    require_finite(out, "conv2d_dense");
    return out;
}

Tensor matmul(const Tensor& a_in, const Tensor& b_in, bool trans_a, bool trans_b) {
    require_rank(a_in, 2, "matmul lhs");
    require_rank(b_in, 2, "matmul rhs");
    const Tensor a = trans_a ? transpose2d(a_in) : a_in;
    const Tensor b = trans_b ? transpose2d(b_in) : b_in;
    const std::size_t m = a.dim(0), kk = a.dim(1), n = b.dim(1);
    if (b.dim(0) != kk) {
        throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    Tensor out({m, n});
    auto o = out.data();
    const auto av = a.data();
    const auto bv = b.data();
    for (std::size_t i = 0; i < m; ++i) {
        double* dst = o.data() + i * n;
        for (std::size_t p = 0; p < kk; ++p) {
            const double s = av[i * kk + p];
            const double* src = bv.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) dst[j] += s * src[j];
        }
    }
    return out;
}

Tensor softmax(const Tensor& input, std::size_t axis) {
    const AxisView v = axis_view(input.shape(), axis);
    Tensor out(input.shape());
    const auto in = input.data();
    auto o = out.data();
    for (std::size_t a = 0; a < v.outer; ++a) {
        for (std::size_t i = 0; i < v.inner; ++i) {
            const std::size_t base = a * v.extent * v.inner + i;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t e = 0; e < v.extent; ++e) mx = std::max(mx, in[base + e * v.inner]);
            double z = 0.0;
            for (std::size_t e = 0; e < v.extent; ++e) {
                const double ex = std::exp(in[base + e * v.inner] - mx);
                o[base + e * v.inner] = ex;
                z += ex;
            }
            for (std::size_t e = 0; e < v.extent; ++e) o[base + e * v.inner] /= z;
        }
    }
    require_finite(out, "softmax");
    return out;
}

Tensor log_softmax(const Tensor& input, std::size_t axis) {
    const AxisView v = axis_view(input.shape(), axis);
    Tensor out(input.shape());
    const auto in = input.data();
    auto o = out.data();
    for (std::size_t a = 0; a < v.outer; ++a) {
        for (std::size_t i = 0; i < v.inner; ++i) {
            const std::size_t base = a * v.extent * v.inner + i;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t e = 0; e < v.extent; ++e) mx = std::max(mx, in[base + e * v.inner]);
            double z = 0.0;
            for (std::size_t e = 0; e < v.extent; ++e) z += std::exp(in[base + e * v.inner] - mx);
            const double lz = mx + std::log(z);
            for (std::size_t e = 0; e < v.extent; ++e) o[base + e * v.inner] = in[base + e * v.inner] - lz;
        }
    }
    require_finite(out, "log_softmax");
    return out;
}

Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis) {
    if (a.ndim() != b.ndim()) throw ShapeError("concat: rank mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    for (std::size_t i = 0; i < a.ndim(); ++i) {
        if (i != axis && a.dim(i) != b.dim(i)) {
            throw ShapeError("concat: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                             " disagree off axis " + std::to_string(axis));
        }
    }
    const AxisView va = axis_view(a.shape(), axis);
    const AxisView vb = axis_view(b.shape(), axis);
    Shape shape = a.shape();
    shape[axis] += b.dim(axis);
    Tensor out(shape);
    auto o = out.data();
    const std::size_t ca = va.extent * va.inner, cb = vb.extent * vb.inner;
    for (std::size_t r = 0; r < va.outer; ++r) {
        std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(r * ca), ca, o.begin() + static_cast<std::ptrdiff_t>(r * (ca + cb)));
        std::copy_n(b.data().begin() + static_cast<std::ptrdiff_t>(r * cb), cb, o.begin() + static_cast<std::ptrdiff_t>(r * (ca + cb) + ca));
    }
    return out;
}

Tensor slice(const Tensor& input, std::size_t axis, std::size_t begin, std::size_t end) {
    const AxisView v = axis_view(input.shape(), axis);
    if (begin > end || end > v.extent) {
        throw ShapeError("slice [" + std::to_string(begin) + ", " + std::to_string(end) + ") out of range for axis extent " +
                         std::to_string(v.extent));
    }
    Shape shape = input.shape();
    shape[axis] = end - begin;
    Tensor out(shape);
    const std::size_t len = (end - begin) * v.inner;
    for (std::size_t r = 0; r < v.outer; ++r) {
        std::copy_n(input.data().begin() + static_cast<std::ptrdiff_t>((r * v.extent + begin) * v.inner), len,
                    out.data().begin() + static_cast<std::ptrdiff_t>(r * len));
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw ShapeError("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw ShapeError("sub: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw ShapeError("mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
    return out;
}

Tensor scale(const Tensor& a, double factor) {
    Tensor out = a;
    for (double& v : out.data()) v *= factor;
    return out;
}

Tensor relu(const Tensor& a) {
    Tensor out = a;
    for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
    return out;
}

double sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    return s;
}

Tensor upsample_bilinear(const Tensor& input, std::size_t out_h, std::size_t out_w) {
    require_rank(input, 3, "upsample_bilinear");
    const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
    if (out_h == 0 || out_w == 0 || h == 0 || w == 0) throw ShapeError("upsample_bilinear: empty extent");
    const auto ty = bilinear_taps(h, out_h);
    const auto tx = bilinear_taps(w, out_w);
    Tensor out({c, out_h, out_w});
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t y = 0; y < out_h; ++y) {
            const Tap& a = ty[y];
            for (std::size_t x = 0; x < out_w; ++x) {
                const Tap& b = tx[x];
                const double top = input.at(ch, a.i0, b.i0) * (1.0 - b.w1) + input.at(ch, a.i0, b.i1) * b.w1;
                const double bot = input.at(ch, a.i1, b.i0) * (1.0 - b.w1) + input.at(ch, a.i1, b.i1) * b.w1;
                out.at(ch, y, x) = top * (1.0 - a.w1) + bot * a.w1;
            }
        }
    }
    return out;
}

Tensor upsample_bilinear_adjoint(const Tensor& grad_out, std::size_t in_h, std::size_t in_w) {
    require_rank(grad_out, 3, "upsample_bilinear_adjoint");
    const std::size_t c = grad_out.dim(0), oh = grad_out.dim(1), ow = grad_out.dim(2);
    const auto ty = bilinear_taps(in_h, oh);
    const auto tx = bilinear_taps(in_w, ow);
    Tensor g({c, in_h, in_w});
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t y = 0; y < oh; ++y) {
            const Tap& a = ty[y];
            for (std::size_t x = 0; x < ow; ++x) {
                const Tap& b = tx[x];
                const double v = grad_out.at(ch, y, x);
                g.at(ch, a.i0, b.i0) += v * (1.0 - a.w1) * (1.0 - b.w1);
                g.at(ch, a.i0, b.i1) += v * (1.0 - a.w1) * b.w1;
                g.at(ch, a.i1, b.i0) += v * a.w1 * (1.0 - b.w1);
                g.at(ch, a.i1, b.i1) += v * a.w1 * b.w1;
            }
        }
    }
    return g;
}

}  // namespace trisparse
