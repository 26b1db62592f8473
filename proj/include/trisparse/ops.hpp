#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <utility>

#include "trisparse/tensor.hpp"

namespace trisparse {

/// Multiply-accumulate counter, bumped inside the convolution inner loops.
struct MacCounter {
    std::uint64_t macs = 0;
};

/// Convolution weights and geometry. Cross-correlation with zero padding.
struct ConvSpec {
    Tensor kernel;               // C_o x C_i x k x k
    std::optional<Tensor> bias;  // C_o
    std::size_t stride = 1;
    std::size_t padding = 0;

    std::size_t out_channels() const { return kernel.dim(0); }
    std::size_t in_channels() const { return kernel.dim(1); }
    std::size_t kernel_size() const { return kernel.dim(2); }

    /// Output extent along one spatial axis; throws ShapeError if < 1.
    std::size_t out_extent(std::size_t in_extent) const;

    /// Multiply-accumulates per output pixel, k*k*C_i*C_o.
    std::uint64_t pixel_cost() const;

    void validate() const;
};

/// Reference dense convolution of a C_i x H x W input.
Tensor conv2d_dense(const Tensor& input, const ConvSpec& spec, MacCounter* counter = nullptr);

/// Unfold receptive fields into a (C_i*k*k) x (H_o*W_o) matrix.
Tensor im2col(const Tensor& input, std::size_t k, std::size_t stride, std::size_t padding);

/// Adjoint of im2col: scatter-add a column matrix back to a C x H x W image.
Tensor col2im(const Tensor& cols, std::size_t channels, std::size_t height, std::size_t width,
              std::size_t k, std::size_t stride, std::size_t padding);

/// Row-major matrix product with optional transposes; fixed summation order.
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);

Tensor softmax(const Tensor& input, std::size_t axis);
Tensor log_softmax(const Tensor& input, std::size_t axis);

Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis);

/// Half-open range [begin, end) along `axis`.
Tensor slice(const Tensor& input, std::size_t axis, std::size_t begin, std::size_t end);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor relu(const Tensor& a);
double sum(const Tensor& a);

/// Bilinear resize of C x h x w to C x H x W (half-pixel centers, edge clamped).
Tensor upsample_bilinear(const Tensor& input, std::size_t out_h, std::size_t out_w);

/// Adjoint of upsample_bilinear for the same geometry.
Tensor upsample_bilinear_adjoint(const Tensor& grad_out, std::size_t in_h, std::size_t in_w);

}  // namespace trisparse
