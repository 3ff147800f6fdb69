#pragma once

#include <cstddef>
#include <vector>

#include "bayeslayers/tensor.hpp"

namespace bayeslayers {

// Matrix product a[m x k] * b[k x n] with 64-bit accumulation.
Tensor matmul(const Tensor& a, const Tensor& b);

// Output extent of a strided, padded window along one axis.
std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding);

// 2-D cross-correlation (no kernel flip).
// input [C x H x W], kernels [F x C x kh x kw] -> [F x H' x W'],
// H' = floor((H + 2p - kh) / stride) + 1.
Tensor conv2d(const Tensor& input, const Tensor& kernels, std::size_t stride, std::size_t padding);

struct Conv2dGrads {
  Tensor input;
  Tensor kernels;
};

// Reverse-mode gradients of conv2d given dL/doutput.
Conv2dGrads conv2d_backward(const Tensor& input, const Tensor& kernels, const Tensor& grad_output,
                            std::size_t stride, std::size_t padding);

Tensor relu(const Tensor& x);

// 2x2 window max with stride 2 over each channel of [C x H x W]. Odd extents
// are floored: the last row/column is dropped.
Tensor max_pool2(const Tensor& x);

// Flat index into x of the maximum of every pooling window, in output order.
std::vector<std::size_t> max_pool2_argmax(const Tensor& x);

Tensor flatten(const Tensor& x);

// log sum_k exp(v_k) with max subtraction. Throws ShapeError on empty input.
double log_sum_exp(const Tensor& v);

Tensor softmax(const Tensor& v);

}  // namespace bayeslayers
