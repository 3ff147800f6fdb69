#include "bayeslayers/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "bayeslayers/errors.hpp"

namespace bayeslayers {

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: cannot multiply " + shape_to_string(a.shape()) + " by " +
                     shape_to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.values().data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a.at(i, p);
      const double* brow = b.values().data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += aip * brow[j];
    }
  }
  require_finite(out, "matmul output");
  return out;
}

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding) {
  if (stride == 0) throw ShapeError("stride must be positive");
  const std::size_t padded = in + 2 * padding;
  if (kernel == 0 || kernel > padded) {
    throw ShapeError("kernel extent " + std::to_string(kernel) + " larger than padded input " +
                     std::to_string(padded));
  }
  return (padded - kernel) / stride + 1;
}

namespace {

struct ConvGeometry {
  std::size_t channels, height, width;
  std::size_t filters, kh, kw;
  std::size_t out_h, out_w;
};

ConvGeometry conv_geometry(const Tensor& input, const Tensor& kernels, std::size_t stride, std::size_t padding) {
  if (input.rank() != 3 || kernels.rank() != 4) {
    throw ShapeError("conv2d: expected input [C x H x W] and kernels [F x C x kh x kw], got " +
                     shape_to_string(input.shape()) + " and " + shape_to_string(kernels.shape()));
  }
  if (kernels.dim(1) != input.dim(0)) {
    throw ShapeError("conv2d: kernel channels " + std::to_string(kernels.dim(1)) + " != input channels " +
                     std::to_string(input.dim(0)));
  }
  ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), kernels.dim(0), kernels.dim(2), kernels.dim(3), 0, 0};
  g.out_h = conv_output_extent(g.height, g.kh, stride, padding);
  g.out_w = conv_output_extent(g.width, g.kw, stride, padding);
  return g;
}

// Output positions o in [lo, hi) whose input tap o*stride + k - pad lies in [0, extent).
struct TapRange {
  std::size_t lo, hi;
};

TapRange tap_range(std::size_t extent, std::size_t out_extent, std::size_t k, std::size_t stride, std::size_t pad) {
  const std::size_t lo = pad > k ? (pad - k + stride - 1) / stride : 0;
  if (extent + pad <= k) return {0, 0};
  const std::size_t hi = std::min(out_extent, (extent - 1 + pad - k) / stride + 1);
  return {std::min(lo, hi), hi};
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernels, std::size_t stride, std::size_t padding) {
  const ConvGeometry g = conv_geometry(input, kernels, stride, padding);
  Tensor out({g.filters, g.out_h, g.out_w});
  const double* in = input.values().data();
  const double* w = kernels.values().data();
  double* o = out.values().data();
  // Each output accumulates its taps in (c, ky, kx) order.
  for (std::size_t f = 0; f < g.filters; ++f) {
    double* of = o + f * g.out_h * g.out_w;
    for (std::size_t c = 0; c < g.channels; ++c) {
      const double* ic = in + c * g.height * g.width;
      for (std::size_t ky = 0; ky < g.kh; ++ky) {
        const TapRange ry = tap_range(g.height, g.out_h, ky, stride, padding);
        for (std::size_t kx = 0; kx < g.kw; ++kx) {
          const TapRange rx = tap_range(g.width, g.out_w, kx, stride, padding);
          const double wk = w[((f * g.channels + c) * g.kh + ky) * g.kw + kx];
          for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
            const double* irow = ic + (oy * stride + ky - padding) * g.width + kx - padding;
            double* orow = of + oy * g.out_w;
            for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) orow[ox] += wk * irow[ox * stride];
          }
        }
      }
    }
  }
  require_finite(out, "conv2d output");
  return out;
}

Conv2dGrads conv2d_backward(const Tensor& input, const Tensor& kernels, const Tensor& grad_output,
                            std::size_t stride, std::size_t padding) {
  const ConvGeometry g = conv_geometry(input, kernels, stride, padding);
  if (grad_output.shape() != Shape{g.filters, g.out_h, g.out_w}) {
    throw ShapeError("conv2d_backward: gradient shape " + shape_to_string(grad_output.shape()) +
                     " does not match output");
  }
  Conv2dGrads grads{Tensor(input.shape()), Tensor(kernels.shape())};
  const double* in = input.values().data();
  const double* w = kernels.values().data();
  const double* go = grad_output.values().data();
  double* gi = grads.input.values().data();
  double* gw = grads.kernels.values().data();
  for (std::size_t f = 0; f < g.filters; ++f) {
    const double* gof = go + f * g.out_h * g.out_w;
    for (std::size_t c = 0; c < g.channels; ++c) {
      const double* ic = in + c * g.height * g.width;
      double* gic = gi + c * g.height * g.width;
      for (std::size_t ky = 0; ky < g.kh; ++ky) {
        const TapRange ry = tap_range(g.height, g.out_h, ky, stride, padding);
        for (std::size_t kx = 0; kx < g.kw; ++kx) {
          const TapRange rx = tap_range(g.width, g.out_w, kx, stride, padding);
          const std::size_t kidx = ((f * g.channels + c) * g.kh + ky) * g.kw + kx;
          const double wk = w[kidx];
          double acc = 0.0;
          for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
            const std::size_t offset = (oy * stride + ky - padding) * g.width + kx - padding;
            const double* irow = ic + offset;
            double* girow = gic + offset;
            const double* grow = gof + oy * g.out_w;
            for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) {
              acc += grow[ox] * irow[ox * stride];
              girow[ox * stride] += grow[ox] * wk;
            }
          }
          gw[kidx] += acc;
        }
      }
    }
  }
  return grads;
}

Tensor relu(const Tensor& x) {
  Tensor out = x;
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return out;
}

namespace {
void require_pool_input(const Tensor& x) {
  if (x.rank() != 3 || x.dim(1) < 2 || x.dim(2) < 2) {
    throw ShapeError("max_pool2: expected [C x H x W] with H, W >= 2, got " + shape_to_string(x.shape()));
  }
}
}  // namespace

std::vector<std::size_t> max_pool2_argmax(const Tensor& x) {
  require_pool_input(x);
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t oh = h / 2, ow = w / 2;
  std::vector<std::size_t> idx;
  idx.reserve(c * oh * ow);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = (ch * h + 2 * oy) * w + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t i = (ch * h + 2 * oy + dy) * w + 2 * ox + dx;
            if (x[i] > x[best]) best = i;
          }
        }
        idx.push_back(best);
      }
    }
  }
  return idx;
}

Tensor max_pool2(const Tensor& x) {
  const auto idx = max_pool2_argmax(x);
  Tensor out({x.dim(0), x.dim(1) / 2, x.dim(2) / 2});
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = x[idx[i]];
  return out;
}

Tensor flatten(const Tensor& x) { return x.reshaped({x.size()}); }

double log_sum_exp(const Tensor& v) {
  if (v.empty()) throw ShapeError("log_sum_exp: empty vector");
  require_finite(v, "log_sum_exp input");
  const double hi = *std::max_element(v.values().begin(), v.values().end());
  double sum = 0.0;
  for (double x : v.values()) sum += std::exp(x - hi);
  return hi + std::log(sum);
}

Tensor softmax(const Tensor& v) {
  const double lse = log_sum_exp(v);
  Tensor out = v;
  for (double& x : out.values()) x = std::exp(x - lse);
  return out;
}

}  // namespace bayeslayers
