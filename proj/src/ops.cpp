#include "slimsplit/ops.hpp"

#include <algorithm>

namespace slimsplit {

Index conv_output_size(Index in, const ConvGeometry& g) {
  return (in + 2 * g.padding - g.kernel) / g.stride + 1;
}

Index transpose_conv_output_size(Index in, const ConvGeometry& g) {
  return (in - 1) * g.stride - 2 * g.padding + g.kernel + g.output_padding;
}

std::uint64_t& mac_counter() {
  thread_local std::uint64_t count = 0;
  return count;
}

namespace {

void check_geometry(const ConvGeometry& g, const char* what) {
  if (g.kernel < 1 || g.stride < 1 || g.padding < 0 || g.output_padding < 0) {
    throw ShapeError(std::string(what) + ": kernel and stride must be >= 1, padding >= 0");
  }
}

template <typename Scalar>
using RowMatrix = typename BasicTensor<Scalar>::RowMatrix;

// (C*K*K) x (Ho*Wo) patch matrix; row index (c*K + kh)*K + kw.
template <typename Scalar>
RowMatrix<Scalar> im2col(const Scalar* in, Index channels, Index height, Index width,
                         const ConvGeometry& g, Index out_h, Index out_w) {
  const Index k = g.kernel;
  RowMatrix<Scalar> cols(channels * k * k, out_h * out_w);
  for (Index c = 0; c < channels; ++c) {
    const Scalar* plane = in + c * height * width;
    for (Index kh = 0; kh < k; ++kh) {
      for (Index kw = 0; kw < k; ++kw) {
        Scalar* row = cols.row((c * k + kh) * k + kw).data();
        for (Index oh = 0; oh < out_h; ++oh) {
          const Index ih = oh * g.stride - g.padding + kh;
          Scalar* dst = row + oh * out_w;
          if (ih < 0 || ih >= height) {
            std::fill(dst, dst + out_w, Scalar(0));
            continue;
          }
          const Scalar* src = plane + ih * width;
          for (Index ow = 0; ow < out_w; ++ow) {
            const Index iw = ow * g.stride - g.padding + kw;
            dst[ow] = (iw >= 0 && iw < width) ? src[iw] : Scalar(0);
          }
        }
      }
    }
  }
  return cols;
}

template <typename Scalar>
void col2im(const RowMatrix<Scalar>& cols, Scalar* out, Index channels, Index height, Index width,
            const ConvGeometry& g, Index in_h, Index in_w) {
  // in_h/in_w: the spatial size of the "patch grid" (the conv output size).
  const Index k = g.kernel;
  for (Index c = 0; c < channels; ++c) {
    Scalar* plane = out + c * height * width;
    for (Index kh = 0; kh < k; ++kh) {
      for (Index kw = 0; kw < k; ++kw) {
        const Scalar* row = cols.row((c * k + kh) * k + kw).data();
        for (Index oh = 0; oh < in_h; ++oh) {
          const Index ih = oh * g.stride - g.padding + kh;
          if (ih < 0 || ih >= height) continue;
          Scalar* dst = plane + ih * width;
          const Scalar* src = row + oh * in_w;
          for (Index ow = 0; ow < in_w; ++ow) {
            const Index iw = ow * g.stride - g.padding + kw;
            if (iw >= 0 && iw < width) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

bool is_pointwise(const ConvGeometry& g) {
  return g.kernel == 1 && g.stride == 1 && g.padding == 0;
}

template <typename Scalar>
void add_bias(BasicTensor<Scalar>& out, const BasicTensor<Scalar>* bias, const char* what) {
  if (!bias) return;
  if (bias->size() != out.channels()) {
    throw ShapeError(std::string(what) + ": bias " + to_string(bias->shape()) +
                     " does not match output channels " + std::to_string(out.channels()));
  }
  out.matrix().colwise() += bias->data();
}

template <typename Scalar>
void check_conv_weights(const BasicTensor<Scalar>& input, const BasicTensor<Scalar>& weights,
                        Index weight_in_axis, const ConvGeometry& g, const char* what) {
  require_rank3(input, what);
  check_geometry(g, what);
  if (weights.rank() != 4 || weights.dim(2) != g.kernel || weights.dim(3) != g.kernel ||
      weights.dim(weight_in_axis) != input.channels()) {
    throw ShapeError(std::string(what) + ": input " + to_string(input.shape()) +
                     " incompatible with weights " + to_string(weights.shape()) + " (kernel " +
                     std::to_string(g.kernel) + ")");
  }
}

}  // namespace

template <typename Scalar>
BasicTensor<Scalar> conv2d(const BasicTensor<Scalar>& input, const BasicTensor<Scalar>& weights,
                           const std::type_identity_t<BasicTensor<Scalar>>* bias, const ConvGeometry& g) {
  check_conv_weights(input, weights, 1, g, "conv2d");
  const Index out_c = weights.dim(0);
  const Index in_c = input.channels();
  const Index out_h = conv_output_size(input.height(), g);
  const Index out_w = conv_output_size(input.width(), g);
  if (out_h < 1 || out_w < 1) {
    throw ShapeError("conv2d: input " + to_string(input.shape()) + " too small for kernel " +
                     std::to_string(g.kernel));
  }
  BasicTensor<Scalar> out({out_c, out_h, out_w});
  typename BasicTensor<Scalar>::ConstMatrixMap w(weights.data().data(), out_c,
                                                 in_c * g.kernel * g.kernel);
  if (is_pointwise(g)) {
    out.matrix().noalias() = w * input.matrix();
  } else {
    const auto cols = im2col(input.data().data(), in_c, input.height(), input.width(), g, out_h,
                             out_w);
    out.matrix().noalias() = w * cols;
  }
  add_bias(out, bias, "conv2d");
  mac_counter() += static_cast<std::uint64_t>(out_c * in_c * g.kernel * g.kernel * out_h * out_w);
  return out;
}

template <typename Scalar>
BasicTensor<Scalar> transpose_conv2d(const BasicTensor<Scalar>& input,
                                     const BasicTensor<Scalar>& weights,
                                     const std::type_identity_t<BasicTensor<Scalar>>* bias, const ConvGeometry& g) {
  check_conv_weights(input, weights, 0, g, "transpose_conv2d");
  if (g.output_padding >= g.stride) {
    throw ShapeError("transpose_conv2d: output_padding must be smaller than stride");
  }
  const Index out_c = weights.dim(1);
  const Index out_h = transpose_conv_output_size(input.height(), g);
  const Index out_w = transpose_conv_output_size(input.width(), g);
  if (out_h < 1 || out_w < 1) {
    throw ShapeError("transpose_conv2d: empty output for input " + to_string(input.shape()));
  }
  auto out = detail::conv2d_grad_input(input, weights, {out_c, out_h, out_w}, g);
  add_bias(out, bias, "transpose_conv2d");
  mac_counter() += static_cast<std::uint64_t>(input.channels() * out_c * g.kernel * g.kernel *
                                              input.height() * input.width());
  return out;
}

template <typename Scalar>
BasicTensor<Scalar> instance_norm(const BasicTensor<Scalar>& input, double eps) {
  require_rank3(input, "instance_norm");
  BasicTensor<Scalar> out(input.shape());
  const auto x = input.matrix();
  auto y = out.matrix();
  const auto n = static_cast<Scalar>(x.cols());
  for (Index c = 0; c < x.rows(); ++c) {
    const Scalar mean = x.row(c).sum() / n;
    const Scalar var = (x.row(c).array() - mean).square().sum() / n;
    const Scalar denom = std::sqrt(var + static_cast<Scalar>(eps));
    // Only an exact zero (eps = 0, constant channel) is special; NaN must
    // propagate so a diverged model is noticed.
    if (denom == Scalar(0)) {
      y.row(c).setZero();
    } else {
      y.row(c) = (x.row(c).array() - mean) / denom;
    }
  }
  return out;
}

template <typename Scalar>
BasicTensor<Scalar> silu(const BasicTensor<Scalar>& input) {
  BasicTensor<Scalar> out(input.shape());
  out.data() = input.data().unaryExpr([](Scalar v) { return v / (Scalar(1) + std::exp(-v)); });
  return out;
}

namespace detail {

template <typename Scalar>
BasicTensor<Scalar> conv2d_grad_input(const BasicTensor<Scalar>& grad_out,
                                      const BasicTensor<Scalar>& weights, const Shape& input_shape,
                                      const ConvGeometry& g) {
  const Index out_c = weights.dim(0);
  const Index in_c = input_shape[0];
  if (grad_out.rank() != 3 || grad_out.channels() != out_c) {
    throw ShapeError("conv2d backward: gradient " + to_string(grad_out.shape()) +
                     " does not match weights " + to_string(weights.shape()));
  }
  typename BasicTensor<Scalar>::ConstMatrixMap w(weights.data().data(), out_c,
                                                 in_c * g.kernel * g.kernel);
  BasicTensor<Scalar> grad_in(input_shape);
  if (is_pointwise(g)) {
    grad_in.matrix().noalias() = w.transpose() * grad_out.matrix();
    return grad_in;
  }
  RowMatrix<Scalar> cols = w.transpose() * grad_out.matrix();
  col2im<Scalar>(cols, grad_in.data().data(), in_c, input_shape[1], input_shape[2], g,
                 grad_out.height(), grad_out.width());
  return grad_in;
}

template <typename Scalar>
BasicTensor<Scalar> conv2d_grad_weight(const BasicTensor<Scalar>& grad_out,
                                       const BasicTensor<Scalar>& input, const ConvGeometry& g,
                                       const Shape& weight_shape) {
  BasicTensor<Scalar> grad_w(weight_shape);
  typename BasicTensor<Scalar>::MatrixMap gw(grad_w.data().data(), grad_out.channels(),
                                             input.channels() * g.kernel * g.kernel);
  if (is_pointwise(g)) {
    gw.noalias() = grad_out.matrix() * input.matrix().transpose();
  } else {
    const auto cols = im2col(input.data().data(), input.channels(), input.height(),
                             input.width(), g, grad_out.height(), grad_out.width());
    gw.noalias() = grad_out.matrix() * cols.transpose();
  }
  return grad_w;
}

template <typename Scalar>
BasicTensor<Scalar> instance_norm_grad(const BasicTensor<Scalar>& input,
                                       const BasicTensor<Scalar>& grad_out, double eps) {
  BasicTensor<Scalar> grad_in(input.shape());
  const auto x = input.matrix();
  const auto dy = grad_out.matrix();
  auto dx = grad_in.matrix();
  const auto n = static_cast<Scalar>(x.cols());
  for (Index c = 0; c < x.rows(); ++c) {
    const Scalar mean = x.row(c).sum() / n;
    const Scalar var = (x.row(c).array() - mean).square().sum() / n;
    const Scalar denom = std::sqrt(var + static_cast<Scalar>(eps));
    if (denom == Scalar(0)) {
      dx.row(c).setZero();
      continue;
    }
    const auto xhat = ((x.row(c).array() - mean) / denom).eval();
    const Scalar mean_dy = dy.row(c).sum() / n;
    const Scalar mean_dy_xhat = (dy.row(c).array() * xhat).sum() / n;
    dx.row(c) = (dy.row(c).array() - mean_dy - xhat * mean_dy_xhat) / denom;
  }
  return grad_in;
}

template <typename Scalar>
BasicTensor<Scalar> silu_grad(const BasicTensor<Scalar>& input,
                              const BasicTensor<Scalar>& grad_out) {
  BasicTensor<Scalar> grad_in(input.shape());
  grad_in.data() = input.data().binaryExpr(grad_out.data(), [](Scalar v, Scalar g) {
    const Scalar s = Scalar(1) / (Scalar(1) + std::exp(-v));
    return g * s * (Scalar(1) + v * (Scalar(1) - s));
  });
  return grad_in;
}

template Tensor conv2d_grad_input(const Tensor&, const Tensor&, const Shape&, const ConvGeometry&);
template TensorF conv2d_grad_input(const TensorF&, const TensorF&, const Shape&,
                                   const ConvGeometry&);
template Tensor conv2d_grad_weight(const Tensor&, const Tensor&, const ConvGeometry&, const Shape&);
template TensorF conv2d_grad_weight(const TensorF&, const TensorF&, const ConvGeometry&,
                                    const Shape&);
template Tensor instance_norm_grad(const Tensor&, const Tensor&, double);
template TensorF instance_norm_grad(const TensorF&, const TensorF&, double);
template Tensor silu_grad(const Tensor&, const Tensor&);
template TensorF silu_grad(const TensorF&, const TensorF&);

}  // namespace detail

template Tensor conv2d(const Tensor&, const Tensor&, const Tensor*, const ConvGeometry&);
template TensorF conv2d(const TensorF&, const TensorF&, const TensorF*, const ConvGeometry&);
template Tensor transpose_conv2d(const Tensor&, const Tensor&, const Tensor*, const ConvGeometry&);
template TensorF transpose_conv2d(const TensorF&, const TensorF&, const TensorF*,
                                  const ConvGeometry&);
template Tensor instance_norm(const Tensor&, double);
template TensorF instance_norm(const TensorF&, double);
template Tensor silu(const Tensor&);
template TensorF silu(const TensorF&);

}  // namespace slimsplit
