#pragma once

#include <cstdint>
#include <optional>
#include <type_traits>

#include "slimsplit/tensor.hpp"

namespace slimsplit {

/// Square-kernel convolution geometry. output_padding only affects transposed
/// convolutions, where it disambiguates the output size for stride > 1.
struct ConvGeometry {
  Index kernel = 1;
  Index stride = 1;
  Index padding = 0;
  Index output_padding = 0;
};

/// floor((in + 2*pad - K) / S) + 1
Index conv_output_size(Index in, const ConvGeometry& g);
/// (in - 1) * S - 2*pad + K + output_padding
Index transpose_conv_output_size(Index in, const ConvGeometry& g);

/**
 * Weights and geometry of one convolution layer.
 *
 * Regular convolutions store weights as (out_channels, in_channels, K, K).
 * Transposed convolutions store them as (in_channels, out_channels, K, K), so
 * that transpose_conv2d(y, p) is exactly the input-gradient of conv2d(x, p).
 */
template <typename Scalar>
struct BasicLayerParams {
  BasicTensor<Scalar> weights;
  std::optional<BasicTensor<Scalar>> bias;
  Index stride = 1;
  Index kernel = 1;
  Index padding = 0;
  Index output_padding = 0;

  ConvGeometry geometry() const { return {kernel, stride, padding, output_padding}; }
};

using LayerParams = BasicLayerParams<double>;

template <typename Scalar>
BasicTensor<Scalar> conv2d(const BasicTensor<Scalar>& input, const BasicTensor<Scalar>& weights,
                           const std::type_identity_t<BasicTensor<Scalar>>* bias, const ConvGeometry& g);

template <typename Scalar>
BasicTensor<Scalar> transpose_conv2d(const BasicTensor<Scalar>& input,
                                     const BasicTensor<Scalar>& weights,
                                     const std::type_identity_t<BasicTensor<Scalar>>* bias, const ConvGeometry& g);

template <typename Scalar>
BasicTensor<Scalar> conv2d(const BasicTensor<Scalar>& input, const BasicLayerParams<Scalar>& p) {
  return conv2d(input, p.weights, p.bias ? &*p.bias : nullptr, p.geometry());
}

template <typename Scalar>
BasicTensor<Scalar> transpose_conv2d(const BasicTensor<Scalar>& input,
                                     const BasicLayerParams<Scalar>& p) {
  return transpose_conv2d(input, p.weights, p.bias ? &*p.bias : nullptr, p.geometry());
}

/// Per-channel (x - mean) / sqrt(var + eps) with population variance.
template <typename Scalar>
BasicTensor<Scalar> instance_norm(const BasicTensor<Scalar>& input, double eps = 1e-5);

template <typename Scalar>
BasicTensor<Scalar> silu(const BasicTensor<Scalar>& input);

namespace detail {

// Building blocks shared by the forward ops and the reverse-mode graph. None
// of these touch the multiply-accumulate counter.

/// Input gradient of conv2d: col2im(W^T * dy) onto an input of the given shape.
template <typename Scalar>
BasicTensor<Scalar> conv2d_grad_input(const BasicTensor<Scalar>& grad_out,
                                      const BasicTensor<Scalar>& weights, const Shape& input_shape,
                                      const ConvGeometry& g);

/// dy * im2col(x)^T reshaped to the weight shape (rows = dy channels).
template <typename Scalar>
BasicTensor<Scalar> conv2d_grad_weight(const BasicTensor<Scalar>& grad_out,
                                       const BasicTensor<Scalar>& input, const ConvGeometry& g,
                                       const Shape& weight_shape);

/// Input gradient of instance_norm given the normalized output.
template <typename Scalar>
BasicTensor<Scalar> instance_norm_grad(const BasicTensor<Scalar>& input,
                                       const BasicTensor<Scalar>& grad_out, double eps);

template <typename Scalar>
BasicTensor<Scalar> silu_grad(const BasicTensor<Scalar>& input, const BasicTensor<Scalar>& grad_out);

}  // namespace detail

/// Thread-local count of multiply-accumulates performed by forward
/// convolutions (conv2d and transpose_conv2d).
std::uint64_t& mac_counter();

/// Measures the MACs spent inside a scope.
class MacCounterScope {
 public:
  MacCounterScope() : start_(mac_counter()) {}
  std::uint64_t elapsed() const { return mac_counter() - start_; }

 private:
  std::uint64_t start_;
};

extern template Tensor conv2d(const Tensor&, const Tensor&, const Tensor*, const ConvGeometry&);
extern template TensorF conv2d(const TensorF&, const TensorF&, const TensorF*, const ConvGeometry&);
extern template Tensor transpose_conv2d(const Tensor&, const Tensor&, const Tensor*,
                                        const ConvGeometry&);
extern template TensorF transpose_conv2d(const TensorF&, const TensorF&, const TensorF*,
                                         const ConvGeometry&);
extern template Tensor instance_norm(const Tensor&, double);
extern template TensorF instance_norm(const TensorF&, double);
extern template Tensor silu(const Tensor&);
extern template TensorF silu(const TensorF&);

}  // namespace slimsplit
