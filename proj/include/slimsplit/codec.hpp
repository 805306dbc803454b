#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "slimsplit/tensor.hpp"

namespace slimsplit {

class CodecError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class SigmaMode { side_info, receiver_recompute };

/// Below this standard deviation a tensor is treated as constant.
inline constexpr double kSigmaFloor = 1e-12;

struct QuantParams {
  int bits = 8;
  std::optional<double> sigma;  // side information; absent until quantized
  SigmaMode mode = SigmaMode::side_info;

  void validate() const;
  int levels() const { return (1 << bits) - 1; }
};

/// z_Q: b-bit symbols in channel-major, row-major order.
struct SymbolTensor {
  Shape shape;
  std::vector<std::uint8_t> symbols;
  QuantParams params;

  Index size() const { return static_cast<Index>(symbols.size()); }
};

/// Population standard deviation over every element.
template <typename Derived>
double compute_sigma(const Eigen::DenseBase<Derived>& z) {
  if (z.size() == 0) throw CodecError("compute_sigma: empty tensor");
  const auto v = z.derived().template cast<double>().eval();
  const double mean = v.mean();
  return std::sqrt((v.array() - mean).square().mean());
}

template <typename Scalar>
double compute_sigma(const BasicTensor<Scalar>& z) {
  return compute_sigma(z.data());
}

/**
 * z_Q = round(clip((2^b - 1) * (z / (b*sigma) + 1/2), 0, 2^b - 1)), rounding
 * half away from zero. A tensor with sigma below kSigmaFloor quantizes to all
 * zeros with sigma recorded as 0.
 */
template <typename Scalar>
SymbolTensor quantize(const BasicTensor<Scalar>& z, int bits,
                      SigmaMode mode = SigmaMode::side_info) {
  SymbolTensor out{z.shape(), std::vector<std::uint8_t>(static_cast<std::size_t>(z.size()), 0),
                   QuantParams{bits, std::nullopt, mode}};
  out.params.validate();
  const double sigma = compute_sigma(z);
  if (sigma < kSigmaFloor) {
    out.params.sigma = 0.0;
    return out;
  }
  out.params.sigma = sigma;
  const double levels = out.params.levels();
  const double range = bits * sigma;
  for (Index i = 0; i < z.size(); ++i) {
    const double scaled = levels * (static_cast<double>(z[i]) / range + 0.5);
    out.symbols[static_cast<std::size_t>(i)] =
        static_cast<std::uint8_t>(std::round(std::clamp(scaled, 0.0, levels)));
  }
  return out;
}

/// sigma(z_Q) of the symbol values themselves (receiver_recompute mode).
double symbol_sigma(const SymbolTensor& zq);

/// z~ = (z_Q / (2^b - 1) - 1/2) * b * sigma.
template <typename Scalar = double>
BasicTensor<Scalar> dequantize(const SymbolTensor& zq) {
  zq.params.validate();
  if (numel(zq.shape) != zq.size()) {
    throw CodecError("dequantize: " + std::to_string(zq.size()) + " symbols for shape " +
                     to_string(zq.shape));
  }
  double sigma = 0.0;
  if (zq.params.mode == SigmaMode::side_info) {
    if (!zq.params.sigma) throw CodecError("dequantize: side-info sigma missing");
    sigma = *zq.params.sigma;
  } else {
    sigma = symbol_sigma(zq);
  }
  BasicTensor<Scalar> out(zq.shape);
  if (sigma < kSigmaFloor) return out;
  const double levels = zq.params.levels();
  const double range = zq.params.bits * sigma;
  for (Index i = 0; i < out.size(); ++i) {
    out[i] = static_cast<Scalar>((zq.symbols[static_cast<std::size_t>(i)] / levels - 0.5) * range);
  }
  return out;
}

/// ceil(numel * b / 8), independent of the ensemble size that produced z.
inline std::size_t payload_bytes(Index numel, int bits) {
  return static_cast<std::size_t>((numel * bits + 7) / 8);
}

/// MSB-first bit packing; the final byte is zero-padded.
std::vector<std::uint8_t> pack_symbols(const SymbolTensor& zq);
void pack_symbols(const SymbolTensor& zq, std::span<std::uint8_t> out);

/// Inverse of pack_symbols. The returned params carry `bits` only.
SymbolTensor unpack_symbols(std::span<const std::uint8_t> bytes, const Shape& shape, int bits);

}  // namespace slimsplit

namespace slimsplit {

/// Sigma as it survives the wire (a 32-bit float).
inline double wire_sigma(double sigma) { return static_cast<double>(static_cast<float>(sigma)); }

/// Q^-1(Q(z)) with side-info sigma rounded exactly as the wire rounds it.
template <typename Scalar>
BasicTensor<Scalar> quantize_roundtrip(const BasicTensor<Scalar>& z, int bits) {
  SymbolTensor zq = quantize(z, bits);
  zq.params.sigma = wire_sigma(*zq.params.sigma);
  return dequantize<Scalar>(zq);
}

}  // namespace slimsplit
