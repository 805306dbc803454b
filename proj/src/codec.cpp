#include "slimsplit/codec.hpp"

#include <algorithm>
#include <string>

namespace slimsplit {

void QuantParams::validate() const {
  if (bits < 1 || bits > 8) {
    throw CodecError("bits per symbol must be in [1, 8], got " + std::to_string(bits));
  }
  if (sigma && !(*sigma >= 0.0)) throw CodecError("sigma must be non-negative");
}

double symbol_sigma(const SymbolTensor& zq) {
  if (zq.symbols.empty()) throw CodecError("symbol_sigma: empty tensor");
  Eigen::VectorXd v(zq.size());
  for (Index i = 0; i < zq.size(); ++i) v[i] = zq.symbols[static_cast<std::size_t>(i)];
  return compute_sigma(v);
}

void pack_symbols(const SymbolTensor& zq, std::span<std::uint8_t> out) {
  zq.params.validate();
  const int bits = zq.params.bits;
  if (out.size() != payload_bytes(zq.size(), bits)) {
    throw CodecError("pack_symbols: output buffer holds " + std::to_string(out.size()) +
                     " bytes, need " + std::to_string(payload_bytes(zq.size(), bits)));
  }
  std::fill(out.begin(), out.end(), std::uint8_t{0});
  const unsigned limit = 1u << bits;
  std::size_t bitpos = 0;
  for (std::size_t i = 0; i < zq.symbols.size(); ++i) {
    const unsigned sym = zq.symbols[i];
    if (sym >= limit) {
      throw CodecError("pack_symbols: symbol " + std::to_string(sym) + " at index " +
                       std::to_string(i) + " does not fit in " + std::to_string(bits) + " bits");
    }
    for (int k = bits - 1; k >= 0; --k, ++bitpos) {
      if ((sym >> k) & 1u) out[bitpos / 8] |= static_cast<std::uint8_t>(0x80u >> (bitpos % 8));
    }
  }
}

std::vector<std::uint8_t> pack_symbols(const SymbolTensor& zq) {
  zq.params.validate();
  std::vector<std::uint8_t> out(payload_bytes(zq.size(), zq.params.bits));
  pack_symbols(zq, out);
  return out;
}

SymbolTensor unpack_symbols(std::span<const std::uint8_t> bytes, const Shape& shape, int bits) {
  SymbolTensor out{shape, {}, QuantParams{bits, std::nullopt, SigmaMode::side_info}};
  out.params.validate();
  const Index n = numel(shape);
  if (bytes.size() != payload_bytes(n, bits)) {
    throw CodecError("unpack_symbols: " + std::to_string(bytes.size()) + " bytes for " +
                     std::to_string(n) + " symbols at " + std::to_string(bits) +
                     " bits, expected " + std::to_string(payload_bytes(n, bits)));
  }
  out.symbols.resize(static_cast<std::size_t>(n));
  std::size_t bitpos = 0;
  for (auto& sym : out.symbols) {
    unsigned v = 0;
    for (int k = 0; k < bits; ++k, ++bitpos) {
      v = (v << 1) | ((bytes[bitpos / 8] >> (7 - bitpos % 8)) & 1u);
    }
    sym = static_cast<std::uint8_t>(v);
  }
  return out;
}

}  // namespace slimsplit
