#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>

#include "slimsplit/model.hpp"

namespace slimsplit {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint16_t kCheckpointVersion = 1;

/**
 * Flat little-endian container:
 *
 *   "SLIM" | version u16 | N u8 | spec digest u64 | tensor count u32
 *   then per tensor: name length u16 | name | rank u8 | dims u32... | f64 values
 *
 * Every named parameter is stored, frozen teacher and classifier included, so
 * a loaded model is bit-identical to the one saved.
 */
void write_checkpoint(std::ostream& out, const SplitModel& model);
SplitModel read_checkpoint(std::istream& in);

void save_checkpoint(const std::filesystem::path& path, const SplitModel& model);
SplitModel load_checkpoint(const std::filesystem::path& path);

}  // namespace slimsplit
