#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "slimsplit/tensor.hpp"

namespace slimsplit {

enum class Split : std::uint64_t { train = 1, validation = 2 };

struct Sample {
  Tensor image;  // (3, H, W), values in [-1, 1]
  int label = 0;
};

/**
 * Procedural images: one colored shape (disc, square, triangle or cross; the
 * class label) at a random position and scale over a noisy gradient
 * background. Each sample is drawn from its own RNG stream keyed by
 * (seed, split, index), so splits never share a stream and any sample can be
 * regenerated independently.
 */
class ToyDataset {
 public:
  static constexpr int kNumClasses = 4;

  ToyDataset(std::uint64_t seed, Index image_size, Index train_size, Index validation_size);

  Index image_size() const { return image_size_; }
  Index size(Split split) const { return split == Split::train ? train_size_ : validation_size_; }
  Sample get(Split split, Index index) const;
  Sample train(Index index) const { return get(Split::train, index); }
  Sample validation(Index index) const { return get(Split::validation, index); }

 private:
  std::uint64_t seed_;
  Index image_size_, train_size_, validation_size_;
};

Sample generate_sample(std::uint64_t seed, Split split, Index index, Index image_size);

/// "RIMG" | width u16 LE | height u16 LE | interleaved 8-bit RGB rows.
Tensor read_raw_image(const std::filesystem::path& path);
void write_raw_image(const std::filesystem::path& path, const Tensor& image);

}  // namespace slimsplit
