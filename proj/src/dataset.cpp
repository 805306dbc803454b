#include "slimsplit/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>

#include "slimsplit/bytes.hpp"
#include "slimsplit/rng.hpp"

namespace slimsplit {

namespace {

bool inside(int label, double u, double v) {
  // (u, v) are shape-local coordinates, the shape spans roughly [-1, 1].
  switch (label) {
    case 0: return u * u + v * v <= 1.0;
    case 1: return std::abs(u) <= 0.8 && std::abs(v) <= 0.8;
    case 2: return v >= -0.9 && v <= 0.8 && std::abs(u) <= 0.55 * (v + 0.9);
    default: return (std::abs(u) <= 0.3 && std::abs(v) <= 1.0) || (std::abs(v) <= 0.3 && std::abs(u) <= 1.0);
  }
}

}  // namespace

ToyDataset::ToyDataset(std::uint64_t seed, Index image_size, Index train_size,
                       Index validation_size)
    : seed_(seed), image_size_(image_size), train_size_(train_size),
      validation_size_(validation_size) {
  if (image_size < 8) throw std::invalid_argument("image size must be at least 8");
}

Sample ToyDataset::get(Split split, Index index) const {
  if (index < 0 || index >= size(split)) {
    throw std::out_of_range("dataset index " + std::to_string(index) + " out of range");
  }
  return generate_sample(seed_, split, index, image_size_);
}

Sample generate_sample(std::uint64_t seed, Split split, Index index, Index image_size) {
  Rng rng(seed, {0xDA7A5E7ULL, static_cast<std::uint64_t>(split), static_cast<std::uint64_t>(index)});
  Sample s;
  s.label = static_cast<int>(rng.uniform_int(0, ToyDataset::kNumClasses - 1));
  s.image = Tensor({3, image_size, image_size});

  double bg[3], grad_x[3], grad_y[3], fg[3];
  for (int c = 0; c < 3; ++c) {
    bg[c] = rng.uniform(-0.6, 0.6);
    grad_x[c] = rng.uniform(-0.3, 0.3);
    grad_y[c] = rng.uniform(-0.3, 0.3);
    fg[c] = rng.uniform(-1.0, 1.0);
  }
  // Keep the shape visibly distinct from the background.
  double contrast = 0;
  for (int c = 0; c < 3; ++c) contrast += std::abs(fg[c] - bg[c]);
  if (contrast < 0.8) {
    for (int c = 0; c < 3; ++c) fg[c] = bg[c] > 0 ? bg[c] - 0.8 : bg[c] + 0.8;
  }
  const double n = static_cast<double>(image_size);
  const double radius = rng.uniform(0.18, 0.32) * n;
  const double cx = rng.uniform(radius, n - radius);
  const double cy = rng.uniform(radius, n - radius);
  const double angle = rng.uniform(-0.4, 0.4);
  const double ca = std::cos(angle), sa = std::sin(angle);
  const double noise = rng.uniform(0.05, 0.2);

  for (Index h = 0; h < image_size; ++h) {
    for (Index w = 0; w < image_size; ++w) {
      const double dx = (static_cast<double>(w) + 0.5 - cx) / radius;
      const double dy = (static_cast<double>(h) + 0.5 - cy) / radius;
      const bool fore = inside(s.label, ca * dx + sa * dy, -sa * dx + ca * dy);
      for (int c = 0; c < 3; ++c) {
        double v = fore ? fg[c]
                        : bg[c] + grad_x[c] * (2.0 * w / n - 1.0) + grad_y[c] * (2.0 * h / n - 1.0);
        v += noise * rng.uniform(-1.0, 1.0);
        s.image(c, h, w) = std::clamp(v, -1.0, 1.0);
      }
    }
  }
  return s;
}

Tensor read_raw_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open image " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  ByteReader r(bytes);
  char magic[4];
  try {
    r.raw(magic, 4);
    if (std::string(magic, 4) != "RIMG") throw std::runtime_error("not a raw image: " + path.string());
    const Index w = r.u16(), h = r.u16();
    Tensor t({3, h, w});
    const auto pixels = r.take(static_cast<std::size_t>(3 * h * w));
    for (Index y = 0; y < h; ++y) {
      for (Index x = 0; x < w; ++x) {
        for (Index c = 0; c < 3; ++c) {
          t(c, y, x) = pixels[static_cast<std::size_t>((y * w + x) * 3 + c)] / 127.5 - 1.0;
        }
      }
    }
    return t;
  } catch (const std::out_of_range&) {
    throw std::runtime_error("truncated raw image " + path.string());
  }
}

void write_raw_image(const std::filesystem::path& path, const Tensor& image) {
  require_rank3(image, "write_raw_image");
  if (image.channels() != 3) throw ShapeError("write_raw_image: expected 3 channels");
  ByteWriter w;
  w.raw("RIMG", 4);
  w.u16(static_cast<std::uint16_t>(image.width()));
  w.u16(static_cast<std::uint16_t>(image.height()));
  for (Index y = 0; y < image.height(); ++y) {
    for (Index x = 0; x < image.width(); ++x) {
      for (Index c = 0; c < 3; ++c) {
        const double v = std::clamp((image(c, y, x) + 1.0) * 127.5, 0.0, 255.0);
        w.u8(static_cast<std::uint8_t>(std::lround(v)));
      }
    }
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(w.bytes().data()), static_cast<std::streamsize>(w.size()));
  if (!out) throw std::runtime_error("cannot write image " + path.string());
}

}  // namespace slimsplit
