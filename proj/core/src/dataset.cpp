#include "veritrain/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "veritrain/errors.hpp"
#include "veritrain/rng.hpp"

namespace veritrain::data {

namespace {

struct Rgb {
  double r, g, b;
};

// One base color per class; the shape geometry varies per sample.
constexpr Rgb kClassColors[] = {
    {0.85, 0.20, 0.15},  // squares, red
    {0.15, 0.80, 0.25},  // crosses, green
    {0.20, 0.30, 0.85},  // stripes, blue
};

void put_pixel(double* img, std::size_t channels, std::size_t size, std::size_t y, std::size_t x,
               const Rgb& c, double jitter) {
  const double vals[3] = {c.r + jitter, c.g + jitter, c.b + jitter};
  for (std::size_t ch = 0; ch < channels; ++ch) {
    img[ch * size * size + y * size + x] = std::clamp(vals[ch % 3], 0.0, 1.0);
  }
}

void draw_sample(double* img, std::size_t channels, std::size_t size, int label,
                 DeterministicRng& rng) {
  // Noisy dim background.
  for (std::size_t i = 0; i < channels * size * size; ++i) {
    img[i] = rng.uniform_double() * 0.15;
  }
  const Rgb color = kClassColors[label % 3];
  const double jitter = (rng.uniform_double() - 0.5) * 0.2;
  switch (label % 3) {
    case 0: {  // filled square
      const std::size_t s = 5 + rng.uniform_u64(4);
      const std::size_t y0 = rng.uniform_u64(size - s);
      const std::size_t x0 = rng.uniform_u64(size - s);
      for (std::size_t y = y0; y < y0 + s; ++y) {
        for (std::size_t x = x0; x < x0 + s; ++x) {
          put_pixel(img, channels, size, y, x, color, jitter);
        }
      }
      break;
    }
    case 1: {  // plus-shaped cross, arms 2 pixels thick
      const std::size_t arm = 3 + rng.uniform_u64(3);
      const std::size_t cy = arm + rng.uniform_u64(size - 2 * arm - 1);
      const std::size_t cx = arm + rng.uniform_u64(size - 2 * arm - 1);
      for (std::size_t d = 0; d <= arm; ++d) {
        for (std::size_t t = 0; t < 2; ++t) {
          put_pixel(img, channels, size, cy - d, cx + t, color, jitter);
          put_pixel(img, channels, size, cy + d, cx + t, color, jitter);
          put_pixel(img, channels, size, cy + t, cx - d, color, jitter);
          put_pixel(img, channels, size, cy + t, cx + d, color, jitter);
        }
      }
      break;
    }
    default: {  // horizontal stripes
      const std::size_t phase = rng.uniform_u64(3);
      for (std::size_t y = phase; y < size; y += 3) {
        for (std::size_t x = 0; x < size; ++x) {
          put_pixel(img, channels, size, y, x, color, jitter);
        }
      }
      break;
    }
  }
}

Dataset make_split(const SyntheticSpec& spec, std::size_t count, DeterministicRng& rng) {
  Dataset ds;
  ds.num_classes = spec.num_classes;
  ds.images = Tensor({count, spec.channels, spec.image_size, spec.image_size});
  ds.labels.resize(count);
  const std::size_t sample = spec.channels * spec.image_size * spec.image_size;
  for (std::size_t i = 0; i < count; ++i) {
    const int label = static_cast<int>(i % spec.num_classes);
    ds.labels[i] = label;
    draw_sample(ds.images.data() + i * sample, spec.channels, spec.image_size, label, rng);
  }
  return ds;
}

}  // namespace

SyntheticData make_synthetic_shapes(const SyntheticSpec& spec) {
  if (spec.num_classes < 2 || spec.num_classes > 3) {
    throw DomainError("synthetic shape task supports 2 or 3 classes");
  }
  if (spec.image_size < 12) throw DomainError("synthetic images need at least 12x12 pixels");
  DeterministicRng rng(spec.seed);
  SyntheticData data;
  data.train = make_split(spec, spec.train_size, rng);
  data.test = make_split(spec, spec.test_size, rng);
  return data;
}

crypto::Digest dataset_digest(const Dataset& ds) {
  std::vector<std::uint8_t> bytes;
  auto u32 = [&bytes](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  };
  u32(static_cast<std::uint32_t>(ds.size()));
  for (std::size_t e : ds.images.shape()) u32(static_cast<std::uint32_t>(e));
  u32(static_cast<std::uint32_t>(ds.num_classes));
  for (int label : ds.labels) u32(static_cast<std::uint32_t>(label));
  const std::size_t offset = bytes.size();
  bytes.resize(offset + ds.images.numel() * sizeof(double));
  std::memcpy(bytes.data() + offset, ds.images.data(), ds.images.numel() * sizeof(double));
  return crypto::sha256(bytes);
}

}  // namespace veritrain::data
