#pragma once

#include <cstdint>
#include <vector>

#include "veritrain/crypto.hpp"
#include "veritrain/tensor.hpp"

namespace veritrain::data {

struct Dataset {
  Tensor images;  // [N, C, H, W], values in [0,1]
  std::vector<int> labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
};

/// Desk-scale synthetic image task: colored shapes on noisy backgrounds,
/// one shape family per class (square / cross / stripes).
struct SyntheticSpec {
  std::size_t train_size = 512;
  std::size_t test_size = 128;
  std::size_t image_size = 16;
  std::size_t channels = 3;
  std::size_t num_classes = 3;
  std::uint64_t seed = 1;
};

struct SyntheticData {
  Dataset train;
  Dataset test;
};

SyntheticData make_synthetic_shapes(const SyntheticSpec& spec);

/// Digest over the canonical dataset serialization (extents, labels,
/// little-endian doubles).
crypto::Digest dataset_digest(const Dataset& ds);

}  // namespace veritrain::data
