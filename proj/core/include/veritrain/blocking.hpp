#pragma once

#include <cstdint>
#include <vector>

#include "veritrain/nn.hpp"
#include "veritrain/tensor.hpp"

namespace veritrain::blocking {

/// Which dimension a plan partitions: convolution input channels (the
/// im2col working set) or fully-connected weight rows.
enum class BlockTarget : std::uint8_t { ConvChannels, FCRows };

struct IndexRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  bool operator==(const IndexRange&) const = default;
};

struct BlockPlan {
  BlockTarget target = BlockTarget::FCRows;
  std::vector<IndexRange> partition;  // disjoint, ordered, covering [0,N)
  std::size_t budget_bytes = 0;
};

/// Working-set estimate for executing one block of `count` units
/// (channels or rows) of the layer on the given batch: input-block +
/// output-block + parameter-block bytes.
std::size_t working_set_bytes(const nn::LayerSpec& layer,
                              const std::vector<std::size_t>& batch_extents, std::size_t count);

/// Greedy plan: maximal block size whose working set fits the budget,
/// last block smaller; a single block when everything fits. Throws
/// BudgetError naming the minimal feasible budget when even one unit does
/// not fit. Only FullyConnected and Conv2D layers are blockable.
BlockPlan plan_blocks(const nn::LayerSpec& layer, const std::vector<std::size_t>& batch_extents,
                      std::size_t budget_bytes);

/// Forward evaluation of the layer over the batch, one block at a time:
/// convolutions accumulate channel-block partial products block-major,
/// fully-connected layers fill disjoint output row ranges. Output equals
/// unblocked execution up to summation reordering.
Tensor blocked_execute(const nn::LayerSpec& layer, const Tensor& input, const BlockPlan& plan);

/// Unblocked reference path for the same layer (bias included), the
/// equivalence oracle for blocked_execute.
Tensor unblocked_execute(const nn::LayerSpec& layer, const Tensor& input);

}  // namespace veritrain::blocking
