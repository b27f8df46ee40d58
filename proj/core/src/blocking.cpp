#include "veritrain/blocking.hpp"

#include <algorithm>
#include <cstring>
#include <string>

#include "veritrain/errors.hpp"

namespace veritrain::blocking {

namespace {

constexpr std::size_t kElem = sizeof(double);

std::size_t conv_working_set(const nn::LayerSpec& layer,
                             const std::vector<std::size_t>& batch_extents, std::size_t channels) {
  const std::size_t bsz = batch_extents[0];
  const std::size_t ho = nn::conv_out_extent(batch_extents[2], layer.kernel, layer.stride,
                                             layer.padding);
  const std::size_t wo = nn::conv_out_extent(batch_extents[3], layer.kernel, layer.stride,
                                             layer.padding);
  const std::size_t cols = bsz * ho * wo;
  const std::size_t input_block = layer.kernel * layer.kernel * channels * cols * kElem;
  // The full output accumulator is live for every block.
  const std::size_t output_block = layer.filters * cols * kElem;
  const std::size_t param_block = layer.filters * layer.kernel * layer.kernel * channels * kElem;
  return input_block + output_block + param_block;
}

std::size_t fc_working_set(const nn::LayerSpec& layer,
                           const std::vector<std::size_t>& batch_extents, std::size_t rows) {
  const std::size_t bsz = batch_extents[0];
  const std::size_t input_block = bsz * layer.in_features * kElem;  // full input per block
  const std::size_t output_block = bsz * rows * kElem;
  const std::size_t param_block = rows * layer.in_features * kElem;
  return input_block + output_block + param_block;
}

}  // namespace

std::size_t working_set_bytes(const nn::LayerSpec& layer,
                              const std::vector<std::size_t>& batch_extents, std::size_t count) {
  switch (layer.kind) {
    case nn::LayerKind::Conv2D:
      if (batch_extents.size() != 4) throw ShapeError("Conv2D expects [B,C,h,w] extents");
      return conv_working_set(layer, batch_extents, count);
    case nn::LayerKind::FullyConnected:
      if (batch_extents.empty()) throw ShapeError("FullyConnected expects batch extents");
      return fc_working_set(layer, batch_extents, count);
    default:
      throw ShapeError("only FullyConnected and Conv2D layers are blockable");
  }
}

BlockPlan plan_blocks(const nn::LayerSpec& layer, const std::vector<std::size_t>& batch_extents,
                      std::size_t budget_bytes) {
  BlockPlan plan;
  plan.budget_bytes = budget_bytes;
  std::size_t total = 0;
  switch (layer.kind) {
    case nn::LayerKind::Conv2D:
      plan.target = BlockTarget::ConvChannels;
      total = layer.in_channels;
      break;
    case nn::LayerKind::FullyConnected:
      plan.target = BlockTarget::FCRows;
      total = layer.out_features;
      break;
    default:
      throw ShapeError("only FullyConnected and Conv2D layers are blockable");
  }

  const std::size_t min_budget = working_set_bytes(layer, batch_extents, 1);
  if (min_budget > budget_bytes) {
    throw BudgetError(min_budget, "budget " + std::to_string(budget_bytes) +
                                      " bytes below the minimal feasible block of " +
                                      std::to_string(min_budget) + " bytes");
  }
  // Largest block that fits; the estimate is monotone in the block size.
  std::size_t block = 1;
  while (block < total && working_set_bytes(layer, batch_extents, block + 1) <= budget_bytes) {
    ++block;
  }
  for (std::size_t begin = 0; begin < total; begin += block) {
    plan.partition.push_back({begin, std::min(begin + block, total)});
  }
  return plan;
}

Tensor unblocked_execute(const nn::LayerSpec& layer, const Tensor& input) {
  const std::size_t bsz = input.extent(0);
  if (layer.kind == nn::LayerKind::FullyConnected) {
    Matrix x(bsz, layer.in_features,
             std::vector<double>(input.values().begin(), input.values().end()));
    Matrix w(layer.out_features, layer.in_features,
             std::vector<double>(layer.weight.values().begin(), layer.weight.values().end()));
    Matrix product = matmul(x, transpose(w));
    Tensor out({bsz, layer.out_features});
    for (std::size_t b = 0; b < bsz; ++b) {
      for (std::size_t o = 0; o < layer.out_features; ++o) {
        out[b * layer.out_features + o] = product.at(b, o) + layer.bias[o];
      }
    }
    return out;
  }
  if (layer.kind == nn::LayerKind::Conv2D) {
    Matrix cols = nn::im2col_batch(input, layer.kernel, layer.stride, layer.padding);
    Matrix w(layer.filters, layer.in_channels * layer.kernel * layer.kernel,
             std::vector<double>(layer.weight.values().begin(), layer.weight.values().end()));
    Matrix product = matmul(w, cols);
    const std::size_t ho = nn::conv_out_extent(input.extent(2), layer.kernel, layer.stride,
                                               layer.padding);
    const std::size_t wo = nn::conv_out_extent(input.extent(3), layer.kernel, layer.stride,
                                               layer.padding);
    const std::size_t plane = ho * wo;
    Tensor out({bsz, layer.filters, ho, wo});
    for (std::size_t b = 0; b < bsz; ++b) {
      for (std::size_t f = 0; f < layer.filters; ++f) {
        const double* src = &product.data[f * product.cols + b * plane];
        double* dst = out.data() + (b * layer.filters + f) * plane;
        for (std::size_t p = 0; p < plane; ++p) dst[p] = src[p] + layer.bias[f];
      }
    }
    return out;
  }
  throw ShapeError("only FullyConnected and Conv2D layers are blockable");
}

namespace {

void check_plan(const BlockPlan& plan, std::size_t total, BlockTarget expected) {
  if (plan.target != expected) throw ShapeError("block plan targets a different layer kind");
  std::size_t cursor = 0;
  for (const IndexRange& r : plan.partition) {
    if (r.begin != cursor || r.end <= r.begin) {
      throw ShapeError("block plan partition is not an ordered disjoint cover");
    }
    cursor = r.end;
  }
  if (cursor != total) throw ShapeError("block plan does not cover the layer extent");
}

Tensor slice_channels(const Tensor& input, std::size_t c0, std::size_t c1) {
  const std::size_t bsz = input.extent(0);
  const std::size_t channels = input.extent(1);
  const std::size_t plane = input.extent(2) * input.extent(3);
  Tensor out({bsz, c1 - c0, input.extent(2), input.extent(3)});
  for (std::size_t b = 0; b < bsz; ++b) {
    for (std::size_t c = c0; c < c1; ++c) {
      std::memcpy(out.data() + (b * (c1 - c0) + (c - c0)) * plane,
                  input.data() + (b * channels + c) * plane, plane * sizeof(double));
    }
  }
  return out;
}

}  // namespace

Tensor blocked_execute(const nn::LayerSpec& layer, const Tensor& input, const BlockPlan& plan) {
  const std::size_t bsz = input.extent(0);
  if (layer.kind == nn::LayerKind::FullyConnected) {
    check_plan(plan, layer.out_features, BlockTarget::FCRows);
    Matrix x(bsz, layer.in_features,
             std::vector<double>(input.values().begin(), input.values().end()));
    Tensor out({bsz, layer.out_features});
    for (const IndexRange& r : plan.partition) {
      Matrix wblk(r.size(), layer.in_features);
      std::memcpy(wblk.data.data(), layer.weight.data() + r.begin * layer.in_features,
                  r.size() * layer.in_features * sizeof(double));
      Matrix product = matmul(x, transpose(wblk));
      for (std::size_t b = 0; b < bsz; ++b) {
        for (std::size_t o = 0; o < r.size(); ++o) {
          out[b * layer.out_features + r.begin + o] = product.at(b, o) + layer.bias[r.begin + o];
        }
      }
    }
    return out;
  }
  if (layer.kind == nn::LayerKind::Conv2D) {
    check_plan(plan, layer.in_channels, BlockTarget::ConvChannels);
    if (input.rank() != 4 || input.extent(1) != layer.in_channels) {
      throw ShapeError("input extents do not match the planned Conv2D layer");
    }
    const std::size_t ho = nn::conv_out_extent(input.extent(2), layer.kernel, layer.stride,
                                               layer.padding);
    const std::size_t wo = nn::conv_out_extent(input.extent(3), layer.kernel, layer.stride,
                                               layer.padding);
    const std::size_t plane = ho * wo;
    const std::size_t ksq = layer.kernel * layer.kernel;
    Matrix acc(layer.filters, bsz * plane);
    // Block-major accumulation over channel blocks.
    for (const IndexRange& r : plan.partition) {
      Tensor sub = slice_channels(input, r.begin, r.end);
      Matrix cols = nn::im2col_batch(sub, layer.kernel, layer.stride, layer.padding);
      Matrix wblk(layer.filters, r.size() * ksq);
      for (std::size_t f = 0; f < layer.filters; ++f) {
        std::memcpy(&wblk.data[f * wblk.cols],
                    layer.weight.data() + (f * layer.in_channels + r.begin) * ksq,
                    r.size() * ksq * sizeof(double));
      }
      Matrix partial = matmul(wblk, cols);
      for (std::size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += partial.data[i];
    }
    Tensor out({bsz, layer.filters, ho, wo});
    for (std::size_t b = 0; b < bsz; ++b) {
      for (std::size_t f = 0; f < layer.filters; ++f) {
        const double* src = &acc.data[f * acc.cols + b * plane];
        double* dst = out.data() + (b * layer.filters + f) * plane;
        for (std::size_t p = 0; p < plane; ++p) dst[p] = src[p] + layer.bias[f];
      }
    }
    return out;
  }
  throw ShapeError("only FullyConnected and Conv2D layers are blockable");
}

}  // namespace veritrain::blocking
