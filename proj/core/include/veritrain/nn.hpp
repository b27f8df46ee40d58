#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "veritrain/rng.hpp"
#include "veritrain/tensor.hpp"

namespace veritrain::nn {

enum class LayerKind : std::uint8_t {
  FullyConnected,
  Conv2D,
  BatchNorm,
  ReLU,
  MaxPool,
  SoftmaxCrossEntropy,  // loss; not usable as a hidden layer
};

const char* layer_kind_name(LayerKind kind);

struct LayerSpec {
  LayerKind kind = LayerKind::ReLU;

  // FullyConnected
  std::size_t in_features = 0;
  std::size_t out_features = 0;

  // Conv2D
  std::size_t filters = 0;
  std::size_t kernel = 0;
  std::size_t in_channels = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;

  // BatchNorm
  std::size_t channels = 0;
  double epsilon = 1e-5;
  double momentum = 0.1;

  // MaxPool
  std::size_t pool_window = 0;
  std::size_t pool_stride = 0;

  // Parameters. FC/Conv: weight+bias. BatchNorm: gamma+beta plus running
  // statistics updated from reported batch stats.
  Tensor weight;
  Tensor bias;
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;

  static LayerSpec fully_connected(std::size_t in, std::size_t out);
  static LayerSpec conv2d(std::size_t filters, std::size_t kernel, std::size_t in_channels,
                          std::size_t stride = 1, std::size_t padding = 0);
  static LayerSpec batch_norm(std::size_t channels, double epsilon = 1e-5, double momentum = 0.1);
  static LayerSpec relu();
  static LayerSpec max_pool(std::size_t window, std::size_t stride);
};

enum class LossKind : std::uint8_t { SoftmaxCrossEntropy };

struct ParamKey {
  std::uint32_t layer = 0;
  std::string name;
  auto operator<=>(const ParamKey&) const = default;
};

struct BatchStats {
  Tensor mean;    // per channel
  Tensor stddev;  // per channel, sqrt(var + epsilon)
};

/// One gradient tensor per parameter tensor plus the per-BatchNorm batch
/// statistics that accompany a step report.
struct GradientSet {
  std::map<ParamKey, Tensor> grads;
  std::map<std::uint32_t, BatchStats> batch_stats;
};

struct Network {
  std::vector<std::size_t> input_shape;  // per sample: [D] or [C,H,W]
  std::vector<LayerSpec> layers;
  LossKind loss = LossKind::SoftmaxCrossEntropy;
  std::size_t num_classes = 0;

  /// Checks adjacent layer compatibility and parameter shapes; allocates
  /// zeroed parameters that have not been set. Throws ShapeError with the
  /// offending layer index.
  void validate();
  void init_params(DeterministicRng& rng);

  std::vector<std::size_t> shape_after(std::size_t layer_count) const;

  struct ParamRef {
    ParamKey key;
    Tensor* tensor;
  };
  struct ConstParamRef {
    ParamKey key;
    const Tensor* tensor;
  };
  std::vector<ParamRef> param_refs();
  std::vector<ConstParamRef> param_refs() const;

  /// Canonical model bytes: layer order, fixed per-kind tensor order,
  /// 64-bit little-endian floats. Input to the model digest.
  std::vector<std::uint8_t> canonical_bytes() const;
  void load_canonical_bytes(std::span<const std::uint8_t> bytes);
};

/// Per-step layer randomness handed from the verifier to the trainer.
/// Layers with stochastic masks draw from their per-layer stream; none of
/// the current kinds consume it, but it travels with every pass so that
/// trainer and verifier always agree on it.
struct LayerRandomness {
  std::uint64_t base_seed = 0;
  std::uint64_t layer_seed(std::size_t layer) const;
};

// The six verifiable MM shapes: forward product, parameter gradient and
// input gradient for fully-connected and convolutional layers.
enum class MMRole : std::uint8_t {
  FcForward,
  FcGradWeight,
  FcGradInput,
  ConvForward,
  ConvGradWeight,
  ConvGradInput,
};

const char* mm_role_name(MMRole role);

/// Which side the verification probe vector multiplies on for a role.
enum class ProbeSide : std::uint8_t { Left, Right };
ProbeSide probe_side(MMRole role);

/// One rank-2 multiplication performed during a pass: left (a x b) times
/// right (b x c) with the claimed product (a x c).
struct MMRecord {
  std::uint32_t op_id = 0;
  std::uint32_t layer = 0;
  MMRole role = MMRole::FcForward;
  Matrix left;
  Matrix right;
  Matrix claimed;
};

/// MM backend for the passes. The verifier substitutes an engine that
/// returns claimed products instead of computing them, which keeps every
/// non-MM code path shared between trainer and verifier.
class MMEngine {
 public:
  virtual ~MMEngine() = default;
  virtual Matrix multiply(const Matrix& a, const Matrix& b, MMRole role, std::uint32_t layer) = 0;
};

class PlainMM final : public MMEngine {
 public:
  Matrix multiply(const Matrix& a, const Matrix& b, MMRole, std::uint32_t) override {
    return matmul(a, b);
  }
};

/// Fixed-point MMs with exact integer products, so claimed outputs can be
/// verified over a field with no tolerance.
class QuantizedMM final : public MMEngine {
 public:
  explicit QuantizedMM(double scale) : scale_(scale) {}
  Matrix multiply(const Matrix& a, const Matrix& b, MMRole, std::uint32_t) override {
    return matmul_quantized(a, b, scale_);
  }

 private:
  double scale_;
};

struct LayerCache {
  Tensor output;
  Matrix columns;                   // Conv2D: batched im2col matrix
  std::vector<std::size_t> argmax;  // MaxPool: winning flat input index per output element
  Tensor bn_xhat;
  BatchStats bn_stats;
};

struct ForwardResult {
  Tensor input;
  std::vector<LayerCache> layers;
  Tensor probs;  // softmax probabilities [B][K]
  double loss = 0.0;
  std::vector<MMRecord> mm_records;
};

struct BackwardResult {
  GradientSet grads;
  std::vector<MMRecord> mm_records;
};

/// Training-mode forward pass over a batch [B, input_shape...]. Labels
/// feed the loss. Every FC/Conv MM is recorded exactly once.
ForwardResult forward(const Network& net, const Tensor& batch, const std::vector<int>& labels,
                      const LayerRandomness& rand, MMEngine& mm);
ForwardResult forward(const Network& net, const Tensor& batch, const std::vector<int>& labels,
                      const LayerRandomness& rand);

/// Backward pass from a matching forward call. Emits the parameter- and
/// input-gradient MM records of each FC/Conv layer; op ids continue after
/// the forward records.
BackwardResult backward(const Network& net, const ForwardResult& fwd,
                        const std::vector<int>& labels, const LayerRandomness& rand, MMEngine& mm);
BackwardResult backward(const Network& net, const ForwardResult& fwd,
                        const std::vector<int>& labels, const LayerRandomness& rand);

/// Inference-mode class probabilities (BatchNorm uses running statistics).
Tensor predict(const Network& net, const Tensor& batch);

/// Rearranges one sample [C, h, w] so that column j holds the receptive
/// field of output position j; rows are channel-major, then kernel-row
/// -major. Result is [k^2*C] x [wo*ho].
Matrix im2col(const Tensor& input, std::size_t kernel, std::size_t stride, std::size_t padding);

/// Batched variant: [B, C, h, w] -> [k^2*C] x [B*wo*ho], sample s
/// occupying the contiguous column range [s*wo*ho, (s+1)*wo*ho).
Matrix im2col_batch(const Tensor& batch, std::size_t kernel, std::size_t stride,
                    std::size_t padding);

/// Adjoint of im2col_batch: scatter-adds columns back to [B, C, h, w].
Tensor col2im_batch(const Matrix& columns, std::size_t batch_size, std::size_t in_channels,
                    std::size_t height, std::size_t width, std::size_t kernel, std::size_t stride,
                    std::size_t padding);

/// Output spatial extent (h + 2*padding - kernel) / stride + 1; throws on
/// non-positive result.
std::size_t conv_out_extent(std::size_t in_extent, std::size_t kernel, std::size_t stride,
                            std::size_t padding);

}  // namespace veritrain::nn
