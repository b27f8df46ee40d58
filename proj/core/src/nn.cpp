#include "veritrain/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <string>

namespace veritrain::nn {

namespace {

std::string shape_str(const std::vector<std::size_t>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

Matrix to_matrix(const Tensor& t, std::size_t rows) {
  return Matrix(rows, t.numel() / rows, std::vector<double>(t.values().begin(), t.values().end()));
}

Matrix weight_as_matrix(const LayerSpec& layer) {
  if (layer.kind == LayerKind::FullyConnected) {
    return Matrix(layer.out_features, layer.in_features,
                  std::vector<double>(layer.weight.values().begin(), layer.weight.values().end()));
  }
  // Conv weight [f, C, k, k] flattens to [f][C*k*k]; the column order
  // (channel-major, then kernel-row-major) matches the im2col row order.
  return Matrix(layer.filters, layer.in_channels * layer.kernel * layer.kernel,
                std::vector<double>(layer.weight.values().begin(), layer.weight.values().end()));
}

}  // namespace

const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::FullyConnected: return "FullyConnected";
    case LayerKind::Conv2D: return "Conv2D";
    case LayerKind::BatchNorm: return "BatchNorm";
    case LayerKind::ReLU: return "ReLU";
    case LayerKind::MaxPool: return "MaxPool";
    case LayerKind::SoftmaxCrossEntropy: return "SoftmaxCrossEntropy";
  }
  return "?";
}

const char* mm_role_name(MMRole role) {
  switch (role) {
    case MMRole::FcForward: return "fc-forward";
    case MMRole::FcGradWeight: return "fc-grad-weight";
    case MMRole::FcGradInput: return "fc-grad-input";
    case MMRole::ConvForward: return "conv-forward";
    case MMRole::ConvGradWeight: return "conv-grad-weight";
    case MMRole::ConvGradInput: return "conv-grad-input";
  }
  return "?";
}

ProbeSide probe_side(MMRole role) {
  switch (role) {
    case MMRole::FcForward:
    case MMRole::FcGradWeight:
    case MMRole::FcGradInput:
    case MMRole::ConvGradWeight:
      return ProbeSide::Right;
    case MMRole::ConvForward:
    case MMRole::ConvGradInput:
      return ProbeSide::Left;
  }
  return ProbeSide::Right;
}

LayerSpec LayerSpec::fully_connected(std::size_t in, std::size_t out) {
  LayerSpec l;
  l.kind = LayerKind::FullyConnected;
  l.in_features = in;
  l.out_features = out;
  return l;
}

LayerSpec LayerSpec::conv2d(std::size_t filters, std::size_t kernel, std::size_t in_channels,
                            std::size_t stride, std::size_t padding) {
  LayerSpec l;
  l.kind = LayerKind::Conv2D;
  l.filters = filters;
  l.kernel = kernel;
  l.in_channels = in_channels;
  l.stride = stride;
  l.padding = padding;
  return l;
}

LayerSpec LayerSpec::batch_norm(std::size_t channels, double epsilon, double momentum) {
  LayerSpec l;
  l.kind = LayerKind::BatchNorm;
  l.channels = channels;
  l.epsilon = epsilon;
  l.momentum = momentum;
  return l;
}

LayerSpec LayerSpec::relu() {
  LayerSpec l;
  l.kind = LayerKind::ReLU;
  return l;
}

LayerSpec LayerSpec::max_pool(std::size_t window, std::size_t stride) {
  LayerSpec l;
  l.kind = LayerKind::MaxPool;
  l.pool_window = window;
  l.pool_stride = stride;
  return l;
}

std::size_t conv_out_extent(std::size_t in_extent, std::size_t kernel, std::size_t stride,
                            std::size_t padding) {
  const std::size_t padded = in_extent + 2 * padding;
  if (kernel == 0 || stride == 0 || padded < kernel) {
    throw ShapeError("non-positive convolution output extent (input " +
                     std::to_string(in_extent) + ", kernel " + std::to_string(kernel) + ")");
  }
  return (padded - kernel) / stride + 1;
}

namespace {

void ensure_param(Tensor& t, const std::vector<std::size_t>& shape, std::size_t layer,
                  const char* name) {
  if (t.numel() == 0) {
    t = Tensor::zeros(shape);
    return;
  }
  if (t.shape() != shape) {
    throw ShapeError(layer, std::string("parameter '") + name + "' has shape " +
                                shape_str(t.shape()) + ", expected " + shape_str(shape));
  }
}

std::vector<std::size_t> advance_shape(const LayerSpec& layer, std::vector<std::size_t> cur,
                                       std::size_t index) {
  switch (layer.kind) {
    case LayerKind::FullyConnected: {
      const std::size_t flat = shape_numel(cur);
      if (flat != layer.in_features) {
        throw ShapeError(index, "FullyConnected expects " + std::to_string(layer.in_features) +
                                    " inputs, got " + shape_str(cur));
      }
      return {layer.out_features};
    }
    case LayerKind::Conv2D: {
      if (cur.size() != 3 || cur[0] != layer.in_channels) {
        throw ShapeError(index, "Conv2D expects [C,h,w] with C=" +
                                    std::to_string(layer.in_channels) + ", got " + shape_str(cur));
      }
      const std::size_t ho = conv_out_extent(cur[1], layer.kernel, layer.stride, layer.padding);
      const std::size_t wo = conv_out_extent(cur[2], layer.kernel, layer.stride, layer.padding);
      return {layer.filters, ho, wo};
    }
    case LayerKind::BatchNorm: {
      if (cur.empty() || cur[0] != layer.channels) {
        throw ShapeError(index, "BatchNorm expects " + std::to_string(layer.channels) +
                                    " channels, got " + shape_str(cur));
      }
      return cur;
    }
    case LayerKind::ReLU:
      return cur;
    case LayerKind::MaxPool: {
      if (cur.size() != 3) {
        throw ShapeError(index, "MaxPool expects [C,h,w], got " + shape_str(cur));
      }
      if (layer.pool_window == 0 || layer.pool_stride == 0 || cur[1] < layer.pool_window ||
          cur[2] < layer.pool_window) {
        throw ShapeError(index, "MaxPool window exceeds input extents");
      }
      const std::size_t ho = (cur[1] - layer.pool_window) / layer.pool_stride + 1;
      const std::size_t wo = (cur[2] - layer.pool_window) / layer.pool_stride + 1;
      return {cur[0], ho, wo};
    }
    case LayerKind::SoftmaxCrossEntropy:
      throw ShapeError(index, "SoftmaxCrossEntropy is the loss, not a hidden layer");
  }
  return cur;
}

}  // namespace

std::vector<std::size_t> Network::shape_after(std::size_t layer_count) const {
  std::vector<std::size_t> cur = input_shape;
  for (std::size_t l = 0; l < layer_count && l < layers.size(); ++l) {
    cur = advance_shape(layers[l], std::move(cur), l);
  }
  return cur;
}

void Network::validate() {
  if (input_shape.empty()) throw ShapeError("network has no input shape");
  std::vector<std::size_t> cur = input_shape;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    LayerSpec& layer = layers[l];
    cur = advance_shape(layer, std::move(cur), l);
    switch (layer.kind) {
      case LayerKind::FullyConnected:
        ensure_param(layer.weight, {layer.out_features, layer.in_features}, l, "weight");
        ensure_param(layer.bias, {layer.out_features}, l, "bias");
        break;
      case LayerKind::Conv2D:
        ensure_param(layer.weight, {layer.filters, layer.in_channels, layer.kernel, layer.kernel},
                     l, "weight");
        ensure_param(layer.bias, {layer.filters}, l, "bias");
        break;
      case LayerKind::BatchNorm:
        ensure_param(layer.gamma, {layer.channels}, l, "gamma");
        ensure_param(layer.beta, {layer.channels}, l, "beta");
        ensure_param(layer.running_mean, {layer.channels}, l, "running_mean");
        ensure_param(layer.running_var, {layer.channels}, l, "running_var");
        break;
      default:
        break;
    }
  }
  if (cur.size() != 1) {
    throw ShapeError(layers.size(), "loss head expects a flat [K] output, got " + shape_str(cur));
  }
  if (num_classes == 0) {
    num_classes = cur[0];
  } else if (num_classes != cur[0]) {
    throw ShapeError(layers.size(), "network emits " + std::to_string(cur[0]) +
                                        " logits for " + std::to_string(num_classes) + " classes");
  }
}

void Network::init_params(DeterministicRng& rng) {
  validate();
  for (LayerSpec& layer : layers) {
    switch (layer.kind) {
      case LayerKind::FullyConnected: {
        const double scale = std::sqrt(2.0 / static_cast<double>(layer.in_features));
        for (double& w : layer.weight.values()) w = rng.normal() * scale;
        for (double& b : layer.bias.values()) b = 0.0;
        break;
      }
      case LayerKind::Conv2D: {
        const double fan_in =
            static_cast<double>(layer.in_channels * layer.kernel * layer.kernel);
        const double scale = std::sqrt(2.0 / fan_in);
        for (double& w : layer.weight.values()) w = rng.normal() * scale;
        for (double& b : layer.bias.values()) b = 0.0;
        break;
      }
      case LayerKind::BatchNorm:
        for (double& g : layer.gamma.values()) g = 1.0;
        for (double& b : layer.beta.values()) b = 0.0;
        for (double& m : layer.running_mean.values()) m = 0.0;
        for (double& v : layer.running_var.values()) v = 1.0;
        break;
      default:
        break;
    }
  }
}

std::vector<Network::ParamRef> Network::param_refs() {
  std::vector<ParamRef> refs;
  for (std::uint32_t l = 0; l < layers.size(); ++l) {
    LayerSpec& layer = layers[l];
    switch (layer.kind) {
      case LayerKind::FullyConnected:
      case LayerKind::Conv2D:
        refs.push_back({{l, "weight"}, &layer.weight});
        refs.push_back({{l, "bias"}, &layer.bias});
        break;
      case LayerKind::BatchNorm:
        refs.push_back({{l, "gamma"}, &layer.gamma});
        refs.push_back({{l, "beta"}, &layer.beta});
        break;
      default:
        break;
    }
  }
  return refs;
}

std::vector<Network::ConstParamRef> Network::param_refs() const {
  std::vector<ConstParamRef> refs;
  for (const auto& r : const_cast<Network*>(this)->param_refs()) {
    refs.push_back({r.key, r.tensor});
  }
  return refs;
}

std::vector<std::uint8_t> Network::canonical_bytes() const {
  std::vector<std::uint8_t> out;
  auto append = [&out](const Tensor& t) {
    const std::size_t offset = out.size();
    out.resize(offset + t.numel() * sizeof(double));
    std::memcpy(out.data() + offset, t.data(), t.numel() * sizeof(double));
  };
  for (const LayerSpec& layer : layers) {
    switch (layer.kind) {
      case LayerKind::FullyConnected:
      case LayerKind::Conv2D:
        append(layer.weight);
        append(layer.bias);
        break;
      case LayerKind::BatchNorm:
        append(layer.gamma);
        append(layer.beta);
        append(layer.running_mean);
        append(layer.running_var);
        break;
      default:
        break;
    }
  }
  return out;
}

void Network::load_canonical_bytes(std::span<const std::uint8_t> bytes) {
  std::size_t offset = 0;
  auto take = [&](Tensor& t) {
    const std::size_t len = t.numel() * sizeof(double);
    if (offset + len > bytes.size()) throw FormatError("model bytes truncated");
    std::memcpy(t.data(), bytes.data() + offset, len);
    offset += len;
  };
  for (LayerSpec& layer : layers) {
    switch (layer.kind) {
      case LayerKind::FullyConnected:
      case LayerKind::Conv2D:
        take(layer.weight);
        take(layer.bias);
        break;
      case LayerKind::BatchNorm:
        take(layer.gamma);
        take(layer.beta);
        take(layer.running_mean);
        take(layer.running_var);
        break;
      default:
        break;
    }
  }
  if (offset != bytes.size()) throw FormatError("model bytes have trailing data");
}

std::uint64_t LayerRandomness::layer_seed(std::size_t layer) const {
  std::uint64_t x = base_seed + 0x632be59bd9b4e019ULL * (layer + 1);
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

Matrix im2col(const Tensor& input, std::size_t kernel, std::size_t stride, std::size_t padding) {
  if (input.rank() != 3) throw ShapeError("im2col expects [C,h,w]");
  Tensor batch = input.reshaped({1, input.extent(0), input.extent(1), input.extent(2)});
  return im2col_batch(batch, kernel, stride, padding);
}

Matrix im2col_batch(const Tensor& batch, std::size_t kernel, std::size_t stride,
                    std::size_t padding) {
  if (batch.rank() != 4) throw ShapeError("im2col_batch expects [B,C,h,w]");
  const std::size_t bsz = batch.extent(0);
  const std::size_t channels = batch.extent(1);
  const std::size_t h = batch.extent(2);
  const std::size_t w = batch.extent(3);
  const std::size_t ho = conv_out_extent(h, kernel, stride, padding);
  const std::size_t wo = conv_out_extent(w, kernel, stride, padding);

  Matrix cols(kernel * kernel * channels, bsz * ho * wo);
  const double* src = batch.data();
  for (std::size_t b = 0; b < bsz; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      const double* plane = src + (b * channels + c) * h * w;
      for (std::size_t ky = 0; ky < kernel; ++ky) {
        for (std::size_t kx = 0; kx < kernel; ++kx) {
          const std::size_t row = c * kernel * kernel + ky * kernel + kx;
          double* dst = &cols.data[row * cols.cols + b * ho * wo];
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const std::ptrdiff_t iy =
                static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(padding);
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                        static_cast<std::ptrdiff_t>(padding);
              double v = 0.0;
              if (iy >= 0 && iy < static_cast<std::ptrdiff_t>(h) && ix >= 0 &&
                  ix < static_cast<std::ptrdiff_t>(w)) {
                v = plane[static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)];
              }
              dst[oy * wo + ox] = v;
            }
          }
        }
      }
    }
  }
  return cols;
}

Tensor col2im_batch(const Matrix& columns, std::size_t batch_size, std::size_t in_channels,
                    std::size_t height, std::size_t width, std::size_t kernel, std::size_t stride,
                    std::size_t padding) {
  const std::size_t ho = conv_out_extent(height, kernel, stride, padding);
  const std::size_t wo = conv_out_extent(width, kernel, stride, padding);
  if (columns.rows != kernel * kernel * in_channels || columns.cols != batch_size * ho * wo) {
    throw ShapeError("col2im_batch column matrix has wrong extents");
  }
  Tensor out({batch_size, in_channels, height, width});
  double* dst = out.data();
  for (std::size_t b = 0; b < batch_size; ++b) {
    for (std::size_t c = 0; c < in_channels; ++c) {
      double* plane = dst + (b * in_channels + c) * height * width;
      for (std::size_t ky = 0; ky < kernel; ++ky) {
        for (std::size_t kx = 0; kx < kernel; ++kx) {
          const std::size_t row = c * kernel * kernel + ky * kernel + kx;
          const double* src = &columns.data[row * columns.cols + b * ho * wo];
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const std::ptrdiff_t iy =
                static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(padding);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height)) continue;
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                        static_cast<std::ptrdiff_t>(padding);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(width)) continue;
              plane[static_cast<std::size_t>(iy) * width + static_cast<std::size_t>(ix)] +=
                  src[oy * wo + ox];
            }
          }
        }
      }
    }
  }
  return out;
}

namespace {

struct BatchShape {
  std::size_t batch;
  std::size_t channels;
  std::size_t spatial;
};

BatchShape norm_shape(const Tensor& t) {
  if (t.rank() == 2) return {t.extent(0), t.extent(1), 1};
  if (t.rank() == 4) return {t.extent(0), t.extent(1), t.extent(2) * t.extent(3)};
  throw ShapeError("BatchNorm expects [B,D] or [B,C,h,w]");
}

Tensor softmax_rows(const Tensor& logits) {
  const std::size_t bsz = logits.extent(0);
  const std::size_t k = logits.extent(1);
  Tensor probs({bsz, k});
  for (std::size_t b = 0; b < bsz; ++b) {
    const double* row = logits.data() + b * k;
    double* out = probs.data() + b * k;
    double mx = row[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      out[j] = std::exp(row[j] - mx);
      sum += out[j];
    }
    for (std::size_t j = 0; j < k; ++j) out[j] /= sum;
  }
  return probs;
}

}  // namespace

ForwardResult forward(const Network& net, const Tensor& batch, const std::vector<int>& labels,
                      const LayerRandomness& rand) {
  PlainMM plain;
  return forward(net, batch, labels, rand, plain);
}

ForwardResult forward(const Network& net, const Tensor& batch, const std::vector<int>& labels,
                      const LayerRandomness& rand, MMEngine& mm) {
  (void)rand;  // reserved for mask-consuming layer kinds
  if (batch.rank() < 2) throw ShapeError("batch must carry a leading batch dimension");
  const std::size_t bsz = batch.extent(0);
  {
    std::vector<std::size_t> per_sample(batch.shape().begin() + 1, batch.shape().end());
    if (per_sample != net.input_shape) {
      throw ShapeError(0, "batch per-sample shape " + shape_str(per_sample) +
                              " does not match network input " + shape_str(net.input_shape));
    }
  }
  if (labels.size() != bsz) throw ShapeError("labels size does not match batch size");

  ForwardResult result;
  result.input = batch;
  result.layers.resize(net.layers.size());
  std::uint32_t op_id = 0;

  const Tensor* cur = &result.input;
  for (std::uint32_t l = 0; l < net.layers.size(); ++l) {
    const LayerSpec& layer = net.layers[l];
    LayerCache& cache = result.layers[l];
    switch (layer.kind) {
      case LayerKind::FullyConnected: {
        Matrix x = to_matrix(*cur, bsz);
        if (x.cols != layer.in_features) {
          throw ShapeError(l, "FullyConnected input extent mismatch");
        }
        Matrix wt = transpose(weight_as_matrix(layer));
        Matrix product = mm.multiply(x, wt, MMRole::FcForward, l);
        result.mm_records.push_back({op_id++, l, MMRole::FcForward, x, wt, product});
        Tensor out({bsz, layer.out_features});
        for (std::size_t b = 0; b < bsz; ++b) {
          for (std::size_t o = 0; o < layer.out_features; ++o) {
            out[b * layer.out_features + o] = product.at(b, o) + layer.bias[o];
          }
        }
        cache.output = std::move(out);
        break;
      }
      case LayerKind::Conv2D: {
        Matrix cols = im2col_batch(*cur, layer.kernel, layer.stride, layer.padding);
        Matrix wmat = weight_as_matrix(layer);
        Matrix product = mm.multiply(wmat, cols, MMRole::ConvForward, l);
        result.mm_records.push_back({op_id++, l, MMRole::ConvForward, wmat, cols, product});
        const std::size_t ho = conv_out_extent(cur->extent(2), layer.kernel, layer.stride,
                                               layer.padding);
        const std::size_t wo = conv_out_extent(cur->extent(3), layer.kernel, layer.stride,
                                               layer.padding);
        Tensor out({bsz, layer.filters, ho, wo});
        const std::size_t plane = ho * wo;
        for (std::size_t b = 0; b < bsz; ++b) {
          for (std::size_t f = 0; f < layer.filters; ++f) {
            const double* src = &product.data[f * product.cols + b * plane];
            double* dst = out.data() + (b * layer.filters + f) * plane;
            const double bias = layer.bias[f];
            for (std::size_t p = 0; p < plane; ++p) dst[p] = src[p] + bias;
          }
        }
        cache.columns = std::move(cols);
        cache.output = std::move(out);
        break;
      }
      case LayerKind::BatchNorm: {
        const BatchShape bs = norm_shape(*cur);
        const double n = static_cast<double>(bs.batch * bs.spatial);
        Tensor mean({bs.channels});
        Tensor stddev({bs.channels});
        Tensor xhat(cur->shape());
        Tensor out(cur->shape());
        for (std::size_t c = 0; c < bs.channels; ++c) {
          double sum = 0.0;
          for (std::size_t b = 0; b < bs.batch; ++b) {
            const double* src = cur->data() + (b * bs.channels + c) * bs.spatial;
            for (std::size_t s = 0; s < bs.spatial; ++s) sum += src[s];
          }
          const double mu = sum / n;
          double var_sum = 0.0;
          for (std::size_t b = 0; b < bs.batch; ++b) {
            const double* src = cur->data() + (b * bs.channels + c) * bs.spatial;
            for (std::size_t s = 0; s < bs.spatial; ++s) {
              const double d = src[s] - mu;
              var_sum += d * d;
            }
          }
          const double sd = std::sqrt(var_sum / n + layer.epsilon);
          mean[c] = mu;
          stddev[c] = sd;
          const double g = layer.gamma[c];
          const double beta = layer.beta[c];
          for (std::size_t b = 0; b < bs.batch; ++b) {
            const std::size_t base = (b * bs.channels + c) * bs.spatial;
            const double* src = cur->data() + base;
            for (std::size_t s = 0; s < bs.spatial; ++s) {
              const double xh = (src[s] - mu) / sd;
              xhat[base + s] = xh;
              out[base + s] = g * xh + beta;
            }
          }
        }
        cache.bn_stats = {std::move(mean), std::move(stddev)};
        cache.bn_xhat = std::move(xhat);
        cache.output = std::move(out);
        break;
      }
      case LayerKind::ReLU: {
        Tensor out(cur->shape());
        for (std::size_t i = 0; i < cur->numel(); ++i) {
          out[i] = (*cur)[i] > 0.0 ? (*cur)[i] : 0.0;
        }
        cache.output = std::move(out);
        break;
      }
      case LayerKind::MaxPool: {
        const std::size_t channels = cur->extent(1);
        const std::size_t h = cur->extent(2);
        const std::size_t w = cur->extent(3);
        const std::size_t wnd = layer.pool_window;
        const std::size_t st = layer.pool_stride;
        const std::size_t ho = (h - wnd) / st + 1;
        const std::size_t wo = (w - wnd) / st + 1;
        Tensor out({bsz, channels, ho, wo});
        cache.argmax.assign(out.numel(), 0);
        for (std::size_t b = 0; b < bsz; ++b) {
          for (std::size_t c = 0; c < channels; ++c) {
            const std::size_t in_base = (b * channels + c) * h * w;
            const std::size_t out_base = (b * channels + c) * ho * wo;
            for (std::size_t oy = 0; oy < ho; ++oy) {
              for (std::size_t ox = 0; ox < wo; ++ox) {
                double best = -std::numeric_limits<double>::infinity();
                std::size_t best_idx = 0;
                // Scan in flat order; strict > keeps the lowest flat index
                // on ties.
                for (std::size_t ky = 0; ky < wnd; ++ky) {
                  for (std::size_t kx = 0; kx < wnd; ++kx) {
                    const std::size_t idx = in_base + (oy * st + ky) * w + (ox * st + kx);
                    const double v = (*cur)[idx];
                    if (v > best) {
                      best = v;
                      best_idx = idx;
                    }
                  }
                }
                out[out_base + oy * wo + ox] = best;
                cache.argmax[out_base + oy * wo + ox] = best_idx;
              }
            }
          }
        }
        cache.output = std::move(out);
        break;
      }
      case LayerKind::SoftmaxCrossEntropy:
        throw ShapeError(l, "SoftmaxCrossEntropy is the loss, not a hidden layer");
    }
    cur = &result.layers[l].output;
  }

  if (cur->rank() != 2 || cur->extent(1) != net.num_classes) {
    throw ShapeError(net.layers.size(), "logits shape mismatch at the loss head");
  }
  result.probs = softmax_rows(*cur);
  double loss = 0.0;
  for (std::size_t b = 0; b < bsz; ++b) {
    const int y = labels[b];
    if (y < 0 || static_cast<std::size_t>(y) >= net.num_classes) {
      throw ShapeError("label out of range");
    }
    const double p = result.probs[b * net.num_classes + static_cast<std::size_t>(y)];
    loss -= std::log(std::max(p, 1e-300));
  }
  result.loss = loss / static_cast<double>(bsz);
  return result;
}

BackwardResult backward(const Network& net, const ForwardResult& fwd,
                        const std::vector<int>& labels, const LayerRandomness& rand) {
  PlainMM plain;
  return backward(net, fwd, labels, rand, plain);
}

BackwardResult backward(const Network& net, const ForwardResult& fwd,
                        const std::vector<int>& labels, const LayerRandomness& rand,
                        MMEngine& mm) {
  (void)rand;
  if (fwd.layers.size() != net.layers.size() || fwd.probs.empty()) {
    throw Error("backward: activations missing or from a different network");
  }
  const std::size_t bsz = fwd.input.extent(0);
  const std::size_t k = net.num_classes;
  BackwardResult result;
  std::uint32_t op_id = static_cast<std::uint32_t>(fwd.mm_records.size());

  // Loss gradient at the logits: (softmax - onehot) / B.
  Tensor grad({bsz, k});
  for (std::size_t b = 0; b < bsz; ++b) {
    for (std::size_t j = 0; j < k; ++j) {
      const double onehot = (static_cast<std::size_t>(labels[b]) == j) ? 1.0 : 0.0;
      grad[b * k + j] = (fwd.probs[b * k + j] - onehot) / static_cast<double>(bsz);
    }
  }

  for (std::size_t li = net.layers.size(); li-- > 0;) {
    const std::uint32_t l = static_cast<std::uint32_t>(li);
    const LayerSpec& layer = net.layers[li];
    const LayerCache& cache = fwd.layers[li];
    const Tensor& input = (li == 0) ? fwd.input : fwd.layers[li - 1].output;

    switch (layer.kind) {
      case LayerKind::FullyConnected: {
        Matrix g = to_matrix(grad, bsz);
        Matrix x = to_matrix(input, bsz);
        Matrix gt = transpose(g);
        Matrix grad_w = mm.multiply(gt, x, MMRole::FcGradWeight, l);
        result.mm_records.push_back({op_id++, l, MMRole::FcGradWeight, gt, x, grad_w});
        Tensor bias_grad({layer.out_features});
        for (std::size_t o = 0; o < layer.out_features; ++o) {
          double acc = 0.0;
          for (std::size_t b = 0; b < bsz; ++b) acc += g.at(b, o);
          bias_grad[o] = acc;
        }
        Matrix w = weight_as_matrix(layer);
        Matrix grad_x = mm.multiply(g, w, MMRole::FcGradInput, l);
        result.mm_records.push_back({op_id++, l, MMRole::FcGradInput, g, w, grad_x});

        result.grads.grads[{l, "weight"}] =
            Tensor({layer.out_features, layer.in_features}, std::move(grad_w.data));
        result.grads.grads[{l, "bias"}] = std::move(bias_grad);
        grad = Tensor(input.shape(), std::move(grad_x.data));
        break;
      }
      case LayerKind::Conv2D: {
        const std::size_t ho = cache.output.extent(2);
        const std::size_t wo = cache.output.extent(3);
        const std::size_t plane = ho * wo;
        // Gradient tensor [B,f,ho,wo] as matrix [f][B*ho*wo] with the same
        // column layout as the im2col matrix.
        Matrix gm(layer.filters, bsz * plane);
        for (std::size_t b = 0; b < bsz; ++b) {
          for (std::size_t f = 0; f < layer.filters; ++f) {
            const double* src = grad.data() + (b * layer.filters + f) * plane;
            double* dst = &gm.data[f * gm.cols + b * plane];
            for (std::size_t p = 0; p < plane; ++p) dst[p] = src[p];
          }
        }
        Matrix cols_t = transpose(cache.columns);
        Matrix grad_w = mm.multiply(gm, cols_t, MMRole::ConvGradWeight, l);
        result.mm_records.push_back({op_id++, l, MMRole::ConvGradWeight, gm, cols_t, grad_w});
        Tensor bias_grad({layer.filters});
        for (std::size_t f = 0; f < layer.filters; ++f) {
          double acc = 0.0;
          const double* row = &gm.data[f * gm.cols];
          for (std::size_t p = 0; p < gm.cols; ++p) acc += row[p];
          bias_grad[f] = acc;
        }
        Matrix wt = transpose(weight_as_matrix(layer));
        Matrix grad_cols = mm.multiply(wt, gm, MMRole::ConvGradInput, l);
        result.mm_records.push_back({op_id++, l, MMRole::ConvGradInput, wt, gm, grad_cols});

        result.grads.grads[{l, "weight"}] =
            Tensor({layer.filters, layer.in_channels, layer.kernel, layer.kernel},
                   std::move(grad_w.data));
        result.grads.grads[{l, "bias"}] = std::move(bias_grad);
        grad = col2im_batch(grad_cols, bsz, layer.in_channels, input.extent(2), input.extent(3),
                            layer.kernel, layer.stride, layer.padding);
        break;
      }
      case LayerKind::BatchNorm: {
        const BatchShape bs = norm_shape(input);
        const double n = static_cast<double>(bs.batch * bs.spatial);
        Tensor gamma_grad({bs.channels});
        Tensor beta_grad({bs.channels});
        Tensor next(input.shape());
        for (std::size_t c = 0; c < bs.channels; ++c) {
          double sum_dy = 0.0;
          double sum_dy_xhat = 0.0;
          for (std::size_t b = 0; b < bs.batch; ++b) {
            const std::size_t base = (b * bs.channels + c) * bs.spatial;
            for (std::size_t s = 0; s < bs.spatial; ++s) {
              sum_dy += grad[base + s];
              sum_dy_xhat += grad[base + s] * cache.bn_xhat[base + s];
            }
          }
          gamma_grad[c] = sum_dy_xhat;
          beta_grad[c] = sum_dy;
          const double sd = cache.bn_stats.stddev[c];
          const double g = layer.gamma[c];
          for (std::size_t b = 0; b < bs.batch; ++b) {
            const std::size_t base = (b * bs.channels + c) * bs.spatial;
            for (std::size_t s = 0; s < bs.spatial; ++s) {
              next[base + s] = (g / sd) * (grad[base + s] - sum_dy / n -
                                           cache.bn_xhat[base + s] * sum_dy_xhat / n);
            }
          }
        }
        result.grads.grads[{l, "gamma"}] = std::move(gamma_grad);
        result.grads.grads[{l, "beta"}] = std::move(beta_grad);
        result.grads.batch_stats[l] = cache.bn_stats;
        grad = std::move(next);
        break;
      }
      case LayerKind::ReLU: {
        Tensor next(input.shape());
        for (std::size_t i = 0; i < input.numel(); ++i) {
          next[i] = input[i] > 0.0 ? grad[i] : 0.0;
        }
        grad = std::move(next);
        break;
      }
      case LayerKind::MaxPool: {
        Tensor next(input.shape());
        for (std::size_t i = 0; i < cache.output.numel(); ++i) {
          next[cache.argmax[i]] += grad[i];
        }
        grad = std::move(next);
        break;
      }
      case LayerKind::SoftmaxCrossEntropy:
        throw ShapeError(l, "SoftmaxCrossEntropy is the loss, not a hidden layer");
    }
  }
  return result;
}

Tensor predict(const Network& net, const Tensor& batch) {
  const std::size_t bsz = batch.extent(0);
  Tensor cur = batch;
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    const LayerSpec& layer = net.layers[li];
    switch (layer.kind) {
      case LayerKind::FullyConnected: {
        Matrix x = to_matrix(cur, bsz);
        Matrix product = matmul(x, transpose(weight_as_matrix(layer)));
        Tensor out({bsz, layer.out_features});
        for (std::size_t b = 0; b < bsz; ++b) {
          for (std::size_t o = 0; o < layer.out_features; ++o) {
            out[b * layer.out_features + o] = product.at(b, o) + layer.bias[o];
          }
        }
        cur = std::move(out);
        break;
      }
      case LayerKind::Conv2D: {
        Matrix cols = im2col_batch(cur, layer.kernel, layer.stride, layer.padding);
        Matrix product = matmul(weight_as_matrix(layer), cols);
        const std::size_t ho = conv_out_extent(cur.extent(2), layer.kernel, layer.stride,
                                               layer.padding);
        const std::size_t wo = conv_out_extent(cur.extent(3), layer.kernel, layer.stride,
                                               layer.padding);
        Tensor out({bsz, layer.filters, ho, wo});
        const std::size_t plane = ho * wo;
        for (std::size_t b = 0; b < bsz; ++b) {
          for (std::size_t f = 0; f < layer.filters; ++f) {
            const double* src = &product.data[f * product.cols + b * plane];
            double* dst = out.data() + (b * layer.filters + f) * plane;
            for (std::size_t p = 0; p < plane; ++p) dst[p] = src[p] + layer.bias[f];
          }
        }
        cur = std::move(out);
        break;
      }
      case LayerKind::BatchNorm: {
        const BatchShape bs = norm_shape(cur);
        Tensor out(cur.shape());
        for (std::size_t c = 0; c < bs.channels; ++c) {
          const double sd = std::sqrt(layer.running_var[c] + layer.epsilon);
          const double mu = layer.running_mean[c];
          for (std::size_t b = 0; b < bs.batch; ++b) {
            const std::size_t base = (b * bs.channels + c) * bs.spatial;
            for (std::size_t s = 0; s < bs.spatial; ++s) {
              out[base + s] = layer.gamma[c] * ((cur[base + s] - mu) / sd) + layer.beta[c];
            }
          }
        }
        cur = std::move(out);
        break;
      }
      case LayerKind::ReLU: {
        for (double& v : cur.values()) v = v > 0.0 ? v : 0.0;
        break;
      }
      case LayerKind::MaxPool: {
        const std::size_t channels = cur.extent(1);
        const std::size_t h = cur.extent(2);
        const std::size_t w = cur.extent(3);
        const std::size_t wnd = layer.pool_window;
        const std::size_t st = layer.pool_stride;
        const std::size_t ho = (h - wnd) / st + 1;
        const std::size_t wo = (w - wnd) / st + 1;
        Tensor out({bsz, channels, ho, wo});
        for (std::size_t b = 0; b < bsz; ++b) {
          for (std::size_t c = 0; c < channels; ++c) {
            const std::size_t in_base = (b * channels + c) * h * w;
            const std::size_t out_base = (b * channels + c) * ho * wo;
            for (std::size_t oy = 0; oy < ho; ++oy) {
              for (std::size_t ox = 0; ox < wo; ++ox) {
                double best = -std::numeric_limits<double>::infinity();
                for (std::size_t ky = 0; ky < wnd; ++ky) {
                  for (std::size_t kx = 0; kx < wnd; ++kx) {
                    best = std::max(best, cur[in_base + (oy * st + ky) * w + (ox * st + kx)]);
                  }
                }
                out[out_base + oy * wo + ox] = best;
              }
            }
          }
        }
        cur = std::move(out);
        break;
      }
      case LayerKind::SoftmaxCrossEntropy:
        break;
    }
  }
  return softmax_rows(cur);
}

}  // namespace veritrain::nn
