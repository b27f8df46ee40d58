#include <cmath>
#include <vector>

#include "doctest.h"
#include "veritrain/nn.hpp"
#include "veritrain/rng.hpp"

using namespace veritrain;
using nn::LayerKind;
using nn::LayerSpec;
using nn::Network;

namespace {

nn::ForwardResult run_forward(const Network& net, const Tensor& batch,
                              const std::vector<int>& labels) {
  return nn::forward(net, batch, labels, nn::LayerRandomness{});
}

nn::BackwardResult run_backward(const Network& net, const nn::ForwardResult& fwd,
                                const std::vector<int>& labels) {
  return nn::backward(net, fwd, labels, nn::LayerRandomness{});
}

// Straight-line scalar reference for a 2-layer ReLU MLP with softmax
// cross-entropy, independent of the tensor machinery.
double mlp_loss_reference(const std::vector<std::vector<double>>& x, const std::vector<int>& y,
                          const std::vector<std::vector<double>>& w1,
                          const std::vector<double>& b1,
                          const std::vector<std::vector<double>>& w2,
                          const std::vector<double>& b2) {
  double total = 0.0;
  for (std::size_t s = 0; s < x.size(); ++s) {
    std::vector<double> h(w1.size());
    for (std::size_t o = 0; o < w1.size(); ++o) {
      double acc = b1[o];
      for (std::size_t i = 0; i < x[s].size(); ++i) acc += w1[o][i] * x[s][i];
      h[o] = acc > 0.0 ? acc : 0.0;
    }
    std::vector<double> logits(w2.size());
    for (std::size_t o = 0; o < w2.size(); ++o) {
      double acc = b2[o];
      for (std::size_t i = 0; i < h.size(); ++i) acc += w2[o][i] * h[i];
      logits[o] = acc;
    }
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : logits) z += std::exp(v - mx);
    total -= (logits[static_cast<std::size_t>(y[s])] - mx - std::log(z));
  }
  return total / static_cast<double>(x.size());
}

// Direct nested-loop convolution, the oracle for the im2col path.
Tensor conv_reference(const Tensor& batch, const Tensor& weight, const Tensor& bias,
                      std::size_t stride, std::size_t padding) {
  const std::size_t bsz = batch.extent(0);
  const std::size_t cin = batch.extent(1);
  const std::size_t h = batch.extent(2);
  const std::size_t w = batch.extent(3);
  const std::size_t f = weight.extent(0);
  const std::size_t k = weight.extent(2);
  const std::size_t ho = (h + 2 * padding - k) / stride + 1;
  const std::size_t wo = (w + 2 * padding - k) / stride + 1;
  Tensor out({bsz, f, ho, wo});
  for (std::size_t b = 0; b < bsz; ++b) {
    for (std::size_t fi = 0; fi < f; ++fi) {
      for (std::size_t oy = 0; oy < ho; ++oy) {
        for (std::size_t ox = 0; ox < wo; ++ox) {
          double acc = bias[fi];
          for (std::size_t c = 0; c < cin; ++c) {
            for (std::size_t ky = 0; ky < k; ++ky) {
              for (std::size_t kx = 0; kx < k; ++kx) {
                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                          static_cast<std::ptrdiff_t>(padding);
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                          static_cast<std::ptrdiff_t>(padding);
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h) || ix < 0 ||
                    ix >= static_cast<std::ptrdiff_t>(w)) {
                  continue;
                }
                acc += weight[((fi * cin + c) * k + ky) * k + kx] *
                       batch[((b * cin + c) * h + static_cast<std::size_t>(iy)) * w +
                             static_cast<std::size_t>(ix)];
              }
            }
          }
          out[((b * f + fi) * ho + oy) * wo + ox] = acc;
        }
      }
    }
  }
  return out;
}

Network small_mlp(std::size_t in, std::size_t hidden, std::size_t classes, std::uint64_t seed) {
  Network net;
  net.input_shape = {in};
  net.layers.push_back(LayerSpec::fully_connected(in, hidden));
  net.layers.push_back(LayerSpec::relu());
  net.layers.push_back(LayerSpec::fully_connected(hidden, classes));
  net.num_classes = classes;
  DeterministicRng rng(seed);
  net.init_params(rng);
  return net;
}

Network conv_bn_fc_net(std::uint64_t seed) {
  Network net;
  net.input_shape = {2, 6, 6};
  net.layers.push_back(LayerSpec::conv2d(3, 3, 2, 1, 1));
  net.layers.push_back(LayerSpec::batch_norm(3));
  net.layers.push_back(LayerSpec::relu());
  net.layers.push_back(LayerSpec::max_pool(2, 2));
  net.layers.push_back(LayerSpec::fully_connected(3 * 3 * 3, 3));
  net.num_classes = 3;
  DeterministicRng rng(seed);
  net.init_params(rng);
  return net;
}

Tensor random_batch(const std::vector<std::size_t>& per_sample, std::size_t bsz,
                    DeterministicRng& rng, double scale = 1.0) {
  std::vector<std::size_t> shape = {bsz};
  shape.insert(shape.end(), per_sample.begin(), per_sample.end());
  Tensor t(shape);
  for (double& v : t.values()) v = rng.normal() * scale;
  return t;
}

void check_finite_differences(Network& net, const Tensor& batch, const std::vector<int>& labels) {
  const nn::ForwardResult fwd = run_forward(net, batch, labels);
  const nn::BackwardResult bwd = run_backward(net, fwd, labels);
  const double h = 1e-5;
  for (auto& ref : net.param_refs()) {
    const Tensor& grad = bwd.grads.grads.at(ref.key);
    for (std::size_t i = 0; i < ref.tensor->numel(); ++i) {
      const double saved = (*ref.tensor)[i];
      (*ref.tensor)[i] = saved + h;
      const double lp = run_forward(net, batch, labels).loss;
      (*ref.tensor)[i] = saved - h;
      const double lm = run_forward(net, batch, labels).loss;
      (*ref.tensor)[i] = saved;
      const double fd = (lp - lm) / (2.0 * h);
      const double g = grad[i];
      const double err = std::abs(fd - g);
      const double bound = 1e-5 * std::max(std::abs(fd), std::abs(g)) + 1e-9;
      if (err > bound) {
        CAPTURE(ref.key.layer);
        CAPTURE(ref.key.name);
        CAPTURE(i);
        CAPTURE(fd);
        CAPTURE(g);
        REQUIRE(err <= bound);
      }
    }
  }
}

}  // namespace

TEST_CASE("fully-connected identity weights pass the input through") {
  Network net;
  net.input_shape = {3};
  auto fc = LayerSpec::fully_connected(3, 3);
  fc.weight = Tensor({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  fc.bias = Tensor({3});
  net.layers.push_back(fc);
  net.num_classes = 3;
  net.validate();

  const Tensor batch({2, 3}, {0.5, -1.25, 2.0, 3.0, 0.0, -0.75});
  const auto fwd = run_forward(net, batch, {0, 1});
  for (std::size_t i = 0; i < batch.numel(); ++i) {
    CHECK(fwd.layers[0].output[i] == doctest::Approx(batch[i]).epsilon(1e-15));
  }
}

TEST_CASE("1x1 all-ones convolution over one channel is the identity map") {
  Network net;
  net.input_shape = {1, 4, 4};
  auto conv = LayerSpec::conv2d(1, 1, 1, 1, 0);
  conv.weight = Tensor({1, 1, 1, 1}, {1.0});
  conv.bias = Tensor({1});
  net.layers.push_back(conv);
  net.layers.push_back(LayerSpec::fully_connected(16, 2));
  net.num_classes = 2;
  DeterministicRng rng(3);
  net.init_params(rng);
  net.layers[0].weight = Tensor({1, 1, 1, 1}, {1.0});

  DeterministicRng data_rng(11);
  const Tensor batch = random_batch({1, 4, 4}, 2, data_rng);
  const auto fwd = run_forward(net, batch, {0, 1});
  for (std::size_t i = 0; i < batch.numel(); ++i) {
    CHECK(fwd.layers[0].output[i] == doctest::Approx(batch[i]).epsilon(1e-15));
  }
}

TEST_CASE("2-layer MLP loss matches the straight-line scalar reference") {
  Network net = small_mlp(4, 5, 3, 17);
  DeterministicRng rng(23);
  const Tensor batch = random_batch({4}, 4, rng);
  const std::vector<int> labels = {0, 2, 1, 1};
  const auto fwd = run_forward(net, batch, labels);

  std::vector<std::vector<double>> x(4, std::vector<double>(4));
  for (std::size_t s = 0; s < 4; ++s) {
    for (std::size_t i = 0; i < 4; ++i) x[s][i] = batch[s * 4 + i];
  }
  auto mat = [](const Tensor& t, std::size_t rows, std::size_t cols) {
    std::vector<std::vector<double>> m(rows, std::vector<double>(cols));
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) m[r][c] = t[r * cols + c];
    }
    return m;
  };
  auto vec = [](const Tensor& t) {
    return std::vector<double>(t.values().begin(), t.values().end());
  };
  const double want =
      mlp_loss_reference(x, labels, mat(net.layers[0].weight, 5, 4), vec(net.layers[0].bias),
                         mat(net.layers[2].weight, 3, 5), vec(net.layers[2].bias));
  CHECK(std::abs(fwd.loss - want) <= 1e-12 * std::max(1.0, std::abs(want)));
  CHECK(fwd.loss >= 0.0);
}

TEST_CASE("gradients vanish at a perfectly confident correct prediction") {
  Network net;
  net.input_shape = {2};
  auto fc = LayerSpec::fully_connected(2, 2);
  // Huge margin toward the true class for both samples.
  fc.weight = Tensor({2, 2}, {40.0, 0.0, -40.0, 0.0});
  fc.bias = Tensor({2});
  net.layers.push_back(fc);
  net.num_classes = 2;
  net.validate();

  const Tensor batch({2, 2}, {1.0, 0.3, 1.0, -0.2});
  const auto fwd = run_forward(net, batch, {0, 0});
  const auto bwd = run_backward(net, fwd, {0, 0});
  for (const auto& [key, grad] : bwd.grads.grads) {
    for (std::size_t i = 0; i < grad.numel(); ++i) {
      CHECK(std::abs(grad[i]) <= 1e-12);
    }
  }
}

TEST_CASE("finite differences confirm every layer kind") {
  SUBCASE("2-layer MLP") {
    Network net = small_mlp(6, 8, 3, 101);
    DeterministicRng rng(55);
    const Tensor batch = random_batch({6}, 5, rng);
    check_finite_differences(net, batch, {0, 1, 2, 0, 1});
  }
  SUBCASE("conv + batchnorm + relu + maxpool + fc") {
    Network net = conv_bn_fc_net(77);
    DeterministicRng rng(56);
    const Tensor batch = random_batch({2, 6, 6}, 4, rng);
    check_finite_differences(net, batch, {0, 1, 2, 0});
  }
}

TEST_CASE("gradient shapes match the layer dimensions") {
  Network net = small_mlp(4, 6, 2, 9);
  DeterministicRng rng(10);
  const Tensor batch = random_batch({4}, 3, rng);
  const std::vector<int> labels = {0, 1, 0};
  const auto fwd = run_forward(net, batch, labels);
  const auto bwd = run_backward(net, fwd, labels);

  CHECK(bwd.grads.grads.at({0, "weight"}).shape() == std::vector<std::size_t>{6, 4});
  CHECK(bwd.grads.grads.at({2, "weight"}).shape() == std::vector<std::size_t>{2, 6});
  // Input-gradient record of the first FC layer has the input's extents.
  const nn::MMRecord& rec = bwd.mm_records.back();
  CHECK(rec.role == nn::MMRole::FcGradInput);
  CHECK(rec.claimed.rows == 3);
  CHECK(rec.claimed.cols == 4);
}

TEST_CASE("im2col unit kernel is a reshape") {
  DeterministicRng rng(31);
  Tensor img({2, 3, 3});
  for (double& v : img.values()) v = rng.normal();
  const Matrix cols = nn::im2col(img, 1, 1, 0);
  REQUIRE(cols.rows == 2);
  REQUIRE(cols.cols == 9);
  for (std::size_t i = 0; i < img.numel(); ++i) {
    CHECK(cols.data[i] == img[i]);
  }
}

TEST_CASE("im2col enumerates 2x2 patches of a 3x3 input") {
  Tensor img({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  const Matrix cols = nn::im2col(img, 2, 1, 0);
  REQUIRE(cols.rows == 4);
  REQUIRE(cols.cols == 4);
  // Patches row-major over output positions; rows kernel-row-major.
  const double expect[4][4] = {
      {1, 2, 4, 5},  // top-left values of each patch
      {2, 3, 5, 6},
      {4, 5, 7, 8},
      {5, 6, 8, 9},
  };
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t c = 0; c < 4; ++c) {
      CHECK(cols.at(r, c) == expect[c][r]);
    }
  }
}

TEST_CASE("conv via im2col equals the direct nested-loop convolution") {
  for (std::size_t padding : {0u, 1u}) {
    for (std::size_t stride : {1u, 2u}) {
      Network net;
      net.input_shape = {3, 7, 7};
      net.layers.push_back(LayerSpec::conv2d(4, 3, 3, stride, padding));
      const std::size_t ho = nn::conv_out_extent(7, 3, stride, padding);
      const std::size_t wo = nn::conv_out_extent(7, 3, stride, padding);
      net.layers.push_back(LayerSpec::fully_connected(4 * ho * wo, 2));
      net.num_classes = 2;
      DeterministicRng rng(1000 + stride * 10 + padding);
      net.init_params(rng);
      for (double& v : net.layers[0].bias.values()) v = rng.normal() * 0.1;

      DeterministicRng data_rng(2000 + stride * 10 + padding);
      const Tensor batch = random_batch({3, 7, 7}, 3, data_rng);
      const auto fwd = run_forward(net, batch, {0, 1, 0});
      const Tensor want =
          conv_reference(batch, net.layers[0].weight, net.layers[0].bias, stride, padding);
      REQUIRE(fwd.layers[0].output.shape() == want.shape());
      for (std::size_t i = 0; i < want.numel(); ++i) {
        const double scale = std::max(1.0, std::abs(want[i]));
        CHECK(std::abs(fwd.layers[0].output[i] - want[i]) <= 1e-12 * scale);
      }
    }
  }
}

TEST_CASE("forward and backward are deterministic") {
  Network net = conv_bn_fc_net(5);
  DeterministicRng rng(6);
  const Tensor batch = random_batch({2, 6, 6}, 4, rng);
  const std::vector<int> labels = {1, 2, 0, 1};
  const auto fwd1 = run_forward(net, batch, labels);
  const auto fwd2 = run_forward(net, batch, labels);
  CHECK(fwd1.loss == fwd2.loss);
  const auto bwd1 = run_backward(net, fwd1, labels);
  const auto bwd2 = run_backward(net, fwd2, labels);
  for (const auto& [key, grad] : bwd1.grads.grads) {
    const Tensor& other = bwd2.grads.grads.at(key);
    for (std::size_t i = 0; i < grad.numel(); ++i) {
      CHECK(grad[i] == other[i]);
    }
  }
}

TEST_CASE("every FC/Conv multiplication is recorded once with the right dims") {
  Network net = conv_bn_fc_net(13);
  DeterministicRng rng(14);
  const std::size_t bsz = 4;
  const Tensor batch = random_batch({2, 6, 6}, bsz, rng);
  const std::vector<int> labels = {0, 1, 2, 0};
  const auto fwd = run_forward(net, batch, labels);
  const auto bwd = run_backward(net, fwd, labels);

  REQUIRE(fwd.mm_records.size() == 2);  // conv fwd, fc fwd
  REQUIRE(bwd.mm_records.size() == 4);  // fc gw, fc gi, conv gw, conv gi

  const auto& conv_fwd = fwd.mm_records[0];
  CHECK(conv_fwd.role == nn::MMRole::ConvForward);
  CHECK(conv_fwd.left.rows == 3);                 // filters
  CHECK(conv_fwd.left.cols == 9 * 2);             // k^2 * C_in
  CHECK(conv_fwd.right.cols == bsz * 6 * 6);      // batched columns
  const auto& fc_fwd = fwd.mm_records[1];
  CHECK(fc_fwd.role == nn::MMRole::FcForward);
  CHECK(fc_fwd.left.rows == bsz);
  CHECK(fc_fwd.claimed.cols == 3);

  CHECK(bwd.mm_records[0].role == nn::MMRole::FcGradWeight);
  CHECK(bwd.mm_records[0].claimed.rows == 3);       // out features
  CHECK(bwd.mm_records[0].claimed.cols == 27);      // in features
  CHECK(bwd.mm_records[1].role == nn::MMRole::FcGradInput);
  CHECK(bwd.mm_records[2].role == nn::MMRole::ConvGradWeight);
  CHECK(bwd.mm_records[2].claimed.rows == 3);
  CHECK(bwd.mm_records[2].claimed.cols == 18);
  CHECK(bwd.mm_records[3].role == nn::MMRole::ConvGradInput);

  // op ids are unique and sequential across the step.
  std::uint32_t next = 0;
  for (const auto& rec : fwd.mm_records) CHECK(rec.op_id == next++);
  for (const auto& rec : bwd.mm_records) CHECK(rec.op_id == next++);
}

TEST_CASE("full-batch descent on a separable toy set never increases the loss") {
  Network net = small_mlp(2, 4, 2, 40);
  // Two linearly separable blobs.
  const std::size_t n = 16;
  Tensor images({n, 2});
  std::vector<int> labels(n);
  DeterministicRng rng(41);
  for (std::size_t i = 0; i < n; ++i) {
    const int cls = static_cast<int>(i % 2);
    labels[i] = cls;
    images[i * 2 + 0] = (cls == 0 ? 1.5 : -1.5) + rng.normal() * 0.2;
    images[i * 2 + 1] = (cls == 0 ? -1.0 : 1.0) + rng.normal() * 0.2;
  }
  double prev = std::numeric_limits<double>::infinity();
  for (int step = 0; step < 50; ++step) {
    const auto fwd = run_forward(net, images, labels);
    CHECK(fwd.loss <= prev + 1e-12);
    prev = fwd.loss;
    const auto bwd = run_backward(net, fwd, labels);
    for (auto& ref : net.param_refs()) {
      const Tensor& g = bwd.grads.grads.at(ref.key);
      for (std::size_t i = 0; i < g.numel(); ++i) (*ref.tensor)[i] -= 0.1 * g[i];
    }
  }
  CHECK(prev < 0.1);
}

TEST_CASE("shape errors name the offending layer") {
  Network net;
  net.input_shape = {4};
  net.layers.push_back(LayerSpec::fully_connected(5, 3));  // wrong fan-in
  net.num_classes = 3;
  try {
    net.validate();
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(e.layer_index() == 0);
  }
}

TEST_CASE("backward rejects activations from a different network") {
  Network net = small_mlp(3, 4, 2, 50);
  DeterministicRng rng(51);
  const Tensor batch = random_batch({3}, 2, rng);
  auto fwd = run_forward(net, batch, {0, 1});
  fwd.layers.pop_back();  // missing activation
  CHECK_THROWS_AS(run_backward(net, fwd, {0, 1}), Error);
}

TEST_CASE("max-pool ties resolve to the lowest flat index") {
  Network net;
  net.input_shape = {1, 2, 2};
  net.layers.push_back(LayerSpec::max_pool(2, 2));
  net.layers.push_back(LayerSpec::fully_connected(1, 2));
  net.num_classes = 2;
  DeterministicRng rng(60);
  net.init_params(rng);

  const Tensor batch({1, 1, 2, 2}, {0.7, 0.7, 0.7, 0.7});
  const auto fwd = run_forward(net, batch, {0});
  CHECK(fwd.layers[0].argmax[0] == 0);
}
