#include <cmath>
#include <functional>
#include <random>

#include <gtest/gtest.h>

#include "clusterbreak/nn.hpp"

namespace cb = clusterbreak;
namespace nn = clusterbreak::nn;

namespace {

cb::Tensor random_tensor(cb::Shape shape, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  cb::Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

// Scalar probe: sum(w * net(x)) with fixed random weights w.
double probe(const nn::Sequential& net, const cb::Tensor& x, const cb::Tensor& w) {
  const cb::Tensor y = net.forward(x);
  double s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) s += w[i] * y[i];
  return s;
}

void check_gradients(nn::Sequential& net, const cb::Tensor& x, std::mt19937_64& rng) {
  nn::Trace trace;
  const cb::Tensor y = net.forward(x, trace);
  const cb::Tensor w = random_tensor(y.shape(), rng);
  nn::Gradients grads = net.zero_gradients();
  const cb::Tensor dx = net.backward(trace, w, &grads);

  const double h = 1e-6;
  auto central = [&](double& slot) {
    const double keep = slot;
    slot = keep + h;
    const double up = probe(net, x, w);
    slot = keep - h;
    const double down = probe(net, x, w);
    slot = keep;
    return (up - down) / (2 * h);
  };
  cb::Tensor xx = x;
  for (std::size_t i = 0; i < xx.size(); ++i) {
    const double keep = xx[i];
    xx[i] = keep + h;
    const double up = probe(net, xx, w);
    xx[i] = keep - h;
    const double down = probe(net, xx, w);
    xx[i] = keep;
    EXPECT_NEAR(dx[i], (up - down) / (2 * h), 1e-6) << "input " << i;
  }
  auto params = net.parameters();
  for (std::size_t p = 0; p < params.size(); ++p)
    for (std::size_t i = 0; i < params[p]->size(); ++i)
      EXPECT_NEAR(grads[p][i], central((*params[p])[i]), 1e-6) << "param " << p << "/" << i;
}

}  // namespace

TEST(Nn, ConvStackGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(1);
  nn::Rng init(2);
  nn::Sequential net;
  net.emplace<nn::Conv2d>(2, 3, 3, 2, 1, init);
  net.emplace<nn::LeakyRelu>(0.2);
  net.emplace<nn::Upsample2>();
  net.emplace<nn::Conv2d>(3, 1, 3, 1, 1, init);
  net.emplace<nn::ScaledTanh>(0.7);
  check_gradients(net, random_tensor({2, 2, 6, 6}, rng), rng);
}

TEST(Nn, DenseStackGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(3);
  nn::Rng init(4);
  nn::Sequential net;
  net.emplace<nn::Dense>(12, 5, init);
  net.emplace<nn::LeakyRelu>(0.1);
  net.emplace<nn::Dense>(5, 6, init);
  net.emplace<nn::Reshape>(cb::Shape{1, 2, 3});
  net.emplace<nn::Sigmoid>();
  check_gradients(net, random_tensor({3, 1, 3, 4}, rng), rng);
}

TEST(Nn, ConvMatchesDirectLoop) {
  std::mt19937_64 rng(5);
  nn::Rng init(6);
  nn::Conv2d conv(1, 1, 3, 1, 1, init);
  const cb::Tensor x = random_tensor({1, 1, 4, 4}, rng);
  const cb::Tensor y = conv.forward(x);
  const auto params = static_cast<const nn::Conv2d&>(conv).parameters();
  const cb::Tensor& wt = *params[0];
  const double bias = (*params[1])[0];
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      double s = bias;
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) {
          const int r = i + a - 1, c = j + b - 1;
          if (r >= 0 && r < 4 && c >= 0 && c < 4) s += wt[a * 3 + b] * x.at(0, 0, r, c);
        }
      EXPECT_NEAR(y.at(0, 0, i, j), s, 1e-12);
    }
}

TEST(Nn, SpecsRoundTripRebuildsArchitecture) {
  nn::Rng init(7);
  nn::Sequential net;
  net.emplace<nn::Conv2d>(1, 4, 3, 2, 1, init);
  net.emplace<nn::LeakyRelu>(0.2);
  net.emplace<nn::Dense>(36, 3, init);
  const auto rebuilt = nn::Sequential::from_specs(net.specs());
  EXPECT_EQ(rebuilt.specs(), net.specs());
  EXPECT_EQ(rebuilt.parameter_count(), net.parameter_count());
}

TEST(Nn, AdamMinimisesQuadratic) {
  cb::Tensor p({2}, std::vector<double>{3.0, -2.0});
  nn::Adam opt({&p}, {0.1});
  for (int i = 0; i < 500; ++i) {
    nn::Gradients g{cb::Tensor({2}, std::vector<double>{2 * p[0], 2 * p[1]})};
    opt.step(g);
  }
  EXPECT_NEAR(p[0], 0.0, 1e-2);
  EXPECT_NEAR(p[1], 0.0, 1e-2);
}

TEST(Nn, ClipGradientsBoundsGlobalNorm) {
  nn::Gradients g{cb::Tensor({2}, std::vector<double>{3, 4})};
  nn::clip_gradients(g, 1.0);
  EXPECT_NEAR(std::hypot(g[0][0], g[0][1]), 1.0, 1e-12);
}
