// Finite-difference checks for every differentiable primitive.

#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "mdc/autograd.hpp"
#include "mdc/gaussian.hpp"
#include "mdc/nn.hpp"

using namespace mdc;
using ag::Var;

namespace {

Tensor random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(s);
  for (float& v : t.values()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

// Compares analytic gradients of `f` with central differences on a sample of
// coordinates of every input.
void check_gradients(std::vector<Tensor> inputs,
                     const std::function<Var(const std::vector<Var>&)>& f,
                     double eps = 1e-2, double tol = 2e-2) {
  std::vector<Var> vars;
  for (auto& t : inputs) vars.push_back(ag::parameter(t));
  Var out = f(vars);
  ag::backward(out);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const std::size_t n = inputs[k].numel();
    const std::size_t stride = std::max<std::size_t>(1, n / 23);
    for (std::size_t i = 0; i < n; i += stride) {
      auto eval = [&](float delta) {
        ag::NoGradGuard guard;
        std::vector<Var> probe;
        for (std::size_t j = 0; j < inputs.size(); ++j) {
          Tensor t = inputs[j];
          if (j == k) t[i] += delta;
          probe.push_back(ag::constant(t));
        }
        return static_cast<double>(ag::scalar(f(probe)));
      };
      const double numeric = (eval(eps) - eval(-eps)) / (2 * eps);
      const double analytic = vars[k]->grad.empty() ? 0.0 : vars[k]->grad[i];
      EXPECT_NEAR(analytic, numeric, tol * std::max(1.0, std::abs(numeric)))
          << "input " << k << " element " << i;
    }
  }
}

// Weighted sum so every output element carries a distinct gradient.
Var probe_sum(const Var& v) {
  Tensor w(v->shape());
  for (std::size_t i = 0; i < w.numel(); ++i) w[i] = 0.3f + 0.01f * (i % 17);
  return ag::sum(ag::mul(v, ag::constant(w)));
}

}  // namespace

TEST(Autograd, ElementwiseOps) {
  Rng rng(1);
  Shape s{2, 3, 4, 5};
  check_gradients({random_tensor(s, rng), random_tensor(s, rng)},
                  [](const std::vector<Var>& v) {
                    return probe_sum(ag::add(ag::mul(v[0], v[1]),
                                             ag::scale(ag::sub(v[0], v[1]), 0.7f)));
                  });
  check_gradients({random_tensor(s, rng)}, [](const std::vector<Var>& v) {
    return probe_sum(ag::softplus(ag::leaky_relu(v[0], 0.2f)));
  });
}

TEST(Autograd, LayoutOps) {
  Rng rng(2);
  check_gradients({random_tensor({2, 3, 4, 4}, rng), random_tensor({2, 2, 4, 4}, rng)},
                  [](const std::vector<Var>& v) {
                    std::vector<Var> parts{v[0], v[1]};
                    Var cat = ag::concat_channels(parts);
                    return probe_sum(ag::upsample_nearest2(
                        ag::avg_pool2(ag::slice_channels(cat, 1, 3))));
                  });
  check_gradients({random_tensor({1, 2, 5, 6}, rng)}, [](const std::vector<Var>& v) {
    return probe_sum(ag::crop_spatial(v[0], 3, 4));
  });
  check_gradients({random_tensor({1, 3, 1, 1}, rng)}, [](const std::vector<Var>& v) {
    return probe_sum(ag::broadcast_channels(v[0], {2, 3, 2, 2}));
  });
}

TEST(Autograd, Convolutions) {
  Rng rng(3);
  for (int stride : {1, 2}) {
    check_gradients({random_tensor({2, 3, 7, 6}, rng), random_tensor({4, 3, 3, 3}, rng),
                     random_tensor({4, 1, 1, 1}, rng)},
                    [stride](const std::vector<Var>& v) {
                      return probe_sum(ag::conv2d(v[0], v[1], v[2], stride, 1));
                    });
  }
  check_gradients({random_tensor({2, 3, 3, 4}, rng), random_tensor({3, 2, 3, 3}, rng),
                   random_tensor({2, 1, 1, 1}, rng)},
                  [](const std::vector<Var>& v) {
                    return probe_sum(ag::conv_transpose2d(v[0], v[1], v[2], 2, 1, 1));
                  });
  check_gradients({random_tensor({2, 3, 5, 5}, rng), random_tensor({3, 1, 3, 3}, rng),
                   random_tensor({3, 1, 1, 1}, rng)},
                  [](const std::vector<Var>& v) {
                    return probe_sum(ag::depthwise_conv2d(v[0], v[1], v[2], 1));
                  });
}

TEST(Autograd, TransposedConvIsAdjointOfConv) {
  // <conv(x), y> == <x, convT(y)> with shared weights and no bias.
  Rng rng(4);
  Tensor x = random_tensor({1, 2, 8, 8}, rng);
  Tensor y = random_tensor({1, 3, 4, 4}, rng);
  Tensor w = random_tensor({3, 2, 3, 3}, rng);
  ag::NoGradGuard guard;
  Var cx = ag::conv2d(ag::constant(x), ag::constant(w), nullptr, 2, 1);
  Var ty = ag::conv_transpose2d(ag::constant(y), ag::constant(w), nullptr, 2, 1, 1);
  ASSERT_EQ(ty->shape(), x.shape());
  double lhs = 0, rhs = 0;
  for (std::size_t i = 0; i < y.numel(); ++i) lhs += cx->value[i] * y[i];
  for (std::size_t i = 0; i < x.numel(); ++i) rhs += ty->value[i] * x[i];
  EXPECT_NEAR(lhs, rhs, 1e-4);
}

TEST(Autograd, WarpGradients) {
  Rng rng(5);
  // Flow kept away from integer coordinates so the bilinear weights are smooth.
  Tensor flow({1, 2, 6, 6});
  for (float& v : flow.values()) v = static_cast<float>(rng.uniform(0.2, 0.8));
  check_gradients({random_tensor({1, 2, 6, 6}, rng), flow},
                  [](const std::vector<Var>& v) {
                    return probe_sum(ag::warp_bilinear(v[0], v[1]));
                  },
                  1e-3, 3e-2);
}

TEST(Autograd, NormalisationAndReductions) {
  Rng rng(6);
  Shape s{2, 4, 3, 3};
  check_gradients({random_tensor(s, rng)}, [](const std::vector<Var>& v) {
    return probe_sum(ag::channel_normalize(v[0]));
  });
  check_gradients({random_tensor(s, rng), random_tensor(s, rng)},
                  [](const std::vector<Var>& v) {
                    return ag::add(ag::mse(v[0], v[1]), ag::l1(v[0], v[1]));
                  });
}

TEST(Autograd, GaussianBits) {
  Rng rng(7);
  Shape s{1, 2, 3, 3};
  Tensor y = random_tensor(s, rng, -3, 3);
  Tensor mu = random_tensor(s, rng, -1, 1);
  Tensor sigma = random_tensor(s, rng, 0.5, 2.0);
  check_gradients({y, mu, sigma}, [](const std::vector<Var>& v) {
    return ag::gaussian_bits(v[0], v[1], v[2], kProbabilityFloor);
  }, 1e-3, 2e-2);
}

TEST(Autograd, NoGradBuildsNoGraph) {
  Var p = ag::parameter(Tensor({1, 1, 2, 2}, 1.0f));
  ag::NoGradGuard guard;
  Var out = ag::scale(p, 2.0f);
  EXPECT_FALSE(out->requires_grad);
  EXPECT_TRUE(out->inputs.empty());
}

TEST(Adam, SkipsFrozenParameters) {
  Var a = ag::parameter(Tensor({1, 1, 1, 2}, 1.0f));
  Var b = ag::parameter(Tensor({1, 1, 1, 2}, 1.0f));
  b->requires_grad = false;
  Adam opt({{"a", a}, {"b", b}}, AdamConfig{.lr = 0.1});
  ag::backward(ag::sum(ag::mul(a, b)));
  opt.step();
  EXPECT_LT(a->value[0], 1.0f);
  EXPECT_EQ(b->value[0], 1.0f);
}
