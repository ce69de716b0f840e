#include <gtest/gtest.h>

#include <cmath>
#include <thread>

#include <json.hpp>

#include "mdc/metrics.hpp"
#include "mdc/nn.hpp"

namespace mdc {
namespace {

ImageTensor random_image(int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  ImageTensor img = ImageTensor::zeros(h, w);
  for (float& v : img.data.values()) v = static_cast<float>(rng.uniform());
  return img;
}

ImageTensor add_noise(const ImageTensor& x, double amplitude, std::uint64_t seed) {
  Rng rng(seed);
  ImageTensor out = x;
  for (float& v : out.data.values())
    v = std::clamp(v + static_cast<float>(amplitude * rng.normal()), 0.0f, 1.0f);
  return out;
}

TEST(Psnr, ClosedForms) {
  const ImageTensor a = ImageTensor::zeros(4, 4);
  EXPECT_EQ(metrics::psnr(a, a), 100.0);
  ImageTensor b = a;
  for (float& v : b.data.values()) v = 0.1f;
  EXPECT_NEAR(metrics::psnr(a, b), 20.0, 1e-5);
  for (float& v : b.data.values()) v = 0.5f;
  EXPECT_NEAR(metrics::psnr(a, b), 10.0 * std::log10(4.0), 1e-9);
  EXPECT_NEAR(metrics::psnr(a, b), 6.0206, 1e-4);
  EXPECT_THROW(metrics::psnr(a, ImageTensor::zeros(4, 5)), ShapeError);
}

TEST(Psnr, DecreasesWithNoise) {
  const ImageTensor x = random_image(32, 32, 1);
  double prev = 1e9;
  for (double amp : {0.01, 0.05, 0.2}) {
    const double p = metrics::psnr(x, add_noise(x, amp, 7));
    EXPECT_LT(p, prev);
    prev = p;
  }
}

// Naive two-scale MS-SSIM with a direct 2-D window sum.
double oracle_ms_ssim_two_scales(const ImageTensor& a, const ImageTensor& b) {
  double g[11];
  double total = 0.0;
  for (int i = 0; i < 11; ++i) total += g[i] = std::exp(-(i - 5.0) * (i - 5.0) / 4.5);
  for (double& v : g) v /= total;
  auto terms = [&](const std::vector<double>& x, const std::vector<double>& y, int n,
                   double& cs, double& ssim) {
    cs = ssim = 0.0;
    const int m = n - 10;
    for (int r = 0; r < m; ++r)
      for (int c = 0; c < m; ++c) {
        double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
        for (int i = 0; i < 11; ++i)
          for (int j = 0; j < 11; ++j) {
            const double wgt = g[i] * g[j];
            const double u = x[(r + i) * n + c + j];
            const double v = y[(r + i) * n + c + j];
            mx += wgt * u;
            my += wgt * v;
            sxx += wgt * u * u;
            syy += wgt * v * v;
            sxy += wgt * u * v;
          }
        const double k = (2 * (sxy - mx * my) + 9e-4) / (sxx - mx * mx + syy - my * my + 9e-4);
        cs += k;
        ssim += k * (2 * mx * my + 1e-4) / (mx * mx + my * my + 1e-4);
      }
    cs /= m * m;
    ssim /= m * m;
  };
  const int n = a.height();
  const double w0 = 0.0448 / (0.0448 + 0.2856);
  const double w1 = 0.2856 / (0.0448 + 0.2856);
  double result = 0.0;
  for (int ch = 0; ch < 3; ++ch) {
    std::vector<double> x(n * n), y(n * n);
    for (int i = 0; i < n * n; ++i) {
      x[i] = a.data.plane(0, ch)[i];
      y[i] = b.data.plane(0, ch)[i];
    }
    double cs0, s0, cs1, s1;
    terms(x, y, n, cs0, s0);
    const int h = n / 2;
    std::vector<double> xd(h * h), yd(h * h);
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < h; ++c) {
        auto avg = [&](const std::vector<double>& p) {
          return 0.25 * (p[2 * r * n + 2 * c] + p[2 * r * n + 2 * c + 1] +
                         p[(2 * r + 1) * n + 2 * c] + p[(2 * r + 1) * n + 2 * c + 1]);
        };
        xd[r * h + c] = avg(x);
        yd[r * h + c] = avg(y);
      }
    terms(xd, yd, h, cs1, s1);
    result += std::pow(std::max(cs0, 0.0), w0) * std::pow(std::max(s1, 0.0), w1) / 3.0;
  }
  return result;
}

TEST(MsSsim, MatchesNaiveTwoScaleOracle) {
  ASSERT_EQ(metrics::ms_ssim_scales(24, 24), 2);
  const ImageTensor a = random_image(24, 24, 3);
  const ImageTensor b = add_noise(a, 0.1, 4);
  EXPECT_NEAR(metrics::ms_ssim(a, b), oracle_ms_ssim_two_scales(a, b), 1e-9);
}

TEST(MsSsim, BasicProperties) {
  const ImageTensor a = random_image(48, 40, 5);
  const ImageTensor b = add_noise(a, 0.05, 6);
  EXPECT_NEAR(metrics::ms_ssim(a, a), 1.0, 1e-12);
  EXPECT_DOUBLE_EQ(metrics::ms_ssim(a, b), metrics::ms_ssim(b, a));
  EXPECT_LE(metrics::ms_ssim(a, b), 1.0);
  ImageTensor neg = a;
  for (float& v : neg.data.values()) v = 1.0f - v;
  EXPECT_LT(metrics::ms_ssim(a, neg), 0.5);
  EXPECT_THROW(metrics::ms_ssim(random_image(16, 64, 1), random_image(16, 64, 2)),
               std::invalid_argument);
  EXPECT_EQ(metrics::ms_ssim_scales(161, 500), 5);
  EXPECT_EQ(metrics::ms_ssim_scales(160, 500), 4);
  EXPECT_EQ(metrics::ms_ssim_scales(20, 20), 1);
}

TEST(Perceptual, PseudometricAndMonotone) {
  const auto& dp = *metrics::default_perceptual();
  const ImageTensor x = random_image(32, 32, 8);
  const ImageTensor y = add_noise(x, 0.1, 9);
  EXPECT_EQ(dp(x, x), 0.0);
  EXPECT_GT(dp(x, y), 0.0);
  EXPECT_NEAR(dp(x, y), dp(y, x), 1e-6 * dp(x, y));
  double prev = 0.0;
  for (double amp : {0.02, 0.08, 0.3}) {
    const double d = dp(x, add_noise(x, amp, 11));
    EXPECT_GT(d, prev);
    prev = d;
  }
  // Deterministic given the seed.
  EXPECT_EQ(metrics::RandomFeatureDistance(3)(x, y), metrics::RandomFeatureDistance(3)(x, y));
}

TEST(Perceptual, GradientMatchesFiniteDifference) {
  const auto& dp = *metrics::default_perceptual();
  const ImageTensor x = random_image(8, 8, 1);
  const ImageTensor y = random_image(8, 8, 2);
  ag::Var a = ag::parameter(x.data);
  ag::backward(dp.distance(a, ag::constant(y.data)));
  for (std::size_t i : {0u, 37u, 150u}) {
    ImageTensor p = x, m = x;
    p.data[i] += 2e-3f;
    m.data[i] -= 2e-3f;
    const double fd = (dp(p, y) - dp(m, y)) / 4e-3;
    EXPECT_NEAR(a->grad[i], fd, 5e-2 * std::abs(fd) + 5e-5);
  }
}

TEST(Timing, MedianMinP90) {
  int calls = 0;
  const auto t = metrics::time_decode(
      [&] {
        ++calls;
        std::this_thread::sleep_for(std::chrono::microseconds(200));
      },
      2, 9);
  EXPECT_EQ(calls, 11);
  EXPECT_EQ(t.reps, 9);
  EXPECT_LE(t.min_ms, t.median_ms);
  EXPECT_LE(t.median_ms, t.p90_ms);
  EXPECT_GE(t.min_ms, 0.2);
}

TEST(RdPoints, CsvAndJson) {
  EXPECT_EQ(metrics::rd_to_csv({}), std::string(metrics::kRdCsvHeader) + "\n");
  const auto& dp = *metrics::default_perceptual();
  const ImageTensor x = random_image(32, 32, 1);
  const std::vector<ImageTensor> ref{x, x};
  const std::vector<ImageTensor> dec{add_noise(x, 0.05, 1), add_noise(x, 0.05, 2)};
  const metrics::RDPoint p = metrics::collect_rd("a", 0.5, ref, dec, 3.0, dp);
  EXPECT_EQ(p.bpp, 0.5);
  EXPECT_NEAR(p.psnr, 0.5 * (metrics::psnr(x, dec[0]) + metrics::psnr(x, dec[1])), 1e-9);
  metrics::RDPoint q = p;
  q.label = "b";
  q.bpp = 0.1;
  const std::string csv = metrics::rd_to_csv({p, q});
  EXPECT_LT(csv.find("\nb,"), csv.find("\na,"));
  const auto json = nlohmann::json::parse(metrics::rd_to_json({p, q}));
  ASSERT_EQ(json.size(), 2u);
  EXPECT_EQ(json[0]["label"], "b");
  EXPECT_EQ(json[1]["bpp"], 0.5);
  // Too small for two MS-SSIM scales: reported as missing.
  const std::vector<ImageTensor> tiny{random_image(16, 16, 1)};
  EXPECT_TRUE(std::isnan(metrics::collect_rd("t", 0.0, tiny, tiny, 0.0, dp).ms_ssim));
  EXPECT_THROW(metrics::collect_rd("x", 0.0, ref, tiny, 0.0, dp), std::invalid_argument);
}

}  // namespace
}  // namespace mdc
