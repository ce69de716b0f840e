#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mdc/autograd.hpp"
#include "mdc/image.hpp"

namespace mdc::metrics {

inline constexpr double kPsnrCap = 100.0;

double mse(const Tensor& a, const Tensor& b);

/// 10 log10(1/MSE) on the [0,1] scale, capped at 100 dB when MSE < 1e-10.
double psnr(const ImageTensor& a, const ImageTensor& b);
double psnr_from_mse(double mse);

/// Multi-scale SSIM (11x11 Gaussian window, sigma 1.5) averaged over RGB.
/// Uses 5 scales when min(H, W) >= 161; smaller inputs drop coarse scales and
/// renormalise the remaining weights. Fewer than 2 scales is an error.
double ms_ssim(const ImageTensor& a, const ImageTensor& b);
int ms_ssim_scales(int height, int width);

/// Differentiable perceptual distance d_p. Implementations must be symmetric,
/// non-negative and zero on identical inputs.
class PerceptualMetric {
 public:
  virtual ~PerceptualMetric() = default;
  /// Inputs are Nx3xHxW in [0,1]; returns a 1x1x1x1 Var.
  virtual ag::Var distance(const ag::Var& a, const ag::Var& b) const = 0;
  double operator()(const ImageTensor& a, const ImageTensor& b) const;
};

/// Seeded random convolutional feature pyramid (3 scales, 16 channels each).
/// Features are channel-normalised before the squared difference, averaged
/// over positions and scales.
class RandomFeatureDistance final : public PerceptualMetric {
 public:
  explicit RandomFeatureDistance(std::uint64_t seed = 7);
  ag::Var distance(const ag::Var& a, const ag::Var& b) const override;

 private:
  static constexpr int kScales = 3;
  static constexpr int kFeatures = 16;
  std::vector<ag::Var> weights_;
  std::vector<ag::Var> biases_;
};

std::shared_ptr<const PerceptualMetric> default_perceptual();

struct Timing {
  double median_ms = 0.0;
  double min_ms = 0.0;
  double p90_ms = 0.0;
  int reps = 0;
};

/// Runs `fn` warmup times untimed, then `reps` timed runs.
/// Must not be run concurrently with other heavy work.
Timing time_decode(const std::function<void()>& fn, int warmup = 3, int reps = 20);

struct RDPoint {
  std::string label;
  double bpp = 0.0;
  double psnr = 0.0;
  double ms_ssim = 0.0;
  double d_p = 0.0;
  double decode_ms = 0.0;
};

inline constexpr const char* kRdCsvHeader = "label,bpp,psnr,ms_ssim,d_p,decode_ms";

/// Per-frame metrics averaged over a sequence.
RDPoint collect_rd(const std::string& label, double bpp,
                   const std::vector<ImageTensor>& reference,
                   const std::vector<ImageTensor>& decoded, double decode_ms,
                   const PerceptualMetric& dp);

/// Stable column order; rows sorted by bpp.
std::string rd_to_csv(std::vector<RDPoint> points);
std::string rd_to_json(std::vector<RDPoint> points);
void write_rd(const std::vector<RDPoint>& points, const std::filesystem::path& csv,
              const std::filesystem::path& json);

}  // namespace mdc::metrics
