#pragma once

// Teacher image codec: convolutional analysis transform, mean-scale
// hyperprior, and a synthesis transform split into head, residual trunk and
// tail so the trunk can be skipped or swapped for a student network.

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "mdc/autograd.hpp"
#include "mdc/gaussian.hpp"
#include "mdc/image.hpp"
#include "mdc/metrics.hpp"
#include "mdc/nn.hpp"

namespace mdc {

struct CodecConfig {
  int latent_channels = 32;
  int trunk_channels = 64;
  int downsample_factor = 16;
  int hyper_channels = 32;
  int trunk_blocks = 6;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument on non-positive widths or a factor that is
  /// not a power of two >= 2.
  void validate() const;
  int stages() const;
  /// Channel widths of the tail from trunk width down to RGB.
  std::vector<int> tail_widths() const;
  bool operator==(const CodecConfig&) const = default;
};

/// Real-valued latent plus the pre-padding size of the image it came from.
struct Latent {
  Tensor data;
  int source_height = 0;
  int source_width = 0;
};

struct QuantizedLatent {
  Shape shape;
  std::vector<std::int32_t> values;
  int source_height = 0;
  int source_width = 0;

  Latent to_latent() const;
  static QuantizedLatent from_tensor(const Tensor& rounded, int source_height,
                                     int source_width);
};

struct EntropyParams {
  Tensor mu;
  Tensor sigma;
};

enum class QuantizeMode { round, noise };

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Mean-scale hyperprior for a C-channel latent: a two-stage strided
/// hyper-analysis to z, a per-channel Gaussian prior for z, and a
/// hyper-synthesis predicting (mu, sigma) for every latent element.
class HyperPrior {
 public:
  HyperPrior() = default;
  HyperPrior(int channels, int hyper_channels, Rng& rng);

  struct Output {
    ag::Var z_tilde;  // noisy (training) or rounded z
    ag::Var mu;
    ag::Var sigma;
    ag::Var z_bits;
  };

  /// Training/inference pass. `noise` selects uniform-noise quantisation of z;
  /// nullptr rounds.
  Output forward(const ag::Var& y, Rng* noise) const;
  ag::Var analysis(const ag::Var& y) const;
  /// Predicts entropy parameters for a latent of spatial size (h, w).
  std::pair<ag::Var, ag::Var> synthesis(const ag::Var& z_hat, int h, int w) const;
  /// Per-channel prior parameters broadcast to `shape`.
  std::pair<ag::Var, ag::Var> z_prior(const Shape& shape) const;

  void collect(ParamList& out, const std::string& prefix) const;
  int channels() const { return channels_; }
  int hyper_channels() const { return z_mu_ ? z_mu_->shape().c : 0; }

 private:
  int channels_ = 0;
  nn::Conv2d ha0_, ha1_, ha2_;
  nn::ConvTranspose2d hs0_, hs1_;
  nn::Conv2d hs2_;
  ag::Var z_mu_;
  ag::Var z_scale_;
};

class TeacherModel {
 public:
  explicit TeacherModel(const CodecConfig& config);
  TeacherModel(TeacherModel&&) noexcept = default;
  TeacherModel& operator=(TeacherModel&&) noexcept = default;
  TeacherModel(const TeacherModel&) = delete;
  TeacherModel& operator=(const TeacherModel&) = delete;

  /// Deep copy with independent parameters and a fresh call counter.
  TeacherModel clone() const;

  const CodecConfig& config() const { return config_; }

  // Graph-level pieces (input spatial dims must be multiples of the factor).
  ag::Var analysis(const ag::Var& x) const;
  ag::Var head(const ag::Var& y) const;
  ag::Var res_blocks(const ag::Var& f) const;
  ag::Var tail(const ag::Var& f) const;
  const HyperPrior& hyper() const { return hyper_; }

  ParamList encoder_params() const;
  ParamList hyper_params() const;
  ParamList head_params() const;
  ParamList trunk_params() const;
  ParamList tail_params() const;
  /// All parameters in checkpoint order: encoder, hyper, head, trunk, tail.
  ParamList params() const;

  /// Number of residual-trunk evaluations since construction.
  std::size_t trunk_calls() const { return trunk_calls_->load(); }

 private:
  CodecConfig config_;
  std::vector<nn::Conv2d> encoder_;
  HyperPrior hyper_;
  nn::Conv2d head_;
  std::vector<std::pair<nn::Conv2d, nn::Conv2d>> trunk_;
  std::vector<nn::ConvTranspose2d> tail_;
  std::unique_ptr<std::atomic<std::size_t>> trunk_calls_;
};

/// Reflect-pads to a multiple of the downsample factor and runs the analysis
/// transform. Throws DimensionError when H or W is below the factor.
Latent encode(const ImageTensor& x, const TeacherModel& model);

/// Round: nearest integer, ties away from zero. Noise: y + u, u ~ U[-0.5, 0.5).
Latent quantize(const Latent& y, QuantizeMode mode, Rng* rng = nullptr);
QuantizedLatent quantize_round(const Latent& y);

struct HyperResult {
  QuantizedLatent z_hat;
  EntropyParams params;
  double z_bits = 0.0;
};
HyperResult hyper_roundtrip(const Latent& y, const TeacherModel& model);

/// Entropy parameters predicted from a decoded z (receiver side).
EntropyParams entropy_params_from_z(const QuantizedLatent& z_hat,
                                    const HyperPrior& hyper, int h, int w);
/// Per-channel prior (mu, sigma) of the hyper-latent.
EntropyParams z_prior_params(const HyperPrior& hyper, const Shape& z_shape);

/// Discretized-Gaussian code length with the probability floor.
double rate_gaussian(const QuantizedLatent& y_hat, const EntropyParams& params);
double rate_gaussian(const Tensor& y_hat, const EntropyParams& params);

/// tail(res_blocks(head(y))), cropped to the source size and clamped to [0,1].
ImageTensor decode_full(const Latent& y_hat, const TeacherModel& model);
ImageTensor decode_full(const QuantizedLatent& y_hat, const TeacherModel& model);
/// tail(head(y)): the residual trunk is never evaluated.
ImageTensor decode_without_resblocks(const Latent& y_hat, const TeacherModel& model);
ImageTensor decode_without_resblocks(const QuantizedLatent& y_hat, const TeacherModel& model);

/// Crops a decoded padded tensor back to the source size and clamps it.
ImageTensor finish_image(const Tensor& decoded, int source_height, int source_width);

struct TeacherTrainConfig {
  int steps = 2000;
  int batch = 4;
  int crop = 64;
  double lr = 1e-4;
  double k_M = 1.0;
  double k_p = 1.0;
  double lambda_rate = 0.01;
  std::uint64_t seed = 0;
  /// Computes the rate term on a detached latent (no rate gradient reaches the
  /// analysis transform). Used to check the zero-coefficient contract.
  bool detach_rate = false;
};

struct TrainLogEntry {
  int step = 0;
  double loss = 0.0;
  double bpp = 0.0;
  double mse = 0.0;
  double d_p = 0.0;
};
using TrainLogFn = std::function<void(const TrainLogEntry&)>;

class EmptyDatasetError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Trains a teacher on random crops from `frames` with
/// lambda_rate * bpp + k_M * MSE(x, x_hat) + k_p * d_p(x, x_hat).
TeacherModel train_teacher(const std::vector<ImageTensor>& frames,
                           const CodecConfig& config, const TeacherTrainConfig& train,
                           const metrics::PerceptualMetric& dp,
                           const TrainLogFn& log = {});

/// One differentiable forward pass on a batch (training surrogate).
struct TeacherForward {
  ag::Var x_hat;
  ag::Var y_bits;
  ag::Var z_bits;
};
TeacherForward teacher_forward(const TeacherModel& model, const ag::Var& x, Rng& noise,
                               bool detach_rate = false);

}  // namespace mdc
