#pragma once

// Latent-residual video codec. P-frames are predicted by warping the previous
// reconstruction with a coded flow field and refining it with a small
// motion-compensation network; the image encoder maps the prediction to a
// latent and only the rounded latent difference is coded.

#include <array>
#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "mdc/bitstream.hpp"
#include "mdc/codec_core.hpp"
#include "mdc/image_codec.hpp"
#include "mdc/metrics.hpp"
#include "mdc/micro_rn.hpp"

namespace mdc {

/// Dense displacement field, 1x2xHxW: channel 0 = dy, channel 1 = dx (pixels).
using FlowField = Tensor;

struct VideoConfig {
  int flow_channels = 32;
  int flow_latent_channels = 16;
  int flow_hyper_channels = 16;
  int mc_channels = 32;
  int residual_hyper_channels = 32;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const VideoConfig&) const = default;
};

/// Three-level coarse-to-fine flow estimator. Each level warps the reference
/// with the upsampled coarser flow and predicts a correction.
class FlowEstimator {
 public:
  FlowEstimator() = default;
  FlowEstimator(int width, Rng& rng);
  /// Inputs Nx3xHxW with H, W divisible by 4; returns Nx2xHxW.
  ag::Var operator()(const ag::Var& x_next, const ag::Var& x_prev) const;
  void collect(ParamList& out, const std::string& prefix) const;

  static constexpr int kLevels = 3;

 private:
  struct Level {
    nn::Conv2d c0, c1, c2, c3;
  };
  std::vector<Level> levels_;
};

/// Hyperprior autoencoder for flow fields (four stride-2 stages each way).
class FlowCodec {
 public:
  FlowCodec() = default;
  FlowCodec(const VideoConfig& config, Rng& rng);

  ag::Var analysis(const ag::Var& flow) const;
  ag::Var synthesis(const ag::Var& w_hat) const;
  const HyperPrior& hyper() const { return hyper_; }
  void collect(ParamList& out, const std::string& prefix) const;

 private:
  std::vector<nn::Conv2d> enc_;
  std::vector<nn::ConvTranspose2d> dec_;
  HyperPrior hyper_;
};

/// Six 3x3 conv layers over [x_prev_hat, x_warp, f_hat]; output is added to
/// x_warp. The last layer starts at zero.
class MotionCompensation {
 public:
  MotionCompensation() = default;
  MotionCompensation(int width, Rng& rng);
  ag::Var operator()(const ag::Var& x_prev, const ag::Var& x_warp, const ag::Var& flow) const;
  void collect(ParamList& out, const std::string& prefix) const;

 private:
  std::vector<nn::Conv2d> layers_;
};

enum class DecoderChoice { teacher, student };

class VideoModel {
 public:
  VideoModel(std::shared_ptr<const TeacherModel> teacher, const VideoConfig& config);

  /// Deep copy of the video-side parameters; the teacher is shared.
  VideoModel clone() const;

  const TeacherModel& teacher() const { return *teacher_; }
  std::shared_ptr<const TeacherModel> teacher_ptr() const { return teacher_; }
  const VideoConfig& config() const { return config_; }
  const FlowEstimator& flow_estimator() const { return flow_; }
  const FlowCodec& flow_codec() const { return flow_codec_; }
  const MotionCompensation& motion_compensation() const { return mc_; }
  const HyperPrior& residual_hyper() const { return residual_hyper_; }

  ParamList flow_estimator_params() const;
  ParamList flow_codec_params() const;
  ParamList mc_params() const;
  ParamList residual_hyper_params() const;
  /// Video-side parameters in checkpoint order.
  ParamList params() const;
  /// Hash of teacher and video parameters; stored in bitstreams.
  std::uint64_t id() const;

  /// Number of weight bundles unpacked by decode_gop.
  std::size_t bundle_loads() const { return bundle_loads_->load(); }
  void count_bundle_load() const { bundle_loads_->fetch_add(1); }

 private:
  std::shared_ptr<const TeacherModel> teacher_;
  VideoConfig config_;
  FlowEstimator flow_;
  FlowCodec flow_codec_;
  MotionCompensation mc_;
  HyperPrior residual_hyper_;
  std::shared_ptr<std::atomic<std::size_t>> bundle_loads_;
};

// ---------------------------------------------------------------------------
// Frame-prediction building blocks (inference, single frames)

/// Throws ShapeError on mismatched sizes or sizes not divisible by 4.
FlowField estimate_flow(const ImageTensor& x_next, const ImageTensor& x_prev_hat,
                        const VideoModel& model);
/// Bilinear sampling at (i + dy, j + dx), border-clamped.
ImageTensor warp(const ImageTensor& x, const FlowField& f);

struct FlowCodecResult {
  QuantizedLatent w_hat;
  FlowField f_hat;
  double w_bits = 0.0;  // latent plus hyper-latent
};
/// Flow dims must be multiples of 16.
FlowCodecResult flow_codec(const FlowField& f, const VideoModel& model);

ImageTensor motion_compensate(const ImageTensor& x_prev_hat, const ImageTensor& x_warp,
                              const FlowField& f_hat, const VideoModel& model);

/// r = y_next - y_pred
Latent latent_residual(const Latent& y_next, const Latent& y_pred);
/// y_hat = r_hat + y_pred
Latent reconstruct_latent(const QuantizedLatent& r_hat, const Latent& y_pred);
Latent reconstruct_latent(const Latent& r_hat, const Latent& y_pred);

/// Exhaustive block matching (block x block tiles, +-radius integer search,
/// SAD). Test oracle only: returns the flow that warp() needs to map x_prev
/// onto x_next.
FlowField block_matching_flow(const ImageTensor& x_next, const ImageTensor& x_prev,
                              int block = 8, int radius = 4);

// ---------------------------------------------------------------------------
// Training objectives. Rates are bits per source pixel.

ag::Var loss_warp(const ag::Var& x_next, const ag::Var& x_warp_hat, const ag::Var& w_bpp,
                  double lambda_w);
ag::Var loss_mc(const ag::Var& x_next, const ag::Var& x_pred, const ag::Var& y_next,
                const ag::Var& y_pred, const ag::Var& w_bpp, double lambda_w, double k_M);
ag::Var loss_step(const ag::Var& x_next, const ag::Var& x_tilde_next, const ag::Var& x_hat_next,
                  const ag::Var& w_bpp, const ag::Var& r_bpp, double lambda_w, double k_M,
                  double k_p, const metrics::PerceptualMetric& dp);

struct RolloutTerm {
  ag::Var x;
  ag::Var x_tilde;
  ag::Var x_hat;
  ag::Var w_bpp;
  ag::Var r_bpp;
};
ag::Var loss_final(const std::vector<RolloutTerm>& terms, double lambda, double k_M, double k_p,
                   const metrics::PerceptualMetric& dp);

/// Differentiable P-frame pass on a batch (reference and target Nx3xHxW,
/// H and W multiples of the downsample factor). Stages after `depth` are
/// skipped: 1 = warp, 2 = prediction, 3 = full reconstruction.
struct PFrameForward {
  ag::Var flow;
  ag::Var w_bpp;
  ag::Var f_hat;
  ag::Var x_warp;
  ag::Var x_pred;
  ag::Var y_next;
  ag::Var y_pred;
  ag::Var r_bpp;
  ag::Var x_hat;
};
PFrameForward pframe_forward(const VideoModel& model, const ag::Var& x_prev_hat,
                             const ag::Var& x_next, Rng& noise, int depth = 3);

struct VideoTrainConfig {
  std::array<int, 4> phase_steps{2000, 1000, 3000, 1000};
  int rollout = 3;  // N in the final phase
  int batch = 4;
  int crop = 64;
  double lr = 1e-4;
  double lambda_w = 0.01;
  double lambda = 0.01;  // final phase
  double k_M = 1.0;
  double k_p = 1.0;
  std::uint64_t seed = 0;
};

struct VideoLogEntry {
  int phase = 0;
  int step = 0;
  double loss = 0.0;
  double w_bpp = 0.0;
  double r_bpp = 0.0;
  double mse = 0.0;
};
using VideoLogFn = std::function<void(const VideoLogEntry&)>;

/// Teacher reconstructions of every frame, the P-frame targets.
struct TrainingSequence {
  std::vector<ImageTensor> frames;
  std::vector<ImageTensor> teacher_recon;
};
std::vector<TrainingSequence> prepare_training(const std::vector<std::vector<ImageTensor>>& seqs,
                                               const TeacherModel& teacher);

/// Runs one phase (1..4) in place. Trainable sets: 1 flow estimator + flow
/// codec, 2 motion compensation, 3 and 4 everything except the frozen image
/// encoder, its entropy model and the decoder.
void train_phase(VideoModel& model, int phase, const std::vector<TrainingSequence>& data,
                 const VideoTrainConfig& cfg,
                 const metrics::PerceptualMetric& dp = *metrics::default_perceptual(),
                 const VideoLogFn& log = {});

/// Builds a model and runs the four phases in order.
VideoModel train_video(const std::vector<std::vector<ImageTensor>>& sequences,
                       std::shared_ptr<const TeacherModel> teacher, const VideoConfig& config,
                       const VideoTrainConfig& cfg,
                       const metrics::PerceptualMetric& dp = *metrics::default_perceptual(),
                       const VideoLogFn& log = {});

// ---------------------------------------------------------------------------
// GOP coding

/// Number of coded pictures per GOP section for `frames` frames.
std::vector<int> gop_sizes(int frames, int gop);

struct EncodeOptions {
  int gop = 10;
  /// Embedded in the bitstream; the receiver decodes with the student.
  std::optional<WeightBundle> bundle;
};

/// Codes frames closed-loop. If `recon` is given it receives the encoder-side
/// reconstructions (what a decoder must reproduce).
GOPBitstream encode_gop(const std::vector<ImageTensor>& frames, const VideoModel& model,
                        const EncodeOptions& options,
                        std::vector<ImageTensor>* recon = nullptr);

/// Decodes every frame. The decoder is the student from `bundle` if given,
/// else from the embedded bundle, else the teacher; `force_teacher` ignores
/// any bundle. Throws FormatError for a model-id mismatch, ConfigMismatchError
/// for an incompatible bundle.
std::vector<ImageTensor> decode_gop(const GOPBitstream& bs, const VideoModel& model,
                                    const WeightBundle* bundle = nullptr,
                                    bool force_teacher = false);

/// Every frame as an I-frame (baseline).
GOPBitstream encode_all_intra(const std::vector<ImageTensor>& frames, const VideoModel& model,
                              std::vector<ImageTensor>* recon = nullptr);

Bytes serialize_video_model(const VideoModel& model);
/// Checks that the checkpoint was trained against `teacher`.
VideoModel parse_video_model(std::span<const std::uint8_t> bytes,
                             std::shared_ptr<const TeacherModel> teacher);

}  // namespace mdc
