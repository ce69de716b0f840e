#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mdc/bitstream.hpp"
#include "mdc/codec_core.hpp"
#include "mdc/metrics.hpp"
#include "mdc/micro_rn.hpp"

namespace mdc {

struct Subset {
  std::string id;
  std::vector<ImageTensor> frames;
  int source_stride = 1;
};

/// Frames 0, stride, 2*stride, ... Throws std::invalid_argument for stride < 1
/// or an empty input.
Subset make_subset(const std::vector<ImageTensor>& frames, int stride = 10,
                   const std::string& id = "subset");

struct DistillConfig {
  double k_M = 1.0;
  double k_p = 1.0;
  int steps = 2000;
  int crop = 256;
  double lr = 1e-4;
  int batch = 4;
  std::uint64_t seed = 0;

  void validate() const;
};

/// k_M * MSE(x_tilde, x_hat) + k_p * d_p(x_hat, x)
double kd_loss(const ImageTensor& x, const ImageTensor& x_tilde, const ImageTensor& x_hat,
               double k_M, double k_p,
               const metrics::PerceptualMetric& dp = *metrics::default_perceptual());
ag::Var kd_loss(const ag::Var& x, const ag::Var& x_tilde, const ag::Var& x_hat, double k_M,
                double k_p, const metrics::PerceptualMetric& dp);

struct DistillLogEntry {
  int step = 0;
  double mse_t = 0.0;
  double d_p = 0.0;
  double total = 0.0;
};
using DistillLogFn = std::function<void(const DistillLogEntry&)>;
/// "step=<n> mse_t=<v> dp=<v> total=<v>"
std::string format_log(const DistillLogEntry& entry);

/// Trains a Micro-RN between the frozen teacher's head and tail so that the
/// student output matches the teacher's decode of every subset frame.
/// Only the Micro-RN is updated; the result is packed at 32-bit precision.
WeightBundle distill(const TeacherModel& teacher, const Subset& subset,
                     const MicroRNConfig& rn_config, const DistillConfig& cfg,
                     const metrics::PerceptualMetric& dp = *metrics::default_perceptual(),
                     const DistillLogFn& log = {});

struct FrameEval {
  double mse_to_teacher = 0.0;  // student vs teacher output
  double psnr_to_teacher = 0.0;
  double psnr = 0.0;  // student vs ground truth
  double d_p = 0.0;   // student vs ground truth
  double ms_ssim = 0.0;
  double kd_loss = 0.0;
  // Trunk-skipped decoder, for reference.
  double coarse_mse_to_teacher = 0.0;
  double coarse_psnr_to_teacher = 0.0;
  double coarse_kd_loss = 0.0;
};

struct StudentEval {
  std::vector<FrameEval> frames;
  FrameEval mean;
};

StudentEval evaluate_student(const TeacherModel& teacher, const MicroRN& rn,
                             const std::vector<ImageTensor>& frames, double k_M = 1.0,
                             double k_p = 1.0,
                             const metrics::PerceptualMetric& dp = *metrics::default_perceptual());
StudentEval evaluate_student(const TeacherModel& teacher, const WeightBundle& bundle,
                             const std::vector<ImageTensor>& frames, double k_M = 1.0,
                             double k_p = 1.0,
                             const metrics::PerceptualMetric& dp = *metrics::default_perceptual());

}  // namespace mdc
