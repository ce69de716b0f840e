#include "mdc/distill.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>

#include "mdc/datasets.hpp"

namespace mdc {

Subset make_subset(const std::vector<ImageTensor>& frames, int stride, const std::string& id) {
  if (stride < 1) throw std::invalid_argument("make_subset: stride must be >= 1");
  if (frames.empty()) throw std::invalid_argument("make_subset: empty selection");
  Subset s;
  s.id = id;
  s.source_stride = stride;
  for (std::size_t i = 0; i < frames.size(); i += static_cast<std::size_t>(stride)) {
    s.frames.push_back(frames[i]);
  }
  return s;
}

void DistillConfig::validate() const {
  if (k_M < 0 || k_p < 0 || k_M + k_p <= 0) {
    throw std::invalid_argument("DistillConfig: k_M, k_p must be >= 0 with k_M + k_p > 0");
  }
  if (steps < 0 || batch < 1 || crop < 1 || !(lr > 0)) {
    throw std::invalid_argument("DistillConfig: steps >= 0, batch >= 1, crop >= 1, lr > 0");
  }
}

ag::Var kd_loss(const ag::Var& x, const ag::Var& x_tilde, const ag::Var& x_hat, double k_M,
                double k_p, const metrics::PerceptualMetric& dp) {
  require_same_shape(x->shape(), x_tilde->shape(), "kd_loss(x, x_tilde)");
  require_same_shape(x->shape(), x_hat->shape(), "kd_loss(x, x_hat)");
  std::vector<ag::Var> terms;
  if (k_M != 0.0) terms.push_back(ag::scale(ag::mse(x_tilde, x_hat), static_cast<float>(k_M)));
  if (k_p != 0.0) terms.push_back(ag::scale(dp.distance(x_hat, x), static_cast<float>(k_p)));
  if (terms.empty()) return ag::constant(Tensor({1, 1, 1, 1}));
  return ag::sum_all(terms);
}

double kd_loss(const ImageTensor& x, const ImageTensor& x_tilde, const ImageTensor& x_hat,
               double k_M, double k_p, const metrics::PerceptualMetric& dp) {
  require_same_shape(x.data.shape(), x_tilde.data.shape(), "kd_loss(x, x_tilde)");
  require_same_shape(x.data.shape(), x_hat.data.shape(), "kd_loss(x, x_hat)");
  double loss = 0.0;
  if (k_M != 0.0) loss += k_M * metrics::mse(x_tilde.data, x_hat.data);
  if (k_p != 0.0) loss += k_p * dp(x_hat, x);
  return loss;
}

std::string format_log(const DistillLogEntry& e) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "step=%d mse_t=%.6g dp=%.6g total=%.6g", e.step, e.mse_t,
                e.d_p, e.total);
  return buf;
}

namespace {

void check_width(const TeacherModel& teacher, const MicroRNConfig& rn) {
  if (rn.io_channels != teacher.config().trunk_channels) {
    throw ConfigMismatchError("Micro-RN io width " + std::to_string(rn.io_channels) +
                              " != teacher trunk width " +
                              std::to_string(teacher.config().trunk_channels));
  }
}

/// Restores the requires_grad flags of a parameter list on scope exit.
class FreezeGuard {
 public:
  explicit FreezeGuard(ParamList params) : params_(std::move(params)) {
    for (const auto& p : params_) flags_.push_back(p.var->requires_grad);
    set_trainable(params_, false);
  }
  ~FreezeGuard() {
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i].var->requires_grad = flags_[i];
  }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  ParamList params_;
  std::vector<bool> flags_;
};

// Per-frame tensors the student loop needs; the teacher never runs inside it.
struct FrameCache {
  Tensor x;        // padded ground truth
  Tensor target;   // teacher decode, clamped
  Tensor feature;  // head output
};

}  // namespace

WeightBundle distill(const TeacherModel& teacher, const Subset& subset,
                     const MicroRNConfig& rn_config, const DistillConfig& cfg,
                     const metrics::PerceptualMetric& dp, const DistillLogFn& log) {
  cfg.validate();
  rn_config.validate();
  check_width(teacher, rn_config);
  if (subset.frames.empty()) throw std::invalid_argument("distill: empty subset");
  const int h = subset.frames.front().height();
  const int w = subset.frames.front().width();
  for (const auto& f : subset.frames) {
    if (f.height() != h || f.width() != w) {
      throw std::invalid_argument("distill: subset frames must share dimensions");
    }
  }
  const int s = teacher.config().downsample_factor;
  if (cfg.crop > h || cfg.crop > w) {
    throw std::invalid_argument("distill: crop " + std::to_string(cfg.crop) +
                                " exceeds frame size " + std::to_string(h) + "x" +
                                std::to_string(w));
  }
  if (cfg.crop % s != 0) {
    throw std::invalid_argument("distill: crop must be a multiple of the downsample factor " +
                                std::to_string(s));
  }

  std::vector<FrameCache> cache;
  {
    ag::NoGradGuard no_grad;
    for (const auto& frame : subset.frames) {
      const Latent y = quantize(encode(frame, teacher), QuantizeMode::round);
      FrameCache c;
      c.x = reflect_pad_to_multiple(frame.data, s);
      const ag::Var f = teacher.head(ag::constant(y.data));
      c.feature = f->value;
      c.target = teacher.tail(teacher.res_blocks(f))->value;
      clamp01(c.target);
      cache.push_back(std::move(c));
    }
  }

  FreezeGuard freeze(teacher.params());
  MicroRN rn(rn_config, cfg.seed);
  Adam opt(rn.params(), AdamConfig{.lr = cfg.lr});
  Rng rng(cfg.seed * 0x9FB21C651E98DF25ULL + 11);
  const int fc = cfg.crop / s;
  for (int step = 1; step <= cfg.steps; ++step) {
    std::vector<Tensor> xs, targets, feats;
    for (const auto& win : data::sample_crop_windows(static_cast<int>(cache.size()), h, w,
                                                     cfg.crop, s, cfg.batch, rng)) {
      const FrameCache& c = cache[win.frame];
      xs.push_back(c.x.crop(win.top, win.left, cfg.crop, cfg.crop));
      targets.push_back(c.target.crop(win.top, win.left, cfg.crop, cfg.crop));
      feats.push_back(c.feature.crop(win.top / s, win.left / s, fc, fc));
    }
    const ag::Var x = ag::constant(Tensor::stack(xs));
    const ag::Var x_tilde = ag::constant(Tensor::stack(targets));
    const ag::Var x_hat =
        ag::clamp01_ste(teacher.tail(rn(ag::constant(Tensor::stack(feats)))));
    const ag::Var mse_t = ag::mse(x_tilde, x_hat);
    const ag::Var d = dp.distance(x_hat, x);
    std::vector<ag::Var> terms;
    if (cfg.k_M != 0.0) terms.push_back(ag::scale(mse_t, static_cast<float>(cfg.k_M)));
    if (cfg.k_p != 0.0) terms.push_back(ag::scale(d, static_cast<float>(cfg.k_p)));
    const ag::Var total = ag::sum_all(terms);
    opt.zero_grad();
    ag::backward(total);
    opt.step();
    if (log) log({step, ag::scalar(mse_t), ag::scalar(d), ag::scalar(total)});
  }
  opt.zero_grad();
  return pack_weight_bundle(rn, subset.id, Precision::f32);
}

StudentEval evaluate_student(const TeacherModel& teacher, const MicroRN& rn,
                             const std::vector<ImageTensor>& frames, double k_M, double k_p,
                             const metrics::PerceptualMetric& dp) {
  check_width(teacher, rn.config());
  StudentEval out;
  for (const auto& x : frames) {
    const QuantizedLatent y = quantize_round(encode(x, teacher));
    const ImageTensor t = decode_full(y, teacher);
    const ImageTensor st = student_decode(y, teacher, rn);
    const ImageTensor coarse = decode_without_resblocks(y, teacher);
    FrameEval e;
    e.mse_to_teacher = metrics::mse(st.data, t.data);
    e.psnr_to_teacher = metrics::psnr_from_mse(e.mse_to_teacher);
    e.psnr = metrics::psnr(x, st);
    e.d_p = dp(st, x);
    e.ms_ssim = metrics::ms_ssim_scales(x.height(), x.width()) >= 2
                    ? metrics::ms_ssim(x, st)
                    : std::numeric_limits<double>::quiet_NaN();
    e.kd_loss = k_M * e.mse_to_teacher + k_p * e.d_p;
    e.coarse_mse_to_teacher = metrics::mse(coarse.data, t.data);
    e.coarse_psnr_to_teacher = metrics::psnr_from_mse(e.coarse_mse_to_teacher);
    e.coarse_kd_loss = k_M * e.coarse_mse_to_teacher + k_p * dp(coarse, x);
    out.frames.push_back(e);
  }
  const double n = static_cast<double>(out.frames.size());
  if (n > 0) {
    for (const auto& e : out.frames) {
      out.mean.mse_to_teacher += e.mse_to_teacher / n;
      out.mean.psnr += e.psnr / n;
      out.mean.d_p += e.d_p / n;
      out.mean.ms_ssim += e.ms_ssim / n;
      out.mean.kd_loss += e.kd_loss / n;
      out.mean.coarse_mse_to_teacher += e.coarse_mse_to_teacher / n;
      out.mean.coarse_kd_loss += e.coarse_kd_loss / n;
    }
    // PSNR of the mean squared error, so the mean is order-independent and
    // consistent with mse_to_teacher.
    out.mean.psnr_to_teacher = metrics::psnr_from_mse(out.mean.mse_to_teacher);
    out.mean.coarse_psnr_to_teacher = metrics::psnr_from_mse(out.mean.coarse_mse_to_teacher);
  }
  return out;
}

StudentEval evaluate_student(const TeacherModel& teacher, const WeightBundle& bundle,
                             const std::vector<ImageTensor>& frames, double k_M, double k_p,
                             const metrics::PerceptualMetric& dp) {
  return evaluate_student(teacher, unpack_weight_bundle(bundle), frames, k_M, k_p, dp);
}

}  // namespace mdc
