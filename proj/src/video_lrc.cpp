#include "mdc/video_lrc.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "mdc/datasets.hpp"

namespace mdc {

void VideoConfig::validate() const {
  if (flow_channels < 1 || flow_latent_channels < 1 || flow_hyper_channels < 1 ||
      mc_channels < 1 || residual_hyper_channels < 1) {
    throw std::invalid_argument("VideoConfig: channel counts must be >= 1");
  }
}

// ---------------------------------------------------------------------------
// Networks

FlowEstimator::FlowEstimator(int width, Rng& rng) {
  for (int l = 0; l < kLevels; ++l) {
    Level level{nn::Conv2d(8, width, 3, 1, 1, rng), nn::Conv2d(width, width, 3, 1, 1, rng),
                nn::Conv2d(width, width, 3, 1, 1, rng), nn::Conv2d(width, 2, 3, 1, 1, rng)};
    level.c3.zero();
    levels_.push_back(std::move(level));
  }
}

ag::Var FlowEstimator::operator()(const ag::Var& x_next, const ag::Var& x_prev) const {
  require_same_shape(x_next->shape(), x_prev->shape(), "FlowEstimator");
  const Shape s = x_next->shape();
  if (s.h % 4 != 0 || s.w % 4 != 0) {
    throw ShapeError("FlowEstimator: spatial dims must be divisible by 4, got " + s.str());
  }
  std::vector<ag::Var> next{x_next}, prev{x_prev};
  for (int l = 1; l < kLevels; ++l) {
    next.push_back(ag::avg_pool2(next.back()));
    prev.push_back(ag::avg_pool2(prev.back()));
  }
  const Shape coarse = next.back()->shape();
  ag::Var flow = ag::constant(Tensor({coarse.n, 2, coarse.h, coarse.w}));
  for (int l = kLevels - 1; l >= 0; --l) {
    if (l != kLevels - 1) flow = ag::scale(ag::upsample_nearest2(flow), 2.0f);
    const ag::Var warped = ag::warp_bilinear(prev[l], flow);
    const ag::Var parts[] = {next[l], warped, flow};
    const Level& lv = levels_[l];
    ag::Var h = nn::lrelu(lv.c0(ag::concat_channels(parts)));
    h = nn::lrelu(lv.c1(h));
    h = nn::lrelu(lv.c2(h));
    flow = ag::add(flow, lv.c3(h));
  }
  return flow;
}

void FlowEstimator::collect(ParamList& out, const std::string& prefix) const {
  for (std::size_t l = 0; l < levels_.size(); ++l) {
    const std::string p = prefix + ".level" + std::to_string(l);
    levels_[l].c0.collect(out, p + ".c0");
    levels_[l].c1.collect(out, p + ".c1");
    levels_[l].c2.collect(out, p + ".c2");
    levels_[l].c3.collect(out, p + ".c3");
  }
}

FlowCodec::FlowCodec(const VideoConfig& config, Rng& rng) {
  const int f = config.flow_channels;
  const int c = config.flow_latent_channels;
  enc_.emplace_back(2, f, 3, 2, 1, rng);
  enc_.emplace_back(f, f, 3, 2, 1, rng);
  enc_.emplace_back(f, f, 3, 2, 1, rng);
  enc_.emplace_back(f, c, 3, 2, 1, rng);
  dec_.emplace_back(c, f, rng);
  dec_.emplace_back(f, f, rng);
  dec_.emplace_back(f, f, rng);
  dec_.emplace_back(f, 2, rng);
  hyper_ = HyperPrior(c, config.flow_hyper_channels, rng);
}

ag::Var FlowCodec::analysis(const ag::Var& flow) const {
  ag::Var h = flow;
  for (std::size_t i = 0; i < enc_.size(); ++i) {
    h = enc_[i](h);
    if (i + 1 < enc_.size()) h = nn::lrelu(h);
  }
  return h;
}

ag::Var FlowCodec::synthesis(const ag::Var& w_hat) const {
  ag::Var h = w_hat;
  for (std::size_t i = 0; i < dec_.size(); ++i) {
    h = dec_[i](h);
    if (i + 1 < dec_.size()) h = nn::lrelu(h);
  }
  return h;
}

void FlowCodec::collect(ParamList& out, const std::string& prefix) const {
  for (std::size_t i = 0; i < enc_.size(); ++i)
    enc_[i].collect(out, prefix + ".enc" + std::to_string(i));
  hyper_.collect(out, prefix + ".hyper");
  for (std::size_t i = 0; i < dec_.size(); ++i)
    dec_[i].collect(out, prefix + ".dec" + std::to_string(i));
}

MotionCompensation::MotionCompensation(int width, Rng& rng) {
  layers_.emplace_back(8, width, 3, 1, 1, rng);
  for (int i = 0; i < 4; ++i) layers_.emplace_back(width, width, 3, 1, 1, rng);
  layers_.emplace_back(width, 3, 3, 1, 1, rng);
  layers_.back().zero();
}

ag::Var MotionCompensation::operator()(const ag::Var& x_prev, const ag::Var& x_warp,
                                       const ag::Var& flow) const {
  const ag::Var parts[] = {x_prev, x_warp, flow};
  ag::Var h = ag::concat_channels(parts);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i](h);
    if (i + 1 < layers_.size()) h = nn::lrelu(h);
  }
  return ag::add(x_warp, h);
}

void MotionCompensation::collect(ParamList& out, const std::string& prefix) const {
  for (std::size_t i = 0; i < layers_.size(); ++i)
    layers_[i].collect(out, prefix + ".conv" + std::to_string(i));
}

VideoModel::VideoModel(std::shared_ptr<const TeacherModel> teacher, const VideoConfig& config)
    : teacher_(std::move(teacher)),
      config_(config),
      bundle_loads_(std::make_shared<std::atomic<std::size_t>>(0)) {
  if (!teacher_) throw std::invalid_argument("VideoModel: teacher required");
  config_.validate();
  Rng rng(config_.seed * 0xBF58476D1CE4E5B9ULL + 23);
  flow_ = FlowEstimator(std::max(4, config_.flow_channels / 2), rng);
  flow_codec_ = FlowCodec(config_, rng);
  mc_ = MotionCompensation(config_.mc_channels, rng);
  residual_hyper_ =
      HyperPrior(teacher_->config().latent_channels, config_.residual_hyper_channels, rng);
}

VideoModel VideoModel::clone() const {
  VideoModel copy(teacher_, config_);
  restore(copy.params(), snapshot(params()));
  return copy;
}

ParamList VideoModel::flow_estimator_params() const {
  ParamList out;
  flow_.collect(out, "flow");
  return out;
}

ParamList VideoModel::flow_codec_params() const {
  ParamList out;
  flow_codec_.collect(out, "flow_codec");
  return out;
}

ParamList VideoModel::mc_params() const {
  ParamList out;
  mc_.collect(out, "mc");
  return out;
}

ParamList VideoModel::residual_hyper_params() const {
  ParamList out;
  residual_hyper_.collect(out, "residual_hyper");
  return out;
}

ParamList VideoModel::params() const {
  ParamList out;
  for (const ParamList& part : {flow_estimator_params(), flow_codec_params(), mc_params(),
                                residual_hyper_params()}) {
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

std::uint64_t VideoModel::id() const {
  std::uint64_t h = model_id(*teacher_);
  h ^= hash_params(params()) + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2);
  return h;
}

// ---------------------------------------------------------------------------
// Inference building blocks

namespace {

void check_frame_pair(const ImageTensor& a, const ImageTensor& b, const char* what) {
  require_same_shape(a.data.shape(), b.data.shape(), what);
  if (a.data.shape().n != 1 || a.data.shape().c != 3) {
    throw ShapeError(std::string(what) + ": expected 1x3xHxW, got " + a.data.shape().str());
  }
}

void check_flow(const Tensor& f, const Shape& image, const char* what) {
  const Shape& s = f.shape();
  if (s.n != image.n || s.c != 2 || s.h != image.h || s.w != image.w) {
    throw ShapeError(std::string(what) + ": flow " + s.str() + " does not match image " +
                     image.str());
  }
}

Tensor round_tensor(Tensor t) {
  for (float& v : t.values()) v = std::round(v);
  return t;
}

double hyper_rate(const Tensor& y, const Tensor& y_hat, const HyperPrior& hp) {
  ag::NoGradGuard guard;
  const Tensor z = round_tensor(hp.analysis(ag::constant(y))->value);
  auto [mu, sigma] = hp.synthesis(ag::constant(z), y.h(), y.w());
  return rate_gaussian(y_hat, {mu->value, sigma->value}) +
         rate_gaussian(z, z_prior_params(hp, z.shape()));
}

}  // namespace

FlowField estimate_flow(const ImageTensor& x_next, const ImageTensor& x_prev_hat,
                        const VideoModel& model) {
  check_frame_pair(x_next, x_prev_hat, "estimate_flow");
  ag::NoGradGuard guard;
  return model.flow_estimator()(ag::constant(x_next.data), ag::constant(x_prev_hat.data))->value;
}

ImageTensor warp(const ImageTensor& x, const FlowField& f) {
  check_flow(f, x.data.shape(), "warp");
  ag::NoGradGuard guard;
  return ImageTensor(ag::warp_bilinear(ag::constant(x.data), ag::constant(f))->value);
}

FlowCodecResult flow_codec(const FlowField& f, const VideoModel& model) {
  const Shape& s = f.shape();
  if (s.c != 2 || s.h % 16 != 0 || s.w % 16 != 0) {
    throw ShapeError("flow_codec: expected Nx2xHxW with H, W multiples of 16, got " + s.str());
  }
  ag::NoGradGuard guard;
  const FlowCodec& fc = model.flow_codec();
  const Tensor w = fc.analysis(ag::constant(f))->value;
  const Tensor w_hat = round_tensor(w);
  FlowCodecResult out;
  out.w_hat = QuantizedLatent::from_tensor(w_hat, s.h, s.w);
  out.f_hat = fc.synthesis(ag::constant(w_hat))->value;
  out.w_bits = hyper_rate(w, w_hat, fc.hyper());
  return out;
}

ImageTensor motion_compensate(const ImageTensor& x_prev_hat, const ImageTensor& x_warp,
                              const FlowField& f_hat, const VideoModel& model) {
  check_frame_pair(x_prev_hat, x_warp, "motion_compensate");
  check_flow(f_hat, x_warp.data.shape(), "motion_compensate");
  ag::NoGradGuard guard;
  Tensor out = model.motion_compensation()(ag::constant(x_prev_hat.data),
                                           ag::constant(x_warp.data), ag::constant(f_hat))
                   ->value;
  clamp01(out);
  return ImageTensor(std::move(out));
}

Latent latent_residual(const Latent& y_next, const Latent& y_pred) {
  require_same_shape(y_next.data.shape(), y_pred.data.shape(), "latent_residual");
  Latent r = y_next;
  for (std::size_t i = 0; i < r.data.numel(); ++i) r.data[i] -= y_pred.data[i];
  return r;
}

Latent reconstruct_latent(const Latent& r_hat, const Latent& y_pred) {
  require_same_shape(r_hat.data.shape(), y_pred.data.shape(), "reconstruct_latent");
  Latent y = y_pred;
  for (std::size_t i = 0; i < y.data.numel(); ++i) y.data[i] += r_hat.data[i];
  return y;
}

Latent reconstruct_latent(const QuantizedLatent& r_hat, const Latent& y_pred) {
  return reconstruct_latent(r_hat.to_latent(), y_pred);
}

FlowField block_matching_flow(const ImageTensor& x_next, const ImageTensor& x_prev, int block,
                              int radius) {
  check_frame_pair(x_next, x_prev, "block_matching_flow");
  if (block < 1 || radius < 0) throw std::invalid_argument("block_matching_flow: bad params");
  const int h = x_next.height();
  const int w = x_next.width();
  FlowField flow({1, 2, h, w});
  for (int by = 0; by < h; by += block) {
    for (int bx = 0; bx < w; bx += block) {
      const int ey = std::min(by + block, h);
      const int ex = std::min(bx + block, w);
      double best = std::numeric_limits<double>::infinity();
      int best_dy = 0, best_dx = 0;
      for (int dy = -radius; dy <= radius; ++dy) {
        for (int dx = -radius; dx <= radius; ++dx) {
          double sad = 0.0;
          for (int c = 0; c < 3; ++c)
            for (int i = by; i < ey; ++i)
              for (int j = bx; j < ex; ++j) {
                const int si = std::clamp(i + dy, 0, h - 1);
                const int sj = std::clamp(j + dx, 0, w - 1);
                sad += std::abs(x_next.data.at(0, c, i, j) - x_prev.data.at(0, c, si, sj));
              }
          const bool closer = std::abs(dy) + std::abs(dx) < std::abs(best_dy) + std::abs(best_dx);
          if (sad < best - 1e-12 || (std::abs(sad - best) <= 1e-12 && closer)) {
            best = sad;
            best_dy = dy;
            best_dx = dx;
          }
        }
      }
      for (int i = by; i < ey; ++i)
        for (int j = bx; j < ex; ++j) {
          flow.at(0, 0, i, j) = static_cast<float>(best_dy);
          flow.at(0, 1, i, j) = static_cast<float>(best_dx);
        }
    }
  }
  return flow;
}

// ---------------------------------------------------------------------------
// Objectives

namespace {

ag::Var weighted_sum(std::vector<std::pair<double, ag::Var>> terms) {
  std::vector<ag::Var> parts;
  for (auto& [k, v] : terms) {
    if (k != 0.0) parts.push_back(ag::scale(v, static_cast<float>(k)));
  }
  if (parts.empty()) return ag::constant(Tensor({1, 1, 1, 1}));
  return ag::sum_all(parts);
}

}  // namespace

ag::Var loss_warp(const ag::Var& x_next, const ag::Var& x_warp_hat, const ag::Var& w_bpp,
                  double lambda_w) {
  return weighted_sum({{lambda_w, w_bpp}, {1.0, ag::mse(x_next, x_warp_hat)}});
}

ag::Var loss_mc(const ag::Var& x_next, const ag::Var& x_pred, const ag::Var& y_next,
                const ag::Var& y_pred, const ag::Var& w_bpp, double lambda_w, double k_M) {
  std::vector<std::pair<double, ag::Var>> terms{{lambda_w, w_bpp}};
  if (k_M != 0.0) {
    terms.emplace_back(k_M, ag::mse(x_next, x_pred));
    terms.emplace_back(k_M, ag::l1(y_next, y_pred));
  }
  return weighted_sum(std::move(terms));
}

ag::Var loss_step(const ag::Var& x_next, const ag::Var& x_tilde_next, const ag::Var& x_hat_next,
                  const ag::Var& w_bpp, const ag::Var& r_bpp, double lambda_w, double k_M,
                  double k_p, const metrics::PerceptualMetric& dp) {
  std::vector<std::pair<double, ag::Var>> terms{{lambda_w, w_bpp}, {lambda_w, r_bpp}};
  if (k_M != 0.0) terms.emplace_back(k_M, ag::mse(x_tilde_next, x_hat_next));
  if (k_p != 0.0) terms.emplace_back(k_p, dp.distance(x_next, x_hat_next));
  return weighted_sum(std::move(terms));
}

ag::Var loss_final(const std::vector<RolloutTerm>& terms, double lambda, double k_M, double k_p,
                   const metrics::PerceptualMetric& dp) {
  std::vector<std::pair<double, ag::Var>> parts;
  for (const auto& t : terms) {
    parts.emplace_back(lambda, t.w_bpp);
    parts.emplace_back(lambda, t.r_bpp);
    if (k_M != 0.0) parts.emplace_back(k_M, ag::mse(t.x_tilde, t.x_hat));
    if (k_p != 0.0) parts.emplace_back(k_p, dp.distance(t.x, t.x_hat));
  }
  return weighted_sum(std::move(parts));
}

namespace {

ag::Var noisy(const ag::Var& v, Rng& noise) {
  Tensor u(v->shape());
  for (float& x : u.values()) x = static_cast<float>(noise.uniform() - 0.5);
  return ag::add(v, ag::constant(std::move(u)));
}

}  // namespace

PFrameForward pframe_forward(const VideoModel& model, const ag::Var& x_prev_hat,
                             const ag::Var& x_next, Rng& noise, int depth) {
  require_same_shape(x_prev_hat->shape(), x_next->shape(), "pframe_forward");
  const Shape s = x_next->shape();
  const float pixels = static_cast<float>(s.n) * s.h * s.w;
  const TeacherModel& teacher = model.teacher();
  const FlowCodec& fc = model.flow_codec();
  PFrameForward out;
  out.flow = model.flow_estimator()(x_next, x_prev_hat);
  const ag::Var w = fc.analysis(out.flow);
  const HyperPrior::Output wh = fc.hyper().forward(w, &noise);
  const ag::Var w_bits = ag::add(
      ag::gaussian_bits(noisy(w, noise), wh.mu, wh.sigma, kProbabilityFloor), wh.z_bits);
  out.w_bpp = ag::scale(w_bits, 1.0f / pixels);
  out.f_hat = fc.synthesis(ag::ste_round(w));
  out.x_warp = ag::warp_bilinear(x_prev_hat, out.f_hat);
  if (depth <= 1) return out;

  out.x_pred = ag::clamp01_ste(model.motion_compensation()(x_prev_hat, out.x_warp, out.f_hat));
  out.y_next = teacher.analysis(x_next);
  out.y_pred = teacher.analysis(out.x_pred);
  if (depth <= 2) return out;

  const ag::Var r = ag::sub(out.y_next, out.y_pred);
  const HyperPrior::Output rh = model.residual_hyper().forward(r, &noise);
  const ag::Var r_bits = ag::add(
      ag::gaussian_bits(noisy(r, noise), rh.mu, rh.sigma, kProbabilityFloor), rh.z_bits);
  out.r_bpp = ag::scale(r_bits, 1.0f / pixels);
  const ag::Var y_hat = ag::add(out.y_pred, ag::ste_round(r));
  out.x_hat = ag::clamp01_ste(teacher.tail(teacher.res_blocks(teacher.head(y_hat))));
  return out;
}

// ---------------------------------------------------------------------------
// Training

std::vector<TrainingSequence> prepare_training(const std::vector<std::vector<ImageTensor>>& seqs,
                                               const TeacherModel& teacher) {
  std::vector<TrainingSequence> out;
  for (const auto& frames : seqs) {
    TrainingSequence ts;
    ts.frames = frames;
    for (const auto& f : frames) {
      ts.teacher_recon.push_back(decode_full(quantize_round(encode(f, teacher)), teacher));
    }
    out.push_back(std::move(ts));
  }
  return out;
}

namespace {

class TrainableScope {
 public:
  TrainableScope(const VideoModel& model, const ParamList& trainable) {
    all_ = model.params();
    const ParamList teacher = model.teacher().params();
    all_.insert(all_.end(), teacher.begin(), teacher.end());
    for (const auto& p : all_) flags_.push_back(p.var->requires_grad);
    set_trainable(all_, false);
    set_trainable(trainable, true);
  }
  ~TrainableScope() {
    for (std::size_t i = 0; i < all_.size(); ++i) all_[i].var->requires_grad = flags_[i];
  }
  TrainableScope(const TrainableScope&) = delete;
  TrainableScope& operator=(const TrainableScope&) = delete;

 private:
  ParamList all_;
  std::vector<bool> flags_;
};

ParamList phase_params(const VideoModel& model, int phase) {
  ParamList out;
  auto add = [&out](const ParamList& p) { out.insert(out.end(), p.begin(), p.end()); };
  switch (phase) {
    case 1:
      add(model.flow_estimator_params());
      add(model.flow_codec_params());
      break;
    case 2:
      add(model.mc_params());
      break;
    case 3:
    case 4:
      add(model.flow_estimator_params());
      add(model.flow_codec_params());
      add(model.mc_params());
      add(model.residual_hyper_params());
      break;
    default:
      throw std::invalid_argument("train_phase: phase must be 1..4");
  }
  return out;
}

struct Clip {
  std::vector<Tensor> frames;  // x_t0 .. x_t0+len-1, cropped
  std::vector<Tensor> recon;
};

}  // namespace

void train_phase(VideoModel& model, int phase, const std::vector<TrainingSequence>& data,
                 const VideoTrainConfig& cfg, const metrics::PerceptualMetric& dp,
                 const VideoLogFn& log) {
  const ParamList trainable = phase_params(model, phase);
  const int steps = cfg.phase_steps[phase - 1];
  if (steps <= 0) return;
  const int span = phase == 4 ? cfg.rollout + 1 : 2;
  if (cfg.rollout < 1 || cfg.batch < 1) {
    throw std::invalid_argument("train_phase: rollout and batch must be >= 1");
  }
  std::vector<std::size_t> usable;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (static_cast<int>(data[i].frames.size()) >= span) usable.push_back(i);
  }
  if (usable.empty()) {
    throw std::invalid_argument("train_phase: no sequence has " + std::to_string(span) +
                                " frames");
  }
  const int s = std::max(16, model.teacher().config().downsample_factor);
  if (cfg.crop % s != 0) {
    throw std::invalid_argument("train_phase: crop must be a multiple of " + std::to_string(s));
  }

  TrainableScope scope(model, trainable);
  Adam opt(trainable, AdamConfig{.lr = cfg.lr});
  Rng rng(cfg.seed * 0x94D049BB133111EBULL + static_cast<std::uint64_t>(phase));
  Rng noise = rng.fork();

  for (int step = 1; step <= steps; ++step) {
    // Batch of clips: `span` consecutive frames from one sequence, one crop.
    std::vector<Clip> clips;
    for (int b = 0; b < cfg.batch; ++b) {
      const TrainingSequence& seq = data[usable[rng.below(static_cast<int>(usable.size()))]];
      const int n = static_cast<int>(seq.frames.size());
      const int t0 = rng.below(n - span + 1);
      const auto win = data::sample_crop_windows(1, seq.frames[0].height(),
                                                 seq.frames[0].width(), cfg.crop, 1, 1, rng)
                           .front();
      Clip clip;
      for (int k = 0; k < span; ++k) {
        clip.frames.push_back(seq.frames[t0 + k].data.crop(win.top, win.left, cfg.crop, cfg.crop));
        clip.recon.push_back(
            seq.teacher_recon[t0 + k].data.crop(win.top, win.left, cfg.crop, cfg.crop));
      }
      clips.push_back(std::move(clip));
    }
    auto stacked = [&clips](bool recon, int k) {
      std::vector<Tensor> parts;
      for (const auto& c : clips) parts.push_back(recon ? c.recon[k] : c.frames[k]);
      return ag::constant(Tensor::stack(parts));
    };

    VideoLogEntry entry;
    entry.phase = phase;
    entry.step = step;
    ag::Var loss;
    if (phase < 4) {
      const ag::Var ref = stacked(true, 0);
      const ag::Var x = stacked(false, 1);
      const PFrameForward fw = pframe_forward(model, ref, x, noise, phase);
      entry.w_bpp = ag::scalar(fw.w_bpp);
      if (phase == 1) {
        loss = loss_warp(x, fw.x_warp, fw.w_bpp, cfg.lambda_w);
        entry.mse = ag::scalar(ag::mse(x, fw.x_warp));
      } else if (phase == 2) {
        loss = loss_mc(x, fw.x_pred, fw.y_next, fw.y_pred, fw.w_bpp, cfg.lambda_w, cfg.k_M);
        entry.mse = ag::scalar(ag::mse(x, fw.x_pred));
      } else {
        loss = loss_step(x, stacked(true, 1), fw.x_hat, fw.w_bpp, fw.r_bpp, cfg.lambda_w,
                         cfg.k_M, cfg.k_p, dp);
        entry.r_bpp = ag::scalar(fw.r_bpp);
        entry.mse = ag::scalar(ag::mse(x, fw.x_hat));
      }
    } else {
      std::vector<RolloutTerm> terms;
      ag::Var ref = stacked(true, 0);
      for (int k = 1; k < span; ++k) {
        const ag::Var x = stacked(false, k);
        const PFrameForward fw = pframe_forward(model, ref, x, noise, 3);
        terms.push_back({x, stacked(true, k), fw.x_hat, fw.w_bpp, fw.r_bpp});
        entry.w_bpp += ag::scalar(fw.w_bpp) / cfg.rollout;
        entry.r_bpp += ag::scalar(fw.r_bpp) / cfg.rollout;
        entry.mse += ag::scalar(ag::mse(x, fw.x_hat)) / cfg.rollout;
        ref = fw.x_hat;
      }
      loss = loss_final(terms, cfg.lambda, cfg.k_M, cfg.k_p, dp);
    }
    entry.loss = ag::scalar(loss);
    opt.zero_grad();
    ag::backward(loss);
    opt.step();
    if (log) log(entry);
  }
  opt.zero_grad();
}

VideoModel train_video(const std::vector<std::vector<ImageTensor>>& sequences,
                       std::shared_ptr<const TeacherModel> teacher, const VideoConfig& config,
                       const VideoTrainConfig& cfg, const metrics::PerceptualMetric& dp,
                       const VideoLogFn& log) {
  VideoModel model(teacher, config);
  const auto data = prepare_training(sequences, *teacher);
  for (int phase = 1; phase <= 4; ++phase) train_phase(model, phase, data, cfg, dp, log);
  return model;
}

// ---------------------------------------------------------------------------
// GOP coding

std::vector<int> gop_sizes(int frames, int gop) {
  if (frames < 0 || gop < 0) throw std::invalid_argument("gop_sizes: negative argument");
  std::vector<int> out;
  for (int left = frames; left > 0;) {
    const int n = std::min(gop + 1, left);
    out.push_back(n);
    left -= n;
  }
  return out;
}

namespace {

int pad_multiple(const VideoModel& model) {
  return std::max(16, model.teacher().config().downsample_factor);
}

struct Prediction {
  Tensor x_pred;
  Tensor y_pred;
};

// Shared by encoder and decoder so both sides compute identical references.
Prediction predict(const VideoModel& model, const Tensor& ref, const Tensor& w_hat) {
  ag::NoGradGuard guard;
  const ag::Var r = ag::constant(ref);
  const ag::Var f_hat = model.flow_codec().synthesis(ag::constant(w_hat));
  const ag::Var x_warp = ag::warp_bilinear(r, f_hat);
  Tensor x_pred = model.motion_compensation()(r, x_warp, f_hat)->value;
  clamp01(x_pred);
  Prediction p;
  p.y_pred = model.teacher().analysis(ag::constant(x_pred))->value;
  p.x_pred = std::move(x_pred);
  return p;
}

Tensor add_tensors(const Tensor& a, const Tensor& b) {
  Tensor out = a;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b[i];
  return out;
}

std::optional<MicroRN> load_student(const WeightBundle* bundle, const TeacherModel& teacher) {
  if (!bundle) return std::nullopt;
  if (bundle->rn_config.io_channels != teacher.config().trunk_channels) {
    throw ConfigMismatchError("weight bundle width " +
                              std::to_string(bundle->rn_config.io_channels) +
                              " does not match teacher trunk width " +
                              std::to_string(teacher.config().trunk_channels));
  }
  return unpack_weight_bundle(*bundle);
}

void check_frames(const std::vector<ImageTensor>& frames, int factor) {
  if (frames.empty()) throw std::invalid_argument("encode_gop: no frames");
  const Shape& s = frames.front().data.shape();
  for (const auto& f : frames) {
    if (!(f.data.shape() == s)) throw ShapeError("encode_gop: frames must share dimensions");
  }
  if (s.h < factor || s.w < factor) {
    throw DimensionError("encode_gop: frames smaller than downsample factor");
  }
}

}  // namespace

GOPBitstream encode_gop(const std::vector<ImageTensor>& frames, const VideoModel& model,
                        const EncodeOptions& options, std::vector<ImageTensor>* recon) {
  const TeacherModel& teacher = model.teacher();
  check_frames(frames, teacher.config().downsample_factor);
  const std::optional<MicroRN> rn =
      load_student(options.bundle ? &*options.bundle : nullptr, teacher);
  const MicroRN* student = rn ? &*rn : nullptr;
  const int h = frames.front().height();
  const int w = frames.front().width();
  const int m = pad_multiple(model);

  GOPBitstream bs;
  bs.width = static_cast<std::uint32_t>(w);
  bs.height = static_cast<std::uint32_t>(h);
  bs.frames = static_cast<std::uint32_t>(frames.size());
  bs.gop = static_cast<std::uint32_t>(options.gop);
  bs.model_id = model.id();
  bs.bundle = options.bundle;
  if (recon) recon->clear();

  ag::NoGradGuard guard;
  std::size_t t = 0;
  for (int size : gop_sizes(static_cast<int>(frames.size()), options.gop)) {
    GOPSection section;
    Tensor x = reflect_pad_to_multiple(frames[t].data, m);
    const Tensor y = teacher.analysis(ag::constant(x))->value;
    const Tensor y_hat = round_tensor(y);
    section.iframe = code_latent(y, y_hat, teacher.hyper());
    Tensor ref = synthesize(y_hat, teacher, student);
    if (recon) recon->push_back(finish_image(ref, h, w));
    ++t;
    for (int k = 1; k < size; ++k, ++t) {
      x = reflect_pad_to_multiple(frames[t].data, m);
      const ag::Var xv = ag::constant(x);
      PFramePayload p;
      const Tensor flow = model.flow_estimator()(xv, ag::constant(ref))->value;
      const Tensor wv = model.flow_codec().analysis(ag::constant(flow))->value;
      const Tensor w_hat = round_tensor(wv);
      p.flow = code_latent(wv, w_hat, model.flow_codec().hyper());
      const Prediction pred = predict(model, ref, w_hat);
      const Tensor y_next = teacher.analysis(xv)->value;
      Tensor r = y_next;
      for (std::size_t i = 0; i < r.numel(); ++i) r[i] -= pred.y_pred[i];
      const Tensor r_hat = round_tensor(r);
      p.residual = code_latent(r, r_hat, model.residual_hyper());
      ref = synthesize(add_tensors(pred.y_pred, r_hat), teacher, student);
      if (recon) recon->push_back(finish_image(ref, h, w));
      section.pframes.push_back(std::move(p));
    }
    bs.gops.push_back(std::move(section));
  }
  return bs;
}

GOPBitstream encode_all_intra(const std::vector<ImageTensor>& frames, const VideoModel& model,
                              std::vector<ImageTensor>* recon) {
  EncodeOptions options;
  options.gop = 0;
  return encode_gop(frames, model, options, recon);
}

std::vector<ImageTensor> decode_gop(const GOPBitstream& bs, const VideoModel& model,
                                    const WeightBundle* bundle, bool force_teacher) {
  if (bs.model_id != model.id()) {
    throw FormatError("video bitstream was produced by a different model");
  }
  const TeacherModel& teacher = model.teacher();
  const int h = static_cast<int>(bs.height);
  const int w = static_cast<int>(bs.width);
  const int factor = teacher.config().downsample_factor;
  if (h < factor || w < factor) throw FormatError("video bitstream: implausible frame size");
  const auto sizes = gop_sizes(static_cast<int>(bs.frames), static_cast<int>(bs.gop));
  if (sizes.size() != bs.gops.size()) throw FormatError("video bitstream: GOP layout mismatch");
  for (std::size_t g = 0; g < sizes.size(); ++g) {
    if (static_cast<int>(bs.gops[g].pframes.size()) + 1 != sizes[g]) {
      throw FormatError("video bitstream: GOP layout mismatch");
    }
  }

  const WeightBundle* source = nullptr;
  if (!force_teacher) source = bundle ? bundle : (bs.bundle ? &*bs.bundle : nullptr);
  const std::optional<MicroRN> rn = load_student(source, teacher);
  if (rn) model.count_bundle_load();
  const MicroRN* student = rn ? &*rn : nullptr;

  const int m = pad_multiple(model);
  const int hp = (h + m - 1) / m * m;
  const int wp = (w + m - 1) / m * m;
  const Shape y_shape{1, teacher.config().latent_channels, hp / factor, wp / factor};
  const Shape w_shape{1, model.config().flow_latent_channels, hp / 16, wp / 16};

  std::vector<ImageTensor> out;
  for (const auto& section : bs.gops) {
    if (!(section.iframe.y_shape == y_shape)) throw FormatError("I-frame latent shape mismatch");
    Tensor ref = synthesize(decode_latent(section.iframe, teacher.hyper()), teacher, student);
    out.push_back(finish_image(ref, h, w));
    for (const auto& p : section.pframes) {
      if (!(p.flow.y_shape == w_shape) || !(p.residual.y_shape == y_shape)) {
        throw FormatError("P-frame latent shape mismatch");
      }
      const Tensor w_hat = decode_latent(p.flow, model.flow_codec().hyper());
      const Prediction pred = predict(model, ref, w_hat);
      const Tensor r_hat = decode_latent(p.residual, model.residual_hyper());
      ref = synthesize(add_tensors(pred.y_pred, r_hat), teacher, student);
      out.push_back(finish_image(ref, h, w));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

Bytes serialize_video_model(const VideoModel& model) {
  const VideoConfig& c = model.config();
  const std::int64_t header[] = {c.flow_channels,
                                 c.flow_latent_channels,
                                 c.flow_hyper_channels,
                                 c.mc_channels,
                                 c.residual_hyper_channels,
                                 static_cast<std::int64_t>(c.seed),
                                 static_cast<std::int64_t>(model_id(model.teacher()))};
  return serialize_params("MDW1", header, model.params());
}

VideoModel parse_video_model(std::span<const std::uint8_t> bytes,
                             std::shared_ptr<const TeacherModel> teacher) {
  const auto h = peek_param_header("MDW1", bytes);
  if (h.size() != 7) throw FormatError("MDW1: bad header");
  if (static_cast<std::uint64_t>(h[6]) != model_id(*teacher)) {
    throw FormatError("MDW1: video model was trained against a different teacher");
  }
  VideoConfig c;
  c.flow_channels = static_cast<int>(h[0]);
  c.flow_latent_channels = static_cast<int>(h[1]);
  c.flow_hyper_channels = static_cast<int>(h[2]);
  c.mc_channels = static_cast<int>(h[3]);
  c.residual_hyper_channels = static_cast<int>(h[4]);
  c.seed = static_cast<std::uint64_t>(h[5]);
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("MDW1: ") + e.what());
  }
  VideoModel model(std::move(teacher), c);
  parse_params("MDW1", bytes, model.params());
  return model;
}

}  // namespace mdc
