#include "mdc/codec_core.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <stdexcept>

#include "mdc/datasets.hpp"

namespace mdc {

void CodecConfig::validate() const {
  if (latent_channels < 1 || trunk_channels < 1 || hyper_channels < 1 || trunk_blocks < 1) {
    throw std::invalid_argument("CodecConfig: channel counts and trunk_blocks must be >= 1");
  }
  if (downsample_factor < 2 || !std::has_single_bit(static_cast<unsigned>(downsample_factor))) {
    throw std::invalid_argument("CodecConfig: downsample_factor must be a power of two >= 2");
  }
}

int CodecConfig::stages() const {
  return std::countr_zero(static_cast<unsigned>(downsample_factor));
}

std::vector<int> CodecConfig::tail_widths() const {
  const int s = stages();
  std::vector<int> widths{trunk_channels};
  const int floor = std::min(16, trunk_channels);
  for (int i = 1; i < s; ++i) widths.push_back(std::max(floor, trunk_channels >> i));
  widths.push_back(3);
  return widths;
}

Latent QuantizedLatent::to_latent() const {
  Latent out;
  out.data = Tensor(shape);
  for (std::size_t i = 0; i < values.size(); ++i) out.data[i] = static_cast<float>(values[i]);
  out.source_height = source_height;
  out.source_width = source_width;
  return out;
}

QuantizedLatent QuantizedLatent::from_tensor(const Tensor& rounded, int source_height,
                                             int source_width) {
  QuantizedLatent q;
  q.shape = rounded.shape();
  q.values.resize(rounded.numel());
  for (std::size_t i = 0; i < rounded.numel(); ++i) {
    q.values[i] = static_cast<std::int32_t>(std::lround(rounded[i]));
  }
  q.source_height = source_height;
  q.source_width = source_width;
  return q;
}

// ---------------------------------------------------------------------------
// HyperPrior

namespace {

// softplus^-1(1)
constexpr float kUnitScaleRaw = 0.5413249f;

}  // namespace

HyperPrior::HyperPrior(int channels, int hyper_channels, Rng& rng)
    : channels_(channels),
      ha0_(channels, hyper_channels, 3, 1, 1, rng),
      ha1_(hyper_channels, hyper_channels, 3, 2, 1, rng),
      ha2_(hyper_channels, hyper_channels, 3, 2, 1, rng),
      hs0_(hyper_channels, hyper_channels, rng),
      hs1_(hyper_channels, hyper_channels, rng),
      hs2_(hyper_channels, 2 * channels, 3, 1, 1, rng),
      z_mu_(ag::parameter(Tensor({1, hyper_channels, 1, 1}, 0.0f))),
      z_scale_(ag::parameter(Tensor({1, hyper_channels, 1, 1}, kUnitScaleRaw))) {
  // Start from mu = 0, sigma = softplus(raw) ~ 1 for every latent element.
  for (float& v : hs2_.weight->value.values()) v *= 0.1f;
  for (int c = channels; c < 2 * channels; ++c) hs2_.bias->value[c] = kUnitScaleRaw;
}

ag::Var HyperPrior::analysis(const ag::Var& y) const {
  return ha2_(nn::lrelu(ha1_(nn::lrelu(ha0_(y)))));
}

std::pair<ag::Var, ag::Var> HyperPrior::synthesis(const ag::Var& z_hat, int h, int w) const {
  ag::Var p = hs2_(nn::lrelu(hs1_(nn::lrelu(hs0_(z_hat)))));
  p = ag::crop_spatial(p, h, w);
  ag::Var mu = ag::slice_channels(p, 0, channels_);
  ag::Var sigma = ag::clamp_min(ag::softplus(ag::slice_channels(p, channels_, channels_)),
                                static_cast<float>(kSigmaMin));
  return {mu, sigma};
}

std::pair<ag::Var, ag::Var> HyperPrior::z_prior(const Shape& shape) const {
  ag::Var mu = ag::broadcast_channels(z_mu_, shape);
  ag::Var sigma = ag::broadcast_channels(
      ag::clamp_min(ag::softplus(z_scale_), static_cast<float>(kSigmaMin)), shape);
  return {mu, sigma};
}

HyperPrior::Output HyperPrior::forward(const ag::Var& y, Rng* noise) const {
  ag::Var z = analysis(y);
  ag::Var z_hat = ag::ste_round(z);
  ag::Var z_for_rate = z_hat;
  if (noise) {
    Tensor u(z->shape());
    for (float& v : u.values()) v = static_cast<float>(noise->uniform() - 0.5);
    z_for_rate = ag::add(z, ag::constant(std::move(u)));
  }
  auto [zmu, zsigma] = z_prior(z->shape());
  Output out;
  out.z_tilde = z_hat;
  out.z_bits = ag::gaussian_bits(z_for_rate, zmu, zsigma, kProbabilityFloor);
  std::tie(out.mu, out.sigma) = synthesis(z_hat, y->shape().h, y->shape().w);
  return out;
}

void HyperPrior::collect(ParamList& out, const std::string& prefix) const {
  ha0_.collect(out, prefix + ".ha0");
  ha1_.collect(out, prefix + ".ha1");
  ha2_.collect(out, prefix + ".ha2");
  hs0_.collect(out, prefix + ".hs0");
  hs1_.collect(out, prefix + ".hs1");
  hs2_.collect(out, prefix + ".hs2");
  out.push_back({prefix + ".z_mu", z_mu_});
  out.push_back({prefix + ".z_scale", z_scale_});
}

// ---------------------------------------------------------------------------
// TeacherModel

TeacherModel::TeacherModel(const CodecConfig& config)
    : config_(config), trunk_calls_(std::make_unique<std::atomic<std::size_t>>(0)) {
  config_.validate();
  Rng rng(config_.seed * 0x9E3779B97F4A7C15ULL + 17);
  const int stages = config_.stages();
  const int width = std::max(8, config_.trunk_channels / 2);
  int cin = 3;
  for (int i = 0; i < stages; ++i) {
    const int cout = (i + 1 == stages) ? config_.latent_channels : width;
    encoder_.emplace_back(cin, cout, 3, 2, 1, rng);
    cin = cout;
  }
  hyper_ = HyperPrior(config_.latent_channels, config_.hyper_channels, rng);
  head_ = nn::Conv2d(config_.latent_channels, config_.trunk_channels, 3, 1, 1, rng);
  for (int b = 0; b < config_.trunk_blocks; ++b) {
    nn::Conv2d first(config_.trunk_channels, config_.trunk_channels, 3, 1, 1, rng);
    nn::Conv2d second(config_.trunk_channels, config_.trunk_channels, 3, 1, 1, rng);
    for (float& v : second.weight->value.values()) v *= 0.1f;
    trunk_.emplace_back(std::move(first), std::move(second));
  }
  const auto widths = config_.tail_widths();
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    tail_.emplace_back(widths[i], widths[i + 1], rng);
  }
  tail_.back().bias->value.fill(0.5f);
}

TeacherModel TeacherModel::clone() const {
  TeacherModel copy(config_);
  const ParamList src = params();
  const ParamList dst = copy.params();
  for (std::size_t i = 0; i < src.size(); ++i) {
    dst[i].var->value = src[i].var->value;
    dst[i].var->requires_grad = src[i].var->requires_grad;
  }
  return copy;
}

ag::Var TeacherModel::analysis(const ag::Var& x) const {
  ag::Var h = x;
  for (std::size_t i = 0; i < encoder_.size(); ++i) {
    h = encoder_[i](h);
    if (i + 1 < encoder_.size()) h = nn::lrelu(h);
  }
  return h;
}

ag::Var TeacherModel::head(const ag::Var& y) const { return nn::lrelu(head_(y)); }

ag::Var TeacherModel::res_blocks(const ag::Var& f) const {
  trunk_calls_->fetch_add(1, std::memory_order_relaxed);
  ag::Var h = f;
  for (const auto& [first, second] : trunk_) {
    h = ag::add(h, second(nn::lrelu(first(h))));
  }
  return h;
}

ag::Var TeacherModel::tail(const ag::Var& f) const {
  ag::Var h = f;
  for (std::size_t i = 0; i < tail_.size(); ++i) {
    h = tail_[i](h);
    if (i + 1 < tail_.size()) h = nn::lrelu(h);
  }
  return h;
}

ParamList TeacherModel::encoder_params() const {
  ParamList out;
  for (std::size_t i = 0; i < encoder_.size(); ++i)
    encoder_[i].collect(out, "encoder." + std::to_string(i));
  return out;
}

ParamList TeacherModel::hyper_params() const {
  ParamList out;
  hyper_.collect(out, "hyper");
  return out;
}

ParamList TeacherModel::head_params() const {
  ParamList out;
  head_.collect(out, "head");
  return out;
}

ParamList TeacherModel::trunk_params() const {
  ParamList out;
  for (std::size_t i = 0; i < trunk_.size(); ++i) {
    trunk_[i].first.collect(out, "trunk." + std::to_string(i) + ".conv0");
    trunk_[i].second.collect(out, "trunk." + std::to_string(i) + ".conv1");
  }
  return out;
}

ParamList TeacherModel::tail_params() const {
  ParamList out;
  for (std::size_t i = 0; i < tail_.size(); ++i)
    tail_[i].collect(out, "tail." + std::to_string(i));
  return out;
}

ParamList TeacherModel::params() const {
  ParamList out;
  for (const ParamList& part :
       {encoder_params(), hyper_params(), head_params(), trunk_params(), tail_params()}) {
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Inference operations

Latent encode(const ImageTensor& x, const TeacherModel& model) {
  const int s = model.config().downsample_factor;
  const Shape& shape = x.data.shape();
  if (shape.n != 1 || shape.c != 3) {
    throw ShapeError("encode: expected 1x3xHxW, got " + shape.str());
  }
  if (x.height() < s || x.width() < s) {
    throw DimensionError("encode: image " + std::to_string(x.height()) + "x" +
                         std::to_string(x.width()) + " smaller than downsample factor " +
                         std::to_string(s));
  }
  ag::NoGradGuard guard;
  const Tensor padded = reflect_pad_to_multiple(x.data, s);
  Latent y;
  y.data = model.analysis(ag::constant(padded))->value;
  y.source_height = x.height();
  y.source_width = x.width();
  return y;
}

Latent quantize(const Latent& y, QuantizeMode mode, Rng* rng) {
  Latent out = y;
  if (mode == QuantizeMode::round) {
    for (float& v : out.data.values()) v = std::round(v);
  } else {
    if (!rng) throw std::invalid_argument("quantize: noise mode needs a generator");
    for (float& v : out.data.values()) v += static_cast<float>(rng->uniform() - 0.5);
  }
  return out;
}

QuantizedLatent quantize_round(const Latent& y) {
  return QuantizedLatent::from_tensor(quantize(y, QuantizeMode::round).data, y.source_height,
                                      y.source_width);
}

EntropyParams entropy_params_from_z(const QuantizedLatent& z_hat, const HyperPrior& hyper,
                                    int h, int w) {
  ag::NoGradGuard guard;
  auto [mu, sigma] = hyper.synthesis(ag::constant(z_hat.to_latent().data), h, w);
  return {mu->value, sigma->value};
}

EntropyParams z_prior_params(const HyperPrior& hyper, const Shape& z_shape) {
  ag::NoGradGuard guard;
  auto [mu, sigma] = hyper.z_prior(z_shape);
  return {mu->value, sigma->value};
}

HyperResult hyper_roundtrip(const Latent& y, const TeacherModel& model) {
  ag::NoGradGuard guard;
  const HyperPrior& hyper = model.hyper();
  const ag::Var z = hyper.analysis(ag::constant(y.data));
  Tensor rounded = z->value;
  for (float& v : rounded.values()) v = std::round(v);
  HyperResult out;
  out.z_hat = QuantizedLatent::from_tensor(rounded, y.source_height, y.source_width);
  out.params = entropy_params_from_z(out.z_hat, hyper, y.data.h(), y.data.w());
  out.z_bits = rate_gaussian(rounded, z_prior_params(hyper, rounded.shape()));
  return out;
}

double rate_gaussian(const Tensor& y_hat, const EntropyParams& params) {
  require_same_shape(y_hat.shape(), params.mu.shape(), "rate_gaussian(mu)");
  require_same_shape(y_hat.shape(), params.sigma.shape(), "rate_gaussian(sigma)");
  double bits = 0.0;
  for (std::size_t i = 0; i < y_hat.numel(); ++i) {
    const double sigma = std::max<double>(params.sigma[i], kSigmaMin);
    bits += gaussian_bin_bits(y_hat[i], params.mu[i], sigma);
  }
  return bits;
}

double rate_gaussian(const QuantizedLatent& y_hat, const EntropyParams& params) {
  return rate_gaussian(y_hat.to_latent().data, params);
}

ImageTensor finish_image(const Tensor& decoded, int source_height, int source_width) {
  Tensor out = decoded.crop(0, 0, source_height, source_width);
  clamp01(out);
  return ImageTensor(std::move(out));
}

namespace {

void check_latent(const Latent& y, const TeacherModel& model) {
  const Shape& s = y.data.shape();
  const int f = model.config().downsample_factor;
  if (s.n != 1 || s.c != model.config().latent_channels ||
      s.h != (y.source_height + f - 1) / f || s.w != (y.source_width + f - 1) / f) {
    throw ShapeError("decode: latent " + s.str() + " does not match model/source size");
  }
}

}  // namespace

ImageTensor decode_full(const Latent& y_hat, const TeacherModel& model) {
  check_latent(y_hat, model);
  ag::NoGradGuard guard;
  const ag::Var out = model.tail(model.res_blocks(model.head(ag::constant(y_hat.data))));
  return finish_image(out->value, y_hat.source_height, y_hat.source_width);
}

ImageTensor decode_full(const QuantizedLatent& y_hat, const TeacherModel& model) {
  return decode_full(y_hat.to_latent(), model);
}

ImageTensor decode_without_resblocks(const Latent& y_hat, const TeacherModel& model) {
  check_latent(y_hat, model);
  ag::NoGradGuard guard;
  const ag::Var out = model.tail(model.head(ag::constant(y_hat.data)));
  return finish_image(out->value, y_hat.source_height, y_hat.source_width);
}

ImageTensor decode_without_resblocks(const QuantizedLatent& y_hat, const TeacherModel& model) {
  return decode_without_resblocks(y_hat.to_latent(), model);
}

// ---------------------------------------------------------------------------
// Training

TeacherForward teacher_forward(const TeacherModel& model, const ag::Var& x, Rng& noise,
                               bool detach_rate) {
  const ag::Var y = model.analysis(x);
  Tensor u(y->shape());
  for (float& v : u.values()) v = static_cast<float>(noise.uniform() - 0.5);
  const ag::Var y_for_rate = detach_rate ? ag::constant(y->value) : y;
  const ag::Var y_noisy = ag::add(y_for_rate, ag::constant(std::move(u)));
  const HyperPrior::Output hp = model.hyper().forward(y_for_rate, &noise);
  TeacherForward out;
  out.y_bits = ag::gaussian_bits(y_noisy, hp.mu, hp.sigma, kProbabilityFloor);
  out.z_bits = hp.z_bits;
  out.x_hat = model.tail(model.res_blocks(model.head(ag::ste_round(y))));
  return out;
}

TeacherModel train_teacher(const std::vector<ImageTensor>& frames, const CodecConfig& config,
                           const TeacherTrainConfig& train,
                           const metrics::PerceptualMetric& dp, const TrainLogFn& log) {
  if (frames.empty()) throw EmptyDatasetError("train_teacher: empty dataset");
  if (train.steps < 1 || train.batch < 1) {
    throw std::invalid_argument("train_teacher: steps and batch must be >= 1");
  }
  config.validate();
  if (train.crop % config.downsample_factor != 0) {
    throw std::invalid_argument("train_teacher: crop must be a multiple of the downsample factor");
  }
  const int h = frames.front().height();
  const int w = frames.front().width();
  for (const auto& f : frames) {
    if (f.height() != h || f.width() != w) {
      throw std::invalid_argument("train_teacher: frames must share dimensions");
    }
  }
  TeacherModel model(config);
  const ParamList params = model.params();
  Adam opt(params, AdamConfig{.lr = train.lr});
  Rng rng(train.seed * 0xD1B54A32D192ED03ULL + 3);
  Rng noise = rng.fork();
  const auto dp_var = [&dp](const ag::Var& a, const ag::Var& b) { return dp.distance(a, b); };
  for (int step = 1; step <= train.steps; ++step) {
    std::vector<Tensor> crops;
    for (const auto& win : data::sample_crop_windows(static_cast<int>(frames.size()), h, w,
                                                     train.crop, 1, train.batch, rng)) {
      crops.push_back(frames[win.frame].data.crop(win.top, win.left, train.crop, train.crop));
    }
    const ag::Var x = ag::constant(Tensor::stack(crops));
    const TeacherForward fwd = teacher_forward(model, x, noise, train.detach_rate);
    const float pixels = static_cast<float>(train.batch) * train.crop * train.crop;
    const ag::Var bpp = ag::scale(ag::add(fwd.y_bits, fwd.z_bits), 1.0f / pixels);
    const ag::Var distortion = ag::mse(x, fwd.x_hat);
    const ag::Var perceptual = dp_var(x, fwd.x_hat);
    std::vector<ag::Var> terms{ag::scale(distortion, static_cast<float>(train.k_M)),
                               ag::scale(perceptual, static_cast<float>(train.k_p))};
    if (train.lambda_rate != 0.0) {
      terms.push_back(ag::scale(bpp, static_cast<float>(train.lambda_rate)));
    }
    const ag::Var loss = ag::sum_all(terms);
    opt.zero_grad();
    ag::backward(loss);
    opt.step();
    if (log) {
      log({step, ag::scalar(loss), ag::scalar(bpp), ag::scalar(distortion),
           ag::scalar(perceptual)});
    }
  }
  opt.zero_grad();
  return model;
}

}  // namespace mdc
