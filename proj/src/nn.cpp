#include "mdc/nn.hpp"

#include <cmath>
#include <cstring>

namespace mdc {

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u = 0.0;
  while (u <= 0.0) u = uniform();
  const double v = uniform();
  const double r = std::sqrt(-2.0 * std::log(u));
  spare_ = r * std::sin(2.0 * M_PI * v);
  has_spare_ = true;
  return r * std::cos(2.0 * M_PI * v);
}

std::size_t count_elements(const ParamList& params) {
  std::size_t total = 0;
  for (const auto& p : params) total += p.var->value.numel();
  return total;
}

void set_trainable(const ParamList& params, bool trainable) {
  for (const auto& p : params) p.var->requires_grad = trainable;
}

void zero_grad(const ParamList& params) {
  for (const auto& p : params) p.var->grad = Tensor();
}

std::uint64_t hash_params(const ParamList& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* data, std::size_t size) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < size; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& p : params) {
    mix(p.name.data(), p.name.size());
    const Shape s = p.var->shape();
    mix(&s, sizeof(s));
    mix(p.var->value.data(), p.var->value.numel() * sizeof(float));
  }
  return h;
}

std::vector<Tensor> snapshot(const ParamList& params) {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.var->value);
  return out;
}

void restore(const ParamList& params, const std::vector<Tensor>& values) {
  if (values.size() != params.size()) throw ShapeError("restore: count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    require_same_shape(params[i].var->shape(), values[i].shape(), "restore");
    params[i].var->value = values[i];
  }
}

namespace nn {

namespace {

// He-uniform for leaky rectifiers.
Tensor init_weight(Shape s, int fan_in, Rng& rng) {
  Tensor t(s);
  const double gain = std::sqrt(2.0 / (1.0 + kLeakySlope * kLeakySlope));
  const double bound = gain * std::sqrt(3.0 / fan_in);
  for (float& v : t.values()) v = static_cast<float>(rng.uniform(-bound, bound));
  return t;
}

void push(ParamList& out, const std::string& prefix, const char* leaf,
          const ag::Var& v) {
  if (v) out.push_back({prefix + "." + leaf, v});
}

}  // namespace

Conv2d::Conv2d(int cin, int cout, int kernel, int stride, int pad, Rng& rng)
    : weight(ag::parameter(init_weight({cout, cin, kernel, kernel},
                                       cin * kernel * kernel, rng))),
      bias(ag::parameter(Tensor({cout, 1, 1, 1}))),
      stride_(stride),
      pad_(pad) {}

void Conv2d::collect(ParamList& out, const std::string& prefix) const {
  push(out, prefix, "weight", weight);
  push(out, prefix, "bias", bias);
}

void Conv2d::zero() {
  weight->value.fill(0.0f);
  bias->value.fill(0.0f);
}

ConvTranspose2d::ConvTranspose2d(int cin, int cout, Rng& rng)
    // Each output pixel receives on average 9/4 taps per input channel.
    : weight(ag::parameter(init_weight({cin, cout, 3, 3}, cin * 9 / 4 + 1, rng))),
      bias(ag::parameter(Tensor({cout, 1, 1, 1}))) {}

void ConvTranspose2d::collect(ParamList& out, const std::string& prefix) const {
  push(out, prefix, "weight", weight);
  push(out, prefix, "bias", bias);
}

DepthwiseConv2d::DepthwiseConv2d(int channels, Rng& rng)
    : weight(ag::parameter(init_weight({channels, 1, 3, 3}, 9, rng))),
      bias(ag::parameter(Tensor({channels, 1, 1, 1}))) {}

void DepthwiseConv2d::collect(ParamList& out, const std::string& prefix) const {
  push(out, prefix, "weight", weight);
  push(out, prefix, "bias", bias);
}

}  // namespace nn

Adam::Adam(ParamList params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.emplace_back(p.var->value.numel(), 0.0f);
    v_.emplace_back(p.var->value.numel(), 0.0f);
  }
}

void Adam::zero_grad() { mdc::zero_grad(params_); }

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  const float step = static_cast<float>(config_.lr * std::sqrt(bc2) / bc1);
  const float b1 = static_cast<float>(config_.beta1);
  const float b2 = static_cast<float>(config_.beta2);
  const float eps = static_cast<float>(config_.eps * std::sqrt(bc2));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& node = *params_[i].var;
    if (!node.requires_grad || node.grad.empty()) continue;
    float* w = node.value.data();
    const float* g = node.grad.data();
    float* m = m_[i].data();
    float* v = v_[i].data();
    for (std::size_t k = 0; k < node.value.numel(); ++k) {
      m[k] = b1 * m[k] + (1.0f - b1) * g[k];
      v[k] = b2 * v[k] + (1.0f - b2) * g[k] * g[k];
      w[k] -= step * m[k] / (std::sqrt(v[k]) + eps);
    }
  }
}

}  // namespace mdc
