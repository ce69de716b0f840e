#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "mdc/autograd.hpp"

namespace mdc {

/// Seeded generator with platform-stable real conversions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, bound).
  int below(int bound) {
    return static_cast<int>(uniform() * static_cast<double>(bound));
  }
  double normal();
  /// Child generator whose stream is independent of later draws on this one.
  Rng fork() { return Rng(next() ^ 0x9E3779B97F4A7C15ULL); }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

struct NamedParam {
  std::string name;
  ag::Var var;
};
using ParamList = std::vector<NamedParam>;

std::size_t count_elements(const ParamList& params);
void set_trainable(const ParamList& params, bool trainable);
void zero_grad(const ParamList& params);
/// FNV-1a over names, shapes and raw parameter bytes.
std::uint64_t hash_params(const ParamList& params);
/// Deep copy of the parameter values (for snapshots and checkpoints).
std::vector<Tensor> snapshot(const ParamList& params);
void restore(const ParamList& params, const std::vector<Tensor>& values);

namespace nn {

inline constexpr float kLeakySlope = 0.2f;

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(int cin, int cout, int kernel, int stride, int pad, Rng& rng);

  ag::Var operator()(const ag::Var& x) const {
    return ag::conv2d(x, weight, bias, stride_, pad_);
  }
  void collect(ParamList& out, const std::string& prefix) const;
  void zero();

  ag::Var weight;
  ag::Var bias;

 private:
  int stride_ = 1;
  int pad_ = 0;
};

/// Kernel 3, stride 2, padding 1, output padding 1: exactly doubles H and W.
class ConvTranspose2d {
 public:
  ConvTranspose2d() = default;
  ConvTranspose2d(int cin, int cout, Rng& rng);

  ag::Var operator()(const ag::Var& x) const {
    return ag::conv_transpose2d(x, weight, bias, 2, 1, 1);
  }
  void collect(ParamList& out, const std::string& prefix) const;

  ag::Var weight;
  ag::Var bias;
};

class DepthwiseConv2d {
 public:
  DepthwiseConv2d() = default;
  DepthwiseConv2d(int channels, Rng& rng);

  ag::Var operator()(const ag::Var& x) const {
    return ag::depthwise_conv2d(x, weight, bias, 1);
  }
  void collect(ParamList& out, const std::string& prefix) const;

  ag::Var weight;
  ag::Var bias;
};

inline ag::Var lrelu(const ag::Var& x) { return ag::leaky_relu(x, kLeakySlope); }

}  // namespace nn

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam over a fixed parameter list. Only parameters that currently require
/// gradients are updated; frozen tensors are left bit-identical.
class Adam {
 public:
  Adam(ParamList params, AdamConfig config);
  void step();
  void zero_grad();
  const ParamList& params() const { return params_; }

 private:
  ParamList params_;
  AdamConfig config_;
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
  long t_ = 0;
};

}  // namespace mdc
