#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "mdc/codec_core.hpp"
#include "mdc/nn.hpp"

namespace mdc {

struct MicroRNConfig {
  int hidden_channels = 16;
  int num_blocks = 1;
  int io_channels = 64;

  void validate() const;
  bool operator==(const MicroRNConfig&) const = default;
};

class ConfigMismatchError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// 18*C_io*C_h + C_h + C_io + B*(18*C_h^2 + 12*C_h)
std::size_t count_params(const MicroRNConfig& config);

/// Small residual trunk: 3x3 input projection, B blocks of
/// conv3x3 -> lrelu -> depthwise3x3 -> lrelu -> conv3x3 (+ skip), 3x3 output
/// projection, and a global skip. The output projection starts at zero, so a
/// freshly built network is the identity.
class MicroRN {
 public:
  MicroRN(const MicroRNConfig& config, std::uint64_t seed);

  ag::Var operator()(const ag::Var& f) const;
  const MicroRNConfig& config() const { return config_; }

  /// Parameters in build order (the bundle record order).
  ParamList params() const;
  MicroRN clone() const;

 private:
  struct Block {
    nn::Conv2d conv_a;
    nn::DepthwiseConv2d depthwise;
    nn::Conv2d conv_b;
  };

  MicroRNConfig config_;
  nn::Conv2d in_proj_;
  std::vector<Block> blocks_;
  nn::Conv2d out_proj_;
};

/// tail(rn(head(y))) with the teacher's head and tail, clamped to [0,1].
/// Throws ConfigMismatchError when rn's io width differs from the trunk width.
ImageTensor student_decode(const QuantizedLatent& y_hat, const TeacherModel& teacher,
                           const MicroRN& rn);
ImageTensor student_decode(const Latent& y_hat, const TeacherModel& teacher,
                           const MicroRN& rn);

/// head + trunk + tail parameter counts of the teacher decoder.
std::size_t teacher_decoder_params(const TeacherModel& teacher);
/// head + tail of the teacher plus the Micro-RN.
std::size_t student_decoder_params(const TeacherModel& teacher, const MicroRNConfig& rn);

/// Decoder sizes for a model described only by its part counts.
struct DecoderProportions {
  double head = 0.0;
  double trunk = 0.0;
  double tail = 0.0;
};
/// (head + tail + rn) / (head + trunk + tail)
double student_teacher_ratio(const DecoderProportions& teacher, double rn_params);

}  // namespace mdc
