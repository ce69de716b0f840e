#include "mdc/micro_rn.hpp"

#include <string>

namespace mdc {

void MicroRNConfig::validate() const {
  if (hidden_channels < 1 || num_blocks < 1 || io_channels < 1) {
    throw std::invalid_argument("MicroRNConfig: C_h, B and C_io must be >= 1");
  }
}

std::size_t count_params(const MicroRNConfig& config) {
  config.validate();
  const std::size_t ch = static_cast<std::size_t>(config.hidden_channels);
  const std::size_t cio = static_cast<std::size_t>(config.io_channels);
  const std::size_t b = static_cast<std::size_t>(config.num_blocks);
  return 18 * cio * ch + ch + cio + b * (18 * ch * ch + 12 * ch);
}

MicroRN::MicroRN(const MicroRNConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed * 0xA24BAED4963EE407ULL + 5);
  const int ch = config_.hidden_channels;
  in_proj_ = nn::Conv2d(config_.io_channels, ch, 3, 1, 1, rng);
  for (int b = 0; b < config_.num_blocks; ++b) {
    Block block{nn::Conv2d(ch, ch, 3, 1, 1, rng), nn::DepthwiseConv2d(ch, rng),
                nn::Conv2d(ch, ch, 3, 1, 1, rng)};
    blocks_.push_back(std::move(block));
  }
  out_proj_ = nn::Conv2d(ch, config_.io_channels, 3, 1, 1, rng);
  out_proj_.zero();
}

ag::Var MicroRN::operator()(const ag::Var& f) const {
  if (f->shape().c != config_.io_channels) {
    throw ConfigMismatchError("MicroRN: expected " + std::to_string(config_.io_channels) +
                              " input channels, got " + std::to_string(f->shape().c));
  }
  ag::Var h = in_proj_(f);
  for (const Block& block : blocks_) {
    ag::Var t = nn::lrelu(block.conv_a(h));
    t = nn::lrelu(block.depthwise(t));
    h = ag::add(h, block.conv_b(t));
  }
  return ag::add(f, out_proj_(h));
}

ParamList MicroRN::params() const {
  ParamList out;
  in_proj_.collect(out, "rn.in");
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const std::string p = "rn.block" + std::to_string(i);
    blocks_[i].conv_a.collect(out, p + ".conv_a");
    blocks_[i].depthwise.collect(out, p + ".depthwise");
    blocks_[i].conv_b.collect(out, p + ".conv_b");
  }
  out_proj_.collect(out, "rn.out");
  return out;
}

MicroRN MicroRN::clone() const {
  MicroRN copy(config_, 0);
  restore(copy.params(), snapshot(params()));
  return copy;
}

ImageTensor student_decode(const Latent& y_hat, const TeacherModel& teacher,
                           const MicroRN& rn) {
  if (rn.config().io_channels != teacher.config().trunk_channels) {
    throw ConfigMismatchError("student_decode: Micro-RN width " +
                              std::to_string(rn.config().io_channels) +
                              " != teacher trunk width " +
                              std::to_string(teacher.config().trunk_channels));
  }
  ag::NoGradGuard guard;
  const ag::Var out = teacher.tail(rn(teacher.head(ag::constant(y_hat.data))));
  return finish_image(out->value, y_hat.source_height, y_hat.source_width);
}

ImageTensor student_decode(const QuantizedLatent& y_hat, const TeacherModel& teacher,
                           const MicroRN& rn) {
  return student_decode(y_hat.to_latent(), teacher, rn);
}

std::size_t teacher_decoder_params(const TeacherModel& teacher) {
  return count_elements(teacher.head_params()) + count_elements(teacher.trunk_params()) +
         count_elements(teacher.tail_params());
}

std::size_t student_decoder_params(const TeacherModel& teacher, const MicroRNConfig& rn) {
  return count_elements(teacher.head_params()) + count_elements(teacher.tail_params()) +
         count_params(rn);
}

double student_teacher_ratio(const DecoderProportions& teacher, double rn_params) {
  return (teacher.head + teacher.tail + rn_params) /
         (teacher.head + teacher.trunk + teacher.tail);
}

}  // namespace mdc
