#pragma once

#include <optional>

#include "mdc/bitstream.hpp"
#include "mdc/codec_core.hpp"
#include "mdc/micro_rn.hpp"

namespace mdc {

/// Entropy-codes a rounded latent `y_hat` under the hyperprior `hp`; the
/// hyper-latent is derived from the unrounded `y`.
LatentPayload code_latent(const Tensor& y, const Tensor& y_hat, const HyperPrior& hp);
/// Inverse of code_latent: returns the rounded latent.
Tensor decode_latent(const LatentPayload& payload, const HyperPrior& hp);
/// Exact payload size in bits as coded.
double payload_bits(const LatentPayload& payload);

/// Decoder output at the padded size, clamped to [0,1]: the student when
/// `rn` is given, else the full teacher decoder.
Tensor synthesize(const Tensor& y_hat, const TeacherModel& teacher, const MicroRN* rn);

/// Codes a still image. With a bundle, the receiver decodes with the student.
ImageBitstream encode_image(const ImageTensor& x, const TeacherModel& teacher,
                            const std::optional<WeightBundle>& bundle = std::nullopt);
/// Throws FormatError if the bitstream was made with a different teacher.
ImageTensor decode_image(const ImageBitstream& bs, const TeacherModel& teacher,
                         bool force_teacher = false);

}  // namespace mdc
