#include "mdc/image_codec.hpp"

namespace mdc {

namespace {

std::vector<std::int32_t> to_ints(const Tensor& t) {
  std::vector<std::int32_t> out(t.numel());
  for (std::size_t i = 0; i < t.numel(); ++i) out[i] = static_cast<std::int32_t>(t[i]);
  return out;
}

Tensor from_ints(const Shape& shape, const std::vector<std::int32_t>& v) {
  Tensor t(shape);
  for (std::size_t i = 0; i < v.size(); ++i) t[i] = static_cast<float>(v[i]);
  return t;
}

Shape hyper_shape(const Shape& y, int channels) {
  const int h = ((y.h + 1) / 2 + 1) / 2;
  const int w = ((y.w + 1) / 2 + 1) / 2;
  return {y.n, channels, h, w};
}

}  // namespace

LatentPayload code_latent(const Tensor& y, const Tensor& y_hat, const HyperPrior& hp) {
  require_same_shape(y.shape(), y_hat.shape(), "code_latent");
  ag::NoGradGuard guard;
  Tensor z = hp.analysis(ag::constant(y))->value;
  for (float& v : z.values()) v = std::round(v);
  LatentPayload p;
  p.y_shape = y.shape();
  p.z_shape = z.shape();
  const EntropyParams zp = z_prior_params(hp, z.shape());
  p.z_bytes = encode_gaussian(to_ints(z), zp.mu, zp.sigma);
  auto [mu, sigma] = hp.synthesis(ag::constant(z), y.h(), y.w());
  p.y_bytes = encode_gaussian(to_ints(y_hat), mu->value, sigma->value);
  return p;
}

Tensor decode_latent(const LatentPayload& payload, const HyperPrior& hp) {
  const Shape& ys = payload.y_shape;
  if (ys.n != 1 || ys.c != hp.channels() || ys.h < 1 || ys.w < 1) {
    throw FormatError("latent payload: shape " + ys.str() + " does not fit the model");
  }
  ag::NoGradGuard guard;
  const Shape zs = payload.z_shape;
  if (!(zs == hyper_shape(ys, hp.hyper_channels()))) {
    throw FormatError("latent payload: hyper-latent shape " + zs.str() + " is inconsistent");
  }
  const EntropyParams zp = z_prior_params(hp, zs);
  const Tensor z = from_ints(zs, decode_gaussian(payload.z_bytes, zp.mu, zp.sigma));
  auto [mu, sigma] = hp.synthesis(ag::constant(z), ys.h, ys.w);
  return from_ints(ys, decode_gaussian(payload.y_bytes, mu->value, sigma->value));
}

double payload_bits(const LatentPayload& payload) {
  return 8.0 * static_cast<double>(payload.byte_size());
}

Tensor synthesize(const Tensor& y_hat, const TeacherModel& teacher, const MicroRN* rn) {
  ag::NoGradGuard guard;
  const ag::Var f = teacher.head(ag::constant(y_hat));
  Tensor out = teacher.tail(rn ? (*rn)(f) : teacher.res_blocks(f))->value;
  clamp01(out);
  return out;
}

ImageBitstream encode_image(const ImageTensor& x, const TeacherModel& teacher,
                            const std::optional<WeightBundle>& bundle) {
  if (bundle && bundle->rn_config.io_channels != teacher.config().trunk_channels) {
    throw ConfigMismatchError("encode_image: bundle width does not match the teacher");
  }
  const Latent y = encode(x, teacher);
  const Latent y_hat = quantize(y, QuantizeMode::round);
  ImageBitstream bs;
  bs.width = static_cast<std::uint32_t>(x.width());
  bs.height = static_cast<std::uint32_t>(x.height());
  bs.model_id = model_id(teacher);
  bs.latent = code_latent(y.data, y_hat.data, teacher.hyper());
  bs.bundle = bundle;
  return bs;
}

ImageTensor decode_image(const ImageBitstream& bs, const TeacherModel& teacher,
                         bool force_teacher) {
  if (bs.model_id != model_id(teacher)) {
    throw FormatError("image bitstream was produced by a different model");
  }
  const int s = teacher.config().downsample_factor;
  const int h = static_cast<int>(bs.height);
  const int w = static_cast<int>(bs.width);
  if (h < s || w < s || bs.latent.y_shape.h != (h + s - 1) / s ||
      bs.latent.y_shape.w != (w + s - 1) / s) {
    throw FormatError("image bitstream: latent size does not match image size");
  }
  const Tensor y_hat = decode_latent(bs.latent, teacher.hyper());
  std::optional<MicroRN> rn;
  if (bs.bundle && !force_teacher) {
    if (bs.bundle->rn_config.io_channels != teacher.config().trunk_channels) {
      throw ConfigMismatchError("decode_image: bundle width does not match the teacher");
    }
    rn.emplace(unpack_weight_bundle(*bs.bundle));
  }
  return finish_image(synthesize(y_hat, teacher, rn ? &*rn : nullptr), h, w);
}

}  // namespace mdc
