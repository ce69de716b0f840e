#include "mdc/bitstream.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

namespace mdc {

// ---------------------------------------------------------------------------
// CDF tables

CdfTable::CdfTable(std::vector<std::uint32_t> cumulative) : cum_(std::move(cumulative)) {
  if (cum_.size() < 2 || cum_.front() != 0 || cum_.back() != kCdfTotal) {
    throw std::invalid_argument("CdfTable: cumulative table must run from 0 to 2^16");
  }
  for (std::size_t i = 1; i < cum_.size(); ++i) {
    if (cum_[i] <= cum_[i - 1]) {
      throw std::invalid_argument("CdfTable: cumulative table must be strictly increasing");
    }
  }
}

CdfTable CdfTable::from_frequencies(std::span<const std::uint32_t> freq) {
  std::vector<std::uint32_t> cum(freq.size() + 1, 0);
  for (std::size_t i = 0; i < freq.size(); ++i) cum[i + 1] = cum[i] + freq[i];
  return CdfTable(std::move(cum));
}

CdfTable CdfTable::uniform(int symbols) {
  if (symbols < 1 || static_cast<std::uint32_t>(symbols) > kCdfTotal) {
    throw std::invalid_argument("CdfTable::uniform: bad symbol count");
  }
  std::vector<std::uint32_t> cum(symbols + 1);
  for (int i = 0; i <= symbols; ++i) {
    cum[i] = static_cast<std::uint32_t>(static_cast<std::uint64_t>(i) * kCdfTotal / symbols);
  }
  return CdfTable(std::move(cum));
}

int CdfTable::find(std::uint32_t target) const {
  const auto it = std::upper_bound(cum_.begin(), cum_.end(), target);
  return static_cast<int>(it - cum_.begin()) - 1;
}

double CdfTable::bits(int symbol) const {
  return kCdfPrecision - std::log2(static_cast<double>(freq(symbol)));
}

// ---------------------------------------------------------------------------
// Range coder

void RangeEncoder::shift_low() {
  if (static_cast<std::uint32_t>(low_) < 0xFF000000u || (low_ >> 32) != 0) {
    const auto carry = static_cast<std::uint8_t>(low_ >> 32);
    std::uint8_t temp = cache_;
    do {
      // The very first byte is always zero; the decoder assumes it.
      if (first_) {
        first_ = false;
      } else {
        out_.push_back(static_cast<std::uint8_t>(temp + carry));
      }
      temp = 0xFF;
    } while (--cache_size_ != 0);
    cache_ = static_cast<std::uint8_t>(low_ >> 24);
  }
  ++cache_size_;
  low_ = (low_ & 0x00FFFFFFu) << 8;
}

void RangeEncoder::encode_range(std::uint32_t start, std::uint32_t freq, int total_bits) {
  const std::uint32_t r = range_ >> total_bits;
  low_ += static_cast<std::uint64_t>(r) * start;
  range_ = r * freq;
  while (range_ < (1u << 24)) {
    range_ <<= 8;
    shift_low();
  }
}

void RangeEncoder::encode(const CdfTable& table, int symbol) {
  if (symbol < 0 || symbol >= table.size()) {
    throw SymbolRangeError("range_encode: symbol " + std::to_string(symbol) +
                           " outside table of size " + std::to_string(table.size()));
  }
  encode_range(table.start(symbol), table.freq(symbol), kCdfPrecision);
}

void RangeEncoder::encode_bits(std::uint32_t value, int nbits) {
  while (nbits > 0) {
    const int k = std::min(nbits, 16);
    encode_range(value & ((1u << k) - 1), 1, k);
    value = k < 32 ? value >> k : 0;
    nbits -= k;
  }
}

Bytes RangeEncoder::finish() {
  for (int i = 0; i < 5; ++i) shift_low();
  return std::move(out_);
}

RangeDecoder::RangeDecoder(std::span<const std::uint8_t> bytes) : in_(bytes) {
  for (int i = 0; i < 4; ++i) code_ = (code_ << 8) | next_byte();
}

std::uint8_t RangeDecoder::next_byte() {
  if (pos_ < in_.size()) return in_[pos_++];
  throw FormatError("range_decode: stream truncated");
}

void RangeDecoder::normalize() {
  while (range_ < (1u << 24)) {
    code_ = (code_ << 8) | next_byte();
    range_ <<= 8;
  }
}

std::uint32_t RangeDecoder::decode_target(int total_bits) {
  r_ = range_ >> total_bits;
  const std::uint32_t v = code_ / r_;
  if (v >= (1u << total_bits)) throw FormatError("range_decode: corrupt stream");
  return v;
}

void RangeDecoder::consume(std::uint32_t start, std::uint32_t freq) {
  code_ -= r_ * start;
  range_ = r_ * freq;
  normalize();
}

int RangeDecoder::decode(const CdfTable& table) {
  const int s = table.find(decode_target(kCdfPrecision));
  if (s < 0 || s >= table.size()) throw FormatError("range_decode: corrupt stream");
  consume(table.start(s), table.freq(s));
  return s;
}

std::uint32_t RangeDecoder::decode_bits(int nbits) {
  std::uint32_t value = 0;
  int shift = 0;
  while (nbits > 0) {
    const int k = std::min(nbits, 16);
    const std::uint32_t chunk = decode_target(k);
    consume(chunk, 1);
    value |= chunk << shift;
    shift += k;
    nbits -= k;
  }
  return value;
}

Bytes range_encode(std::span<const int> symbols, std::span<const CdfTable> cdfs) {
  if (symbols.size() != cdfs.size()) {
    throw std::invalid_argument("range_encode: one table per symbol required");
  }
  RangeEncoder enc;
  for (std::size_t i = 0; i < symbols.size(); ++i) enc.encode(cdfs[i], symbols[i]);
  return enc.finish();
}

std::vector<int> range_decode(std::span<const std::uint8_t> bytes,
                              std::span<const CdfTable> cdfs, std::size_t count) {
  if (cdfs.size() < count) throw std::invalid_argument("range_decode: too few tables");
  RangeDecoder dec(bytes);
  std::vector<int> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = dec.decode(cdfs[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Gaussian tables and latent coding

namespace {

std::int64_t table_centre(double mu) {
  if (!std::isfinite(mu)) throw std::invalid_argument("gaussian_cdf_table: non-finite mu");
  return static_cast<std::int64_t>(round_half_away(std::clamp(mu, -1e9, 1e9)));
}

double upper_tail(double x, double mu, double sigma) {
  return 0.5 * std::erfc((x - mu) / (sigma * std::numbers::sqrt2));
}

}  // namespace

CdfTable gaussian_cdf_table(double mu, double sigma, int support_radius) {
  if (support_radius < 0 || 2 * support_radius + 2 > static_cast<int>(kCdfTotal)) {
    throw std::invalid_argument("gaussian_cdf_table: bad support radius");
  }
  sigma = std::max(sigma, kSigmaMin);
  const std::int64_t c = table_centre(mu);
  const int bins = 2 * support_radius + 2;
  std::vector<double> mass(bins);
  for (int k = -support_radius; k <= support_radius; ++k) {
    mass[k + support_radius] = gaussian_bin_mass(static_cast<double>(c + k), mu, sigma);
  }
  // Escape: everything outside [c - R - 0.5, c + R + 0.5].
  const double lo = static_cast<double>(c - support_radius) - 0.5;
  const double hi = static_cast<double>(c + support_radius) + 0.5;
  mass[bins - 1] = upper_tail(hi, mu, sigma) + upper_tail(-lo, -mu, sigma);

  const double total = std::accumulate(mass.begin(), mass.end(), 0.0);
  const std::uint32_t spare = kCdfTotal - static_cast<std::uint32_t>(bins);
  std::vector<std::uint32_t> freq(bins, 1);
  std::vector<double> frac(bins);
  std::uint32_t used = 0;
  for (int i = 0; i < bins; ++i) {
    const double q = mass[i] / total * spare;
    const double f = std::floor(q);
    freq[i] += static_cast<std::uint32_t>(f);
    used += static_cast<std::uint32_t>(f);
    frac[i] = q - f;
  }
  std::vector<int> order(bins);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&frac](int a, int b) { return frac[a] > frac[b]; });
  for (std::uint32_t i = 0; used < spare; ++i, ++used) ++freq[order[i % bins]];
  return CdfTable::from_frequencies(freq);
}

namespace {

struct SymbolPlan {
  int symbol = 0;
  bool escaped = false;
  std::uint32_t sign = 0;
  int width = 0;  // bit width of m + 1
  std::uint64_t m_plus_1 = 0;
};

SymbolPlan plan_symbol(std::int32_t value, std::int64_t c, int radius) {
  SymbolPlan p;
  const std::int64_t d = static_cast<std::int64_t>(value) - c;
  if (d >= -radius && d <= radius) {
    p.symbol = static_cast<int>(d + radius);
    return p;
  }
  p.symbol = 2 * radius + 1;
  p.escaped = true;
  p.sign = d < 0 ? 1 : 0;
  p.m_plus_1 = static_cast<std::uint64_t>(d < 0 ? -d : d) - static_cast<std::uint64_t>(radius);
  p.width = std::bit_width(p.m_plus_1);
  return p;
}

void check_params(std::size_t n, const Tensor& mu, const Tensor& sigma) {
  if (mu.numel() != n || sigma.numel() != n) {
    throw ShapeError("gaussian coding: value/parameter count mismatch");
  }
}

}  // namespace

Bytes encode_gaussian(std::span<const std::int32_t> values, const Tensor& mu,
                      const Tensor& sigma, int support_radius) {
  check_params(values.size(), mu, sigma);
  RangeEncoder enc;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const CdfTable table = gaussian_cdf_table(mu[i], sigma[i], support_radius);
    const SymbolPlan p = plan_symbol(values[i], table_centre(mu[i]), support_radius);
    enc.encode(table, p.symbol);
    if (p.escaped) {
      enc.encode_bits(p.sign, 1);
      enc.encode_bits(static_cast<std::uint32_t>(p.width - 1), 6);
      enc.encode_bits(static_cast<std::uint32_t>(p.m_plus_1), p.width - 1);
    }
  }
  return enc.finish();
}

std::vector<std::int32_t> decode_gaussian(std::span<const std::uint8_t> bytes, const Tensor& mu,
                                          const Tensor& sigma, int support_radius) {
  const std::size_t n = mu.numel();
  check_params(n, mu, sigma);
  RangeDecoder dec(bytes);
  std::vector<std::int32_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const CdfTable table = gaussian_cdf_table(mu[i], sigma[i], support_radius);
    const std::int64_t c = table_centre(mu[i]);
    const int s = dec.decode(table);
    std::int64_t v;
    if (s <= 2 * support_radius) {
      v = c + s - support_radius;
    } else {
      const std::uint32_t sign = dec.decode_bits(1);
      const int width = static_cast<int>(dec.decode_bits(6)) + 1;
      if (width > 34) throw FormatError("decode_gaussian: corrupt escape");
      std::uint64_t m_plus_1 = std::uint64_t{1} << (width - 1);
      if (width > 1) m_plus_1 |= dec.decode_bits(width - 1);
      const auto mag = static_cast<std::int64_t>(m_plus_1) + support_radius;
      v = c + (sign ? -mag : mag);
    }
    if (v < INT32_MIN || v > INT32_MAX) throw FormatError("decode_gaussian: value overflow");
    out[i] = static_cast<std::int32_t>(v);
  }
  return out;
}

double gaussian_code_bits(std::span<const std::int32_t> values, const Tensor& mu,
                          const Tensor& sigma, int support_radius) {
  check_params(values.size(), mu, sigma);
  double bits = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const CdfTable table = gaussian_cdf_table(mu[i], sigma[i], support_radius);
    const SymbolPlan p = plan_symbol(values[i], table_centre(mu[i]), support_radius);
    bits += table.bits(p.symbol);
    if (p.escaped) bits += 1 + 6 + (p.width - 1);
  }
  return bits;
}

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    const auto n = static_cast<uInt>(std::min<std::size_t>(bytes.size() - pos, 1u << 30));
    crc = ::crc32(crc, bytes.data() + pos, n);
    pos += n;
  }
  return static_cast<std::uint32_t>(crc);
}

// ---------------------------------------------------------------------------
// Little-endian byte streams

namespace {

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void i64(std::int64_t v) { put(static_cast<std::uint64_t>(v), 8); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void raw(std::span<const std::uint8_t> b) { out_.insert(out_.end(), b.begin(), b.end()); }
  void magic(const char* m) { raw({reinterpret_cast<const std::uint8_t*>(m), 4}); }
  void str16(const std::string& s) {
    if (s.size() > 0xFFFF) throw std::invalid_argument("string too long for container");
    u16(static_cast<std::uint16_t>(s.size()));
    raw({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
  }
  void blob32(std::span<const std::uint8_t> b) {
    u32(static_cast<std::uint32_t>(b.size()));
    raw(b);
  }
  void shape(const Shape& s) {
    for (int v : {s.n, s.c, s.h, s.w}) u32(static_cast<std::uint32_t>(v));
  }
  Bytes finish_with_crc() {
    u32(crc32(out_));
    return std::move(out_);
  }
  Bytes& bytes() { return out_; }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  Bytes out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  std::int64_t i64() { return static_cast<std::int64_t>(get(8)); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::span<const std::uint8_t> raw(std::size_t n) {
    need(n);
    auto s = in_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::string str16() {
    const auto n = u16();
    const auto b = raw(n);
    return std::string(b.begin(), b.end());
  }
  Bytes blob32() {
    const auto n = u32();
    const auto b = raw(n);
    return Bytes(b.begin(), b.end());
  }
  Shape shape() {
    Shape s;
    s.n = static_cast<int>(u32());
    s.c = static_cast<int>(u32());
    s.h = static_cast<int>(u32());
    s.w = static_cast<int>(u32());
    if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0 ||
        static_cast<double>(s.n) * s.c * s.h * s.w > 1e9) {
      throw FormatError("container: implausible tensor shape");
    }
    return s;
  }
  bool at_end() const { return pos_ == in_.size(); }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) throw FormatError("container: truncated");
  }
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

constexpr std::uint8_t kVersion = 1;

/// Checks size, magic, CRC and version; returns a reader over the body
/// (between the version byte and the CRC trailer).
Reader open_container(std::span<const std::uint8_t> bytes, const char* magic) {
  if (bytes.size() < 9) throw FormatError(std::string(magic) + ": truncated container");
  if (std::memcmp(bytes.data(), magic, 4) != 0) {
    throw FormatError(std::string("bad magic, expected ") + magic);
  }
  const auto body = bytes.first(bytes.size() - 4);
  Reader trailer(bytes.last(4));
  if (trailer.u32() != crc32(body)) throw CrcError(std::string(magic) + ": CRC mismatch");
  if (bytes[4] != kVersion) {
    throw FormatError(std::string(magic) + ": unsupported version " + std::to_string(bytes[4]));
  }
  return Reader(body.subspan(5));
}

void expect_end(const Reader& r, const char* what) {
  if (!r.at_end()) throw FormatError(std::string(what) + ": trailing bytes");
}

void write_payload(Writer& w, const LatentPayload& p) {
  w.shape(p.y_shape);
  w.shape(p.z_shape);
  w.blob32(p.z_bytes);
  w.blob32(p.y_bytes);
}

LatentPayload read_payload(Reader& r) {
  LatentPayload p;
  p.y_shape = r.shape();
  p.z_shape = r.shape();
  p.z_bytes = r.blob32();
  p.y_bytes = r.blob32();
  return p;
}

}  // namespace

// ---------------------------------------------------------------------------
// Weight bundles

std::uint16_t float_to_half(float value) {
  const auto b = std::bit_cast<std::uint32_t>(value);
  const auto sign = static_cast<std::uint16_t>((b >> 16) & 0x8000u);
  const int exp = static_cast<int>((b >> 23) & 0xFFu);
  const std::uint32_t mant = b & 0x7FFFFFu;
  if (exp == 255) return static_cast<std::uint16_t>(sign | 0x7C00u | (mant ? 0x200u : 0u));
  const int e = exp - 127 + 15;
  if (e >= 31) return static_cast<std::uint16_t>(sign | 0x7C00u);
  if (e <= 0) {
    if (e < -10) return sign;
    const std::uint32_t full = mant | 0x800000u;
    const int shift = 14 - e;
    std::uint32_t h = full >> shift;
    const std::uint32_t rem = full & ((1u << shift) - 1);
    const std::uint32_t halfway = 1u << (shift - 1);
    if (rem > halfway || (rem == halfway && (h & 1u))) ++h;
    return static_cast<std::uint16_t>(sign | h);
  }
  std::uint32_t h = (static_cast<std::uint32_t>(e) << 10) | (mant >> 13);
  const std::uint32_t rem = mant & 0x1FFFu;
  if (rem > 0x1000u || (rem == 0x1000u && (h & 1u))) ++h;
  return static_cast<std::uint16_t>(sign | h);
}

float half_to_float(std::uint16_t half) {
  const std::uint32_t sign = static_cast<std::uint32_t>(half & 0x8000u) << 16;
  const int exp = (half >> 10) & 0x1F;
  const std::uint32_t mant = half & 0x3FFu;
  if (exp == 0) {
    const float v = std::ldexp(static_cast<float>(mant), -24);
    return sign ? -v : v;
  }
  if (exp == 31) return std::bit_cast<float>(sign | 0x7F800000u | (mant << 13));
  return std::bit_cast<float>(sign | (static_cast<std::uint32_t>(exp - 15 + 127) << 23) |
                              (mant << 13));
}

std::uint64_t bundle_payload_bytes(std::uint64_t params, Precision precision) {
  return params * static_cast<std::uint64_t>(precision) / 8;
}

WeightBundle pack_weight_bundle(const MicroRN& rn, const std::string& subset_id,
                                Precision precision) {
  WeightBundle b;
  b.subset_id = subset_id;
  b.rn_config = rn.config();
  b.precision = precision;
  Writer w;
  for (const auto& p : rn.params()) {
    for (float v : p.var->value.values()) {
      if (precision == Precision::f32) {
        w.f32(v);
      } else {
        w.u16(float_to_half(v));
      }
    }
  }
  b.payload = std::move(w.bytes());
  return b;
}

MicroRN unpack_weight_bundle(const WeightBundle& bundle) {
  if (bundle.precision != Precision::f32 && bundle.precision != Precision::f16) {
    throw FormatError("weight bundle: unknown precision");
  }
  const std::uint64_t expected =
      bundle_payload_bytes(count_params(bundle.rn_config), bundle.precision);
  if (bundle.payload.size() != expected) {
    throw FormatError("weight bundle: payload is " + std::to_string(bundle.payload.size()) +
                      " bytes, expected " + std::to_string(expected));
  }
  MicroRN rn(bundle.rn_config, 0);
  Reader r(bundle.payload);
  for (const auto& p : rn.params()) {
    for (float& v : p.var->value.values()) {
      v = bundle.precision == Precision::f32 ? r.f32() : half_to_float(r.u16());
    }
  }
  return rn;
}

namespace {

void write_bundle_body(Writer& w, const WeightBundle& b) {
  w.magic("MDB1");
  w.u8(kVersion);
  w.u8(static_cast<std::uint8_t>(b.precision));
  w.u32(static_cast<std::uint32_t>(b.rn_config.hidden_channels));
  w.u32(static_cast<std::uint32_t>(b.rn_config.num_blocks));
  w.u32(static_cast<std::uint32_t>(b.rn_config.io_channels));
  w.str16(b.subset_id);
  w.u64(count_params(b.rn_config));
  w.raw(b.payload);
}

}  // namespace

Bytes serialize_bundle(const WeightBundle& bundle) {
  const std::uint64_t expected =
      bundle_payload_bytes(count_params(bundle.rn_config), bundle.precision);
  if (bundle.payload.size() != expected) {
    throw std::invalid_argument("serialize_bundle: payload size does not match config");
  }
  Writer w;
  write_bundle_body(w, bundle);
  return w.finish_with_crc();
}

WeightBundle parse_bundle(std::span<const std::uint8_t> bytes) {
  Reader r = open_container(bytes, "MDB1");
  WeightBundle b;
  const std::uint8_t prec = r.u8();
  if (prec != 32 && prec != 16) throw FormatError("MDB1: unknown precision");
  b.precision = static_cast<Precision>(prec);
  b.rn_config.hidden_channels = static_cast<int>(r.u32());
  b.rn_config.num_blocks = static_cast<int>(r.u32());
  b.rn_config.io_channels = static_cast<int>(r.u32());
  try {
    b.rn_config.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("MDB1: ") + e.what());
  }
  b.subset_id = r.str16();
  const std::uint64_t count = r.u64();
  if (count != count_params(b.rn_config)) throw FormatError("MDB1: parameter count mismatch");
  const auto payload = r.raw(bundle_payload_bytes(count, b.precision));
  b.payload.assign(payload.begin(), payload.end());
  expect_end(r, "MDB1");
  return b;
}

std::size_t bundle_size_bytes(const WeightBundle& bundle) {
  // magic + version + precision + 3 config words + id + count + payload + crc
  return 4 + 1 + 1 + 12 + 2 + bundle.subset_id.size() + 8 + bundle.payload.size() + 4;
}

bool operator==(const WeightBundle& a, const WeightBundle& b) {
  return a.subset_id == b.subset_id && a.rn_config == b.rn_config &&
         a.precision == b.precision && a.payload == b.payload;
}

// ---------------------------------------------------------------------------
// Image and GOP containers

namespace {

void write_optional_bundle(Writer& w, const std::optional<WeightBundle>& bundle) {
  if (bundle) w.blob32(serialize_bundle(*bundle));
}

std::optional<WeightBundle> read_optional_bundle(Reader& r, bool present) {
  if (!present) return std::nullopt;
  const Bytes b = r.blob32();
  return parse_bundle(b);
}

}  // namespace

Bytes serialize_image(const ImageBitstream& bs) {
  Writer w;
  w.magic("MDI1");
  w.u8(kVersion);
  w.u8(bs.bundle ? 1 : 0);
  w.u32(bs.width);
  w.u32(bs.height);
  w.u64(bs.model_id);
  write_optional_bundle(w, bs.bundle);
  write_payload(w, bs.latent);
  return w.finish_with_crc();
}

ImageBitstream parse_image(std::span<const std::uint8_t> bytes) {
  Reader r = open_container(bytes, "MDI1");
  ImageBitstream bs;
  const std::uint8_t flags = r.u8();
  if (flags > 1) throw FormatError("MDI1: unknown flags");
  bs.width = r.u32();
  bs.height = r.u32();
  bs.model_id = r.u64();
  bs.bundle = read_optional_bundle(r, flags & 1);
  bs.latent = read_payload(r);
  expect_end(r, "MDI1");
  return bs;
}

std::size_t GOPBitstream::payload_bytes() const {
  std::size_t total = 0;
  for (const auto& g : gops) {
    total += g.iframe.byte_size();
    for (const auto& p : g.pframes) total += p.flow.byte_size() + p.residual.byte_size();
  }
  return total;
}

Bytes serialize_gop(const GOPBitstream& bs) {
  Writer w;
  w.magic("MDV1");
  w.u8(kVersion);
  w.u8(bs.bundle ? 1 : 0);
  w.u32(bs.width);
  w.u32(bs.height);
  w.u32(bs.frames);
  w.u32(bs.gop);
  w.u64(bs.model_id);
  write_optional_bundle(w, bs.bundle);
  w.u32(static_cast<std::uint32_t>(bs.gops.size()));
  for (const auto& g : bs.gops) {
    write_payload(w, g.iframe);
    w.u32(static_cast<std::uint32_t>(g.pframes.size()));
    for (const auto& p : g.pframes) {
      write_payload(w, p.flow);
      write_payload(w, p.residual);
    }
  }
  return w.finish_with_crc();
}

GOPBitstream parse_gop(std::span<const std::uint8_t> bytes) {
  Reader r = open_container(bytes, "MDV1");
  GOPBitstream bs;
  const std::uint8_t flags = r.u8();
  if (flags > 1) throw FormatError("MDV1: unknown flags");
  bs.width = r.u32();
  bs.height = r.u32();
  bs.frames = r.u32();
  bs.gop = r.u32();
  bs.model_id = r.u64();
  bs.bundle = read_optional_bundle(r, flags & 1);
  const std::uint32_t ngops = r.u32();
  std::size_t coded = 0;
  for (std::uint32_t i = 0; i < ngops; ++i) {
    GOPSection g;
    g.iframe = read_payload(r);
    const std::uint32_t np = r.u32();
    for (std::uint32_t j = 0; j < np; ++j) {
      PFramePayload p;
      p.flow = read_payload(r);
      p.residual = read_payload(r);
      g.pframes.push_back(std::move(p));
    }
    coded += 1 + g.pframes.size();
    bs.gops.push_back(std::move(g));
  }
  expect_end(r, "MDV1");
  if (coded != bs.frames) throw FormatError("MDV1: section count does not match frame count");
  return bs;
}

// ---------------------------------------------------------------------------
// Parameter containers

Bytes serialize_params(const char (&magic)[5], std::span<const std::int64_t> header,
                       const ParamList& params) {
  Writer w;
  w.magic(magic);
  w.u8(kVersion);
  w.u32(static_cast<std::uint32_t>(header.size()));
  for (std::int64_t v : header) w.i64(v);
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    w.str16(p.name);
    w.shape(p.var->shape());
    for (float v : p.var->value.values()) w.f32(v);
  }
  return w.finish_with_crc();
}

namespace {

std::vector<std::int64_t> read_header_words(Reader& r) {
  const std::uint32_t n = r.u32();
  if (n > 1024) throw FormatError("parameter container: implausible header");
  std::vector<std::int64_t> words(n);
  for (auto& v : words) v = r.i64();
  return words;
}

}  // namespace

std::vector<std::int64_t> peek_param_header(const char (&magic)[5],
                                            std::span<const std::uint8_t> bytes) {
  Reader r = open_container(bytes, magic);
  return read_header_words(r);
}

std::vector<std::int64_t> parse_params(const char (&magic)[5],
                                       std::span<const std::uint8_t> bytes,
                                       const ParamList& params) {
  Reader r = open_container(bytes, magic);
  auto header = read_header_words(r);
  if (r.u32() != params.size()) throw FormatError(std::string(magic) + ": tensor count mismatch");
  for (const auto& p : params) {
    const std::string name = r.str16();
    const Shape shape = r.shape();
    if (name != p.name || !(shape == p.var->shape())) {
      throw FormatError(std::string(magic) + ": unexpected tensor " + name + " " + shape.str());
    }
    for (float& v : p.var->value.values()) v = r.f32();
  }
  expect_end(r, magic);
  return header;
}

Bytes serialize_teacher(const TeacherModel& model) {
  const CodecConfig& c = model.config();
  const std::int64_t header[] = {c.latent_channels, c.trunk_channels, c.downsample_factor,
                                 c.hyper_channels,  c.trunk_blocks,
                                 static_cast<std::int64_t>(c.seed)};
  return serialize_params("MDT1", header, model.params());
}

TeacherModel parse_teacher(std::span<const std::uint8_t> bytes) {
  const auto h = peek_param_header("MDT1", bytes);
  if (h.size() != 6) throw FormatError("MDT1: bad header");
  CodecConfig c;
  c.latent_channels = static_cast<int>(h[0]);
  c.trunk_channels = static_cast<int>(h[1]);
  c.downsample_factor = static_cast<int>(h[2]);
  c.hyper_channels = static_cast<int>(h[3]);
  c.trunk_blocks = static_cast<int>(h[4]);
  c.seed = static_cast<std::uint64_t>(h[5]);
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("MDT1: ") + e.what());
  }
  TeacherModel model(c);
  parse_params("MDT1", bytes, model.params());
  return model;
}

std::uint64_t model_id(const TeacherModel& model) { return hash_params(model.params()); }

Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  Bytes data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path.string());
  return data;
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot create " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

// ---------------------------------------------------------------------------
// Rate accounting

double bpp_overhead(std::uint64_t bundle_bytes, std::uint64_t frames, std::uint64_t width,
                    std::uint64_t height) {
  if (frames < 1 || width < 1 || height < 1) {
    throw std::invalid_argument("bpp_overhead: frames and dimensions must be >= 1");
  }
  return static_cast<double>(bundle_bytes) * 8.0 /
         (static_cast<double>(frames) * static_cast<double>(width) * static_cast<double>(height));
}

double bpp_overhead(const WeightBundle& bundle, std::uint64_t frames, std::uint64_t width,
                    std::uint64_t height) {
  return bpp_overhead(bundle_size_bytes(bundle), frames, width, height);
}

double total_bpp(const GOPBitstream& bs, std::uint64_t frames, std::uint64_t width,
                 std::uint64_t height, bool include_bundle) {
  if (frames < 1 || width < 1 || height < 1) {
    throw std::invalid_argument("total_bpp: frames and dimensions must be >= 1");
  }
  const double pixels =
      static_cast<double>(frames) * static_cast<double>(width) * static_cast<double>(height);
  double bpp = static_cast<double>(bs.payload_bytes()) * 8.0 / pixels;
  if (include_bundle && bs.bundle) bpp += bpp_overhead(*bs.bundle, frames, width, height);
  return bpp;
}

}  // namespace mdc
