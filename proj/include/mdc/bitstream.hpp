#pragma once

// Range coding with 16-bit fixed-point CDFs, discretised-Gaussian tables,
// little-endian containers with CRC-32 trailers, and bpp accounting.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mdc/codec_core.hpp"
#include "mdc/micro_rn.hpp"

namespace mdc {

using Bytes = std::vector<std::uint8_t>;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CrcError : public FormatError {
 public:
  using FormatError::FormatError;
};

class SymbolRangeError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

inline constexpr int kCdfPrecision = 16;
inline constexpr std::uint32_t kCdfTotal = 1u << kCdfPrecision;
inline constexpr int kDefaultSupportRadius = 64;

/// Cumulative frequencies c[0] = 0 < c[1] < ... < c[n] = 2^16.
class CdfTable {
 public:
  CdfTable() = default;
  /// Takes cumulative frequencies; throws std::invalid_argument if they are
  /// not strictly increasing from 0 to 2^16.
  explicit CdfTable(std::vector<std::uint32_t> cumulative);
  static CdfTable from_frequencies(std::span<const std::uint32_t> freq);
  /// Uniform over `symbols` values.
  static CdfTable uniform(int symbols);

  int size() const { return static_cast<int>(cum_.size()) - 1; }
  std::uint32_t start(int symbol) const { return cum_[symbol]; }
  std::uint32_t freq(int symbol) const { return cum_[symbol + 1] - cum_[symbol]; }
  /// Symbol s with start(s) <= target < start(s + 1).
  int find(std::uint32_t target) const;
  /// -log2(freq / 2^16)
  double bits(int symbol) const;
  const std::vector<std::uint32_t>& cumulative() const { return cum_; }

 private:
  std::vector<std::uint32_t> cum_;
};

/// Carry-propagating range encoder (64-bit low, 32-bit range).
class RangeEncoder {
 public:
  void encode(const CdfTable& table, int symbol);
  /// Equiprobable raw bits, any width up to 32.
  void encode_bits(std::uint32_t value, int nbits);
  Bytes finish();

 private:
  void encode_range(std::uint32_t start, std::uint32_t freq, int total_bits);
  void shift_low();

  std::uint64_t low_ = 0;
  std::uint32_t range_ = 0xFFFFFFFFu;
  std::uint8_t cache_ = 0;
  std::uint64_t cache_size_ = 1;
  bool first_ = true;
  Bytes out_;
};

class RangeDecoder {
 public:
  explicit RangeDecoder(std::span<const std::uint8_t> bytes);
  int decode(const CdfTable& table);
  std::uint32_t decode_bits(int nbits);

 private:
  std::uint32_t decode_target(int total_bits);
  void consume(std::uint32_t start, std::uint32_t freq);
  void normalize();
  std::uint8_t next_byte();

  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
  std::size_t overrun_ = 0;
  std::uint32_t range_ = 0xFFFFFFFFu;
  std::uint32_t code_ = 0;
  std::uint32_t r_ = 0;
};

Bytes range_encode(std::span<const int> symbols, std::span<const CdfTable> cdfs);
/// Throws FormatError on streams that cannot have come from range_encode with
/// these tables.
std::vector<int> range_decode(std::span<const std::uint8_t> bytes,
                              std::span<const CdfTable> cdfs, std::size_t count);

/// Discretised Gaussian over round(mu) - R .. round(mu) + R plus one escape
/// symbol (index 2R + 1) carrying the remaining tail mass. Every bin gets at
/// least one unit.
CdfTable gaussian_cdf_table(double mu, double sigma, int support_radius = kDefaultSupportRadius);

/// Codes integers under per-element N(mu, sigma) tables; values outside the
/// support are escaped and written as raw bits.
Bytes encode_gaussian(std::span<const std::int32_t> values, const Tensor& mu,
                      const Tensor& sigma, int support_radius = kDefaultSupportRadius);
std::vector<std::int32_t> decode_gaussian(std::span<const std::uint8_t> bytes, const Tensor& mu,
                                          const Tensor& sigma,
                                          int support_radius = kDefaultSupportRadius);
/// Exact code length in bits of the symbols encode_gaussian would emit
/// (escape payloads included).
double gaussian_code_bits(std::span<const std::int32_t> values, const Tensor& mu,
                          const Tensor& sigma, int support_radius = kDefaultSupportRadius);

std::uint32_t crc32(std::span<const std::uint8_t> bytes);

// ---------------------------------------------------------------------------
// Weight bundles

enum class Precision : std::uint8_t { f32 = 32, f16 = 16 };

struct WeightBundle {
  std::string subset_id;
  MicroRNConfig rn_config;
  Precision precision = Precision::f32;
  Bytes payload;  // little-endian parameters in build order
};

std::uint16_t float_to_half(float value);
float half_to_float(std::uint16_t half);

WeightBundle pack_weight_bundle(const MicroRN& rn, const std::string& subset_id,
                                Precision precision = Precision::f32);
MicroRN unpack_weight_bundle(const WeightBundle& bundle);

Bytes serialize_bundle(const WeightBundle& bundle);
WeightBundle parse_bundle(std::span<const std::uint8_t> bytes);
/// Serialized size: header + count_params * precision / 8 + CRC.
std::size_t bundle_size_bytes(const WeightBundle& bundle);

// ---------------------------------------------------------------------------
// Latent payloads and containers

/// Entropy-coded hyper-latent and latent of one coded picture.
struct LatentPayload {
  Shape y_shape;
  Shape z_shape;
  Bytes z_bytes;
  Bytes y_bytes;

  std::size_t byte_size() const { return z_bytes.size() + y_bytes.size(); }
  bool operator==(const LatentPayload&) const = default;
};

struct ImageBitstream {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::uint64_t model_id = 0;
  LatentPayload latent;
  std::optional<WeightBundle> bundle;
};

struct PFramePayload {
  LatentPayload flow;
  LatentPayload residual;
  bool operator==(const PFramePayload&) const = default;
};

struct GOPSection {
  LatentPayload iframe;
  std::vector<PFramePayload> pframes;
  bool operator==(const GOPSection&) const = default;
};

struct GOPBitstream {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::uint32_t frames = 0;
  std::uint32_t gop = 0;
  std::uint64_t model_id = 0;
  std::optional<WeightBundle> bundle;
  std::vector<GOPSection> gops;

  std::size_t payload_bytes() const;
};

Bytes serialize_image(const ImageBitstream& bs);
ImageBitstream parse_image(std::span<const std::uint8_t> bytes);
Bytes serialize_gop(const GOPBitstream& bs);
GOPBitstream parse_gop(std::span<const std::uint8_t> bytes);

bool operator==(const WeightBundle& a, const WeightBundle& b);

/// Teacher checkpoint: config plus every parameter tensor.
Bytes serialize_teacher(const TeacherModel& model);
TeacherModel parse_teacher(std::span<const std::uint8_t> bytes);
/// FNV-1a of the teacher parameters; stored in bitstreams to pair them with
/// the model that produced them.
std::uint64_t model_id(const TeacherModel& model);

/// Generic named-tensor container (magic + opaque header words + tensors).
Bytes serialize_params(const char (&magic)[5], std::span<const std::int64_t> header,
                       const ParamList& params);
/// Parses into an existing parameter list; names and shapes must match.
std::vector<std::int64_t> parse_params(const char (&magic)[5],
                                       std::span<const std::uint8_t> bytes,
                                       const ParamList& params);
/// Header words only (to build the model before loading tensors).
std::vector<std::int64_t> peek_param_header(const char (&magic)[5],
                                            std::span<const std::uint8_t> bytes);

Bytes read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

// ---------------------------------------------------------------------------
// Rate accounting

/// bits / (frames * width * height)
double bpp_overhead(std::uint64_t bundle_bytes, std::uint64_t frames, std::uint64_t width,
                    std::uint64_t height);
double bpp_overhead(const WeightBundle& bundle, std::uint64_t frames, std::uint64_t width,
                    std::uint64_t height);
/// Raw parameter bytes of a bundle with `params` weights.
std::uint64_t bundle_payload_bytes(std::uint64_t params, Precision precision);

/// (payload bits + optional serialized bundle bits) / (frames * width * height)
double total_bpp(const GOPBitstream& bs, std::uint64_t frames, std::uint64_t width,
                 std::uint64_t height, bool include_bundle);

}  // namespace mdc
