#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "mdc/bitstream.hpp"

namespace mdc {
namespace {

double phi(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

CdfTable random_table(Rng& rng, int symbols) {
  std::vector<std::uint32_t> freq(symbols, 1);
  std::uint32_t left = kCdfTotal - symbols;
  // Skewed random split of the remaining mass.
  std::vector<double> w(symbols);
  for (double& v : w) v = std::pow(rng.uniform(), 4.0);
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  std::uint32_t used = 0;
  for (int i = 0; i < symbols; ++i) {
    const auto f = static_cast<std::uint32_t>(w[i] / total * left);
    freq[i] += f;
    used += f;
  }
  freq[rng.below(symbols)] += left - used;
  return CdfTable::from_frequencies(freq);
}

TEST(CdfTable, RejectsNonMonotone) {
  EXPECT_THROW(CdfTable({0, 100, 100, kCdfTotal}), std::invalid_argument);
  EXPECT_THROW(CdfTable({0, 100, 65535}), std::invalid_argument);
  EXPECT_NO_THROW(CdfTable({0, 1, kCdfTotal}));
}

TEST(RangeCoder, EmptyStreamIsShort) {
  const Bytes b = range_encode({}, {});
  EXPECT_LE(b.size(), 8u);
  EXPECT_TRUE(range_decode(b, {}, 0).empty());
}

TEST(RangeCoder, UniformBytesCostOneBytePerSymbol) {
  Rng rng(3);
  std::vector<int> symbols(1000);
  for (int& s : symbols) s = rng.below(256);
  const std::vector<CdfTable> tables(symbols.size(), CdfTable::uniform(256));
  const Bytes b = range_encode(symbols, tables);
  EXPECT_NEAR(static_cast<double>(b.size()), 1000.0, 10.0 + 8.0);
  EXPECT_EQ(range_decode(b, tables, symbols.size()), symbols);
}

TEST(RangeCoder, RoundTripRandomTablesAndSizeBound) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 1 + rng.below(5000);
    std::vector<CdfTable> tables;
    std::vector<int> symbols;
    double bits = 0.0;
    for (int i = 0; i < n; ++i) {
      tables.push_back(random_table(rng, 2 + rng.below(40)));
      // Draw from the table's own distribution.
      const int s = tables.back().find(static_cast<std::uint32_t>(rng.below(kCdfTotal)));
      symbols.push_back(s);
      bits += tables.back().bits(s);
    }
    const Bytes b = range_encode(symbols, tables);
    EXPECT_LE(static_cast<double>(b.size()), std::ceil(bits) / 8.0 + 8.0);
    EXPECT_EQ(range_decode(b, tables, symbols.size()), symbols);
  }
}

TEST(RangeCoder, ExtremeProbabilities) {
  const std::vector<std::uint32_t> freq{1, kCdfTotal - 2, 1};
  const CdfTable t = CdfTable::from_frequencies(freq);
  std::vector<int> symbols;
  for (int i = 0; i < 2000; ++i) symbols.push_back(i % 97 == 0 ? 0 : (i % 89 == 0 ? 2 : 1));
  const std::vector<CdfTable> tables(symbols.size(), t);
  EXPECT_EQ(range_decode(range_encode(symbols, tables), tables, symbols.size()), symbols);
}

TEST(RangeCoder, RawBitsRoundTrip) {
  Rng rng(5);
  RangeEncoder enc;
  std::vector<std::pair<std::uint32_t, int>> items;
  for (int i = 0; i < 500; ++i) {
    const int nbits = 1 + rng.below(32);
    const auto v = static_cast<std::uint32_t>(rng.next() & (nbits == 32 ? 0xFFFFFFFFu
                                                                        : (1u << nbits) - 1));
    items.emplace_back(v, nbits);
    enc.encode_bits(v, nbits);
  }
  const Bytes b = enc.finish();
  RangeDecoder dec(b);
  for (const auto& [v, nbits] : items) EXPECT_EQ(dec.decode_bits(nbits), v);
}

TEST(RangeCoder, OutOfSupportSymbolThrows) {
  const std::vector<CdfTable> tables{CdfTable::uniform(4)};
  const std::vector<int> bad{4};
  EXPECT_THROW(range_encode(bad, tables), SymbolRangeError);
}

TEST(RangeCoder, TruncatedStreamThrows) {
  Rng rng(9);
  std::vector<int> symbols(400);
  for (int& s : symbols) s = rng.below(256);
  const std::vector<CdfTable> tables(symbols.size(), CdfTable::uniform(256));
  Bytes b = range_encode(symbols, tables);
  b.resize(b.size() / 2);
  EXPECT_THROW(range_decode(b, tables, symbols.size()), FormatError);
}

TEST(GaussianTable, CentralMassUnitSigma) {
  const CdfTable t = gaussian_cdf_table(0.0, 1.0, kDefaultSupportRadius);
  const double expected = phi(0.5) - phi(-0.5);  // 0.38292...
  const double got = t.freq(kDefaultSupportRadius) / 65536.0;
  EXPECT_NEAR(got, expected, std::ldexp(1.0, -10));
  EXPECT_NEAR(expected, 0.3829, 1e-4);
}

TEST(GaussianTable, SymmetricAndFloored) {
  for (double sigma : {0.1, 0.7, 3.0, 40.0}) {
    const CdfTable t = gaussian_cdf_table(0.0, sigma, 16);
    ASSERT_EQ(t.size(), 2 * 16 + 2);
    for (int k = 1; k <= 16; ++k) {
      EXPECT_LE(std::abs(static_cast<int>(t.freq(16 + k)) - static_cast<int>(t.freq(16 - k))), 1)
          << "sigma " << sigma << " k " << k;
    }
    for (int s = 0; s < t.size(); ++s) EXPECT_GE(t.freq(s), 1u);
    EXPECT_EQ(t.cumulative().back(), kCdfTotal);
  }
}

TEST(GaussianCoding, RoundTripWithEscapes) {
  Rng rng(21);
  const int n = 3000;
  Tensor mu({1, 1, 1, n}), sigma({1, 1, 1, n});
  std::vector<std::int32_t> values(n);
  for (int i = 0; i < n; ++i) {
    mu[i] = static_cast<float>(rng.uniform(-20, 20));
    sigma[i] = static_cast<float>(std::exp(rng.uniform(-4, 4)));
    double v = mu[i] + sigma[i] * rng.normal();
    if (i % 50 == 0) v = (i % 100 == 0 ? 1 : -1) * (100000.0 + i);  // forced escapes
    values[i] = static_cast<std::int32_t>(std::llround(v));
  }
  const Bytes b = encode_gaussian(values, mu, sigma);
  EXPECT_EQ(decode_gaussian(b, mu, sigma), values);
  const double bits = gaussian_code_bits(values, mu, sigma);
  EXPECT_LE(static_cast<double>(b.size()), bits / 8.0 * 1.02 + 16.0);
}

TEST(Crc, MatchesKnownVector) {
  const std::string s = "123456789";
  EXPECT_EQ(crc32({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()}), 0xCBF43926u);
}

TEST(Half, RoundTripAndHalfUlpBound) {
  Rng rng(2);
  for (int i = 0; i < 20000; ++i) {
    const float v = static_cast<float>(rng.normal() * std::exp(rng.uniform(-12, 8)));
    const float back = half_to_float(float_to_half(v));
    const int e = std::ilogb(std::abs(v));
    const double ulp = std::ldexp(1.0, std::max(e, -14) - 10);
    EXPECT_LE(std::abs(back - v), 0.5 * ulp + 1e-30) << v;
  }
  EXPECT_EQ(half_to_float(float_to_half(1.0f)), 1.0f);
  EXPECT_EQ(float_to_half(65504.0f), 0x7BFF);
  EXPECT_EQ(float_to_half(1e6f), 0x7C00);
}

TEST(WeightBundle, SizesAndRoundTrip) {
  const MicroRNConfig cfg{8, 1, 4};
  MicroRN rn(cfg, 4);
  for (const auto& p : rn.params())
    for (float& v : p.var->value.values()) v = static_cast<float>(std::sin(v * 7.0 + 1.0));
  const WeightBundle b32 = pack_weight_bundle(rn, "seq", Precision::f32);
  EXPECT_EQ(b32.payload.size(), 1836u * 4);
  const Bytes raw = serialize_bundle(b32);
  EXPECT_EQ(raw.size(), bundle_size_bytes(b32));
  EXPECT_EQ(raw.size(), 1836u * 4 + (bundle_size_bytes(b32) - 1836u * 4));
  const WeightBundle parsed = parse_bundle(raw);
  EXPECT_TRUE(parsed == b32);
  const MicroRN back = unpack_weight_bundle(parsed);
  EXPECT_EQ(hash_params(back.params()), hash_params(rn.params()));
  EXPECT_TRUE(pack_weight_bundle(back, "seq", Precision::f32) == b32);

  const WeightBundle b16 = pack_weight_bundle(rn, "seq", Precision::f16);
  EXPECT_EQ(b16.payload.size(), 1836u * 2);
  const MicroRN back16 = unpack_weight_bundle(parse_bundle(serialize_bundle(b16)));
  const auto a = rn.params();
  const auto b = back16.params();
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t k = 0; k < a[i].var->value.numel(); ++k) {
      const float v = a[i].var->value[k];
      const double ulp = std::ldexp(1.0, std::max(std::ilogb(std::abs(v)), -14) - 10);
      EXPECT_LE(std::abs(b[i].var->value[k] - v), 0.5 * ulp + 1e-30);
    }
  }
}

TEST(WeightBundle, AnySingleByteCorruptionIsDetected) {
  MicroRN rn({4, 1, 4}, 1);
  const Bytes raw = serialize_bundle(pack_weight_bundle(rn, "x"));
  Rng rng(8);
  for (int trial = 0; trial < 300; ++trial) {
    Bytes bad = raw;
    const int pos = rng.below(static_cast<int>(bad.size()));
    bad[pos] ^= static_cast<std::uint8_t>(1 + rng.below(255));
    EXPECT_THROW(parse_bundle(bad), FormatError) << "byte " << pos;
  }
  Bytes truncated(raw.begin(), raw.end() - 5);
  EXPECT_THROW(parse_bundle(truncated), FormatError);
}

LatentPayload sample_payload(Rng& rng) {
  LatentPayload p;
  p.y_shape = {1, 4, 2, 3};
  p.z_shape = {1, 2, 1, 1};
  for (int i = 0; i < 1 + rng.below(20); ++i) p.y_bytes.push_back(rng.below(256));
  for (int i = 0; i < rng.below(5); ++i) p.z_bytes.push_back(rng.below(256));
  return p;
}

TEST(Containers, ImageRoundTrip) {
  Rng rng(1);
  ImageBitstream bs;
  bs.width = 70;
  bs.height = 33;
  bs.model_id = 0x1234567890ABCDEFULL;
  bs.latent = sample_payload(rng);
  for (bool with_bundle : {false, true}) {
    if (with_bundle) bs.bundle = pack_weight_bundle(MicroRN({4, 2, 8}, 3), "img");
    const ImageBitstream back = parse_image(serialize_image(bs));
    EXPECT_EQ(back.width, bs.width);
    EXPECT_EQ(back.height, bs.height);
    EXPECT_EQ(back.model_id, bs.model_id);
    EXPECT_TRUE(back.latent == bs.latent);
    EXPECT_EQ(back.bundle.has_value(), with_bundle);
    if (with_bundle) EXPECT_TRUE(*back.bundle == *bs.bundle);
  }
}

TEST(Containers, GopRoundTripAndCorruption) {
  Rng rng(2);
  GOPBitstream bs;
  bs.width = 64;
  bs.height = 48;
  bs.frames = 25;
  bs.gop = 10;
  bs.model_id = 42;
  for (int size : {11, 11, 3}) {
    GOPSection g;
    g.iframe = sample_payload(rng);
    for (int k = 1; k < size; ++k) g.pframes.push_back({sample_payload(rng), sample_payload(rng)});
    bs.gops.push_back(g);
  }
  const Bytes raw = serialize_gop(bs);
  const GOPBitstream back = parse_gop(raw);
  EXPECT_EQ(back.frames, 25u);
  EXPECT_EQ(back.gops, bs.gops);
  EXPECT_EQ(back.payload_bytes(), bs.payload_bytes());
  Bytes bad = raw;
  bad[raw.size() / 2] ^= 0x40;
  EXPECT_THROW(parse_gop(bad), CrcError);
  Bytes wrong_magic = raw;
  wrong_magic[0] = 'X';
  EXPECT_THROW(parse_gop(wrong_magic), FormatError);
  EXPECT_THROW(parse_image(raw), FormatError);
}

TEST(Accounting, OverheadArithmetic) {
  const std::uint64_t bytes = bundle_payload_bytes(594000, Precision::f32);
  EXPECT_EQ(bytes, 594000u * 4);
  // 594000 * 32 / (3900 * 1920 * 1080)
  const double expected = 594000.0 * 32.0 / (3900.0 * 1920.0 * 1080.0);
  EXPECT_NEAR(bpp_overhead(bytes, 3900, 1920, 1080), expected, 1e-15);
  EXPECT_NEAR(bpp_overhead(bytes, 3900, 1920, 1080), 0.00235, 1e-5);
  EXPECT_LE(bpp_overhead(bytes, 3900, 1920, 1080), 0.005);
  EXPECT_EQ(bpp_overhead(bytes, 7800, 1920, 1080) * 2.0, bpp_overhead(bytes, 3900, 1920, 1080));
  EXPECT_EQ(bpp_overhead(1000, 1, 10, 10), 80.0);
  EXPECT_THROW(bpp_overhead(bytes, 0, 1, 1), std::invalid_argument);
}

TEST(Accounting, TotalBppAdditiveAndBundleToggle) {
  GOPBitstream bs;
  bs.frames = 2;
  EXPECT_EQ(total_bpp(bs, 2, 8, 8, false), 0.0);
  GOPSection g;
  g.iframe.y_bytes.assign(10, 0);
  g.pframes.push_back({});
  g.pframes.back().flow.y_bytes.assign(3, 0);
  g.pframes.back().residual.z_bytes.assign(5, 0);
  bs.gops.push_back(g);
  EXPECT_DOUBLE_EQ(total_bpp(bs, 2, 8, 8, false), 18.0 * 8 / 128.0);
  bs.gops.push_back(g);
  EXPECT_DOUBLE_EQ(total_bpp(bs, 2, 8, 8, false), 36.0 * 8 / 128.0);
  bs.bundle = pack_weight_bundle(MicroRN({4, 1, 4}, 0), "b");
  EXPECT_DOUBLE_EQ(total_bpp(bs, 2, 8, 8, true) - total_bpp(bs, 2, 8, 8, false),
                   bpp_overhead(*bs.bundle, 2, 8, 8));
}

}  // namespace
}  // namespace mdc
