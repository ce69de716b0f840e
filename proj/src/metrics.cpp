#include "mdc/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "mdc/nn.hpp"

namespace mdc::metrics {

double mse(const Tensor& a, const Tensor& b) {
  require_same_shape(a.shape(), b.shape(), "mse");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    acc += d * d;
  }
  return a.numel() ? acc / a.numel() : 0.0;
}

double psnr_from_mse(double m) {
  if (m < 1e-10) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / m));
}

double psnr(const ImageTensor& a, const ImageTensor& b) {
  return psnr_from_mse(mse(a.data, b.data));
}

// ---------------------------------------------------------------------------
// MS-SSIM

namespace {

constexpr double kMsSsimWeights[5] = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};

using Plane = std::vector<double>;

std::vector<double> gaussian_window(int size) {
  std::vector<double> w(size);
  double total = 0.0;
  const double centre = (size - 1) / 2.0;
  for (int i = 0; i < size; ++i) {
    const double d = i - centre;
    w[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
    total += w[i];
  }
  for (double& v : w) v /= total;
  return w;
}

// Separable "valid" filtering.
Plane filter(const Plane& in, int h, int w, const std::vector<double>& win, int& oh, int& ow) {
  const int k = static_cast<int>(win.size());
  oh = h - k + 1;
  ow = w - k + 1;
  Plane tmp(static_cast<std::size_t>(h) * ow);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int i = 0; i < k; ++i) acc += win[i] * in[y * w + x + i];
      tmp[y * ow + x] = acc;
    }
  Plane out(static_cast<std::size_t>(oh) * ow);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int i = 0; i < k; ++i) acc += win[i] * tmp[(y + i) * ow + x];
      out[y * ow + x] = acc;
    }
  return out;
}

struct SsimTerms {
  double cs;
  double ssim;
};

SsimTerms ssim_terms(const Plane& a, const Plane& b, int h, int w) {
  constexpr double c1 = 0.01 * 0.01;
  constexpr double c2 = 0.03 * 0.03;
  const auto win = gaussian_window(std::min({11, h, w}));
  Plane aa(a.size()), bb(a.size()), ab(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    aa[i] = a[i] * a[i];
    bb[i] = b[i] * b[i];
    ab[i] = a[i] * b[i];
  }
  int oh = 0, ow = 0;
  const Plane mu_a = filter(a, h, w, win, oh, ow);
  const Plane mu_b = filter(b, h, w, win, oh, ow);
  const Plane s_aa = filter(aa, h, w, win, oh, ow);
  const Plane s_bb = filter(bb, h, w, win, oh, ow);
  const Plane s_ab = filter(ab, h, w, win, oh, ow);
  double cs_sum = 0.0;
  double ssim_sum = 0.0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double va = s_aa[i] - mu_a[i] * mu_a[i];
    const double vb = s_bb[i] - mu_b[i] * mu_b[i];
    const double cov = s_ab[i] - mu_a[i] * mu_b[i];
    const double cs = (2.0 * cov + c2) / (va + vb + c2);
    const double lum = (2.0 * mu_a[i] * mu_b[i] + c1) /
                       (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1);
    cs_sum += cs;
    ssim_sum += lum * cs;
  }
  const double n = static_cast<double>(mu_a.size());
  return {cs_sum / n, ssim_sum / n};
}

Plane downsample(const Plane& in, int h, int w) {
  const int oh = h / 2;
  const int ow = w / 2;
  Plane out(static_cast<std::size_t>(oh) * ow);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      const double* p = &in[(2 * y) * w + 2 * x];
      out[y * ow + x] = 0.25 * (p[0] + p[1] + p[w] + p[w + 1]);
    }
  return out;
}

}  // namespace

int ms_ssim_scales(int height, int width) {
  const int m = std::min(height, width);
  int scales = 0;
  while (scales < 5 && m >= 10 * (1 << scales) + 1) ++scales;
  return scales;
}

double ms_ssim(const ImageTensor& a, const ImageTensor& b) {
  require_same_shape(a.data.shape(), b.data.shape(), "ms_ssim");
  const int scales = ms_ssim_scales(a.height(), a.width());
  if (scales < 2) {
    throw std::invalid_argument("ms_ssim: image " + std::to_string(a.height()) + "x" +
                                std::to_string(a.width()) + " too small for 2 scales");
  }
  double weight_total = 0.0;
  for (int j = 0; j < scales; ++j) weight_total += kMsSsimWeights[j];
  double result = 0.0;
  for (int c = 0; c < 3; ++c) {
    int h = a.height();
    int w = a.width();
    Plane pa(a.data.plane(0, c), a.data.plane(0, c) + static_cast<std::size_t>(h) * w);
    Plane pb(b.data.plane(0, c), b.data.plane(0, c) + static_cast<std::size_t>(h) * w);
    double value = 1.0;
    for (int j = 0; j < scales; ++j) {
      const SsimTerms t = ssim_terms(pa, pb, h, w);
      const double weight = kMsSsimWeights[j] / weight_total;
      const double term = (j + 1 == scales) ? t.ssim : t.cs;
      value *= std::pow(std::max(term, 0.0), weight);
      if (j + 1 < scales) {
        pa = downsample(pa, h, w);
        pb = downsample(pb, h, w);
        h /= 2;
        w /= 2;
      }
    }
    result += value / 3.0;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Perceptual distance

double PerceptualMetric::operator()(const ImageTensor& a, const ImageTensor& b) const {
  ag::NoGradGuard guard;
  return ag::scalar(distance(ag::constant(a.data), ag::constant(b.data)));
}

RandomFeatureDistance::RandomFeatureDistance(std::uint64_t seed) {
  Rng rng(seed);
  for (int s = 0; s < kScales; ++s) {
    Tensor w({kFeatures, 3, 3, 3});
    for (int f = 0; f < kFeatures; ++f) {
      // Zero-mean filters respond to structure rather than flat intensity.
      double mean = 0.0;
      std::vector<double> taps(27);
      for (double& t : taps) {
        t = rng.normal();
        mean += t / 27.0;
      }
      for (int i = 0; i < 27; ++i)
        w[f * 27 + i] = static_cast<float>((taps[i] - mean) / std::sqrt(27.0));
    }
    Tensor b({kFeatures, 1, 1, 1});
    for (float& v : b.values()) v = static_cast<float>(rng.uniform(-0.1, 0.1));
    weights_.push_back(ag::constant(std::move(w)));
    biases_.push_back(ag::constant(std::move(b)));
  }
}

ag::Var RandomFeatureDistance::distance(const ag::Var& a, const ag::Var& b) const {
  require_same_shape(a->shape(), b->shape(), "perceptual distance");
  ag::Var xa = ag::add_scalar(ag::scale(a, 2.0f), -1.0f);
  ag::Var xb = ag::add_scalar(ag::scale(b, 2.0f), -1.0f);
  std::vector<ag::Var> terms;
  for (int s = 0; s < kScales; ++s) {
    if (s > 0) {
      if (xa->shape().h < 2 || xa->shape().w < 2) break;
      xa = ag::avg_pool2(xa);
      xb = ag::avg_pool2(xb);
    }
    auto features = [&](const ag::Var& x) {
      return ag::channel_normalize(
          nn::lrelu(ag::conv2d(x, weights_[s], biases_[s], 1, 1)));
    };
    terms.push_back(ag::mse(features(xa), features(xb)));
  }
  return ag::scale(ag::sum_all(terms), static_cast<float>(kFeatures) / terms.size());
}

std::shared_ptr<const PerceptualMetric> default_perceptual() {
  static const auto instance = std::make_shared<const RandomFeatureDistance>();
  return instance;
}

// ---------------------------------------------------------------------------
// Timing and RD aggregation

Timing time_decode(const std::function<void()>& fn, int warmup, int reps) {
  for (int i = 0; i < warmup; ++i) fn();
  std::vector<double> ms;
  ms.reserve(reps);
  for (int i = 0; i < reps; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  std::sort(ms.begin(), ms.end());
  Timing t;
  t.reps = reps;
  if (ms.empty()) return t;
  t.min_ms = ms.front();
  t.median_ms = ms.size() % 2 ? ms[ms.size() / 2]
                              : 0.5 * (ms[ms.size() / 2 - 1] + ms[ms.size() / 2]);
  t.p90_ms = ms[std::min(ms.size() - 1, static_cast<std::size_t>(std::ceil(0.9 * ms.size())) - 1)];
  return t;
}

RDPoint collect_rd(const std::string& label, double bpp,
                   const std::vector<ImageTensor>& reference,
                   const std::vector<ImageTensor>& decoded, double decode_ms,
                   const PerceptualMetric& dp) {
  if (reference.size() != decoded.size()) {
    throw std::invalid_argument("collect_rd: frame count mismatch");
  }
  RDPoint p;
  p.label = label;
  p.bpp = bpp;
  p.decode_ms = decode_ms;
  if (reference.empty()) return p;
  const bool with_ssim =
      ms_ssim_scales(reference.front().height(), reference.front().width()) >= 2;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    p.psnr += psnr(reference[i], decoded[i]);
    p.ms_ssim += with_ssim ? ms_ssim(reference[i], decoded[i]) : 0.0;
    p.d_p += dp(reference[i], decoded[i]);
  }
  const double n = static_cast<double>(reference.size());
  p.psnr /= n;
  p.ms_ssim = with_ssim ? p.ms_ssim / n : std::numeric_limits<double>::quiet_NaN();
  p.d_p /= n;
  return p;
}

namespace {

void sort_by_bpp(std::vector<RDPoint>& points) {
  std::stable_sort(points.begin(), points.end(),
                   [](const RDPoint& a, const RDPoint& b) { return a.bpp < b.bpp; });
}

}  // namespace

std::string rd_to_csv(std::vector<RDPoint> points) {
  sort_by_bpp(points);
  std::ostringstream out;
  out << kRdCsvHeader << "\n" << std::setprecision(8);
  for (const auto& p : points) {
    out << p.label << "," << p.bpp << "," << p.psnr << "," << p.ms_ssim << "," << p.d_p
        << "," << p.decode_ms << "\n";
  }
  return out.str();
}

std::string rd_to_json(std::vector<RDPoint> points) {
  sort_by_bpp(points);
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (const auto& p : points) {
    nlohmann::ordered_json row;
    row["label"] = p.label;
    row["bpp"] = p.bpp;
    row["psnr"] = p.psnr;
    row["ms_ssim"] = std::isnan(p.ms_ssim) ? nlohmann::ordered_json() : nlohmann::ordered_json(p.ms_ssim);
    row["d_p"] = p.d_p;
    row["decode_ms"] = p.decode_ms;
    rows.push_back(std::move(row));
  }
  return rows.dump(2) + "\n";
}

void write_rd(const std::vector<RDPoint>& points, const std::filesystem::path& csv,
              const std::filesystem::path& json) {
  std::ofstream c(csv);
  std::ofstream j(json);
  if (!c || !j) throw IoError("cannot write RD outputs next to " + csv.string());
  c << rd_to_csv(points);
  j << rd_to_json(points);
}

}  // namespace mdc::metrics
