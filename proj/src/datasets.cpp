#include "mdc/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace mdc::data {

namespace fs = std::filesystem;

SynthKind parse_synth_kind(const std::string& name) {
  if (name == "moving_texture") return SynthKind::moving_texture;
  if (name == "noise_bg_face_like") return SynthKind::noise_bg_face_like;
  if (name == "panning_gradient") return SynthKind::panning_gradient;
  throw std::invalid_argument("unknown sequence kind: " + name);
}

std::string to_string(SynthKind kind) {
  switch (kind) {
    case SynthKind::moving_texture: return "moving_texture";
    case SynthKind::noise_bg_face_like: return "noise_bg_face_like";
    case SynthKind::panning_gradient: return "panning_gradient";
  }
  return "unknown";
}

namespace {

struct Wave {
  double fy, fx, phase, amp;
};

float smoothstep(float edge0, float edge1, float x) {
  const float t = std::clamp((x - edge0) / (edge1 - edge0), 0.0f, 1.0f);
  return t * t * (3.0f - 2.0f * t);
}

// Texture defined on continuous coordinates so shifted frames are exact
// integer translations of one another.
SequenceSource moving_texture(int frames, int width, int height, Rng& rng) {
  constexpr int kWaves = 14;
  std::vector<Wave> waves[3];
  for (auto& channel : waves) {
    for (int k = 0; k < kWaves; ++k) {
      const double freq = rng.uniform(0.05, 0.35);
      const double angle = rng.uniform(0.0, M_PI);
      channel.push_back({freq * std::sin(angle), freq * std::cos(angle),
                         rng.uniform(0.0, 2 * M_PI), rng.uniform(0.5, 1.0)});
    }
  }
  const double mix = rng.uniform(0.3, 0.7);
  SequenceSource seq;
  seq.true_flow = FlowVector{0.0f, 1.0f};
  for (int t = 0; t < frames; ++t) {
    ImageTensor img = ImageTensor::zeros(height, width);
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        double base[3];
        for (int c = 0; c < 3; ++c) {
          double s = 0.0;
          for (const Wave& w : waves[c])
            s += w.amp * std::sin(w.fy * y + w.fx * (x + t) + w.phase);
          base[c] = s / std::sqrt(kWaves / 2.0);
        }
        const double luma = (base[0] + base[1] + base[2]) / 3.0;
        for (int c = 0; c < 3; ++c) {
          const double v = mix * luma + (1.0 - mix) * base[c];
          img.data.at(0, c, y, x) = static_cast<float>(0.5 + 0.45 * std::tanh(v));
        }
      }
    seq.frames.push_back(std::move(img));
  }
  return seq;
}

SequenceSource face_like(int frames, int width, int height, Rng& rng) {
  const float cx0 = static_cast<float>(rng.uniform(0.4, 0.6) * width);
  const float cy = static_cast<float>(rng.uniform(0.45, 0.55) * height);
  const float rx = 0.22f * width;
  const float ry = 0.30f * height;
  const float drift = static_cast<float>(rng.uniform(0.3, 0.6));
  const float skin[3] = {static_cast<float>(rng.uniform(0.75, 0.9)),
                         static_cast<float>(rng.uniform(0.55, 0.7)),
                         static_cast<float>(rng.uniform(0.45, 0.6))};
  SequenceSource seq;
  for (int t = 0; t < frames; ++t) {
    const float cx = cx0 + drift * t;
    ImageTensor img = ImageTensor::zeros(height, width);
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        const float nx = (x - cx) / rx;
        const float ny = (y - cy) / ry;
        const float r = std::sqrt(nx * nx + ny * ny);
        const float inside = 1.0f - smoothstep(0.9f, 1.02f, r);
        const float shade = 0.75f + 0.25f * (1.0f - r) - 0.1f * ny;
        auto blob = [&](float bx, float by, float sx, float sy) {
          const float dx = (nx - bx) / sx;
          const float dy = (ny - by) / sy;
          return 1.0f - smoothstep(0.8f, 1.0f, std::sqrt(dx * dx + dy * dy));
        };
        const float eyes = std::max(blob(-0.38f, -0.2f, 0.16f, 0.08f),
                                    blob(0.38f, -0.2f, 0.16f, 0.08f));
        const float mouth = blob(0.0f, 0.45f, 0.3f, 0.06f);
        for (int c = 0; c < 3; ++c) {
          const float bg = 0.06f + 0.035f * static_cast<float>(rng.normal());
          float face = skin[c] * shade;
          face = face * (1.0f - 0.85f * eyes) * (1.0f - 0.6f * mouth);
          img.data.at(0, c, y, x) = std::clamp(inside * face + (1.0f - inside) * bg, 0.0f, 1.0f);
        }
      }
    seq.frames.push_back(std::move(img));
  }
  return seq;
}

SequenceSource panning_gradient(int frames, int width, int height, Rng& rng) {
  double phase[3], freq[3], tilt[3];
  for (int c = 0; c < 3; ++c) {
    phase[c] = rng.uniform(0.0, 2 * M_PI);
    freq[c] = rng.uniform(0.01, 0.04);
    tilt[c] = rng.uniform(-0.3, 0.3);
  }
  const double vx = rng.uniform(1.0, 2.0);
  const double vy = rng.uniform(0.2, 0.6);
  SequenceSource seq;
  for (int t = 0; t < frames; ++t) {
    ImageTensor img = ImageTensor::zeros(height, width);
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        const double gx = x + vx * t;
        const double gy = y + vy * t;
        for (int c = 0; c < 3; ++c) {
          const double v = 0.5 + 0.3 * std::sin(freq[c] * gx + phase[c]) +
                           tilt[c] * (gy / height - 0.5);
          img.data.at(0, c, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      }
    seq.frames.push_back(std::move(img));
  }
  return seq;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

GeneratorSpec parse_generator_spec(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open generator spec " + path.string());
  GeneratorSpec spec;
  spec.id = path.stem().string();
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument(path.string() + ":" + std::to_string(line_no) +
                                  ": expected key=value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key == "kind") spec.kind = parse_synth_kind(value);
    else if (key == "frames") spec.frames = std::stoi(value);
    else if (key == "width") spec.width = std::stoi(value);
    else if (key == "height") spec.height = std::stoi(value);
    else if (key == "size") spec.width = spec.height = std::stoi(value);
    else if (key == "seed") spec.seed = std::stoull(value);
    else if (key == "id") spec.id = value;
    else
      throw std::invalid_argument(path.string() + ": unknown key '" + key + "'");
  }
  return spec;
}

SequenceSource synth_sequence(SynthKind kind, int frames, int width, int height,
                              std::uint64_t seed) {
  if (frames < 1 || width < 1 || height < 1) {
    throw std::invalid_argument("synth_sequence: frames and size must be >= 1");
  }
  Rng rng(seed * 0x2545F4914F6CDD1DULL + static_cast<int>(kind) + 1);
  SequenceSource seq;
  switch (kind) {
    case SynthKind::moving_texture: seq = moving_texture(frames, width, height, rng); break;
    case SynthKind::noise_bg_face_like: seq = face_like(frames, width, height, rng); break;
    case SynthKind::panning_gradient: seq = panning_gradient(frames, width, height, rng); break;
  }
  seq.id = to_string(kind) + "_" + std::to_string(seed);
  seq.width = width;
  seq.height = height;
  return seq;
}

SequenceSource synth_sequence(const GeneratorSpec& spec) {
  SequenceSource seq = synth_sequence(spec.kind, spec.frames, spec.width, spec.height, spec.seed);
  if (!spec.id.empty()) seq.id = spec.id;
  return seq;
}

namespace {

SequenceSource load_raw(const fs::path& path) {
  fs::path dims_path = path;
  dims_path += ".dims";
  std::ifstream dims(dims_path);
  if (!dims) throw IoError("missing sidecar " + dims_path.string());
  int w = 0, h = 0, frames = -1;
  dims >> w >> h;
  if (!(dims >> frames)) frames = -1;
  if (w < 1 || h < 1) throw IoError("bad dimensions in " + dims_path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::size_t frame_bytes = static_cast<std::size_t>(w) * h * 3;
  if (bytes.empty() || bytes.size() % frame_bytes != 0) {
    throw IoError(path.string() + ": size is not a multiple of one frame");
  }
  const int available = static_cast<int>(bytes.size() / frame_bytes);
  if (frames < 0) frames = available;
  if (frames > available) throw IoError(path.string() + ": fewer frames than declared");
  SequenceSource seq;
  seq.id = path.stem().string();
  seq.width = w;
  seq.height = h;
  for (int t = 0; t < frames; ++t) {
    ImageTensor img = ImageTensor::zeros(h, w);
    const auto* base = reinterpret_cast<const std::uint8_t*>(bytes.data()) + t * frame_bytes;
    for (std::size_t i = 0; i < frame_bytes; ++i) img.data[i] = base[i] / 255.0f;
    seq.frames.push_back(std::move(img));
  }
  return seq;
}

}  // namespace

SequenceSource load_sequence(const fs::path& path) {
  if (fs::is_directory(path)) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(path)) {
      const auto ext = entry.path().extension().string();
      if (entry.is_regular_file() && (ext == ".png" || ext == ".ppm")) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw IoError("no .png/.ppm frames in " + path.string());
    SequenceSource seq;
    seq.id = path.filename().string();
    for (const auto& f : files) {
      ImageTensor img = read_image(f);
      if (!seq.frames.empty() &&
          (img.width() != seq.width || img.height() != seq.height)) {
        throw IoError("mixed frame dimensions in " + path.string() + " (" +
                      f.filename().string() + ")");
      }
      seq.width = img.width();
      seq.height = img.height();
      seq.frames.push_back(std::move(img));
    }
    return seq;
  }
  if (!fs::exists(path)) throw IoError("no such file: " + path.string());
  const auto ext = path.extension().string();
  if (ext == ".spec" || ext == ".cfg") return synth_sequence(parse_generator_spec(path));
  if (ext == ".rgb") return load_raw(path);
  ImageTensor img = read_image(path);
  SequenceSource seq;
  seq.id = path.stem().string();
  seq.width = img.width();
  seq.height = img.height();
  seq.frames.push_back(std::move(img));
  return seq;
}

void write_sequence(const std::vector<ImageTensor>& frames, const fs::path& dir) {
  fs::create_directories(dir);
  for (std::size_t i = 0; i < frames.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%05zu.png", i);
    write_png(frames[i], dir / name);
  }
}

std::vector<CropWindow> sample_crop_windows(int frames, int height, int width,
                                            int crop, int align, int count,
                                            Rng& rng) {
  if (crop > height || crop > width) {
    throw std::invalid_argument("crop " + std::to_string(crop) + " larger than frame " +
                                std::to_string(height) + "x" + std::to_string(width));
  }
  if (frames < 1) throw std::invalid_argument("sample_crop_windows: no frames");
  align = std::max(align, 1);
  const int rows = (height - crop) / align + 1;
  const int cols = (width - crop) / align + 1;
  std::vector<CropWindow> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    CropWindow w;
    w.frame = rng.below(frames);
    w.top = rng.below(rows) * align;
    w.left = rng.below(cols) * align;
    out.push_back(w);
  }
  return out;
}

std::vector<ImageTensor> sample_crops(const SequenceSource& source, int crop,
                                      int count, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<ImageTensor> out;
  for (const CropWindow& w : sample_crop_windows(source.frame_count(), source.height,
                                                 source.width, crop, 1, count, rng)) {
    out.emplace_back(source.frames[w.frame].data.crop(w.top, w.left, crop, crop));
  }
  return out;
}

double mean_gradient_magnitude(const SequenceSource& source) {
  double acc = 0.0;
  std::size_t count = 0;
  for (const auto& f : source.frames) {
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y + 1 < f.height(); ++y)
        for (int x = 0; x + 1 < f.width(); ++x) {
          const double gx = f.data.at(0, c, y, x + 1) - f.data.at(0, c, y, x);
          const double gy = f.data.at(0, c, y + 1, x) - f.data.at(0, c, y, x);
          acc += std::sqrt(gx * gx + gy * gy);
          ++count;
        }
  }
  return count ? acc / count : 0.0;
}

}  // namespace mdc::data
