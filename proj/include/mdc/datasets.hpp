#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mdc/image.hpp"
#include "mdc/nn.hpp"

namespace mdc::data {

enum class SynthKind { moving_texture, noise_bg_face_like, panning_gradient };

SynthKind parse_synth_kind(const std::string& name);
std::string to_string(SynthKind kind);

/// Constant displacement between consecutive frames in warp convention:
/// frame[t+1](i, j) == frame[t](i + dy, j + dx).
struct FlowVector {
  float dy = 0.0f;
  float dx = 0.0f;
};

struct SequenceSource {
  std::string id;
  int width = 0;
  int height = 0;
  std::vector<ImageTensor> frames;
  std::optional<FlowVector> true_flow;

  int frame_count() const { return static_cast<int>(frames.size()); }
};

struct GeneratorSpec {
  SynthKind kind = SynthKind::moving_texture;
  int frames = 25;
  int width = 128;
  int height = 128;
  std::uint64_t seed = 0;
  std::string id;
};

/// key=value lines; '#' starts a comment. Unknown keys are rejected.
GeneratorSpec parse_generator_spec(const std::filesystem::path& path);

SequenceSource synth_sequence(SynthKind kind, int frames, int width, int height,
                              std::uint64_t seed);
SequenceSource synth_sequence(const GeneratorSpec& spec);

/// Accepts a directory of .png/.ppm frames (lexicographic order), a generator
/// spec file (.spec/.cfg), or a planar 8-bit .rgb file with a sidecar
/// `<file>.dims` holding "width height [frames]".
SequenceSource load_sequence(const std::filesystem::path& path);

/// Writes frames as zero-padded numbered PNGs.
void write_sequence(const std::vector<ImageTensor>& frames,
                    const std::filesystem::path& dir);

struct CropWindow {
  int frame = 0;
  int top = 0;
  int left = 0;
};

/// Uniform top-left corners restricted to multiples of `align`.
std::vector<CropWindow> sample_crop_windows(int frames, int height, int width,
                                            int crop, int align, int count,
                                            Rng& rng);

std::vector<ImageTensor> sample_crops(const SequenceSource& source, int crop,
                                      int count, std::uint64_t seed);

/// Mean |∇I| over all frames, channels and interior pixels.
double mean_gradient_magnitude(const SequenceSource& source);

}  // namespace mdc::data
