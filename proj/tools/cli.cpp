#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "mdc/bitstream.hpp"
#include "mdc/codec_core.hpp"
#include "mdc/datasets.hpp"
#include "mdc/distill.hpp"
#include "mdc/image_codec.hpp"
#include "mdc/metrics.hpp"
#include "mdc/micro_rn.hpp"
#include "mdc/video_lrc.hpp"

namespace mdc::cli {
namespace {

namespace fs = std::filesystem;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// ---------------------------------------------------------------------------
// Config files: key=value lines, '#' comments. Each key is a long flag name
// of the selected command; flags on the command line win.

std::vector<std::pair<std::string, std::string>> read_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(n) + ": expected key=value");
    }
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return out;
}

/// Splices config-file entries in front of the user's flags, skipping keys
/// the user already set.
std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  std::vector<std::string> rest;
  std::optional<fs::path> config;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      config = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      config = args[i].substr(9);
    } else {
      rest.push_back(args[i]);
    }
  }
  std::vector<std::string> out{args.empty() ? "mdc" : args[0]};
  if (!config || rest.empty()) {
    out.insert(out.end(), rest.begin(), rest.end());
    return out;
  }
  std::set<std::string> given;
  for (const auto& a : rest) {
    if (a.rfind("--", 0) == 0) given.insert(a.substr(2, a.find('=') - 2));
  }
  out.push_back(rest.front());  // subcommand
  for (const auto& [key, value] : read_config(*config)) {
    if (!given.count(key)) {
      out.push_back("--" + key);
      out.push_back(value);
    }
  }
  out.insert(out.end(), rest.begin() + 1, rest.end());
  return out;
}

// ---------------------------------------------------------------------------
// Helpers

void check_output(const fs::path& path, bool force) {
  if (path.empty()) throw ConfigError("missing output path");
  if (fs::exists(path) && !force) {
    throw ConfigError(path.string() + " exists; pass --force to overwrite");
  }
}

void check_output_dir(const fs::path& dir, bool force) {
  if (dir.empty()) throw ConfigError("missing output directory");
  if (fs::exists(dir) && !fs::is_empty(dir) && !force) {
    throw ConfigError(dir.string() + " is not empty; pass --force to overwrite");
  }
  fs::create_directories(dir);
}

TeacherModel load_teacher(const fs::path& path) { return parse_teacher(read_file(path)); }

WeightBundle load_bundle(const fs::path& path) { return parse_bundle(read_file(path)); }

std::vector<ImageTensor> load_frames(const std::vector<std::string>& inputs) {
  std::vector<ImageTensor> frames;
  for (const auto& in : inputs) {
    const auto seq = data::load_sequence(in);
    frames.insert(frames.end(), seq.frames.begin(), seq.frames.end());
  }
  return frames;
}

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw ConfigError("bad integer list '" + text + "'");
    }
  }
  if (out.empty()) throw ConfigError("empty integer list");
  return out;
}

Precision parse_precision(int bits) {
  if (bits == 32) return Precision::f32;
  if (bits == 16) return Precision::f16;
  throw ConfigError("precision must be 16 or 32");
}

bool every(int step, int n) { return n > 0 && step % n == 0; }

// ---------------------------------------------------------------------------
// Commands

struct Common {
  bool force = false;
  int log_every = 100;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_flag("--force", c.force, "Overwrite existing outputs");
  cmd->add_option("--log-every", c.log_every, "Progress line interval (0 = quiet)");
}

struct TrainTeacherArgs {
  Common common;
  std::vector<std::string> inputs;
  std::string out;
  CodecConfig codec;
  TeacherTrainConfig train;
};

void train_teacher_cmd(const TrainTeacherArgs& a, std::ostream& out) {
  a.codec.validate();
  check_output(a.out, a.common.force);
  const auto frames = load_frames(a.inputs);
  const TeacherModel m = train_teacher(frames, a.codec, a.train, *metrics::default_perceptual(),
                                       [&](const TrainLogEntry& e) {
                                         if (every(e.step, a.common.log_every))
                                           out << "step=" << e.step << " loss=" << e.loss
                                               << " bpp=" << e.bpp << " mse=" << e.mse << "\n";
                                       });
  write_file(a.out, serialize_teacher(m));
  out << "teacher: " << count_elements(m.params()) << " parameters, "
      << teacher_decoder_params(m) << " in the decoder -> " << a.out << "\n";
}

struct DistillArgs {
  Common common;
  std::string teacher;
  std::vector<std::string> inputs;
  std::string out;
  std::string id;
  int stride = 10;
  int precision = 32;
  MicroRNConfig rn;
  DistillConfig cfg;
};

void distill_cmd(const DistillArgs& a, std::ostream& out) {
  a.cfg.validate();
  const Precision precision = parse_precision(a.precision);
  check_output(a.out, a.common.force);
  const TeacherModel teacher = load_teacher(a.teacher);
  MicroRNConfig rn = a.rn;
  if (rn.io_channels <= 0) rn.io_channels = teacher.config().trunk_channels;
  rn.validate();
  const std::string id = a.id.empty() ? fs::path(a.inputs.front()).stem().string() : a.id;
  const Subset subset = make_subset(load_frames(a.inputs), a.stride, id);
  WeightBundle bundle =
      distill(teacher, subset, rn, a.cfg, *metrics::default_perceptual(),
              [&](const DistillLogEntry& e) {
                if (every(e.step, a.common.log_every)) out << format_log(e) << "\n";
              });
  if (precision != Precision::f32) {
    bundle = pack_weight_bundle(unpack_weight_bundle(bundle), bundle.subset_id, precision);
  }
  write_file(a.out, serialize_bundle(bundle));
  const StudentEval ev = evaluate_student(teacher, bundle, subset.frames, a.cfg.k_M, a.cfg.k_p);
  out << "subset '" << id << "': " << subset.frames.size() << " frames, "
      << count_params(rn) << " Micro-RN parameters, " << bundle_size_bytes(bundle)
      << " bytes\n"
      << "psnr_to_teacher=" << ev.mean.psnr_to_teacher
      << " (trunk-skipped " << ev.mean.coarse_psnr_to_teacher << ") kd_loss=" << ev.mean.kd_loss
      << " (trunk-skipped " << ev.mean.coarse_kd_loss << ")\n";
}

struct EncodeImageArgs {
  Common common;
  std::string teacher, input, out, bundle;
};

void encode_image_cmd(const EncodeImageArgs& a, std::ostream& out) {
  check_output(a.out, a.common.force);
  const TeacherModel teacher = load_teacher(a.teacher);
  std::optional<WeightBundle> bundle;
  if (!a.bundle.empty()) bundle = load_bundle(a.bundle);
  const ImageTensor x = read_image(a.input);
  const Bytes raw = serialize_image(encode_image(x, teacher, bundle));
  write_file(a.out, raw);
  out << a.out << ": " << raw.size() << " bytes, "
      << 8.0 * raw.size() / (static_cast<double>(x.height()) * x.width()) << " bpp\n";
}

struct DecodeImageArgs {
  Common common;
  std::string teacher, input, out;
  bool force_teacher = false;
};

void decode_image_cmd(const DecodeImageArgs& a, std::ostream& out) {
  check_output(a.out, a.common.force);
  const TeacherModel teacher = load_teacher(a.teacher);
  const ImageBitstream bs = parse_image(read_file(a.input));
  write_image(decode_image(bs, teacher, a.force_teacher), a.out);
  out << a.out << ": " << bs.width << "x" << bs.height << " decoded with "
      << (bs.bundle && !a.force_teacher ? "student" : "teacher") << "\n";
}

struct TrainVideoArgs {
  Common common;
  std::string teacher, out;
  std::vector<std::string> inputs;
  VideoConfig video;
  VideoTrainConfig train;
};

void train_video_cmd(const TrainVideoArgs& a, std::ostream& out) {
  a.video.validate();
  check_output(a.out, a.common.force);
  auto teacher = std::make_shared<const TeacherModel>(load_teacher(a.teacher));
  std::vector<std::vector<ImageTensor>> seqs;
  for (const auto& in : a.inputs) seqs.push_back(data::load_sequence(in).frames);
  const VideoModel m = train_video(seqs, teacher, a.video, a.train, *metrics::default_perceptual(),
                                   [&](const VideoLogEntry& e) {
                                     if (every(e.step, a.common.log_every))
                                       out << "phase=" << e.phase << " step=" << e.step
                                           << " loss=" << e.loss << " w_bpp=" << e.w_bpp
                                           << " r_bpp=" << e.r_bpp << " mse=" << e.mse << "\n";
                                   });
  write_file(a.out, serialize_video_model(m));
  out << "video model (" << count_elements(m.params()) << " parameters) -> " << a.out << "\n";
}

struct VideoModelArgs {
  std::string teacher, video_model;

  VideoModel load() const {
    auto teacher_ptr = std::make_shared<const TeacherModel>(load_teacher(teacher));
    return parse_video_model(read_file(video_model), teacher_ptr);
  }
};

struct EncodeVideoArgs {
  Common common;
  VideoModelArgs model;
  std::string input, out, bundle, recon_dir;
  int gop = 10;
};

void encode_video_cmd(const EncodeVideoArgs& a, std::ostream& out) {
  if (a.gop < 0) throw ConfigError("--gop must be >= 0");
  check_output(a.out, a.common.force);
  if (!a.recon_dir.empty()) check_output_dir(a.recon_dir, a.common.force);
  const VideoModel model = a.model.load();
  const auto seq = data::load_sequence(a.input);
  EncodeOptions opts;
  opts.gop = a.gop;
  if (!a.bundle.empty()) opts.bundle = load_bundle(a.bundle);
  std::vector<ImageTensor> recon;
  const GOPBitstream bs = encode_gop(seq.frames, model, opts, &recon);
  write_file(a.out, serialize_gop(bs));
  if (!a.recon_dir.empty()) data::write_sequence(recon, a.recon_dir);
  const auto n = static_cast<std::uint64_t>(seq.frames.size());
  out << a.out << ": " << n << " frames, " << bs.gops.size() << " GOPs, payload "
      << total_bpp(bs, n, seq.width, seq.height, false) << " bpp, with bundle "
      << total_bpp(bs, n, seq.width, seq.height, true) << " bpp\n";
}

struct DecodeVideoArgs {
  Common common;
  VideoModelArgs model;
  std::string input, out_dir, bundle;
  bool force_teacher = false;
};

void decode_video_cmd(const DecodeVideoArgs& a, std::ostream& out) {
  check_output_dir(a.out_dir, a.common.force);
  const VideoModel model = a.model.load();
  const GOPBitstream bs = parse_gop(read_file(a.input));
  std::optional<WeightBundle> bundle;
  if (!a.bundle.empty()) bundle = load_bundle(a.bundle);
  const auto frames = decode_gop(bs, model, bundle ? &*bundle : nullptr, a.force_teacher);
  data::write_sequence(frames, a.out_dir);
  out << a.out_dir << ": " << frames.size() << " frames\n";
}

struct BenchArgs {
  Common common;
  std::string teacher, input, bundle, out;
  MicroRNConfig rn;
  int warmup = 3;
  int reps = 20;
};

void bench_cmd(const BenchArgs& a, std::ostream& out) {
  if (!a.out.empty()) check_output(a.out, a.common.force);
  if (a.reps < 1 || a.warmup < 0) throw ConfigError("--reps >= 1 and --warmup >= 0 required");
  const TeacherModel teacher = load_teacher(a.teacher);
  MicroRNConfig rn_cfg = a.rn;
  if (rn_cfg.io_channels <= 0) rn_cfg.io_channels = teacher.config().trunk_channels;
  const MicroRN rn = a.bundle.empty() ? MicroRN(rn_cfg, 0) : unpack_weight_bundle(load_bundle(a.bundle));
  const QuantizedLatent y = quantize_round(encode(read_image(a.input), teacher));
  const auto t_full = metrics::time_decode([&] { decode_full(y, teacher); }, a.warmup, a.reps);
  const auto t_student =
      metrics::time_decode([&] { student_decode(y, teacher, rn); }, a.warmup, a.reps);
  const auto t_lb =
      metrics::time_decode([&] { decode_without_resblocks(y, teacher); }, a.warmup, a.reps);

  const std::size_t p_teacher = teacher_decoder_params(teacher);
  const std::size_t p_student = student_decoder_params(teacher, rn.config());
  const std::size_t p_lb = p_teacher - count_elements(teacher.trunk_params());
  struct Row {
    const char* name;
    std::size_t params;
    metrics::Timing t;
  };
  const Row rows[] = {{"teacher", p_teacher, t_full},
                      {"student", p_student, t_student},
                      {"lower_bound", p_lb, t_lb}};
  out << std::left << std::setw(12) << "decoder" << std::right << std::setw(12) << "params"
      << std::setw(12) << "median_ms" << std::setw(12) << "min_ms" << std::setw(12) << "p90_ms"
      << "\n";
  nlohmann::ordered_json json = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    out << std::left << std::setw(12) << r.name << std::right << std::setw(12) << r.params
        << std::fixed << std::setprecision(3) << std::setw(12) << r.t.median_ms << std::setw(12)
        << r.t.min_ms << std::setw(12) << r.t.p90_ms << "\n"
        << std::defaultfloat;
    json.push_back({{"decoder", r.name},
                    {"params", r.params},
                    {"median_ms", r.t.median_ms},
                    {"min_ms", r.t.min_ms},
                    {"p90_ms", r.t.p90_ms},
                    {"reps", r.t.reps}});
  }
  out << "student/teacher time " << t_student.median_ms / t_full.median_ms
      << ", student/lower-bound time " << t_student.median_ms / t_lb.median_ms << "\n";
  if (!a.out.empty()) {
    std::ofstream f(a.out);
    if (!f) throw IoError("cannot write " + a.out);
    f << json.dump(2) << "\n";
  }
}

struct AblateArgs {
  Common common;
  std::string teacher, out_dir, channels = "8,16,32", blocks = "1,2";
  std::vector<std::string> inputs;
  int io_channels = 0;
  int stride = 10;
  DistillConfig cfg;
};

void ablate_cmd(const AblateArgs& a, std::ostream& out) {
  const auto chs = parse_int_list(a.channels);
  const auto bs = parse_int_list(a.blocks);
  check_output_dir(a.out_dir, a.common.force);
  std::optional<TeacherModel> teacher;
  if (!a.teacher.empty()) teacher.emplace(load_teacher(a.teacher));
  const int io = a.io_channels > 0 ? a.io_channels
                                   : (teacher ? teacher->config().trunk_channels : 64);

  std::ofstream table(fs::path(a.out_dir) / "params.csv");
  if (!table) throw IoError("cannot write into " + a.out_dir);
  table << "hidden_channels,blocks,io_channels,params\n";
  out << std::setw(8) << "C_h" << std::setw(8) << "B" << std::setw(12) << "params\n";
  for (int ch : chs)
    for (int b : bs) {
      const MicroRNConfig c{ch, b, io};
      c.validate();
      table << ch << "," << b << "," << io << "," << count_params(c) << "\n";
      out << std::setw(8) << ch << std::setw(8) << b << std::setw(11) << count_params(c) << "\n";
    }
  if (!teacher || a.inputs.empty()) return;

  a.cfg.validate();
  const Subset subset = make_subset(load_frames(a.inputs), a.stride, "ablation");
  const int w = subset.frames.front().width();
  const int h = subset.frames.front().height();
  double bits = 0.0;
  for (const auto& f : subset.frames) {
    bits += 8.0 * static_cast<double>(serialize_image(encode_image(f, *teacher)).size());
  }
  const double bpp = bits / (static_cast<double>(subset.frames.size()) * w * h);
  std::ofstream rd(fs::path(a.out_dir) / "ablation.csv");
  rd << "hidden_channels,blocks,params,bpp,psnr,ms_ssim,d_p,psnr_to_teacher,kd_loss\n";
  for (int ch : chs)
    for (int b : bs) {
      const MicroRNConfig c{ch, b, io};
      const WeightBundle bundle = distill(*teacher, subset, c, a.cfg);
      const StudentEval ev = evaluate_student(*teacher, bundle, subset.frames, a.cfg.k_M, a.cfg.k_p);
      rd << ch << "," << b << "," << count_params(c) << "," << bpp << "," << ev.mean.psnr << ","
         << ev.mean.ms_ssim << "," << ev.mean.d_p << "," << ev.mean.psnr_to_teacher << ","
         << ev.mean.kd_loss << "\n";
      out << "C_h=" << ch << " B=" << b << " psnr=" << ev.mean.psnr
          << " psnr_to_teacher=" << ev.mean.psnr_to_teacher << "\n";
    }
}

struct ReportArgs {
  Common common;
  VideoModelArgs model;
  std::string input, bundle, out_dir, label;
  int gop = 10;
};

void report_cmd(const ReportArgs& a, std::ostream& out) {
  check_output_dir(a.out_dir, a.common.force);
  const VideoModel model = a.model.load();
  const auto seq = data::load_sequence(a.input);
  const auto n = static_cast<std::uint64_t>(seq.frames.size());
  const std::string label = a.label.empty() ? seq.id : a.label;
  const auto& dp = *metrics::default_perceptual();
  std::vector<metrics::RDPoint> points;

  auto timed_decode = [&](const GOPBitstream& bs, const WeightBundle* b, bool teacher_only,
                          double& ms) {
    std::vector<ImageTensor> frames;
    ms = metrics::time_decode([&] { frames = decode_gop(bs, model, b, teacher_only); }, 0, 1)
             .median_ms /
         static_cast<double>(n);
    return frames;
  };
  double ms = 0.0;
  const GOPBitstream intra = encode_all_intra(seq.frames, model);
  auto dec = timed_decode(intra, nullptr, true, ms);
  points.push_back(metrics::collect_rd(label + "/intra", total_bpp(intra, n, seq.width, seq.height, false),
                                       seq.frames, dec, ms, dp));
  EncodeOptions opts;
  opts.gop = a.gop;
  const GOPBitstream video = encode_gop(seq.frames, model, opts);
  dec = timed_decode(video, nullptr, true, ms);
  points.push_back(metrics::collect_rd(label + "/video", total_bpp(video, n, seq.width, seq.height, false),
                                       seq.frames, dec, ms, dp));
  if (!a.bundle.empty()) {
    opts.bundle = load_bundle(a.bundle);
    const GOPBitstream student = encode_gop(seq.frames, model, opts);
    dec = timed_decode(student, nullptr, false, ms);
    for (bool with : {false, true}) {
      points.push_back(metrics::collect_rd(
          label + (with ? "/video+student+bundle" : "/video+student"),
          total_bpp(student, n, seq.width, seq.height, with), seq.frames, dec, ms, dp));
    }
  }
  const fs::path dir(a.out_dir);
  metrics::write_rd(points, dir / "rd.csv", dir / "rd.json");
  out << metrics::rd_to_csv(points);
}

// ---------------------------------------------------------------------------

void add_codec_options(CLI::App* c, CodecConfig& cfg) {
  c->add_option("--latent-channels", cfg.latent_channels);
  c->add_option("--trunk-channels", cfg.trunk_channels);
  c->add_option("--hyper-channels", cfg.hyper_channels);
  c->add_option("--trunk-blocks", cfg.trunk_blocks);
  c->add_option("--downsample", cfg.downsample_factor);
}

void add_rn_options(CLI::App* c, MicroRNConfig& rn) {
  rn.io_channels = 0;  // default: the teacher's trunk width
  c->add_option("--hidden-channels", rn.hidden_channels, "Micro-RN width C_h");
  c->add_option("--blocks", rn.num_blocks, "Micro-RN block count B");
  c->add_option("--io-channels", rn.io_channels, "Defaults to the teacher trunk width");
}

void add_distill_options(CLI::App* c, DistillConfig& cfg) {
  c->add_option("--steps", cfg.steps);
  c->add_option("--crop", cfg.crop);
  c->add_option("--batch", cfg.batch);
  c->add_option("--lr", cfg.lr);
  c->add_option("--k-m", cfg.k_M);
  c->add_option("--k-p", cfg.k_p);
  c->add_option("--seed", cfg.seed);
}

void add_model_options(CLI::App* c, VideoModelArgs& m) {
  c->add_option("--teacher", m.teacher, "Teacher checkpoint")->required();
  c->add_option("--video-model", m.video_model, "Video model checkpoint")->required();
}

}  // namespace

int run(const std::vector<std::string>& raw_args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Microdosed neural image and video codec", "mdc"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show every subcommand's options");
  app.option_defaults()->always_capture_default();
  app.footer("Any subcommand also accepts --config FILE: key=value lines (# comments) applied\n"
             "as --key value unless the same flag is given on the command line.");
  std::function<void()> action;

  TrainTeacherArgs tt;
  tt.codec = CodecConfig{};
  {
    auto* c = app.add_subcommand("train-teacher", "Train the image codec (teacher)");
    add_common(c, tt.common);
    c->add_option("--input", tt.inputs, "Sequence dir, generator spec or .rgb (repeatable)")
        ->required();
    c->add_option("--out", tt.out, "Checkpoint path")->required();
    add_codec_options(c, tt.codec);
    c->add_option("--seed", tt.codec.seed);
    c->add_option("--steps", tt.train.steps);
    c->add_option("--batch", tt.train.batch);
    c->add_option("--crop", tt.train.crop);
    c->add_option("--lr", tt.train.lr);
    c->add_option("--lambda", tt.train.lambda_rate);
    c->add_option("--k-m", tt.train.k_M);
    c->add_option("--k-p", tt.train.k_p);
    c->callback([&] { action = [&] { train_teacher_cmd(tt, out); }; });
  }

  DistillArgs ds;
  ds.cfg.crop = 64;
  {
    auto* c = app.add_subcommand("distill", "Distil a Micro-RN for one content subset");
    add_common(c, ds.common);
    c->add_option("--teacher", ds.teacher)->required();
    c->add_option("--input", ds.inputs, "Frames of the subset (repeatable)")->required();
    c->add_option("--out", ds.out, "Weight bundle path")->required();
    c->add_option("--id", ds.id, "Subset id (default: input stem)");
    c->add_option("--stride", ds.stride, "Take every n-th frame");
    c->add_option("--precision", ds.precision, "Bundle precision, 32 or 16");
    add_rn_options(c, ds.rn);
    add_distill_options(c, ds.cfg);
    c->callback([&] { action = [&] { distill_cmd(ds, out); }; });
  }

  EncodeImageArgs ei;
  {
    auto* c = app.add_subcommand("encode-image", "Encode one image");
    add_common(c, ei.common);
    c->add_option("--teacher", ei.teacher)->required();
    c->add_option("--input", ei.input, "PNG or PPM image")->required();
    c->add_option("--out", ei.out)->required();
    c->add_option("--bundle", ei.bundle, "Embed a weight bundle");
    c->callback([&] { action = [&] { encode_image_cmd(ei, out); }; });
  }

  DecodeImageArgs di;
  {
    auto* c = app.add_subcommand("decode-image", "Decode an image container");
    add_common(c, di.common);
    c->add_option("--teacher", di.teacher)->required();
    c->add_option("--input", di.input)->required();
    c->add_option("--out", di.out, "PNG or PPM path")->required();
    c->add_flag("--force-teacher", di.force_teacher, "Ignore an embedded bundle");
    c->callback([&] { action = [&] { decode_image_cmd(di, out); }; });
  }

  TrainVideoArgs tv;
  {
    auto* c = app.add_subcommand("train-video", "Train the P-frame networks (four phases)");
    add_common(c, tv.common);
    c->add_option("--teacher", tv.teacher)->required();
    c->add_option("--input", tv.inputs, "Training sequence (repeatable)")->required();
    c->add_option("--out", tv.out)->required();
    c->add_option("--flow-channels", tv.video.flow_channels);
    c->add_option("--flow-latent-channels", tv.video.flow_latent_channels);
    c->add_option("--flow-hyper-channels", tv.video.flow_hyper_channels);
    c->add_option("--mc-channels", tv.video.mc_channels);
    c->add_option("--residual-hyper-channels", tv.video.residual_hyper_channels);
    c->add_option("--phase1-steps", tv.train.phase_steps[0]);
    c->add_option("--phase2-steps", tv.train.phase_steps[1]);
    c->add_option("--phase3-steps", tv.train.phase_steps[2]);
    c->add_option("--phase4-steps", tv.train.phase_steps[3]);
    c->add_option("--rollout", tv.train.rollout);
    c->add_option("--batch", tv.train.batch);
    c->add_option("--crop", tv.train.crop);
    c->add_option("--lr", tv.train.lr);
    c->add_option("--lambda-w", tv.train.lambda_w);
    c->add_option("--lambda", tv.train.lambda);
    c->add_option("--k-m", tv.train.k_M);
    c->add_option("--k-p", tv.train.k_p);
    c->add_option("--seed", tv.train.seed);
    c->callback([&] {
      tv.video.seed = tv.train.seed;
      action = [&] { train_video_cmd(tv, out); };
    });
  }

  EncodeVideoArgs ev;
  {
    auto* c = app.add_subcommand("encode-video", "Encode a sequence (I + P frames)");
    add_common(c, ev.common);
    add_model_options(c, ev.model);
    c->add_option("--input", ev.input)->required();
    c->add_option("--out", ev.out)->required();
    c->add_option("--gop", ev.gop, "P-frames per I-frame (0 = all intra)");
    c->add_option("--bundle", ev.bundle, "Embed a weight bundle");
    c->add_option("--recon-dir", ev.recon_dir, "Write encoder-side reconstructions");
    c->callback([&] { action = [&] { encode_video_cmd(ev, out); }; });
  }

  DecodeVideoArgs dv;
  {
    auto* c = app.add_subcommand("decode-video", "Decode a video container to PNG frames");
    add_common(c, dv.common);
    add_model_options(c, dv.model);
    c->add_option("--input", dv.input)->required();
    c->add_option("--out-dir", dv.out_dir)->required();
    c->add_option("--bundle", dv.bundle, "Decode with this bundle instead");
    c->add_flag("--force-teacher", dv.force_teacher, "Ignore any bundle");
    c->callback([&] { action = [&] { decode_video_cmd(dv, out); }; });
  }

  BenchArgs bd;
  {
    auto* c = app.add_subcommand("bench-decode", "Time teacher, student and lower-bound decode");
    add_common(c, bd.common);
    c->add_option("--teacher", bd.teacher)->required();
    c->add_option("--input", bd.input, "Image to decode")->required();
    c->add_option("--bundle", bd.bundle, "Student weights (default: fresh Micro-RN)");
    add_rn_options(c, bd.rn);
    c->add_option("--warmup", bd.warmup);
    c->add_option("--reps", bd.reps);
    c->add_option("--out", bd.out, "JSON report");
    c->callback([&] { action = [&] { bench_cmd(bd, out); }; });
  }

  AblateArgs ab;
  ab.cfg.crop = 64;
  {
    auto* c = app.add_subcommand("ablate", "Parameter table and RD metrics over a C_h x B grid");
    add_common(c, ab.common);
    c->add_option("--teacher", ab.teacher, "Needed for RD metrics");
    c->add_option("--input", ab.inputs, "Frames for distillation (repeatable)");
    c->add_option("--out-dir", ab.out_dir)->required();
    c->add_option("--hidden-channels", ab.channels, "Comma list");
    c->add_option("--blocks", ab.blocks, "Comma list");
    c->add_option("--io-channels", ab.io_channels, "Defaults to the teacher trunk width, else 64");
    c->add_option("--stride", ab.stride);
    add_distill_options(c, ab.cfg);
    c->callback([&] { action = [&] { ablate_cmd(ab, out); }; });
  }

  ReportArgs rp;
  {
    auto* c = app.add_subcommand("report", "RD points for intra, video and student decoding");
    add_common(c, rp.common);
    add_model_options(c, rp.model);
    c->add_option("--input", rp.input)->required();
    c->add_option("--bundle", rp.bundle, "Adds student rows with and without bundle cost");
    c->add_option("--gop", rp.gop);
    c->add_option("--label", rp.label);
    c->add_option("--out-dir", rp.out_dir)->required();
    c->callback([&] { action = [&] { report_cmd(rp, out); }; });
  }

  try {
    std::vector<std::string> args = expand_config(raw_args);
    args.erase(args.begin());
    std::reverse(args.begin(), args.end());  // CLI11 consumes from the back
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kConfigError;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kIoError;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kConfigError;
  }

  try {
    if (action) action();
    return kOk;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << "\n";
    return kIoError;
  } catch (const fs::filesystem_error& e) {
    err << "I/O error: " << e.what() << "\n";
    return kIoError;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << "\n";
    return kFormatError;
  } catch (const std::invalid_argument& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace mdc::cli
