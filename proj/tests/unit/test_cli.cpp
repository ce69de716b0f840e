#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "cli.hpp"
#include "mdc/bitstream.hpp"
#include "mdc/datasets.hpp"
#include "mdc/micro_rn.hpp"

namespace mdc {
namespace {

namespace fs = std::filesystem;

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "mdc");
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string text(const fs::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), {}};
}

// One directory and one set of tiny models shared by every test.
class Cli : public ::testing::Test {
 protected:
  static fs::path dir;

  static std::string at(const std::string& name) { return (dir / name).string(); }

  static void SetUpTestSuite() {
    dir = fs::temp_directory_path() / "mdc_cli_test";
    fs::remove_all(dir);
    fs::create_directories(dir);
    std::ofstream(dir / "tex.spec") << "kind=moving_texture\nframes=5\nwidth=32\nheight=32\n";
    std::ofstream(dir / "face.spec") << "kind=noise_bg_face_like\nframes=4\nwidth=32\nheight=32\n";
    std::ofstream(dir / "tiny.cfg") << "# tiny teacher\nlatent-channels=8\ntrunk-channels=16\n"
                                       "hyper-channels=8\ntrunk-blocks=2\ndownsample=4\n"
                                       "steps=3\ncrop=16\nbatch=2\nlog-every=0\n";
    write_png(data::synth_sequence(data::SynthKind::moving_texture, 1, 32, 32, 0).frames[0],
              dir / "frame.png");
    const Result t = run({"train-teacher", "--config", at("tiny.cfg"), "--input", at("tex.spec"),
                          "--input", at("face.spec"), "--out", at("t.mdt")});
    ASSERT_EQ(t.code, 0) << t.err;
    const Result v = run({"train-video", "--teacher", at("t.mdt"), "--input", at("tex.spec"),
                          "--out", at("v.mdw"), "--flow-channels", "8", "--flow-latent-channels",
                          "8", "--flow-hyper-channels", "8", "--mc-channels", "8",
                          "--residual-hyper-channels", "8", "--phase1-steps", "2",
                          "--phase2-steps", "2", "--phase3-steps", "2", "--phase4-steps", "1",
                          "--batch", "1", "--crop", "16", "--rollout", "2", "--log-every", "0"});
    ASSERT_EQ(v.code, 0) << v.err;
    const Result d = run({"distill", "--teacher", at("t.mdt"), "--input", at("tex.spec"),
                          "--stride", "2", "--out", at("tex.mdb"), "--hidden-channels", "4",
                          "--steps", "3", "--crop", "16", "--batch", "1", "--log-every", "1"});
    ASSERT_EQ(d.code, 0) << d.err;
    ASSERT_NE(d.out.find("step=3 mse_t="), std::string::npos);
  }
  static void TearDownTestSuite() { fs::remove_all(dir); }
};

fs::path Cli::dir;

TEST_F(Cli, ConfigFileAndFlagPrecedence) {
  const Bytes raw = read_file(at("t.mdt"));
  EXPECT_EQ(parse_teacher(raw).config().trunk_channels, 16);
  // A flag overrides the same key from the file.
  const Result r = run({"train-teacher", "--config", at("tiny.cfg"), "--trunk-channels", "12",
                        "--steps", "1", "--input", at("tex.spec"), "--out", at("t12.mdt")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(parse_teacher(read_file(at("t12.mdt"))).config().trunk_channels, 12);
  std::ofstream(dir / "bad.cfg") << "colour=red\n";
  EXPECT_EQ(run({"train-teacher", "--config", at("bad.cfg"), "--input", at("tex.spec"), "--out",
                 at("x.mdt")})
                .code,
            2);
}

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"frobnicate"}).code, 2);
  EXPECT_EQ(run({"encode-image", "--teacher", at("t.mdt")}).code, 2);
  EXPECT_EQ(run({"encode-image", "--teacher", at("missing.mdt"), "--input", at("a.png"), "--out",
                 at("a.mdi")})
                .code,
            3);
  Bytes raw = read_file(at("t.mdt"));
  raw[raw.size() / 2] ^= 4;
  write_file(dir / "broken.mdt", raw);
  EXPECT_EQ(run({"encode-image", "--teacher", at("broken.mdt"), "--input", at("frame.png"),
                 "--out", at("b.mdi")})
                .code,
            4);
  // Existing output without --force.
  EXPECT_EQ(run({"distill", "--teacher", at("t.mdt"), "--input", at("tex.spec"), "--out",
                 at("tex.mdb"), "--steps", "1", "--crop", "16"})
                .code,
            2);
  EXPECT_EQ(run({"distill", "--teacher", at("t.mdt"), "--input", at("tex.spec"), "--out",
                 at("tex16.mdb"), "--precision", "8", "--steps", "1", "--crop", "16"})
                .code,
            2);
}

TEST_F(Cli, ImageRoundTripIsReproducible) {
  write_png(data::synth_sequence(data::SynthKind::noise_bg_face_like, 1, 24, 20, 1).frames[0],
            dir / "img.png");
  for (const char* name : {"i1.mdi", "i2.mdi"}) {
    const Result r = run({"encode-image", "--teacher", at("t.mdt"), "--input", at("img.png"),
                          "--bundle", at("tex.mdb"), "--out", at(name)});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  EXPECT_EQ(read_file(at("i1.mdi")), read_file(at("i2.mdi")));
  ASSERT_EQ(run({"decode-image", "--teacher", at("t.mdt"), "--input", at("i1.mdi"), "--out",
                 at("dec.png")})
                .code,
            0);
  const ImageTensor dec = read_png(at("dec.png"));
  EXPECT_EQ(dec.height(), 20);
  EXPECT_EQ(dec.width(), 24);
  EXPECT_EQ(run({"decode-image", "--teacher", at("t.mdt"), "--input", at("i1.mdi"), "--out",
                 at("dec.png")})
                .code,
            2);
  EXPECT_EQ(run({"decode-image", "--teacher", at("t.mdt"), "--input", at("i1.mdi"), "--out",
                 at("dec.png"), "--force", "--force-teacher"})
                .code,
            0);
}

TEST_F(Cli, VideoDecodeReproducesEncoderReconstructions) {
  const Result e = run({"encode-video", "--teacher", at("t.mdt"), "--video-model", at("v.mdw"),
                        "--input", at("tex.spec"), "--gop", "2", "--bundle", at("tex.mdb"),
                        "--out", at("tex.mdv"), "--recon-dir", at("recon")});
  ASSERT_EQ(e.code, 0) << e.err;
  const Result d = run({"decode-video", "--teacher", at("t.mdt"), "--video-model", at("v.mdw"),
                        "--input", at("tex.mdv"), "--out-dir", at("decoded")});
  ASSERT_EQ(d.code, 0) << d.err;
  const auto a = data::load_sequence(at("recon"));
  const auto b = data::load_sequence(at("decoded"));
  ASSERT_EQ(a.frame_count(), 5);
  ASSERT_EQ(b.frame_count(), 5);
  for (int t = 0; t < 5; ++t) EXPECT_TRUE(bit_identical(a.frames[t].data, b.frames[t].data));

  Bytes raw = read_file(at("tex.mdv"));
  raw[raw.size() - 7] ^= 1;
  write_file(dir / "bad.mdv", raw);
  EXPECT_EQ(run({"decode-video", "--teacher", at("t.mdt"), "--video-model", at("v.mdw"),
                 "--input", at("bad.mdv"), "--out-dir", at("bad")})
                .code,
            4);
}

TEST_F(Cli, AblateEmitsClosedFormTable) {
  const Result r = run({"ablate", "--out-dir", at("abl"), "--hidden-channels", "8,16,32",
                        "--blocks", "1,2", "--io-channels", "64"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream csv(text(dir / "abl" / "params.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "hidden_channels,blocks,io_channels,params");
  int rows = 0;
  while (std::getline(csv, line)) {
    int ch, b, io;
    std::size_t params;
    char c;
    std::istringstream row(line);
    row >> ch >> c >> b >> c >> io >> c >> params;
    EXPECT_EQ(params, count_params({ch, b, io}));
    ++rows;
  }
  EXPECT_EQ(rows, 6);
  // With a teacher and frames it also distils each configuration.
  const Result rd = run({"ablate", "--teacher", at("t.mdt"), "--input", at("face.spec"),
                         "--out-dir", at("abl2"), "--hidden-channels", "4", "--blocks", "1,2",
                         "--stride", "1", "--steps", "2", "--crop", "16", "--batch", "1"});
  ASSERT_EQ(rd.code, 0) << rd.err;
  EXPECT_NE(text(dir / "abl2" / "ablation.csv").find("\n4,2,"), std::string::npos);
}

TEST_F(Cli, ReportBundleRowDiffersByOverhead) {
  const Result r = run({"report", "--teacher", at("t.mdt"), "--video-model", at("v.mdw"),
                        "--input", at("tex.spec"), "--bundle", at("tex.mdb"), "--gop", "2",
                        "--label", "tex", "--out-dir", at("report")});
  ASSERT_EQ(r.code, 0) << r.err;
  std::map<std::string, double> bpp;
  std::istringstream csv(text(dir / "report" / "rd.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, metrics::kRdCsvHeader);
  while (std::getline(csv, line)) {
    const auto comma = line.find(',');
    bpp[line.substr(0, comma)] = std::stod(line.substr(comma + 1));
  }
  ASSERT_EQ(bpp.size(), 4u);
  const WeightBundle b = parse_bundle(read_file(at("tex.mdb")));
  EXPECT_NEAR(bpp["tex/video+student+bundle"] - bpp["tex/video+student"],
              bpp_overhead(b, 5, 32, 32), 1e-6);
  EXPECT_TRUE(fs::exists(dir / "report" / "rd.json"));
}

TEST_F(Cli, BenchDecodeReport) {
  const Result r = run({"bench-decode", "--teacher", at("t.mdt"), "--input", at("frame.png"),
                        "--bundle", at("tex.mdb"), "--warmup", "0", "--reps", "2", "--out",
                        at("bench.json")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("lower_bound"), std::string::npos);
  EXPECT_NE(text(dir / "bench.json").find("\"median_ms\""), std::string::npos);
}

}  // namespace
}  // namespace mdc
