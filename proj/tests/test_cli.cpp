#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "megabyte/cli.hpp"
#include "megabyte/megabyte.hpp"
#include "oracles.hpp"

using namespace megabyte;
namespace fs = std::filesystem;

namespace {

const char* kToyConfig = R"(context_length = 16
patch_size = 4
global_dim = 8
local_dim = 8
global_layers = 1
local_layers = 1
global_heads = 2
local_heads = 2
peak_lr = 0.001
warmup_updates = 2
total_updates = 6
batch_size = 4
seed = 11
)";

struct Workspace {
  fs::path dir;
  Workspace() {
    dir = fs::temp_directory_path() /
          (std::string("megabyte_cli_") + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Workspace() { fs::remove_all(dir); }
  std::string path(const std::string& name) const { return (dir / name).string(); }
  std::string write(const std::string& name, const std::string& text) const {
    write_file_bytes(dir / name, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
    return path(name);
  }
  std::string write(const std::string& name, const ByteSequence& bytes) const {
    write_file_bytes(dir / name, bytes);
    return path(name);
  }
};

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(std::move(args), out, err);
  return {code, out.str(), err.str()};
}

std::string random_text(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  const ByteSequence b = oracle::random_bytes(rng, n);
  return std::string(b.begin(), b.end());
}

// Trains the toy config on 1 KB of random bytes and returns the checkpoint path.
std::string train_toy(const Workspace& ws, const std::string& name = "model.mbcp") {
  const std::string config = ws.write("toy.cfg", kToyConfig);
  const std::string data = ws.write("corpus.bin", random_text(1024, 5));
  const Result r = run({"train", "--config", config, "--data", data, "--out", ws.path(name)});
  EXPECT_EQ(r.code, 0) << r.err;
  return ws.path(name);
}

double parse_field(const std::string& text, const std::string& key) {
  const auto at = text.find(key + ": ");
  if (at == std::string::npos) return -1;
  return std::stod(text.substr(at + key.size() + 2));
}

}  // namespace

TEST(CliTrain, WritesCheckpointAndLossCurve) {
  Workspace ws;
  const std::string ckpt = train_toy(ws);
  EXPECT_TRUE(fs::exists(ckpt));
  const ByteSequence csv = read_file_bytes(ckpt + ".loss.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 7);
  EXPECT_NO_THROW(load_checkpoint(ckpt));
}

TEST(CliTrain, MissingPatchSizeIsUsageErrorNamingKey) {
  Workspace ws;
  std::string text = kToyConfig;
  text.erase(text.find("patch_size"), std::string("patch_size = 4\n").size());
  const Result r = run({"train", "--config", ws.write("bad.cfg", text), "--data", ws.write("c.txt", "hello world"),
                        "--out", ws.path("m.mbcp")});
  EXPECT_EQ(r.code, cli::kExitUsage);
  EXPECT_NE(r.err.find("patch_size"), std::string::npos) << r.err;
}

TEST(CliTrain, SameSeedGivesIdenticalCheckpoints) {
  Workspace ws;
  const ByteSequence a = read_file_bytes(train_toy(ws, "a.mbcp"));
  const ByteSequence b = read_file_bytes(train_toy(ws, "b.mbcp"));
  EXPECT_EQ(a, b);
}

TEST(CliTrain, SeedFlagOverridesConfig) {
  Workspace ws;
  const std::string a = train_toy(ws, "a.mbcp");
  const Result r = run({"train", "--config", ws.path("toy.cfg"), "--data", ws.path("corpus.bin"), "--out",
                        ws.path("b.mbcp"), "--seed", "12"});
  ASSERT_EQ(r.code, 0);
  EXPECT_NE(read_file_bytes(a), read_file_bytes(ws.path("b.mbcp")));
}

TEST(CliTrain, NonFiniteLossExitsThree) {
  Workspace ws;
  std::string text = kToyConfig;
  text += "init_std = 1e200\n";
  const Result r = run({"train", "--config", ws.write("hot.cfg", text), "--data", ws.write("c.bin", random_text(256, 1)),
                        "--out", ws.path("m.mbcp")});
  EXPECT_EQ(r.code, cli::kExitNumeric) << r.err;
}

TEST(CliEval, UntrainedModelOnRandomBytesIsEightBits) {
  Workspace ws;
  RunConfig rc = parse_run_config(kToyConfig);
  save_checkpoint(ws.path("init.mbcp"), rc, init_weights(rc.model, 1));
  const Result r = run({"eval", "--ckpt", ws.path("init.mbcp"), "--data", ws.write("r.bin", random_text(2048, 9))});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NEAR(parse_field(r.out, "bpb"), 8.0, 0.1);
  EXPECT_NE(r.out.find("cost: 1X"), std::string::npos);
}

TEST(CliEval, SlidingStridedReportsFourX) {
  Workspace ws;
  const std::string ckpt = train_toy(ws);
  const Result r = run({"eval", "--ckpt", ckpt, "--data", ws.path("corpus.bin"), "--mode", "sliding+strided", "--csv",
                        ws.path("report.csv")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("cost: 4X"), std::string::npos);
  EXPECT_TRUE(fs::exists(ws.path("report.csv")));
}

TEST(CliEval, UnknownModeIsUsageError) {
  Workspace ws;
  const std::string ckpt = train_toy(ws);
  EXPECT_EQ(run({"eval", "--ckpt", ckpt, "--data", ws.path("corpus.bin"), "--mode", "turbo"}).code, cli::kExitUsage);
}

TEST(CliEval, CorruptCheckpointIsUsageError) {
  Workspace ws;
  const Result r = run({"eval", "--ckpt", ws.write("junk.mbcp", "not a checkpoint"), "--data", ws.write("d", "abcdef")});
  EXPECT_EQ(r.code, cli::kExitUsage);
  EXPECT_NE(r.err.find("bad magic"), std::string::npos);
}

TEST(CliGenerate, LengthZeroWritesEmptyFile) {
  Workspace ws;
  const std::string ckpt = train_toy(ws);
  const Result r = run({"generate", "--ckpt", ckpt, "--length", "0", "--out", ws.path("g.bin")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(read_file_bytes(ws.path("g.bin")).empty());
}

TEST(CliGenerate, GreedyRunsAreIdentical) {
  Workspace ws;
  const std::string ckpt = train_toy(ws);
  const std::string prompt = ws.write("p.txt", "abc");
  ASSERT_EQ(run({"generate", "--ckpt", ckpt, "--prompt-file", prompt, "--length", "9", "--out", ws.path("a.bin")}).code, 0);
  ASSERT_EQ(run({"generate", "--ckpt", ckpt, "--prompt-file", prompt, "--length", "9", "--out", ws.path("b.bin")}).code, 0);
  EXPECT_EQ(read_file_bytes(ws.path("a.bin")), read_file_bytes(ws.path("b.bin")));
  EXPECT_EQ(read_file_bytes(ws.path("a.bin.trace.csv")), read_file_bytes(ws.path("b.bin.trace.csv")));
  EXPECT_EQ(read_file_bytes(ws.path("a.bin")).size(), 9u);
}

TEST(CliGenerate, TraceSerialStepsMatchFormula) {
  Workspace ws;
  const std::string ckpt = train_toy(ws);
  ASSERT_EQ(run({"generate", "--ckpt", ckpt, "--length", "16", "--out", ws.path("g.bin")}).code, 0);
  const ByteSequence csv = read_file_bytes(ws.path("g.bin.trace.csv"));
  std::string text(csv.begin(), csv.end());
  text.pop_back();
  const std::string last = text.substr(text.rfind('\n') + 1);
  const std::uint64_t total = std::stoull(last.substr(last.rfind(',') + 1));
  EXPECT_EQ(BigInt(total), serial_steps(1, 1, 4, 16).megabyte);
  EXPECT_EQ(text.substr(0, text.find('\n')), "index,byte,log_prob,serial_steps");
}

TEST(CliGenerate, OverLengthIsUsageError) {
  Workspace ws;
  const std::string ckpt = train_toy(ws);
  EXPECT_EQ(run({"generate", "--ckpt", ckpt, "--length", "17", "--out", ws.path("g.bin")}).code, cli::kExitUsage);
}

TEST(CliCost, SingleTransformerOneLengthIsOneRow) {
  const Result r = run({"cost", "--arch", "transformer", "--m", "8", "--seq-len-range", "1024"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out, "kind,m_g,m_l,P,D,T,flops_per_token,attn_ops,serial_steps\ntransformer,8,0,1,0,1024,16,1048576,0\n");
}

TEST(CliCost, ReferenceSizeSweepMegabyteCheaperOnEveryPair) {
  const Result r = run({"cost", "--reference-sizes", "--seq-len-range", "1024:8192"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream in(r.out);
  std::string line;
  std::getline(in, line);
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::istringstream ls(line);
    for (std::string c; std::getline(ls, c, ',');) cells.push_back(c);
    rows.push_back(cells);
  }
  // Three pairs times four lengths; each megabyte spec is followed by its transformer.
  ASSERT_EQ(rows.size(), 24u);
  for (std::size_t pair = 0; pair < 3; ++pair) {
    for (std::size_t t = 0; t < 4; ++t) {
      const auto& mb = rows[pair * 8 + t];
      const auto& tf = rows[pair * 8 + 4 + t];
      EXPECT_EQ(mb[0], "megabyte");
      EXPECT_EQ(tf[0], "transformer");
      EXPECT_LT(Rational(mb[6]), Rational(tf[6]));
      EXPECT_LT(Rational(mb[7]), Rational(tf[7]));
    }
  }
}

TEST(CliCost, MalformedSizeIsUsageError) {
  EXPECT_EQ(run({"cost", "--arch", "transformer", "--m", "12Q"}).code, cli::kExitUsage);
  EXPECT_EQ(run({"cost", "--arch", "megabyte", "--m-global", "1M", "--m-local", "x"}).code, cli::kExitUsage);
  EXPECT_EQ(run({"cost", "--arch", "rnn", "--m", "1M"}).code, cli::kExitUsage);
}

TEST(CliCost, LengthRangeForms) {
  EXPECT_EQ(cli::detail::parse_lengths("1024:8192"), (std::vector<std::uint64_t>{1024, 2048, 4096, 8192}));
  EXPECT_EQ(cli::detail::parse_lengths("64:256:64"), (std::vector<std::uint64_t>{64, 128, 192, 256}));
  EXPECT_EQ(cli::detail::parse_lengths("8,16"), (std::vector<std::uint64_t>{8, 16}));
  EXPECT_THROW(cli::detail::parse_lengths("9:3"), ConfigError);
  EXPECT_THROW(cli::detail::parse_lengths("0"), ConfigError);
}

TEST(CliScan, SinglePixelRasterIsThreeBytes) {
  Workspace ws;
  const ImageGrid img{1, 1, {10, 20, 30}};
  const Result r = run({"scan", "--ppm", ws.write("one.ppm", write_ppm(img)), "--mode", "raster", "--out", ws.path("o.bin")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_file_bytes(ws.path("o.bin")), (ByteSequence{10, 20, 30}));
}

TEST(CliScan, PatchThenInverseReproducesImage) {
  Workspace ws;
  Rng rng(3);
  const ImageGrid img{6, 6, oracle::random_bytes(rng, 108)};
  const std::string ppm = ws.write("img.ppm", write_ppm(img));
  ASSERT_EQ(run({"scan", "--ppm", ppm, "--mode", "patch", "--patch-size", "12", "--out", ws.path("s.bin")}).code, 0);
  const Result r = run({"scan", "--inverse", "--mode", "patch", "--patch-size", "12", "--in", ws.path("s.bin"), "--width",
                        "6", "--height", "6", "--out", ws.path("back.ppm")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_file_bytes(ws.path("back.ppm")), read_file_bytes(ppm));
}

TEST(CliScan, PatchSizeNotThreeTimesSquareIsUsageError) {
  Workspace ws;
  const ImageGrid img{2, 2, ByteSequence(12, 1)};
  const Result r = run({"scan", "--ppm", ws.write("i.ppm", write_ppm(img)), "--mode", "patch", "--patch-size", "10",
                        "--out", ws.path("o.bin")});
  EXPECT_EQ(r.code, cli::kExitUsage);
}

TEST(CliArgs, MissingSubcommandOrFlagIsUsageError) {
  EXPECT_EQ(run({}).code, cli::kExitUsage);
  EXPECT_EQ(run({"eval"}).code, cli::kExitUsage);
  EXPECT_EQ(run({"frobnicate"}).code, cli::kExitUsage);
  EXPECT_EQ(run({"--help"}).code, 0);
}
