#include "fastinit_cli.hpp"
#include "support.hpp"

using namespace fastinit;
using testutil::TempDir;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "fastinit");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

bool has(const std::string& text, const std::string& needle) { return text.find(needle) != std::string::npos; }

void write_text(const std::filesystem::path& p, const std::string& s) { std::ofstream(p) << s; }

// Small dataset plus a briefly trained checkpoint, shared by several tests.
struct Fixture {
  TempDir dir;
  std::string data = (dir / "d.pnd").string();
  std::string ckpt = (dir / "m.vnp").string();

  Fixture() {
    write_text(dir / "prompts.txt", "a cat on a sofa\nwaves at dusk\n\nslow pan over a city\n");
    const auto g = run_cli({"gen-data", "--prompts", (dir / "prompts.txt").string(), "--out", data, "--iters", "2"});
    EXPECT_EQ(g.code, 0) << g.err;
    const auto t = run_cli({"train", "--data", data, "--out", ckpt, "--steps", "3", "--batch", "2", "--log-every", "0"});
    EXPECT_EQ(t.code, 0) << t.err;
  }
};

}  // namespace

TEST(Cli, HelpAndUsageErrors) {
  EXPECT_EQ(run_cli({"--help"}).code, 0);
  EXPECT_EQ(run_cli({}).code, 2);
  EXPECT_EQ(run_cli({"frobnicate"}).code, 2);
  EXPECT_EQ(run_cli({"train", "--steps", "many"}).code, 2);
  const auto r = run_cli({"gen-data", "--out", "/tmp/x.pnd"});
  EXPECT_EQ(r.code, 2);
  EXPECT_TRUE(has(r.err, "--prompts is required")) << r.err;
}

TEST(Cli, MissingPromptsFileNamesPath) {
  TempDir dir;
  const std::string missing = (dir / "nope.txt").string();
  const auto r = run_cli({"gen-data", "--prompts", missing, "--out", (dir / "d.pnd").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_TRUE(has(r.err, missing)) << r.err;
}

TEST(Cli, GenDataReportsAndWrites) {
  TempDir dir;
  write_text(dir / "p.txt", "one prompt\n");
  const std::string out = (dir / "d.pnd").string();
  const auto r = run_cli({"gen-data", "--prompts", (dir / "p.txt").string(), "--out", out, "--iters", "1", "--d0", "100"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(has(r.out, "wrote 1 records")) << r.out;
  EXPECT_TRUE(has(r.out, "mean delta temporal_correlation")) << r.out;
  EXPECT_EQ(read_dataset(out).size(), 1u);
}

TEST(Cli, ConfigFileFillsUnsetOptionsAndIsEchoed) {
  TempDir dir;
  write_text(dir / "p.txt", "one prompt\n");
  write_text(dir / "gen.cfg", "# comment\nprompts = " + (dir / "p.txt").string() + "\nout=" +
                                  (dir / "d.pnd").string() + "\niters=3\nalpha_bar = 0.1\nseed=7\n");
  const auto r = run_cli({"gen-data", "--config", (dir / "gen.cfg").string(), "--seed", "9"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(has(r.out, "# effective config (gen-data)")) << r.out;
  EXPECT_TRUE(has(r.out, "iters=3")) << r.out;
  EXPECT_TRUE(has(r.out, "alpha-bar=0.1")) << r.out;
  EXPECT_TRUE(has(r.out, "seed=9")) << r.out;
}

TEST(Cli, UnknownConfigKeyIsUsageError) {
  TempDir dir;
  write_text(dir / "bad.cfg", "steps=3\nlearning_rate=0.1\n");
  const auto r = run_cli({"train", "--config", (dir / "bad.cfg").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_TRUE(has(r.err, "unknown config key 'learning-rate'")) << r.err;
  write_text(dir / "bad2.cfg", "steps\n");
  EXPECT_EQ(run_cli({"train", "--config", (dir / "bad2.cfg").string()}).code, 2);
}

TEST(Cli, TrainWritesCheckpointAndHistory) {
  Fixture f;
  EXPECT_NO_THROW(load_model(f.ckpt));
  const auto csv = testutil::slurp(f.ckpt + ".loss.csv");
  const std::string text(csv.begin(), csv.end());
  EXPECT_EQ(text.rfind("step,lr,loss\n", 0), 0u);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 4);
}

TEST(Cli, CorruptDatasetIsRuntimeErrorWithRecordIndex) {
  Fixture f;
  auto bytes = testutil::slurp(f.data);
  bytes[bytes.size() - 10] ^= 0x40;
  testutil::spit(f.dir / "bad.pnd", bytes);
  const auto r = run_cli({"train", "--data", (f.dir / "bad.pnd").string(), "--out", (f.dir / "x.vnp").string(),
                          "--steps", "1"});
  EXPECT_EQ(r.code, 1);
  EXPECT_TRUE(has(r.err, "record 2")) << r.err;
  EXPECT_FALSE(std::filesystem::exists(f.dir / "x.vnp"));
}

TEST(Cli, RefineIsDeterministic) {
  Fixture f;
  const std::string a = (f.dir / "a.lat").string(), b = (f.dir / "b.lat").string();
  const auto r1 = run_cli({"refine", "--checkpoint", f.ckpt, "--prompt", "a fox", "--seed", "4", "--out", a});
  const auto r2 = run_cli({"refine", "--checkpoint", f.ckpt, "--prompt", "a fox", "--seed", "4", "--out", b});
  ASSERT_EQ(r1.code, 0) << r1.err;
  ASSERT_EQ(r2.code, 0) << r2.err;
  EXPECT_EQ(testutil::slurp(a), testutil::slurp(b));
  EXPECT_TRUE(has(r1.out, "temporal_correlation in")) << r1.out;
  EXPECT_EQ(load_latent(a).dims(), (Dims4{4, 8, 16, 16}));
  EXPECT_EQ(run_cli({"refine", "--checkpoint", f.ckpt, "--out", a}).code, 2);
}

TEST(Cli, RefineWithZeroBetaMatchesTbnf) {
  Fixture f;
  auto m = load_model(f.ckpt);
  m.params.at("beta").value[0] = 0.0f;
  save_model(f.dir / "zero.vnp", m);
  const Tensor4<float> z = sample_gaussian<float>(m.config.dims, RngSeed{11});
  save_latent(f.dir / "z.lat", z);
  const std::string out = (f.dir / "y.lat").string();
  const auto r = run_cli({"refine", "--checkpoint", (f.dir / "zero.vnp").string(), "--prompt", "a fox", "--input",
                          (f.dir / "z.lat").string(), "--out", out});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto ps = m.params.cast<real_t>();
  const auto ref = tbnf_forward(z.cast<real_t>(), embed_prompt("a fox"), ps, m.config).cast<float>();
  EXPECT_EQ(load_latent(out).storage(), ref.storage());
}

TEST(Cli, FourStagePresetIsPrinted) {
  Fixture f;
  const auto r = run_cli({"train", "--data", f.data, "--out", (f.dir / "p.vnp").string(), "--preset", "paper",
                          "--steps", "1", "--batch", "1", "--log-every", "0"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(has(r.out, "depths [5, 8, 20, 7], dims [64, 128, 320, 512]")) << r.out;
  EXPECT_TRUE(has(r.out, "windows [5x5x5, 5x5x5, global, global]")) << r.out;
}

TEST(Cli, BenchWithOneTrialWarns) {
  const auto r = run_cli({"bench", "--dims", "4x8x16x16", "--trials", "1", "--iters", "1"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(has(r.out, "unstable")) << r.out;
  EXPECT_TRUE(has(r.out, "ratio ")) << r.out;
  EXPECT_EQ(run_cli({"bench", "--dims", "4x8x16x18", "--trials", "1"}).code, 1);
}

TEST(Cli, EvalTables) {
  Fixture f;
  const auto r = run_cli({"eval", "--data", f.data, "--checkpoint", f.ckpt, "--per-record"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(has(r.out, "3 records")) << r.out;
  EXPECT_TRUE(has(r.out, "record 2 std")) << r.out;
  EXPECT_TRUE(has(r.out, "tucker  ")) << r.out;
}

TEST(Cli, EvalOnEmptyDatasetHasNoRows) {
  TempDir dir;
  DatasetHeader h;
  h.dims = {4, 8, 16, 16};
  h.embedding_dim = 64;
  write_dataset(dir / "empty.pnd", h, {});
  const auto r = run_cli({"eval", "--data", (dir / "empty.pnd").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(has(r.out, "0 records")) << r.out;
  EXPECT_TRUE(has(r.out, "no records")) << r.out;
  EXPECT_FALSE(has(r.out, "z_rand ")) << r.out;
}
