#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <sys/wait.h>

#include <gtest/gtest.h>

#include "declip/synth.hpp"
#include "declip/trainer.hpp"

using namespace declip;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code = -1;
  std::string out;
};

// Runs the CLI in `cwd`, capturing stdout; stderr goes to err.txt.
CliRun cli(const std::string& args, const fs::path& cwd) {
  const std::string cmd = "cd '" + cwd.string() + "' && '" DECLIP_CLI "' " + args + " 2>err.txt";
  CliRun r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  std::size_t n = 0;
  while ((n = fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("declip_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_file(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

}  // namespace

TEST(Configs, ShippedAblationFileMatchesCode) {
  DistillConfig cfg = parse_config(fs::path(DECLIP_SOURCE_DIR) / "configs" / "ablation.cfg");
  EXPECT_EQ(cfg.report_dir, "reports/ablation");
  cfg.report_dir = DistillConfig{}.report_dir;
  EXPECT_TRUE(cfg == shipped_ablation_config());
}

TEST(Configs, SynthDistillFileParses) {
  const DistillConfig cfg = parse_config(fs::path(DECLIP_SOURCE_DIR) / "configs" / "distill_synth.cfg");
  EXPECT_EQ(cfg.manifest, "data/synth/train.txt");
}

TEST(Cli, SelftestPasses) {
  const CliRun r = cli("selftest", scratch_dir("selftest"));
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos);
}

TEST(Cli, GradcheckIsDeterministic) {
  const auto dir = scratch_dir("grad");
  const CliRun a = cli("gradcheck --seed 7", dir), b = cli("gradcheck --seed 7", dir);
  EXPECT_EQ(a.code, 0);
  EXPECT_EQ(a.out, b.out);
  EXPECT_NE(a.out.find("PASS total_loss"), std::string::npos);
}

TEST(Cli, ExitCodes) {
  const auto dir = scratch_dir("codes");
  EXPECT_EQ(cli("no-such-command", dir).code, 1);
  EXPECT_EQ(cli("", dir).code, 1);
  EXPECT_EQ(cli("eval-seg --checkpoint x", dir).code, 1);
  EXPECT_EQ(cli("distill --config missing.cfg", dir).code, 2);
  EXPECT_NE(read_text(dir / "err.txt").find("io error:"), std::string::npos);
  write_file(dir / "bad.cfg", "lambda = -1\n");
  EXPECT_EQ(cli("distill --config bad.cfg", dir).code, 1);
  EXPECT_NE(read_text(dir / "err.txt").find("range error:"), std::string::npos);
  write_file(dir / "junk.dten", "not a container");
  // Malformed containers count as I/O failures.
  EXPECT_EQ(cli("dump-attn --checkpoint junk.dten --image junk.dten --layers 0", dir).code, 2);
  EXPECT_NE(read_text(dir / "err.txt").find("magic error:"), std::string::npos);
  EXPECT_EQ(cli("dump-attn --checkpoint x.dten --image x.dten --layers 0", dir).code, 2);
}

TEST(Cli, ZeroEpochDistillWritesInit) {
  const auto dir = scratch_dir("zero");
  ASSERT_EQ(cli("synth --out suite", dir).code, 0);
  write_file(dir / "run.cfg", "manifest = suite/train.txt\nepochs = 0\nseed = 3\n");
  ASSERT_EQ(cli("distill --config run.cfg", dir).code, 0);
  const StudentCheckpoint ck = load_checkpoint(dir / "checkpoints" / "checkpoint.dten");
  EXPECT_TRUE(ck.student.bitwise_equal(VitParams::init(DistillConfig::default_student(), 3)));
  EXPECT_EQ(read_text(dir / "reports" / "metrics.log"), "");
}

TEST(Cli, DistillEvalAndDumpAreStable) {
  const auto dir = scratch_dir("flow");
  ASSERT_EQ(cli("synth --out suite", dir).code, 0);
  write_file(dir / "run.cfg", "manifest = suite/train.txt\nlr = 1e-3\nepochs = 1\nbatch_size = 4\n");
  ASSERT_EQ(cli("distill --config run.cfg", dir).code, 0);
  const std::string log = read_text(dir / "reports" / "metrics.log");
  EXPECT_NE(log.find("step=4 "), std::string::npos);
  ASSERT_EQ(cli("distill --config run.cfg", dir).code, 0);
  EXPECT_EQ(read_text(dir / "reports" / "metrics.log"), log);

  const std::string eval_args = "--checkpoint checkpoints/checkpoint.dten --manifest suite/test.txt --classes suite/classes.dten";
  const CliRun seg = cli("eval-seg " + eval_args, dir);
  EXPECT_EQ(seg.code, 0);
  EXPECT_NE(seg.out.find("miou="), std::string::npos);
  EXPECT_EQ(cli("eval-seg " + eval_args, dir).out, seg.out);
  const CliRun region = cli("eval-region " + eval_args + " --mode standard", dir);
  EXPECT_EQ(region.code, 0);
  EXPECT_NE(region.out.find("macc="), std::string::npos);

  const CliRun dump = cli("dump-attn --checkpoint checkpoints/checkpoint.dten --image suite/test0_image.dten --layers 0,2 --query cls", dir);
  EXPECT_EQ(dump.code, 0);
  EXPECT_TRUE(fs::exists(dir / "attn" / "attn_layer2_query.pgm"));
  EXPECT_EQ(read_text(dir / "attn" / "attn_layer0_full.pgm").substr(0, 2), "P5");
  EXPECT_EQ(cli("dump-attn --checkpoint checkpoints/checkpoint.dten --image suite/test0_image.dten --layers 0 --query x", dir).code, 1);
  fs::remove_all(dir);
}
