#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>

#include "bwcloud/dataset.hpp"
#include "bwcloud/pointcloud.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace bwcloud;

namespace {

struct Run {
  int status = -1;
  std::string out;
  std::string err;
};

Run run(const std::string& args, const std::string& scratch) {
  const auto out = scratch + "/stdout.txt", err = scratch + "/stderr.txt";
  const int rc = std::system((std::string(BWCLOUD_CLI_PATH) + " " + args + " > " + out + " 2> " + err).c_str());
  return {WIFEXITED(rc) ? WEXITSTATUS(rc) : -1, read_text_file(out), read_text_file(err)};
}

std::map<std::string, std::string> tree_bytes(const std::string& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file() && e.path().filename() != "run_manifest.txt")
      out[fs::relative(e.path(), root).string()] = read_text_file(e.path().string());
  return out;
}

std::size_t line_count(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

const std::string kTinyFarm = "camera = small\nfarm_id = small\nn_cows = 10\nframes_min = 1\nframes_max = 2\n";

}  // namespace

TEST(Cli, UnknownFlagIsUsageError) {
  const auto dir = bwtest::scratch_dir("cli_usage");
  const auto r = run("synth --profile small --out " + dir + "/o --frobnicate", dir);
  EXPECT_EQ(r.status, 2);
  EXPECT_NE(r.err.find("error: usage:"), std::string::npos);
  EXPECT_NE(r.err.find("Usage:"), std::string::npos);
  EXPECT_NE(r.err.find("--profile"), std::string::npos);
}

TEST(Cli, UnknownSubcommandAndMissingRequired) {
  const auto dir = bwtest::scratch_dir("cli_sub");
  EXPECT_EQ(run("teleport", dir).status, 2);
  EXPECT_EQ(run("", dir).status, 2);
  EXPECT_EQ(run("experiment --out " + dir, dir).status, 2);
}

TEST(Cli, HelpExitsZero) {
  const auto dir = bwtest::scratch_dir("cli_help");
  const auto r = run("--help", dir);
  EXPECT_EQ(r.status, 0);
  for (const char* sub : {"convert", "preprocess", "synth", "experiment", "report"}) EXPECT_NE(r.out.find(sub), std::string::npos) << sub;
}

TEST(Cli, DataErrorIsOneLineExitOne) {
  const auto dir = bwtest::scratch_dir("cli_data");
  write_text_file(dir + "/bad.txt", "n_cow = 3\n");
  const auto r = run("synth --profile " + dir + "/bad.txt --out " + dir + "/o", dir);
  EXPECT_EQ(r.status, 1);
  EXPECT_EQ(line_count(r.err), 1u);
  EXPECT_EQ(r.err.rfind("error: config:", 0), 0u) << r.err;

  write_text_file(dir + "/plan.txt", "design = single_source\nmanifest.small = nowhere.csv\ncamera.small = nowhere.txt\n");
  const auto p = run("experiment --plan " + dir + "/plan.txt --out " + dir + "/o", dir);
  EXPECT_EQ(p.status, 1);
  EXPECT_EQ(line_count(p.err), 1u);
  EXPECT_EQ(p.err.rfind("error: io:", 0), 0u) << p.err;
}

TEST(Cli, SynthIsByteIdenticalAcrossRuns) {
  const auto dir = bwtest::scratch_dir("cli_synth");
  write_text_file(dir + "/farm.txt", kTinyFarm);
  for (const char* out : {"/a", "/b"}) ASSERT_EQ(run("synth --quiet --seed 5 --profile " + dir + "/farm.txt --out " + dir + out, dir).status, 0);
  const auto a = tree_bytes(dir + "/a");
  EXPECT_EQ(a, tree_bytes(dir + "/b"));
  EXPECT_TRUE(a.count("small_manifest.csv"));
  EXPECT_TRUE(fs::exists(dir + "/a/run_manifest.txt"));
}

TEST(Cli, ConvertThenPreprocess) {
  const auto dir = bwtest::scratch_dir("cli_convert");
  write_text_file(dir + "/farm.txt", kTinyFarm);
  ASSERT_EQ(run("synth --quiet --seed 5 --profile " + dir + "/farm.txt --out " + dir + "/data", dir).status, 0);
  const auto c = run("convert --manifest " + dir + "/data/small_manifest.csv --camera " + dir + "/data/small_camera.txt --out " + dir + "/raw", dir);
  ASSERT_EQ(c.status, 0) << c.err;
  const auto p = run("preprocess --input " + dir + "/raw --out " + dir + "/std --workers 2", dir);
  ASSERT_EQ(p.status, 0) << p.err;
  std::size_t clouds = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir + "/std"))
    if (e.path().extension() == ".bwpc") {
      const auto cloud = load_cloud(e.path().string());
      EXPECT_EQ(cloud.stage, CloudStage::standardized);
      EXPECT_EQ(cloud.size(), kStandardPointCount);
      ++clouds;
    }
  EXPECT_GE(clouds, 10u);
  EXPECT_NE(read_text_file(dir + "/std/run_manifest.txt").find("command = preprocess"), std::string::npos);
}

TEST(Cli, ExperimentAndReport) {
  const auto dir = bwtest::scratch_dir("cli_experiment");
  write_text_file(dir + "/farm.txt", "camera = small\nfarm_id = small\nn_cows = 12\nframes_min = 1\nframes_max = 1\n");
  ASSERT_EQ(run("synth --quiet --seed 5 --profile " + dir + "/farm.txt --out " + dir + "/data", dir).status, 0);
  write_text_file(dir + "/plan.txt",
                  "design = single_source\nmodels = pointnet\nrepeats = 2\nmanifest.small = data/small_manifest.csv\n"
                  "camera.small = data/small_camera.txt\ngrid.pointnet.lr = 1e-3\ngrid.pointnet.dropout = 0.3\n"
                  "grid.pointnet.weight_decay = 1e-4\ngrid.pointnet.embedding_dim = 256\ngrid.pointnet.feature_tnet = off\n"
                  "epochs.stage1 = 1\nepochs.stage2 = 1\nbatch_size = 4\n");
  const auto e = run("experiment --quiet --plan " + dir + "/plan.txt --out " + dir + "/out", dir);
  ASSERT_EQ(e.status, 0) << e.err;
  for (const char* f : {"results.csv", "predictions.csv", "splits.csv", "summary.csv", "summary.txt", "run_manifest.txt"})
    EXPECT_TRUE(fs::exists(dir + "/out/" + f)) << f;
  EXPECT_NE(read_text_file(dir + "/out/run_manifest.txt").find("projected_makespan_8_workers"), std::string::npos);

  const auto r = run("report --results " + dir + "/out/results.csv", dir);
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_EQ(r.out, read_text_file(dir + "/out/summary.txt"));
}
