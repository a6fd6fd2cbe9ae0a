#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include <gtest/gtest.h>
#include <json.hpp>

namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code = -1;
  std::string out;
};

fs::path work_dir() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "npq_test_cli";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

CliRun npq(const std::string& args) {
  const fs::path out = work_dir() / "stdout.txt";
  const std::string cmd = std::string(NPQ_CLI) + " " + args + " > " + out.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out)};
}

std::string path(const std::string& name) { return (work_dir() / name).string(); }

}  // namespace

TEST(Cli, VerifyCleanReduction) {
  const CliRun r = npq("verify --traces 100 --seed 7");
  EXPECT_EQ(r.code, 0) << r.out;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j.at("divergent"), 0);
  EXPECT_EQ(j.at("traces"), 100);
}

TEST(Cli, TrainMissingConfigLeavesNoOutputs) {
  const std::string out = path("missing_run");
  const CliRun r = npq("train --config " + path("missing.toml") + " --set out_dir=" + out);
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.out.find("missing.toml"), std::string::npos) << r.out;
  EXPECT_FALSE(fs::exists(out));
}

TEST(Cli, UnknownFlagPrintsUsage) {
  const CliRun r = npq("verify --tracez 3");
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.out.find("tracez"), std::string::npos) << r.out;
  EXPECT_NE(npq("").code, 0);
  EXPECT_NE(npq("frobnicate").code, 0);
}

TEST(Cli, GenerateIsDeterministic) {
  ASSERT_EQ(npq("generate --count 3 --nodes 8 --seed 4 --out " + path("g1.jsonl")).code, 0);
  ASSERT_EQ(npq("generate --count 3 --nodes 8 --seed 4 --out " + path("g2.jsonl")).code, 0);
  EXPECT_EQ(slurp(path("g1.jsonl")), slurp(path("g2.jsonl")));
  std::istringstream lines(slurp(path("g1.jsonl")));
  std::string line;
  std::size_t count = 0;
  while (std::getline(lines, line)) {
    EXPECT_EQ(nlohmann::json::parse(line).at("parent").size(), 8u);
    ++count;
  }
  EXPECT_EQ(count, 3u);
  EXPECT_NE(npq("generate --count 0 --nodes 8 --out " + path("g0.jsonl")).code, 0);
}

TEST(Cli, TrainThenEvalPrintsCsv) {
  ASSERT_EQ(npq("generate --count 8 --nodes 6 --seed 1 --out " + path("train.jsonl")).code, 0);
  ASSERT_EQ(npq("generate --count 4 --nodes 6 --seed 2 --out " + path("val.jsonl")).code, 0);
  {
    std::ofstream cfg(path("run.cfg"));
    cfg << "# tiny run\nmodel = NPQ_W\nhidden = 8\nepochs = 2\n"
        << "train_data = " << path("train.jsonl") << "\nval_data = " << path("val.jsonl") << "\n";
  }
  const std::string out = path("run");
  const CliRun t = npq("train --config " + path("run.cfg") + " --set out_dir=" + out + " --set seed=3");
  ASSERT_EQ(t.code, 0) << t.out;
  EXPECT_EQ(nlohmann::json::parse(t.out).at("seed"), 3);
  EXPECT_EQ(slurp(out + "/metrics.csv").substr(0, 24), "epoch,train_loss,val_acc");

  const CliRun e = npq("eval --checkpoint " + out + "/best.json --data " + path("val.jsonl"));
  ASSERT_EQ(e.code, 0) << e.out;
  std::istringstream lines(e.out);
  std::string header, row;
  std::getline(lines, header);
  std::getline(lines, row);
  EXPECT_EQ(header, "model,samples,accuracy");
  ASSERT_EQ(std::count(row.begin(), row.end(), ','), 2) << row;
  EXPECT_EQ(row.substr(0, row.find(',')), "NPQ_W");
  const double acc = std::stod(row.substr(row.rfind(',') + 1));
  EXPECT_GE(acc, 0.0);
  EXPECT_LE(acc, 1.0);

  EXPECT_NE(npq("train --config " + path("run.cfg") + " --set bogus=1").code, 0);
  EXPECT_NE(npq("eval --checkpoint " + path("nope.json") + " --data " + path("val.jsonl")).code, 0);
}

TEST(Cli, ProptestSmallRun) {
  const CliRun r = npq("proptest --cases 5 --max-nodes 5 --fuzz 200 --runs 3 --seed 1");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(nlohmann::json::parse(r.out).size(), 3u);
}
