#include <gtest/gtest.h>

#include <regex>

#include "insdet/insdet.hpp"
#include "support/fixtures.hpp"

using fixtures::TempDir;

namespace {

const std::string kCli = INSDET_CLI;

fixtures::RunResult cli(const std::string& args, const TempDir& dir) {
  return fixtures::run("cd '" + dir.path().string() + "' && '" + kCli + "' " + args, dir.path());
}

bool has_error_record(const std::string& err, const std::string& code) {
  return std::regex_search(err, std::regex("(^|\n)ERROR " + code + ": [^\n]+"));
}

// A small world that trains in well under a second.
const char* kWorld = "--seed 7 gen-synth --out w --instances 8 --scenes 8 --distractor-count 80";

}  // namespace

TEST(Cli, GenSynthThenValidate) {
  TempDir dir;
  ASSERT_EQ(cli("gen-synth --seed 7 --out d/", dir).exit_code, 0);
  const auto r = cli("validate --manifest d/manifest", dir);
  EXPECT_EQ(r.exit_code, 0) << r.err;
  EXPECT_NE(r.out.find("\"valid\":true"), std::string::npos);
  EXPECT_NE(r.out.find("config {"), std::string::npos);
  EXPECT_EQ(cli("validate --embeddings d/references.idow", dir).exit_code, 0);
}

TEST(Cli, ValidationFailuresExitTwoWithRecord) {
  TempDir dir;
  ASSERT_EQ(cli(kWorld, dir).exit_code, 0);
  auto bytes = insdet::binary::read_file(dir / "w/proposals.idow");
  bytes[0] = 'Z';
  insdet::binary::write_file_atomic(dir / "w/proposals.idow", bytes);
  const auto r = cli("validate --manifest w", dir);
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_TRUE(has_error_record(r.err, "BadMagic")) << r.err;

  fixtures::spit(dir / "broken.json", "{\"format_version\": 1}");
  const auto s = cli("validate --manifest broken.json", dir);
  EXPECT_EQ(s.exit_code, 2);
  EXPECT_TRUE(has_error_record(s.err, "SchemaViolation")) << s.err;
}

TEST(Cli, UnknownFlagsAndBadValuesAreRejected) {
  TempDir dir;
  auto r = cli("gen-synth --out x --bogus 1", dir);
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_TRUE(has_error_record(r.err, "InvalidArgument")) << r.err;
  r = cli("train --manifest m --out a --loss hinge", dir);
  EXPECT_EQ(r.exit_code, 2);
  r = cli("", dir);
  EXPECT_EQ(r.exit_code, 2);
  r = cli("--threads 0 validate --manifest m", dir);
  EXPECT_EQ(r.exit_code, 2);
}

TEST(Cli, HelpDocumentsFlags) {
  TempDir dir;
  const auto r = cli("train --help", dir);
  EXPECT_EQ(r.exit_code, 0);
  for (const char* flag : {"--alpha", "--lr", "--weight-decay", "--batch", "--epochs", "--distractors", "--aug-train",
                           "--loss"}) {
    EXPECT_NE(r.out.find(flag), std::string::npos) << flag;
  }
  const auto top = cli("--help", dir);
  EXPECT_EQ(top.exit_code, 0);
  for (const char* flag : {"--seed", "--threads", "--log-level", "gen-synth", "sweep-aug", "validate"}) {
    EXPECT_NE(top.out.find(flag), std::string::npos) << flag;
  }
  EXPECT_NE(r.out.find("published setting"), std::string::npos);
  const auto m = cli("match --help", dir);
  EXPECT_NE(m.out.find("--threshold"), std::string::npos);
  EXPECT_NE(m.out.find("--aug-test"), std::string::npos);
}

TEST(Cli, ZeroEpochTrainingMatchesInitialAdapter) {
  TempDir dir;
  ASSERT_EQ(cli(kWorld, dir).exit_code, 0);
  ASSERT_EQ(cli("--seed 3 train --manifest w --out a0.idoa --epochs 0", dir).exit_code, 0);
  const auto m = insdet::load_manifest(dir / "w/manifest.json");
  insdet::write_adapter(insdet::initial_adapter(m.dim, m.dim, 3, 0.01), dir / "init.idoa");
  ASSERT_EQ(cli("match --manifest w --adapter a0.idoa --out d0.json", dir).exit_code, 0);
  ASSERT_EQ(cli("match --manifest w --adapter init.idoa --out d1.json", dir).exit_code, 0);
  EXPECT_EQ(fixtures::slurp(dir / "d0.json"), fixtures::slurp(dir / "d1.json"));
}

TEST(Cli, TrainedBeatsUntrainedEndToEnd) {
  TempDir dir;
  ASSERT_EQ(cli(kWorld, dir).exit_code, 0);
  ASSERT_EQ(cli("train --manifest w --out a.idoa --lr 1e-2 --epochs 50 --weight-decay 0 --loss-trace t.csv", dir)
                .exit_code,
            0);
  ASSERT_EQ(cli("match --manifest w --adapter a.idoa --out det.json", dir).exit_code, 0);
  ASSERT_EQ(cli("eval --manifest w --detections det.json --out metrics.json", dir).exit_code, 0);
  ASSERT_EQ(cli("match --manifest w --out det0.json", dir).exit_code, 0);
  ASSERT_EQ(cli("eval --manifest w --detections det0.json --out metrics0.json", dir).exit_code, 0);
  const auto trained = nlohmann::json::parse(fixtures::slurp(dir / "metrics.json"));
  const auto untrained = nlohmann::json::parse(fixtures::slurp(dir / "metrics0.json"));
  EXPECT_GT(trained["AP"].get<double>(), untrained["AP"].get<double>());
  const auto trace = fixtures::slurp(dir / "t.csv");
  EXPECT_EQ(trace.substr(0, trace.find('\n')), "epoch,mean_loss,active_triplet_fraction");
}

TEST(Cli, OutputsIndependentOfThreads) {
  TempDir dir;
  ASSERT_EQ(cli(kWorld, dir).exit_code, 0);
  for (const char* threads : {"1", "3"}) {
    const std::string t = threads;
    const std::string sfx = "_" + t;
    ASSERT_EQ(cli("--threads " + t + " train --manifest w --out a" + sfx + ".idoa --epochs 3 --distractors", dir).exit_code, 0);
    ASSERT_EQ(cli("--threads " + t + " match --manifest w --adapter a" + sfx + ".idoa --aug-test 2 --out d" + sfx + ".json", dir).exit_code, 0);
    ASSERT_EQ(cli("--threads " + t + " eval --manifest w --detections d" + sfx + ".json --out m" + sfx + ".json", dir).exit_code, 0);
    ASSERT_EQ(cli("--threads " + t + " distractor-stats --manifest w --out s" + sfx + ".csv", dir).exit_code, 0);
    ASSERT_EQ(cli("--threads " + t + " pr-curve --manifest w --detections d" + sfx + ".json --out p" + sfx + ".csv", dir).exit_code, 0);
  }
  for (const char* f : {"a_%.idoa", "d_%.json", "m_%.json", "s_%.csv", "p_%.csv"}) {
    std::string one = f, three = f;
    one.replace(one.find('%'), 1, "1");
    three.replace(three.find('%'), 1, "3");
    EXPECT_EQ(fixtures::slurp(dir / one), fixtures::slurp(dir / three)) << f;
  }
}

TEST(Cli, SweepAugWritesDeltaTable) {
  TempDir dir;
  ASSERT_EQ(cli(kWorld, dir).exit_code, 0);
  const auto r = cli("sweep-aug --manifest w --train-grid 0,2 --test-grid 0,4 --epochs 2 --out sweep.csv", dir);
  ASSERT_EQ(r.exit_code, 0) << r.err;
  const auto csv = fixtures::slurp(dir / "sweep.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "synth_train,synth_test,ap_avg,delta_ap_avg");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
  EXPECT_NE(csv.find("\n0,0,"), std::string::npos);
  EXPECT_NE(csv.find(",0.000000\n"), std::string::npos);  // the baseline row
}

TEST(Cli, EvalRejectsUnknownScene) {
  TempDir dir;
  ASSERT_EQ(cli(kWorld, dir).exit_code, 0);
  fixtures::spit(dir / "dets.json",
                 R"([{"image_id": 999, "instance_id": 0, "bbox": [0, 0, 10, 10], "score": 0.9}])");
  const auto r = cli("eval --manifest w --detections dets.json --out m.json", dir);
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_TRUE(has_error_record(r.err, "UnknownScene")) << r.err;
  EXPECT_FALSE(std::filesystem::exists(dir / "m.json"));
}

TEST(Cli, MissingInputIsReported) {
  TempDir dir;
  const auto r = cli("match --manifest nowhere.json --out d.json", dir);
  EXPECT_NE(r.exit_code, 0);
  EXPECT_TRUE(has_error_record(r.err, "Io")) << r.err;
}
