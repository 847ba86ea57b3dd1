#include <gtest/gtest.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>

#include "phg/io.hpp"
#include "pipeline.hpp"

using namespace phg::testing;

namespace {

fs::path base_dir() {
  static const fs::path dir = fs::temp_directory_path() / ("phg-cli-" + std::to_string(::getpid()));
  return dir;
}

std::string first_line(const fs::path& p) {
  const std::string s = slurp(p);
  return s.substr(0, s.find('\n'));
}

std::string last_line(const fs::path& p) {
  std::string s = slurp(p);
  while (!s.empty() && s.back() == '\n') s.pop_back();
  return s.substr(s.rfind('\n') + 1);
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    const auto t0 = std::chrono::steady_clock::now();
    failed_step_ = run_pipeline_in(base_dir() / "a");
    seconds_ = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
  static void TearDownTestSuite() { fs::remove_all(base_dir()); }

  static fs::path a() { return base_dir() / "a"; }

  static inline std::string failed_step_;
  static inline double seconds_ = 0.0;
};

}  // namespace

TEST_F(Cli, SmokePipelineCompletesWithinBudget) {
  EXPECT_EQ(failed_step_, "") << slurp(a().string() + ".log");
  EXPECT_LT(seconds_, 600.0);
  for (const char* f : {"run/model.phgc", "run/best-gt-semantic.phgc", "run/epochs.csv", "pred/s-02/candidates/000000.phgc",
                        "pred/s-02/gt-semantic/000005.phgt", "pred/s-02/gt-depth/000000.phgt", "student.phgc"})
    EXPECT_TRUE(fs::exists(a() / f)) << f;
}

TEST_F(Cli, CsvHeadersAreStable) {
  EXPECT_EQ(first_line(a() / "run/epochs.csv"), "epoch,task,metric,value,train_loss");
  EXPECT_EQ(first_line(a() / "run/best.csv"), "task,epoch,value");
  EXPECT_EQ(first_line(a() / "eval.csv"),
            "scene,frames,score,iou_land,iou_forest,iou_residential,iou_road,iou_little-objects,iou_water,iou_sky,iou_hill");
  EXPECT_EQ(first_line(a() / "consistency.csv"), "scene,frame,valid_pixels,score");
  EXPECT_EQ(first_line(a() / "manifest.csv"), "scene,frame,similarity");
  EXPECT_EQ(first_line(a() / "select-report.csv"), "scene,frame,similarity,gt_score,selected");
  EXPECT_EQ(first_line(a() / "topk.csv"), "algo,scene,frame,k,score");
  EXPECT_EQ(first_line(a() / "mask-dist.csv"), "index,masked_frequency");
  EXPECT_EQ(first_line(a() / "distill.csv"), "epoch,loss");
}

TEST_F(Cli, RerunWithSameSeedIsByteIdentical) {
  ASSERT_EQ(failed_step_, "");
  ASSERT_EQ(run_pipeline_in(base_dir() / "b"), "");
  const auto x = tree(a()), y = tree(base_dir() / "b");
  ASSERT_EQ(x.size(), y.size());
  for (const auto& [path, bytes] : x) {
    ASSERT_TRUE(y.count(path)) << path;
    EXPECT_TRUE(y.at(path) == bytes) << path;
  }
}

TEST_F(Cli, JobCountDoesNotChangeOutputs) {
  ASSERT_EQ(failed_step_, "");
  ASSERT_EQ(run_pipeline_in(base_dir() / "c", "3"), "");
  const auto x = tree(a()), y = tree(base_dir() / "c");
  ASSERT_EQ(x.size(), y.size());
  for (const auto& [path, bytes] : x) EXPECT_TRUE(y.count(path) && y.at(path) == bytes) << path;
}

TEST_F(Cli, EvalOfGroundTruthAgainstItselfScoresHundred) {
  ASSERT_EQ(failed_step_, "");
  ASSERT_EQ(run_cli(a(), "eval --pred data --gt data --out self.csv"), 0);
  const std::string last = last_line(a() / "self.csv");
  ASSERT_EQ(last.rfind("final,18,", 0), 0u) << last;
  const double score = std::stod(last.substr(9, last.find(',', 9) - 9));
  EXPECT_NEAR(score, 100.0, 1e-4);
}

TEST_F(Cli, SingleCandidateInferThenEvalTwiceIsIdentical) {
  ASSERT_EQ(failed_step_, "");
  for (const char* out : {"n1-x", "n1-y"}) {
    ASSERT_EQ(run_cli(a(), std::string("infer --ckpt run/model.phgc --scene data/s-02 --n 1 --seed 11 --out ") + out), 0);
    ASSERT_EQ(run_cli(a(), std::string("eval --pred ") + out + " --gt data --out " + out + ".csv"), 0);
  }
  EXPECT_EQ(slurp(a() / "n1-x.csv"), slurp(a() / "n1-y.csv"));
}

TEST_F(Cli, ExitCodes) {
  ASSERT_EQ(failed_step_, "");
  EXPECT_EQ(run_cli(a(), ""), 2);
  EXPECT_EQ(run_cli(a(), "gen --bogus"), 2);
  EXPECT_EQ(run_cli(a(), "train --config train.ini --mode 2all --size 150k --out x"), 2);
  EXPECT_EQ(run_cli(a(), "oracle --candidates pred --gt data --algo best --out x.csv"), 2);
  EXPECT_EQ(run_cli(a(), "gen --spec missing.ini --out x"), 3);
  EXPECT_EQ(run_cli(a(), "infer --ckpt run/model.phgc --scene data/s-02 --enumerate --n 3 --out x"), 2);

  // A NaN in an input tensor is a numeric failure.
  const fs::path bad = a() / "bad" / "s-02";
  fs::create_directories(bad.parent_path());
  fs::copy(a() / "data" / "s-02", bad, fs::copy_options::recursive);
  std::string bytes = slurp(bad / "rgb" / "000000.phgt");
  const float nan = std::nanf("");
  std::memcpy(bytes.data() + 20 + 7 * sizeof(float), &nan, sizeof nan);  // 20-byte rank-3 header
  spit(bad / "rgb" / "000000.phgt", bytes);
  EXPECT_EQ(run_cli(a(), "infer --ckpt run/model.phgc --scene bad/s-02 --n 2 --out bad-pred"), 4);
}

TEST_F(Cli, FailedCommandsLeaveNoPartialOutputs) {
  ASSERT_EQ(failed_step_, "");
  EXPECT_EQ(run_cli(a(), "eval --pred pred --gt nowhere --out failed.csv"), 3);
  EXPECT_FALSE(fs::exists(a() / "failed.csv"));
  for (const auto& e : fs::recursive_directory_iterator(a())) {
    const std::string name = e.path().filename().string();
    EXPECT_EQ(name.find(".tmp"), std::string::npos) << e.path();
    EXPECT_EQ(name.find(".partial"), std::string::npos) << e.path();
  }
}

TEST_F(Cli, DistillManifestKeepsHalfOfTheScene) {
  ASSERT_EQ(failed_step_, "");
  const std::string manifest = slurp(a() / "manifest.csv");
  EXPECT_EQ(std::count(manifest.begin(), manifest.end(), '\n'), 4);  // header and ceil(50% of 6)
}
