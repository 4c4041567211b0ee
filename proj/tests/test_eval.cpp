#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <random>

#include "gfr/eval.hpp"

using namespace gfr;
using namespace gfr::eval;

namespace {

AccuracyMatrix matrix(std::initializer_list<std::vector<double>> rows) {
  AccuracyMatrix m;
  for (const auto& r : rows) m.add_row(r);
  return m;
}

}  // namespace

TEST(AverageAccuracy, HandOracles) {
  auto m = matrix({{0.2}, {0.4, 0.6}, {0.5, 0.7, 0.9}});
  EXPECT_NEAR(average_accuracy(m, 3), 0.7, 1e-12);
  EXPECT_EQ(average_accuracy(m, 1), 0.2);
  auto c = matrix({{0.3}, {0.3, 0.3}});
  EXPECT_NEAR(average_accuracy(c, 2), 0.3, 1e-15);
  EXPECT_THROW(average_accuracy(m, 4), InputError);
}

TEST(AverageAccuracy, PermutationInvariantOverRow) {
  std::vector<double> row{0.1, 0.25, 0.9, 0.55, 0.4};
  std::mt19937 g(1);
  const double base = [&] {
    AccuracyMatrix m;
    for (int k = 1; k <= 4; ++k) m.add_row(std::vector<double>(static_cast<size_t>(k), 0.5));
    m.add_row(row);
    return average_accuracy(m, 5);
  }();
  for (int trial = 0; trial < 10; ++trial) {
    std::shuffle(row.begin(), row.end(), g);
    AccuracyMatrix m;
    for (int k = 1; k <= 4; ++k) m.add_row(std::vector<double>(static_cast<size_t>(k), 0.5));
    m.add_row(row);
    EXPECT_NEAR(average_accuracy(m, 5), base, 1e-15);
  }
}

TEST(AverageAccuracy, MicroWeightsByTestSize) {
  auto m = matrix({{1.0}, {1.0, 0.0}});
  EXPECT_NEAR(average_accuracy_micro(m, 2, {30, 10}), 0.75, 1e-12);
  EXPECT_NEAR(average_accuracy_micro(m, 2, {10, 10}), average_accuracy(m, 2), 1e-12);
}

TEST(AverageForgetting, HandOracles) {
  EXPECT_NEAR(average_forgetting(matrix({{0.9}, {0.7, 0.8}}), 2), 0.2, 1e-9);
  EXPECT_NEAR(average_forgetting(matrix({{0.9}, {0.6, 0.8}, {0.5, 0.7, 0.9}}), 3), 0.25, 1e-9);
  EXPECT_NEAR(average_forgetting(matrix({{0.5}, {0.6, 0.7}}), 2), -0.1, 1e-9);
  EXPECT_THROW(average_forgetting(matrix({{0.5}}), 1), InputError);
}

TEST(AverageForgetting, MaxIncludesLaterPeaks) {
  // task 1 peaks at k=2, so forgetting at k=3 is measured from 0.8
  auto m = matrix({{0.6}, {0.8, 0.9}, {0.5, 0.9, 0.7}});
  EXPECT_NEAR(average_forgetting(m, 3), ((0.8 - 0.5) + (0.9 - 0.9)) / 2, 1e-12);
}

TEST(AverageForgetting, PropertiesOnRandomMatrices) {
  std::mt19937 g(7);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 200; ++trial) {
    const int t = 2 + trial % 5;
    AccuracyMatrix m;
    for (int k = 1; k <= t; ++k) {
      std::vector<double> r;
      for (int j = 1; j <= k; ++j) r.push_back(u(g));
      m.add_row(r);
    }
    EXPECT_EQ(average_forgetting(m, 2), m.at(1, 1) - m.at(2, 1));
    // a final row dominating every earlier row columnwise gives non-positive forgetting
    AccuracyMatrix d;
    for (int k = 1; k < t; ++k) d.add_row(m.row(k));
    std::vector<double> top;
    for (int j = 1; j <= t; ++j) {
      double best = 0;
      for (int k = j; k < t; ++k) best = std::max(best, m.at(k, j));
      top.push_back(std::min(1.0, best + 0.5 * u(g) * (1 - best)));
    }
    d.add_row(top);
    EXPECT_LE(average_forgetting(d, t), 1e-15);
  }
}

TEST(AccuracyMatrix, RejectsMalformedRows) {
  AccuracyMatrix m;
  EXPECT_THROW(m.add_row({0.5, 0.5}), InputError);
  EXPECT_THROW(m.add_row({1.5}), InputError);
  m.add_row({1.0});
  EXPECT_THROW((void)m.at(1, 2), InputError);
}

TEST(Accuracy, FromScoresAndTies) {
  Mat<double> s(4, 2);
  s << 1, 0, 0, 1, 1, 0, 0, 1;
  EXPECT_EQ(accuracy_from_scores(s, {0, 1, 0, 1}), 1.0);
  Mat<double> constant = Mat<double>::Zero(4, 2);
  EXPECT_EQ(accuracy_from_scores(constant, {0, 1, 0, 1}), 0.5);
  EXPECT_THROW(accuracy_from_scores(Mat<double>(0, 2), {}), InputError);
}

TEST(Accuracy, SingleHeadCanMisclassifyWithinTaskCorrectExample) {
  // columns 0,1 belong to task 1 and column 2 to task 2; within task 1 the label 0 wins,
  // but the new class outscores it in the joint argmax
  Mat<double> s(1, 3);
  s << 2.0, 1.0, 3.0;
  EXPECT_EQ(accuracy_from_scores(Mat<double>(s.leftCols(2)), {0}), 1.0);
  EXPECT_EQ(accuracy_from_scores(s, {0}), 0.0);
}

TEST(Accuracy, TaskAccuracyOnConstructedModel) {
  auto ds = std::make_shared<data::Dataset>(data::make_synthetic_benchmark(4, 16, 3, 5, 2));
  auto stream = data::build_task_stream(ds, 0.5, 2, 1);
  Rng rng(3);
  auto m = model::Model<float>::create(model::Architecture{}, 3, rng);
  // zero head: every prediction ties and goes to head index 0
  m.head.linear().weight().setZero();
  const double a1 = task_accuracy(m, stream, 1);
  const int first_class = stream.class_order[0];
  int expected = 0;
  for (int i : stream.task(1).test) expected += static_cast<int>(ds->test[static_cast<size_t>(i)].label) == first_class;
  EXPECT_NEAR(a1, static_cast<double>(expected) / static_cast<double>(stream.task(1).test.size()), 1e-12);
  EXPECT_EQ(task_accuracy(m, stream, 2), 0.0);
}

TEST(Csv, MetricsRoundTripAndSummary) {
  const auto dir = std::filesystem::temp_directory_path() / "gfr_test_eval_csv";
  std::filesystem::create_directories(dir);
  auto m = matrix({{0.9}, {0.6, 0.8}, {0.5, 0.7, 0.9}});
  write_metrics_csv(dir / "metrics.csv", m);
  EXPECT_EQ(read_metrics_csv(dir / "metrics.csv"), m);
  write_summary_csv(dir / "summary.csv", m);
  std::ifstream is(dir / "summary.csv");
  std::string header, r1, r2, r3;
  std::getline(is, header);
  std::getline(is, r1);
  std::getline(is, r2);
  std::getline(is, r3);
  EXPECT_EQ(header, "k,avg_accuracy,avg_forgetting");
  EXPECT_EQ(r1, "1,0.9,");
  EXPECT_EQ(r3.substr(0, 2), "3,");
  std::filesystem::remove_all(dir);
}

TEST(Storage, ExemplarBytesMatchTableValues) {
  const auto cifar = storage_footprint(exemplar_descriptor("icarl", 2000, 32, 32));
  EXPECT_EQ(cifar.exemplar_bytes, 6144000);
  EXPECT_NEAR(cifar.megabytes(), 6.144, 1e-12);
  const auto imagenet = storage_footprint(exemplar_descriptor("icarl", 2000, 256, 256));
  EXPECT_EQ(imagenet.exemplar_bytes, 393216000);
  EXPECT_EQ(imagenet.mebibytes(), 375.0);
}

TEST(Storage, ExemplarBytesExactlyLinear) {
  const long long b1 = storage_footprint(exemplar_descriptor("x", 500, 32, 32)).total_bytes();
  const long long b2 = storage_footprint(exemplar_descriptor("x", 1000, 32, 32)).total_bytes();
  const long long b3 = storage_footprint(exemplar_descriptor("x", 1500, 32, 32)).total_bytes();
  EXPECT_EQ(b2, 2 * b1);
  EXPECT_EQ(b3, 3 * b1);
}

TEST(Storage, FeatureGanClosedFormCount) {
  // generator 300→512→512→512 and critic 612→512→512→1, weights plus biases
  const long long g = 300LL * 512 + 512 + 512LL * 512 + 512 + 512LL * 512 + 512;
  const long long d = 612LL * 512 + 512 + 512LL * 512 + 512 + 512 + 1;
  const auto r = storage_footprint(feature_gan_descriptor(512, 100));
  EXPECT_EQ(r.model_bytes, 4 * (g + d));
  EXPECT_GT(r.megabytes(), 4.5 / 10);
  EXPECT_LT(r.megabytes(), 4.5 * 10);
  // class count enters only through the one-hot input columns of both networks
  const auto r2 = storage_footprint(feature_gan_descriptor(512, 200));
  EXPECT_EQ(r2.model_bytes - r.model_bytes, 4LL * 100 * (512 + 512));
}
