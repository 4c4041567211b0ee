#include <gtest/gtest.h>

#include <filesystem>

#include "gfr/analysis.hpp"

using namespace gfr;
using namespace gfr::analysis;

namespace {

Mat<double> gaussian(int n, int p, std::uint64_t seed) {
  Rng rng(seed);
  return normal_matrix<double>(n, p, rng);
}

/// n × p with `strong` high-variance directions and the rest at 1e-3 scale.
Mat<double> spectrally_separated(int n, int p, int strong, std::uint64_t seed) {
  Mat<double> a = gaussian(n, p, seed);
  a.rightCols(p - strong) *= 1e-3;
  return a;
}

Mat<double> well_conditioned(int p, std::uint64_t seed) {
  Mat<double> q = Mat<double>::Identity(p, p) + 0.3 * gaussian(p, p, seed) / std::sqrt(static_cast<double>(p));
  Eigen::JacobiSVD<Mat<double>> svd(q);
  EXPECT_LT(svd.singularValues()(0) / svd.singularValues()(p - 1), 10.0);
  return q;
}

data::TaskStream small_stream(std::shared_ptr<const data::Dataset> ds) { return data::build_task_stream(ds, 0.5, 2, 4); }

}  // namespace

TEST(Svcca, SelfSimilarityIsOne) {
  const Mat<double> a = gaussian(500, 12, 1);
  const auto r = svcca(a, a);
  EXPECT_NEAR(r.similarity, 1.0, 1e-6);
  EXPECT_EQ(r.dims_a, r.dims_b);
}

TEST(Svcca, InvariantToInvertibleLinearMaps) {
  const Mat<double> a = gaussian(800, 10, 2);
  const Mat<double> q = well_conditioned(10, 3);
  EXPECT_NEAR(svcca(a, a * q, 1.0).similarity, 1.0, 1e-3);
  // with the default threshold the truncation keeps the same dominant subspace when the spectrum has a gap
  const Mat<double> s = spectrally_separated(800, 10, 6, 4);
  Mat<double> block = Mat<double>::Identity(10, 10);
  block.topLeftCorner(6, 6) = well_conditioned(6, 5);
  EXPECT_NEAR(svcca(s, s * block).similarity, 1.0, 1e-3);
}

TEST(Svcca, ColumnRescalingAndSymmetry) {
  const Mat<double> a = gaussian(600, 8, 6);
  Mat<double> b = a.leftCols(5) * gaussian(5, 8, 7) + 0.5 * gaussian(600, 8, 8);
  Vec<double> scale(8);
  scale << 0.5, 2, 3, 0.7, 1.5, 4, 0.9, 1.1;
  const double base = svcca(a, b, 1.0).similarity;
  EXPECT_NEAR(svcca(Mat<double>(a * scale.asDiagonal()), b, 1.0).similarity, base, 1e-3);
  EXPECT_NEAR(svcca(b, a, 1.0).similarity, base, 1e-6);
  EXPECT_NEAR(svcca(a, b).similarity, svcca(b, a).similarity, 1e-6);
}

TEST(Svcca, IndependentRandomPairIsLow) {
  const auto r = svcca(gaussian(2000, 20, 9), gaussian(2000, 20, 10));
  EXPECT_LT(r.similarity, 0.3);
  EXPECT_GE(r.similarity, 0.0);
}

TEST(Svcca, BoundedOnRandomInputs) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Mat<double> a = gaussian(100, 5 + static_cast<int>(s % 7), 100 + s);
    const Mat<double> b = a.leftCols(3) * gaussian(3, 6, 200 + s) + gaussian(100, 6, 300 + s) * 0.1 * static_cast<double>(s);
    for (double th : {0.5, 0.9, 0.99, 1.0}) {
      const auto r = svcca(a, b, th);
      EXPECT_GE(r.similarity, 0.0);
      EXPECT_LE(r.similarity, 1.0);
      for (double c : r.correlations) EXPECT_LE(c, 1.0);
    }
  }
}

TEST(Svcca, ErrorsOnDegenerateInput) {
  const Mat<double> constant = Mat<double>::Ones(50, 4);
  EXPECT_THROW(svcca(constant, gaussian(50, 4, 1)), AnalysisError);
  EXPECT_THROW(svcca(gaussian(50, 4, 1), gaussian(40, 4, 2)), InputError);
  EXPECT_THROW(svcca(gaussian(50, 4, 1), gaussian(50, 4, 2), 0.0), ConfigError);
}

TEST(Activations, ShapesDeterminismAndSnapshot) {
  auto ds = std::make_shared<data::Dataset>(data::make_synthetic_benchmark(4, 16, 3, 4, 1));
  Rng rng(2);
  auto m = model::Model<float>::create(model::Architecture{}, 4, rng);
  const std::vector<int> idx{0, 1, 2, 3, 4};
  const auto x = data::make_batch<float>(ds->test, ds->meta, idx, nullptr, rng);
  const std::vector<std::string> taps{"block1", "block3", "feature"};
  const auto a = collect_activations(m, taps, x);
  ASSERT_EQ(a.size(), 3u);
  EXPECT_EQ(a[0].values.rows(), 5);
  EXPECT_EQ(a[0].values.cols(), 8);
  EXPECT_EQ(a[1].values.cols(), 32);
  EXPECT_EQ(a[2].values.cols(), 64);
  const auto flat = collect_activations(m, {"block1"}, x, SpatialMode::locations);
  EXPECT_EQ(flat[0].values.rows(), 5 * 8 * 8);
  EXPECT_TRUE(flat[0].values.colwise().mean().isApprox(a[0].values.colwise().mean(), 1e-6));
  const auto again = collect_activations(m, taps, x);
  for (size_t i = 0; i < taps.size(); ++i) EXPECT_EQ(again[i].values, a[i].values);
  model::ModelSnapshot<float> snap(m);
  EXPECT_EQ(collect_activations(snap.model(), taps, x)[2].values, a[2].values);
  EXPECT_THROW(collect_activations(m, {"block7"}, x), InputError);
}

TEST(Activations, TapsAfterTheSplitComeFromTheHeadTrunk) {
  auto ds = std::make_shared<data::Dataset>(data::make_synthetic_benchmark(2, 16, 2, 2, 1));
  Rng rng(3);
  model::Architecture arch;
  arch.tap = "block2";
  auto m = model::Model<float>::create(arch, 2, rng);
  const std::vector<int> idx{0, 1};
  const auto x = data::make_batch<float>(ds->test, ds->meta, idx, nullptr, rng);
  const auto a = collect_activations(m, {"block2", "feature"}, x);
  EXPECT_EQ(a[0].values.cols(), 16);
  EXPECT_EQ(a[1].values.cols(), 64);
}

TEST(ForgettingCurves, DiagonalIsOneAndMissingCheckpointErrors) {
  auto ds = std::make_shared<data::Dataset>(data::make_synthetic_benchmark(4, 16, 3, 40, 5));
  auto stream = small_stream(ds);
  Rng rng(4);
  std::vector<model::Model<float>> models;
  for (int t = 0; t < 2; ++t) models.push_back(model::Model<float>::create(model::Architecture{}, 2 + t, rng));
  CcaOptions opt;
  opt.taps = {"block2", "feature"};
  const auto cells = forgetting_curves(models, stream, opt);
  ASSERT_EQ(cells.size(), 2u * 3u);
  for (const auto& c : cells) {
    if (c.t == c.t_prime) {
      EXPECT_NEAR(c.similarity, 1.0, 1e-6) << c.layer;
    }
    EXPECT_LE(c.similarity, 1.0);
  }
  const auto dir = std::filesystem::temp_directory_path() / "gfr_test_cca_missing";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir / "task_1");
  model::save_extractor(dir / "task_1" / "extractor.ckpt", models[0].extractor);
  model::save_head(dir / "task_1" / "head.ckpt", models[0].head);
  EXPECT_EQ(load_task_models<float>(dir, 1).size(), 1u);
  EXPECT_THROW(load_task_models<float>(dir, 2), AnalysisError);
  write_cca_csv(dir / "cca.csv", cells);
  const auto back = read_cca_csv(dir / "cca.csv");
  ASSERT_EQ(back.size(), cells.size());
  EXPECT_EQ(back[1].layer, cells[1].layer);
  EXPECT_EQ(back[1].similarity, cells[1].similarity);
  std::filesystem::remove_all(dir);
}

TEST(ProbeIndices, CappedSeededSubset) {
  auto ds = std::make_shared<data::Dataset>(data::make_synthetic_benchmark(2, 8, 1, 30, 5));
  auto stream = data::build_task_stream(ds, 0.5, 1, 1);
  const auto a = probe_indices(stream, 1, 10, 3);
  EXPECT_EQ(a.size(), 10u);
  EXPECT_EQ(a, probe_indices(stream, 1, 10, 3));
  EXPECT_EQ(probe_indices(stream, 1, 1000, 3), stream.task(1).test);
}

TEST(ExportFeatures, CountsDegenerateGeneratorAndRoundTrip) {
  auto ds = std::make_shared<data::Dataset>(data::make_synthetic_benchmark(4, 16, 2, 100, 6));
  auto stream = data::build_task_stream(ds, 0.5, 2, 2);
  Rng rng(7);
  auto m = model::Model<float>::create(model::Architecture{}, 4, rng);
  gen::GaussianPrototypeBank<float> bank(64, false);
  for (int h = 0; h < 2; ++h) {
    gen::Prototype<float> p;
    p.mean = Vec<float>::Constant(64, static_cast<float>(h + 1));
    p.variance = Vec<float>::Zero(64);
    bank.set(h, p);
  }
  gen::FeatureGenerator<float> generator{bank, {0, 1}};
  const std::vector<int> classes{stream.class_order[0], stream.class_order[1]};
  const auto recs = export_features(m.extractor, stream, generator, classes, 100, rng);
  EXPECT_EQ(recs.size(), 400u);
  for (const auto& r : recs) {
    if (r.generated) {
      const float expected = r.class_id == classes[0] ? 1.0f : 2.0f;
      for (float v : r.values) ASSERT_EQ(v, expected);
    }
  }
  const auto file = std::filesystem::temp_directory_path() / "gfr_test_features.bin";
  write_feature_dump(file, recs);
  EXPECT_EQ(std::filesystem::file_size(file), 400u * (1 + 4 + 64 * 4));
  const auto back = read_feature_dump(file, 64);
  ASSERT_EQ(back.size(), recs.size());
  EXPECT_EQ(back[123].values, recs[123].values);
  EXPECT_EQ(back[123].class_id, recs[123].class_id);
  std::filesystem::remove(file);
  EXPECT_THROW(export_features(m.extractor, stream, generator, {stream.class_order[2]}, 5, rng), InputError);
}

TEST(ExportFeatures, GaussianFitCentroidsTrackRealFeatures) {
  auto ds = std::make_shared<data::Dataset>(data::make_synthetic_benchmark(2, 16, 200, 200, 8));
  auto stream = data::build_task_stream(ds, 0.5, 1, 3);
  Rng rng(9);
  auto m = model::Model<float>::create(model::Architecture{}, 2, rng);
  // fit prototypes on training features, compare dumped test features with generated ones
  const auto& train = stream.task(1).train;
  const auto x = data::make_batch<float>(ds->train, ds->meta, train, nullptr, rng);
  const Mat<float> u = m.extractor.infer(x);
  Labels y;
  const auto index = stream.head_index();
  for (int i : train) y.push_back(index[ds->train[static_cast<size_t>(i)].label]);
  gen::GaussianPrototypeBank<float> bank(64, false);
  gen::fit_gaussian_prototypes(bank, u, y, {0});
  gen::FeatureGenerator<float> generator{bank, {0}};
  const int c = stream.class_order[0];
  const auto recs = export_features(m.extractor, stream, generator, {c}, 200, rng);
  Vec<double> real_mean = Vec<double>::Zero(64), gen_mean = Vec<double>::Zero(64), real_sq = Vec<double>::Zero(64);
  int nr = 0, ng = 0;
  for (const auto& r : recs) {
    const Vec<double> v = Eigen::Map<const Vec<float>>(r.values.data(), 64).cast<double>();
    if (r.generated) {
      gen_mean += v;
      ++ng;
    } else {
      real_mean += v;
      real_sq += v.cwiseAbs2();
      ++nr;
    }
  }
  real_mean /= nr;
  gen_mean /= ng;
  const double real_std = std::sqrt((real_sq / nr - real_mean.cwiseAbs2()).sum());
  EXPECT_LT((real_mean - gen_mean).norm(), real_std);
}
