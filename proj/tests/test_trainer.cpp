#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "gfr/trainer.hpp"

using namespace gfr;
using namespace gfr::train;

namespace {

std::string slurp(const std::filesystem::path& file) {
  std::ifstream is(file, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

ExperimentConfig tiny_config(const std::string& method) {
  ExperimentConfig c;
  c.dataset.classes = 4;
  c.dataset.train_per_class = 24;
  c.dataset.test_per_class = 10;
  c.split.num_remaining_tasks = 2;
  c.model.widths = {4, 8, 8, 16};
  c.method.method = method;
  c.method.epochs = 2;
  c.method.batch_size = 16;
  c.method.augment = false;
  c.method.gan.latent_dim = 8;
  c.method.gan.hidden = {16, 16};
  c.method.gan.epochs = 4;
  c.method.gan.batch_size = 16;
  c.output.name = "t";
  return c;
}

struct Fixture {
  std::shared_ptr<const data::Dataset> ds;
  data::TaskStream stream;
  model::Architecture arch;
};

Fixture fixture(const ExperimentConfig& c) {
  Fixture f;
  f.ds = std::make_shared<const data::Dataset>(load_experiment_dataset(c));
  f.stream = data::build_task_stream(f.ds, c.split.first_task_fraction, c.split.num_remaining_tasks, c.split.seed);
  f.arch = c.architecture(f.ds->meta);
  return f;
}

std::pair<Tensor<float>, Labels> task_batch(const Fixture& f, int t, int count) {
  const auto& idx = f.stream.task(t).train;
  std::vector<int> sel(idx.begin(), idx.begin() + count);
  Rng rng(0);
  const auto index = f.stream.head_index();
  Labels y;
  for (int i : sel) y.push_back(index[f.ds->train[static_cast<size_t>(i)].label]);
  return {data::make_batch<float>(f.ds->train, f.ds->meta, sel, nullptr, rng), y};
}

std::vector<Vec<float>> grads(const std::vector<nn::Parameter<float>*>& ps) {
  std::vector<Vec<float>> g;
  for (auto* p : ps) g.push_back(p->grad);
  return g;
}

std::filesystem::path fresh_dir(const std::string& name) {
  const auto d = std::filesystem::temp_directory_path() / ("gfr_test_trainer_" + name);
  std::filesystem::remove_all(d);
  return d;
}

}  // namespace

TEST(ReplayBatch, SizeFollowsRatioPolicy) {
  gen::GaussianPrototypeBank<float> bank(3, false);
  for (int c = 0; c < 5; ++c) bank.set(c, {Vec<float>::Constant(3, static_cast<float>(c)), Vec<float>::Zero(3), {}, 0});
  gen::FeatureGenerator<float> g{bank, {0, 1, 2, 3, 4}};
  Rng rng(1);
  const std::vector<int> prev{0, 1, 2, 3, 4};
  auto [f, l] = make_replay_batch(g, prev, 10, 1.0, 5, rng);
  EXPECT_EQ(l.size(), 10u);
  EXPECT_EQ(f.rows(), 10);
  for (size_t i = 0; i < l.size(); ++i) {
    // zero covariance: every sample is exactly its class mean
    EXPECT_EQ(f.row(static_cast<Eigen::Index>(i)), Vec<float>::Constant(3, static_cast<float>(l[i])).transpose());
  }
  EXPECT_EQ(make_replay_batch(g, prev, 10, 0.0, 5, rng).second.size(), 0u);
  EXPECT_EQ(make_replay_batch(g, prev, 10, 0.5, 5, rng).second.size(), 5u);
  EXPECT_EQ(make_replay_batch(g, {0, 1, 2}, 10, 1.0, 4, rng).second.size(), 8u);  // round(7.5)
  EXPECT_THROW(make_replay_batch(g, {}, 10, 1.0, 5, rng), ConfigError);
}

TEST(ReplayBatch, LabelsUniformOverPreviousClasses) {
  gen::GaussianPrototypeBank<float> bank(1, false);
  for (int c = 0; c < 4; ++c) bank.set(c, {Vec<float>::Zero(1), Vec<float>::Ones(1), {}, 0});
  gen::FeatureGenerator<float> g{bank, {0, 1, 2, 3}};
  Rng rng(2);
  std::vector<int> counts(4, 0);
  const auto [f, l] = make_replay_batch(g, {0, 1, 2, 3}, 8000, 1.0, 4, rng);
  for (int c : l) ++counts[static_cast<size_t>(c)];
  // binomial(8000, 1/4) has standard deviation ~39
  for (int c : counts) EXPECT_NEAR(c, 2000, 200);
}

TEST(TrainTask, FirstTaskFitsTrainingData) {
  auto c = tiny_config("finetune");
  c.dataset.classes = 2;
  c.dataset.train_per_class = 60;
  c.split.first_task_fraction = 1.0;
  c.split.num_remaining_tasks = 0;
  c.model.widths = {8, 16, 32, 64};
  c.method.epochs = 8;
  const auto f = fixture(c);
  auto state = initial_state<float>(f.arch, f.stream, 3);
  train_task(state, f.stream, 1, c.method, 3);
  const auto& idx = f.stream.task(1).train;
  const auto u = extract_features(state.model.extractor, *f.ds, idx, false);
  const auto pred = model::argmax_rows(Mat<float>(state.model.head.infer(u)));
  const auto index = f.stream.head_index();
  int hit = 0;
  for (size_t i = 0; i < idx.size(); ++i) hit += pred[i] == index[f.ds->train[static_cast<size_t>(idx[i])].label];
  EXPECT_GT(static_cast<double>(hit) / static_cast<double>(idx.size()), 0.95);
}

TEST(TrainTask, RejectsOutOfOrderTasks) {
  const auto c = tiny_config("finetune");
  const auto f = fixture(c);
  auto state = initial_state<float>(f.arch, f.stream, 1);
  EXPECT_THROW(train_task(state, f.stream, 2, c.method, 1), ConfigError);
  auto bad = c.method;
  bad.method = "ewc";
  EXPECT_THROW(train_task(state, f.stream, 1, bad, 1), ConfigError);
}

TEST(TrainTask, HeadGrowsAndSnapshotMatchesLiveModel) {
  const auto c = tiny_config("ours-gaussian");
  const auto f = fixture(c);
  auto state = initial_state<float>(f.arch, f.stream, 1);
  const auto [x, y] = task_batch(f, 1, 8);
  for (int t = 1; t <= f.stream.num_tasks(); ++t) {
    train_task(state, f.stream, t, c.method, 1);
    EXPECT_EQ(state.model.head.num_classes(), f.stream.classes_through(t));
    EXPECT_EQ(state.previous.logits(x), state.model.logits(x));
    EXPECT_EQ(static_cast<int>(state.generator->covered.size()), f.stream.classes_through(t));
  }
}

TEST(TrainTask, ReplayGradientNeverReachesExtractor) {
  for (const std::string tap : {"feature", "block3"}) {
    auto c = tiny_config("ours-gaussian");
    c.method.tap = tap;
    const auto f = fixture(c);
    auto state = initial_state<float>(f.arch, f.stream, 4);
    train_task(state, f.stream, 1, c.method, 4);
    Rng init(5);
    state.model.head.extend(1, init);
    const auto [x, y] = task_batch(f, 2, 8);

    auto plan = plan_step(f.stream, 2, c.method);
    plan.distillation = 0;
    Rng r1(6), r2(6);
    auto with = state;
    nn::zero_grad(with.model.parameters());
    const auto rec = classifier_step(with, nullptr, x, y, plan, r1);
    EXPECT_GT(rec.replay, 0.0);
    auto without = state;
    plan.replay_ratio = 0;
    nn::zero_grad(without.model.parameters());
    classifier_step(without, nullptr, x, y, plan, r2);
    const auto ge = grads(with.model.extractor.parameters()), ge0 = grads(without.model.extractor.parameters());
    for (size_t i = 0; i < ge.size(); ++i) EXPECT_EQ(ge[i], ge0[i]) << tap;
  }
}

TEST(TrainTask, ReplayGivesOldHeadRowsPositiveEvidence) {
  const auto c = tiny_config("ours-gaussian");
  const auto f = fixture(c);
  auto state = initial_state<float>(f.arch, f.stream, 7);
  train_task(state, f.stream, 1, c.method, 7);
  Rng init(8);
  state.model.head.extend(1, init);
  const auto [x, y] = task_batch(f, 2, 8);
  const int old = f.stream.classes_through(1), d = state.model.head.input_dim();
  auto old_rows = [&](TrainState<float>& s) {
    const auto& g = s.model.head.linear().parameters()[0]->grad;
    return Eigen::Map<const RowMat<float>>(g.data(), s.model.head.num_classes(), d).topRows(old).eval();
  };

  auto plan = plan_step(f.stream, 2, c.method);
  plan.distillation = 0;
  plan.replay_ratio = 0;
  auto finetune = state;
  nn::zero_grad(finetune.model.parameters());
  Rng r(9);
  classifier_step(finetune, nullptr, x, y, plan, r);
  // features are non-negative, so without replay every old-row gradient entry pushes old logits down
  EXPECT_GE(old_rows(finetune).minCoeff(), 0.0f);

  plan.replay_ratio = 1;
  auto ours = state;
  nn::zero_grad(ours.model.parameters());
  classifier_step(ours, nullptr, x, y, plan, r);
  // the replay term alone: summed over old rows it is -(1/N_R) sum_i p(new|u_i) u_i, never positive
  const RowMat<float> replay = old_rows(ours) - old_rows(finetune);
  EXPECT_LE(replay.colwise().sum().maxCoeff(), 1e-6f);
  EXPECT_LT(replay.colwise().sum().minCoeff(), -1e-5f);
}

TEST(TrainTask, FinetuneEqualsZeroDistillationAndReplay) {
  auto ft = tiny_config("finetune");
  auto zero = tiny_config("ours-gaussian");
  zero.method.distillation = 0;
  zero.method.replay_ratio = 0;
  const auto f = fixture(ft);
  std::vector<std::string> log_a, log_b;
  auto sa = initial_state<float>(f.arch, f.stream, 11), sb = sa;
  for (int t = 1; t <= f.stream.num_tasks(); ++t) {
    train_task(sa, f.stream, t, ft.method, 11, [&](const std::string& l) { log_a.push_back(l); });
    train_task(sb, f.stream, t, zero.method, 11, [&](const std::string& l) {
      if (l.rfind("kind=classifier", 0) == 0) log_b.push_back(l);
    });
  }
  ASSERT_FALSE(log_a.empty());
  EXPECT_EQ(log_a, log_b);
  const auto [x, y] = task_batch(f, 1, 8);
  EXPECT_EQ(sa.model.logits(x), sb.model.logits(x));
}

TEST(TrainTask, StrongDistillationLimitsFeatureDrift) {
  auto fd = tiny_config("ours-gaussian");
  fd.method.distillation = 1e3;
  fd.method.replay_ratio = 0;
  fd.method.lr = 1e-4;
  fd.method.epochs = 4;
  auto ft = fd;
  ft.method.method = "finetune";
  const auto f = fixture(fd);
  auto base = initial_state<float>(f.arch, f.stream, 12);
  train_task(base, f.stream, 1, ft.method, 12);
  const auto [x, y] = task_batch(f, 1, 16);
  const Mat<float> u1 = base.model.extractor.infer(x);
  auto drift = [&](const MethodConfig& m) {
    auto s = base;
    train_task(s, f.stream, 2, m, 12);
    return (s.model.extractor.infer(x) - u1).rowwise().norm().mean();
  };
  const float d_fd = drift(fd.method), d_ft = drift(ft.method);
  EXPECT_LT(d_fd, d_ft);
  EXPECT_LT(d_fd, 0.5f * d_ft);
}

TEST(TrainTask, BatchNormStatisticsFrozenAfterFirstTask) {
  for (const std::string policy : {"freeze", "update"}) {
    auto c = tiny_config("finetune");
    c.method.batchnorm = policy;
    const auto f = fixture(c);
    auto state = initial_state<float>(f.arch, f.stream, 13);
    train_task(state, f.stream, 1, c.method, 13);
    std::vector<Vec<float>> before;
    for (auto* b : state.model.extractor.buffers()) before.push_back(*b);
    train_task(state, f.stream, 2, c.method, 13);
    bool same = true;
    const auto after = state.model.extractor.buffers();
    for (size_t i = 0; i < before.size(); ++i) same = same && before[i] == *after[i];
    EXPECT_EQ(same, policy == "freeze");
  }
}

TEST(TrainTask, NonFiniteLossIsTrainingError) {
  auto c = tiny_config("finetune");
  c.method.lr = 1e30;
  c.method.epochs = 20;
  const auto f = fixture(c);
  auto state = initial_state<float>(f.arch, f.stream, 1);
  EXPECT_THROW(train_task(state, f.stream, 1, c.method, 1), TrainingError);
}

TEST(RunExperiment, WritesLayoutAndLowerTriangle) {
  auto c = tiny_config("ours-gan");
  const auto dir = fresh_dir("layout");
  RunOptions opt;
  opt.dir = dir;
  const auto r = run_experiment(c, opt);
  EXPECT_EQ(r.matrix.rows(), 3);
  EXPECT_EQ(r.completed, 3);
  std::ifstream metrics(dir / "metrics.csv");
  int lines = 0;
  for (std::string l; std::getline(metrics, l);) ++lines;
  EXPECT_EQ(lines, 1 + 6);
  EXPECT_EQ(load_config(dir / "config").canonical(), c.canonical());
  for (int t = 1; t <= 3; ++t)
    for (const char* name : {"extractor.ckpt", "head.ckpt", "generator.ckpt", "critic.ckpt", "done"})
      EXPECT_TRUE(std::filesystem::exists(task_dir(dir, t) / name)) << t << name;
  EXPECT_FALSE(std::filesystem::exists(dir / "lock"));
  const auto log = slurp(dir / "log");
  EXPECT_NE(log.find("kind=classifier task=3"), std::string::npos);
  EXPECT_NE(log.find("kind=gan task=2"), std::string::npos);
  EXPECT_NE(log.find("alignment="), std::string::npos);
  EXPECT_EQ(eval::read_metrics_csv(dir / "metrics.csv"), r.matrix);
  std::filesystem::remove_all(dir);
}

TEST(RunExperiment, DeterministicAndResumable) {
  for (const std::string method : {"ours-gan", "ours-gaussian", "lwf"}) {
    auto c = tiny_config(method);
    const auto a = fresh_dir("det_a"), b = fresh_dir("det_b"), r = fresh_dir("det_r");
    RunOptions opt;
    opt.dir = a;
    const auto ra = run_experiment(c, opt);
    opt.dir = b;
    const auto rb = run_experiment(c, opt);
    EXPECT_EQ(ra.matrix, rb.matrix) << method;

    opt.dir = r;
    opt.stop_after = 2;
    EXPECT_EQ(run_experiment(c, opt).completed, 2);
    // a half-written later task must not count as complete
    std::filesystem::create_directories(task_dir(r, 3));
    opt.stop_after = 0;
    opt.resume = true;
    const auto rr = run_experiment(c, opt);
    EXPECT_EQ(rr.resumed_from, 2);
    EXPECT_EQ(rr.matrix, ra.matrix) << method;
    EXPECT_EQ(slurp(task_dir(r, 3) / "head.ckpt"), slurp(task_dir(a, 3) / "head.ckpt")) << method;
    EXPECT_EQ(slurp(task_dir(r, 3) / "generator.ckpt"), slurp(task_dir(a, 3) / "generator.ckpt")) << method;
    for (const auto& d : {a, b, r}) std::filesystem::remove_all(d);
  }
}

TEST(RunExperiment, GuardsTheRunDirectory) {
  auto c = tiny_config("finetune");
  c.method.epochs = 1;
  const auto dir = fresh_dir("guard");
  RunOptions opt;
  opt.dir = dir;
  run_experiment(c, opt);
  EXPECT_THROW(run_experiment(c, opt), IoError);
  auto other = c;
  other.method.lr = 0.5;
  opt.resume = true;
  EXPECT_THROW(run_experiment(other, opt), ConfigError);
  std::ofstream(dir / "lock") << "";
  EXPECT_THROW(run_experiment(c, opt), IoError);
  std::filesystem::remove(dir / "lock");
  opt.resume = false;
  opt.force = true;
  EXPECT_EQ(run_experiment(other, opt).completed, 3);
  EXPECT_EQ(load_config(dir / "config").method.lr, 0.5);
  std::filesystem::remove_all(dir);
}

TEST(RunExperiment, RunsDirEnvironmentOverride) {
  auto c = tiny_config("finetune");
  c.method.epochs = 1;
  c.output.dir = "/nonexistent/should/not/be/used";
  c.output.name = "envrun";
  const auto root = fresh_dir("env");
  ::setenv("GFR_RUNS_DIR", root.c_str(), 1);
  const auto r = run_experiment(c);
  ::unsetenv("GFR_RUNS_DIR");
  EXPECT_EQ(r.dir, root / "envrun");
  EXPECT_TRUE(std::filesystem::exists(root / "envrun" / "metrics.csv"));
  std::filesystem::remove_all(root);
}
