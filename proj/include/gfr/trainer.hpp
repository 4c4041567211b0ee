#pragma once

// Per-task training loop (extractor + head with replay and distillation, then generator refit),
// baselines, and the experiment driver with checkpoints and resume.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "gfr/config.hpp"
#include "gfr/data.hpp"
#include "gfr/eval.hpp"
#include "gfr/generator.hpp"
#include "gfr/model.hpp"
#include "gfr/nn.hpp"

namespace gfr::train {

using LogFn = std::function<void(const std::string&)>;

struct StepRecord {
  int task = 0;
  long step = 0;
  double ce = 0;
  double replay = 0;
  double distillation = 0;
  double lwf = 0;
  double total = 0;
};

inline std::string format_step(const StepRecord& r) {
  std::ostringstream os;
  os << "kind=classifier task=" << r.task << " step=" << r.step << " ce=" << format_number(r.ce)
     << " replay=" << format_number(r.replay) << " fd=" << format_number(r.distillation)
     << " lwf=" << format_number(r.lwf) << " total=" << format_number(r.total);
  return os.str();
}

inline std::string format_gan_step(int task, const gen::GanStepRecord& r) {
  std::ostringstream os;
  os << "kind=gan task=" << task << " step=" << r.step << " critic=" << format_number(r.critic)
     << " wasserstein=" << format_number(r.wasserstein);
  if (r.generator_step) os << " adversarial=" << format_number(r.adversarial) << " alignment=" << format_number(r.alignment);
  return os.str();
}

template <typename S>
struct TrainState {
  int t = 0;  // last completed task
  model::Model<S> model;
  model::ModelSnapshot<S> previous;  // frozen copy taken at the end of task t
  std::optional<gen::FeatureGenerator<S>> generator;
  std::optional<gen::FeatureGenerator<S>> previous_generator;
};

namespace stream_tag {
inline constexpr std::uint64_t kModelInit = 0x7A00;
inline constexpr std::uint64_t kHeadInit = 0x7A01;
inline constexpr std::uint64_t kData = 0x7A02;
inline constexpr std::uint64_t kReplay = 0x7A03;
inline constexpr std::uint64_t kGenerator = 0x7A04;
}  // namespace stream_tag

/// Fresh state whose head covers the first task's classes.
template <typename S>
TrainState<S> initial_state(const model::Architecture& arch, const data::TaskStream& stream, std::uint64_t seed) {
  if (stream.num_tasks() < 1) throw ConfigError("task stream is empty");
  Rng rng(derive_seed(seed, stream_tag::kModelInit));
  TrainState<S> s;
  s.model = model::Model<S>::create(arch, static_cast<int>(stream.task(1).classes.size()), rng);
  return s;
}

/// round(ratio · n · |previous| / |C_t|) replayed features with labels uniform over previous classes.
template <typename S>
std::pair<Mat<S>, Labels> make_replay_batch(const gen::FeatureGenerator<S>& gen, const std::vector<int>& previous_classes,
                                            int current_batch_size, double replay_ratio, int current_classes, Rng& rng) {
  if (previous_classes.empty()) throw ConfigError("replay is undefined for the first task (no previous classes)");
  if (current_classes < 1) throw ConfigError("current task has no classes");
  if (replay_ratio < 0 || current_batch_size < 0) throw ConfigError("replay ratio and batch size must be non-negative");
  const double expected = replay_ratio * current_batch_size * static_cast<double>(previous_classes.size()) / current_classes;
  const auto count = static_cast<size_t>(std::llround(expected));
  Labels labels(count);
  const int last = static_cast<int>(previous_classes.size()) - 1;
  for (auto& l : labels) l = previous_classes[static_cast<size_t>(uniform_int(rng, 0, last))];
  return {sample_features(gen, labels, rng), std::move(labels)};
}

/// Extractor outputs for a split subset in inference mode, no augmentation.
template <typename S>
Mat<S> extract_features(const model::FeatureExtractor<S>& f, const data::Dataset& ds, const std::vector<int>& indices,
                        bool test_split, int batch_size = 256) {
  Mat<S> out(static_cast<Eigen::Index>(indices.size()), f.feature_dim());
  Rng unused(0);
  const auto& split = test_split ? ds.test : ds.train;
  for (size_t begin = 0; begin < indices.size(); begin += static_cast<size_t>(batch_size)) {
    const size_t end = std::min(indices.size(), begin + static_cast<size_t>(batch_size));
    std::span<const int> idx(indices.data() + begin, end - begin);
    out.middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(idx.size())) =
        f.infer(data::make_batch<S>(split, ds.meta, idx, nullptr, unused));
  }
  return out;
}

/// Head columns owned by each task 1..t.
inline std::vector<model::HeadGroup> head_groups(const data::TaskStream& stream, int t) {
  std::vector<model::HeadGroup> g;
  for (int j = 1; j <= t; ++j) g.push_back({stream.classes_through(j - 1), static_cast<int>(stream.task(j).classes.size())});
  return g;
}

template <typename S>
void refit_generator(TrainState<S>& state, const data::TaskStream& stream, int t, const MethodConfig& cfg,
                     std::uint64_t seed, const LogFn& log) {
  const auto& ds = *stream.dataset;
  const auto& spec = stream.task(t);
  const auto index = stream.head_index();
  const Mat<S> u = extract_features(state.model.extractor, ds, spec.train, false);
  Labels y;
  for (int i : spec.train) y.push_back(index[ds.train[static_cast<size_t>(i)].label]);
  const int total = stream.classes_through(t);

  gen::FeatureGenerator<S> next;
  for (int c = 0; c < total; ++c) next.covered.insert(c);
  if (cfg.uses_gan()) {
    const gen::FeatureGan<S>* prev = nullptr;
    if (state.generator) prev = &std::get<gen::FeatureGan<S>>(state.generator->model);
    std::function<void(const gen::GanStepRecord&)> on_step;
    if (log) on_step = [&](const gen::GanStepRecord& r) { log(format_gan_step(t, r)); };
    next.model = gen::train_feature_gan<S>(u, y, total, prev, cfg.gan, derive_seed(seed, stream_tag::kGenerator, t), on_step);
  } else {
    // prototypes of earlier classes are kept; only the new classes are estimated
    gen::GaussianPrototypeBank<S> bank(static_cast<int>(u.cols()), cfg.covariance == "full");
    if (state.generator) bank = std::get<gen::GaussianPrototypeBank<S>>(state.generator->model);
    std::vector<int> fresh;
    for (int c = stream.classes_through(t - 1); c < total; ++c) fresh.push_back(c);
    gen::fit_gaussian_prototypes(bank, u, y, fresh);
    next.model = std::move(bank);
  }
  state.previous_generator = std::move(state.generator);
  state.generator = std::move(next);
}

/// Loss terms active for one task.
struct StepPlan {
  double distillation = 0;
  double replay_ratio = 0;
  bool lwf = false;
  double lwf_weight = 0;
  double temperature = 1;
  std::vector<model::HeadGroup> groups;  // previous tasks' head columns
  std::vector<int> replay_classes;
  int current_classes = 0;
  bool batch_stats = true;  // false: normalization layers use their running statistics
};

inline StepPlan plan_step(const data::TaskStream& stream, int t, const MethodConfig& cfg) {
  StepPlan p;
  p.distillation = t > 1 ? cfg.effective_distillation() : 0.0;
  p.replay_ratio = t > 1 ? cfg.effective_replay_ratio() : 0.0;
  p.lwf = t > 1 && cfg.method == "lwf" && cfg.lwf_weight > 0;
  p.lwf_weight = cfg.lwf_weight;
  p.temperature = cfg.lwf_temperature;
  p.groups = head_groups(stream, t - 1);
  for (int c = 0; c < stream.classes_through(t - 1); ++c) p.replay_classes.push_back(c);
  p.current_classes = static_cast<int>(stream.task(t).classes.size());
  p.batch_stats = t == 1 || cfg.batchnorm == "update";
  return p;
}

/// Forward and backward for one batch; accumulates gradients without stepping the optimizer.
/// `teacher` is a private copy of the frozen model run in the same normalization mode as the
/// live model, so both agree exactly while their weights do.
template <typename S>
StepRecord classifier_step(TrainState<S>& state, std::type_identity_t<model::Model<S>>* teacher, const Tensor<S>& x, const Labels& y,
                           const StepPlan& plan, Rng& replay_rng) {
  StepRecord rec;
  const bool mode = plan.batch_stats;
  const Mat<S> u = state.model.extractor.forward(x, mode);
  const Mat<S> logits = state.model.head.forward(u, mode);
  const auto ce = model::softmax_cross_entropy<S>(logits, y);
  Mat<S> grad_logits = ce.grad;
  rec.ce = ce.value;
  if (plan.lwf) {
    const Mat<S> prev = teacher->head.forward(teacher->extractor.forward(x, mode), mode);
    const auto lw = model::lwf<S>(logits, prev, plan.groups, plan.temperature);
    grad_logits += static_cast<S>(plan.lwf_weight) * lw.grad;
    rec.lwf = lw.value;
  }
  Mat<S> grad_u = state.model.head.backward(grad_logits);
  if (plan.distillation > 0) {
    const auto fd = model::feature_distillation<S>(u, teacher->extractor.forward(x, mode));
    grad_u += static_cast<S>(plan.distillation) * fd.grad;
    rec.distillation = fd.value;
  }
  state.model.extractor.backward(grad_u);
  if (plan.replay_ratio > 0) {
    // replayed features enter after the extractor and get their own head pass, so neither
    // their gradient nor trunk batch statistics reach the extractor
    const auto [ru, rl] = make_replay_batch(*state.generator, plan.replay_classes, x.n(), plan.replay_ratio,
                                            plan.current_classes, replay_rng);
    if (!rl.empty()) {
      const auto rce = model::softmax_cross_entropy<S>(state.model.head.forward(ru, mode), rl);
      (void)state.model.head.backward(rce.grad);
      rec.replay = rce.value;
    }
  }
  rec.total = rec.ce + rec.replay + plan.distillation * rec.distillation + (plan.lwf ? plan.lwf_weight * rec.lwf : 0.0);
  return rec;
}

/// One task: classifier training, then (for the replay methods) generator refit, then snapshot.
template <typename S>
void train_task(TrainState<S>& state, const data::TaskStream& stream, int t, const MethodConfig& cfg, std::uint64_t seed,
                const LogFn& log = {}) {
  cfg.validate();
  if (t != state.t + 1) {
    throw ConfigError("task " + std::to_string(t) + " does not follow the last completed task " + std::to_string(state.t));
  }
  if (t < 1 || t > stream.num_tasks()) throw ConfigError("task " + std::to_string(t) + " is not in the stream");
  const auto& ds = *stream.dataset;
  const auto& spec = stream.task(t);
  const auto index = stream.head_index();
  const int current_classes = static_cast<int>(spec.classes.size());

  Rng init_rng(derive_seed(seed, stream_tag::kHeadInit, t));
  Rng data_rng(derive_seed(seed, stream_tag::kData, t));
  Rng replay_rng(derive_seed(seed, stream_tag::kReplay, t));

  if (t > 1) state.model.head.extend(current_classes, init_rng);
  if (state.model.head.num_classes() != stream.classes_through(t)) {
    throw ConfigError("head covers " + std::to_string(state.model.head.num_classes()) + " classes, task " +
                      std::to_string(t) + " needs " + std::to_string(stream.classes_through(t)));
  }

  std::vector<int> train_idx = spec.train;
  if (cfg.method == "joint") {
    train_idx.clear();
    for (int j = 1; j <= t; ++j) train_idx.insert(train_idx.end(), stream.task(j).train.begin(), stream.task(j).train.end());
  }
  if (train_idx.size() < 2) throw ConfigError("task " + std::to_string(t) + " has fewer than 2 training examples");

  const StepPlan plan = plan_step(stream, t, cfg);
  if ((plan.distillation > 0 || plan.lwf) && state.previous.empty()) throw ConfigError("distillation needs the previous model");
  if (plan.replay_ratio > 0 && !state.generator) throw ConfigError("replay needs a generator from the previous task");
  std::optional<model::Model<S>> teacher;
  if (plan.distillation > 0 || plan.lwf) teacher = state.previous.model();

  nn::Adam<S> opt(state.model.parameters(), {cfg.lr, 0.9, 0.999, 1e-8});
  const data::AugmentPolicy policy{cfg.augment_pad, 0, cfg.flip_probability, true};
  const data::AugmentPolicy* pol = cfg.augment ? &policy : nullptr;

  const int n = static_cast<int>(train_idx.size());
  const int batch = std::min(cfg.batch_size, n);
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (int i = n - 1; i > 0; --i) std::swap(train_idx[static_cast<size_t>(i)], train_idx[static_cast<size_t>(uniform_int(data_rng, 0, i))]);
    for (int begin = 0; begin < n; begin += batch) {
      const int count = std::min(batch, n - begin);
      if (count < 2) continue;  // batch statistics need two samples
      std::span<const int> idx(train_idx.data() + begin, static_cast<size_t>(count));
      const auto x = data::make_batch<S>(ds.train, ds.meta, idx, pol, data_rng);
      Labels y;
      for (int i : idx) y.push_back(index[ds.train[static_cast<size_t>(i)].label]);

      opt.zero_grad();
      StepRecord rec = classifier_step(state, teacher ? &*teacher : nullptr, x, y, plan, replay_rng);
      rec.task = t;
      rec.step = ++step;
      if (!std::isfinite(rec.total)) {
        throw TrainingError("non-finite loss at task " + std::to_string(t) + " step " + std::to_string(step));
      }
      opt.step();
      if (log) log(format_step(rec));
    }
  }

  if (cfg.uses_generator()) refit_generator(state, stream, t, cfg, seed, log);
  state.previous = model::ModelSnapshot<S>(state.model);
  state.t = t;
}

// ---------------------------------------------------------------------------
// Experiment driver

struct RunOptions {
  bool resume = false;
  bool force = false;
  int stop_after = 0;             // stop once this task is complete (0: run all)
  std::filesystem::path dir;      // empty: cfg.run_dir()
  LogFn progress;                 // human-readable progress lines
};

struct RunResult {
  eval::AccuracyMatrix matrix;
  std::filesystem::path dir;
  int completed = 0;
  int resumed_from = 0;
};

/// Exclusive lock file held for the lifetime of the object.
class RunLock {
public:
  explicit RunLock(std::filesystem::path file) : file_(std::move(file)) {
    std::FILE* f = std::fopen(file_.c_str(), "wx");
    if (!f) throw IoError("run directory is locked (remove " + file_.string() + " if no run is active)");
    std::fclose(f);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;
  ~RunLock() {
    std::error_code ec;
    std::filesystem::remove(file_, ec);
  }

private:
  std::filesystem::path file_;
};

inline std::filesystem::path task_dir(const std::filesystem::path& run, int t) { return run / ("task_" + std::to_string(t)); }

template <typename S>
void save_task(const std::filesystem::path& dir, TrainState<S>& state) {
  namespace fs = std::filesystem;
  fs::remove_all(dir);
  fs::create_directories(dir);
  model::save_extractor(dir / "extractor.ckpt", state.model.extractor);
  model::save_head(dir / "head.ckpt", state.model.head);
  if (state.generator) {
    if (auto* gan = std::get_if<gen::FeatureGan<S>>(&state.generator->model)) {
      gen::save_gan(dir / "generator.ckpt", dir / "critic.ckpt", *gan);
    } else {
      gen::save_prototypes(dir / "generator.ckpt", std::get<gen::GaussianPrototypeBank<S>>(state.generator->model));
    }
  }
}

template <typename S>
TrainState<S> load_task(const std::filesystem::path& dir, int t, const MethodConfig& cfg, int total_classes) {
  TrainState<S> s;
  s.t = t;
  s.model = model::load_model<S>(dir / "extractor.ckpt", dir / "head.ckpt");
  if (cfg.uses_generator()) {
    gen::FeatureGenerator<S> g;
    for (int c = 0; c < total_classes; ++c) g.covered.insert(c);
    if (cfg.uses_gan()) {
      g.model = gen::load_gan<S>(dir / "generator.ckpt", dir / "critic.ckpt");
    } else {
      g.model = gen::load_prototypes<S>(dir / "generator.ckpt");
    }
    s.generator = std::move(g);
  }
  s.previous = model::ModelSnapshot<S>(s.model);
  return s;
}

/// Runs (or resumes) every task of the configured stream, writing the run directory:
/// config, log, metrics.csv, summary.csv and task_<t>/ checkpoints.
inline RunResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opt = {}) {
  namespace fs = std::filesystem;
  using S = float;
  cfg.validate();
  RunResult result;
  result.dir = opt.dir.empty() ? cfg.run_dir() : opt.dir;
  const fs::path& dir = result.dir;
  const bool exists = fs::exists(dir / "config");
  if (exists && !opt.resume && !opt.force) {
    throw IoError("run directory " + dir.string() + " already holds a run (use --resume or --force)");
  }
  if (exists && opt.force && !opt.resume) {
    if (fs::exists(dir / "lock")) throw IoError("run directory is locked: " + (dir / "lock").string());
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
  RunLock lock(dir / "lock");

  if (exists && opt.resume) {
    std::ifstream is(dir / "config");
    std::stringstream ss;
    ss << is.rdbuf();
    if (ss.str() != cfg.canonical()) throw ConfigError("config differs from the one embedded in " + dir.string());
  } else {
    save_config(dir / "config", cfg);
  }

  auto ds = std::make_shared<const data::Dataset>(load_experiment_dataset(cfg));
  const auto stream = data::build_task_stream(ds, cfg.split.first_task_fraction, cfg.split.num_remaining_tasks, cfg.split.seed);
  const auto arch = cfg.architecture(ds->meta);

  TrainState<S> state;
  int done = 0;
  if (exists && opt.resume) {
    while (done < stream.num_tasks() && fs::exists(task_dir(dir, done + 1) / "done")) ++done;
  }
  if (done > 0) {
    state = load_task<S>(task_dir(dir, done), done, cfg.method, stream.classes_through(done));
    const auto saved = eval::read_metrics_csv(dir / "metrics.csv");
    if (saved.rows() < done) throw IoError("metrics.csv is missing rows for completed tasks");
    for (int k = 1; k <= done; ++k) result.matrix.add_row(saved.row(k));
  } else {
    state = initial_state<S>(arch, stream, cfg.seed);
  }
  result.resumed_from = done;

  std::ofstream log(dir / "log", done > 0 ? std::ios::app : std::ios::trunc);
  if (!log) throw IoError("cannot write " + (dir / "log").string());
  const LogFn write_log = [&log](const std::string& line) { log << line << '\n'; };

  for (int t = done + 1; t <= stream.num_tasks(); ++t) {
    train_task(state, stream, t, cfg.method, cfg.seed, write_log);
    result.matrix.add_row(eval::evaluate_row(state.model, stream, t));
    save_task(task_dir(dir, t), state);
    eval::write_metrics_csv(dir / "metrics.csv", result.matrix);
    eval::write_summary_csv(dir / "summary.csv", result.matrix);
    std::ofstream(task_dir(dir, t) / "done") << "complete\n";
    log.flush();
    if (!log) throw IoError("write failed: " + (dir / "log").string());
    if (opt.progress) {
      std::string line = "task " + std::to_string(t) + "/" + std::to_string(stream.num_tasks()) +
                         " avg_accuracy=" + format_number(eval::average_accuracy(result.matrix, t));
      if (t > 1) line += " avg_forgetting=" + format_number(eval::average_forgetting(result.matrix, t));
      opt.progress(line);
    }
    if (opt.stop_after == t) break;
  }
  result.completed = result.matrix.rows();
  return result;
}

}  // namespace gfr::train
