#pragma once

// Feature extractor / classifier split, frozen snapshots, losses and checkpoints.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "gfr/nn.hpp"

namespace gfr::model {

// ---------------------------------------------------------------------------
// Architecture descriptor

struct Shape {
  int c = 0, h = 0, w = 0;
  [[nodiscard]] int size() const { return c * h * w; }
  bool operator==(const Shape&) const = default;
};

/// Backbone description with named stages block1..block4 and "feature" (global pool).
struct Architecture {
  std::string family = "smallcnn";  // "smallcnn" | "resnet18"
  int channels = 3;
  int height = 16;
  int width = 16;
  std::vector<int> widths{8, 16, 32, 64};
  std::string tap = "feature";
  bool head_bias = false;

  static const std::vector<std::string>& stage_names() {
    static const std::vector<std::string> names{"block1", "block2", "block3", "block4", "feature"};
    return names;
  }

  static Architecture resnet18(int height = 32, int width = 32) {
    Architecture a;
    a.family = "resnet18";
    a.height = height;
    a.width = width;
    a.widths = {64, 128, 256, 512};
    return a;
  }

  [[nodiscard]] int stage_index(const std::string& name) const {
    const auto& n = stage_names();
    auto it = std::find(n.begin(), n.end(), name);
    if (it == n.end()) throw InputError("unknown tap '" + name + "' (expected block1..block4 or feature)");
    return static_cast<int>(it - n.begin());
  }
  [[nodiscard]] int tap_index() const { return stage_index(tap); }

  void validate() const {
    if (family != "smallcnn" && family != "resnet18") throw ConfigError("unknown architecture family '" + family + "'");
    if (widths.size() != 4) throw ConfigError("architecture needs exactly 4 stage widths");
    for (int w : widths)
      if (w <= 0) throw ConfigError("stage widths must be positive");
    if (channels <= 0 || height <= 0 || width <= 0) throw ConfigError("input geometry must be positive");
    (void)tap_index();
    const auto shapes = stage_shapes();
    for (const auto& s : shapes)
      if (s.h <= 0 || s.w <= 0) throw ConfigError("input " + std::to_string(height) + "x" + std::to_string(width) + " too small for " + family);
  }

  /// Output shape after each stage.
  [[nodiscard]] std::vector<Shape> stage_shapes() const {
    std::vector<Shape> out;
    int h = height, w = width;
    for (int s = 0; s < 4; ++s) {
      if (family == "smallcnn") {
        h /= 2;
        w /= 2;
      } else if (s > 0) {
        h = (h + 1) / 2;
        w = (w + 1) / 2;
      }
      out.push_back({widths[static_cast<size_t>(s)], h, w});
    }
    out.push_back({widths[3], 1, 1});
    return out;
  }

  [[nodiscard]] Shape tap_shape() const { return stage_shapes()[static_cast<size_t>(tap_index())]; }
  [[nodiscard]] int feature_dim() const { return tap_shape().size(); }
  [[nodiscard]] Shape input_shape() const { return {channels, height, width}; }

  [[nodiscard]] std::string canonical() const {
    std::ostringstream os;
    os << family << " input=" << channels << 'x' << height << 'x' << width << " widths=";
    for (size_t i = 0; i < widths.size(); ++i) os << (i ? "," : "") << widths[i];
    os << " tap=" << tap << " bias=" << (head_bias ? 1 : 0);
    return os.str();
  }

  static Architecture parse(const std::string& text) {
    std::istringstream is(text);
    Architecture a;
    if (!(is >> a.family)) throw ConfigError("empty architecture descriptor");
    std::string tok;
    while (is >> tok) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos) throw ConfigError("malformed architecture token '" + tok + "'");
      const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
      if (key == "input") {
        char x1 = 0, x2 = 0;
        std::istringstream vs(val);
        vs >> a.channels >> x1 >> a.height >> x2 >> a.width;
        if (!vs || x1 != 'x' || x2 != 'x') throw ConfigError("malformed input geometry '" + val + "'");
      } else if (key == "widths") {
        a.widths.clear();
        std::istringstream vs(val);
        std::string part;
        while (std::getline(vs, part, ',')) a.widths.push_back(std::stoi(part));
      } else if (key == "tap") {
        a.tap = val;
      } else if (key == "bias") {
        a.head_bias = val == "1";
      } else {
        throw ConfigError("unknown architecture key '" + key + "'");
      }
    }
    a.validate();
    return a;
  }

  bool operator==(const Architecture&) const = default;
};

template <typename S>
std::vector<nn::Sequential<S>> build_stages(const Architecture& arch, Rng& rng) {
  arch.validate();
  std::vector<nn::Sequential<S>> stages(5);
  int in = arch.channels;
  for (int s = 0; s < 4; ++s) {
    const int out = arch.widths[static_cast<size_t>(s)];
    auto& st = stages[static_cast<size_t>(s)];
    if (arch.family == "smallcnn") {
      st.template emplace<nn::Conv2d<S>>(in, out, 3, 1, 1, false, rng);
      st.template emplace<nn::BatchNorm<S>>(out);
      st.template emplace<nn::Activation<S>>(0.0);
      st.template emplace<nn::MaxPool2<S>>();
    } else {
      if (s == 0) {
        // 3x3 stem, no initial downsampling
        st.template emplace<nn::Conv2d<S>>(in, out, 3, 1, 1, false, rng);
        st.template emplace<nn::BatchNorm<S>>(out);
        st.template emplace<nn::Activation<S>>(0.0);
        in = out;
      }
      st.template emplace<nn::BasicBlock<S>>(in, out, s == 0 ? 1 : 2, rng);
      st.template emplace<nn::BasicBlock<S>>(out, out, 1, rng);
    }
    in = out;
  }
  stages[4].template emplace<nn::GlobalAvgPool<S>>();
  return stages;
}

// ---------------------------------------------------------------------------

/// Stages up to and including the tap; its output, flattened, is the feature u.
template <typename S>
class FeatureExtractor {
public:
  FeatureExtractor() = default;
  FeatureExtractor(Architecture arch, std::vector<nn::Sequential<S>> stages)
      : arch_(std::move(arch)), stages_(std::move(stages)) {}

  [[nodiscard]] const Architecture& architecture() const { return arch_; }
  [[nodiscard]] int feature_dim() const { return arch_.feature_dim(); }
  [[nodiscard]] int num_stages() const { return static_cast<int>(stages_.size()); }

  Mat<S> forward(const Tensor<S>& x, bool train) {
    check(x);
    Tensor<S> h = x;
    for (auto& st : stages_) h = st.forward(h, train);
    return h.data;
  }

  [[nodiscard]] Mat<S> infer(const Tensor<S>& x) const {
    check(x);
    Tensor<S> h = x;
    for (const auto& st : stages_) h = st.infer(h);
    return h.data;
  }

  /// Runs all stages in inference mode and returns the stage outputs.
  [[nodiscard]] std::vector<Tensor<S>> infer_stages(const Tensor<S>& x) const {
    check(x);
    std::vector<Tensor<S>> out;
    Tensor<S> h = x;
    for (const auto& st : stages_) {
      h = st.infer(h);
      out.push_back(h);
    }
    return out;
  }

  void backward(const Mat<S>& grad_u) {
    const Shape s = arch_.tap_shape();
    Tensor<S> g(static_cast<int>(grad_u.rows()), s.c, s.h, s.w);
    g.data = grad_u;
    for (auto it = stages_.rbegin(); it != stages_.rend(); ++it) g = it->backward(g);
  }

  std::vector<nn::Parameter<S>*> parameters() {
    std::vector<nn::Parameter<S>*> out;
    for (auto& st : stages_) {
      auto p = st.parameters();
      out.insert(out.end(), p.begin(), p.end());
    }
    return out;
  }

  std::vector<Vec<S>*> buffers() {
    std::vector<Vec<S>*> out;
    for (auto& st : stages_) {
      auto b = st.buffers();
      out.insert(out.end(), b.begin(), b.end());
    }
    return out;
  }

private:
  void check(const Tensor<S>& x) const {
    if (x.c != arch_.channels || x.h != arch_.height || x.w != arch_.width) {
      throw InputError("batch geometry " + x.shape_string() + " does not match extractor input " +
                       std::to_string(arch_.channels) + "x" + std::to_string(arch_.height) + "x" +
                       std::to_string(arch_.width));
    }
  }

  Architecture arch_;
  std::vector<nn::Sequential<S>> stages_;
};

/// Linear classifier V (K_seen × d, no bias by default) preceded by any stages
/// between the tap and the global pool (empty at the default "feature" tap).
template <typename S>
class ClassifierHead {
public:
  ClassifierHead() = default;
  ClassifierHead(Architecture arch, std::vector<nn::Sequential<S>> trunk, int num_classes, Rng& rng)
      : arch_(std::move(arch)), trunk_(std::move(trunk)),
        linear_(arch_.stage_shapes().back().size(), num_classes, arch_.head_bias, rng) {}

  [[nodiscard]] int num_classes() const { return linear_.out_features(); }
  [[nodiscard]] int input_dim() const { return arch_.feature_dim(); }
  [[nodiscard]] const nn::Linear<S>& linear() const { return linear_; }
  nn::Linear<S>& linear() { return linear_; }
  [[nodiscard]] bool has_trunk() const { return !trunk_.empty(); }
  [[nodiscard]] const Architecture& architecture() const { return arch_; }

  /// Logits for flattened features u (n × d).
  Mat<S> forward(const Mat<S>& u, bool train) {
    Tensor<S> h = as_tensor(u);
    for (auto& st : trunk_) h = st.forward(h, train);
    return linear_.forward(h, train).data;
  }

  [[nodiscard]] Mat<S> infer(const Mat<S>& u) const {
    Tensor<S> h = as_tensor(u);
    for (const auto& st : trunk_) h = st.infer(h);
    return linear_.infer(h).data;
  }

  /// Trunk stage outputs in inference mode (for activation collection).
  [[nodiscard]] std::vector<Tensor<S>> infer_stages(const Mat<S>& u) const {
    std::vector<Tensor<S>> out;
    Tensor<S> h = as_tensor(u);
    for (const auto& st : trunk_) {
      h = st.infer(h);
      out.push_back(h);
    }
    return out;
  }

  /// Returns the gradient w.r.t. the input features.
  Mat<S> backward(const Mat<S>& grad_logits) {
    Tensor<S> g = linear_.backward(Tensor<S>::from_matrix(grad_logits));
    for (auto it = trunk_.rbegin(); it != trunk_.rend(); ++it) g = it->backward(g);
    return g.data;
  }

  /// Grow by m classes; existing rows keep their exact values.
  void extend(int m, Rng& rng) {
    if (m <= 0) throw ConfigError("extend_head needs at least one new class, got " + std::to_string(m));
    linear_.add_outputs(m, rng);
  }

  std::vector<nn::Parameter<S>*> parameters() {
    std::vector<nn::Parameter<S>*> out;
    for (auto& st : trunk_) {
      auto p = st.parameters();
      out.insert(out.end(), p.begin(), p.end());
    }
    auto p = linear_.parameters();
    out.insert(out.end(), p.begin(), p.end());
    return out;
  }

  std::vector<Vec<S>*> buffers() {
    std::vector<Vec<S>*> out;
    for (auto& st : trunk_) {
      auto b = st.buffers();
      out.insert(out.end(), b.begin(), b.end());
    }
    return out;
  }

private:
  [[nodiscard]] Tensor<S> as_tensor(const Mat<S>& u) const {
    const Shape s = arch_.tap_shape();
    if (u.cols() != s.size()) {
      throw InputError("head expects features of dimension " + std::to_string(s.size()) + ", got " +
                       std::to_string(u.cols()));
    }
    Tensor<S> t(static_cast<int>(u.rows()), s.c, s.h, s.w);
    t.data = u;
    return t;
  }

  Architecture arch_;
  std::vector<nn::Sequential<S>> trunk_;
  nn::Linear<S> linear_;
};

template <typename S>
struct Model {
  FeatureExtractor<S> extractor;
  ClassifierHead<S> head;

  static Model create(const Architecture& arch, int num_classes, Rng& rng) {
    auto stages = build_stages<S>(arch, rng);
    const int split = arch.tap_index() + 1;
    std::vector<nn::Sequential<S>> ext(std::make_move_iterator(stages.begin()),
                                       std::make_move_iterator(stages.begin() + split));
    std::vector<nn::Sequential<S>> trunk(std::make_move_iterator(stages.begin() + split),
                                         std::make_move_iterator(stages.end()));
    Model m;
    m.extractor = FeatureExtractor<S>(arch, std::move(ext));
    m.head = ClassifierHead<S>(arch, std::move(trunk), num_classes, rng);
    return m;
  }

  [[nodiscard]] Mat<S> logits(const Tensor<S>& x) const { return head.infer(extractor.infer(x)); }

  std::vector<nn::Parameter<S>*> parameters() {
    auto p = extractor.parameters();
    auto q = head.parameters();
    p.insert(p.end(), q.begin(), q.end());
    return p;
  }
};

/// Frozen copy of a model; read-only and safe to share.
template <typename S>
class ModelSnapshot {
public:
  ModelSnapshot() = default;
  explicit ModelSnapshot(const Model<S>& live) : frozen_(std::make_shared<const Model<S>>(live)) {}

  [[nodiscard]] bool empty() const { return !frozen_; }
  [[nodiscard]] const Model<S>& model() const { return *frozen_; }
  [[nodiscard]] const FeatureExtractor<S>& extractor() const { return frozen_->extractor; }
  [[nodiscard]] const ClassifierHead<S>& head() const { return frozen_->head; }
  [[nodiscard]] Mat<S> features(const Tensor<S>& x) const { return frozen_->extractor.infer(x); }
  [[nodiscard]] Mat<S> logits(const Tensor<S>& x) const { return frozen_->logits(x); }

private:
  std::shared_ptr<const Model<S>> frozen_;
};

// ---------------------------------------------------------------------------
// Losses. Reductions are batch means.

template <typename S>
struct LossGrad {
  S value = 0;
  Mat<S> grad;  // w.r.t. the first matrix argument
};

template <typename S>
Mat<S> softmax(const Mat<S>& logits) {
  Mat<S> p = logits;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const S mx = p.row(i).maxCoeff();
    p.row(i) = (p.row(i).array() - mx).exp();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

template <typename S>
Mat<S> log_softmax(const Mat<S>& logits) {
  Mat<S> out = logits;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const S mx = out.row(i).maxCoeff();
    const S lse = mx + std::log((out.row(i).array() - mx).exp().sum());
    out.row(i).array() -= lse;
  }
  return out;
}

/// Row-wise softmax of the head's logits.
template <typename S>
Mat<S> classify(const ClassifierHead<S>& head, const Mat<S>& u) {
  if (head.num_classes() < 1) throw InputError("classifier head has no classes");
  return softmax<S>(head.infer(u));
}

/// Argmax per row; ties resolve to the lowest index.
template <typename S>
std::vector<int> argmax_rows(const Mat<S>& scores) {
  std::vector<int> out(static_cast<size_t>(scores.rows()));
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index j = 1; j < scores.cols(); ++j)
      if (scores(i, j) > scores(i, best)) best = j;
    out[static_cast<size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

inline void check_labels(const Labels& labels, Eigen::Index rows, Eigen::Index classes) {
  if (static_cast<Eigen::Index>(labels.size()) != rows) {
    throw InputError("label count " + std::to_string(labels.size()) + " != batch size " + std::to_string(rows));
  }
  for (int y : labels)
    if (y < 0 || y >= classes) throw InputError("label " + std::to_string(y) + " out of range [0," + std::to_string(classes) + ")");
}

/// Mean negative log-likelihood of the labels under row-normalized probabilities.
template <typename S>
S cross_entropy(const Mat<S>& probs, const Labels& labels) {
  check_labels(labels, probs.rows(), probs.cols());
  if (probs.rows() == 0) throw InputError("cross_entropy on empty batch");
  double total = 0;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    if (std::abs(static_cast<double>(probs.row(i).sum()) - 1.0) > 1e-4) throw InputError("probability row not normalized");
    total -= std::log(static_cast<double>(probs(i, labels[static_cast<size_t>(i)])));
  }
  return static_cast<S>(total / static_cast<double>(probs.rows()));
}

/// Cross-entropy of softmax(logits); gradient w.r.t. logits.
template <typename S>
LossGrad<S> softmax_cross_entropy(const Mat<S>& logits, const Labels& labels) {
  check_labels(labels, logits.rows(), logits.cols());
  LossGrad<S> r;
  const auto n = logits.rows();
  if (n == 0) {
    r.grad = Mat<S>::Zero(0, logits.cols());
    return r;
  }
  const Mat<S> logp = log_softmax<S>(logits);
  r.grad = logp.array().exp().matrix();
  double total = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<size_t>(i)];
    total -= logp(i, y);
    r.grad(i, y) -= S(1);
  }
  r.grad /= static_cast<S>(n);
  r.value = static_cast<S>(total / static_cast<double>(n));
  return r;
}

/// Mean over samples of the (unsquared) Euclidean distance between feature rows.
template <typename S>
LossGrad<S> feature_distillation(const Mat<S>& current, const Mat<S>& previous) {
  if (current.rows() != previous.rows() || current.cols() != previous.cols()) {
    throw InputError("feature_distillation: feature shapes differ");
  }
  LossGrad<S> r;
  r.grad = Mat<S>::Zero(current.rows(), current.cols());
  const auto n = current.rows();
  if (n == 0) return r;
  double total = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vec<S> diff = (current.row(i) - previous.row(i)).transpose();
    const double norm = static_cast<double>(diff.norm());
    total += norm;
    if (norm > 0) r.grad.row(i) = (diff / static_cast<S>(norm * static_cast<double>(n))).transpose();
  }
  r.value = static_cast<S>(total / static_cast<double>(n));
  return r;
}

/// Distillation between two extractors on a batch, both in inference mode.
template <typename S>
S feature_distillation_loss(const FeatureExtractor<S>& current, const FeatureExtractor<S>& previous,
                            const Tensor<S>& batch) {
  if (current.feature_dim() != previous.feature_dim()) throw InputError("extractors disagree on feature dimension");
  return feature_distillation<S>(current.infer(batch), previous.infer(batch)).value;
}

/// Column range [begin, begin+count) of the single head owned by one task.
struct HeadGroup {
  int begin = 0;
  int count = 0;
};

/// Sum over previous-task groups of CE(softmax(prev/T), softmax(cur/T)), batch mean.
template <typename S>
LossGrad<S> lwf(const Mat<S>& current_logits, const Mat<S>& previous_logits, const std::vector<HeadGroup>& groups,
                double temperature) {
  if (groups.empty()) throw ConfigError("LwF needs at least one previous task head");
  if (!(temperature > 0)) throw ConfigError("LwF temperature must be positive");
  if (current_logits.rows() != previous_logits.rows()) throw InputError("lwf: batch sizes differ");
  LossGrad<S> r;
  r.grad = Mat<S>::Zero(current_logits.rows(), current_logits.cols());
  const auto n = current_logits.rows();
  if (n == 0) return r;
  const S inv_t = static_cast<S>(1.0 / temperature);
  double total = 0;
  for (const auto& g : groups) {
    if (g.begin + g.count > previous_logits.cols() || g.begin + g.count > current_logits.cols()) {
      throw InputError("lwf head group exceeds logit width");
    }
    const Mat<S> target = softmax<S>(Mat<S>(previous_logits.middleCols(g.begin, g.count) * inv_t));
    const Mat<S> logq = log_softmax<S>(Mat<S>(current_logits.middleCols(g.begin, g.count) * inv_t));
    total -= static_cast<double>((target.array() * logq.array()).sum());
    r.grad.middleCols(g.begin, g.count) += (logq.array().exp() - target.array()).matrix() * inv_t;
  }
  r.grad /= static_cast<S>(n);
  r.value = static_cast<S>(total / static_cast<double>(n));
  return r;
}

/// LwF loss of the live model against its snapshot on current-task inputs (inference mode).
template <typename S>
S lwf_loss(const Model<S>& live, const ModelSnapshot<S>& snapshot, const Tensor<S>& batch,
           const std::vector<HeadGroup>& previous_groups, double temperature) {
  if (snapshot.empty() || previous_groups.empty()) throw ConfigError("LwF is undefined for the first task");
  return lwf<S>(live.logits(batch), snapshot.logits(batch), previous_groups, temperature).value;
}

// ---------------------------------------------------------------------------
// Checkpoints: text header (magic, descriptor, parameter count) + little-endian f32 values.

inline constexpr const char* kCheckpointMagic = "gfr-checkpoint v1";

struct CheckpointData {
  std::string descriptor;
  std::vector<float> values;
};

inline void write_checkpoint(const std::filesystem::path& file, const CheckpointData& data) {
  std::ofstream os(file, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint " + file.string());
  os << kCheckpointMagic << '\n' << data.descriptor << '\n' << "params " << data.values.size() << '\n';
  for (float v : data.values) binio::write_f32(os, v);
  if (!os) throw IoError("write failed: " + file.string());
}

inline CheckpointData read_checkpoint(const std::filesystem::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw IoError("cannot read checkpoint " + file.string());
  std::string magic, count_line;
  CheckpointData data;
  std::getline(is, magic);
  std::getline(is, data.descriptor);
  std::getline(is, count_line);
  if (magic != kCheckpointMagic || count_line.rfind("params ", 0) != 0) {
    throw IoError("not a checkpoint: " + file.string());
  }
  const auto count = std::stoull(count_line.substr(7));
  data.values.resize(count);
  for (auto& v : data.values) v = binio::read_f32(is);
  return data;
}

template <typename S>
std::vector<float> flatten_state(const std::vector<nn::Parameter<S>*>& params, const std::vector<Vec<S>*>& buffers) {
  std::vector<float> out;
  for (auto* p : params)
    for (Eigen::Index i = 0; i < p->size(); ++i) out.push_back(static_cast<float>(p->value[i]));
  for (auto* b : buffers)
    for (Eigen::Index i = 0; i < b->size(); ++i) out.push_back(static_cast<float>((*b)[i]));
  return out;
}

template <typename S>
void restore_state(const std::vector<float>& values, const std::vector<nn::Parameter<S>*>& params,
                   const std::vector<Vec<S>*>& buffers, const std::string& what) {
  size_t expected = 0;
  for (auto* p : params) expected += static_cast<size_t>(p->size());
  for (auto* b : buffers) expected += static_cast<size_t>(b->size());
  if (expected != values.size()) {
    throw IoError(what + ": checkpoint holds " + std::to_string(values.size()) + " values, model needs " +
                  std::to_string(expected));
  }
  size_t k = 0;
  for (auto* p : params)
    for (Eigen::Index i = 0; i < p->size(); ++i) p->value[i] = static_cast<S>(values[k++]);
  for (auto* b : buffers)
    for (Eigen::Index i = 0; i < b->size(); ++i) (*b)[i] = static_cast<S>(values[k++]);
}

template <typename S>
void save_extractor(const std::filesystem::path& file, FeatureExtractor<S>& f) {
  write_checkpoint(file, {"extractor " + f.architecture().canonical(), flatten_state<S>(f.parameters(), f.buffers())});
}

template <typename S>
void save_head(const std::filesystem::path& file, ClassifierHead<S>& h) {
  write_checkpoint(file, {"head " + h.architecture().canonical() + " classes=" + std::to_string(h.num_classes()),
                          flatten_state<S>(h.parameters(), h.buffers())});
}

/// Rebuild a model from its two component checkpoints.
template <typename S>
Model<S> load_model(const std::filesystem::path& extractor_file, const std::filesystem::path& head_file) {
  const auto ext = read_checkpoint(extractor_file);
  const auto head = read_checkpoint(head_file);
  if (ext.descriptor.rfind("extractor ", 0) != 0) throw IoError("not an extractor checkpoint: " + extractor_file.string());
  if (head.descriptor.rfind("head ", 0) != 0) throw IoError("not a head checkpoint: " + head_file.string());
  const auto arch = Architecture::parse(ext.descriptor.substr(10));
  const auto pos = head.descriptor.rfind(" classes=");
  if (pos == std::string::npos) throw IoError("head checkpoint lacks class count");
  const auto head_arch = Architecture::parse(head.descriptor.substr(5, pos - 5));
  if (!(head_arch == arch)) throw IoError("extractor and head checkpoints describe different architectures");
  const int classes = std::stoi(head.descriptor.substr(pos + 9));
  Rng rng(0);
  Model<S> m = Model<S>::create(arch, classes, rng);
  restore_state<S>(ext.values, m.extractor.parameters(), m.extractor.buffers(), extractor_file.string());
  restore_state<S>(head.values, m.head.parameters(), m.head.buffers(), head_file.string());
  return m;
}

}  // namespace gfr::model
