#pragma once

// Class-conditional feature generators: Gaussian prototypes and a conditional
// Wasserstein feature GAN with replay alignment.

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "gfr/model.hpp"
#include "gfr/nn.hpp"

namespace gfr::gen {

// ---------------------------------------------------------------------------
// Multilayer perceptron with LeakyReLU hidden layers.

struct MlpSpec {
  int in = 0;
  std::vector<int> hidden{512, 512};
  int out = 0;
  double slope = 0.2;
  bool relu_output = false;

  [[nodiscard]] std::string canonical() const {
    std::ostringstream os;
    os << "mlp in=" << in << " hidden=";
    for (size_t i = 0; i < hidden.size(); ++i) os << (i ? "," : "") << hidden[i];
    os << " out=" << out << " slope=" << format_number(slope) << " relu_out=" << (relu_output ? 1 : 0);
    return os.str();
  }

  /// Closed-form weight + bias count.
  [[nodiscard]] long long parameter_count() const {
    long long n = 0;
    int prev = in;
    for (int h : hidden) {
      n += static_cast<long long>(prev) * h + h;
      prev = h;
    }
    return n + static_cast<long long>(prev) * out + out;
  }

  bool operator==(const MlpSpec&) const = default;
};

template <typename S>
class Mlp {
public:
  Mlp() = default;
  Mlp(MlpSpec spec, Rng& rng) : spec_(std::move(spec)) {
    if (spec_.in <= 0 || spec_.out <= 0) throw ConfigError("mlp dimensions must be positive");
    int prev = spec_.in;
    std::vector<int> widths = spec_.hidden;
    widths.push_back(spec_.out);
    for (int w : widths) {
      Dense d;
      d.in = prev;
      d.out = w;
      d.weight = nn::Parameter<S>("weight", static_cast<Eigen::Index>(w) * prev);
      d.bias = nn::Parameter<S>("bias", w);
      fan_in_uniform<S>({d.weight.value.data(), static_cast<size_t>(d.weight.size())}, prev, rng);
      fan_in_uniform<S>({d.bias.value.data(), static_cast<size_t>(w)}, prev, rng);
      layers_.push_back(std::move(d));
      prev = w;
    }
  }

  [[nodiscard]] const MlpSpec& spec() const { return spec_; }
  [[nodiscard]] int num_layers() const { return static_cast<int>(layers_.size()); }

  [[nodiscard]] Mat<S> infer(const Mat<S>& x) const {
    check(x);
    Mat<S> a = x;
    for (size_t l = 0; l < layers_.size(); ++l) {
      Mat<S> z = affine(l, a);
      a = activate(l, z);
    }
    return a;
  }

  Mat<S> forward(const Mat<S>& x) {
    check(x);
    inputs_.clear();
    pre_.clear();
    Mat<S> a = x;
    for (size_t l = 0; l < layers_.size(); ++l) {
      inputs_.push_back(a);
      pre_.push_back(affine(l, a));
      a = activate(l, pre_.back());
    }
    return a;
  }

  /// Back-propagates through the last forward(); parameter gradients accumulate only if requested.
  Mat<S> backward(const Mat<S>& grad_out, bool accumulate = true) {
    Mat<S> g = grad_out;
    for (size_t li = layers_.size(); li-- > 0;) {
      g = g.cwiseProduct(slope_mask(li, pre_[li]));
      auto& d = layers_[li];
      if (accumulate) {
        Eigen::Map<RowMat<S>>(d.weight.grad.data(), d.out, d.in).noalias() += g.transpose() * inputs_[li];
        d.bias.grad += g.colwise().sum().transpose();
      }
      g = g * weight(li);
    }
    return g;
  }

  /// Gradient of the (scalar) output w.r.t. the input, per sample.
  [[nodiscard]] Mat<S> input_gradient(const Mat<S>& x) const {
    require_scalar();
    auto [e, q] = gradient_chain(x);
    return q.front();
  }

  /// Mean over rows of lambda·(‖∂out/∂x[cols]‖₂ − 1)²; accumulates its gradient w.r.t. the weights.
  /// With one_sided only norms above 1 are penalized.
  /// Piecewise-linear activations make the masks constant, so the second-order terms vanish.
  S input_gradient_penalty(const Mat<S>& x, int first_col, int num_cols, double lambda, bool one_sided = false) {
    require_scalar();
    const auto n = x.rows();
    if (n == 0) return S(0);
    auto [e, q] = gradient_chain(x);
    const Mat<S> g = q.front().middleCols(first_col, num_cols);
    Mat<S> rho = Mat<S>::Zero(n, spec_.in);
    double total = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double norm = static_cast<double>(g.row(i).norm());
      if (one_sided && norm <= 1) continue;
      total += lambda * (norm - 1) * (norm - 1);
      if (norm > 0) {
        rho.row(i).segment(first_col, num_cols) =
            g.row(i) * static_cast<S>(2 * lambda * (norm - 1) / (norm * static_cast<double>(n)));
      }
    }
    const size_t depth = layers_.size();
    for (size_t l = 0; l < depth; ++l) {
      auto& d = layers_[l];
      Eigen::Map<RowMat<S>>(d.weight.grad.data(), d.out, d.in).noalias() += e[l].transpose() * rho;
      if (l + 1 < depth) rho = (rho * weight(l).transpose()).cwiseProduct(slope_mask(l, pre_chain_[l]));
    }
    return static_cast<S>(total / static_cast<double>(n));
  }

  /// Insert `count` freshly initialized input columns at `position`.
  void insert_inputs(int position, int count, Rng& rng) {
    auto& d = layers_.front();
    RowMat<S> w(d.out, d.in + count);
    Eigen::Map<const RowMat<S>> old(d.weight.value.data(), d.out, d.in);
    w.leftCols(position) = old.leftCols(position);
    w.rightCols(d.in - position) = old.rightCols(d.in - position);
    for (int r = 0; r < d.out; ++r)
      for (int c = 0; c < count; ++c)
        w(r, position + c) = uniform<S>(rng, -1.0 / std::sqrt(d.in + count), 1.0 / std::sqrt(d.in + count));
    d.in += count;
    spec_.in += count;
    d.weight.value = Eigen::Map<Vec<S>>(w.data(), w.size());
    d.weight.grad = Vec<S>::Zero(w.size());
  }

  std::vector<nn::Parameter<S>*> parameters() {
    std::vector<nn::Parameter<S>*> out;
    for (auto& d : layers_) {
      out.push_back(&d.weight);
      out.push_back(&d.bias);
    }
    return out;
  }

  /// Adds a constant to the output bias (used to build offset generators in tests).
  void shift_output(const Vec<S>& delta) { layers_.back().bias.value += delta; }

private:
  struct Dense {
    int in = 0, out = 0;
    nn::Parameter<S> weight;  // row-major out × in
    nn::Parameter<S> bias;
  };

  [[nodiscard]] Eigen::Map<const RowMat<S>> weight(size_t l) const {
    const auto& d = layers_[l];
    return {d.weight.value.data(), d.out, d.in};
  }

  [[nodiscard]] Mat<S> affine(size_t l, const Mat<S>& a) const {
    Mat<S> z = a * weight(l).transpose();
    z.rowwise() += layers_[l].bias.value.transpose();
    return z;
  }

  [[nodiscard]] bool is_output(size_t l) const { return l + 1 == layers_.size(); }

  [[nodiscard]] Mat<S> activate(size_t l, const Mat<S>& z) const {
    if (is_output(l)) return spec_.relu_output ? Mat<S>(z.cwiseMax(S(0))) : z;
    const S s = static_cast<S>(spec_.slope);
    return z.unaryExpr([s](S v) { return v > S(0) ? v : s * v; });
  }

  [[nodiscard]] Mat<S> slope_mask(size_t l, const Mat<S>& z) const {
    if (is_output(l)) {
      if (!spec_.relu_output) return Mat<S>::Ones(z.rows(), z.cols());
      return z.unaryExpr([](S v) { return v > S(0) ? S(1) : S(0); });
    }
    const S s = static_cast<S>(spec_.slope);
    return z.unaryExpr([s](S v) { return v > S(0) ? S(1) : s; });
  }

  void check(const Mat<S>& x) const {
    if (x.cols() != spec_.in) {
      throw InputError("mlp expects " + std::to_string(spec_.in) + " inputs, got " + std::to_string(x.cols()));
    }
  }

  void require_scalar() const {
    if (spec_.out != 1 || spec_.relu_output) throw ConfigError("input gradient needs a linear scalar-output network");
  }

  // e[l]: n × out_l error signal at layer l's pre-activation for d(out)/dx;
  // q[l]: n × in_l gradient w.r.t. layer l's input. Also records pre-activations.
  std::pair<std::vector<Mat<S>>, std::vector<Mat<S>>> gradient_chain(const Mat<S>& x) const {
    check(x);
    std::vector<Mat<S>> pre;
    Mat<S> a = x;
    for (size_t l = 0; l < layers_.size(); ++l) {
      pre.push_back(affine(l, a));
      a = activate(l, pre.back());
    }
    const size_t depth = layers_.size();
    std::vector<Mat<S>> e(depth), q(depth);
    e[depth - 1] = Mat<S>::Ones(x.rows(), 1);
    for (size_t l = depth; l-- > 0;) {
      q[l] = e[l] * weight(l);
      if (l > 0) e[l - 1] = q[l].cwiseProduct(slope_mask(l - 1, pre[l - 1]));
    }
    pre_chain_ = std::move(pre);
    return {e, q};
  }

  MlpSpec spec_;
  std::vector<Dense> layers_;
  std::vector<Mat<S>> inputs_, pre_;
  mutable std::vector<Mat<S>> pre_chain_;
};

// ---------------------------------------------------------------------------
// Conditional feature GAN

struct GanConfig {
  int latent_dim = 200;
  std::vector<int> hidden{512, 512};
  double slope = 0.2;
  bool relu_output = true;
  std::string lipschitz = "gradient-penalty";  // "gradient-penalty" | "one-sided" | "clip"
  double lambda_gp = 10.0;
  double clip_value = 0.01;
  int n_critic = 5;
  double alignment_weight = 1.0;
  double lr = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.9;
  bool lr_decay = false;  // linear decay to zero over the run
  int epochs = 50;
  int batch_size = 64;

  void validate() const {
    if (latent_dim <= 0) throw ConfigError("generator.latent_dim must be positive");
    for (int h : hidden)
      if (h <= 0) throw ConfigError("generator.hidden widths must be positive");
    if (lipschitz != "gradient-penalty" && lipschitz != "one-sided" && lipschitz != "clip") {
      throw ConfigError("generator.lipschitz must be gradient-penalty, one-sided or clip, got '" + lipschitz + "'");
    }
    if (lambda_gp < 0 || clip_value <= 0) throw ConfigError("generator Lipschitz parameters out of range");
    if (n_critic < 1) throw ConfigError("generator.n_critic must be at least 1");
    if (alignment_weight < 0) throw ConfigError("generator.alignment_weight must be non-negative");
    if (!(lr > 0)) throw ConfigError("training.gan_lr must be positive");
    if (epochs < 0 || batch_size < 1) throw ConfigError("GAN epochs/batch size out of range");
  }
};

template <typename S>
class FeatureGan {
public:
  FeatureGan() = default;
  FeatureGan(int feature_dim, int num_classes, const GanConfig& cfg, Rng& rng)
      : feature_dim_(feature_dim), num_classes_(num_classes), latent_dim_(cfg.latent_dim),
        generator_(MlpSpec{num_classes + cfg.latent_dim, cfg.hidden, feature_dim, cfg.slope, cfg.relu_output}, rng),
        critic_(MlpSpec{num_classes + feature_dim, cfg.hidden, 1, cfg.slope, false}, rng) {}

  FeatureGan(Mlp<S> generator, Mlp<S> critic, int feature_dim, int num_classes, int latent_dim)
      : feature_dim_(feature_dim), num_classes_(num_classes), latent_dim_(latent_dim),
        generator_(std::move(generator)), critic_(std::move(critic)) {}

  [[nodiscard]] int feature_dim() const { return feature_dim_; }
  [[nodiscard]] int num_classes() const { return num_classes_; }
  [[nodiscard]] int latent_dim() const { return latent_dim_; }
  Mlp<S>& generator() { return generator_; }
  Mlp<S>& critic() { return critic_; }
  [[nodiscard]] const Mlp<S>& generator() const { return generator_; }
  [[nodiscard]] const Mlp<S>& critic() const { return critic_; }

  [[nodiscard]] Mat<S> one_hot(const Labels& labels) const {
    Mat<S> oh = Mat<S>::Zero(static_cast<Eigen::Index>(labels.size()), num_classes_);
    for (size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] < 0 || labels[i] >= num_classes_) {
        throw InputError("class " + std::to_string(labels[i]) + " not covered by the generator");
      }
      oh(static_cast<Eigen::Index>(i), labels[i]) = S(1);
    }
    return oh;
  }

  [[nodiscard]] Mat<S> generator_input(const Labels& labels, const Mat<S>& z) const {
    Mat<S> x(static_cast<Eigen::Index>(labels.size()), num_classes_ + latent_dim_);
    x << one_hot(labels), z;
    return x;
  }

  [[nodiscard]] Mat<S> critic_input(const Labels& labels, const Mat<S>& u) const {
    if (u.cols() != feature_dim_) throw InputError("critic feature dimension mismatch");
    Mat<S> x(static_cast<Eigen::Index>(labels.size()), num_classes_ + feature_dim_);
    x << one_hot(labels), u;
    return x;
  }

  [[nodiscard]] Mat<S> generate(const Labels& labels, const Mat<S>& z) const {
    return generator_.infer(generator_input(labels, z));
  }

  [[nodiscard]] Mat<S> score(const Labels& labels, const Mat<S>& u) const { return critic_.infer(critic_input(labels, u)); }

  /// Widen the one-hot condition by m classes (new columns appended after the existing ones).
  void add_classes(int m, Rng& rng) {
    if (m <= 0) return;
    generator_.insert_inputs(num_classes_, m, rng);
    critic_.insert_inputs(num_classes_, m, rng);
    num_classes_ += m;
  }

private:
  int feature_dim_ = 0;
  int num_classes_ = 0;
  int latent_dim_ = 0;
  Mlp<S> generator_;
  Mlp<S> critic_;
};

/// Critic objective: E[D(c,G(c,z))] − E[D(c,u)] + gradient penalty on interpolates.
/// Accumulates critic gradients.
template <typename S>
S critic_loss(FeatureGan<S>& gan, const Mat<S>& real, const Labels& labels, Rng& rng, const GanConfig& cfg) {
  const auto n = real.rows();
  if (n == 0) throw InputError("critic_loss on an empty batch");
  if (static_cast<Eigen::Index>(labels.size()) != n) throw InputError("critic_loss: label count mismatch");
  const Mat<S> z = normal_matrix<S>(static_cast<int>(n), gan.latent_dim(), rng);
  const Mat<S> fake = gan.generate(labels, z);
  auto& d = gan.critic();
  const S inv_n = S(1) / static_cast<S>(n);

  const Mat<S> s_fake = d.forward(gan.critic_input(labels, fake));
  d.backward(Mat<S>::Constant(n, 1, inv_n));
  const Mat<S> s_real = d.forward(gan.critic_input(labels, real));
  d.backward(Mat<S>::Constant(n, 1, -inv_n));
  S value = s_fake.mean() - s_real.mean();

  if (cfg.lipschitz != "clip" && cfg.lambda_gp > 0) {
    Mat<S> interp(n, real.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
      const S eps = uniform<S>(rng, 0.0, 1.0);
      interp.row(i) = eps * real.row(i) + (S(1) - eps) * fake.row(i);
    }
    value += d.input_gradient_penalty(gan.critic_input(labels, interp), gan.num_classes(), gan.feature_dim(),
                                      cfg.lambda_gp, cfg.lipschitz == "one-sided");
  }
  return value;
}

/// −E[D(c,G(c,z))]; accumulates generator gradients only.
template <typename S>
S generator_adversarial_loss(FeatureGan<S>& gan, const Labels& labels, Rng& rng, double weight = 1.0) {
  const auto n = static_cast<Eigen::Index>(labels.size());
  if (n == 0) throw InputError("generator_adversarial_loss with no labels");
  const Mat<S> z = normal_matrix<S>(static_cast<int>(n), gan.latent_dim(), rng);
  const Mat<S> fake = gan.generator().forward(gan.generator_input(labels, z));
  const Mat<S> s = gan.critic().forward(gan.critic_input(labels, fake));
  const Mat<S> d_in = gan.critic().backward(Mat<S>::Constant(n, 1, static_cast<S>(-weight / static_cast<double>(n))), false);
  gan.generator().backward(d_in.rightCols(gan.feature_dim()));
  return -s.mean();
}

/// Mean over sampled previous classes and shared z of ‖G_t(c,z) − G_prev(c,z)‖².
/// Accumulates `weight` times its gradient into the current generator.
template <typename S>
S replay_alignment_loss(FeatureGan<S>& current, const FeatureGan<S>& previous, const std::vector<int>& previous_classes,
                        int batch_size, Rng& rng, double weight = 1.0) {
  if (previous_classes.empty()) throw ConfigError("replay alignment needs previous classes (undefined at t = 1)");
  if (batch_size <= 0) throw InputError("replay alignment batch size must be positive");
  if (current.latent_dim() != previous.latent_dim() || current.feature_dim() != previous.feature_dim()) {
    throw InputError("generators disagree on latent or feature dimension");
  }
  Labels labels(static_cast<size_t>(batch_size));
  for (auto& l : labels) l = previous_classes[static_cast<size_t>(uniform_int(rng, 0, static_cast<int>(previous_classes.size()) - 1))];
  const Mat<S> z = normal_matrix<S>(batch_size, current.latent_dim(), rng);
  // the previous generator sees the same one-hot, truncated to its narrower width
  const Mat<S> target = previous.generate(labels, z);
  const Mat<S> out = current.generator().forward(current.generator_input(labels, z));
  const Mat<S> diff = out - target;
  const S value = diff.rowwise().squaredNorm().mean();
  current.generator().backward(diff * static_cast<S>(2.0 * weight / batch_size));
  return value;
}

// ---------------------------------------------------------------------------
// Gaussian class prototypes

template <typename S>
struct Prototype {
  Vec<S> mean;
  Vec<S> variance;  // diagonal mode
  Mat<S> covariance;  // full mode
  int sample_count = 0;
};

template <typename S>
class GaussianPrototypeBank {
public:
  GaussianPrototypeBank() = default;
  GaussianPrototypeBank(int dim, bool full) : dim_(dim), full_(full) {}

  static constexpr double kEigenFloor = 1e-6;

  [[nodiscard]] int dim() const { return dim_; }
  [[nodiscard]] bool full() const { return full_; }
  [[nodiscard]] bool contains(int c) const { return entries_.count(c) > 0; }
  [[nodiscard]] const Prototype<S>& at(int c) const {
    auto it = entries_.find(c);
    if (it == entries_.end()) throw InputError("class " + std::to_string(c) + " not covered by the prototype bank");
    return it->second;
  }
  [[nodiscard]] const std::map<int, Prototype<S>>& entries() const { return entries_; }

  void set(int c, Prototype<S> p) {
    if (p.mean.size() != dim_) throw InputError("prototype dimension mismatch");
    if (full_) {
      Eigen::SelfAdjointEigenSolver<Mat<S>> es(p.covariance);
      Vec<S> ev = es.eigenvalues().cwiseMax(static_cast<S>(kEigenFloor)).cwiseSqrt();
      roots_[c] = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
    } else {
      roots_[c] = p.variance.cwiseMax(S(0)).cwiseSqrt();
    }
    entries_[c] = std::move(p);
  }

  /// mean + Σ^{1/2} ε per requested label.
  [[nodiscard]] Mat<S> sample(const Labels& labels, Rng& rng) const {
    Mat<S> out(static_cast<Eigen::Index>(labels.size()), dim_);
    for (size_t i = 0; i < labels.size(); ++i) {
      const auto& p = at(labels[i]);
      const Mat<S>& root = roots_.at(labels[i]);
      Vec<S> eps(dim_);
      for (int j = 0; j < dim_; ++j) eps[j] = standard_normal<S>(rng);
      const auto row = static_cast<Eigen::Index>(i);
      if (full_) {
        out.row(row) = (p.mean + root * eps).transpose();
      } else {
        out.row(row) = (p.mean + root.col(0).cwiseProduct(eps)).transpose();
      }
    }
    return out;
  }

private:
  int dim_ = 0;
  bool full_ = false;
  std::map<int, Prototype<S>> entries_;
  std::map<int, Mat<S>> roots_;
};

/// Sample mean and unbiased (n−1) covariance per class in `classes`, estimated from feature rows.
template <typename S>
void fit_gaussian_prototypes(GaussianPrototypeBank<S>& bank, const Mat<S>& features, const Labels& labels,
                             const std::vector<int>& classes) {
  if (features.cols() != bank.dim()) throw InputError("feature dimension does not match the prototype bank");
  model::check_labels(labels, features.rows(), std::numeric_limits<int>::max());
  for (int c : classes) {
    std::vector<Eigen::Index> rows;
    for (size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == c) rows.push_back(static_cast<Eigen::Index>(i));
    if (rows.size() < 2) {
      throw EstimationError("class " + std::to_string(c) + " has " + std::to_string(rows.size()) +
                            " samples; at least 2 are needed for a covariance estimate");
    }
    const auto n = static_cast<Eigen::Index>(rows.size());
    Mat<double> x(n, features.cols());
    for (Eigen::Index i = 0; i < n; ++i) x.row(i) = features.row(rows[static_cast<size_t>(i)]).template cast<double>();
    const Vec<double> mean = x.colwise().mean().transpose();
    const Mat<double> centered = x.rowwise() - mean.transpose();
    Prototype<S> p;
    p.mean = mean.cast<S>();
    p.sample_count = static_cast<int>(n);
    if (bank.full()) {
      p.covariance = ((centered.transpose() * centered) / static_cast<double>(n - 1)).cast<S>();
    } else {
      p.variance = (centered.colwise().squaredNorm().transpose() / static_cast<double>(n - 1)).cast<S>();
    }
    bank.set(c, std::move(p));
  }
}

// ---------------------------------------------------------------------------

/// Either generator variant, plus the set of classes it can produce.
template <typename S>
struct FeatureGenerator {
  std::variant<GaussianPrototypeBank<S>, FeatureGan<S>> model;
  std::set<int> covered;

  [[nodiscard]] bool is_gan() const { return std::holds_alternative<FeatureGan<S>>(model); }
  [[nodiscard]] std::string variant_name() const { return is_gan() ? "gan" : "gaussian"; }
  [[nodiscard]] int feature_dim() const {
    return is_gan() ? std::get<FeatureGan<S>>(model).feature_dim() : std::get<GaussianPrototypeBank<S>>(model).dim();
  }
};

template <typename S>
Mat<S> sample_features(const FeatureGenerator<S>& gen, const Labels& labels, Rng& rng) {
  for (int c : labels)
    if (!gen.covered.count(c)) throw InputError("class " + std::to_string(c) + " not covered by the generator");
  if (labels.empty()) return Mat<S>(0, gen.feature_dim());
  if (const auto* bank = std::get_if<GaussianPrototypeBank<S>>(&gen.model)) return bank->sample(labels, rng);
  const auto& gan = std::get<FeatureGan<S>>(gen.model);
  const Mat<S> z = normal_matrix<S>(static_cast<int>(labels.size()), gan.latent_dim(), rng);
  return gan.generate(labels, z);
}

// ---------------------------------------------------------------------------
// GAN training

struct GanStepRecord {
  long step = 0;
  bool generator_step = false;
  double critic = 0;       // critic objective (incl. penalty)
  double wasserstein = 0;  // mean D(real) − mean D(fake)
  double adversarial = 0;
  double alignment = 0;
};

/// Alternating optimization: n_critic critic steps, then one generator step on the
/// adversarial loss plus (when a previous generator exists) the replay-alignment loss.
/// Starts from a copy of `previous` widened to `total_classes`, or from scratch.
template <typename S>
FeatureGan<S> train_feature_gan(const Mat<S>& features, const Labels& labels, int total_classes,
                                const FeatureGan<S>* previous, const GanConfig& cfg, std::uint64_t seed,
                                const std::function<void(const GanStepRecord&)>& on_step = {}) {
  cfg.validate();
  const auto n = static_cast<int>(features.rows());
  if (n == 0) throw InputError("train_feature_gan without data");
  model::check_labels(labels, features.rows(), total_classes);

  Rng init_rng(derive_seed(seed, 0x6A41ULL));
  FeatureGan<S> gan;
  std::vector<int> previous_classes;
  if (previous) {
    if (previous->feature_dim() != features.cols()) throw InputError("previous generator feature dimension mismatch");
    gan = *previous;
    gan.add_classes(total_classes - previous->num_classes(), init_rng);
    for (int c = 0; c < previous->num_classes(); ++c) previous_classes.push_back(c);
  } else {
    gan = FeatureGan<S>(static_cast<int>(features.cols()), total_classes, cfg, init_rng);
  }

  nn::Adam<S> opt_g(gan.generator().parameters(), {cfg.lr, cfg.beta1, cfg.beta2, 1e-8});
  nn::Adam<S> opt_d(gan.critic().parameters(), {cfg.lr, cfg.beta1, cfg.beta2, 1e-8});
  Rng rng(derive_seed(seed, 0x6A42ULL));
  Rng monitor_rng(derive_seed(seed, 0x6A43ULL));  // keeps monitoring from perturbing the training stream

  const int batch = std::min(cfg.batch_size, n);
  const int batches_per_epoch = (n + batch - 1) / batch;
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);

  long step = 0;
  int critic_steps = 0;
  const double total_steps = static_cast<double>(cfg.epochs) * batches_per_epoch;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (int i = n - 1; i > 0; --i) std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(uniform_int(rng, 0, i))]);
    for (int b = 0; b < batches_per_epoch; ++b) {
      const int begin = b * batch;
      const int count = std::min(batch, n - begin);
      Mat<S> real(count, features.cols());
      Labels lbl(static_cast<size_t>(count));
      for (int i = 0; i < count; ++i) {
        const int idx = order[static_cast<size_t>(begin + i)];
        real.row(i) = features.row(idx);
        lbl[static_cast<size_t>(i)] = labels[static_cast<size_t>(idx)];
      }

      if (cfg.lr_decay) {
        const double lr = cfg.lr * (1.0 - static_cast<double>(step) / total_steps);
        opt_d.set_lr(lr);
        opt_g.set_lr(lr);
      }
      opt_d.zero_grad();
      GanStepRecord rec;
      rec.step = ++step;
      rec.critic = static_cast<double>(critic_loss(gan, real, lbl, rng, cfg));
      opt_d.step();
      if (cfg.lipschitz == "clip") {
        for (auto* p : gan.critic().parameters())
          p->value = p->value.cwiseMax(static_cast<S>(-cfg.clip_value)).cwiseMin(static_cast<S>(cfg.clip_value));
      }
      if (!std::isfinite(rec.critic)) throw TrainingError("critic loss diverged at GAN step " + std::to_string(step));

      if (++critic_steps % cfg.n_critic == 0) {
        // generator labels follow the empirical class frequencies of the task
        Labels gl(static_cast<size_t>(batch));
        for (auto& l : gl) l = labels[static_cast<size_t>(uniform_int(rng, 0, n - 1))];
        opt_g.zero_grad();
        rec.generator_step = true;
        rec.adversarial = static_cast<double>(generator_adversarial_loss(gan, gl, rng));
        if (previous && cfg.alignment_weight > 0) {
          rec.alignment = static_cast<double>(
              replay_alignment_loss(gan, *previous, previous_classes, batch, rng, cfg.alignment_weight));
        }
        if (!std::isfinite(rec.adversarial) || !std::isfinite(rec.alignment)) {
          throw TrainingError("generator loss diverged at GAN step " + std::to_string(step));
        }
        opt_g.step();
      }
      if (on_step) {
        const Mat<S> z = normal_matrix<S>(count, gan.latent_dim(), monitor_rng);
        rec.wasserstein = static_cast<double>(gan.score(lbl, real).mean() - gan.score(lbl, gan.generate(lbl, z)).mean());
        on_step(rec);
      }
    }
  }
  return gan;
}

// ---------------------------------------------------------------------------
// Serialization

inline MlpSpec parse_mlp_spec(const std::string& text) {
  std::istringstream is(text);
  std::string tok;
  MlpSpec spec;
  spec.hidden.clear();
  is >> tok;
  if (tok != "mlp") throw IoError("not an mlp descriptor: " + text);
  while (is >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
    if (key == "in") spec.in = std::stoi(val);
    else if (key == "out") spec.out = std::stoi(val);
    else if (key == "slope") spec.slope = std::stod(val);
    else if (key == "relu_out") spec.relu_output = val == "1";
    else if (key == "hidden") {
      std::istringstream vs(val);
      std::string part;
      while (std::getline(vs, part, ',')) spec.hidden.push_back(std::stoi(part));
    }
  }
  return spec;
}

template <typename S>
void save_mlp(const std::filesystem::path& file, const std::string& role, Mlp<S>& mlp, const std::string& extra) {
  model::write_checkpoint(file, {role + " " + mlp.spec().canonical() + " " + extra,
                                 model::flatten_state<S>(mlp.parameters(), {})});
}

template <typename S>
Mlp<S> load_mlp(const model::CheckpointData& data) {
  const auto pos = data.descriptor.find("mlp ");
  if (pos == std::string::npos) throw IoError("checkpoint is not an mlp");
  Rng rng(0);
  Mlp<S> mlp(parse_mlp_spec(data.descriptor.substr(pos)), rng);
  model::restore_state<S>(data.values, mlp.parameters(), {}, "mlp");
  return mlp;
}

inline int descriptor_int(const std::string& desc, const std::string& key) {
  const auto pos = desc.find(" " + key + "=");
  if (pos == std::string::npos) throw IoError("descriptor lacks " + key + ": " + desc);
  return std::stoi(desc.substr(pos + key.size() + 2));
}

template <typename S>
void save_gan(const std::filesystem::path& generator_file, const std::filesystem::path& critic_file, FeatureGan<S>& gan) {
  const std::string extra = "classes=" + std::to_string(gan.num_classes()) + " latent=" + std::to_string(gan.latent_dim()) +
                            " feature=" + std::to_string(gan.feature_dim());
  save_mlp(generator_file, "generator", gan.generator(), extra);
  save_mlp(critic_file, "critic", gan.critic(), extra);
}

template <typename S>
FeatureGan<S> load_gan(const std::filesystem::path& generator_file, const std::filesystem::path& critic_file) {
  const auto g = model::read_checkpoint(generator_file);
  const auto d = model::read_checkpoint(critic_file);
  return FeatureGan<S>(load_mlp<S>(g), load_mlp<S>(d), descriptor_int(g.descriptor, "feature"),
                       descriptor_int(g.descriptor, "classes"), descriptor_int(g.descriptor, "latent"));
}

/// Header line, then records [class u32][d u32][d f32 mean][d or d·d f32 covariance].
template <typename S>
void save_prototypes(const std::filesystem::path& file, const GaussianPrototypeBank<S>& bank) {
  std::ofstream os(file, std::ios::binary);
  if (!os) throw IoError("cannot write " + file.string());
  os << "gfr-prototypes v1 " << (bank.full() ? "full" : "diagonal") << ' ' << bank.dim() << '\n';
  for (const auto& [c, p] : bank.entries()) {
    binio::write_u32(os, static_cast<std::uint32_t>(c));
    binio::write_u32(os, static_cast<std::uint32_t>(bank.dim()));
    for (Eigen::Index j = 0; j < p.mean.size(); ++j) binio::write_f32(os, static_cast<float>(p.mean[j]));
    if (bank.full()) {
      for (Eigen::Index r = 0; r < p.covariance.rows(); ++r)
        for (Eigen::Index k = 0; k < p.covariance.cols(); ++k) binio::write_f32(os, static_cast<float>(p.covariance(r, k)));
    } else {
      for (Eigen::Index j = 0; j < p.variance.size(); ++j) binio::write_f32(os, static_cast<float>(p.variance[j]));
    }
  }
  if (!os) throw IoError("write failed: " + file.string());
}

template <typename S>
GaussianPrototypeBank<S> load_prototypes(const std::filesystem::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw IoError("cannot read " + file.string());
  std::string header;
  std::getline(is, header);
  std::istringstream hs(header);
  std::string magic, version, mode;
  int dim = 0;
  hs >> magic >> version >> mode >> dim;
  if (magic != "gfr-prototypes" || dim <= 0) throw IoError("not a prototype bank: " + file.string());
  GaussianPrototypeBank<S> bank(dim, mode == "full");
  while (is.peek() != std::char_traits<char>::eof()) {
    const int c = static_cast<int>(binio::read_u32(is));
    const int d = static_cast<int>(binio::read_u32(is));
    if (d != dim) throw IoError("prototype record dimension mismatch in " + file.string());
    Prototype<S> p;
    p.mean.resize(d);
    for (int j = 0; j < d; ++j) p.mean[j] = static_cast<S>(binio::read_f32(is));
    if (bank.full()) {
      p.covariance.resize(d, d);
      for (int r = 0; r < d; ++r)
        for (int k = 0; k < d; ++k) p.covariance(r, k) = static_cast<S>(binio::read_f32(is));
    } else {
      p.variance.resize(d);
      for (int j = 0; j < d; ++j) p.variance[j] = static_cast<S>(binio::read_f32(is));
    }
    bank.set(c, std::move(p));
  }
  return bank;
}

}  // namespace gfr::gen
