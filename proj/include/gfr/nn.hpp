#pragma once

// Minimal layer library with explicit forward/backward passes.
//
// Layers cache what they need for backward() during forward(). infer() is the
// const, cache-free path used by frozen snapshots and evaluation; it always
// uses inference statistics for normalization layers.

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "gfr/core.hpp"

namespace gfr::nn {

template <typename S>
struct Parameter {
  std::string name;
  Vec<S> value;
  Vec<S> grad;

  Parameter() = default;
  Parameter(std::string n, Eigen::Index size) : name(std::move(n)), value(Vec<S>::Zero(size)), grad(Vec<S>::Zero(size)) {}

  void zero_grad() { grad.setZero(); }
  [[nodiscard]] Eigen::Index size() const { return value.size(); }
};

template <typename S>
class Layer {
public:
  virtual ~Layer() = default;

  [[nodiscard]] virtual std::string kind() const = 0;
  virtual Tensor<S> forward(const Tensor<S>& x, bool train) = 0;
  [[nodiscard]] virtual Tensor<S> infer(const Tensor<S>& x) const = 0;
  /// Accumulates parameter gradients and returns the gradient w.r.t. the input.
  virtual Tensor<S> backward(const Tensor<S>& grad_out) = 0;
  [[nodiscard]] virtual std::unique_ptr<Layer> clone() const = 0;

  virtual std::vector<Parameter<S>*> parameters() { return {}; }
  /// Non-trainable state that must be checkpointed (running statistics).
  virtual std::vector<Vec<S>*> buffers() { return {}; }
};

template <typename S>
using LayerPtr = std::unique_ptr<Layer<S>>;

// ---------------------------------------------------------------------------

template <typename S>
class Conv2d final : public Layer<S> {
public:
  Conv2d(int in_channels, int out_channels, int kernel, int stride, int pad, bool bias, Rng& rng)
      : in_(in_channels), out_(out_channels), k_(kernel), stride_(stride), pad_(pad), has_bias_(bias),
        weight_("weight", static_cast<Eigen::Index>(out_channels) * in_channels * kernel * kernel),
        bias_("bias", bias ? out_channels : 0) {
    const int fan_in = in_channels * kernel * kernel;
    fan_in_uniform<S>({weight_.value.data(), static_cast<size_t>(weight_.size())}, fan_in, rng);
    if (has_bias_) fan_in_uniform<S>({bias_.value.data(), static_cast<size_t>(bias_.size())}, fan_in, rng);
  }

  [[nodiscard]] std::string kind() const override { return "conv"; }

  Tensor<S> forward(const Tensor<S>& x, bool) override {
    input_ = x;
    return infer(x);
  }

  [[nodiscard]] Tensor<S> infer(const Tensor<S>& x) const override {
    check_input(x);
    const int ho = out_size(x.h), wo = out_size(x.w);
    Tensor<S> y(x.n(), out_, ho, wo);
    Eigen::Map<const RowMat<S>> wm(weight_.value.data(), out_, in_ * k_ * k_);
    Mat<S> cols;
    for (int i = 0; i < x.n(); ++i) {
      im2col(x, i, cols);
      Eigen::Map<RowMat<S>> ys(y.sample(i), out_, ho * wo);
      ys.noalias() = wm * cols;
      if (has_bias_) ys.colwise() += bias_.value;
    }
    return y;
  }

  Tensor<S> backward(const Tensor<S>& g) override {
    const Tensor<S>& x = input_;
    const int ho = out_size(x.h), wo = out_size(x.w);
    Tensor<S> dx(x.n(), x.c, x.h, x.w);
    Eigen::Map<const RowMat<S>> wm(weight_.value.data(), out_, in_ * k_ * k_);
    Eigen::Map<RowMat<S>> dw(weight_.grad.data(), out_, in_ * k_ * k_);
    Mat<S> cols, dcols;
    for (int i = 0; i < x.n(); ++i) {
      im2col(x, i, cols);
      Eigen::Map<const RowMat<S>> gs(g.sample(i), out_, ho * wo);
      dw.noalias() += gs * cols.transpose();
      if (has_bias_) bias_.grad += gs.rowwise().sum();
      dcols.noalias() = wm.transpose() * gs;
      col2im(dcols, dx, i);
    }
    return dx;
  }

  [[nodiscard]] LayerPtr<S> clone() const override {
    auto c = std::make_unique<Conv2d>(*this);
    c->input_ = Tensor<S>{};
    return c;
  }

  std::vector<Parameter<S>*> parameters() override {
    if (has_bias_) return {&weight_, &bias_};
    return {&weight_};
  }

private:
  [[nodiscard]] int out_size(int s) const { return (s + 2 * pad_ - k_) / stride_ + 1; }

  void check_input(const Tensor<S>& x) const {
    if (x.c != in_) {
      throw InputError("conv expects " + std::to_string(in_) + " channels, got " + std::to_string(x.c));
    }
  }

  // cols: (in·k·k) × (ho·wo)
  void im2col(const Tensor<S>& x, int i, Mat<S>& cols) const {
    const int ho = out_size(x.h), wo = out_size(x.w);
    cols.resize(in_ * k_ * k_, ho * wo);
    const S* src = x.sample(i);
    for (int c = 0; c < in_; ++c) {
      for (int ky = 0; ky < k_; ++ky) {
        for (int kx = 0; kx < k_; ++kx) {
          const int row = (c * k_ + ky) * k_ + kx;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride_ - pad_ + ky;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride_ - pad_ + kx;
              const bool inside = iy >= 0 && iy < x.h && ix >= 0 && ix < x.w;
              cols(row, oy * wo + ox) = inside ? src[(c * x.h + iy) * x.w + ix] : S(0);
            }
          }
        }
      }
    }
  }

  void col2im(const Mat<S>& dcols, Tensor<S>& dx, int i) const {
    const int ho = out_size(dx.h), wo = out_size(dx.w);
    S* dst = dx.sample(i);
    for (int c = 0; c < in_; ++c) {
      for (int ky = 0; ky < k_; ++ky) {
        for (int kx = 0; kx < k_; ++kx) {
          const int row = (c * k_ + ky) * k_ + kx;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride_ - pad_ + ky;
            if (iy < 0 || iy >= dx.h) continue;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride_ - pad_ + kx;
              if (ix < 0 || ix >= dx.w) continue;
              dst[(c * dx.h + iy) * dx.w + ix] += dcols(row, oy * wo + ox);
            }
          }
        }
      }
    }
  }

  int in_, out_, k_, stride_, pad_;
  bool has_bias_;
  Parameter<S> weight_;
  Parameter<S> bias_;
  Tensor<S> input_;
};

// ---------------------------------------------------------------------------

/// Per-channel batch normalization; works for feature maps and flat vectors (h = w = 1).
template <typename S>
class BatchNorm final : public Layer<S> {
public:
  explicit BatchNorm(int channels, double momentum = 0.1, double eps = 1e-5)
      : channels_(channels), momentum_(momentum), eps_(eps), gamma_("gamma", channels), beta_("beta", channels),
        running_mean_(Vec<S>::Zero(channels)), running_var_(Vec<S>::Ones(channels)) {
    gamma_.value.setOnes();
  }

  [[nodiscard]] std::string kind() const override { return "batchnorm"; }

  Tensor<S> forward(const Tensor<S>& x, bool train) override {
    if (x.c != channels_) throw InputError("batchnorm channel mismatch");
    train_mode_ = train;
    const int p = x.plane();
    const double m = static_cast<double>(x.n()) * p;
    Vec<S> mean(channels_), var(channels_);
    if (train) {
      if (m < 2) throw InputError("batchnorm in training mode needs more than one value per channel");
      for (int c = 0; c < channels_; ++c) {
        double s = 0, ss = 0;
        for (int i = 0; i < x.n(); ++i) {
          const S* v = x.sample(i) + c * p;
          for (int j = 0; j < p; ++j) s += v[j];
        }
        const double mu = s / m;
        for (int i = 0; i < x.n(); ++i) {
          const S* v = x.sample(i) + c * p;
          for (int j = 0; j < p; ++j) ss += (v[j] - mu) * (v[j] - mu);
        }
        mean[c] = static_cast<S>(mu);
        var[c] = static_cast<S>(ss / m);
        running_mean_[c] = static_cast<S>((1 - momentum_) * running_mean_[c] + momentum_ * mu);
        running_var_[c] = static_cast<S>((1 - momentum_) * running_var_[c] + momentum_ * ss / (m - 1));
      }
    } else {
      mean = running_mean_;
      var = running_var_;
    }
    inv_std_ = (var.array() + static_cast<S>(eps_)).rsqrt().matrix();
    xhat_ = Tensor<S>(x.n(), x.c, x.h, x.w);
    Tensor<S> y(x.n(), x.c, x.h, x.w);
    for (int i = 0; i < x.n(); ++i) {
      for (int c = 0; c < channels_; ++c) {
        const S* v = x.sample(i) + c * p;
        S* xh = xhat_.sample(i) + c * p;
        S* out = y.sample(i) + c * p;
        for (int j = 0; j < p; ++j) {
          xh[j] = (v[j] - mean[c]) * inv_std_[c];
          out[j] = gamma_.value[c] * xh[j] + beta_.value[c];
        }
      }
    }
    return y;
  }

  [[nodiscard]] Tensor<S> infer(const Tensor<S>& x) const override {
    if (x.c != channels_) throw InputError("batchnorm channel mismatch");
    const int p = x.plane();
    Tensor<S> y(x.n(), x.c, x.h, x.w);
    for (int c = 0; c < channels_; ++c) {
      const S inv = static_cast<S>(1.0 / std::sqrt(static_cast<double>(running_var_[c]) + eps_));
      const S scale = gamma_.value[c] * inv;
      const S shift = beta_.value[c] - running_mean_[c] * scale;
      for (int i = 0; i < x.n(); ++i) {
        const S* v = x.sample(i) + c * p;
        S* out = y.sample(i) + c * p;
        for (int j = 0; j < p; ++j) out[j] = v[j] * scale + shift;
      }
    }
    return y;
  }

  Tensor<S> backward(const Tensor<S>& g) override {
    const int p = g.plane();
    const double m = static_cast<double>(g.n()) * p;
    Tensor<S> dx(g.n(), g.c, g.h, g.w);
    for (int c = 0; c < channels_; ++c) {
      double sum_g = 0, sum_gx = 0;
      for (int i = 0; i < g.n(); ++i) {
        const S* gv = g.sample(i) + c * p;
        const S* xh = xhat_.sample(i) + c * p;
        for (int j = 0; j < p; ++j) {
          sum_g += gv[j];
          sum_gx += gv[j] * xh[j];
        }
      }
      gamma_.grad[c] += static_cast<S>(sum_gx);
      beta_.grad[c] += static_cast<S>(sum_g);
      const S gam = gamma_.value[c];
      for (int i = 0; i < g.n(); ++i) {
        const S* gv = g.sample(i) + c * p;
        const S* xh = xhat_.sample(i) + c * p;
        S* d = dx.sample(i) + c * p;
        for (int j = 0; j < p; ++j) {
          if (train_mode_) {
            d[j] = static_cast<S>(gam * inv_std_[c] / m * (m * gv[j] - sum_g - xh[j] * sum_gx));
          } else {
            d[j] = gam * inv_std_[c] * gv[j];
          }
        }
      }
    }
    return dx;
  }

  [[nodiscard]] LayerPtr<S> clone() const override {
    auto c = std::make_unique<BatchNorm>(*this);
    c->xhat_ = Tensor<S>{};
    return c;
  }

  std::vector<Parameter<S>*> parameters() override { return {&gamma_, &beta_}; }
  std::vector<Vec<S>*> buffers() override { return {&running_mean_, &running_var_}; }

private:
  int channels_;
  double momentum_, eps_;
  Parameter<S> gamma_, beta_;
  Vec<S> running_mean_, running_var_;
  bool train_mode_ = false;
  Vec<S> inv_std_;
  Tensor<S> xhat_;
};

// ---------------------------------------------------------------------------

/// ReLU (slope 0) or LeakyReLU.
template <typename S>
class Activation final : public Layer<S> {
public:
  explicit Activation(double negative_slope = 0.0) : slope_(static_cast<S>(negative_slope)) {}

  [[nodiscard]] std::string kind() const override { return slope_ == S(0) ? "relu" : "leaky_relu"; }

  Tensor<S> forward(const Tensor<S>& x, bool) override {
    input_ = x;
    return infer(x);
  }

  [[nodiscard]] Tensor<S> infer(const Tensor<S>& x) const override {
    Tensor<S> y = x;
    y.data = x.data.unaryExpr([s = slope_](S v) { return v > S(0) ? v : s * v; });
    return y;
  }

  Tensor<S> backward(const Tensor<S>& g) override {
    Tensor<S> dx = g;
    dx.data = g.data.binaryExpr(input_.data, [s = slope_](S gv, S v) { return v > S(0) ? gv : s * gv; });
    return dx;
  }

  [[nodiscard]] LayerPtr<S> clone() const override { return std::make_unique<Activation>(slope_); }

private:
  S slope_;
  Tensor<S> input_;
};

// ---------------------------------------------------------------------------

template <typename S>
class MaxPool2 final : public Layer<S> {
public:
  [[nodiscard]] std::string kind() const override { return "maxpool"; }

  Tensor<S> forward(const Tensor<S>& x, bool) override {
    in_shape_ = Tensor<S>(0, x.c, x.h, x.w);
    Tensor<S> y = pool(x, &argmax_);
    return y;
  }

  [[nodiscard]] Tensor<S> infer(const Tensor<S>& x) const override { return pool(x, nullptr); }

  Tensor<S> backward(const Tensor<S>& g) override {
    Tensor<S> dx(g.n(), in_shape_.c, in_shape_.h, in_shape_.w);
    const int per = g.sample_size();
    for (int i = 0; i < g.n(); ++i) {
      const S* gv = g.sample(i);
      S* d = dx.sample(i);
      const int* idx = argmax_.data() + static_cast<std::ptrdiff_t>(i) * per;
      for (int j = 0; j < per; ++j) d[idx[j]] += gv[j];
    }
    return dx;
  }

  [[nodiscard]] LayerPtr<S> clone() const override { return std::make_unique<MaxPool2>(); }

private:
  static Tensor<S> pool(const Tensor<S>& x, std::vector<int>* argmax) {
    if (x.h < 2 || x.w < 2) throw InputError("maxpool input smaller than 2x2: " + x.shape_string());
    const int ho = x.h / 2, wo = x.w / 2;
    Tensor<S> y(x.n(), x.c, ho, wo);
    if (argmax) argmax->assign(static_cast<size_t>(y.data.size()), 0);
    for (int i = 0; i < x.n(); ++i) {
      const S* src = x.sample(i);
      S* dst = y.sample(i);
      for (int c = 0; c < x.c; ++c) {
        for (int oy = 0; oy < ho; ++oy) {
          for (int ox = 0; ox < wo; ++ox) {
            int best = (c * x.h + 2 * oy) * x.w + 2 * ox;
            for (int dy = 0; dy < 2; ++dy) {
              for (int dxx = 0; dxx < 2; ++dxx) {
                const int idx = (c * x.h + 2 * oy + dy) * x.w + 2 * ox + dxx;
                if (src[idx] > src[best]) best = idx;
              }
            }
            const int o = (c * ho + oy) * wo + ox;
            dst[o] = src[best];
            if (argmax) (*argmax)[static_cast<size_t>(i) * y.sample_size() + o] = best;
          }
        }
      }
    }
    return y;
  }

  Tensor<S> in_shape_;
  std::vector<int> argmax_;
};

// ---------------------------------------------------------------------------

template <typename S>
class GlobalAvgPool final : public Layer<S> {
public:
  [[nodiscard]] std::string kind() const override { return "avgpool"; }

  Tensor<S> forward(const Tensor<S>& x, bool) override {
    in_shape_ = Tensor<S>(0, x.c, x.h, x.w);
    return infer(x);
  }

  [[nodiscard]] Tensor<S> infer(const Tensor<S>& x) const override {
    Tensor<S> y(x.n(), x.c, 1, 1);
    const int p = x.plane();
    for (int i = 0; i < x.n(); ++i) {
      for (int c = 0; c < x.c; ++c) {
        S s = 0;
        const S* v = x.sample(i) + c * p;
        for (int j = 0; j < p; ++j) s += v[j];
        y.sample(i)[c] = s / static_cast<S>(p);
      }
    }
    return y;
  }

  Tensor<S> backward(const Tensor<S>& g) override {
    Tensor<S> dx(g.n(), in_shape_.c, in_shape_.h, in_shape_.w);
    const int p = dx.plane();
    for (int i = 0; i < g.n(); ++i) {
      for (int c = 0; c < dx.c; ++c) {
        const S v = g.sample(i)[c] / static_cast<S>(p);
        S* d = dx.sample(i) + c * p;
        for (int j = 0; j < p; ++j) d[j] = v;
      }
    }
    return dx;
  }

  [[nodiscard]] LayerPtr<S> clone() const override { return std::make_unique<GlobalAvgPool>(); }

private:
  Tensor<S> in_shape_;
};

// ---------------------------------------------------------------------------

template <typename S>
class Sequential final : public Layer<S> {
public:
  Sequential() = default;
  Sequential(const Sequential& o) {
    for (const auto& l : o.layers_) layers_.push_back(l->clone());
  }
  Sequential& operator=(const Sequential& o) {
    if (this != &o) {
      layers_.clear();
      for (const auto& l : o.layers_) layers_.push_back(l->clone());
    }
    return *this;
  }
  Sequential(Sequential&&) noexcept = default;
  Sequential& operator=(Sequential&&) noexcept = default;

  template <typename L, typename... Args>
  L& emplace(Args&&... args) {
    auto p = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *p;
    layers_.push_back(std::move(p));
    return ref;
  }
  void push(LayerPtr<S> l) { layers_.push_back(std::move(l)); }

  [[nodiscard]] std::string kind() const override { return "sequential"; }
  [[nodiscard]] bool empty() const { return layers_.empty(); }

  Tensor<S> forward(const Tensor<S>& x, bool train) override {
    Tensor<S> h = x;
    for (auto& l : layers_) h = l->forward(h, train);
    return h;
  }

  [[nodiscard]] Tensor<S> infer(const Tensor<S>& x) const override {
    Tensor<S> h = x;
    for (const auto& l : layers_) h = l->infer(h);
    return h;
  }

  Tensor<S> backward(const Tensor<S>& g) override {
    Tensor<S> d = g;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) d = (*it)->backward(d);
    return d;
  }

  [[nodiscard]] LayerPtr<S> clone() const override { return std::make_unique<Sequential>(*this); }

  std::vector<Parameter<S>*> parameters() override {
    std::vector<Parameter<S>*> out;
    for (auto& l : layers_) {
      auto p = l->parameters();
      out.insert(out.end(), p.begin(), p.end());
    }
    return out;
  }

  std::vector<Vec<S>*> buffers() override {
    std::vector<Vec<S>*> out;
    for (auto& l : layers_) {
      auto b = l->buffers();
      out.insert(out.end(), b.begin(), b.end());
    }
    return out;
  }

private:
  std::vector<LayerPtr<S>> layers_;
};

// ---------------------------------------------------------------------------

/// ResNet basic block: conv-bn-relu-conv-bn plus (projected) shortcut, then relu.
template <typename S>
class BasicBlock final : public Layer<S> {
public:
  BasicBlock(int in_channels, int out_channels, int stride, Rng& rng) {
    main_.template emplace<Conv2d<S>>(in_channels, out_channels, 3, stride, 1, false, rng);
    main_.template emplace<BatchNorm<S>>(out_channels);
    main_.template emplace<Activation<S>>(0.0);
    main_.template emplace<Conv2d<S>>(out_channels, out_channels, 3, 1, 1, false, rng);
    main_.template emplace<BatchNorm<S>>(out_channels);
    if (stride != 1 || in_channels != out_channels) {
      shortcut_.template emplace<Conv2d<S>>(in_channels, out_channels, 1, stride, 0, false, rng);
      shortcut_.template emplace<BatchNorm<S>>(out_channels);
    }
  }

  [[nodiscard]] std::string kind() const override { return "basicblock"; }

  Tensor<S> forward(const Tensor<S>& x, bool train) override {
    Tensor<S> a = main_.forward(x, train);
    Tensor<S> b = shortcut_.empty() ? x : shortcut_.forward(x, train);
    a.data += b.data;
    return relu_.forward(a, train);
  }

  [[nodiscard]] Tensor<S> infer(const Tensor<S>& x) const override {
    Tensor<S> a = main_.infer(x);
    Tensor<S> b = shortcut_.empty() ? x : shortcut_.infer(x);
    a.data += b.data;
    return relu_.infer(a);
  }

  Tensor<S> backward(const Tensor<S>& g) override {
    Tensor<S> d = relu_.backward(g);
    Tensor<S> dx = main_.backward(d);
    if (shortcut_.empty()) {
      dx.data += d.data;
    } else {
      dx.data += shortcut_.backward(d).data;
    }
    return dx;
  }

  [[nodiscard]] LayerPtr<S> clone() const override { return std::make_unique<BasicBlock>(*this); }

  std::vector<Parameter<S>*> parameters() override {
    auto p = main_.parameters();
    auto q = shortcut_.parameters();
    p.insert(p.end(), q.begin(), q.end());
    return p;
  }

  std::vector<Vec<S>*> buffers() override {
    auto p = main_.buffers();
    auto q = shortcut_.buffers();
    p.insert(p.end(), q.begin(), q.end());
    return p;
  }

private:
  Sequential<S> main_, shortcut_;
  Activation<S> relu_{0.0};
};

// ---------------------------------------------------------------------------

/// Fully connected layer on flattened samples: y = x Wᵀ + b, W is out × in.
template <typename S>
class Linear final : public Layer<S> {
public:
  Linear() = default;
  Linear(int in, int out, bool bias, Rng& rng)
      : in_(in), out_(out), has_bias_(bias), weight_("weight", static_cast<Eigen::Index>(in) * out),
        bias_("bias", bias ? out : 0) {
    fan_in_uniform<S>({weight_.value.data(), static_cast<size_t>(weight_.size())}, in, rng);
    if (bias) fan_in_uniform<S>({bias_.value.data(), static_cast<size_t>(bias_.size())}, in, rng);
  }

  [[nodiscard]] std::string kind() const override { return "linear"; }
  [[nodiscard]] int in_features() const { return in_; }
  [[nodiscard]] int out_features() const { return out_; }
  [[nodiscard]] bool has_bias() const { return has_bias_; }

  /// Row-major out × in view of the weight.
  [[nodiscard]] Eigen::Map<const RowMat<S>> weight() const { return {weight_.value.data(), out_, in_}; }
  Eigen::Map<RowMat<S>> weight() { return {weight_.value.data(), out_, in_}; }
  [[nodiscard]] const Vec<S>& bias() const { return bias_.value; }
  Vec<S>& bias() { return bias_.value; }

  Tensor<S> forward(const Tensor<S>& x, bool) override {
    input_ = x;
    return infer(x);
  }

  [[nodiscard]] Tensor<S> infer(const Tensor<S>& x) const override {
    if (x.sample_size() != in_) {
      throw InputError("linear expects " + std::to_string(in_) + " inputs, got " + std::to_string(x.sample_size()));
    }
    Tensor<S> y(x.n(), out_, 1, 1);
    y.data.noalias() = x.data * weight().transpose();
    if (has_bias_) y.data.rowwise() += bias_.value.transpose();
    return y;
  }

  Tensor<S> backward(const Tensor<S>& g) override {
    Eigen::Map<RowMat<S>> dw(weight_.grad.data(), out_, in_);
    dw.noalias() += g.data.transpose() * input_.data;
    if (has_bias_) bias_.grad += g.data.colwise().sum().transpose();
    Tensor<S> dx(input_.n(), input_.c, input_.h, input_.w);
    dx.data.noalias() = g.data * weight();
    return dx;
  }

  /// Append `rows` freshly initialized output units; existing rows are untouched.
  void add_outputs(int rows, Rng& rng) {
    Vec<S> w(static_cast<Eigen::Index>(out_ + rows) * in_);
    w.head(weight_.size()) = weight_.value;
    fan_in_uniform<S>({w.data() + weight_.size(), static_cast<size_t>(rows) * in_}, in_, rng);
    weight_.value = std::move(w);
    weight_.grad = Vec<S>::Zero(weight_.value.size());
    if (has_bias_) {
      Vec<S> b(out_ + rows);
      b.head(out_) = bias_.value;
      fan_in_uniform<S>({b.data() + out_, static_cast<size_t>(rows)}, in_, rng);
      bias_.value = std::move(b);
      bias_.grad = Vec<S>::Zero(out_ + rows);
    }
    out_ += rows;
  }

  /// Insert `count` input columns at `position`, freshly initialized.
  void insert_inputs(int position, int count, Rng& rng) {
    const int new_in = in_ + count;
    RowMat<S> w(out_, new_in);
    const RowMat<S> old = weight();
    w.leftCols(position) = old.leftCols(position);
    w.rightCols(in_ - position) = old.rightCols(in_ - position);
    Vec<S> fresh(static_cast<Eigen::Index>(out_) * count);
    fan_in_uniform<S>({fresh.data(), static_cast<size_t>(fresh.size())}, new_in, rng);
    w.middleCols(position, count) = Eigen::Map<RowMat<S>>(fresh.data(), out_, count);
    in_ = new_in;
    weight_.value = Eigen::Map<Vec<S>>(w.data(), w.size());
    weight_.grad = Vec<S>::Zero(weight_.value.size());
  }

  [[nodiscard]] LayerPtr<S> clone() const override {
    auto c = std::make_unique<Linear>(*this);
    c->input_ = Tensor<S>{};
    return c;
  }

  std::vector<Parameter<S>*> parameters() override {
    if (has_bias_) return {&weight_, &bias_};
    return {&weight_};
  }

private:
  int in_ = 0, out_ = 0;
  bool has_bias_ = false;
  Parameter<S> weight_, bias_;
  Tensor<S> input_;
};

// ---------------------------------------------------------------------------

template <typename S>
void zero_grad(const std::vector<Parameter<S>*>& params) {
  for (auto* p : params) p->zero_grad();
}

template <typename S>
Eigen::Index parameter_count(const std::vector<Parameter<S>*>& params) {
  Eigen::Index n = 0;
  for (auto* p : params) n += p->size();
  return n;
}

/// Adam with bias correction.
template <typename S>
class Adam {
public:
  struct Options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  Adam(std::vector<Parameter<S>*> params, Options opt) : params_(std::move(params)), opt_(opt) {
    for (auto* p : params_) {
      m_.push_back(Vec<S>::Zero(p->size()));
      v_.push_back(Vec<S>::Zero(p->size()));
    }
  }

  void zero_grad() { nn::zero_grad(params_); }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(opt_.beta1, t_);
    const double c2 = 1.0 - std::pow(opt_.beta2, t_);
    const S b1 = static_cast<S>(opt_.beta1), b2 = static_cast<S>(opt_.beta2);
    const S step = static_cast<S>(opt_.lr / c1);
    const S sc2 = static_cast<S>(1.0 / std::sqrt(c2));
    const S eps = static_cast<S>(opt_.eps);
    for (size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i];
      m_[i] = b1 * m_[i] + (S(1) - b1) * p.grad;
      v_[i] = b2 * v_[i] + (S(1) - b2) * p.grad.cwiseAbs2();
      p.value.array() -= step * m_[i].array() / (v_[i].array().sqrt() * sc2 + eps);
    }
  }

  [[nodiscard]] long steps() const { return t_; }
  void set_lr(double lr) { opt_.lr = lr; }
  [[nodiscard]] double lr() const { return opt_.lr; }

private:
  std::vector<Parameter<S>*> params_;
  Options opt_;
  std::vector<Vec<S>> m_, v_;
  long t_ = 0;
};

}  // namespace gfr::nn
