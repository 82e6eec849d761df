#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "triad/rng.hpp"
#include "triad/tensor.hpp"

namespace triad::nn {

enum class Mode { kTrain, kEval };

// A named trainable tensor with its gradient accumulator.
struct Param {
  std::string name;
  Tensor value;
  Tensor grad;

  void init_shape(std::string n, std::vector<std::size_t> shape) {
    name = std::move(n);
    value = Tensor(shape);
    grad = Tensor(std::move(shape));
  }
  void zero_grad() { grad.fill(0.0); }
};

// Fan-in scaled uniform init for weight matrices; biases start at zero.
void init_uniform(Param& p, std::size_t fan_in, Rng& rng);

// y = x W + b with x: [N, in], W: [in, out].
class Linear {
 public:
  Linear() = default;
  Linear(std::string name, std::size_t in, std::size_t out, Rng& rng);

  Tensor forward(const Tensor& x, Mode mode);
  // Accumulates dW/db, returns dL/dx. Requires a train-mode forward first.
  Tensor backward(const Tensor& dy);

  void collect(std::vector<Param*>& out) { out.push_back(&w_); out.push_back(&b_); }
  std::size_t in_dim() const { return in_; }
  std::size_t out_dim() const { return out_; }
  Param& weight() { return w_; }
  Param& bias() { return b_; }

 private:
  std::size_t in_ = 0, out_ = 0;
  Param w_, b_;
  Tensor cached_x_;
  bool has_cache_ = false;
};

class ReLU {
 public:
  Tensor forward(const Tensor& x, Mode mode);
  Tensor backward(const Tensor& dy);

 private:
  std::vector<std::uint8_t> mask_;
  bool has_cache_ = false;
};

// Inverted dropout: train mode zeroes units with probability p and scales
// survivors by 1/(1-p); eval mode is the identity.
class Dropout {
 public:
  explicit Dropout(double p = 0.5) : p_(p) {}

  Tensor forward(const Tensor& x, Mode mode, Rng* rng);
  Tensor backward(const Tensor& dy);

  void set_p(double p) { p_ = p; }
  double p() const { return p_; }

 private:
  double p_;
  std::vector<double> scale_;  // per-unit multiplier of the last train forward
  bool has_cache_ = false;
};

// Batch normalization over the channel axis. Accepts [N, C] (per-feature) or
// [N, C, T, F] (per-channel over batch and spatial dims). Train mode uses
// batch statistics and updates running stats; eval mode uses running stats.
class BatchNorm {
 public:
  BatchNorm() = default;
  BatchNorm(std::string name, std::size_t channels, double momentum = 0.1, double eps = 1e-5);

  Tensor forward(const Tensor& x, Mode mode);
  Tensor backward(const Tensor& dy);

  void collect(std::vector<Param*>& out) { out.push_back(&gamma_); out.push_back(&beta_); }
  Tensor& running_mean() { return running_mean_; }
  Tensor& running_var() { return running_var_; }
  const std::string& name() const { return name_; }

 private:
  std::string name_;
  std::size_t channels_ = 0;
  double momentum_ = 0.1, eps_ = 1e-5;
  Param gamma_, beta_;
  Tensor running_mean_, running_var_;

  // train-mode cache
  Tensor cached_xhat_;
  std::vector<double> batch_inv_std_, batch_mean_;
  std::vector<std::size_t> cached_shape_;
  Mode cached_mode_ = Mode::kEval;
  bool has_cache_ = false;
};

// Per-row layer normalization over the last axis of an [N, D] tensor.
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(std::string name, std::size_t dim, double eps = 1e-5);

  Tensor forward(const Tensor& x, Mode mode);
  Tensor backward(const Tensor& dy);

  void collect(std::vector<Param*>& out) { out.push_back(&gamma_); out.push_back(&beta_); }

 private:
  std::size_t dim_ = 0;
  double eps_ = 1e-5;
  Param gamma_, beta_;
  Tensor cached_xhat_;
  std::vector<double> inv_std_;
  bool has_cache_ = false;
};

// 2D convolution with a square kernel, unit stride and same-padding on
// [N, C, T, F] tensors.
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::string name, std::size_t in_ch, std::size_t out_ch, std::size_t kernel, Rng& rng);

  Tensor forward(const Tensor& x, Mode mode);
  Tensor backward(const Tensor& dy);

  void collect(std::vector<Param*>& out) { out.push_back(&w_); out.push_back(&b_); }
  Param& weight() { return w_; }
  Param& bias() { return b_; }

 private:
  std::size_t in_ch_ = 0, out_ch_ = 0, k_ = 0;
  Param w_;  // [out, in, k, k]
  Param b_;  // [out]
  Tensor cached_x_;
  bool has_cache_ = false;
};

// Max pooling with window (pt, pf) and equal stride on [N, C, T, F]; trailing
// rows/columns that do not fill a window are dropped.
class MaxPool2d {
 public:
  MaxPool2d() = default;
  MaxPool2d(std::size_t pt, std::size_t pf) : pt_(pt), pf_(pf) {}

  Tensor forward(const Tensor& x, Mode mode);
  Tensor backward(const Tensor& dy);

  std::size_t pt() const { return pt_; }
  std::size_t pf() const { return pf_; }

 private:
  std::size_t pt_ = 1, pf_ = 1;
  std::vector<std::size_t> argmax_;
  std::vector<std::size_t> in_shape_;
  bool has_cache_ = false;
};

// Masked multi-head scaled dot-product self-attention. Input [N, T, F_in] is
// projected to [N, T, D]; masked positions neither attend nor are attended
// to, and their output rows are zero.
class MultiHeadSelfAttention {
 public:
  MultiHeadSelfAttention() = default;
  MultiHeadSelfAttention(std::string name, std::size_t in_dim, std::size_t model_dim,
                         std::size_t heads, Rng& rng);

  Tensor forward(const Tensor& x, const std::vector<std::uint8_t>& mask, Mode mode);
  Tensor backward(const Tensor& dy);

  void collect(std::vector<Param*>& out);
  // Attention weights of the last forward, [N, heads, T, T]; rows of masked
  // queries and columns of masked keys are zero.
  const Tensor& last_attention() const { return attn_; }

 private:
  std::size_t in_dim_ = 0, model_dim_ = 0, heads_ = 0, head_dim_ = 0;
  Linear wq_, wk_, wv_, wo_;
  Tensor q_, k_, v_, attn_;
  std::vector<std::uint8_t> mask_;
  std::vector<std::size_t> in_shape_;
  bool has_cache_ = false;
};

// y = x W + b applied to the trailing axis of an [N, T, in] tensor.
Tensor linear3_forward(Linear& lin, const Tensor& x, Mode mode);
Tensor linear3_backward(Linear& lin, const Tensor& dy, std::size_t n, std::size_t t);

}  // namespace triad::nn
