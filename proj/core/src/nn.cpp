#include "triad/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace triad::nn {

void init_uniform(Param& p, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& v : p.value.vec()) v = rng.uniform(-bound, bound);
}

// ---------------------------------------------------------------------------
// Linear

Linear::Linear(std::string name, std::size_t in, std::size_t out, Rng& rng)
    : in_(in), out_(out) {
  w_.init_shape(name + ".weight", {in, out});
  b_.init_shape(name + ".bias", {out});
  init_uniform(w_, in, rng);
}

Tensor Linear::forward(const Tensor& x, Mode mode) {
  const std::size_t n = x.dim(0);
  if (x.dim(1) != in_) throw std::invalid_argument("linear: input dim mismatch");
  Tensor y({n, out_});
  const double* wp = w_.value.data();
  for (std::size_t r = 0; r < n; ++r) {
    const double* xr = x.data() + r * in_;
    double* yr = y.data() + r * out_;
    for (std::size_t o = 0; o < out_; ++o) yr[o] = b_.value[o];
    for (std::size_t i = 0; i < in_; ++i) {
      const double xv = xr[i];
      if (xv == 0.0) continue;
      const double* wrow = wp + i * out_;
      for (std::size_t o = 0; o < out_; ++o) yr[o] += xv * wrow[o];
    }
  }
  if (mode == Mode::kTrain) {
    cached_x_ = x;
    has_cache_ = true;
  }
  return y;
}

Tensor Linear::backward(const Tensor& dy) {
  if (!has_cache_) throw std::logic_error("linear: backward without forward cache");
  const std::size_t n = cached_x_.dim(0);
  Tensor dx({n, in_});
  double* dwp = w_.grad.data();
  const double* wp = w_.value.data();
  for (std::size_t r = 0; r < n; ++r) {
    const double* xr = cached_x_.data() + r * in_;
    const double* dyr = dy.data() + r * out_;
    double* dxr = dx.data() + r * in_;
    for (std::size_t o = 0; o < out_; ++o) b_.grad[o] += dyr[o];
    for (std::size_t i = 0; i < in_; ++i) {
      const double* wrow = wp + i * out_;
      double* dwrow = dwp + i * out_;
      const double xv = xr[i];
      double acc = 0.0;
      for (std::size_t o = 0; o < out_; ++o) {
        acc += dyr[o] * wrow[o];
        dwrow[o] += xv * dyr[o];
      }
      dxr[i] = acc;
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// ReLU

Tensor ReLU::forward(const Tensor& x, Mode mode) {
  Tensor y = x;
  if (mode == Mode::kTrain) {
    mask_.assign(x.size(), 0);
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (y[i] > 0.0) {
        mask_[i] = 1;
      } else {
        y[i] = 0.0;
      }
    }
    has_cache_ = true;
  } else {
    for (double& v : y.vec()) v = v > 0.0 ? v : 0.0;
  }
  return y;
}

Tensor ReLU::backward(const Tensor& dy) {
  if (!has_cache_ || mask_.size() != dy.size()) {
    throw std::logic_error("relu: backward without forward cache");
  }
  Tensor dx = dy;
  for (std::size_t i = 0; i < dx.size(); ++i) {
    if (!mask_[i]) dx[i] = 0.0;
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Dropout

Tensor Dropout::forward(const Tensor& x, Mode mode, Rng* rng) {
  if (p_ < 0.0 || p_ >= 1.0) throw std::invalid_argument("dropout: p must be in [0,1)");
  if (mode == Mode::kEval) return x;
  if (p_ == 0.0) {
    scale_.assign(x.size(), 1.0);
    has_cache_ = true;
    return x;
  }
  if (rng == nullptr) throw std::logic_error("dropout: train mode needs an rng");
  const double keep_scale = 1.0 / (1.0 - p_);
  scale_.resize(x.size());
  Tensor y = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    scale_[i] = rng->uniform() < p_ ? 0.0 : keep_scale;
    y[i] *= scale_[i];
  }
  has_cache_ = true;
  return y;
}

Tensor Dropout::backward(const Tensor& dy) {
  if (!has_cache_ || scale_.size() != dy.size()) {
    throw std::logic_error("dropout: backward without forward cache");
  }
  Tensor dx = dy;
  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= scale_[i];
  return dx;
}

// ---------------------------------------------------------------------------
// BatchNorm

BatchNorm::BatchNorm(std::string name, std::size_t channels, double momentum, double eps)
    : name_(std::move(name)), channels_(channels), momentum_(momentum), eps_(eps) {
  gamma_.init_shape(name_ + ".weight", {channels});
  beta_.init_shape(name_ + ".bias", {channels});
  gamma_.value.fill(1.0);
  running_mean_ = Tensor({channels});
  running_var_ = Tensor({channels});
  running_var_.fill(1.0);
}

namespace {
// Decomposes [N, C, ...] into (batch, channels, inner spatial size).
void bn_dims(const Tensor& x, std::size_t channels, std::size_t& n, std::size_t& inner) {
  if (x.rank() < 2 || x.dim(1) != channels) {
    throw std::invalid_argument("batchnorm: unexpected input shape");
  }
  n = x.dim(0);
  inner = 1;
  for (std::size_t d = 2; d < x.rank(); ++d) inner *= x.dim(d);
}
}  // namespace

Tensor BatchNorm::forward(const Tensor& x, Mode mode) {
  std::size_t n, inner;
  bn_dims(x, channels_, n, inner);
  const std::size_t m = n * inner;
  Tensor y(x.shape());
  cached_mode_ = mode;

  if (mode == Mode::kTrain) {
    batch_mean_.assign(channels_, 0.0);
    batch_inv_std_.assign(channels_, 0.0);
    cached_xhat_ = Tensor(x.shape());
    for (std::size_t c = 0; c < channels_; ++c) {
      double mean = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const double* p = x.data() + (b * channels_ + c) * inner;
        for (std::size_t s = 0; s < inner; ++s) mean += p[s];
      }
      mean /= static_cast<double>(m);
      double var = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const double* p = x.data() + (b * channels_ + c) * inner;
        for (std::size_t s = 0; s < inner; ++s) {
          const double d = p[s] - mean;
          var += d * d;
        }
      }
      var /= static_cast<double>(m);
      const double inv_std = 1.0 / std::sqrt(var + eps_);
      batch_mean_[c] = mean;
      batch_inv_std_[c] = inv_std;
      running_mean_[c] = (1.0 - momentum_) * running_mean_[c] + momentum_ * mean;
      running_var_[c] = (1.0 - momentum_) * running_var_[c] + momentum_ * var;
      const double g = gamma_.value[c], bt = beta_.value[c];
      for (std::size_t b = 0; b < n; ++b) {
        const double* p = x.data() + (b * channels_ + c) * inner;
        double* xh = cached_xhat_.data() + (b * channels_ + c) * inner;
        double* yp = y.data() + (b * channels_ + c) * inner;
        for (std::size_t s = 0; s < inner; ++s) {
          xh[s] = (p[s] - mean) * inv_std;
          yp[s] = g * xh[s] + bt;
        }
      }
    }
    cached_shape_ = x.shape();
    has_cache_ = true;
  } else {
    for (std::size_t c = 0; c < channels_; ++c) {
      const double inv_std = 1.0 / std::sqrt(running_var_[c] + eps_);
      const double mean = running_mean_[c];
      const double g = gamma_.value[c], bt = beta_.value[c];
      for (std::size_t b = 0; b < n; ++b) {
        const double* p = x.data() + (b * channels_ + c) * inner;
        double* yp = y.data() + (b * channels_ + c) * inner;
        for (std::size_t s = 0; s < inner; ++s) yp[s] = g * (p[s] - mean) * inv_std + bt;
      }
    }
  }
  return y;
}

Tensor BatchNorm::backward(const Tensor& dy) {
  if (!has_cache_ || cached_mode_ != Mode::kTrain) {
    throw std::logic_error("batchnorm: backward without train-mode forward cache");
  }
  std::size_t n, inner;
  bn_dims(dy, channels_, n, inner);
  const double m = static_cast<double>(n * inner);
  Tensor dx(dy.shape());
  for (std::size_t c = 0; c < channels_; ++c) {
    const double g = gamma_.value[c];
    const double inv_std = batch_inv_std_[c];
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
      const double* dyp = dy.data() + (b * channels_ + c) * inner;
      const double* xh = cached_xhat_.data() + (b * channels_ + c) * inner;
      for (std::size_t s = 0; s < inner; ++s) {
        sum_dy += dyp[s];
        sum_dy_xhat += dyp[s] * xh[s];
      }
    }
    gamma_.grad[c] += sum_dy_xhat;
    beta_.grad[c] += sum_dy;
    const double k1 = g * inv_std / m;
    for (std::size_t b = 0; b < n; ++b) {
      const double* dyp = dy.data() + (b * channels_ + c) * inner;
      const double* xh = cached_xhat_.data() + (b * channels_ + c) * inner;
      double* dxp = dx.data() + (b * channels_ + c) * inner;
      for (std::size_t s = 0; s < inner; ++s) {
        dxp[s] = k1 * (m * dyp[s] - sum_dy - xh[s] * sum_dy_xhat);
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// LayerNorm

LayerNorm::LayerNorm(std::string name, std::size_t dim, double eps) : dim_(dim), eps_(eps) {
  gamma_.init_shape(name + ".weight", {dim});
  beta_.init_shape(name + ".bias", {dim});
  gamma_.value.fill(1.0);
}

Tensor LayerNorm::forward(const Tensor& x, Mode mode) {
  if (x.rank() != 2 || x.dim(1) != dim_) throw std::invalid_argument("layernorm: expected [N, D]");
  const std::size_t n = x.dim(0);
  const bool train = (mode == Mode::kTrain);
  Tensor y({n, dim_});
  Tensor xhat({n, dim_});
  std::vector<double> inv_stds(n, 0.0);
  const double d = static_cast<double>(dim_);
  for (std::size_t r = 0; r < n; ++r) {
    const double* xr = x.data() + r * dim_;
    double mean = 0.0;
    for (std::size_t i = 0; i < dim_; ++i) mean += xr[i];
    mean /= d;
    double var = 0.0;
    for (std::size_t i = 0; i < dim_; ++i) {
      const double dv = xr[i] - mean;
      var += dv * dv;
    }
    var /= d;
    const double inv_std = 1.0 / std::sqrt(var + eps_);
    inv_stds[r] = inv_std;
    double* xh = xhat.data() + r * dim_;
    double* yr = y.data() + r * dim_;
    for (std::size_t i = 0; i < dim_; ++i) {
      xh[i] = (xr[i] - mean) * inv_std;
      yr[i] = gamma_.value[i] * xh[i] + beta_.value[i];
    }
  }
  if (train) {
    cached_xhat_ = std::move(xhat);
    inv_std_ = std::move(inv_stds);
    has_cache_ = true;
  }
  return y;
}

Tensor LayerNorm::backward(const Tensor& dy) {
  if (!has_cache_) throw std::logic_error("layernorm: backward without forward cache");
  const std::size_t n = dy.dim(0);
  const double d = static_cast<double>(dim_);
  Tensor dx({n, dim_});
  for (std::size_t r = 0; r < n; ++r) {
    const double* dyr = dy.data() + r * dim_;
    const double* xh = cached_xhat_.data() + r * dim_;
    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
    for (std::size_t i = 0; i < dim_; ++i) {
      const double dxhat = dyr[i] * gamma_.value[i];
      sum_dxhat += dxhat;
      sum_dxhat_xhat += dxhat * xh[i];
      gamma_.grad[i] += dyr[i] * xh[i];
      beta_.grad[i] += dyr[i];
    }
    double* dxr = dx.data() + r * dim_;
    const double k = inv_std_[r] / d;
    for (std::size_t i = 0; i < dim_; ++i) {
      const double dxhat = dyr[i] * gamma_.value[i];
      dxr[i] = k * (d * dxhat - sum_dxhat - xh[i] * sum_dxhat_xhat);
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Conv2d

Conv2d::Conv2d(std::string name, std::size_t in_ch, std::size_t out_ch, std::size_t kernel,
               Rng& rng)
    : in_ch_(in_ch), out_ch_(out_ch), k_(kernel) {
  w_.init_shape(name + ".weight", {out_ch, in_ch, kernel, kernel});
  b_.init_shape(name + ".bias", {out_ch});
  init_uniform(w_, in_ch * kernel * kernel, rng);
}

Tensor Conv2d::forward(const Tensor& x, Mode mode) {
  if (x.rank() != 4 || x.dim(1) != in_ch_) throw std::invalid_argument("conv2d: expected [N, C, T, F]");
  const std::size_t n = x.dim(0), t_dim = x.dim(2), f_dim = x.dim(3);
  const long pad = static_cast<long>(k_ / 2);
  Tensor y({n, out_ch_, t_dim, f_dim});
  const std::size_t plane = t_dim * f_dim;
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t co = 0; co < out_ch_; ++co) {
      double* yp = y.data() + (b * out_ch_ + co) * plane;
      const double bias = b_.value[co];
      for (std::size_t i = 0; i < plane; ++i) yp[i] = bias;
      for (std::size_t ci = 0; ci < in_ch_; ++ci) {
        const double* xp = x.data() + (b * in_ch_ + ci) * plane;
        const double* wp = w_.value.data() + ((co * in_ch_ + ci) * k_) * k_;
        for (std::size_t kt = 0; kt < k_; ++kt) {
          const long dt = static_cast<long>(kt) - pad;
          const std::size_t t0 = dt < 0 ? static_cast<std::size_t>(-dt) : 0;
          const std::size_t t1 = dt > 0 ? t_dim - static_cast<std::size_t>(dt) : t_dim;
          for (std::size_t kf = 0; kf < k_; ++kf) {
            const double wv = wp[kt * k_ + kf];
            if (wv == 0.0) continue;
            const long df = static_cast<long>(kf) - pad;
            const std::size_t f0 = df < 0 ? static_cast<std::size_t>(-df) : 0;
            const std::size_t f1 = df > 0 ? f_dim - static_cast<std::size_t>(df) : f_dim;
            for (std::size_t t = t0; t < t1; ++t) {
              double* yrow = yp + t * f_dim;
              const double* xrow = xp + (t + dt) * f_dim + df;
              for (std::size_t f = f0; f < f1; ++f) yrow[f] += wv * xrow[f];
            }
          }
        }
      }
    }
  }
  if (mode == Mode::kTrain) {
    cached_x_ = x;
    has_cache_ = true;
  }
  return y;
}

Tensor Conv2d::backward(const Tensor& dy) {
  if (!has_cache_) throw std::logic_error("conv2d: backward without forward cache");
  const Tensor& x = cached_x_;
  const std::size_t n = x.dim(0), t_dim = x.dim(2), f_dim = x.dim(3);
  const long pad = static_cast<long>(k_ / 2);
  const std::size_t plane = t_dim * f_dim;
  Tensor dx(x.shape());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t co = 0; co < out_ch_; ++co) {
      const double* dyp = dy.data() + (b * out_ch_ + co) * plane;
      double bsum = 0.0;
      for (std::size_t i = 0; i < plane; ++i) bsum += dyp[i];
      b_.grad[co] += bsum;
      for (std::size_t ci = 0; ci < in_ch_; ++ci) {
        const double* xp = x.data() + (b * in_ch_ + ci) * plane;
        double* dxp = dx.data() + (b * in_ch_ + ci) * plane;
        const double* wp = w_.value.data() + ((co * in_ch_ + ci) * k_) * k_;
        double* dwp = w_.grad.data() + ((co * in_ch_ + ci) * k_) * k_;
        for (std::size_t kt = 0; kt < k_; ++kt) {
          const long dt = static_cast<long>(kt) - pad;
          const std::size_t t0 = dt < 0 ? static_cast<std::size_t>(-dt) : 0;
          const std::size_t t1 = dt > 0 ? t_dim - static_cast<std::size_t>(dt) : t_dim;
          for (std::size_t kf = 0; kf < k_; ++kf) {
            const long df = static_cast<long>(kf) - pad;
            const std::size_t f0 = df < 0 ? static_cast<std::size_t>(-df) : 0;
            const std::size_t f1 = df > 0 ? f_dim - static_cast<std::size_t>(df) : f_dim;
            const double wv = wp[kt * k_ + kf];
            double wgrad = 0.0;
            for (std::size_t t = t0; t < t1; ++t) {
              const double* dyrow = dyp + t * f_dim;
              const double* xrow = xp + (t + dt) * f_dim + df;
              double* dxrow = dxp + (t + dt) * f_dim + df;
              for (std::size_t f = f0; f < f1; ++f) {
                wgrad += dyrow[f] * xrow[f];
                dxrow[f] += wv * dyrow[f];
              }
            }
            dwp[kt * k_ + kf] += wgrad;
          }
        }
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// MaxPool2d

Tensor MaxPool2d::forward(const Tensor& x, Mode mode) {
  if (x.rank() != 4) throw std::invalid_argument("maxpool: expected [N, C, T, F]");
  const std::size_t n = x.dim(0), c = x.dim(1), t_dim = x.dim(2), f_dim = x.dim(3);
  if (t_dim < pt_ || f_dim < pf_) throw std::invalid_argument("maxpool: input smaller than window");
  const std::size_t to = t_dim / pt_, fo = f_dim / pf_;
  const bool train = (mode == Mode::kTrain);
  Tensor y({n, c, to, fo});
  std::vector<std::size_t> argmax;
  if (train) argmax.assign(n * c * to * fo, 0);
  const std::size_t plane = t_dim * f_dim;
  std::size_t oi = 0;
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* xp = x.data() + (b * c + ch) * plane;
      for (std::size_t t = 0; t < to; ++t) {
        for (std::size_t f = 0; f < fo; ++f, ++oi) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t best_idx = 0;
          for (std::size_t it = 0; it < pt_; ++it) {
            for (std::size_t jf = 0; jf < pf_; ++jf) {
              const std::size_t idx = (t * pt_ + it) * f_dim + (f * pf_ + jf);
              if (xp[idx] > best) {
                best = xp[idx];
                best_idx = idx;
              }
            }
          }
          y[oi] = best;
          if (train) argmax[oi] = (b * c + ch) * plane + best_idx;
        }
      }
    }
  }
  if (train) {
    argmax_ = std::move(argmax);
    in_shape_ = x.shape();
    has_cache_ = true;
  }
  return y;
}

Tensor MaxPool2d::backward(const Tensor& dy) {
  if (!has_cache_) throw std::logic_error("maxpool: backward without forward cache");
  Tensor dx(in_shape_);
  for (std::size_t i = 0; i < dy.size(); ++i) dx[argmax_[i]] += dy[i];
  return dx;
}

// ---------------------------------------------------------------------------
// Multi-head self-attention

MultiHeadSelfAttention::MultiHeadSelfAttention(std::string name, std::size_t in_dim,
                                               std::size_t model_dim, std::size_t heads, Rng& rng)
    : in_dim_(in_dim), model_dim_(model_dim), heads_(heads), head_dim_(model_dim / heads) {
  if (model_dim % heads != 0) throw std::invalid_argument("attention: model dim not divisible by heads");
  wq_ = Linear(name + ".wq", in_dim, model_dim, rng);
  wk_ = Linear(name + ".wk", in_dim, model_dim, rng);
  wv_ = Linear(name + ".wv", in_dim, model_dim, rng);
  wo_ = Linear(name + ".wo", model_dim, model_dim, rng);
}

void MultiHeadSelfAttention::collect(std::vector<Param*>& out) {
  wq_.collect(out);
  wk_.collect(out);
  wv_.collect(out);
  wo_.collect(out);
}

Tensor linear3_forward(Linear& lin, const Tensor& x, Mode mode) {
  const std::size_t n = x.dim(0), t = x.dim(1);
  Tensor flat({n * t, x.dim(2)}, x.vec());
  Tensor y = lin.forward(flat, mode);
  y.reshape({n, t, lin.out_dim()});
  return y;
}

Tensor linear3_backward(Linear& lin, const Tensor& dy, std::size_t n, std::size_t t) {
  Tensor flat({n * t, dy.dim(2)}, dy.vec());
  Tensor dx = lin.backward(flat);
  dx.reshape({n, t, lin.in_dim()});
  return dx;
}

Tensor MultiHeadSelfAttention::forward(const Tensor& x, const std::vector<std::uint8_t>& mask,
                                       Mode mode) {
  if (x.rank() != 3 || x.dim(2) != in_dim_) throw std::invalid_argument("attention: expected [N, T, F]");
  const std::size_t n = x.dim(0), t_len = x.dim(1);
  if (mask.size() != n * t_len) throw std::invalid_argument("attention: mask size mismatch");
  for (std::size_t b = 0; b < n; ++b) {
    bool any = false;
    for (std::size_t t = 0; t < t_len; ++t) any = any || mask[b * t_len + t];
    if (!any) throw std::invalid_argument("attention: all positions masked");
  }

  Tensor q = linear3_forward(wq_, x, mode);
  Tensor k = linear3_forward(wk_, x, mode);
  Tensor v = linear3_forward(wv_, x, mode);
  Tensor attn({n, heads_, t_len, t_len});
  Tensor concat({n, t_len, model_dim_});
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim_));

  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t h = 0; h < heads_; ++h) {
      const std::size_t off = h * head_dim_;
      for (std::size_t tq = 0; tq < t_len; ++tq) {
        if (!mask[b * t_len + tq]) continue;
        const double* qv = q.data() + (b * t_len + tq) * model_dim_ + off;
        double* arow = attn.data() + ((b * heads_ + h) * t_len + tq) * t_len;
        double maxlogit = -std::numeric_limits<double>::infinity();
        for (std::size_t tk = 0; tk < t_len; ++tk) {
          if (!mask[b * t_len + tk]) continue;
          const double* kv = k.data() + (b * t_len + tk) * model_dim_ + off;
          double dot = 0.0;
          for (std::size_t d = 0; d < head_dim_; ++d) dot += qv[d] * kv[d];
          arow[tk] = dot * scale;
          maxlogit = std::max(maxlogit, arow[tk]);
        }
        double denom = 0.0;
        for (std::size_t tk = 0; tk < t_len; ++tk) {
          if (!mask[b * t_len + tk]) continue;
          arow[tk] = std::exp(arow[tk] - maxlogit);
          denom += arow[tk];
        }
        double* out = concat.data() + (b * t_len + tq) * model_dim_ + off;
        for (std::size_t tk = 0; tk < t_len; ++tk) {
          if (!mask[b * t_len + tk]) continue;
          arow[tk] /= denom;
          const double* vv = v.data() + (b * t_len + tk) * model_dim_ + off;
          for (std::size_t d = 0; d < head_dim_; ++d) out[d] += arow[tk] * vv[d];
        }
      }
    }
  }

  Tensor y = linear3_forward(wo_, concat, mode);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t t = 0; t < t_len; ++t) {
      if (mask[b * t_len + t]) continue;
      double* yr = y.data() + (b * t_len + t) * model_dim_;
      for (std::size_t d = 0; d < model_dim_; ++d) yr[d] = 0.0;
    }
  }

  if (mode == Mode::kTrain) {
    q_ = std::move(q);
    k_ = std::move(k);
    v_ = std::move(v);
    attn_ = std::move(attn);
    mask_ = mask;
    in_shape_ = x.shape();
    has_cache_ = true;
  }
  return y;
}

Tensor MultiHeadSelfAttention::backward(const Tensor& dy) {
  if (!has_cache_) throw std::logic_error("attention: backward without forward cache");
  const std::size_t n = in_shape_[0], t_len = in_shape_[1];
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim_));

  Tensor dy_masked = dy;
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t t = 0; t < t_len; ++t) {
      if (mask_[b * t_len + t]) continue;
      double* r = dy_masked.data() + (b * t_len + t) * model_dim_;
      for (std::size_t d = 0; d < model_dim_; ++d) r[d] = 0.0;
    }
  }
  Tensor dconcat = linear3_backward(wo_, dy_masked, n, t_len);

  Tensor dq({n, t_len, model_dim_});
  Tensor dk({n, t_len, model_dim_});
  Tensor dv({n, t_len, model_dim_});
  std::vector<double> dp(t_len), dlogit(t_len);

  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t h = 0; h < heads_; ++h) {
      const std::size_t off = h * head_dim_;
      for (std::size_t tq = 0; tq < t_len; ++tq) {
        if (!mask_[b * t_len + tq]) continue;
        const double* dout = dconcat.data() + (b * t_len + tq) * model_dim_ + off;
        const double* arow = attn_.data() + ((b * heads_ + h) * t_len + tq) * t_len;
        double dot_sum = 0.0;
        for (std::size_t tk = 0; tk < t_len; ++tk) {
          if (!mask_[b * t_len + tk]) {
            dp[tk] = 0.0;
            continue;
          }
          const double* vv = v_.data() + (b * t_len + tk) * model_dim_ + off;
          double* dvv = dv.data() + (b * t_len + tk) * model_dim_ + off;
          double acc = 0.0;
          for (std::size_t d = 0; d < head_dim_; ++d) {
            acc += dout[d] * vv[d];
            dvv[d] += arow[tk] * dout[d];
          }
          dp[tk] = acc;
          dot_sum += acc * arow[tk];
        }
        const double* qv = q_.data() + (b * t_len + tq) * model_dim_ + off;
        double* dqv = dq.data() + (b * t_len + tq) * model_dim_ + off;
        for (std::size_t tk = 0; tk < t_len; ++tk) {
          if (!mask_[b * t_len + tk]) continue;
          dlogit[tk] = arow[tk] * (dp[tk] - dot_sum);
          const double g = dlogit[tk] * scale;
          const double* kv = k_.data() + (b * t_len + tk) * model_dim_ + off;
          double* dkv = dk.data() + (b * t_len + tk) * model_dim_ + off;
          for (std::size_t d = 0; d < head_dim_; ++d) {
            dqv[d] += g * kv[d];
            dkv[d] += g * qv[d];
          }
        }
      }
    }
  }

  Tensor dx = linear3_backward(wq_, dq, n, t_len);
  Tensor dxk = linear3_backward(wk_, dk, n, t_len);
  Tensor dxv = linear3_backward(wv_, dv, n, t_len);
  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dxk[i] + dxv[i];
  return dx;
}

}  // namespace triad::nn
