#pragma once

// Small CPU tensor/layer toolkit with hand-written backward passes.
//
// Layers cache their input when called with `record = true`; a later
// backward() consumes that cache. Calls with `record = false` are pure
// inference and leave any cache untouched, which is how stop-gradient
// branches are evaluated. Everything is templated on the scalar type so the
// same code runs in float for training and in double for gradient checks.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "customtext/errors.hpp"

namespace customtext::nn {

template <typename T>
struct Tensor {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;
  std::vector<T> data;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_, T fill = T(0))
      : n(n_), c(c_), h(h_), w(w_), data(static_cast<std::size_t>(n_) * c_ * h_ * w_, fill) {}

  std::size_t size() const { return data.size(); }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  std::size_t sample_size() const { return static_cast<std::size_t>(c) * h * w; }
  T* sample(int i) { return data.data() + sample_size() * i; }
  const T* sample(int i) const { return data.data() + sample_size() * i; }
  T& operator()(int i, int ch, int y, int x) { return data[((static_cast<std::size_t>(i) * c + ch) * h + y) * w + x]; }
  const T& operator()(int i, int ch, int y, int x) const {
    return data[((static_cast<std::size_t>(i) * c + ch) * h + y) * w + x];
  }
  bool same_shape(const Tensor& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }
  bool empty() const { return data.empty(); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(n, c, h, w);
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (!a.same_shape(b)) throw ContractError(std::string(what) + ": tensor shape mismatch");
}

template <typename T>
struct Param {
  std::string name;
  std::vector<int> shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool frozen = false;

  Param() = default;
  Param(std::string n, std::vector<int> s) : name(std::move(n)), shape(std::move(s)) {
    std::size_t count = 1;
    for (int d : shape) count *= static_cast<std::size_t>(d);
    value.assign(count, T(0));
    grad.assign(count, T(0));
  }
  std::size_t size() const { return value.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

template <typename T>
using ParamList = std::vector<Param<T>*>;

template <typename T>
void zero_grads(const ParamList<T>& params) {
  for (auto* p : params) p->zero_grad();
}

template <typename T>
void set_frozen(const ParamList<T>& params, bool frozen) {
  for (auto* p : params) p->frozen = frozen;
}

enum class Init { Default, Zero };

template <typename T>
void init_uniform(Param<T>& p, T bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-static_cast<double>(bound), static_cast<double>(bound));
  for (auto& v : p.value) v = static_cast<T>(dist(rng));
}

// ---------------------------------------------------------------------------
// Convolution (square kernel, zero padding k/2, arbitrary stride).
// ---------------------------------------------------------------------------

template <typename T>
class Conv2d {
 public:
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MapMat = Eigen::Map<Mat>;
  using CMapMat = Eigen::Map<const Mat>;

  Conv2d() = default;
  Conv2d(const std::string& name, int in_ch, int out_ch, int kernel, int stride, Init init, std::mt19937_64& rng)
      : weight(name + ".weight", {out_ch, in_ch * kernel * kernel}),
        bias(name + ".bias", {out_ch}),
        in_(in_ch),
        out_(out_ch),
        k_(kernel),
        s_(stride) {
    if (kernel % 2 == 0) throw ContractError("conv kernel must be odd");
    if (init == Init::Default) {
      const T bound = static_cast<T>(std::sqrt(3.0 / (in_ch * kernel * kernel)));
      init_uniform(weight, bound, rng);
      init_uniform(bias, static_cast<T>(0.1) * bound, rng);
    }
  }

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  int kernel() const { return k_; }
  int stride() const { return s_; }
  int out_size(int n) const { return (n + 2 * (k_ / 2) - k_) / s_ + 1; }

  Tensor<T> forward(const Tensor<T>& x, bool record) {
    Tensor<T> y = run(x, cols_);
    if (record) cache_ = x;
    return y;
  }

  // Pure inference; safe to call concurrently on a shared layer.
  Tensor<T> infer(const Tensor<T>& x) const {
    std::vector<T> scratch;
    return run(x, scratch);
  }

  // Returns dL/dx (empty when need_input_grad is false); accumulates parameter
  // gradients unless the parameters are frozen.
  Tensor<T> backward(const Tensor<T>& dy, bool need_input_grad = true) {
    if (cache_.empty()) throw ContractError(weight.name + ": backward without a recorded forward");
    const Tensor<T>& x = cache_;
    const int ho = out_size(x.h), wo = out_size(x.w);
    if (dy.n != x.n || dy.c != out_ || dy.h != ho || dy.w != wo) throw ContractError(weight.name + ": bad dy shape");
    const bool param_grads = !weight.frozen;
    Tensor<T> dx;
    if (need_input_grad) dx = Tensor<T>(x.n, x.c, x.h, x.w);
    CMapMat W(weight.value.data(), out_, in_ * k_ * k_);
    MapMat dW(weight.grad.data(), out_, in_ * k_ * k_);
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> db(bias.grad.data(), out_);
    for (int i = 0; i < x.n; ++i) {
      CMapMat dY(dy.sample(i), out_, ho * wo);
      if (pointwise()) {
        CMapMat X(x.sample(i), in_, x.h * x.w);
        if (param_grads) {
          dW.noalias() += dY * X.transpose();
          db += dY.rowwise().sum();
        }
        if (need_input_grad) MapMat(dx.sample(i), in_, x.h * x.w).noalias() = W.transpose() * dY;
      } else {
        if (param_grads) {
          im2col(x.sample(i), x.h, x.w, ho, wo, cols_);
          dW.noalias() += dY * CMapMat(cols_.data(), in_ * k_ * k_, ho * wo).transpose();
          db += dY.rowwise().sum();
        }
        if (need_input_grad) {
          dcols_.resize(static_cast<std::size_t>(in_) * k_ * k_ * ho * wo);
          MapMat dC(dcols_.data(), in_ * k_ * k_, ho * wo);
          dC.noalias() = W.transpose() * dY;
          col2im(dcols_.data(), dx.sample(i), x.h, x.w, ho, wo);
        }
      }
    }
    return dx;
  }

  void clear_cache() { cache_ = Tensor<T>(); }
  void collect(ParamList<T>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }

  Param<T> weight;
  Param<T> bias;

 private:
  bool pointwise() const { return k_ == 1 && s_ == 1; }

  Tensor<T> run(const Tensor<T>& x, std::vector<T>& cols) const {
    if (x.c != in_) {
      throw ContractError(weight.name + ": expected " + std::to_string(in_) + " input channels, got " +
                          std::to_string(x.c));
    }
    const int ho = out_size(x.h), wo = out_size(x.w);
    Tensor<T> y(x.n, out_, ho, wo);
    CMapMat W(weight.value.data(), out_, in_ * k_ * k_);
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> b(bias.value.data(), out_);
    for (int i = 0; i < x.n; ++i) {
      MapMat Y(y.sample(i), out_, ho * wo);
      if (pointwise()) {
        Y.noalias() = W * CMapMat(x.sample(i), in_, x.h * x.w);
      } else {
        im2col(x.sample(i), x.h, x.w, ho, wo, cols);
        Y.noalias() = W * CMapMat(cols.data(), in_ * k_ * k_, ho * wo);
      }
      Y.colwise() += b;
    }
    return y;
  }


  void im2col(const T* src, int h, int w, int ho, int wo, std::vector<T>& cols) const {
    const int pad = k_ / 2;
    cols.resize(static_cast<std::size_t>(in_) * k_ * k_ * ho * wo);
    T* dst = cols.data();
    for (int ch = 0; ch < in_; ++ch) {
      const T* plane = src + static_cast<std::size_t>(ch) * h * w;
      for (int ky = 0; ky < k_; ++ky) {
        for (int kx = 0; kx < k_; ++kx) {
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * s_ + ky - pad;
            if (iy < 0 || iy >= h) {
              std::fill(dst, dst + wo, T(0));
              dst += wo;
              continue;
            }
            const T* row = plane + static_cast<std::size_t>(iy) * w;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * s_ + kx - pad;
              *dst++ = (ix >= 0 && ix < w) ? row[ix] : T(0);
            }
          }
        }
      }
    }
  }

  void col2im(const T* cols, T* dst, int h, int w, int ho, int wo) const {
    const int pad = k_ / 2;
    for (int ch = 0; ch < in_; ++ch) {
      T* plane = dst + static_cast<std::size_t>(ch) * h * w;
      for (int ky = 0; ky < k_; ++ky) {
        for (int kx = 0; kx < k_; ++kx) {
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * s_ + ky - pad;
            if (iy < 0 || iy >= h) {
              cols += wo;
              continue;
            }
            T* row = plane + static_cast<std::size_t>(iy) * w;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * s_ + kx - pad;
              if (ix >= 0 && ix < w) row[ix] += *cols;
              ++cols;
            }
          }
        }
      }
    }
  }

  int in_ = 0, out_ = 0, k_ = 1, s_ = 1;
  Tensor<T> cache_;
  std::vector<T> cols_;
  std::vector<T> dcols_;
};

// ---------------------------------------------------------------------------
// Pointwise activations.
// ---------------------------------------------------------------------------

template <typename T>
inline T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

template <typename T>
class SiLU {
 public:
  static Tensor<T> apply(const Tensor<T>& x) {
    Tensor<T> y(x.n, x.c, x.h, x.w);
    for (std::size_t i = 0; i < x.data.size(); ++i) y.data[i] = x.data[i] * sigmoid(x.data[i]);
    return y;
  }
  Tensor<T> forward(const Tensor<T>& x, bool record) {
    if (record) cache_ = x;
    return apply(x);
  }
  Tensor<T> backward(const Tensor<T>& dy) {
    if (cache_.empty()) throw ContractError("silu: backward without a recorded forward");
    require_same_shape(dy, cache_, "silu backward");
    Tensor<T> dx(dy.n, dy.c, dy.h, dy.w);
    for (std::size_t i = 0; i < dy.data.size(); ++i) {
      const T x = cache_.data[i];
      const T s = sigmoid(x);
      dx.data[i] = dy.data[i] * s * (T(1) + x * (T(1) - s));
    }
    return dx;
  }
  void clear_cache() { cache_ = Tensor<T>(); }

 private:
  Tensor<T> cache_;
};

// ---------------------------------------------------------------------------
// Resampling and tensor plumbing (stateless).
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& x, int factor) {
  Tensor<T> y(x.n, x.c, x.h * factor, x.w * factor);
  for (int i = 0; i < x.n; ++i)
    for (int ch = 0; ch < x.c; ++ch)
      for (int yy = 0; yy < y.h; ++yy)
        for (int xx = 0; xx < y.w; ++xx) y(i, ch, yy, xx) = x(i, ch, yy / factor, xx / factor);
  return y;
}

template <typename T>
Tensor<T> upsample_nearest_backward(const Tensor<T>& dy, int factor) {
  Tensor<T> dx(dy.n, dy.c, dy.h / factor, dy.w / factor);
  for (int i = 0; i < dy.n; ++i)
    for (int ch = 0; ch < dy.c; ++ch)
      for (int yy = 0; yy < dy.h; ++yy)
        for (int xx = 0; xx < dy.w; ++xx) dx(i, ch, yy / factor, xx / factor) += dy(i, ch, yy, xx);
  return dx;
}

template <typename T>
Tensor<T> avg_pool(const Tensor<T>& x, int factor) {
  if (x.h % factor || x.w % factor) throw ContractError("avg_pool: size not divisible by factor");
  Tensor<T> y(x.n, x.c, x.h / factor, x.w / factor);
  const T scale = T(1) / static_cast<T>(factor * factor);
  for (int i = 0; i < x.n; ++i)
    for (int ch = 0; ch < x.c; ++ch)
      for (int yy = 0; yy < y.h; ++yy)
        for (int xx = 0; xx < y.w; ++xx) {
          T s = 0;
          for (int dy = 0; dy < factor; ++dy)
            for (int dx = 0; dx < factor; ++dx) s += x(i, ch, yy * factor + dy, xx * factor + dx);
          y(i, ch, yy, xx) = s * scale;
        }
  return y;
}

template <typename T>
Tensor<T> avg_pool_backward(const Tensor<T>& dy, int factor) {
  Tensor<T> dx(dy.n, dy.c, dy.h * factor, dy.w * factor);
  const T scale = T(1) / static_cast<T>(factor * factor);
  for (int i = 0; i < dx.n; ++i)
    for (int ch = 0; ch < dx.c; ++ch)
      for (int yy = 0; yy < dx.h; ++yy)
        for (int xx = 0; xx < dx.w; ++xx) dx(i, ch, yy, xx) = dy(i, ch, yy / factor, xx / factor) * scale;
  return dx;
}

template <typename T>
Tensor<T> concat_channels(const std::vector<const Tensor<T>*>& parts) {
  if (parts.empty()) throw ContractError("concat of nothing");
  const auto& first = *parts.front();
  int channels = 0;
  for (const auto* p : parts) {
    if (p->n != first.n || p->h != first.h || p->w != first.w) throw ContractError("concat: spatial mismatch");
    channels += p->c;
  }
  Tensor<T> out(first.n, channels, first.h, first.w);
  for (int i = 0; i < first.n; ++i) {
    T* dst = out.sample(i);
    for (const auto* p : parts) {
      std::copy(p->sample(i), p->sample(i) + p->sample_size(), dst);
      dst += p->sample_size();
    }
  }
  return out;
}

// Channel range [begin, begin+count) of x.
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int begin, int count) {
  if (begin < 0 || begin + count > x.c) throw ContractError("slice_channels out of range");
  Tensor<T> out(x.n, count, x.h, x.w);
  for (int i = 0; i < x.n; ++i) {
    const T* src = x.sample(i) + static_cast<std::size_t>(begin) * x.plane();
    std::copy(src, src + out.sample_size(), out.sample(i));
  }
  return out;
}

// Sample i of a batch as a batch of one.
template <typename T>
Tensor<T> slice_batch(const Tensor<T>& x, int i) {
  if (i < 0 || i >= x.n) throw ContractError("slice_batch out of range");
  Tensor<T> out(1, x.c, x.h, x.w);
  std::copy(x.sample(i), x.sample(i) + x.sample_size(), out.data.begin());
  return out;
}

template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

template <typename T>
Tensor<T> add(Tensor<T> a, const Tensor<T>& b) {
  add_inplace(a, b);
  return a;
}

// ---------------------------------------------------------------------------
// Embedding of integer index maps into channel planes.
// ---------------------------------------------------------------------------

struct IndexMap {
  int n = 0, h = 0, w = 0;
  std::vector<std::uint8_t> data;
  IndexMap() = default;
  IndexMap(int n_, int h_, int w_) : n(n_), h(h_), w(w_), data(static_cast<std::size_t>(n_) * h_ * w_, 0) {}
  std::uint8_t& operator()(int i, int y, int x) { return data[(static_cast<std::size_t>(i) * h + y) * w + x]; }
  std::uint8_t operator()(int i, int y, int x) const { return data[(static_cast<std::size_t>(i) * h + y) * w + x]; }
};

template <typename T>
class Embedding {
 public:
  Embedding() = default;
  Embedding(const std::string& name, int count, int dim, std::mt19937_64& rng)
      : table(name + ".table", {count, dim}), count_(count), dim_(dim) {
    init_uniform(table, static_cast<T>(1.0), rng);
  }
  int dim() const { return dim_; }

  Tensor<T> forward(const IndexMap& idx, bool record) {
    if (record) cache_ = idx;
    return infer(idx);
  }
  Tensor<T> infer(const IndexMap& idx) const {
    Tensor<T> y(idx.n, dim_, idx.h, idx.w);
    for (int i = 0; i < idx.n; ++i)
      for (int yy = 0; yy < idx.h; ++yy)
        for (int xx = 0; xx < idx.w; ++xx) {
          const int k = idx(i, yy, xx);
          if (k >= count_) throw ContractError(table.name + ": index out of range");
          for (int d = 0; d < dim_; ++d) y(i, d, yy, xx) = table.value[static_cast<std::size_t>(k) * dim_ + d];
        }
    return y;
  }
  void backward(const Tensor<T>& dy) {
    if (table.frozen) return;
    const IndexMap& idx = cache_;
    if (dy.n != idx.n || dy.h != idx.h || dy.w != idx.w) throw ContractError(table.name + ": bad dy shape");
    for (int i = 0; i < idx.n; ++i)
      for (int yy = 0; yy < idx.h; ++yy)
        for (int xx = 0; xx < idx.w; ++xx) {
          const int k = idx(i, yy, xx);
          for (int d = 0; d < dim_; ++d) table.grad[static_cast<std::size_t>(k) * dim_ + d] += dy(i, d, yy, xx);
        }
  }
  void collect(ParamList<T>& out) { out.push_back(&table); }

  Param<T> table;

 private:
  int count_ = 0, dim_ = 0;
  IndexMap cache_;
};

// ---------------------------------------------------------------------------
// Adam.
// ---------------------------------------------------------------------------

template <typename T>
class Adam {
 public:
  explicit Adam(ParamList<T> params, double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    for (auto* p : params_) {
      m_.emplace_back(p->size(), 0.0);
      v_.emplace_back(p->size(), 0.0);
    }
  }

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

  // Scales gradients so their global L2 norm is at most max_norm; returns the
  // pre-clip norm.
  double clip_grad_norm(double max_norm) {
    double sq = 0;
    for (auto* p : params_) {
      if (p->frozen) continue;
      for (T g : p->grad) sq += static_cast<double>(g) * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0) {
      const T s = static_cast<T>(max_norm / norm);
      for (auto* p : params_)
        if (!p->frozen)
          for (auto& g : p->grad) g *= s;
    }
    return norm;
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, t_);
    const double c2 = 1.0 - std::pow(b2_, t_);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto* p = params_[k];
      if (p->frozen) continue;
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < p->size(); ++i) {
        const double g = p->grad[i];
        m[i] = b1_ * m[i] + (1 - b1_) * g;
        v[i] = b2_ * v[i] + (1 - b2_) * g * g;
        p->value[i] -= static_cast<T>(lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_));
      }
    }
  }

 private:
  ParamList<T> params_;
  double lr_, b1_, b2_, eps_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Copies values between structurally identical parameter lists (e.g. float
// model -> double model for gradient checks).
template <typename A, typename B>
void copy_values(const ParamList<A>& from, const ParamList<B>& to) {
  if (from.size() != to.size()) throw ContractError("copy_values: parameter count mismatch");
  for (std::size_t k = 0; k < from.size(); ++k) {
    if (from[k]->size() != to[k]->size()) throw ContractError("copy_values: size mismatch for " + from[k]->name);
    for (std::size_t i = 0; i < from[k]->size(); ++i) to[k]->value[i] = static_cast<B>(from[k]->value[i]);
  }
}

template <typename T>
std::size_t count_values(const ParamList<T>& params) {
  std::size_t n = 0;
  for (auto* p : params) n += p->size();
  return n;
}

}  // namespace customtext::nn
