#pragma once

// Minimal reverse-mode autodiff over dense row-major tensors. Every op
// records a closure that pulls the node's gradient back into its inputs;
// Tape::backward replays them in reverse creation order.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace trajtok::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

/// Trainable tensor with its accumulated gradient.
template <class T>
struct Parameter {
  std::string name;
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;

  std::size_t size() const { return value.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

/// Ordered, named collection of parameters. Addresses are stable.
template <class T>
class ParameterSet {
 public:
  Parameter<T>& add(const std::string& name, Shape shape, std::vector<T> value) {
    if (index_.contains(name)) throw std::invalid_argument("duplicate parameter " + name);
    if (value.size() != numel(shape)) throw std::invalid_argument("parameter " + name + " has wrong element count");
    auto p = std::make_unique<Parameter<T>>();
    p->name = name;
    p->shape = std::move(shape);
    p->value = std::move(value);
    p->grad.assign(p->value.size(), T(0));
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return *params_.back();
  }

  Parameter<T>& operator[](const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
    return *params_[it->second];
  }
  const Parameter<T>& operator[](const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
    return *params_[it->second];
  }
  bool contains(const std::string& name) const { return index_.contains(name); }

  std::size_t size() const { return params_.size(); }
  Parameter<T>& at(std::size_t i) { return *params_[i]; }
  const Parameter<T>& at(std::size_t i) const { return *params_[i]; }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <class T>
class Tape;

/// Handle to a node on a tape.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Shape& shape() const;
  const std::vector<T>& value() const;
  std::vector<T>& grad() const;
  std::size_t size() const { return value().size(); }
  /// Last dimension, i.e. row width when viewed as a matrix.
  std::size_t cols() const { return shape().back(); }
  std::size_t rows() const { return size() / cols(); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <class T>
class Tape {
 public:
  struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    std::function<void()> backward;
  };

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var<T> constant(Shape shape, std::vector<T> value) {
    if (numel(shape) != value.size()) throw std::invalid_argument("constant: shape/data mismatch");
    return push(std::move(shape), std::move(value));
  }

  /// Leaf for a parameter; created once per tape. Backward accumulates into
  /// the parameter's gradient.
  Var<T> param(Parameter<T>& p) {
    if (auto it = leaves_.find(&p); it != leaves_.end()) return Var<T>(this, it->second);
    Var<T> v = push(p.shape, p.value);
    leaves_[&p] = v.id();
    if (record_) {
      const std::size_t id = v.id();
      nodes_[id].backward = [this, id, &p] {
        const auto& g = nodes_[id].grad;
        for (std::size_t i = 0; i < g.size(); ++i) p.grad[i] += g[i];
      };
    }
    return v;
  }

  /// Appends a node; `backward` (if recording) receives the node id.
  Var<T> push(Shape shape, std::vector<T> value) {
    nodes_.push_back(Node{std::move(shape), std::move(value), {}, {}});
    return Var<T>(this, nodes_.size() - 1);
  }

  void on_backward(const Var<T>& out, std::function<void()> fn) {
    if (record_) nodes_[out.id()].backward = std::move(fn);
  }

  Node& node(std::size_t id) { return nodes_[id]; }

  /// Gradient buffer of a node, allocated on first use.
  std::vector<T>& grad(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
    return n.grad;
  }

  /// Seeds d(out)/d(out) = `seed` (ones if empty) and propagates.
  void backward(const Var<T>& out, std::vector<T> seed = {}) {
    if (!record_) throw std::logic_error("backward on a non-recording tape");
    auto& g = grad(out.id());
    if (seed.empty()) seed.assign(g.size(), T(1));
    if (seed.size() != g.size()) throw std::invalid_argument("backward seed has wrong size");
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
    for (std::size_t id = out.id() + 1; id-- > 0;) {
      auto& n = nodes_[id];
      if (n.backward && !n.grad.empty()) n.backward();
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  bool record_;
  std::deque<Node> nodes_;
  std::unordered_map<const Parameter<T>*, std::size_t> leaves_;
};

template <class T>
const Shape& Var<T>::shape() const {
  return tape_->node(id_).shape;
}
template <class T>
const std::vector<T>& Var<T>::value() const {
  return tape_->node(id_).value;
}
template <class T>
std::vector<T>& Var<T>::grad() const {
  return tape_->grad(id_);
}

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("add: size mismatch");
  auto& tape = a.tape();
  std::vector<T> out(a.value());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  auto r = tape.push(a.shape(), std::move(out));
  tape.on_backward(r, [a, b, r] {
    const auto& g = r.grad();
    auto& ga = a.grad();
    auto& gb = b.grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i];
      gb[i] += g[i];
    }
  });
  return r;
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  auto& tape = a.tape();
  std::vector<T> out(a.value());
  for (auto& v : out) v *= s;
  auto r = tape.push(a.shape(), std::move(out));
  tape.on_backward(r, [a, r, s] {
    const auto& g = r.grad();
    auto& ga = a.grad();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
  return r;
}

enum class Activation { Identity, Relu, Gelu };

template <class T>
T activate(Activation act, T x) {
  switch (act) {
    case Activation::Identity: return x;
    case Activation::Relu: return x > T(0) ? x : T(0);
    case Activation::Gelu: {
      const T c = T(0.7978845608028654);  // sqrt(2/pi)
      return T(0.5) * x * (T(1) + std::tanh(c * (x + T(0.044715) * x * x * x)));
    }
  }
  return x;
}

template <class T>
T activate_derivative(Activation act, T x) {
  switch (act) {
    case Activation::Identity: return T(1);
    case Activation::Relu: return x > T(0) ? T(1) : T(0);
    case Activation::Gelu: {
      const T c = T(0.7978845608028654);
      const T u = c * (x + T(0.044715) * x * x * x);
      const T th = std::tanh(u);
      const T du = c * (T(1) + T(3) * T(0.044715) * x * x);
      return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du;
    }
  }
  return T(1);
}

template <class T>
Var<T> activation(const Var<T>& a, Activation act) {
  if (act == Activation::Identity) return a;
  auto& tape = a.tape();
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = activate(act, a.value()[i]);
  auto r = tape.push(a.shape(), std::move(out));
  tape.on_backward(r, [a, r, act] {
    const auto& g = r.grad();
    auto& ga = a.grad();
    const auto& x = a.value();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * activate_derivative(act, x[i]);
  });
  return r;
}

// ---------------------------------------------------------------------------
// Dense layers

/// x viewed as [rows, in]; weight [out, in]; optional bias [out]. Returns [rows, out].
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>* bias = nullptr) {
  const std::size_t out_dim = weight.shape().at(0), in_dim = weight.shape().at(1);
  if (x.size() % in_dim != 0 || x.cols() != in_dim)
    throw std::invalid_argument("linear: input " + shape_string(x.shape()) + " vs weight " + shape_string(weight.shape()));
  if (bias && bias->size() != out_dim) throw std::invalid_argument("linear: bias size mismatch");
  const std::size_t rows = x.size() / in_dim;
  auto& tape = x.tape();
  std::vector<T> out(rows * out_dim);
  const auto& xv = x.value();
  const auto& wv = weight.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < out_dim; ++o) {
      T acc = bias ? bias->value()[o] : T(0);
      const T* xr = &xv[r * in_dim];
      const T* wr = &wv[o * in_dim];
      for (std::size_t i = 0; i < in_dim; ++i) acc += xr[i] * wr[i];
      out[r * out_dim + o] = acc;
    }
  Shape shape = x.shape();
  shape.back() = out_dim;
  auto res = tape.push(std::move(shape), std::move(out));
  const bool has_bias = bias != nullptr;
  const Var<T> b = has_bias ? *bias : Var<T>();
  tape.on_backward(res, [x, weight, b, has_bias, res, rows, in_dim, out_dim] {
    const auto& g = res.grad();
    auto& gx = x.grad();
    auto& gw = weight.grad();
    const auto& xv = x.value();
    const auto& wv = weight.value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t o = 0; o < out_dim; ++o) {
        const T go = g[r * out_dim + o];
        if (go == T(0)) continue;
        for (std::size_t i = 0; i < in_dim; ++i) {
          gx[r * in_dim + i] += go * wv[o * in_dim + i];
          gw[o * in_dim + i] += go * xv[r * in_dim + i];
        }
      }
    if (has_bias) {
      auto& gb = b.grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t o = 0; o < out_dim; ++o) gb[o] += g[r * out_dim + o];
    }
  });
  return res;
}

/// Layer normalization over the last dimension.
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  const std::size_t d = x.cols(), rows = x.rows();
  auto& tape = x.tape();
  std::vector<T> out(x.size()), xhat(x.size()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = &x.value()[r * d];
    T mean = 0, var = 0;
    for (std::size_t i = 0; i < d; ++i) mean += xr[i];
    mean /= T(d);
    for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var /= T(d);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t i = 0; i < d; ++i) {
      xhat[r * d + i] = (xr[i] - mean) * inv_std[r];
      out[r * d + i] = xhat[r * d + i] * gamma.value()[i] + beta.value()[i];
    }
  }
  auto res = tape.push(x.shape(), std::move(out));
  tape.on_backward(res, [x, gamma, beta, res, xhat = std::move(xhat), inv_std = std::move(inv_std), d, rows] {
    const auto& g = res.grad();
    auto& gx = x.grad();
    auto& gg = gamma.grad();
    auto& gb = beta.grad();
    for (std::size_t r = 0; r < rows; ++r) {
      T sum_dy = 0, sum_dy_xhat = 0;
      for (std::size_t i = 0; i < d; ++i) {
        const T dy = g[r * d + i] * gamma.value()[i];
        sum_dy += dy;
        sum_dy_xhat += dy * xhat[r * d + i];
        gg[i] += g[r * d + i] * xhat[r * d + i];
        gb[i] += g[r * d + i];
      }
      for (std::size_t i = 0; i < d; ++i) {
        const T dy = g[r * d + i] * gamma.value()[i];
        gx[r * d + i] += inv_std[r] / T(d) * (T(d) * dy - sum_dy - xhat[r * d + i] * sum_dy_xhat);
      }
    }
  });
  return res;
}

// ---------------------------------------------------------------------------
// Structural

/// Stacks equally sized inputs as the rows of a [n, d] matrix.
template <class T>
Var<T> stack_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("stack_rows: no inputs");
  const std::size_t d = parts.front().size();
  auto& tape = parts.front().tape();
  std::vector<T> out;
  out.reserve(parts.size() * d);
  for (const auto& p : parts) {
    if (p.size() != d) throw std::invalid_argument("stack_rows: size mismatch");
    out.insert(out.end(), p.value().begin(), p.value().end());
  }
  auto res = tape.push({parts.size(), d}, std::move(out));
  tape.on_backward(res, [parts, res, d] {
    const auto& g = res.grad();
    for (std::size_t k = 0; k < parts.size(); ++k) {
      auto& gp = parts[k].grad();
      for (std::size_t i = 0; i < d; ++i) gp[i] += g[k * d + i];
    }
  });
  return res;
}

/// Concatenates two matrices with the same row width along rows.
template <class T>
Var<T> concat_rows(const Var<T>& a, const Var<T>& b) {
  if (a.cols() != b.cols()) throw std::invalid_argument("concat_rows: width mismatch");
  auto& tape = a.tape();
  std::vector<T> out(a.value());
  out.insert(out.end(), b.value().begin(), b.value().end());
  auto res = tape.push({a.rows() + b.rows(), a.cols()}, std::move(out));
  tape.on_backward(res, [a, b, res] {
    const auto& g = res.grad();
    auto& ga = a.grad();
    auto& gb = b.grad();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[ga.size() + i];
  });
  return res;
}

/// Row r of a matrix as a [1, d] matrix.
template <class T>
Var<T> row(const Var<T>& x, std::size_t r) {
  const std::size_t d = x.cols();
  if (r >= x.rows()) throw std::out_of_range("row index");
  auto& tape = x.tape();
  std::vector<T> out(x.value().begin() + static_cast<std::ptrdiff_t>(r * d),
                     x.value().begin() + static_cast<std::ptrdiff_t>((r + 1) * d));
  auto res = tape.push({1, d}, std::move(out));
  tape.on_backward(res, [x, res, r, d] {
    const auto& g = res.grad();
    auto& gx = x.grad();
    for (std::size_t i = 0; i < d; ++i) gx[r * d + i] += g[i];
  });
  return res;
}

template <class T>
Var<T> mean_rows(const Var<T>& x) {
  const std::size_t d = x.cols(), n = x.rows();
  auto& tape = x.tape();
  std::vector<T> out(d, T(0));
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t i = 0; i < d; ++i) out[i] += x.value()[r * d + i];
  for (auto& v : out) v /= T(n);
  auto res = tape.push({1, d}, std::move(out));
  tape.on_backward(res, [x, res, n, d] {
    const auto& g = res.grad();
    auto& gx = x.grad();
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t i = 0; i < d; ++i) gx[r * d + i] += g[i] / T(n);
  });
  return res;
}

/// Rows of `table` [vocab, d] selected by `ids`.
template <class T>
Var<T> embedding(const Var<T>& table, const std::vector<std::size_t>& ids) {
  const std::size_t d = table.cols(), vocab = table.rows();
  auto& tape = table.tape();
  std::vector<T> out;
  out.reserve(ids.size() * d);
  for (auto id : ids) {
    if (id >= vocab) throw std::out_of_range("embedding id out of vocabulary");
    out.insert(out.end(), table.value().begin() + static_cast<std::ptrdiff_t>(id * d),
               table.value().begin() + static_cast<std::ptrdiff_t>((id + 1) * d));
  }
  auto res = tape.push({ids.size(), d}, std::move(out));
  tape.on_backward(res, [table, res, ids, d] {
    const auto& g = res.grad();
    auto& gt = table.grad();
    for (std::size_t k = 0; k < ids.size(); ++k)
      for (std::size_t i = 0; i < d; ++i) gt[ids[k] * d + i] += g[k * d + i];
  });
  return res;
}

/// Scales each row to unit L2 norm.
template <class T>
Var<T> l2_normalize_rows(const Var<T>& x, T eps = T(1e-12)) {
  const std::size_t d = x.cols(), n = x.rows();
  auto& tape = x.tape();
  std::vector<T> out(x.size()), norms(n);
  for (std::size_t r = 0; r < n; ++r) {
    T s = 0;
    for (std::size_t i = 0; i < d; ++i) s += x.value()[r * d + i] * x.value()[r * d + i];
    norms[r] = std::max(std::sqrt(s), eps);
    for (std::size_t i = 0; i < d; ++i) out[r * d + i] = x.value()[r * d + i] / norms[r];
  }
  auto res = tape.push(x.shape(), std::move(out));
  tape.on_backward(res, [x, res, norms = std::move(norms), n, d] {
    const auto& g = res.grad();
    const auto& y = res.value();
    auto& gx = x.grad();
    for (std::size_t r = 0; r < n; ++r) {
      T dot = 0;
      for (std::size_t i = 0; i < d; ++i) dot += g[r * d + i] * y[r * d + i];
      for (std::size_t i = 0; i < d; ++i) gx[r * d + i] += (g[r * d + i] - dot * y[r * d + i]) / norms[r];
    }
  });
  return res;
}

/// Scalar <x, w> against a constant weight vector.
template <class T>
Var<T> dot_constant(const Var<T>& x, std::vector<T> w) {
  if (w.size() != x.size()) throw std::invalid_argument("dot_constant: size mismatch");
  auto& tape = x.tape();
  T s = 0;
  for (std::size_t i = 0; i < w.size(); ++i) s += x.value()[i] * w[i];
  auto res = tape.push({1}, {s});
  tape.on_backward(res, [x, res, w = std::move(w)] {
    const T g = res.grad()[0];
    auto& gx = x.grad();
    for (std::size_t i = 0; i < w.size(); ++i) gx[i] += g * w[i];
  });
  return res;
}

template <class T>
Var<T> sum(const std::vector<Var<T>>& scalars) {
  if (scalars.empty()) throw std::invalid_argument("sum: no inputs");
  auto& tape = scalars.front().tape();
  T s = 0;
  for (const auto& v : scalars) s += v.value().at(0);
  auto res = tape.push({1}, {s});
  tape.on_backward(res, [scalars, res] {
    const T g = res.grad()[0];
    for (const auto& v : scalars) v.grad()[0] += g;
  });
  return res;
}

// ---------------------------------------------------------------------------
// Convolutional features

/// x [C, H, W]; weight [O, C, k, k]; bias [O]. Zero padding.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::size_t stride, std::size_t pad) {
  const auto& xs = x.shape();
  const auto& ws = weight.shape();
  if (xs.size() != 3 || ws.size() != 4 || ws[1] != xs[0] || ws[2] != ws[3])
    throw std::invalid_argument("conv2d: input " + shape_string(xs) + " vs weight " + shape_string(ws));
  const std::size_t C = xs[0], H = xs[1], W = xs[2], O = ws[0], K = ws[2];
  if (H + 2 * pad < K || W + 2 * pad < K) throw std::invalid_argument("conv2d: input smaller than kernel");
  const std::size_t OH = (H + 2 * pad - K) / stride + 1, OW = (W + 2 * pad - K) / stride + 1;
  auto& tape = x.tape();
  std::vector<T> out(O * OH * OW);
  const auto& xv = x.value();
  const auto& wv = weight.value();
  for (std::size_t o = 0; o < O; ++o) {
    T* plane = &out[o * OH * OW];
    std::fill_n(plane, OH * OW, bias.value()[o]);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t ky = 0; ky < K; ++ky)
        for (std::size_t kx = 0; kx < K; ++kx) {
          const T wgt = wv[((o * C + c) * K + ky) * K + kx];
          for (std::size_t oy = 0; oy < OH; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
            const T* xrow = &xv[(c * H + static_cast<std::size_t>(iy)) * W];
            T* orow = plane + oy * OW;
            for (std::size_t ox = 0; ox < OW; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
              orow[ox] += wgt * xrow[ix];
            }
          }
        }
  }
  auto res = tape.push({O, OH, OW}, std::move(out));
  tape.on_backward(res, [x, weight, bias, res, C, H, W, O, K, OH, OW, stride, pad] {
    const auto& g = res.grad();
    auto& gx = x.grad();
    auto& gw = weight.grad();
    auto& gb = bias.grad();
    const auto& xv = x.value();
    const auto& wv = weight.value();
    for (std::size_t o = 0; o < O; ++o) {
      const T* gplane = &g[o * OH * OW];
      for (std::size_t i = 0; i < OH * OW; ++i) gb[o] += gplane[i];
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t ky = 0; ky < K; ++ky)
          for (std::size_t kx = 0; kx < K; ++kx) {
            const std::size_t widx = ((o * C + c) * K + ky) * K + kx;
            const T wgt = wv[widx];
            T acc = 0;
            for (std::size_t oy = 0; oy < OH; ++oy) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
              const std::size_t xrow = (c * H + static_cast<std::size_t>(iy)) * W;
              for (std::size_t ox = 0; ox < OW; ++ox) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                const T go = gplane[oy * OW + ox];
                acc += go * xv[xrow + static_cast<std::size_t>(ix)];
                gx[xrow + static_cast<std::size_t>(ix)] += go * wgt;
              }
            }
            gw[widx] += acc;
          }
    }
  });
  return res;
}

/// Half-pixel bilinear interpolation weights for resizing `in` samples to `out`.
struct LinearTaps {
  std::vector<std::size_t> lo, hi;
  std::vector<double> frac;
};

inline LinearTaps bilinear_taps(std::size_t in, std::size_t out) {
  LinearTaps t;
  const double s = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * s - 0.5;
    if (src < 0) src = 0;
    auto lo = static_cast<std::size_t>(src);
    if (lo > in - 1) lo = in - 1;
    const std::size_t hi = std::min(lo + 1, in - 1);
    t.lo.push_back(lo);
    t.hi.push_back(hi);
    t.frac.push_back(src - static_cast<double>(lo));
  }
  return t;
}

/// x [C, h, w] -> [C, out, out], bilinear with half-pixel centres.
template <class T>
Var<T> resize_bilinear(const Var<T>& x, std::size_t out_side) {
  const auto& s = x.shape();
  if (s.size() != 3) throw std::invalid_argument("resize_bilinear: expects [C, H, W]");
  const std::size_t C = s[0], H = s[1], W = s[2];
  if (H == out_side && W == out_side) return x;
  const auto ty = bilinear_taps(H, out_side), tx = bilinear_taps(W, out_side);
  const std::size_t G = out_side;
  auto& tape = x.tape();
  std::vector<T> out(C * G * G);
  const auto& xv = x.value();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < G; ++y)
      for (std::size_t xo = 0; xo < G; ++xo) {
        const T fy = T(ty.frac[y]), fx = T(tx.frac[xo]);
        const T* p = &xv[c * H * W];
        out[(c * G + y) * G + xo] = (T(1) - fy) * ((T(1) - fx) * p[ty.lo[y] * W + tx.lo[xo]] + fx * p[ty.lo[y] * W + tx.hi[xo]]) +
                                    fy * ((T(1) - fx) * p[ty.hi[y] * W + tx.lo[xo]] + fx * p[ty.hi[y] * W + tx.hi[xo]]);
      }
  auto res = tape.push({C, G, G}, std::move(out));
  tape.on_backward(res, [x, res, ty, tx, C, H, W, G] {
    const auto& g = res.grad();
    auto& gx = x.grad();
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < G; ++y)
        for (std::size_t xo = 0; xo < G; ++xo) {
          const T go = g[(c * G + y) * G + xo];
          const T fy = T(ty.frac[y]), fx = T(tx.frac[xo]);
          T* p = &gx[c * H * W];
          p[ty.lo[y] * W + tx.lo[xo]] += go * (T(1) - fy) * (T(1) - fx);
          p[ty.lo[y] * W + tx.hi[xo]] += go * (T(1) - fy) * fx;
          p[ty.hi[y] * W + tx.lo[xo]] += go * fy * (T(1) - fx);
          p[ty.hi[y] * W + tx.hi[xo]] += go * fy * fx;
        }
  });
  return res;
}

/// Masked average of a feature map: sum(M * F) / (sum(M) + eps).
/// features [D, G, G]; mask has G*G entries. Returns [1, D].
template <class T>
Var<T> mask_pool(const Var<T>& features, std::span<const T> mask, T eps) {
  const auto& s = features.shape();
  if (s.size() != 3 || s[1] * s[2] != mask.size()) throw std::invalid_argument("mask_pool: mask does not match feature grid");
  const std::size_t D = s[0], cells = mask.size();
  T area = 0;
  for (auto m : mask) area += m;
  const T denom = area + eps;
  auto& tape = features.tape();
  std::vector<T> out(D, T(0));
  const auto& fv = features.value();
  for (std::size_t d = 0; d < D; ++d) {
    T acc = 0;
    for (std::size_t i = 0; i < cells; ++i) acc += mask[i] * fv[d * cells + i];
    out[d] = acc / denom;
  }
  auto res = tape.push({1, D}, std::move(out));
  tape.on_backward(res, [features, res, m = std::vector<T>(mask.begin(), mask.end()), denom, D, cells] {
    const auto& g = res.grad();
    auto& gf = features.grad();
    for (std::size_t d = 0; d < D; ++d)
      for (std::size_t i = 0; i < cells; ++i) gf[d * cells + i] += g[d] * m[i] / denom;
  });
  return res;
}

// ---------------------------------------------------------------------------
// Attention

/// Rotates channel pairs (2i, 2i+1) inside each head of row r by
/// positions[r] * base^(-2i/head_dim).
template <class T>
Var<T> rotary(const Var<T>& x, const std::vector<T>& positions, std::size_t heads, T base = T(10000)) {
  const std::size_t d = x.cols(), n = x.rows();
  if (positions.size() != n) throw std::invalid_argument("rotary: one position per row required");
  if (d % heads != 0 || (d / heads) % 2 != 0) throw std::invalid_argument("rotary: head width must be even");
  const std::size_t hd = d / heads;
  std::vector<T> cosv(n * hd / 2), sinv(n * hd / 2);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t i = 0; i < hd / 2; ++i) {
      const T angle = positions[r] * std::pow(base, -T(2 * i) / T(hd));
      cosv[r * hd / 2 + i] = std::cos(angle);
      sinv[r * hd / 2 + i] = std::sin(angle);
    }
  auto& tape = x.tape();
  std::vector<T> out(x.size());
  const auto& xv = x.value();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < hd / 2; ++i) {
        const std::size_t a = r * d + h * hd + 2 * i;
        const T c = cosv[r * hd / 2 + i], s = sinv[r * hd / 2 + i];
        out[a] = xv[a] * c - xv[a + 1] * s;
        out[a + 1] = xv[a] * s + xv[a + 1] * c;
      }
  auto res = tape.push(x.shape(), std::move(out));
  tape.on_backward(res, [x, res, cosv = std::move(cosv), sinv = std::move(sinv), n, heads, hd, d] {
    const auto& g = res.grad();
    auto& gx = x.grad();
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < hd / 2; ++i) {
          const std::size_t a = r * d + h * hd + 2 * i;
          const T c = cosv[r * hd / 2 + i], s = sinv[r * hd / 2 + i];
          gx[a] += g[a] * c + g[a + 1] * s;
          gx[a + 1] += -g[a] * s + g[a + 1] * c;
        }
  });
  return res;
}

/// Multi-head scaled dot-product attention. q [Lq, D], k/v [Lk, D].
/// If `weights_out` is given it receives the [heads, Lq, Lk] softmax weights.
template <class T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t heads,
                 std::vector<T>* weights_out = nullptr) {
  const std::size_t D = q.cols(), Lq = q.rows(), Lk = k.rows();
  if (k.cols() != D || v.cols() != D || v.rows() != Lk) throw std::invalid_argument("attention: shape mismatch");
  if (Lk == 0) throw std::invalid_argument("attention: empty key sequence");
  if (D % heads != 0) throw std::invalid_argument("attention: width not divisible by heads");
  const std::size_t hd = D / heads;
  const T inv_sqrt = T(1) / std::sqrt(T(hd));
  auto& tape = q.tape();
  std::vector<T> probs(heads * Lq * Lk), out(Lq * D, T(0));
  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < Lq; ++i) {
      T* p = &probs[(h * Lq + i) * Lk];
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < Lk; ++j) {
        T s = 0;
        for (std::size_t c = 0; c < hd; ++c) s += qv[i * D + h * hd + c] * kv[j * D + h * hd + c];
        p[j] = s * inv_sqrt;
        mx = std::max(mx, p[j]);
      }
      T z = 0;
      for (std::size_t j = 0; j < Lk; ++j) z += (p[j] = std::exp(p[j] - mx));
      for (std::size_t j = 0; j < Lk; ++j) p[j] /= z;
      for (std::size_t j = 0; j < Lk; ++j)
        for (std::size_t c = 0; c < hd; ++c) out[i * D + h * hd + c] += p[j] * vv[j * D + h * hd + c];
    }
  if (weights_out) *weights_out = probs;
  auto res = tape.push({Lq, D}, std::move(out));
  tape.on_backward(res, [q, k, v, res, probs = std::move(probs), heads, hd, D, Lq, Lk, inv_sqrt] {
    const auto& g = res.grad();
    auto& gq = q.grad();
    auto& gk = k.grad();
    auto& gv = v.grad();
    const auto& qv = q.value();
    const auto& kv = k.value();
    const auto& vv = v.value();
    std::vector<T> dp(Lk);
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < Lq; ++i) {
        const T* p = &probs[(h * Lq + i) * Lk];
        T weighted = 0;
        for (std::size_t j = 0; j < Lk; ++j) {
          T s = 0;
          for (std::size_t c = 0; c < hd; ++c) {
            const T go = g[i * D + h * hd + c];
            s += go * vv[j * D + h * hd + c];
            gv[j * D + h * hd + c] += p[j] * go;
          }
          dp[j] = s;
          weighted += p[j] * s;
        }
        for (std::size_t j = 0; j < Lk; ++j) {
          const T ds = p[j] * (dp[j] - weighted) * inv_sqrt;
          for (std::size_t c = 0; c < hd; ++c) {
            gq[i * D + h * hd + c] += ds * kv[j * D + h * hd + c];
            gk[j * D + h * hd + c] += ds * qv[i * D + h * hd + c];
          }
        }
      }
  });
  return res;
}

// ---------------------------------------------------------------------------
// Initialisation

template <class T>
std::vector<T> normal_values(std::size_t n, T stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return v;
}

}  // namespace trajtok::ad
