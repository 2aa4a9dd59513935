#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <unordered_set>
#include <vector>

#include <Eigen/Dense>

#include "unifork/tensor.hpp"

namespace unifork {

namespace detail {
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

inline ConstMatMap view(const Tensor& t) {
  return ConstMatMap(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
inline MatMap view(Tensor& t) {
  return MatMap(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
inline MatMap view(std::vector<double>& g, std::size_t rows, std::size_t cols) {
  return MatMap(g.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
}  // namespace detail

// One record of the reverse-mode graph. Values are immutable once the node
// is built; only `grad` is written during backward.
struct Node {
  Tensor value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;
  const char* op = "leaf";

  std::vector<double>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
  void zero_grad() { grad.clear(); }
};

// Handle to a graph node. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  const Tensor& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }
  bool requires_grad() const { return node_->requires_grad; }
  Node& node() const { return *node_; }
  const std::shared_ptr<Node>& ptr() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

  // Gradient as a tensor of the value's shape (zeros when never touched).
  Tensor grad() const {
    if (node_->grad.size() != node_->value.size()) return Tensor(node_->value.shape());
    return Tensor(node_->value.shape(), node_->grad);
  }

 private:
  std::shared_ptr<Node> node_;
};

inline Var constant(Tensor t) {
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  return Var(std::move(n));
}

inline Var parameter(Tensor t) {
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  n->requires_grad = true;
  return Var(std::move(n));
}

// While alive, ops on this thread record no backward closures.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(enabled()) { enabled() = false; }
  ~NoGradGuard() { enabled() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
  static bool& enabled() {
    thread_local bool on = true;
    return on;
  }

 private:
  bool prev_;
};

namespace detail {
inline bool records(const Var& a) { return NoGradGuard::enabled() && a.requires_grad(); }

// Builds a node from its value and inputs; the backward closure is kept only
// when some input participates in differentiation.
inline Var make_node(Tensor value, std::vector<Var> inputs, const char* op,
                     std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = op;
  if (NoGradGuard::enabled())
    for (const auto& in : inputs) n->requires_grad = n->requires_grad || in.requires_grad();
  if (n->requires_grad) {
    n->inputs.reserve(inputs.size());
    for (auto& in : inputs) n->inputs.push_back(in.ptr());
    n->backward_fn = std::move(backward);
  }
  return Var(std::move(n));
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw DimensionError(msg);
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and linear algebra

inline Var matmul(const Var& a, const Var& b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  detail::require(av.rank() == 2 && bv.rank() == 2, "matmul expects rank-2 operands");
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  detail::require(bv.dim(0) == k, "matmul inner dimension mismatch: " + shape_str(av.shape()) + " x " +
                                      shape_str(bv.shape()));
  Tensor out({m, n});
  detail::view(out).noalias() = detail::view(av) * detail::view(bv);
  return detail::make_node(std::move(out), {a, b}, "matmul", [m, k, n](Node& self) {
    auto& A = *self.inputs[0];
    auto& B = *self.inputs[1];
    auto dC = detail::ConstMatMap(self.grad.data(), m, n);
    if (A.requires_grad) detail::view(A.grad_buffer(), m, k).noalias() += dC * detail::view(B.value).transpose();
    if (B.requires_grad) detail::view(B.grad_buffer(), k, n).noalias() += detail::view(A.value).transpose() * dC;
  });
}

inline Var add(const Var& a, const Var& b) {
  detail::require(a.shape() == b.shape(), "add shape mismatch: " + shape_str(a.shape()) + " vs " +
                                              shape_str(b.shape()));
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return detail::make_node(std::move(out), {a, b}, "add", [](Node& self) {
    for (int s = 0; s < 2; ++s) {
      auto& in = *self.inputs[s];
      if (!in.requires_grad) continue;
      auto& g = in.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::require(a.shape() == b.shape(), "mul shape mismatch");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return detail::make_node(std::move(out), {a, b}, "mul", [](Node& self) {
    auto& A = *self.inputs[0];
    auto& B = *self.inputs[1];
    if (A.requires_grad) {
      auto& g = A.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * B.value[i];
    }
    if (B.requires_grad) {
      auto& g = B.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * A.value[i];
    }
  });
}

inline Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (auto& v : out.storage()) v *= s;
  return detail::make_node(std::move(out), {a}, "scale", [s](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

// Adds a bias vector of length cols() to every row.
inline Var add_bias(const Var& x, const Var& bias) {
  const std::size_t n = x.cols();
  detail::require(bias.value().size() == n, "bias length does not match trailing dimension");
  Tensor out = x.value();
  const std::size_t rows = out.rows();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] += bias.value()[c];
  return detail::make_node(std::move(out), {x, bias}, "add_bias", [rows, n](Node& self) {
    auto& X = *self.inputs[0];
    auto& B = *self.inputs[1];
    if (X.requires_grad) {
      auto& g = X.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (B.requires_grad) {
      auto& g = B.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < n; ++c) g[c] += self.grad[r * n + c];
    }
  });
}

inline Var linear(const Var& x, const Var& weight, const Var& bias) { return add_bias(matmul(x, weight), bias); }

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return detail::make_node(Tensor::scalar(s), {a}, "sum", [](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

// Exact (erf) GELU.
inline Var gelu(const Var& a) {
  Tensor out = a.value();
  const bool record = detail::records(a);
  std::vector<double> cdf(record ? out.size() : 0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = out[i];
    const double c = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
    if (record) cdf[i] = c;
    out[i] = v * c;
  }
  return detail::make_node(std::move(out), {a}, "gelu", [cdf = std::move(cdf)](Node& self) {
    auto& in = *self.inputs[0];
    auto& g = in.grad_buffer();
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = in.value[i];
      g[i] += self.grad[i] * (cdf[i] + x * inv_sqrt_2pi * std::exp(-0.5 * x * x));
    }
  });
}

// Normalizes each row over the trailing dimension, then applies gain and bias.
inline Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5) {
  const std::size_t n = x.cols();
  const std::size_t rows = x.rows();
  detail::require(gain.value().size() == n && bias.value().size() == n, "layer_norm parameter size mismatch");
  Tensor out(x.shape());
  std::vector<double> xhat(rows * n), inv_std(rows);
  const auto& xv = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * n;
    double mu = 0.0;
    for (std::size_t c = 0; c < n; ++c) mu += row[c];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t c = 0; c < n; ++c) {
      const double h = (row[c] - mu) * is;
      xhat[r * n + c] = h;
      out[r * n + c] = h * gain.value()[c] + bias.value()[c];
    }
  }
  return detail::make_node(
      std::move(out), {x, gain, bias}, "layer_norm",
      [rows, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        auto& X = *self.inputs[0];
        auto& G = *self.inputs[1];
        auto& B = *self.inputs[2];
        const double* dy = self.grad.data();
        if (G.requires_grad) {
          auto& g = G.grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < n; ++c) g[c] += dy[r * n + c] * xhat[r * n + c];
        }
        if (B.requires_grad) {
          auto& g = B.grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < n; ++c) g[c] += dy[r * n + c];
        }
        if (X.requires_grad) {
          auto& g = X.grad_buffer();
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t r = 0; r < rows; ++r) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t c = 0; c < n; ++c) {
              const double dh = dy[r * n + c] * G.value[c];
              s1 += dh;
              s2 += dh * xhat[r * n + c];
            }
            for (std::size_t c = 0; c < n; ++c) {
              const double dh = dy[r * n + c] * G.value[c];
              g[r * n + c] += inv_std[r] * (dh - inv_n * s1 - xhat[r * n + c] * inv_n * s2);
            }
          }
        }
      });
}

// Row-wise softmax over the trailing dimension, stabilized by max subtraction.
inline Tensor softmax_rows_value(const Tensor& x) {
  Tensor out(x.shape());
  const std::size_t n = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const double* in = x.data() + r * n;
    double* o = out.data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c) z += (o[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < n; ++c) o[c] /= z;
  }
  return out;
}

inline Var softmax_rows(const Var& x) {
  detail::require(x.cols() >= 1, "softmax over empty dimension");
  Tensor out = softmax_rows_value(x.value());
  const std::size_t n = x.cols();
  return detail::make_node(out, {x}, "softmax_rows", [n, p = out](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t r = 0; r < p.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < n; ++c) dot += self.grad[r * n + c] * p[r * n + c];
      for (std::size_t c = 0; c < n; ++c) g[r * n + c] += p[r * n + c] * (self.grad[r * n + c] - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// Row routing

inline Var embedding_lookup(const Var& table, std::span<const int> ids) {
  const std::size_t c = table.cols();
  const std::size_t vocab = table.rows();
  Tensor out({ids.size(), c});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab)
      throw VocabularyError("embedding id " + std::to_string(ids[i]) + " outside table of " +
                            std::to_string(vocab));
    std::copy_n(table.value().data() + static_cast<std::size_t>(ids[i]) * c, c, out.data() + i * c);
  }
  return detail::make_node(std::move(out), {table}, "embedding_lookup",
                           [c, idx = std::vector<int>(ids.begin(), ids.end())](Node& self) {
                             auto& g = self.inputs[0]->grad_buffer();
                             for (std::size_t i = 0; i < idx.size(); ++i) {
                               double* dst = g.data() + static_cast<std::size_t>(idx[i]) * c;
                               const double* src = self.grad.data() + i * c;
                               for (std::size_t k = 0; k < c; ++k) dst[k] += src[k];
                             }
                           });
}

inline Var gather_rows(const Var& x, std::span<const std::size_t> rows) {
  const std::size_t c = x.cols();
  Tensor out({rows.size(), c});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    detail::require(rows[i] < x.rows(), "gather_rows index out of range");
    std::copy_n(x.value().data() + rows[i] * c, c, out.data() + i * c);
  }
  return detail::make_node(std::move(out), {x}, "gather_rows",
                           [c, idx = std::vector<std::size_t>(rows.begin(), rows.end())](Node& self) {
                             auto& g = self.inputs[0]->grad_buffer();
                             for (std::size_t i = 0; i < idx.size(); ++i) {
                               double* dst = g.data() + idx[i] * c;
                               const double* src = self.grad.data() + i * c;
                               for (std::size_t k = 0; k < c; ++k) dst[k] += src[k];
                             }
                           });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  detail::require(!parts.empty(), "concat_rows of nothing");
  const std::size_t c = parts.front().cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require(p.cols() == c, "concat_rows column mismatch");
    total += p.rows();
  }
  Tensor out({total, c});
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy_n(p.value().data(), p.value().size(), out.data() + off);
    off += p.value().size();
  }
  return detail::make_node(std::move(out), parts, "concat_rows", [](Node& self) {
    std::size_t off = 0;
    for (auto& in : self.inputs) {
      const std::size_t n = in->value.size();
      if (in->requires_grad) {
        auto& g = in->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[off + i];
      }
      off += n;
    }
  });
}

// Inverted dropout; identity when p == 0.
inline Var dropout(const Var& x, double p, std::mt19937_64& rng) {
  if (p <= 0.0) return x;
  detail::require(p < 1.0, "dropout probability must be < 1");
  std::vector<double> keep(x.value().size());
  const double s = 1.0 / (1.0 - p);
  for (auto& k : keep) k = (static_cast<double>(rng() >> 11) * 0x1.0p-53) < p ? 0.0 : s;
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= keep[i];
  return detail::make_node(std::move(out), {x}, "dropout", [keep = std::move(keep)](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * keep[i];
  });
}

// ---------------------------------------------------------------------------
// Attention

// Multi-head causal self-attention over packed sequences. `qkv` is
// [T x 3c] holding queries, keys and values side by side; `segments` lists
// the lengths of the independent sequences packed along the rows. Position t
// of a segment attends to positions <= t of the same segment only.
inline Var causal_attention(const Var& qkv, std::size_t n_heads, std::span<const std::size_t> segments) {
  using namespace detail;
  const std::size_t T = qkv.rows();
  require(qkv.cols() % 3 == 0, "qkv width must be a multiple of 3");
  const std::size_t c = qkv.cols() / 3;
  require(n_heads > 0 && c % n_heads == 0, "channels not divisible by head count");
  std::size_t total = 0;
  for (auto s : segments) total += s;
  require(total == T, "segment lengths do not cover the packed rows");
  const std::size_t dh = c / n_heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto stride = Eigen::OuterStride<>(static_cast<Eigen::Index>(3 * c));

  Tensor out({T, c});
  // Attention probabilities per (segment, head), stored consecutively.
  std::vector<double> probs;
  std::size_t prob_total = 0;
  for (auto s : segments) prob_total += s * s * n_heads;
  probs.resize(prob_total);

  const double* base = qkv.value().data();
  std::size_t row0 = 0, poff = 0;
  for (auto L : segments) {
    const auto Li = static_cast<Eigen::Index>(L);
    for (std::size_t h = 0; h < n_heads; ++h) {
      ConstStridedMap q(base + row0 * 3 * c + h * dh, Li, dh, stride);
      ConstStridedMap k(base + row0 * 3 * c + c + h * dh, Li, dh, stride);
      ConstStridedMap v(base + row0 * 3 * c + 2 * c + h * dh, Li, dh, stride);
      MatMap P(probs.data() + poff, Li, Li);
      P.noalias() = (q * k.transpose()) * inv_scale;
      for (Eigen::Index i = 0; i < Li; ++i) {
        double mx = P(i, 0);
        for (Eigen::Index j = 1; j <= i; ++j) mx = std::max(mx, P(i, j));
        double z = 0.0;
        for (Eigen::Index j = 0; j <= i; ++j) z += (P(i, j) = std::exp(P(i, j) - mx));
        for (Eigen::Index j = 0; j <= i; ++j) P(i, j) /= z;
        for (Eigen::Index j = i + 1; j < Li; ++j) P(i, j) = 0.0;
      }
      StridedMap o(out.data() + row0 * c + h * dh, Li, dh, Eigen::OuterStride<>(static_cast<Eigen::Index>(c)));
      o.noalias() = P * v;
      poff += L * L;
    }
    row0 += L;
  }

  return make_node(
      std::move(out), {qkv}, "causal_attention",
      [c, dh, n_heads, inv_scale, segs = std::vector<std::size_t>(segments.begin(), segments.end()),
       probs = std::move(probs)](Node& self) {
        auto& in = *self.inputs[0];
        auto& g = in.grad_buffer();
        const double* base = in.value.data();
        const auto stride3 = Eigen::OuterStride<>(static_cast<Eigen::Index>(3 * c));
        const auto stride1 = Eigen::OuterStride<>(static_cast<Eigen::Index>(c));
        RowMat dP, dS;
        std::size_t row0 = 0, poff = 0;
        for (auto L : segs) {
          const auto Li = static_cast<Eigen::Index>(L);
          for (std::size_t h = 0; h < n_heads; ++h) {
            ConstStridedMap q(base + row0 * 3 * c + h * dh, Li, dh, stride3);
            ConstStridedMap k(base + row0 * 3 * c + c + h * dh, Li, dh, stride3);
            ConstStridedMap v(base + row0 * 3 * c + 2 * c + h * dh, Li, dh, stride3);
            StridedMap dq(g.data() + row0 * 3 * c + h * dh, Li, dh, stride3);
            StridedMap dk(g.data() + row0 * 3 * c + c + h * dh, Li, dh, stride3);
            StridedMap dv(g.data() + row0 * 3 * c + 2 * c + h * dh, Li, dh, stride3);
            ConstStridedMap dO(self.grad.data() + row0 * c + h * dh, Li, dh, stride1);
            ConstMatMap P(probs.data() + poff, Li, Li);
            dv.noalias() += P.transpose() * dO;
            dP.noalias() = dO * v.transpose();
            dS.resize(Li, Li);
            for (Eigen::Index i = 0; i < Li; ++i) {
              double dot = 0.0;
              for (Eigen::Index j = 0; j <= i; ++j) dot += dP(i, j) * P(i, j);
              for (Eigen::Index j = 0; j <= i; ++j) dS(i, j) = P(i, j) * (dP(i, j) - dot) * inv_scale;
              for (Eigen::Index j = i + 1; j < Li; ++j) dS(i, j) = 0.0;
            }
            dq.noalias() += dS * k;
            dk.noalias() += dS.transpose() * q;
            poff += L * L;
          }
          row0 += L;
        }
      });
}

// ---------------------------------------------------------------------------
// Losses

// Sum over rows of weight[r] * -log softmax(logits[r])[target[r]]. Rows with
// weight exactly 0 are skipped and never read their target.
inline Var weighted_cross_entropy(const Var& logits, std::span<const int> targets, std::span<const double> weights) {
  const std::size_t rows = logits.rows(), V = logits.cols();
  detail::require(targets.size() == rows && weights.size() == rows, "cross_entropy row count mismatch");
  const auto& lv = logits.value();
  std::vector<std::size_t> active;
  std::vector<double> probs;  // softmax of active rows
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (weights[r] == 0.0) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= V)
      throw VocabularyError("cross_entropy target " + std::to_string(targets[r]) + " outside " +
                            std::to_string(V) + " classes");
    const double* row = lv.data() + r * V;
    const double mx = *std::max_element(row, row + V);
    double z = 0.0;
    const std::size_t off = probs.size();
    probs.resize(off + V);
    for (std::size_t c = 0; c < V; ++c) z += (probs[off + c] = std::exp(row[c] - mx));
    for (std::size_t c = 0; c < V; ++c) probs[off + c] /= z;
    loss += weights[r] * (std::log(z) + mx - row[targets[r]]);
    active.push_back(r);
  }
  return detail::make_node(
      Tensor::scalar(loss), {logits}, "cross_entropy",
      [V, active = std::move(active), probs = std::move(probs), tg = std::vector<int>(targets.begin(), targets.end()),
       w = std::vector<double>(weights.begin(), weights.end())](Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        const double up = self.grad[0];
        for (std::size_t a = 0; a < active.size(); ++a) {
          const std::size_t r = active[a];
          const double s = up * w[r];
          double* dst = g.data() + r * V;
          const double* p = probs.data() + a * V;
          for (std::size_t c = 0; c < V; ++c) dst[c] += s * p[c];
          dst[tg[r]] -= s;
        }
      });
}

// Mean negative log-likelihood over masked-in rows.
inline Var cross_entropy(const Var& logits, std::span<const int> targets, const std::vector<bool>& mask) {
  detail::require(mask.size() == logits.rows(), "cross_entropy mask length mismatch");
  const auto n = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
  if (n == 0) throw Error("cross_entropy with empty mask has no defined mean");
  std::vector<double> w(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) w[i] = mask[i] ? 1.0 / static_cast<double>(n) : 0.0;
  return weighted_cross_entropy(logits, targets, w);
}

// ---------------------------------------------------------------------------
// Backward

// Accumulates d(root)/d(x) into every reachable requires_grad node.
inline void backward(const Var& root) {
  if (root.value().size() != 1) throw DimensionError("backward requires a scalar root, got " + shape_str(root.shape()));
  if (!root.requires_grad()) return;
  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{&root.node(), 0}};
  seen.insert(&root.node());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->inputs.size()) {
      Node* child = n->inputs[i++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  root.node().grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  // Release intermediate gradients; leaves keep theirs.
  for (Node* n : order)
    if (n->backward_fn) n->grad.clear();
}

}  // namespace unifork
