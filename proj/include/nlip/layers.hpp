#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "nlip/param_store.hpp"

// Fixed-graph building blocks with explicit backward passes. Activations are
// row-per-token matrices; every backward accumulates into a Gradients set and
// returns the gradient with respect to its input.

namespace nlip {

/// y = x W^T + b with W stored out x in.
struct Linear {
  ParamId weight;
  ParamId bias;
  bool has_bias = true;

  static Linear create(ParamStore& store, const std::string& name, Eigen::Index in, Eigen::Index out,
                       std::uint64_t seed, bool with_bias = true) {
    Linear l;
    l.weight = store.add_uniform(name + ".weight", out, in, in, seed, true);
    l.has_bias = with_bias;
    if (with_bias) l.bias = store.add_constant(name + ".bias", 1, out, 0.0, false);
    return l;
  }

  Matrix forward(const ParamStore& store, const Matrix& x) const {
    Matrix y = x * store[weight].transpose();
    if (has_bias) y.rowwise() += store[bias].row(0);
    return y;
  }

  Matrix backward(const ParamStore& store, Gradients& grads, const Matrix& x, const Matrix& dy) const {
    grads[weight].noalias() += dy.transpose() * x;
    if (has_bias) grads[bias] += dy.colwise().sum();
    return dy * store[weight];
  }
};

/// Row-wise layer normalization with learned gain and shift.
struct LayerNorm {
  ParamId gain;
  ParamId shift;
  static constexpr double kEpsilon = 1e-5;

  struct Cache {
    Matrix normalized;
    Vector inv_std;
  };

  static LayerNorm create(ParamStore& store, const std::string& name, Eigen::Index dim) {
    return {store.add_constant(name + ".gain", 1, dim, 1.0, false),
            store.add_constant(name + ".shift", 1, dim, 0.0, false)};
  }

  Matrix forward(const ParamStore& store, const Matrix& x, Cache& cache) const {
    const double n = static_cast<double>(x.cols());
    Vector mean = x.rowwise().mean();
    Matrix centered = x.colwise() - mean;
    Vector var = centered.array().square().rowwise().sum() / n;
    cache.inv_std = (var.array() + kEpsilon).rsqrt();
    cache.normalized = cache.inv_std.asDiagonal() * centered;
    Matrix y = cache.normalized.array().rowwise() * store[gain].row(0).array();
    y.rowwise() += store[shift].row(0);
    return y;
  }

  Matrix backward(const ParamStore& store, Gradients& grads, const Cache& cache, const Matrix& dy) const {
    grads[gain] += (dy.array() * cache.normalized.array()).colwise().sum().matrix();
    grads[shift] += dy.colwise().sum();
    Matrix dxhat = dy.array().rowwise() * store[gain].row(0).array();
    const double n = static_cast<double>(dy.cols());
    Vector mean_d = dxhat.rowwise().sum() / n;
    Vector mean_dx = (dxhat.array() * cache.normalized.array()).rowwise().sum().matrix() / n;
    Matrix dx = dxhat.colwise() - mean_d;
    dx -= (cache.normalized.array().colwise() * mean_dx.array()).matrix();
    return cache.inv_std.asDiagonal() * dx;
  }
};

/// Single-head scaled dot-product attention. Queries come from `xq`, keys
/// and values from `xkv`; self-attention passes the same matrix twice.
struct Attention {
  Linear query, key, value, out;

  struct Cache {
    Matrix xq, xkv, q, k, v, weights, context;
  };

  static Attention create(ParamStore& store, const std::string& name, Eigen::Index dim, std::uint64_t seed) {
    return {Linear::create(store, name + ".q", dim, dim, seed), Linear::create(store, name + ".k", dim, dim, seed),
            Linear::create(store, name + ".v", dim, dim, seed), Linear::create(store, name + ".o", dim, dim, seed)};
  }

  Matrix forward(const ParamStore& store, const Matrix& xq, const Matrix& xkv, bool causal, Cache& c) const {
    c.xq = xq;
    c.xkv = xkv;
    c.q = query.forward(store, xq);
    c.k = key.forward(store, xkv);
    c.v = value.forward(store, xkv);
    const double scale = 1.0 / std::sqrt(static_cast<double>(c.q.cols()));
    Matrix scores = (c.q * c.k.transpose()) * scale;
    if (causal) {
      for (Eigen::Index i = 0; i < scores.rows(); ++i)
        for (Eigen::Index j = i + 1; j < scores.cols(); ++j) scores(i, j) = -std::numeric_limits<double>::infinity();
    }
    c.weights.resize(scores.rows(), scores.cols());
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
      const double m = scores.row(i).maxCoeff();
      RowVector e = (scores.row(i).array() - m).exp().matrix();
      c.weights.row(i) = e / e.sum();
    }
    c.context = c.weights * c.v;
    return out.forward(store, c.context);
  }

  /// Returns {d xq, d xkv}.
  std::pair<Matrix, Matrix> backward(const ParamStore& store, Gradients& grads, const Cache& c,
                                     const Matrix& dy) const {
    Matrix dcontext = out.backward(store, grads, c.context, dy);
    Matrix dweights = dcontext * c.v.transpose();
    Matrix dv = c.weights.transpose() * dcontext;
    Vector row_dot = (dweights.array() * c.weights.array()).rowwise().sum();
    Matrix dscores = c.weights.array() * (dweights.colwise() - row_dot).array();
    dscores *= 1.0 / std::sqrt(static_cast<double>(c.q.cols()));
    Matrix dq = dscores * c.k;
    Matrix dk = dscores.transpose() * c.q;
    Matrix dxq = query.backward(store, grads, c.xq, dq);
    Matrix dxkv = key.backward(store, grads, c.xkv, dk);
    dxkv += value.backward(store, grads, c.xkv, dv);
    return {std::move(dxq), std::move(dxkv)};
  }
};

/// Two-layer perceptron with tanh hidden activation (smooth everywhere, which
/// keeps finite-difference checks meaningful).
struct Mlp {
  Linear in, out;

  struct Cache {
    Matrix x, hidden;
  };

  static Mlp create(ParamStore& store, const std::string& name, Eigen::Index dim, std::uint64_t seed) {
    return {Linear::create(store, name + ".fc1", dim, 2 * dim, seed),
            Linear::create(store, name + ".fc2", 2 * dim, dim, seed)};
  }

  Matrix forward(const ParamStore& store, const Matrix& x, Cache& c) const {
    c.x = x;
    c.hidden = in.forward(store, x).array().tanh().matrix();
    return out.forward(store, c.hidden);
  }

  Matrix backward(const ParamStore& store, Gradients& grads, const Cache& c, const Matrix& dy) const {
    Matrix dh = out.backward(store, grads, c.hidden, dy);
    Matrix dpre = dh.array() * (1.0 - c.hidden.array().square());
    return in.backward(store, grads, c.x, dpre);
  }
};

/// Pre-norm transformer block: h = x + Attn(LN(x)); y = h + Mlp(LN(h)).
struct EncoderBlock {
  LayerNorm ln_attn, ln_mlp;
  Attention attn;
  Mlp mlp;

  struct Cache {
    LayerNorm::Cache ln1, ln2;
    Attention::Cache attn;
    Mlp::Cache mlp;
  };

  static EncoderBlock create(ParamStore& store, const std::string& name, Eigen::Index dim, std::uint64_t seed) {
    return {LayerNorm::create(store, name + ".ln1", dim), LayerNorm::create(store, name + ".ln2", dim),
            Attention::create(store, name + ".attn", dim, seed), Mlp::create(store, name + ".mlp", dim, seed)};
  }

  Matrix forward(const ParamStore& store, const Matrix& x, bool causal, Cache& c) const {
    Matrix a = ln_attn.forward(store, x, c.ln1);
    Matrix h = x + attn.forward(store, a, a, causal, c.attn);
    Matrix b = ln_mlp.forward(store, h, c.ln2);
    return h + mlp.forward(store, b, c.mlp);
  }

  Matrix backward(const ParamStore& store, Gradients& grads, const Cache& c, const Matrix& dy) const {
    Matrix dh = dy + ln_mlp.backward(store, grads, c.ln2, mlp.backward(store, grads, c.mlp, dy));
    auto [dq, dkv] = attn.backward(store, grads, c.attn, dh);
    return dh + ln_attn.backward(store, grads, c.ln1, dq + dkv);
  }
};

/// Decoder block: causal self-attention, cross-attention over a memory, MLP.
struct DecoderBlock {
  LayerNorm ln_self, ln_cross, ln_mlp;
  Attention self_attn, cross_attn;
  Mlp mlp;

  struct Cache {
    LayerNorm::Cache ln1, ln2, ln3;
    Attention::Cache self_attn, cross_attn;
    Mlp::Cache mlp;
  };

  static DecoderBlock create(ParamStore& store, const std::string& name, Eigen::Index dim, std::uint64_t seed) {
    return {LayerNorm::create(store, name + ".ln1", dim),
            LayerNorm::create(store, name + ".ln2", dim),
            LayerNorm::create(store, name + ".ln3", dim),
            Attention::create(store, name + ".self", dim, seed),
            Attention::create(store, name + ".cross", dim, seed),
            Mlp::create(store, name + ".mlp", dim, seed)};
  }

  Matrix forward(const ParamStore& store, const Matrix& x, const Matrix& memory, Cache& c) const {
    Matrix a = ln_self.forward(store, x, c.ln1);
    Matrix h1 = x + self_attn.forward(store, a, a, true, c.self_attn);
    Matrix b = ln_cross.forward(store, h1, c.ln2);
    Matrix h2 = h1 + cross_attn.forward(store, b, memory, false, c.cross_attn);
    Matrix d = ln_mlp.forward(store, h2, c.ln3);
    return h2 + mlp.forward(store, d, c.mlp);
  }

  /// Returns {d x, d memory}.
  std::pair<Matrix, Matrix> backward(const ParamStore& store, Gradients& grads, const Cache& c,
                                     const Matrix& dy) const {
    Matrix dh2 = dy + ln_mlp.backward(store, grads, c.ln3, mlp.backward(store, grads, c.mlp, dy));
    auto [dqc, dmem] = cross_attn.backward(store, grads, c.cross_attn, dh2);
    Matrix dh1 = dh2 + ln_cross.backward(store, grads, c.ln2, dqc);
    auto [dq, dkv] = self_attn.backward(store, grads, c.self_attn, dh1);
    Matrix dx = dh1 + ln_self.backward(store, grads, c.ln1, dq + dkv);
    return {std::move(dx), std::move(dmem)};
  }
};

inline constexpr double kNormEpsilon = 1e-8;

/// u = x / (||x|| + eps).
inline RowVector guarded_normalize(const RowVector& x) { return x / (x.norm() + kNormEpsilon); }

/// Vector-Jacobian product of guarded_normalize at x.
inline RowVector guarded_normalize_backward(const RowVector& x, const RowVector& du) {
  const double n = x.norm();
  const double d = n + kNormEpsilon;
  if (n == 0.0) return du / d;
  return du / d - x * (x.dot(du) / (n * d * d));
}

}  // namespace nlip
