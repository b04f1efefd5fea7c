#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "nlip/param_store.hpp"

namespace nlip {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double epsilon = 1e-8;
  /// Decoupled decay, applied only to parameters registered with decay=true.
  double weight_decay = 0.05;
};

/// First and second moments plus the optimizer's own bias-correction count.
struct AdamState {
  std::vector<Matrix> first;
  std::vector<Matrix> second;
  std::uint64_t t = 0;

  static AdamState for_store(const ParamStore& store) {
    AdamState s;
    for (std::size_t i = 0; i < store.size(); ++i) {
      s.first.push_back(Matrix::Zero(store.value(i).rows(), store.value(i).cols()));
      s.second.push_back(Matrix::Zero(store.value(i).rows(), store.value(i).cols()));
    }
    return s;
  }
};

/// One bias-corrected adaptive-moment update from the store's gradient
/// buffers. Throws NumericalError naming the first parameter whose gradient
/// is not finite; in that case nothing is modified.
inline void adam_step(ParamStore& store, AdamState& state, double rate, const AdamConfig& config) {
  if (state.first.size() != store.size()) throw ShapeError("optimizer state does not match parameter store");
  const Gradients& grads = store.grads();
  for (std::size_t i = 0; i < store.size(); ++i)
    if (!grads.at(i).allFinite()) throw NumericalError("non-finite gradient in parameter '" + store.name(i) + "'");

  state.t += 1;
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < store.size(); ++i) {
    const Matrix& g = grads.at(i);
    Matrix& m = state.first[i];
    Matrix& v = state.second[i];
    m = config.beta1 * m + (1.0 - config.beta1) * g;
    v = config.beta2 * v + (1.0 - config.beta2) * g.cwiseProduct(g);
    Matrix& p = store.value(i);
    if (store.decays(i) && config.weight_decay != 0.0) p -= (rate * config.weight_decay) * p;
    p.array() -= rate * (m.array() / c1) / ((v.array() / c2).sqrt() + config.epsilon);
  }
  store.step += 1;
  store.touch();
}

}  // namespace nlip
