#pragma once

#include <Eigen/Dense>

#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "nlip/errors.hpp"
#include "nlip/random.hpp"

namespace nlip {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

/// Handle to a parameter inside a ParamStore. Layers keep handles, never
/// references, so a store can be copied (snapshots) without rebinding.
struct ParamId {
  std::size_t index = static_cast<std::size_t>(-1);
};

/// One gradient buffer per parameter, shape-matched with the owning store.
class Gradients {
 public:
  Gradients() = default;

  explicit Gradients(std::vector<Matrix> buffers) : buffers_(std::move(buffers)) {}

  Matrix& operator[](ParamId id) { return buffers_[id.index]; }
  const Matrix& operator[](ParamId id) const { return buffers_[id.index]; }
  Matrix& at(std::size_t i) { return buffers_[i]; }
  const Matrix& at(std::size_t i) const { return buffers_[i]; }
  std::size_t size() const { return buffers_.size(); }

  void push_back(Matrix buffer) { buffers_.push_back(std::move(buffer)); }

  void zero() {
    for (auto& b : buffers_) b.setZero();
  }

  Gradients& operator+=(const Gradients& other) {
    if (other.size() != size()) throw ShapeError("gradient sets differ in parameter count");
    for (std::size_t i = 0; i < buffers_.size(); ++i) buffers_[i] += other.buffers_[i];
    return *this;
  }

  Gradients& operator*=(double scale) {
    for (auto& b : buffers_) b *= scale;
    return *this;
  }

 private:
  std::vector<Matrix> buffers_;
};

/// Named real tensors with paired gradient buffers and a global step counter.
class ParamStore {
 public:
  ParamId add(const std::string& name, Matrix init, bool decay) {
    if (index_.count(name)) throw ContractError("duplicate parameter name '" + name + "'");
    ParamId id{values_.size()};
    index_.emplace(name, id.index);
    names_.push_back(name);
    decay_.push_back(decay);
    grads_.push_back(Matrix::Zero(init.rows(), init.cols()));
    values_.push_back(std::move(init));
    touch();
    return id;
  }

  /// Weight matrix drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)) on the
  /// parameter's own named stream.
  ParamId add_uniform(const std::string& name, Eigen::Index rows, Eigen::Index cols, Eigen::Index fan_in,
                      std::uint64_t root_seed, bool decay) {
    Rng rng = make_rng(root_seed, name);
    const double scale = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = (2.0 * uniform01(rng) - 1.0) * scale;
    return add(name, std::move(m), decay);
  }

  ParamId add_constant(const std::string& name, Eigen::Index rows, Eigen::Index cols, double value, bool decay) {
    return add(name, Matrix::Constant(rows, cols, value), decay);
  }

  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  ParamId id(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter '" + name + "'");
    return ParamId{it->second};
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Matrix& operator[](ParamId id) const { return values_[id.index]; }
  Matrix& operator[](ParamId id) { return values_[id.index]; }
  const Matrix& value(std::size_t i) const { return values_[i]; }
  Matrix& value(std::size_t i) { return values_[i]; }
  const std::string& name(std::size_t i) const { return names_[i]; }
  bool decays(std::size_t i) const { return decay_[i]; }

  Gradients& grads() { return grads_; }
  const Gradients& grads() const { return grads_; }

  /// Fresh zero gradient set shaped like this store.
  Gradients make_gradients() const {
    std::vector<Matrix> buffers;
    buffers.reserve(values_.size());
    for (const auto& v : values_) buffers.push_back(Matrix::Zero(v.rows(), v.cols()));
    return Gradients(std::move(buffers));
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
    return n;
  }

  std::uint64_t step = 0;

  /// Bumped whenever parameter values change; caches keyed on it go stale.
  /// Versions are process-unique, so a copied store keeps its version until
  /// either copy is modified.
  std::uint64_t version() const { return version_; }
  void touch() { version_ = next_version(); }

 private:
  std::vector<std::string> names_;
  std::vector<bool> decay_;
  std::vector<Matrix> values_;
  Gradients grads_;
  std::unordered_map<std::string, std::size_t> index_;
  std::uint64_t version_ = next_version();

  static std::uint64_t next_version() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
  }
};

inline void zero_grads(ParamStore& store) { store.grads().zero(); }

/// Deterministic pairwise tree reduction; the summation order depends only on
/// the number of parts, never on how they were produced.
inline Gradients tree_reduce(std::vector<Gradients> parts) {
  if (parts.empty()) return {};
  for (std::size_t stride = 1; stride < parts.size(); stride *= 2)
    for (std::size_t i = 0; i + stride < parts.size(); i += 2 * stride) parts[i] += parts[i + stride];
  return std::move(parts.front());
}

}  // namespace nlip
