#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "nlip/optimizer.hpp"
#include "nlip/param_store.hpp"

namespace nlip {

// Layout (little-endian, native doubles):
//   "NLIPCKPT" | u32 version | u32 count
//   count x { u32 name_len | name | u32 rows | u32 cols | rows*cols f64 row-major }
//   u8 has_moments | [count x first | count x second, row-major] | u64 adam_t
//   u64 step
inline constexpr char kCheckpointMagic[8] = {'N', 'L', 'I', 'P', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void write_pod(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const std::string& what) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw IoError("checkpoint truncated while reading " + what);
  return value;
}

inline void write_matrix(std::ostream& out, const Matrix& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) write_pod<double>(out, m(r, c));
}

inline void read_matrix(std::istream& in, Matrix& m, const std::string& what) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = read_pod<double>(in, what);
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const ParamStore& store, const AdamState* state) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::write_pod<std::uint32_t>(out, kCheckpointVersion);
  detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(store.size()));
  for (std::size_t i = 0; i < store.size(); ++i) {
    const std::string& name = store.name(i);
    detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(store.value(i).rows()));
    detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(store.value(i).cols()));
    detail::write_matrix(out, store.value(i));
  }
  const bool has_moments = state != nullptr && state->first.size() == store.size();
  detail::write_pod<std::uint8_t>(out, has_moments ? 1 : 0);
  if (has_moments) {
    for (const auto& m : state->first) detail::write_matrix(out, m);
    for (const auto& v : state->second) detail::write_matrix(out, v);
    detail::write_pod<std::uint64_t>(out, state->t);
  }
  detail::write_pod<std::uint64_t>(out, store.step);
  if (!out) throw IoError("failed writing checkpoint: " + path);
}

/// Restores values (and optimizer moments when both are present) into an
/// already-built store. Names and shapes must match exactly.
inline void load_checkpoint(const std::string& path, ParamStore& store, AdamState* state) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw IoError("not a checkpoint file (bad magic): " + path);
  const auto version = detail::read_pod<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  const auto count = detail::read_pod<std::uint32_t>(in, "parameter count");
  if (count != store.size())
    throw ShapeError("checkpoint holds " + std::to_string(count) + " parameters, model has " +
                     std::to_string(store.size()));
  for (std::size_t i = 0; i < count; ++i) {
    const auto len = detail::read_pod<std::uint32_t>(in, "name length");
    std::string name(len, '\0');
    in.read(name.data(), len);
    if (!in) throw IoError("checkpoint truncated in parameter name");
    if (name != store.name(i)) throw ShapeError("checkpoint parameter '" + name + "' where '" + store.name(i) + "' expected");
    const auto rows = detail::read_pod<std::uint32_t>(in, name);
    const auto cols = detail::read_pod<std::uint32_t>(in, name);
    Matrix& m = store.value(i);
    if (rows != m.rows() || cols != m.cols()) throw ShapeError("shape mismatch for parameter '" + name + "'");
    detail::read_matrix(in, m, name);
  }
  const auto has_moments = detail::read_pod<std::uint8_t>(in, "moment flag");
  if (has_moments) {
    AdamState loaded = AdamState::for_store(store);
    for (auto& m : loaded.first) detail::read_matrix(in, m, "first moments");
    for (auto& v : loaded.second) detail::read_matrix(in, v, "second moments");
    loaded.t = detail::read_pod<std::uint64_t>(in, "optimizer count");
    if (state) *state = std::move(loaded);
  } else if (state) {
    *state = AdamState::for_store(store);
  }
  store.step = detail::read_pod<std::uint64_t>(in, "step counter");
  store.touch();
}

}  // namespace nlip
