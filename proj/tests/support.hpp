#pragma once

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>

#include "nlip/nlip.hpp"

namespace nlip::test {

struct GradCheck {
  double max_rel = 0.0;
  std::string worst;
  std::size_t checked = 0;
};

/// Elementwise relative error |a - n| / max(|a|, |n|, floor), with n the
/// central difference at step h.
inline double rel_err(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Central differences for every scalar of every parameter whose name passes
/// `select`; `analytic` must hold d loss / d param.
inline GradCheck check_param_gradients(ParamStore& store, const Gradients& analytic, const std::function<double()>& loss,
                                       const std::function<bool(const std::string&)>& select = nullptr,
                                       double h = 1e-6, double floor = 1e-4) {
  GradCheck out;
  for (std::size_t i = 0; i < store.size(); ++i) {
    if (select && !select(store.name(i))) continue;
    Matrix& p = store.value(i);
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
      for (Eigen::Index c = 0; c < p.cols(); ++c) {
        const double keep = p(r, c);
        p(r, c) = keep + h;
        const double up = loss();
        p(r, c) = keep - h;
        const double down = loss();
        p(r, c) = keep;
        const double numeric = (up - down) / (2.0 * h);
        const double e = rel_err(analytic.at(i)(r, c), numeric, floor);
        ++out.checked;
        if (e > out.max_rel) {
          out.max_rel = e;
          out.worst = store.name(i) + "(" + std::to_string(r) + "," + std::to_string(c) + ") analytic " +
                      std::to_string(analytic.at(i)(r, c)) + " numeric " + std::to_string(numeric);
        }
      }
    }
  }
  return out;
}

/// Same check for a plain matrix input.
inline GradCheck check_matrix_gradient(Matrix& x, const Matrix& analytic, const std::function<double()>& loss,
                                       double h = 1e-6, double floor = 1e-4) {
  GradCheck out;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      const double keep = x(r, c);
      x(r, c) = keep + h;
      const double up = loss();
      x(r, c) = keep - h;
      const double down = loss();
      x(r, c) = keep;
      const double e = rel_err(analytic(r, c), (up - down) / (2.0 * h), floor);
      ++out.checked;
      if (e > out.max_rel) {
        out.max_rel = e;
        out.worst = "(" + std::to_string(r) + "," + std::to_string(c) + ")";
      }
    }
  }
  return out;
}

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed, const char* stream = "test") {
  Rng rng = make_rng(seed, stream);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = normal(rng);
  return m;
}

inline Matrix random_unit_rows(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed, const char* stream = "unit") {
  Matrix m = random_matrix(rows, cols, seed, stream);
  for (Eigen::Index r = 0; r < rows; ++r) m.row(r).normalize();
  return m;
}

/// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("nlip_" + tag + "_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
             std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace nlip::test
