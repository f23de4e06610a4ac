#pragma once

#include "morph/diffcore.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

namespace morph::testing {

inline Matrix random_matrix(Index rows, Index cols, Rng& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

inline Vector random_vector(Index n, Rng& rng, double scale = 1.0) { return random_matrix(n, 1, rng, scale); }

/// Central differences of `f` with respect to every entry of `params`.
inline Vector central_differences(ParamVector& params, const std::function<double()>& f, double h = 1e-5) {
  Vector g(params.size());
  for (Index i = 0; i < params.size(); ++i) {
    const double keep = params.values()[i];
    params.values()[i] = keep + h;
    const double up = f();
    params.values()[i] = keep - h;
    const double down = f();
    params.values()[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)
inline double max_relative_error(const Vector& a, const Vector& b, double floor = 1e-6) {
  double worst = 0.0;
  for (Index i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("morph_" + tag + "_" + std::to_string(rd()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace morph::testing
