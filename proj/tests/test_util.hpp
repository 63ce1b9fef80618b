#pragma once

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <string>

#include "uniperc/core/autodiff.hpp"
#include "uniperc/core/rng.hpp"
#include "uniperc/core/tensor.hpp"

namespace testutil {

// Central finite difference of a scalar-valued rebuildable function w.r.t.
// one entry of `x`. The function must rebuild its graph from plain tensors.
inline double numeric_grad(const std::function<double(const uniperc::Tensor&)>& f,
                           uniperc::Tensor x, std::size_t i, double h = 1e-6) {
  const double orig = x[i];
  x[i] = orig + h;
  const double fp = f(x);
  x[i] = orig - h;
  const double fm = f(x);
  return (fp - fm) / (2.0 * h);
}

inline double rel_err(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline uniperc::Tensor random_tensor(std::vector<int> shape, uniperc::RngStream& rng,
                                     double scl = 1.0) {
  uniperc::Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = scl * rng.next_gauss();
  return t;
}

// Scratch directory unique to this process; removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    namespace fs = std::filesystem;
    auto base = fs::temp_directory_path();
    path_ = base / ("uniperc_" + tag + "_" + std::to_string(::getpid()) + "_" +
                    std::to_string(counter_++));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::string str() const { return path_.string(); }

 private:
  static inline int counter_ = 0;
  std::filesystem::path path_;
};

}  // namespace testutil
