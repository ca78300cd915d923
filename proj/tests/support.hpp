// Copyright 2026 The ISALux Authors
// SPDX-License-Identifier: Apache-2.0

// Shared helpers for the test binaries: finite-difference gradient checks,
// synthetic image fixtures and scratch directories.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <unistd.h>

#include "isalux/image.hpp"
#include "isalux/ops.hpp"
#include "isalux/rng.hpp"
#include "isalux/tensor.hpp"

namespace isalux::testing {

using Tensor64 = BasicTensor<double>;

struct GradCheck {
  double max_rel = 0.0;  // worst |analytic - numeric| / max(|analytic|, |numeric|, floor)
  std::size_t checked = 0;
};

/// Compares analytic gradients of `loss()` with respect to each tensor in
/// `inputs` against central differences over every element.
inline GradCheck check_gradients(const std::function<Tensor64()>& loss, std::vector<Tensor64> inputs, double h = 1e-5,
                                 double floor = 1e-3) {
  for (auto& x : inputs) x.zero_grad();
  backward(loss());
  std::vector<std::vector<double>> analytic;
  for (auto& x : inputs) analytic.emplace_back(x.grad().begin(), x.grad().end());
  GradCheck out;
  NoGradGuard no_grad;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    auto& x = inputs[t];
    for (std::size_t i = 0; i < x.numel(); ++i) {
      const double saved = x[i];
      x[i] = saved + h;
      const double up = loss().item();
      x[i] = saved - h;
      const double down = loss().item();
      x[i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic[t][i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      out.max_rel = std::max(out.max_rel, rel);
      ++out.checked;
    }
  }
  return out;
}

/// Linear functional sum(x * w) with fixed pseudo-random weights, a scalar
/// that depends on every output element.
template <class T>
BasicTensor<T> probe(const BasicTensor<T>& x, std::uint64_t seed = 99) {
  Rng rng(seed);
  auto w = rng.uniform_tensor<T>(x.shape(), -1.0, 1.0);
  return ops::sum(ops::mul(x, w));
}

/// Smooth colourful [3,h,w] test image in (0,1).
inline Tensor pattern_image(std::size_t h, std::size_t w, std::uint64_t seed = 1, double gain = 1.0) {
  Rng rng(seed);
  const double p0 = rng.uniform(0, 6), p1 = rng.uniform(0, 6), p2 = rng.uniform(0, 6);
  Tensor img(Shape{3, h, w});
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double u = static_cast<double>(x) / w, v = static_cast<double>(y) / h;
      const double c[3] = {0.5 + 0.35 * std::sin(6 * u + p0), 0.5 + 0.35 * std::cos(5 * v + p1),
                           0.5 + 0.3 * std::sin(4 * (u + v) + p2)};
      for (std::size_t ch = 0; ch < 3; ++ch) {
        img[(ch * h + y) * w + x] =
            static_cast<float>(std::clamp(gain * (c[ch] + 0.05 * rng.uniform(-1, 1)), 0.0, 1.0));
      }
    }
  }
  return img;
}

/// Rounds to the 8-bit grid so that PNG round trips are exact.
inline Tensor quantize(Tensor img) {
  for (auto& v : img.data()) v = std::round(v * 255.0f) / 255.0f;
  return img;
}

/// Writes `count` low/high PNG pairs of the given size under `dir`.
inline void write_pair_dataset(const std::filesystem::path& dir, std::size_t count, std::size_t h, std::size_t w,
                               std::uint64_t seed = 1) {
  std::filesystem::create_directories(dir / "low");
  std::filesystem::create_directories(dir / "high");
  for (std::size_t i = 0; i < count; ++i) {
    const auto high = pattern_image(h, w, seed + i);
    auto low = high.clone();
    for (auto& v : low.data()) v = 0.2f * v;
    const std::string name = "img" + std::to_string(i) + ".png";
    write_png((dir / "low" / name).string(), low);
    write_png((dir / "high" / name).string(), high);
  }
}

/// Fresh scratch directory under the system temp dir, removed on destruction.
class ScratchDir {
 public:
  explicit ScratchDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("isalux_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::string str(const std::string& leaf = "") const {
    return leaf.empty() ? path_.string() : (path_ / leaf).string();
  }

 private:
  static std::size_t& counter() {
    static std::size_t n = 0;
    return n;
  }
  std::filesystem::path path_;
};

}  // namespace isalux::testing
