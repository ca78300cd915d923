// Copyright 2026 The ISALux Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "isalux/isat.hpp"
#include "isalux/ops.hpp"
#include "isalux/rng.hpp"

namespace isalux {

inline constexpr std::size_t kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimK1 = 0.01;
inline constexpr double kSsimK2 = 0.03;
inline constexpr double kPsnrSentinel = 99.0;
inline constexpr std::uint64_t kPerceptualSeed = 0xC0FFEE;

/// The standard five-scale MS-SSIM exponents.
inline constexpr std::array<double, 5> kMsSsimWeights{0.0448, 0.2856, 0.3001, 0.2363, 0.1333};

/// Exponents for `scales` scales: the standard set for 5, otherwise its first
/// `scales` entries renormalized to sum to 1.
inline std::vector<double> default_msssim_weights(std::size_t scales) {
  if (scales == 0 || scales > kMsSsimWeights.size()) {
    throw std::invalid_argument("msssim: scales must be in [1, 5], got " + std::to_string(scales));
  }
  std::vector<double> w(kMsSsimWeights.begin(), kMsSsimWeights.begin() + static_cast<std::ptrdiff_t>(scales));
  if (scales == kMsSsimWeights.size()) return w;
  const double s = std::accumulate(w.begin(), w.end(), 0.0);
  for (auto& v : w) v /= s;
  return w;
}

/// Largest scale count whose coarsest level still fits the Gaussian window.
inline std::size_t max_msssim_scales(std::size_t height, std::size_t width) {
  std::size_t m = 0;
  while (m < kMsSsimWeights.size() && std::min(height, width) >= (std::size_t{1} << m) * kSsimWindow) ++m;
  return m;
}

struct HybridLossConfig {
  double lambda_l2 = 1.0;
  double lambda_perc = 0.01;
  double lambda_ssim = 0.2;
  std::size_t msssim_scales = 5;
  std::vector<double> msssim_weights = default_msssim_weights(5);

  void validate() const {
    if (lambda_l2 < 0 || lambda_perc < 0 || lambda_ssim < 0) {
      throw std::invalid_argument("loss config: loss weights must be nonnegative");
    }
    if (lambda_l2 == 0 && lambda_perc == 0 && lambda_ssim == 0) {
      throw std::invalid_argument("loss config: at least one loss weight must be positive");
    }
    if (msssim_weights.size() != msssim_scales) {
      throw std::invalid_argument("loss config: msssim_weights has " + std::to_string(msssim_weights.size()) +
                                  " entries for " + std::to_string(msssim_scales) + " scales");
    }
  }
};

/// Mean squared error over all elements.
template <class T>
BasicTensor<T> l2_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("l2_loss: shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  }
  return ops::mean(ops::square(ops::sub(pred, target)));
}

/// Frozen convolutional feature extractor used by the perceptual loss:
/// four stages of conv3x3 (stride 2, padding 1) + GELU, tapped after each stage.
/// Weights come from a fixed seed or from an ISAT1 file with records
/// `perceptual.stage{i}.weight`.
template <class T>
class FeatureExtractor {
 public:
  static constexpr std::array<std::size_t, 4> kWidths{16, 32, 64, 64};

  explicit FeatureExtractor(std::uint64_t seed = kPerceptualSeed) {
    Rng rng(seed);
    std::size_t in = 3;
    for (auto out : kWidths) {
      kernels_.push_back(rng.normal_tensor<T>({out, in, 3, 3}, std::sqrt(2.0 / (9.0 * in))));
      in = out;
    }
  }

  static FeatureExtractor load(const std::string& path) {
    FeatureExtractor fx;
    const auto records = isat::read_file(path);
    for (std::size_t i = 0; i < fx.kernels_.size(); ++i) {
      const std::string name = record_name(i);
      const auto* rec = isat::find(records, name);
      if (!rec) throw DataError(path + ": missing record " + name);
      if (rec->shape != fx.kernels_[i].shape()) {
        throw DataError(path + ": record " + name + " has shape " + shape_str(rec->shape) + ", expected " +
                        shape_str(fx.kernels_[i].shape()));
      }
      fx.kernels_[i] = isat::to_tensor<T>(*rec);
    }
    return fx;
  }

  static std::string record_name(std::size_t stage) { return "perceptual.stage" + std::to_string(stage) + ".weight"; }

  std::vector<BasicTensor<T>> operator()(const BasicTensor<T>& x) const {
    std::vector<BasicTensor<T>> taps;
    auto h = x;
    for (const auto& k : kernels_) {
      h = ops::gelu(ops::conv2d(h, k, 2, 1));
      taps.push_back(h);
    }
    return taps;
  }

  const std::vector<BasicTensor<T>>& kernels() const { return kernels_; }

 private:
  std::vector<BasicTensor<T>> kernels_;  // never require grad
};

/// Mean l1 distance between extractor features, averaged over tap points.
template <class T>
BasicTensor<T> perceptual_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target,
                               const FeatureExtractor<T>& extractor) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("perceptual_loss: shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  }
  const auto fp = extractor(pred);
  std::vector<BasicTensor<T>> ft;
  {
    NoGradGuard no_grad;
    ft = extractor(target.detach());
  }
  BasicTensor<T> total;
  for (std::size_t i = 0; i < fp.size(); ++i) {
    auto d = ops::mean(ops::abs(ops::sub(fp[i], ft[i])));
    total = total.defined() ? ops::add(total, d) : d;
  }
  return ops::scale(total, 1.0 / static_cast<double>(fp.size()));
}

/// Normalized 2-D Gaussian window, [1,1,size,size].
template <class T>
BasicTensor<T> gaussian_window(std::size_t size = kSsimWindow, double sigma = kSsimSigma) {
  std::vector<double> g(size);
  const double centre = (static_cast<double>(size) - 1.0) / 2.0;
  double s = 0.0;
  for (std::size_t i = 0; i < size; ++i) {
    const double d = static_cast<double>(i) - centre;
    g[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    s += g[i];
  }
  BasicTensor<T> w(Shape{1, 1, size, size});
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) w[y * size + x] = static_cast<T>(g[y] * g[x] / (s * s));
  }
  return w;
}

/// Mean SSIM and mean contrast-structure term over all channels and valid
/// window positions of two [N,C,H,W] images with dynamic range 1.
template <class T>
struct SsimTerms {
  BasicTensor<T> ssim;
  BasicTensor<T> cs;
};

template <class T>
SsimTerms<T> ssim_terms(const BasicTensor<T>& x, const BasicTensor<T>& y) {
  if (x.shape() != y.shape() || x.rank() != 4) {
    throw ShapeError("ssim: expected matching [N,C,H,W] images, got " + shape_str(x.shape()) + " and " +
                     shape_str(y.shape()));
  }
  if (x.dim(2) < kSsimWindow || x.dim(3) < kSsimWindow) {
    throw ShapeError("ssim: images must be at least " + std::to_string(kSsimWindow) + "x" +
                     std::to_string(kSsimWindow) + ", got " + shape_str(x.shape()));
  }
  const Shape planes{x.dim(0) * x.dim(1), 1, x.dim(2), x.dim(3)};
  const auto window = gaussian_window<T>();
  auto filt = [&](const BasicTensor<T>& v) { return ops::conv2d(v, window, 1, 0); };
  const auto xp = ops::reshape(x, planes);
  const auto yp = ops::reshape(y, planes);
  const double c1 = kSsimK1 * kSsimK1, c2 = kSsimK2 * kSsimK2;

  auto mu_x = filt(xp);
  auto mu_y = filt(yp);
  auto mu_xx = ops::square(mu_x);
  auto mu_yy = ops::square(mu_y);
  auto mu_xy = ops::mul(mu_x, mu_y);
  auto s_xx = ops::sub(filt(ops::square(xp)), mu_xx);
  auto s_yy = ops::sub(filt(ops::square(yp)), mu_yy);
  auto s_xy = ops::sub(filt(ops::mul(xp, yp)), mu_xy);

  auto cs_map = ops::div(ops::add_scalar(ops::scale(s_xy, 2.0), c2), ops::add_scalar(ops::add(s_xx, s_yy), c2));
  auto l_map = ops::div(ops::add_scalar(ops::scale(mu_xy, 2.0), c1), ops::add_scalar(ops::add(mu_xx, mu_yy), c1));
  return {ops::mean(ops::mul(l_map, cs_map)), ops::mean(cs_map)};
}

/// Single-scale SSIM averaged over channels, in [-1, 1].
template <class T>
BasicTensor<T> ssim(const BasicTensor<T>& x, const BasicTensor<T>& y) {
  return ssim_terms(x, y).ssim;
}

namespace detail {
template <class T>
BasicTensor<T> halve(const BasicTensor<T>& x) {
  const std::size_t h = x.dim(2) & ~std::size_t{1}, w = x.dim(3) & ~std::size_t{1};
  auto even = (h == x.dim(2) && w == x.dim(3)) ? x : ops::crop(x, 0, 0, h, w);
  return ops::resize_bilinear(even, 0.5);  // exact 2x2 mean for even extents
}
}  // namespace detail

/// Multi-scale SSIM: contrast-structure terms at the finer scales and full SSIM
/// at the coarsest, each clamped at 0 and raised to its exponent, multiplied
/// together. Images are halved (2x2 mean) between scales.
template <class T>
BasicTensor<T> ms_ssim(const BasicTensor<T>& x, const BasicTensor<T>& y, std::size_t scales,
                       const std::vector<double>& weights) {
  if (weights.size() != scales || scales == 0) {
    throw std::invalid_argument("ms_ssim: need one exponent per scale");
  }
  if (x.rank() != 4 || x.shape() != y.shape()) {
    throw ShapeError("ms_ssim: expected matching [N,C,H,W] images, got " + shape_str(x.shape()) + " and " +
                     shape_str(y.shape()));
  }
  const std::size_t needed = (std::size_t{1} << (scales - 1)) * kSsimWindow;
  if (std::min(x.dim(2), x.dim(3)) < needed) {
    throw ShapeError("ms_ssim: " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)) + " is too small for " +
                     std::to_string(scales) + " scales (needs " + std::to_string(needed) +
                     " px); max scales for this size = " + std::to_string(max_msssim_scales(x.dim(2), x.dim(3))));
  }
  BasicTensor<T> result;
  auto xs = x, ys = y;
  for (std::size_t j = 0; j < scales; ++j) {
    auto terms = ssim_terms(xs, ys);
    const bool last = j + 1 == scales;
    auto factor = ops::pow_scalar(ops::clamp_min(last ? terms.ssim : terms.cs, 0.0), weights[j]);
    result = result.defined() ? ops::mul(result, factor) : factor;
    if (!last) {
      xs = detail::halve(xs);
      ys = detail::halve(ys);
    }
  }
  return result;
}

template <class T>
BasicTensor<T> ms_ssim_loss(const BasicTensor<T>& x, const BasicTensor<T>& y, std::size_t scales,
                            const std::vector<double>& weights) {
  return ops::add_scalar(ops::scale(ms_ssim(x, y, scales, weights), -1.0), 1.0);
}

/// Weighted loss and its individual (unweighted) terms.
template <class T>
struct LossTerms {
  BasicTensor<T> total;
  double l2 = 0.0;
  double perc = 0.0;
  double msssim = 0.0;  // 1 - MS-SSIM
};

/// lambda_l2 * L2 + lambda_perc * L_perc + lambda_ssim * (1 - MS-SSIM).
/// Terms with zero weight are skipped.
template <class T>
LossTerms<T> hybrid_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target, const HybridLossConfig& cfg,
                         const FeatureExtractor<T>& extractor) {
  cfg.validate();
  LossTerms<T> out;
  auto accumulate = [&](const BasicTensor<T>& term, double weight) {
    auto weighted = ops::scale(term, weight);
    out.total = out.total.defined() ? ops::add(out.total, weighted) : weighted;
  };
  if (cfg.lambda_l2 > 0) {
    auto t = l2_loss(pred, target);
    out.l2 = t.item();
    accumulate(t, cfg.lambda_l2);
  }
  if (cfg.lambda_perc > 0) {
    auto t = perceptual_loss(pred, target, extractor);
    out.perc = t.item();
    accumulate(t, cfg.lambda_perc);
  }
  if (cfg.lambda_ssim > 0) {
    auto t = ms_ssim_loss(pred, target, cfg.msssim_scales, cfg.msssim_weights);
    out.msssim = t.item();
    accumulate(t, cfg.lambda_ssim);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation metrics (no gradients)

/// 10 log10(peak^2 / MSE) with pred clamped to [0, peak]; identical inputs give
/// the 99 dB sentinel.
template <class T>
double psnr(const BasicTensor<T>& pred, const BasicTensor<T>& target, double peak = 1.0) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("psnr: shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  }
  double se = 0.0;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const double d = std::clamp<double>(pred[i], 0.0, peak) - static_cast<double>(target[i]);
    se += d * d;
  }
  const double mse = se / static_cast<double>(pred.numel());
  if (mse == 0.0) return kPsnrSentinel;
  return std::min(kPsnrSentinel, 10.0 * std::log10(peak * peak / mse));
}

/// Rec.601 luma of an [N,3,H,W] batch, [N,1,H,W].
template <class T>
BasicTensor<T> luma(const BasicTensor<T>& rgb) {
  if (rgb.rank() != 4 || rgb.dim(1) != 3) throw ShapeError("luma: expected [N,3,H,W], got " + shape_str(rgb.shape()));
  const std::size_t n = rgb.dim(0), hw = rgb.dim(2) * rgb.dim(3);
  BasicTensor<T> y(Shape{n, 1, rgb.dim(2), rgb.dim(3)});
  for (std::size_t b = 0; b < n; ++b) {
    const T* p = rgb.data().data() + b * 3 * hw;
    for (std::size_t i = 0; i < hw; ++i) {
      y[b * hw + i] = static_cast<T>(0.299 * p[i] + 0.587 * p[hw + i] + 0.114 * p[2 * hw + i]);
    }
  }
  return y;
}

struct ImageMetrics {
  double psnr = 0.0;
  double ssim = 0.0;
  double msssim = 0.0;
};

/// PSNR on RGB; SSIM and MS-SSIM on luma. MS-SSIM uses as many scales (up to
/// five) as the image size allows.
template <class T>
ImageMetrics image_metrics(const BasicTensor<T>& pred, const BasicTensor<T>& target) {
  NoGradGuard no_grad;
  auto clamped = pred.detach();
  for (auto& v : clamped.data()) v = std::clamp(v, T(0), T(1));
  ImageMetrics m;
  m.psnr = psnr(clamped, target);
  const auto yp = luma(clamped), yt = luma(target.detach());
  m.ssim = static_cast<double>(ssim(yp, yt).item());
  const std::size_t scales = max_msssim_scales(yp.dim(2), yp.dim(3));
  m.msssim = scales == 0 ? m.ssim : static_cast<double>(ms_ssim(yp, yt, scales, default_msssim_weights(scales)).item());
  return m;
}

}  // namespace isalux
