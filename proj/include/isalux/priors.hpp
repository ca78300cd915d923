// Copyright 2026 The ISALux Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <string>
#include <utility>

#include "isalux/isat.hpp"
#include "isalux/ops.hpp"
#include "isalux/rng.hpp"

namespace isalux {

inline constexpr std::size_t kSemanticClasses = 21;
inline constexpr std::size_t kPyramidLevels = 3;

/// Illumination prior at full, half and quarter resolution, each [N,1,h,w].
template <class T>
struct IlluminationPyramid {
  std::array<BasicTensor<T>, kPyramidLevels> levels;
};

/// Per-pixel class probabilities, [classes,H,W].
template <class T>
struct SemanticPrior {
  BasicTensor<T> map;
};

/// Everything the network consumes besides the image itself.
template <class T>
struct PriorBundle {
  IlluminationPyramid<T> illumination;
  BasicTensor<T> semantic;  // [N,classes,H,W]
};

/// 1 - max(R,G,B) per pixel after clamping the image to [0,1].
/// Accepts [3,H,W] (returns [1,H,W]) or [N,3,H,W] (returns [N,1,H,W]).
template <class T>
BasicTensor<T> illumination_prior(const BasicTensor<T>& image) {
  const bool batched = image.rank() == 4;
  if (!(image.rank() == 3 || batched) || image.dim(batched ? 1 : 0) != 3) {
    throw ShapeError("illumination_prior: expected a 3-channel image, got shape " + shape_str(image.shape()));
  }
  const std::size_t n = batched ? image.dim(0) : 1;
  const std::size_t hw = image.dim(image.rank() - 2) * image.dim(image.rank() - 1);
  Shape out_shape = image.shape();
  out_shape[batched ? 1 : 0] = 1;
  BasicTensor<T> out(out_shape);
  for (std::size_t b = 0; b < n; ++b) {
    const T* px = image.data().data() + b * 3 * hw;
    for (std::size_t p = 0; p < hw; ++p) {
      T m = T(0);
      for (std::size_t c = 0; c < 3; ++c) m = std::max(m, std::clamp(px[c * hw + p], T(0), T(1)));
      out[b * hw + p] = T(1) - m;
    }
  }
  return out;
}

/// Levels at factors 1, 1/2, 1/4 via bilinear resampling. Level 0 is the input.
template <class T>
IlluminationPyramid<T> build_pyramid(const BasicTensor<T>& prior) {
  BasicTensor<T> base = prior;
  if (prior.rank() == 3) base = BasicTensor<T>(Shape{1, prior.dim(0), prior.dim(1), prior.dim(2)}, prior.storage());
  if (base.rank() != 4 || base.dim(1) != 1) {
    throw ShapeError("build_pyramid: expected a single-channel prior, got shape " + shape_str(prior.shape()));
  }
  if (base.dim(2) % 4 != 0 || base.dim(3) % 4 != 0) {
    throw ShapeError("build_pyramid: extents " + std::to_string(base.dim(2)) + "x" + std::to_string(base.dim(3)) +
                     " must be divisible by 4; pad the image (e.g. reflect-pad) before computing priors");
  }
  NoGradGuard no_grad;
  IlluminationPyramid<T> pyr;
  pyr.levels[0] = base.detach();
  pyr.levels[1] = ops::resize_bilinear(base, 0.5);
  pyr.levels[2] = ops::resize_bilinear(base, 0.25);
  return pyr;
}

namespace detail {

// Renormalizes probability maps, or applies a channel softmax when the values
// look like logits.
template <class T>
void normalize_class_maps(BasicTensor<T>& map) {
  const std::size_t c = map.dim(0), hw = map.dim(1) * map.dim(2);
  bool probabilities = true;
  for (std::size_t p = 0; p < hw && probabilities; ++p) {
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
      const double v = map[k * hw + p];
      if (!std::isfinite(v) || v < -1e-6 || v > 1.0 + 1e-6) probabilities = false;
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-2) probabilities = false;
  }
  for (std::size_t p = 0; p < hw; ++p) {
    if (probabilities) {
      double s = 0.0;
      for (std::size_t k = 0; k < c; ++k) s += std::max<double>(map[k * hw + p], 0.0);
      for (std::size_t k = 0; k < c; ++k) map[k * hw + p] = static_cast<T>(std::max<double>(map[k * hw + p], 0.0) / s);
    } else {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < c; ++k) mx = std::max<double>(mx, map[k * hw + p]);
      double s = 0.0;
      for (std::size_t k = 0; k < c; ++k) s += std::exp(map[k * hw + p] - mx);
      for (std::size_t k = 0; k < c; ++k) map[k * hw + p] = static_cast<T>(std::exp(map[k * hw + p] - mx) / s);
    }
  }
}

}  // namespace detail

/// Reads a semantic prior from an ISAT1 file: one rank-3 record
/// (preferably named `semantic_prior`) with `classes` channels.
/// Files whose pixels already sum to 1 (within 1e-2) are renormalized;
/// anything else is treated as logits and softmaxed over channels.
inline SemanticPrior<float> load_semantic_prior(const std::string& path, std::size_t classes = kSemanticClasses) {
  const auto records = isat::read_file(path);
  const isat::Record* rec = isat::find(records, "semantic_prior");
  if (!rec && records.size() == 1) rec = &records[0];
  if (!rec) throw DataError(path + ": no `semantic_prior` record");
  if (rec->shape.size() != 3) {
    throw DataError(path + ": semantic prior must be rank 3 (classes x H x W), got " + shape_str(rec->shape));
  }
  if (rec->shape[0] != classes) {
    throw DataError(path + ": semantic prior has " + std::to_string(rec->shape[0]) + " channels, expected " +
                    std::to_string(classes));
  }
  SemanticPrior<float> prior{isat::to_tensor<float>(*rec)};
  detail::normalize_class_maps(prior.map);
  return prior;
}

template <class T>
void save_semantic_prior(const std::string& path, const SemanticPrior<T>& prior) {
  isat::write_file(path, {isat::to_record("semantic_prior", prior.map)});
}

/// Deterministic stand-in for a segmentation network: k-means over RGB values
/// (farthest-point seeding from a seeded first pick, 10 Lloyd iterations), then
/// a softmax over negative centre distances with temperature 0.1.
template <class T>
SemanticPrior<T> synthetic_semantic_prior(const BasicTensor<T>& image, std::size_t classes = kSemanticClasses,
                                          std::uint64_t seed = 0) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw ShapeError("synthetic_semantic_prior: expected [3,H,W], got " + shape_str(image.shape()));
  }
  constexpr int kIterations = 10;
  constexpr double kTemperature = 0.1;
  const std::size_t h = image.dim(1), w = image.dim(2), hw = h * w;
  std::vector<std::array<double, 3>> px(hw);
  for (std::size_t p = 0; p < hw; ++p) {
    for (std::size_t c = 0; c < 3; ++c) px[p][c] = std::clamp<double>(image[c * hw + p], 0.0, 1.0);
  }
  auto dist2 = [](const std::array<double, 3>& a, const std::array<double, 3>& b) {
    const double dr = a[0] - b[0], dg = a[1] - b[1], db = a[2] - b[2];
    return dr * dr + dg * dg + db * db;
  };

  std::vector<std::array<double, 3>> centres;
  Rng rng(seed);
  centres.push_back(px[rng.index(hw)]);
  std::vector<double> nearest(hw, std::numeric_limits<double>::infinity());
  while (centres.size() < classes) {
    std::size_t best = 0;
    double best_d = -1.0;
    for (std::size_t p = 0; p < hw; ++p) {
      nearest[p] = std::min(nearest[p], dist2(px[p], centres.back()));
      if (nearest[p] > best_d) {
        best_d = nearest[p];
        best = p;
      }
    }
    centres.push_back(px[best]);
  }

  std::vector<std::size_t> assign(hw);
  for (int it = 0; it < kIterations; ++it) {
    for (std::size_t p = 0; p < hw; ++p) {
      std::size_t arg = 0;
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < classes; ++k) {
        const double d = dist2(px[p], centres[k]);
        if (d < best) {
          best = d;
          arg = k;
        }
      }
      assign[p] = arg;
    }
    std::vector<std::array<double, 3>> sums(classes, {0.0, 0.0, 0.0});
    std::vector<std::size_t> counts(classes, 0);
    for (std::size_t p = 0; p < hw; ++p) {
      for (std::size_t c = 0; c < 3; ++c) sums[assign[p]][c] += px[p][c];
      ++counts[assign[p]];
    }
    for (std::size_t k = 0; k < classes; ++k) {
      if (counts[k] == 0) continue;  // empty cluster keeps its centre
      for (std::size_t c = 0; c < 3; ++c) centres[k][c] = sums[k][c] / static_cast<double>(counts[k]);
    }
  }

  SemanticPrior<T> out{BasicTensor<T>(Shape{classes, h, w})};
  std::vector<double> logits(classes);
  for (std::size_t p = 0; p < hw; ++p) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < classes; ++k) {
      logits[k] = -std::sqrt(dist2(px[p], centres[k])) / kTemperature;
      mx = std::max(mx, logits[k]);
    }
    double s = 0.0;
    for (std::size_t k = 0; k < classes; ++k) s += std::exp(logits[k] - mx);
    for (std::size_t k = 0; k < classes; ++k) out.map[k * hw + p] = static_cast<T>(std::exp(logits[k] - mx) / s);
  }
  return out;
}

/// Learnable per-stage adapters that lift both priors to the stage width:
/// a 1x1 conv on pyramid level k and a 3x3 conv of stride 2^k on the semantic map.
template <class T>
class PriorAdapter {
 public:
  PriorAdapter(ParameterStore<T>& store, const std::string& prefix, std::size_t level, std::size_t width,
               std::size_t classes, Rng& rng)
      : level_(level), width_(width) {
    if (level >= kPyramidLevels) {
      throw ShapeError("PriorAdapter: level " + std::to_string(level) + " out of range [0, 2]");
    }
    illum_kernel_ = store.add(prefix + ".illum", rng.normal_tensor<T>({width, 1, 1, 1}, std::sqrt(2.0)));
    sem_kernel_ =
        store.add(prefix + ".sem", rng.normal_tensor<T>({width, classes, 3, 3}, std::sqrt(2.0 / (9.0 * classes))));
  }

  std::size_t level() const { return level_; }
  std::size_t width() const { return width_; }
  BasicTensor<T>& illum_kernel() { return illum_kernel_; }
  BasicTensor<T>& sem_kernel() { return sem_kernel_; }

  /// Returns (F_Pi, F_Ps), both [N,width,H/2^k,W/2^k].
  std::pair<BasicTensor<T>, BasicTensor<T>> operator()(const IlluminationPyramid<T>& pyramid,
                                                       const BasicTensor<T>& semantic) const {
    const std::size_t stride = std::size_t{1} << level_;
    auto fpi = ops::conv2d(pyramid.levels[level_], illum_kernel_, 1, 0);
    auto fps = ops::conv2d(semantic, sem_kernel_, stride, 1);
    if (fpi.shape() != fps.shape()) {
      throw ShapeError("adapt_priors: illumination features " + shape_str(fpi.shape()) + " and semantic features " +
                       shape_str(fps.shape()) + " disagree at level " + std::to_string(level_));
    }
    return {fpi, fps};
  }

 private:
  std::size_t level_;
  std::size_t width_;
  BasicTensor<T> illum_kernel_;
  BasicTensor<T> sem_kernel_;
};

template <class T>
std::pair<BasicTensor<T>, BasicTensor<T>> adapt_priors(const IlluminationPyramid<T>& pyramid,
                                                       const BasicTensor<T>& semantic, const PriorAdapter<T>& adapter) {
  return adapter(pyramid, semantic);
}

/// Computes the illumination pyramid from an [N,3,H,W] batch and pairs it with
/// the batch's semantic maps.
template <class T>
PriorBundle<T> make_prior_bundle(const BasicTensor<T>& images, const BasicTensor<T>& semantic) {
  if (images.rank() != 4 || semantic.rank() != 4 || images.dim(0) != semantic.dim(0) ||
      images.dim(2) != semantic.dim(2) || images.dim(3) != semantic.dim(3)) {
    throw ShapeError("make_prior_bundle: image " + shape_str(images.shape()) + " and semantic prior " +
                     shape_str(semantic.shape()) + " do not align");
  }
  return {build_pyramid(illumination_prior(images)), semantic.detach()};
}

}  // namespace isalux
