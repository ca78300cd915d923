// Copyright 2026 The ISALux Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <string>

#include "isalux/model.hpp"
#include "isalux/priors.hpp"

namespace isalux {

/// Reflect-pads a [C,H,W] image on the bottom and right so both extents are
/// multiples of `multiple`.
template <class T>
BasicTensor<T> reflect_pad(const BasicTensor<T>& img, std::size_t multiple) {
  if (img.rank() != 3) throw ShapeError("reflect_pad: expected [C,H,W], got " + shape_str(img.shape()));
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  const std::size_t ph = (h + multiple - 1) / multiple * multiple, pw = (w + multiple - 1) / multiple * multiple;
  if (ph == h && pw == w) return img.detach();
  if ((ph - h >= h && h > 1) || (pw - w >= w && w > 1)) {
    throw ShapeError("reflect_pad: image " + shape_str(img.shape()) + " too small to pad to a multiple of " +
                     std::to_string(multiple));
  }
  auto reflect = [](std::size_t i, std::size_t n) { return n == 1 ? 0 : (i < n ? i : 2 * (n - 1) - i); };
  BasicTensor<T> out(Shape{c, ph, pw});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < ph; ++y) {
      for (std::size_t x = 0; x < pw; ++x)
        out[(ch * ph + y) * pw + x] = img[(ch * h + reflect(y, h)) * w + reflect(x, w)];
    }
  }
  return out;
}

/// Top-left [C,h,w] window of a [C,H,W] image.
template <class T>
BasicTensor<T> crop_image(const BasicTensor<T>& img, std::size_t h, std::size_t w) {
  const std::size_t c = img.dim(0), H = img.dim(1), W = img.dim(2);
  if (h > H || w > W) throw ShapeError("crop_image: window exceeds " + shape_str(img.shape()));
  BasicTensor<T> out(Shape{c, h, w});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < h; ++y) {
      std::copy_n(img.data().data() + (ch * H + y) * W, w, out.data().data() + (ch * h + y) * w);
    }
  }
  return out;
}

/// Enhances one [3,H,W] image with its [classes,H,W] semantic prior: reflect-pads
/// to a multiple of 4, runs the model without gradients, crops back and clamps.
template <class T>
BasicTensor<T> enhance_image(const IsaT<T>& model, const BasicTensor<T>& image, const BasicTensor<T>& semantic) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw ShapeError("enhance_image: expected [3,H,W], got " + shape_str(image.shape()));
  }
  if (semantic.rank() != 3 || semantic.dim(1) != image.dim(1) || semantic.dim(2) != image.dim(2)) {
    throw ShapeError("enhance_image: semantic prior " + shape_str(semantic.shape()) + " does not match image " +
                     shape_str(image.shape()));
  }
  NoGradGuard no_grad;
  const std::size_t h = image.dim(1), w = image.dim(2);
  auto img = reflect_pad(image, 4);
  auto sem = reflect_pad(semantic, 4);
  const std::size_t ph = img.dim(1), pw = img.dim(2);
  auto batch = ops::reshape(img, {1, 3, ph, pw});
  auto sem_batch = ops::reshape(sem, {1, sem.dim(0), ph, pw});
  auto out = model.enhance(batch, make_prior_bundle(batch, sem_batch));
  return crop_image(ops::reshape(out, {3, ph, pw}), h, w);
}

}  // namespace isalux
