// Copyright 2026 The ISALux Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "isalux/ops.hpp"
#include "isalux/rng.hpp"

// Hybrid illumination/semantics-aware multi-head self-attention.
//
// Token matrices are [H*W, C]. Attention is channel-transposed: each head forms
// a (C/h)x(C/h) affinity between channels, so cost grows linearly with image area.

namespace isalux {

inline constexpr double kMinTemperature = 1e-4;

/// Low-rank corrections dq = (F alpha_q) beta_q etc. alpha is C x (C/r), beta is (C/r) x C.
template <class T>
struct LoraAdapter {
  BasicTensor<T> alpha_q, alpha_k, alpha_v;
  BasicTensor<T> beta_q, beta_k, beta_v;
  std::size_t rank = 1;

  /// alpha ~ N(0, 0.02), beta = 0, so a fresh adapter is an exact no-op.
  static LoraAdapter create(ParameterStore<T>& store, const std::string& prefix, std::size_t channels, std::size_t rank,
                            Rng& rng) {
    if (rank == 0 || channels % rank != 0) {
      throw ShapeError("LoraAdapter: rank " + std::to_string(rank) + " must divide channel count " +
                       std::to_string(channels));
    }
    const std::size_t inner = channels / rank;
    LoraAdapter a;
    a.rank = rank;
    a.alpha_q = store.add(prefix + ".alpha_q", rng.normal_tensor<T>({channels, inner}, 0.02));
    a.alpha_k = store.add(prefix + ".alpha_k", rng.normal_tensor<T>({channels, inner}, 0.02));
    a.alpha_v = store.add(prefix + ".alpha_v", rng.normal_tensor<T>({channels, inner}, 0.02));
    a.beta_q = store.add(prefix + ".beta_q", BasicTensor<T>(Shape{inner, channels}));
    a.beta_k = store.add(prefix + ".beta_k", BasicTensor<T>(Shape{inner, channels}));
    a.beta_v = store.add(prefix + ".beta_v", BasicTensor<T>(Shape{inner, channels}));
    return a;
  }
};

template <class T>
struct Qkv {
  BasicTensor<T> q, k, v;
};

/// One conv3x3 C -> 3C over a single-sample map [1,C,H,W], split into thirds
/// (Q, K, V in that order) and flattened to [H*W, C] token matrices.
template <class T>
Qkv<T> project_qkv(const BasicTensor<T>& f_in, const BasicTensor<T>& kernel) {
  if (f_in.rank() != 4 || f_in.dim(0) != 1) {
    throw ShapeError("project_qkv: expected a single-sample map [1,C,H,W], got " + shape_str(f_in.shape()));
  }
  const std::size_t c = f_in.dim(1);
  if (kernel.rank() != 4 || kernel.dim(0) != 3 * c) {
    throw ShapeError("project_qkv: kernel " + shape_str(kernel.shape()) + " does not map " + std::to_string(c) +
                     " to " + std::to_string(3 * c) + " channels");
  }
  auto proj = ops::conv2d(f_in, kernel, 1, kernel.dim(2) / 2);
  return {ops::to_tokens(ops::slice_channels(proj, 0, c)), ops::to_tokens(ops::slice_channels(proj, c, c)),
          ops::to_tokens(ops::slice_channels(proj, 2 * c, c))};
}

/// Q' = Q + (F'' alpha_q) beta_q, likewise for K and V. `tokens` is F'' = [H*W, C].
template <class T>
Qkv<T> apply_lora(const BasicTensor<T>& tokens, const Qkv<T>& qkv, const LoraAdapter<T>& lora) {
  const std::size_t c = tokens.dim(1);
  if (lora.alpha_q.dim(0) != c || lora.beta_q.dim(1) != c || lora.alpha_q.dim(1) != lora.beta_q.dim(0) ||
      lora.alpha_q.dim(1) * lora.rank != c) {
    throw ShapeError("apply_lora: adapter " + shape_str(lora.alpha_q.shape()) + "/" + shape_str(lora.beta_q.shape()) +
                     " with rank " + std::to_string(lora.rank) + " does not match " + std::to_string(c) + " channels");
  }
  auto delta = [&](const BasicTensor<T>& alpha, const BasicTensor<T>& beta) {
    return ops::matmul(ops::matmul(tokens, alpha), beta);
  };
  return {ops::add(qkv.q, delta(lora.alpha_q, lora.beta_q)), ops::add(qkv.k, delta(lora.alpha_k, lora.beta_k)),
          ops::add(qkv.v, delta(lora.alpha_v, lora.beta_v))};
}

/// Head i receives columns [i*C/h, (i+1)*C/h).
template <class T>
std::vector<BasicTensor<T>> split_heads(const BasicTensor<T>& x, std::size_t heads) {
  if (x.rank() != 2) throw ShapeError("split_heads: expected [HW, C], got " + shape_str(x.shape()));
  if (heads == 0 || x.dim(1) % heads != 0) {
    throw ShapeError("split_heads: " + std::to_string(heads) + " heads do not divide " + std::to_string(x.dim(1)) +
                     " channels");
  }
  if (heads == 1) return {x};
  const std::size_t width = x.dim(1) / heads;
  std::vector<BasicTensor<T>> out;
  out.reserve(heads);
  for (std::size_t i = 0; i < heads; ++i) out.push_back(ops::slice_cols(x, i * width, width));
  return out;
}

template <class T>
BasicTensor<T> merge_heads(const std::vector<BasicTensor<T>>& heads) {
  return ops::concat_cols(heads);
}

/// A = softmax(Qh^T Kh / T) row-wise, a (C/h)x(C/h) channel affinity.
template <class T>
BasicTensor<T> attention_weights(const BasicTensor<T>& qh, const BasicTensor<T>& kh,
                                 const BasicTensor<T>& temperature) {
  if (qh.rank() != 2 || qh.shape() != kh.shape()) {
    throw ShapeError("attend: Q " + shape_str(qh.shape()) + " and K " + shape_str(kh.shape()) + " must match");
  }
  auto scores = ops::matmul(qh, kh, /*transpose_a=*/true, false);
  return ops::softmax(ops::div_scalar_clamped(scores, temperature, kMinTemperature), 1);
}

/// Mh = Vh A^T, [H*W, C/h].
template <class T>
BasicTensor<T> attend(const BasicTensor<T>& qh, const BasicTensor<T>& kh, const BasicTensor<T>& vh,
                      const BasicTensor<T>& temperature) {
  if (vh.shape() != qh.shape()) {
    throw ShapeError("attend: V " + shape_str(vh.shape()) + " must match Q " + shape_str(qh.shape()));
  }
  return ops::matmul(vh, attention_weights(qh, kh, temperature), false, /*transpose_b=*/true);
}

template <class T>
struct FusionWeights {
  BasicTensor<T> upsilon;  // illumination branch
  BasicTensor<T> omega;    // semantic branch
};

/// M_E = upsilon (M_i * F_Pi) + omega (M_s * F_Ps).
template <class T>
BasicTensor<T> fuse(const BasicTensor<T>& m_i, const BasicTensor<T>& m_s, const BasicTensor<T>& f_pi,
                    const BasicTensor<T>& f_ps, const FusionWeights<T>& w) {
  if (m_i.shape() != m_s.shape() || m_i.shape() != f_pi.shape() || m_i.shape() != f_ps.shape()) {
    throw ShapeError("fuse: maps disagree: M_i " + shape_str(m_i.shape()) + ", M_s " + shape_str(m_s.shape()) +
                     ", F_Pi " + shape_str(f_pi.shape()) + ", F_Ps " + shape_str(f_ps.shape()));
  }
  return ops::add(ops::mul_scalar(ops::mul(m_i, f_pi), w.upsilon), ops::mul_scalar(ops::mul(m_s, f_ps), w.omega));
}

/// One attention branch: its own projection, LoRA adapter and per-head temperatures.
template <class T>
class AttentionBranch {
 public:
  AttentionBranch(ParameterStore<T>& store, const std::string& prefix, std::size_t channels, std::size_t heads,
                  std::size_t lora_rank, Rng& rng)
      : channels_(channels), heads_(heads) {
    if (heads == 0 || channels % heads != 0) {
      throw ShapeError("AttentionBranch: " + std::to_string(heads) + " heads do not divide " +
                       std::to_string(channels) + " channels");
    }
    qkv_kernel_ = store.add(prefix + ".qkv",
                            rng.normal_tensor<T>({3 * channels, channels, 3, 3}, std::sqrt(1.0 / (9.0 * channels))));
    lora_ = LoraAdapter<T>::create(store, prefix + ".lora", channels, lora_rank, rng);
    const double t0 = std::sqrt(static_cast<double>(channels / heads));
    temperature_ = store.add(prefix + ".temperature", BasicTensor<T>(Shape{heads}, static_cast<T>(t0)));
  }

  /// [N,C,H,W] -> [N,C,H,W].
  BasicTensor<T> operator()(const BasicTensor<T>& f_in, bool use_lora) const {
    const std::size_t h = f_in.dim(2), w = f_in.dim(3);
    std::vector<BasicTensor<T>> samples;
    for (std::size_t n = 0; n < f_in.dim(0); ++n) {
      auto x = f_in.dim(0) == 1 ? f_in : ops::slice_batch(f_in, n);
      auto qkv = project_qkv(x, qkv_kernel_);
      if (use_lora) qkv = apply_lora(ops::to_tokens(x), qkv, lora_);
      auto qs = split_heads(qkv.q, heads_);
      auto ks = split_heads(qkv.k, heads_);
      auto vs = split_heads(qkv.v, heads_);
      std::vector<BasicTensor<T>> ms;
      for (std::size_t i = 0; i < heads_; ++i) {
        ms.push_back(attend(qs[i], ks[i], vs[i], heads_ == 1 ? temperature_ : ops::element(temperature_, i)));
      }
      samples.push_back(ops::from_tokens(merge_heads(ms), h, w));
    }
    return ops::concat_batch(samples);
  }

  std::size_t heads() const { return heads_; }
  const BasicTensor<T>& qkv_kernel() const { return qkv_kernel_; }
  LoraAdapter<T>& lora() { return lora_; }
  const LoraAdapter<T>& lora() const { return lora_; }
  BasicTensor<T>& temperature() { return temperature_; }

 private:
  std::size_t channels_;
  std::size_t heads_;
  BasicTensor<T> qkv_kernel_;
  LoraAdapter<T> lora_;
  BasicTensor<T> temperature_;
};

/// Which parts of the attention block are active (ablation switches).
struct AttentionToggles {
  bool use_illumination = true;
  bool use_semantic = true;
  bool use_lora = true;
};

/// Two independent attention branches, each gated elementwise by its prior
/// features, mixed by learnable scalars and projected back by a 1x1 conv.
/// A disabled prior drops its branch. With both disabled the block degrades to
/// plain multi-head attention: upsilon * M_i without prior gating.
template <class T>
class HisaMsa {
 public:
  HisaMsa(ParameterStore<T>& store, const std::string& prefix, std::size_t channels, std::size_t heads,
          std::size_t lora_rank, double upsilon_init, double omega_init, Rng& rng)
      : illum_(store, prefix + ".illum", channels, heads, lora_rank, rng),
        sem_(store, prefix + ".sem", channels, heads, lora_rank, rng) {
    fusion_.upsilon = store.add(prefix + ".upsilon", BasicTensor<T>::scalar(static_cast<T>(upsilon_init)));
    fusion_.omega = store.add(prefix + ".omega", BasicTensor<T>::scalar(static_cast<T>(omega_init)));
    out_proj_ =
        store.add(prefix + ".proj", rng.normal_tensor<T>({channels, channels, 1, 1}, std::sqrt(1.0 / channels)));
  }

  BasicTensor<T> operator()(const BasicTensor<T>& f_in, const BasicTensor<T>& f_pi, const BasicTensor<T>& f_ps,
                            const AttentionToggles& toggles = {}) const {
    if (f_pi.shape() != f_in.shape() || f_ps.shape() != f_in.shape()) {
      throw ShapeError("hisa_msa: prior features " + shape_str(f_pi.shape()) + "/" + shape_str(f_ps.shape()) +
                       " do not match input " + shape_str(f_in.shape()));
    }
    BasicTensor<T> fused;
    if (toggles.use_illumination && toggles.use_semantic) {
      fused = fuse(illum_(f_in, toggles.use_lora), sem_(f_in, toggles.use_lora), f_pi, f_ps, fusion_);
    } else if (toggles.use_illumination) {
      fused = ops::mul_scalar(ops::mul(illum_(f_in, toggles.use_lora), f_pi), fusion_.upsilon);
    } else if (toggles.use_semantic) {
      fused = ops::mul_scalar(ops::mul(sem_(f_in, toggles.use_lora), f_ps), fusion_.omega);
    } else {
      fused = ops::mul_scalar(illum_(f_in, toggles.use_lora), fusion_.upsilon);
    }
    return ops::conv2d(fused, out_proj_, 1, 0);
  }

  AttentionBranch<T>& illumination_branch() { return illum_; }
  AttentionBranch<T>& semantic_branch() { return sem_; }
  FusionWeights<T>& fusion() { return fusion_; }
  BasicTensor<T>& output_projection() { return out_proj_; }

 private:
  AttentionBranch<T> illum_;
  AttentionBranch<T> sem_;
  FusionWeights<T> fusion_;
  BasicTensor<T> out_proj_;
};

}  // namespace isalux
