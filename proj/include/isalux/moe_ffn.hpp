// Copyright 2026 The ISALux Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "isalux/ops.hpp"
#include "isalux/rng.hpp"

namespace isalux {

/// conv1x1 (C->E) -> GELU -> conv3x3 (E->E) -> GELU -> conv1x1 (E->C).
template <class T>
class Expert {
 public:
  Expert(ParameterStore<T>& store, const std::string& prefix, std::size_t channels, std::size_t hidden, Rng& rng) {
    expand_ = store.add(prefix + ".expand", rng.normal_tensor<T>({hidden, channels, 1, 1}, std::sqrt(2.0 / channels)));
    mix_ = store.add(prefix + ".mix", rng.normal_tensor<T>({hidden, hidden, 3, 3}, std::sqrt(2.0 / (9.0 * hidden))));
    project_ = store.add(prefix + ".project", rng.normal_tensor<T>({channels, hidden, 1, 1}, std::sqrt(1.0 / hidden)));
  }

  BasicTensor<T> operator()(const BasicTensor<T>& x) const {
    auto h = ops::gelu(ops::conv2d(x, expand_, 1, 0));
    h = ops::gelu(ops::conv2d(h, mix_, 1, 1));
    return ops::conv2d(h, project_, 1, 0);
  }

  BasicTensor<T>& expand() { return expand_; }
  BasicTensor<T>& mix() { return mix_; }
  BasicTensor<T>& project() { return project_; }

 private:
  BasicTensor<T> expand_;
  BasicTensor<T> mix_;
  BasicTensor<T> project_;
};

/// Gating weights W_g (C x N) and the number of experts run per sample.
template <class T>
struct Gate {
  BasicTensor<T> weight;
  std::size_t top_k = 2;

  std::size_t experts() const { return weight.dim(1); }
};

/// G = softmax(avg_pool(F) W_g), one row of N scores per sample: [N_batch, N_experts].
template <class T>
BasicTensor<T> gate_scores(const BasicTensor<T>& f, const Gate<T>& gate) {
  if (f.rank() != 4 || gate.weight.rank() != 2 || gate.weight.dim(0) != f.dim(1)) {
    throw ShapeError("gate_scores: features " + shape_str(f.shape()) + " incompatible with gate " +
                     shape_str(gate.weight.shape()));
  }
  return ops::softmax(ops::matmul(ops::global_avg_pool(f), gate.weight), 1);
}

/// Indices and scores of the k largest entries, largest first; equal scores
/// are ordered by lower index.
template <class T>
std::vector<std::pair<std::size_t, T>> top_k(std::span<const T> scores, std::size_t k) {
  if (k > scores.size()) {
    throw std::invalid_argument("top_k: k = " + std::to_string(k) + " exceeds " + std::to_string(scores.size()) +
                                " candidates");
  }
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<std::pair<std::size_t, T>> out;
  for (std::size_t i = 0; i < k; ++i) out.emplace_back(idx[i], scores[idx[i]]);
  return out;
}

/// Sparse mixture of experts: per sample, only the top-k experts by gate score
/// are evaluated and their outputs summed with the gate scores as weights.
template <class T>
class MoeFfn {
 public:
  MoeFfn(ParameterStore<T>& store, const std::string& prefix, std::size_t channels, std::size_t experts,
         std::size_t top_k, std::size_t hidden, bool renormalize, Rng& rng)
      : renormalize_(renormalize) {
    if (experts == 0 || top_k == 0 || top_k > experts) {
      throw std::invalid_argument("MoeFfn: need 1 <= top_k <= experts, got top_k = " + std::to_string(top_k) +
                                  ", experts = " + std::to_string(experts));
    }
    gate_.top_k = top_k;
    gate_.weight = store.add(prefix + ".gate", rng.normal_tensor<T>({channels, experts}, 0.02));
    for (std::size_t i = 0; i < experts; ++i) {
      experts_.emplace_back(store, prefix + ".expert" + std::to_string(i), channels, hidden, rng);
    }
  }

  BasicTensor<T> operator()(const BasicTensor<T>& f) const {
    auto scores = gate_scores(f, gate_);
    const std::size_t n_exp = experts_.size();
    std::vector<BasicTensor<T>> samples;
    routing_.clear();
    for (std::size_t n = 0; n < f.dim(0); ++n) {
      auto x = f.dim(0) == 1 ? f : ops::slice_batch(f, n);
      std::span<const T> row(scores.data().data() + n * n_exp, n_exp);
      auto chosen = top_k(row, gate_.top_k);
      // Fixed summation order: ascending expert index.
      std::sort(chosen.begin(), chosen.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
      std::vector<BasicTensor<T>> weights;
      for (const auto& [e, s] : chosen) {
        weights.push_back(ops::element(scores, n * n_exp + e));
        routing_.push_back(e);
      }
      if (renormalize_) {
        auto total = weights[0];
        for (std::size_t i = 1; i < weights.size(); ++i) total = ops::add(total, weights[i]);
        for (auto& wgt : weights) wgt = ops::div(wgt, total);
      }
      BasicTensor<T> acc;
      for (std::size_t i = 0; i < chosen.size(); ++i) {
        ++calls_;
        auto y = ops::mul_scalar(experts_[chosen[i].first](x), weights[i]);
        acc = acc.defined() ? ops::add(acc, y) : y;
      }
      samples.push_back(acc);
    }
    return ops::concat_batch(samples);
  }

  /// Number of expert evaluations (one per selected expert per sample) since construction or reset.
  std::size_t expert_calls() const { return calls_; }
  void reset_counter() { calls_ = 0; }
  /// Selected experts of the most recent call, ascending per sample, samples in order.
  const std::vector<std::size_t>& last_routing() const { return routing_; }

  Gate<T>& gate() { return gate_; }
  const Gate<T>& gate() const { return gate_; }
  std::vector<Expert<T>>& experts() { return experts_; }
  bool renormalize() const { return renormalize_; }

 private:
  Gate<T> gate_;
  std::vector<Expert<T>> experts_;
  bool renormalize_;
  mutable std::size_t calls_ = 0;
  mutable std::vector<std::size_t> routing_;
};

}  // namespace isalux
