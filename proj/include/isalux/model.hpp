// Copyright 2026 The ISALux Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "isalux/hisa_msa.hpp"
#include "isalux/moe_ffn.hpp"
#include "isalux/ops.hpp"
#include "isalux/priors.hpp"
#include "isalux/rng.hpp"

namespace isalux {

/// Architecture hyperparameters.
struct ModelConfig {
  std::size_t channels = 16;                   // C, width of level 0
  std::array<std::size_t, 3> blocks{1, 2, 2};  // enc0, enc1, bottleneck; decoder mirrors
  std::size_t lora_rank = 4;
  std::size_t experts = 4;
  std::size_t top_k = 2;
  std::size_t expansion = 2;   // expert hidden width = expansion * width
  std::size_t heads_base = 1;  // heads at level k = 2^k * heads_base
  double upsilon_init = 1.0;
  double omega_init = 0.1;
  bool moe_renormalize = false;
  bool use_illumination = true;
  bool use_semantic = true;
  bool use_lora = true;
  std::size_t semantic_classes = kSemanticClasses;
  std::uint64_t seed = 0;

  std::size_t width(std::size_t level) const { return channels << level; }
  std::size_t heads(std::size_t level) const { return heads_base << level; }

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
    if (channels == 0 || lora_rank == 0 || experts == 0 || top_k == 0 || expansion == 0 || heads_base == 0 ||
        semantic_classes == 0) {
      fail("all counts must be >= 1");
    }
    for (auto b : blocks) {
      if (b == 0) fail("blocks per level must be >= 1");
    }
    if (channels % heads(2) != 0) {
      fail("channels (" + std::to_string(channels) + ") must be divisible by the largest head count (" +
           std::to_string(heads(2)) + ")");
    }
    if (channels % lora_rank != 0) {
      fail("lora_rank (" + std::to_string(lora_rank) + ") must divide channels (" + std::to_string(channels) + ")");
    }
    if (top_k > experts) fail("top_k exceeds expert count");
  }

  AttentionToggles toggles() const { return {use_illumination, use_semantic, use_lora}; }
};

/// F' = F + LN(HISA_MSA(F, F_Pi, F_Ps));  F_out = F' + LN(MOE_FFN(F')).
template <class T>
class TransformerBlock {
 public:
  TransformerBlock(ParameterStore<T>& store, const std::string& prefix, std::size_t level, const ModelConfig& cfg,
                   Rng& rng)
      : level_(level),
        attn_(store, prefix + ".attn", cfg.width(level), cfg.heads(level), cfg.lora_rank, cfg.upsilon_init,
              cfg.omega_init, rng),
        moe_(store, prefix + ".moe", cfg.width(level), cfg.experts, cfg.top_k, cfg.expansion * cfg.width(level),
             cfg.moe_renormalize, rng) {
    const std::size_t w = cfg.width(level);
    ln1_scale_ = store.add(prefix + ".ln1.scale", BasicTensor<T>::ones({w}));
    ln1_shift_ = store.add(prefix + ".ln1.shift", BasicTensor<T>::zeros({w}));
    ln2_scale_ = store.add(prefix + ".ln2.scale", BasicTensor<T>::ones({w}));
    ln2_shift_ = store.add(prefix + ".ln2.shift", BasicTensor<T>::zeros({w}));
  }

  BasicTensor<T> operator()(const BasicTensor<T>& f_in, const BasicTensor<T>& f_pi, const BasicTensor<T>& f_ps,
                            const AttentionToggles& toggles = {}) const {
    auto f_mid = ops::add(f_in, ops::layer_norm(attn_(f_in, f_pi, f_ps, toggles), ln1_scale_, ln1_shift_));
    return ops::add(f_mid, ops::layer_norm(moe_(f_mid), ln2_scale_, ln2_shift_));
  }

  std::size_t level() const { return level_; }
  HisaMsa<T>& attention() { return attn_; }
  MoeFfn<T>& moe() { return moe_; }
  const MoeFfn<T>& moe() const { return moe_; }

 private:
  std::size_t level_;
  HisaMsa<T> attn_;
  MoeFfn<T> moe_;
  BasicTensor<T> ln1_scale_, ln1_shift_, ln2_scale_, ln2_shift_;
};

/// Stride-2 conv3x3 doubling channels: [N,c,h,w] -> [N,2c,h/2,w/2].
template <class T>
BasicTensor<T> downsample(const BasicTensor<T>& f, const BasicTensor<T>& kernel) {
  if (f.rank() != 4 || f.dim(2) % 2 != 0 || f.dim(3) % 2 != 0) {
    throw ShapeError("downsample: extents of " + shape_str(f.shape()) + " must be even");
  }
  return ops::conv2d(f, kernel, 2, 1);
}

/// 2x nearest upsampling followed by a conv1x1 halving channels.
template <class T>
BasicTensor<T> upsample(const BasicTensor<T>& f, const BasicTensor<T>& kernel) {
  return ops::conv2d(ops::nearest_upsample(f, 2), kernel, 1, 0);
}

/// Channel concatenation of decoder and encoder features, then conv1x1 to the level width.
template <class T>
BasicTensor<T> skip_fuse(const BasicTensor<T>& up, const BasicTensor<T>& skip, const BasicTensor<T>& kernel) {
  return ops::conv2d(ops::concat_channels(up, skip), kernel, 1, 0);
}

/// Extents observed at each stage of one forward pass.
struct ShapeTrace {
  Shape input_features, enc0, enc1, bottleneck, dec1, dec0, output;
};

/// U-shaped encoder / bottleneck / decoder of transformer blocks with prior
/// injection at every stage and a global residual from the input image.
template <class T>
class IsaT {
 public:
  struct Stage {
    std::string name;
    std::size_t level;
    PriorAdapter<T> adapter;
    std::vector<TransformerBlock<T>> blocks;
  };

  explicit IsaT(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(mix_seed(cfg_.seed, 0x150A7));
    const std::size_t c = cfg_.channels;
    auto lin = [](std::size_t fan_in) { return std::sqrt(1.0 / static_cast<double>(fan_in)); };

    in_conv_ = store_.add("in_conv", rng.normal_tensor<T>({c, 3, 3, 3}, lin(27)));
    add_stage("enc0", 0, cfg_.blocks[0], rng);
    down_[0] = store_.add("down0", rng.normal_tensor<T>({2 * c, c, 3, 3}, lin(9 * c)));
    add_stage("enc1", 1, cfg_.blocks[1], rng);
    down_[1] = store_.add("down1", rng.normal_tensor<T>({4 * c, 2 * c, 3, 3}, lin(18 * c)));
    add_stage("bot", 2, cfg_.blocks[2], rng);
    up_[1] = store_.add("up1", rng.normal_tensor<T>({2 * c, 4 * c, 1, 1}, lin(4 * c)));
    skip_[1] = store_.add("skip1", rng.normal_tensor<T>({2 * c, 4 * c, 1, 1}, lin(4 * c)));
    add_stage("dec1", 1, cfg_.blocks[1], rng);
    up_[0] = store_.add("up0", rng.normal_tensor<T>({c, 2 * c, 1, 1}, lin(2 * c)));
    skip_[0] = store_.add("skip0", rng.normal_tensor<T>({c, 2 * c, 1, 1}, lin(2 * c)));
    add_stage("dec0", 0, cfg_.blocks[0], rng);
    out_conv_ = store_.add("out_conv", rng.normal_tensor<T>({3, c, 3, 3}, 0.01 * lin(9 * c)));
  }

  IsaT(const IsaT&) = delete;
  IsaT& operator=(const IsaT&) = delete;

  /// I_E = I + refinement. Unclamped so that gradients flow during training.
  BasicTensor<T> forward(const BasicTensor<T>& image, const PriorBundle<T>& priors, ShapeTrace* trace = nullptr) const {
    if (image.rank() != 4 || image.dim(1) != 3) {
      throw ShapeError("isa_t: expected an [N,3,H,W] image batch, got " + shape_str(image.shape()));
    }
    const std::size_t h = image.dim(2), w = image.dim(3);
    if (h % 4 != 0 || w % 4 != 0) {
      throw ShapeError("isa_t: extents " + std::to_string(h) + "x" + std::to_string(w) +
                       " must be divisible by 4 (reflect-pad and crop back)");
    }
    if (priors.semantic.rank() != 4 || priors.semantic.dim(0) != image.dim(0) ||
        priors.semantic.dim(1) != cfg_.semantic_classes || priors.semantic.dim(2) != h || priors.semantic.dim(3) != w) {
      throw ShapeError("isa_t: semantic prior " + shape_str(priors.semantic.shape()) + " does not match image " +
                       shape_str(image.shape()) + " with " + std::to_string(cfg_.semantic_classes) + " classes");
    }
    const auto toggles = cfg_.toggles();
    auto run_stage = [&](const Stage& stage, BasicTensor<T> f) {
      auto [fpi, fps] = stage.adapter(priors.illumination, priors.semantic);
      if (fpi.shape() != f.shape()) {
        throw ShapeError("isa_t: " + stage.name + " prior features " + shape_str(fpi.shape()) +
                         " do not match block features " + shape_str(f.shape()));
      }
      for (const auto& block : stage.blocks) f = block(f, fpi, fps, toggles);
      return f;
    };

    auto f_in = ops::conv2d(image, in_conv_, 1, 1);
    auto enc0 = run_stage(stages_[0], f_in);
    auto enc1 = run_stage(stages_[1], downsample(enc0, down_[0]));
    auto bot = run_stage(stages_[2], downsample(enc1, down_[1]));
    auto dec1 = run_stage(stages_[3], skip_fuse(upsample(bot, up_[1]), enc1, skip_[1]));
    auto dec0 = run_stage(stages_[4], skip_fuse(upsample(dec1, up_[0]), enc0, skip_[0]));
    auto out = ops::add(image, ops::conv2d(dec0, out_conv_, 1, 1));
    if (trace) {
      *trace = {f_in.shape(), enc0.shape(), enc1.shape(), bot.shape(), dec1.shape(), dec0.shape(), out.shape()};
    }
    return out;
  }

  /// Inference: no tape, output clamped to [0,1].
  BasicTensor<T> enhance(const BasicTensor<T>& image, const PriorBundle<T>& priors) const {
    NoGradGuard no_grad;
    auto out = forward(image, priors);
    for (auto& v : out.data()) v = std::clamp(v, T(0), T(1));
    return out;
  }

  const ModelConfig& config() const { return cfg_; }
  ParameterStore<T>& parameters() { return store_; }
  const ParameterStore<T>& parameters() const { return store_; }
  std::vector<Stage>& stages() { return stages_; }
  const std::vector<Stage>& stages() const { return stages_; }

  /// Total expert evaluations across all MoE blocks since the last reset.
  std::size_t expert_calls() const {
    std::size_t total = 0;
    for (const auto& s : stages_) {
      for (const auto& b : s.blocks) total += b.moe().expert_calls();
    }
    return total;
  }

  /// Expert selections of the most recent forward, block by block.
  std::vector<std::size_t> routing() const {
    std::vector<std::size_t> out;
    for (const auto& s : stages_) {
      for (const auto& b : s.blocks)
        out.insert(out.end(), b.moe().last_routing().begin(), b.moe().last_routing().end());
    }
    return out;
  }

 private:
  void add_stage(const std::string& name, std::size_t level, std::size_t count, Rng& rng) {
    Stage stage{name,
                level,
                PriorAdapter<T>(store_, name + ".adapter", level, cfg_.width(level), cfg_.semantic_classes, rng),
                {}};
    for (std::size_t i = 0; i < count; ++i) {
      stage.blocks.emplace_back(store_, name + ".block" + std::to_string(i), level, cfg_, rng);
    }
    stages_.push_back(std::move(stage));
  }

  ModelConfig cfg_;
  ParameterStore<T> store_;
  BasicTensor<T> in_conv_;
  std::vector<Stage> stages_;
  std::array<BasicTensor<T>, 2> down_, up_, skip_;
  BasicTensor<T> out_conv_;
};

/// Human-readable report of stage extents and every named parameter for an
/// input of height x width.
inline std::string describe(const ModelConfig& cfg, std::size_t height = 256, std::size_t width = 256) {
  IsaT<float> model(cfg);
  std::ostringstream os;
  const std::size_t c = cfg.channels;
  os << "ISA-T  C=" << c << "  blocks=[" << cfg.blocks[0] << "," << cfg.blocks[1] << "," << cfg.blocks[2]
     << "]  lora_rank=" << cfg.lora_rank << "  experts=" << cfg.experts << " (top-" << cfg.top_k << ")"
     << "  heads=" << cfg.heads(0) << "/" << cfg.heads(1) << "/" << cfg.heads(2) << "\n";
  os << "input        " << height << " x " << width << " x 3\n";
  auto row = [&](const char* name, std::size_t level) {
    os << std::left << std::setw(13) << name << (height >> level) << " x " << (width >> level) << " x "
       << cfg.width(level) << "\n";
  };
  row("F_in", 0);
  row("F_enc0", 0);
  row("F_enc1", 1);
  row("F_bot", 2);
  row("F_dec1", 1);
  row("F_dec0", 0);
  os << "output       " << height << " x " << width << " x 3\n";
  os << "parameters:\n";
  std::size_t total = 0;
  for (const auto& p : model.parameters().all()) {
    os << "  " << std::left << std::setw(44) << p.name << std::setw(18) << shape_str(p.tensor.shape())
       << p.tensor.numel() << "\n";
    total += p.tensor.numel();
  }
  os << "total parameters: " << total << "\n";
  return os.str();
}

}  // namespace isalux
