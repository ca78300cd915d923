// Copyright 2026 The ISALux Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "isalux/checkpoint.hpp"
#include "isalux/config.hpp"
#include "isalux/image.hpp"
#include "isalux/inference.hpp"
#include "isalux/losses.hpp"
#include "isalux/model.hpp"
#include "isalux/priors.hpp"
#include "isalux/rng.hpp"

namespace isalux {

// ---------------------------------------------------------------------------
// Optimizer

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First and second moments for every parameter of a store, in store order.
template <class T>
struct AdamState {
  AdamConfig config;
  std::vector<BasicTensor<T>> m;
  std::vector<BasicTensor<T>> v;
  std::size_t step = 0;

  static AdamState create(const ParameterStore<T>& params, AdamConfig config = {}) {
    AdamState s;
    s.config = config;
    for (const auto& p : params.all()) {
      s.m.push_back(BasicTensor<T>::zeros(p.tensor.shape()));
      s.v.push_back(BasicTensor<T>::zeros(p.tensor.shape()));
    }
    return s;
  }
};

/// One bias-corrected Adam update. A parameter without a gradient buffer is
/// treated as having zero gradient.
template <class T>
void adam_step(ParameterStore<T>& params, AdamState<T>& state, double lr) {
  auto& all = params.all();
  if (state.m.size() != all.size()) throw std::invalid_argument("adam_step: state does not match parameter store");
  for (auto& p : all) {
    if (!p.tensor.has_grad()) continue;
    for (T g : p.tensor.grad()) {
      if (!std::isfinite(static_cast<double>(g))) throw NumericError("adam_step: non-finite gradient in " + p.name);
    }
  }
  ++state.step;
  const auto& c = state.config;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < all.size(); ++i) {
    auto& w = all[i].tensor;
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    const bool has = w.has_grad();
    for (std::size_t j = 0; j < w.numel(); ++j) {
      const double g = has ? static_cast<double>(w.grad()[j]) : 0.0;
      const double mj = c.beta1 * m[j] + (1.0 - c.beta1) * g;
      const double vj = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      w[j] = static_cast<T>(w[j] - lr * (mj / bc1) / (std::sqrt(vj / bc2) + c.eps));
    }
  }
}

/// Global l2 norm of all gradients; rescales them to `max_norm` when larger
/// (max_norm = 0 only measures).
template <class T>
double clip_grad_norm(ParameterStore<T>& params, double max_norm) {
  double sq = 0.0;
  for (auto& p : params.all()) {
    if (!p.tensor.has_grad()) continue;
    for (T g : p.tensor.grad()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& p : params.all()) {
      if (!p.tensor.has_grad()) continue;
      for (auto& g : p.tensor.grad()) g = static_cast<T>(g * s);
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Learning-rate schedule

/// Piecewise-linear learning rate through (iteration, lr) anchors; constant
/// outside the anchor range.
class LrSchedule {
 public:
  struct Anchor {
    double iter;
    double lr;
  };

  explicit LrSchedule(std::vector<Anchor> anchors) : anchors_(std::move(anchors)) {
    if (anchors_.size() < 2) throw std::invalid_argument("LrSchedule: need at least two anchors");
    for (std::size_t i = 0; i < anchors_.size(); ++i) {
      if (!(anchors_[i].lr > 0)) throw std::invalid_argument("LrSchedule: learning rates must be positive");
      if (i > 0 && !(anchors_[i].iter > anchors_[i - 1].iter)) {
        throw std::invalid_argument("LrSchedule: anchor iterations must be strictly increasing");
      }
    }
  }

  /// 2e-4 -> 3e-4 at 92k -> 2e-4 at 208k -> 1e-6 at 300k.
  static LrSchedule paper() { return LrSchedule({{0, 2e-4}, {92000, 3e-4}, {208000, 2e-4}, {300000, 1e-6}}); }

  /// Anchors from a training config, stretched so the last anchor falls on the
  /// final iteration.
  static LrSchedule from_config(const TrainConfig& cfg) {
    if (cfg.schedule_iters.size() != cfg.schedule_lrs.size()) {
      throw std::invalid_argument("LrSchedule: schedule_iters and schedule_lrs differ in length");
    }
    if (cfg.schedule_iters.empty() || !(cfg.schedule_iters.back() > 0)) {
      throw std::invalid_argument("LrSchedule: last anchor iteration must be positive");
    }
    const double last = cfg.schedule_iters.back(), total = static_cast<double>(cfg.iterations);
    std::vector<Anchor> a;
    for (std::size_t i = 0; i < cfg.schedule_iters.size(); ++i) {
      a.push_back({last == total ? cfg.schedule_iters[i] : cfg.schedule_iters[i] * total / last, cfg.schedule_lrs[i]});
    }
    return LrSchedule(std::move(a));
  }

  double operator()(double iter) const {
    if (iter <= anchors_.front().iter) return anchors_.front().lr;
    if (iter >= anchors_.back().iter) return anchors_.back().lr;
    std::size_t i = 1;
    while (anchors_[i].iter < iter) ++i;
    if (anchors_[i].iter == iter) return anchors_[i].lr;
    const auto& a = anchors_[i - 1];
    const auto& b = anchors_[i];
    return a.lr + (b.lr - a.lr) * (iter - a.iter) / (b.iter - a.iter);
  }

  const std::vector<Anchor>& anchors() const { return anchors_; }

 private:
  std::vector<Anchor> anchors_;
};

inline double lr_at(const LrSchedule& schedule, double iter) { return schedule(iter); }

// ---------------------------------------------------------------------------
// Data

/// A low/normal-light pair and the semantic prior of the low image, all at
/// full resolution: [3,H,W], [3,H,W], [classes,H,W].
struct ImagePair {
  std::string name;
  Tensor low;
  Tensor high;
  Tensor semantic;
};

/// Loads `<dir>/low/*.png` paired with `<dir>/high/*.png` by filename. Semantic
/// priors come from `<dir>/priors/<stem>.isat` when present, otherwise from the
/// synthetic generator seeded per image.
inline std::vector<ImagePair> load_pairs(const std::string& dir, std::size_t classes, std::uint64_t seed,
                                         std::ostream& log) {
  namespace fs = std::filesystem;
  const fs::path root(dir), low_dir = root / "low", high_dir = root / "high", prior_dir = root / "priors";
  if (!fs::is_directory(low_dir) || !fs::is_directory(high_dir)) {
    throw DataError(dir + ": expected subdirectories low/ and high/");
  }
  std::vector<fs::path> lows;
  for (const auto& e : fs::directory_iterator(low_dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") lows.push_back(e.path());
  }
  std::sort(lows.begin(), lows.end());
  std::vector<ImagePair> pairs;
  for (std::size_t i = 0; i < lows.size(); ++i) {
    const auto name = lows[i].filename().string();
    const auto high = high_dir / name;
    if (!fs::exists(high)) {
      log << "warning: " << name << " has no normal-light counterpart; skipped\n";
      continue;
    }
    ImagePair p{name, read_png(lows[i].string()), read_png(high.string()), {}};
    if (p.low.shape() != p.high.shape()) {
      log << "warning: " << name << " low/high extents differ; skipped\n";
      continue;
    }
    const auto prior = prior_dir / (lows[i].stem().string() + ".isat");
    if (fs::exists(prior)) {
      p.semantic = load_semantic_prior(prior.string(), classes).map;
      if (p.semantic.dim(1) != p.low.dim(1) || p.semantic.dim(2) != p.low.dim(2)) {
        throw DataError(prior.string() + ": prior extents " + shape_str(p.semantic.shape()) + " do not match image " +
                        shape_str(p.low.shape()));
      }
    } else {
      p.semantic = synthetic_semantic_prior(p.low, classes, mix_seed(seed, 0x5E3 + i)).map;
    }
    pairs.push_back(std::move(p));
  }
  if (pairs.empty()) throw DataError(dir + ": no usable low/high image pairs");
  return pairs;
}

/// Window [C,size,size] of a [C,H,W] map at (top, left).
template <class T>
BasicTensor<T> crop_patch(const BasicTensor<T>& img, std::size_t top, std::size_t left, std::size_t size) {
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (top + size > h || left + size > w) throw ShapeError("crop_patch: window exceeds " + shape_str(img.shape()));
  BasicTensor<T> out(Shape{c, size, size});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < size; ++y) {
      std::copy_n(img.data().data() + (ch * h + top + y) * w + left, size, out.data().data() + (ch * size + y) * size);
    }
  }
  return out;
}

/// Mirrors a [C,H,W] map left to right.
template <class T>
BasicTensor<T> flip_horizontal(const BasicTensor<T>& img) {
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  BasicTensor<T> out(img.shape());
  for (std::size_t i = 0; i < c * h; ++i) {
    for (std::size_t x = 0; x < w; ++x) out[i * w + x] = img[i * w + (w - 1 - x)];
  }
  return out;
}

/// Rotates a [C,H,W] map by 90 degrees counter-clockwise `quarter_turns` times.
template <class T>
BasicTensor<T> rotate90(const BasicTensor<T>& img, std::size_t quarter_turns) {
  BasicTensor<T> cur = img;
  for (std::size_t t = 0; t < quarter_turns % 4; ++t) {
    const std::size_t c = cur.dim(0), h = cur.dim(1), w = cur.dim(2);
    BasicTensor<T> out(Shape{c, w, h});
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = 0; y < w; ++y) {
        for (std::size_t x = 0; x < h; ++x) out[(ch * w + y) * h + x] = cur[(ch * h + x) * w + (w - 1 - y)];
      }
    }
    cur = out;
  }
  return quarter_turns % 4 == 0 ? img.detach() : cur;
}

/// Mirror (optional) followed by a rotation.
template <class T>
BasicTensor<T> augment(const BasicTensor<T>& img, bool flip, std::size_t quarter_turns) {
  return rotate90(flip ? flip_horizontal(img) : img, quarter_turns);
}

struct Batch {
  Tensor low;       // [B,3,p,p]
  Tensor high;      // [B,3,p,p]
  Tensor semantic;  // [B,classes,p,p]
  std::vector<std::size_t> indices;
};

/// Random aligned patches with identical flips and rotations for the low image,
/// the normal image and the semantic prior.
class PatchSampler {
 public:
  PatchSampler(const std::vector<ImagePair>& pairs, std::size_t patch, std::size_t batch, bool augment,
               std::uint64_t seed, std::ostream* log = nullptr)
      : pairs_(pairs), patch_(patch), batch_(batch), augment_(augment), rng_(seed) {
    for (std::size_t i = 0; i < pairs_.size(); ++i) {
      if (pairs_[i].low.dim(1) >= patch && pairs_[i].low.dim(2) >= patch) {
        usable_.push_back(i);
      } else if (log) {
        *log << "warning: " << pairs_[i].name << " (" << pairs_[i].low.dim(1) << "x" << pairs_[i].low.dim(2)
             << ") is smaller than the " << patch << "px patch; skipped\n";
      }
    }
    if (usable_.empty()) throw DataError("no image is at least " + std::to_string(patch) + "px on each side");
  }

  Batch next() {
    std::vector<Tensor> lows, highs, sems;
    Batch b;
    for (std::size_t i = 0; i < batch_; ++i) {
      const std::size_t idx = usable_[rng_.index(usable_.size())];
      const auto& p = pairs_[idx];
      const std::size_t top = rng_.index(p.low.dim(1) - patch_ + 1);
      const std::size_t left = rng_.index(p.low.dim(2) - patch_ + 1);
      const bool flip = augment_ && rng_.index(2) == 1;
      const std::size_t turns = augment_ ? rng_.index(4) : 0;
      lows.push_back(augment(crop_patch(p.low, top, left, patch_), flip, turns));
      highs.push_back(augment(crop_patch(p.high, top, left, patch_), flip, turns));
      sems.push_back(augment(crop_patch(p.semantic, top, left, patch_), flip, turns));
      b.indices.push_back(idx);
    }
    b.low = stack(lows);
    b.high = stack(highs);
    b.semantic = stack(sems);
    return b;
  }

  const std::vector<std::size_t>& usable() const { return usable_; }
  std::string state() const { return rng_.state(); }
  void restore(const std::string& s) { rng_.restore(s); }

  /// [C,H,W] maps -> [N,C,H,W].
  static Tensor stack(const std::vector<Tensor>& maps) {
    Shape s{maps.size()};
    s.insert(s.end(), maps[0].shape().begin(), maps[0].shape().end());
    Tensor out(s);
    const std::size_t n = maps[0].numel();
    for (std::size_t i = 0; i < maps.size(); ++i) std::copy_n(maps[i].data().data(), n, out.data().data() + i * n);
    return out;
  }

 private:
  const std::vector<ImagePair>& pairs_;
  std::size_t patch_;
  std::size_t batch_;
  bool augment_;
  Rng rng_;
  std::vector<std::size_t> usable_;
};

// ---------------------------------------------------------------------------
// Training loop

struct StepStats {
  std::size_t iter = 0;  // completed iterations after this step
  double lr = 0.0;
  double l2 = 0.0;
  double perc = 0.0;
  double msssim = 0.0;
  double total = 0.0;
  double grad_norm = 0.0;
};

inline std::string format_log_row(const StepStats& s) {
  std::ostringstream os;
  os << s.iter << std::setprecision(9) << ',' << s.lr << ',' << s.l2 << ',' << s.perc << ',' << s.msssim << ','
     << s.total;
  return os.str();
}

inline constexpr const char* kLossLogHeader = "iter,lr,l2,perc,msssim,total";

class Trainer {
 public:
  Trainer(const RunConfig& cfg, std::vector<ImagePair> pairs, std::ostream& log)
      : cfg_(cfg),
        pairs_(std::move(pairs)),
        log_(log),
        model_(cfg.model),
        extractor_(cfg.perceptual_weights.empty() ? FeatureExtractor<float>()
                                                  : FeatureExtractor<float>::load(cfg.perceptual_weights)),
        adam_(AdamState<float>::create(model_.parameters())),
        schedule_(LrSchedule::from_config(cfg.train)),
        sampler_(pairs_, cfg.train.patch, cfg.train.batch, cfg.train.augment, mix_seed(cfg.model.seed, 0xDA7A), &log) {
    cfg_.validate();
  }
  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  StepStats step() {
    auto batch = sampler_.next();
    StepStats s;
    s.lr = schedule_(static_cast<double>(iter_));
    model_.parameters().zero_grad();
    auto priors = make_prior_bundle(batch.low, batch.semantic);
    auto out = model_.forward(batch.low, priors);
    auto loss = hybrid_loss(out, batch.high, cfg_.loss, extractor_);
    s.total = loss.total.item();
    s.l2 = loss.l2;
    s.perc = loss.perc;
    s.msssim = loss.msssim;
    if (!std::isfinite(s.total)) {
      std::ostringstream os;
      os << "non-finite loss at iteration " << iter_ + 1 << "; batch images:";
      for (auto i : batch.indices) os << ' ' << i << " (" << pairs_[i].name << ")";
      log_ << os.str() << "\n";
      Tape<float>::current().clear();
      throw NumericError(os.str());
    }
    backward(loss.total);
    s.grad_norm = clip_grad_norm(model_.parameters(), cfg_.train.grad_clip);
    adam_step(model_.parameters(), adam_, s.lr);
    s.iter = ++iter_;
    return s;
  }

  /// Trains until the configured iteration count (or `stop_at`, if smaller),
  /// writing `loss.csv`, periodic `ckpt_NNNNNN.isat` and a final `final.isat`.
  void run(const std::string& out_dir, std::size_t stop_at = 0) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    const std::size_t end = stop_at ? std::min(stop_at, cfg_.train.iterations) : cfg_.train.iterations;
    const auto log_path = (fs::path(out_dir) / "loss.csv").string();
    std::vector<std::string> kept = existing_rows(log_path);
    std::ofstream csv(log_path, std::ios::trunc);
    csv << kLossLogHeader << "\n";
    for (const auto& r : kept) csv << r << "\n";
    while (iter_ < end) {
      const auto s = step();
      csv << format_log_row(s) << "\n";
      if (s.iter % cfg_.train.checkpoint_every == 0) {
        char name[32];
        std::snprintf(name, sizeof name, "ckpt_%06zu.isat", s.iter);
        save_checkpoint((fs::path(out_dir) / name).string());
        csv.flush();
      }
      if (s.iter == 1 || s.iter % std::max<std::size_t>(1, end / 20) == 0 || s.iter == end) {
        log_ << "iter " << s.iter << "/" << cfg_.train.iterations << "  lr " << s.lr << "  loss " << s.total << "  (l2 "
             << s.l2 << ", perc " << s.perc << ", 1-msssim " << s.msssim << ")\n";
      }
    }
    if (iter_ == cfg_.train.iterations) save_checkpoint((fs::path(out_dir) / "final.isat").string());
  }

  /// Parameters, optimizer moments and sampler state.
  void save_checkpoint(const std::string& path) const {
    auto records = model_records(model_, cfg_);
    const auto& params = model_.parameters().all();
    for (std::size_t i = 0; i < params.size(); ++i) {
      records.push_back(isat::to_record("adam.m." + params[i].name, adam_.m[i]));
      records.push_back(isat::to_record("adam.v." + params[i].name, adam_.v[i]));
    }
    records.push_back(isat::text_record("train_state", "iter=" + std::to_string(iter_) +
                                                           "\nadam_step=" + std::to_string(adam_.step) +
                                                           "\nsampler=" + sampler_.state() + "\n"));
    isat::write_file(path, records);
  }

  /// Restores a checkpoint written by `save_checkpoint`. The configuration
  /// stored in the checkpoint must equal this trainer's.
  void resume(const std::string& path) {
    auto ck = read_checkpoint(path);
    if (serialize_config(ck.config) != serialize_config(cfg_)) {
      throw DataError(path + ": checkpoint configuration differs from the requested run");
    }
    load_weights(model_, ck.records, path);
    const auto& params = model_.parameters().all();
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto* m = isat::find(ck.records, "adam.m." + params[i].name);
      const auto* v = isat::find(ck.records, "adam.v." + params[i].name);
      if (!m || !v) throw DataError(path + ": missing optimizer state for " + params[i].name);
      adam_.m[i] = isat::to_tensor<float>(*m);
      adam_.v[i] = isat::to_tensor<float>(*v);
    }
    const auto* st = isat::find(ck.records, "train_state");
    if (!st) throw DataError(path + ": missing train_state record");
    std::istringstream in(isat::record_text(*st));
    std::string line;
    while (std::getline(in, line)) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      const auto key = line.substr(0, eq), value = line.substr(eq + 1);
      if (key == "iter") iter_ = std::stoull(value);
      if (key == "adam_step") adam_.step = std::stoull(value);
      if (key == "sampler") sampler_.restore(value);
    }
  }

  std::size_t iteration() const { return iter_; }
  IsaT<float>& model() { return model_; }
  const IsaT<float>& model() const { return model_; }
  const RunConfig& config() const { return cfg_; }
  const std::vector<ImagePair>& pairs() const { return pairs_; }
  const LrSchedule& schedule() const { return schedule_; }

 private:
  std::vector<std::string> existing_rows(const std::string& path) const {
    std::vector<std::string> rows;
    if (iter_ == 0) return rows;
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (std::stoull(line.substr(0, line.find(','))) <= iter_) rows.push_back(line);
    }
    return rows;
  }

  RunConfig cfg_;
  std::vector<ImagePair> pairs_;
  std::ostream& log_;
  IsaT<float> model_;
  FeatureExtractor<float> extractor_;
  AdamState<float> adam_;
  LrSchedule schedule_;
  PatchSampler sampler_;
  std::size_t iter_ = 0;
};

/// PSNR / SSIM / MS-SSIM of the model's full-image output on each pair.
inline std::vector<ImageMetrics> evaluate_pairs(const IsaT<float>& model, const std::vector<ImagePair>& pairs) {
  std::vector<ImageMetrics> out;
  for (const auto& p : pairs) {
    auto pred = enhance_image(model, p.low, p.semantic);
    out.push_back(image_metrics(ops::reshape(pred, {1, 3, pred.dim(1), pred.dim(2)}),
                                ops::reshape(p.high, {1, 3, p.high.dim(1), p.high.dim(2)})));
  }
  return out;
}

}  // namespace isalux
