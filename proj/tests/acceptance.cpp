// Copyright 2026 The ISALux Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fail.
//
//   acceptance [--work-dir DIR] [--only NAME]... [--list]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>

#include "CLI11.hpp"
#include "isalux/commands.hpp"
#include "isalux/hisa_msa.hpp"
#include "isalux/losses.hpp"
#include "isalux/model.hpp"
#include "isalux/moe_ffn.hpp"
#include "isalux/priors.hpp"
#include "isalux/trainer.hpp"
#include "support.hpp"

namespace isalux {
namespace {

namespace fs = std::filesystem;
using testing::Tensor64;

struct Outcome {
  bool pass = true;
  std::string detail;
};

// Accumulates failed checks; the first few messages end up in the report.
class Checks {
 public:
  void expect(bool ok, const std::string& what) {
    ++count_;
    if (ok) return;
    ++failed_;
    if (failed_ <= 3) msgs_ += (msgs_.empty() ? "" : "; ") + what;
  }
  Outcome outcome(const std::string& summary) const {
    if (failed_ == 0) return {true, summary};
    return {false, std::to_string(failed_) + "/" + std::to_string(count_) + " checks failed: " + msgs_};
  }

 private:
  std::size_t count_ = 0, failed_ = 0;
  std::string msgs_;
};

std::string fmt(double v, int prec = 3) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------

Outcome gradient_integrity(const fs::path&) {
  const auto t0 = std::chrono::steady_clock::now();
  ModelConfig cfg;
  cfg.channels = 8;
  cfg.blocks = {1, 1, 1};
  IsaT<double> model(cfg);
  Rng rng(21);
  // Nonzero LoRA output factors so the adapter paths carry gradient.
  for (auto& p : model.parameters().all())
    if (p.name.find("beta") != std::string::npos)
      for (auto& v : p.tensor.data()) v = rng.normal(0, 0.05);
  auto img = rng.uniform_tensor<double>({1, 3, 16, 16}, 0.0, 0.6);
  auto pri = make_prior_bundle(img, rng.uniform_tensor<double>({1, kSemanticClasses, 16, 16}, 0.0, 1.0));
  auto loss = [&] { return testing::probe(model.forward(img, pri), 77); };

  model.parameters().zero_grad();
  backward(loss());
  NoGradGuard no_grad;
  const auto base_routing = model.routing();

  const double h = 1e-4, floor = 1e-6, tol = 1e-3;
  double worst = 0, worst_a = 0, worst_n = 0;
  std::string worst_name;
  std::size_t checked = 0, tensors = 0, retried = 0, unresolved = 0;
  auto record = [&](double a, double n, const std::string& name) {
    const double rel = std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
    if (rel > worst) worst = rel, worst_a = a, worst_n = n, worst_name = name;
    ++checked;
  };
  for (auto& p : model.parameters().all()) {
    auto& x = p.tensor;
    const std::size_t n = x.numel();
    std::vector<double> g(n, 0.0);
    if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), g.begin());
    // Fourth-order central stencil. A step that changes the expert routing
    // straddles a top-k switch; retry with a smaller step.
    auto central = [&](const std::function<void(double)>& shift) {
      for (double step = h;; step /= 4) {
        bool same = true;
        auto eval = [&](double d) {
          shift(d);
          const double v = loss().item();
          shift(-d);
          same = same && model.routing() == base_routing;
          return v;
        };
        const double f2 = eval(2 * step), f1 = eval(step), m1 = eval(-step), m2 = eval(-2 * step);
        if (same || step < 1e-7) {
          if (!same) ++unresolved;
          if (step < h) ++retried;
          return (m2 - 8 * m1 + 8 * f1 - f2) / (12 * step);
        }
      }
    };
    // Elements: all of them for small tensors, else the 16 largest |g| and 16 random ones.
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    if (n > 32) {
      std::partial_sort(idx.begin(), idx.begin() + 16, idx.end(),
                        [&](std::size_t a, std::size_t b) { return std::abs(g[a]) > std::abs(g[b]); });
      for (std::size_t i = 16; i < 32; ++i) std::swap(idx[i], idx[i + rng.index(n - i)]);
      idx.resize(32);
    }
    for (std::size_t i : idx) {
      const double saved = x[i];
      const double num = central([&](double d) { x[i] += d; });
      x[i] = saved;
      record(g[i], num, p.name + "[" + std::to_string(i) + "]");
    }
    // Directional derivative along a random unit vector covering every element.
    auto dir = rng.uniform_tensor<double>(x.shape(), -1, 1);
    double norm = 0;
    for (double v : dir.data()) norm += v * v;
    norm = std::sqrt(norm);
    double analytic = 0;
    for (std::size_t i = 0; i < n; ++i) analytic += g[i] * dir[i] / norm;
    const auto saved = x.detach();
    const double num = central([&](double d) {
      for (std::size_t i = 0; i < n; ++i) x[i] += d * dir[i] / norm;
    });
    for (std::size_t i = 0; i < n; ++i) x[i] = saved[i];
    record(analytic, num, p.name + " (direction)");
    ++tensors;
  }
  const double secs = seconds_since(t0);
  Checks c;
  c.expect(worst <= tol, "max rel error " + fmt(worst) + " at " + worst_name + " (analytic " + fmt(worst_a, 9) +
                             ", numeric " + fmt(worst_n, 9) + ")");
  c.expect(secs <= 300, "runtime " + fmt(secs) + " s > 300 s");
  c.expect(unresolved == 0, std::to_string(unresolved) + " probes straddle a routing switch at every step");
  return c.outcome(std::to_string(tensors) + " tensors, " + std::to_string(checked) + " probes (" +
                   std::to_string(retried) + " at reduced step), max rel " + fmt(worst) + " (" + worst_name + "), " +
                   fmt(secs) + " s");
}

Outcome lora_zero_init(const fs::path&) {
  auto cfg = RunConfig::desk().model;
  IsaT<float> with(cfg);
  cfg.use_lora = false;
  IsaT<float> without(cfg);
  Checks c;
  for (const auto& p : with.parameters().all())
    if (p.name.find("beta") != std::string::npos)
      for (float v : p.tensor.data()) c.expect(v == 0.0f, p.name + " not zero at init");
  Rng rng(31);
  for (int i = 0; i < 10; ++i) {
    const std::size_t h = 16 + 8 * rng.index(4), w = 16 + 8 * rng.index(4);
    auto img = rng.uniform_tensor<float>({1, 3, h, w}, 0.0, 1.0);
    auto pri = make_prior_bundle(img, rng.uniform_tensor<float>({1, kSemanticClasses, h, w}, 0.0, 1.0));
    c.expect(with.enhance(img, pri).storage() == without.enhance(img, pri).storage(),
             "input " + std::to_string(i) + " differs");
  }
  return c.outcome("10 inputs bitwise identical");
}

Outcome moe_sparsity(const fs::path&) {
  Checks c;
  ParameterStore<float> store;
  Rng rng(41);
  MoeFfn<float> moe(store, "moe", 16, 4, 2, 32, false, rng);
  for (auto& w : moe.gate().weight.data()) w = static_cast<float>(rng.normal(0, 1));
  double worst_sum = 0;
  auto oracle = [](std::vector<double> s, std::size_t k) {
    std::vector<std::size_t> order(s.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
    order.resize(k);
    return order;
  };
  for (int i = 0; i < 100; ++i) {
    auto f = rng.uniform_tensor<float>({1, 16, 8, 8}, -1, 1);
    moe.reset_counter();
    moe(f);
    c.expect(moe.expert_calls() == 2,
             "input " + std::to_string(i) + ": " + std::to_string(moe.expert_calls()) + " expert evaluations");
    const auto g = gate_scores(f, moe.gate());
    double s = 0;
    for (float v : g.data()) s += v;
    worst_sum = std::max(worst_sum, std::abs(s - 1.0));
    const auto got = top_k<float>(g.data(), 2);
    const auto want = oracle(std::vector<double>(g.data().begin(), g.data().end()), 2);
    c.expect(got[0].first == want[0] && got[1].first == want[1],
             "top-2 differs from sort on input " + std::to_string(i));
  }
  c.expect(worst_sum <= 1e-6, "gate sum off by " + fmt(worst_sum));
  const std::vector<float> tie(4, 0.25f);
  const auto t = top_k<float>(tie, 2);
  const auto want = oracle({0.25, 0.25, 0.25, 0.25}, 2);
  c.expect(t[0].first == want[0] && t[1].first == want[1], "uniform tie selection differs from sort");

  // Inside the full model: two expert evaluations per block per sample.
  ModelConfig mc;
  mc.channels = 8;
  mc.blocks = {1, 1, 1};
  IsaT<float> model(mc);
  auto img = rng.uniform_tensor<float>({1, 3, 16, 16}, 0, 1);
  const auto before = model.expert_calls();
  model.enhance(img, make_prior_bundle(img, rng.uniform_tensor<float>({1, kSemanticClasses, 16, 16}, 0, 1)));
  c.expect(model.expert_calls() - before == 5 * 2,
           "model expert calls " + std::to_string(model.expert_calls() - before));
  return c.outcome("100 inputs x 2 evaluations, max |sum-1| " + fmt(worst_sum) + ", tie -> {0,1}");
}

Outcome attention_contracts(const fs::path&) {
  Checks c;
  Rng rng(51);
  double worst_row = 0, worst_oracle = 0, worst_mean = 0;
  for (int trial = 0; trial < 20; ++trial) {
    auto q = rng.uniform_tensor<double>({6, 3}, -2, 2), k = rng.uniform_tensor<double>({6, 3}, -2, 2),
         v = rng.uniform_tensor<double>({6, 3}, -2, 2);
    const double t = rng.uniform(0.2, 3.0);
    Tensor64 temp(Shape{1}, t);
    const auto a = attention_weights(q, k, temp);
    for (std::size_t i = 0; i < 3; ++i)
      worst_row = std::max(worst_row, std::abs(a[i * 3] + a[i * 3 + 1] + a[i * 3 + 2] - 1));
    // Scalar triple loop.
    const auto m = attend(q, k, v, temp);
    for (std::size_t i = 0; i < 3; ++i) {
      double s[3], mx = -1e300, z = 0;
      for (std::size_t j = 0; j < 3; ++j) {
        s[j] = 0;
        for (std::size_t p = 0; p < 6; ++p) s[j] += q[p * 3 + i] * k[p * 3 + j];
        s[j] /= t;
        mx = std::max(mx, s[j]);
      }
      for (double& x : s) z += (x = std::exp(x - mx));
      for (std::size_t p = 0; p < 6; ++p) {
        double ref = 0;
        for (std::size_t j = 0; j < 3; ++j) ref += v[p * 3 + j] * s[j] / z;
        worst_oracle = std::max(worst_oracle, std::abs(m[p * 3 + i] - ref));
      }
    }
    Tensor64 hot(Shape{1}, 1e5);
    const auto flat = attend(q, k, v, hot);
    for (std::size_t p = 0; p < 6; ++p) {
      const double mean = (v[p * 3] + v[p * 3 + 1] + v[p * 3 + 2]) / 3;
      for (std::size_t i = 0; i < 3; ++i) worst_mean = std::max(worst_mean, std::abs(flat[p * 3 + i] - mean));
    }
  }
  c.expect(worst_row <= 1e-6, "row sum off by " + fmt(worst_row));
  c.expect(worst_oracle <= 1e-5, "oracle mismatch " + fmt(worst_oracle));
  c.expect(worst_mean <= 1e-3, "large-T deviation " + fmt(worst_mean));
  return c.outcome("rows " + fmt(worst_row) + ", oracle " + fmt(worst_oracle) + ", large-T " + fmt(worst_mean));
}

Outcome shape_chain(const fs::path&) {
  Checks c;
  ModelConfig cfg;
  cfg.channels = 8;
  cfg.blocks = {1, 1, 1};
  IsaT<float> model(cfg);
  const std::size_t ch = cfg.channels;
  Rng rng(61);
  for (std::size_t s : {16u, 32u, 64u}) {
    auto img = rng.uniform_tensor<float>({1, 3, s, s}, 0, 1);
    auto pri = make_prior_bundle(img, rng.uniform_tensor<float>({1, kSemanticClasses, s, s}, 0, 1));
    ShapeTrace tr;
    Shape out;
    {
      NoGradGuard ng;
      out = model.forward(img, pri, &tr).shape();
    }
    const std::string at = " at " + std::to_string(s);
    c.expect(tr.enc0 == Shape{1, ch, s, s}, "enc0" + at);
    c.expect(tr.enc1 == Shape{1, 2 * ch, s / 2, s / 2}, "enc1" + at);
    c.expect(tr.bottleneck == Shape{1, 4 * ch, s / 4, s / 4}, "bottleneck " + shape_str(tr.bottleneck) + at);
    c.expect(tr.dec1 == Shape{1, 2 * ch, s / 2, s / 2}, "dec1" + at);
    c.expect(tr.dec0 == Shape{1, ch, s, s}, "dec0" + at);
    c.expect(out == img.shape(), "output" + at);
  }
  return c.outcome("16/32/64: bottleneck H/4 x W/4 x 4C, output = input");
}

Outcome illumination(const fs::path&) {
  Checks c;
  Rng rng(71);
  auto img = rng.uniform_tensor<float>({3, 25, 40}, 0, 1);  // 1000 pixels
  const auto p = illumination_prior(img);
  std::size_t exact = 0;
  for (std::size_t i = 0; i < 1000; ++i) {
    const float m = std::max({img[i], img[1000 + i], img[2000 + i]});
    exact += p[i] == 1.0f - m;
  }
  c.expect(exact == 1000, std::to_string(1000 - exact) + " pixels differ");
  for (std::size_t s : {16u, 48u, 64u}) {
    auto pyr = build_pyramid(illumination_prior(rng.uniform_tensor<float>({2, 3, s, s + 8}, 0, 1)));
    for (std::size_t l = 0; l < 3; ++l)
      c.expect(pyr.levels[l].shape() == Shape{2, 1, s >> l, (s + 8) >> l}, "pyramid level " + std::to_string(l));
  }
  return c.outcome("1000/1000 pixels exact; levels 1, 1/2, 1/4");
}

Outcome loss_suite(const fs::path&) {
  Checks c;
  FeatureExtractor<float> fx;
  HybridLossConfig cfg;
  cfg.msssim_scales = 3;
  cfg.msssim_weights = default_msssim_weights(3);
  const auto x = ops::reshape(testing::pattern_image(64, 64, 3), {1, 3, 64, 64});
  const double hyb = hybrid_loss(x, x, cfg, fx).total.item();
  c.expect(std::abs(hyb) <= 1e-6, "hybrid(x,x) = " + fmt(hyb));
  Tensor t(Shape{1, 3, 16, 16}, 0.4f), off(Shape{1, 3, 16, 16}, 0.5f);
  const double ps = psnr(off, t);
  c.expect(std::abs(ps - 20.0) <= 0.01, "psnr = " + fmt(ps, 6));
  const auto big = ops::reshape(testing::pattern_image(176, 176, 4), {1, 3, 176, 176});
  const double ms = ms_ssim(big, big, 5, default_msssim_weights(5)).item();
  c.expect(std::abs(ms - 1.0) <= 1e-6, "ms_ssim(x,x) = " + fmt(ms, 9));
  const auto y = ops::reshape(testing::pattern_image(64, 64, 5), {1, 3, 64, 64});
  const double d = std::abs(ms_ssim(x, y, 1, {1.0}).item() - ssim(x, y).item());
  c.expect(d <= 1e-6, "M=1 vs SSIM differ by " + fmt(d));
  return c.outcome("hybrid " + fmt(hyb) + ", psnr " + fmt(ps, 6) + " dB, ms-ssim " + fmt(ms, 9) + ", |M1-SSIM| " +
                   fmt(d));
}

void write_overfit_pair(const fs::path& dir) {
  fs::create_directories(dir / "low");
  fs::create_directories(dir / "high");
  Rng rng(1);
  Tensor hi(Shape{3, 64, 64}), lo(Shape{3, 64, 64});
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x < 64; ++x) {
      const double u = x / 63.0, v = y / 63.0;
      const double base[3] = {0.5 + 0.4 * std::sin(6 * u + 1), 0.5 + 0.4 * std::cos(5 * v), 0.3 + 0.5 * u * v};
      for (std::size_t c = 0; c < 3; ++c) {
        const double h = std::clamp(base[c] + 0.1 * rng.uniform(), 0.0, 1.0);
        hi[(c * 64 + y) * 64 + x] = static_cast<float>(h);
        lo[(c * 64 + y) * 64 + x] =
            static_cast<float>(std::clamp(0.15 * std::pow(h, 1.2) + 0.01 * rng.uniform(), 0.0, 1.0));
      }
    }
  write_png((dir / "high" / "pair.png").string(), hi);
  write_png((dir / "low" / "pair.png").string(), lo);
}

Outcome overfit(const fs::path& work) {
  const auto data = work / "overfit_data";
  write_overfit_pair(data);
  auto cfg = RunConfig::desk();
  cfg.model.seed = 0;
  cfg.train.iterations = 500;
  cfg.train.batch = 1;
  cfg.train.augment = false;
  cfg.train.checkpoint_every = 500;
  std::ostringstream log;
  auto pairs = load_pairs(data.string(), cfg.model.semantic_classes, cfg.model.seed, log);
  const auto t0 = std::chrono::steady_clock::now();
  Trainer trainer(cfg, pairs, log);
  trainer.run((work / "overfit_run").string());
  const double secs = seconds_since(t0);
  const auto m = evaluate_pairs(trainer.model(), pairs).front();
  Checks c;
  c.expect(m.psnr >= 30.0, "train-pair PSNR " + fmt(m.psnr, 4) + " dB < 30");
  c.expect(secs <= 600, "runtime " + fmt(secs) + " s > 600 s");
  return c.outcome("PSNR " + fmt(m.psnr, 4) + " dB after 500 iterations in " + fmt(secs) + " s");
}

Outcome determinism(const fs::path& work) {
  const auto data = work / "determinism_data";
  testing::write_pair_dataset(data, 4, 96, 96, 11);
  const auto cfg = RunConfig::desk();
  const auto t0 = std::chrono::steady_clock::now();
  for (const char* run : {"run_a", "run_b"}) {
    std::ostringstream log;
    Trainer trainer(cfg, load_pairs(data.string(), cfg.model.semantic_classes, cfg.model.seed, log), log);
    trainer.run((work / "determinism" / run).string());
  }
  Checks c;
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(work / "determinism" / "run_a")) {
    const auto other = work / "determinism" / "run_b" / e.path().filename();
    c.expect(fs::exists(other) && slurp(e.path().string()) == slurp(other.string()),
             e.path().filename().string() + " differs");
    ++files;
  }
  c.expect(fs::exists(work / "determinism" / "run_a" / "final.isat"), "no final checkpoint");
  return c.outcome(std::to_string(files) + " files byte-identical across two " + std::to_string(cfg.train.iterations) +
                   "-iteration runs (" + fmt(seconds_since(t0), 4) + " s)");
}

Outcome lr_schedule(const fs::path&) {
  Checks c;
  const auto s = LrSchedule::from_config(RunConfig::paper().train);
  const std::pair<double, double> anchors[] = {{0, 2e-4}, {92000, 3e-4}, {208000, 2e-4}, {300000, 1e-6}};
  for (const auto& [it, lr] : anchors)
    c.expect(lr_at(s, it) == lr, "lr_at(" + fmt(it, 7) + ") = " + fmt(lr_at(s, it), 17));
  return c.outcome("0, 92k, 208k, 300k exact");
}

Outcome ablation(const fs::path& work) {
  const auto data = work / "ablation_data";
  testing::write_pair_dataset(data, 3, 80, 80, 31);
  AblateOptions opt;
  opt.config.overrides = {"iterations=100"};
  opt.data_dir = data.string();
  opt.matrix = std::string(ISALUX_SOURCE_DIR) + "/configs/ablation_matrix.txt";
  opt.out_dir = (work / "ablation").string();
  std::ostringstream out, err;
  const auto t0 = std::chrono::steady_clock::now();
  const int code = cmd_ablate(opt, out, err);
  Checks c;
  c.expect(code == 0, "exit code " + std::to_string(code));
  std::istringstream csv(slurp(opt.out_dir + "/ablation.csv"));
  std::vector<std::string> lines;
  for (std::string l; std::getline(csv, l);) lines.push_back(l);
  c.expect(lines.size() == 10, std::to_string(lines.size()) + " CSV lines");
  if (!lines.empty()) c.expect(lines[0] == ablation_header(), "header");
  for (std::size_t i = 1; i < lines.size(); ++i) {
    std::vector<std::string> f;
    std::istringstream row(lines[i]);
    for (std::string x; std::getline(row, x, ',');) f.push_back(x);
    c.expect(f.size() == 10, "row " + std::to_string(i) + " has " + std::to_string(f.size()) + " fields");
    for (std::size_t j = 7; j < f.size(); ++j) c.expect(std::isfinite(std::stod(f[j])), "row " + std::to_string(i));
  }
  return c.outcome("9 cells x 100 iterations, complete CSV (" + fmt(seconds_since(t0), 4) + " s)");
}

struct Criterion {
  const char* name;
  Outcome (*run)(const fs::path&);
};

const Criterion kCriteria[] = {
    {"gradient-integrity", gradient_integrity},
    {"lora-zero-init", lora_zero_init},
    {"moe-sparsity", moe_sparsity},
    {"attention-contracts", attention_contracts},
    {"shape-chain", shape_chain},
    {"illumination-prior", illumination},
    {"loss-suite", loss_suite},
    {"overfit-sanity", overfit},
    {"lr-schedule", lr_schedule},
    {"ablation-harness", ablation},
    {"determinism", determinism},
};

}  // namespace
}  // namespace isalux

int main(int argc, char** argv) {
  using namespace isalux;
  CLI::App app("ISALux acceptance suite");
  std::string work = (fs::temp_directory_path() / "isalux_acceptance").string();
  std::vector<std::string> only;
  bool list = false;
  app.add_option("--work-dir", work, "Scratch directory for datasets and runs")->capture_default_str();
  app.add_option("--only", only, "Run only the named criteria");
  app.add_flag("--list", list, "List criterion names and exit");
  CLI11_PARSE(app, argc, argv);

  if (list) {
    for (const auto& c : kCriteria) std::cout << c.name << "\n";
    return 0;
  }
  for (const auto& name : only) {
    if (std::none_of(std::begin(kCriteria), std::end(kCriteria), [&](const Criterion& c) { return name == c.name; })) {
      std::cerr << "unknown criterion '" << name << "'\n";
      return 1;
    }
  }
  std::size_t failed = 0, ran = 0;
  for (const auto& crit : kCriteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), crit.name) == only.end()) continue;
    const auto dir = fs::path(work) / crit.name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    Outcome r;
    try {
      r = crit.run(dir);
    } catch (const std::exception& e) {
      r = {false, std::string("exception: ") + e.what()};
    }
    ++ran;
    failed += !r.pass;
    std::cout << (r.pass ? "PASS " : "FAIL ") << std::left << std::setw(22) << crit.name << r.detail << std::endl;
  }
  std::cout << ran - failed << "/" << ran << " criteria passed" << std::endl;
  return failed ? 1 : 0;
}
