// Copyright 2026 The ISALux Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "isalux/checkpoint.hpp"
#include "isalux/config.hpp"
#include "isalux/image.hpp"
#include "isalux/inference.hpp"
#include "isalux/losses.hpp"
#include "isalux/priors.hpp"
#include "isalux/trainer.hpp"

namespace isalux {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumeric = 3 };

/// Runs `body`, reporting exceptions on `err` and mapping them to exit codes.
inline int run_guarded(const std::function<int()>& body, std::ostream& err) {
  try {
    return body();
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }
}

/// Configuration flags shared by train, describe and ablate.
struct ConfigOptions {
  std::string preset = "desk";
  std::string config_file;
  std::vector<std::string> overrides;  // key=value
  std::optional<std::uint64_t> seed;
};

inline RunConfig resolve_config(const ConfigOptions& opt) {
  RunConfig cfg;
  if (opt.preset == "desk") {
    cfg = RunConfig::desk();
  } else if (opt.preset == "paper") {
    cfg = RunConfig::paper();
  } else {
    throw ConfigError("unknown preset '" + opt.preset + "' (expected desk or paper)");
  }
  if (!opt.config_file.empty()) cfg = load_config(opt.config_file, cfg);
  for (const auto& kv : opt.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    set_config_value(cfg, detail::trim(kv.substr(0, eq)), kv.substr(eq + 1), "--set");
  }
  if (opt.seed) cfg.model.seed = *opt.seed;
  cfg.validate();
  return cfg;
}

inline void echo_config(const RunConfig& cfg, std::ostream& out) {
  out << "# resolved config\n";
  std::istringstream in(serialize_config(cfg));
  std::string line;
  while (std::getline(in, line)) out << "#   " << line << "\n";
}

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
  ConfigOptions config;
  std::string data_dir;
  std::string out_dir;
  std::string resume;
};

inline int cmd_train(const TrainOptions& opt, std::ostream& out, std::ostream& err) {
  const auto cfg = resolve_config(opt.config);
  echo_config(cfg, out);
  auto pairs = load_pairs(opt.data_dir, cfg.model.semantic_classes, cfg.model.seed, err);
  out << "# " << pairs.size() << " training pairs from " << opt.data_dir << "\n";
  Trainer trainer(cfg, std::move(pairs), out);
  if (!opt.resume.empty()) {
    trainer.resume(opt.resume);
    out << "# resumed from " << opt.resume << " at iteration " << trainer.iteration() << "\n";
  }
  trainer.run(opt.out_dir);
  out << "# wrote " << (std::filesystem::path(opt.out_dir) / "final.isat").string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// infer

struct InferOptions {
  std::string checkpoint;
  std::string input;
  std::string output;
  std::string seg_prior;
  bool synthetic_prior = false;
  std::optional<std::uint64_t> seed;
};

inline int cmd_infer(const InferOptions& opt, std::ostream& out, std::ostream& err) {
  if (opt.seg_prior.empty() && !opt.synthetic_prior) {
    err << "error: no semantic prior; pass --seg-prior FILE or --synthetic-prior\n";
    return kExitUsage;
  }
  if (!opt.seg_prior.empty() && opt.synthetic_prior) {
    err << "error: --seg-prior and --synthetic-prior are mutually exclusive\n";
    return kExitUsage;
  }
  if (!opt.seg_prior.empty() && !std::filesystem::exists(opt.seg_prior)) {
    err << "error: prior file " << opt.seg_prior << " not found; pass an existing --seg-prior FILE or use "
        << "--synthetic-prior\n";
    return kExitData;
  }
  RunConfig cfg;
  auto model = load_model(opt.checkpoint, &cfg);
  if (opt.seed) cfg.model.seed = *opt.seed;
  echo_config(cfg, out);
  const auto image = read_png(opt.input);
  Tensor semantic = opt.synthetic_prior
                        ? synthetic_semantic_prior(image, cfg.model.semantic_classes, cfg.model.seed).map
                        : load_semantic_prior(opt.seg_prior, cfg.model.semantic_classes).map;
  if (semantic.dim(1) != image.dim(1) || semantic.dim(2) != image.dim(2)) {
    throw DataError(opt.seg_prior + ": prior extents " + shape_str(semantic.shape()) + " do not match image " +
                    shape_str(image.shape()));
  }
  const auto t0 = std::chrono::steady_clock::now();
  const auto result = enhance_image(*model, image, semantic);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_png(opt.output, result);
  out << "forward time: " << std::fixed << std::setprecision(3) << secs << " s (" << image.dim(1) << "x" << image.dim(2)
      << ")\n"
      << std::defaultfloat;
  return kExitOk;
}

// ---------------------------------------------------------------------------
// eval

struct EvalOptions {
  std::string pred_dir;
  std::string gt_dir;
  std::string output;  // CSV path; stdout when empty
};

/// Worker count: hardware concurrency capped by ISALUX_THREADS.
inline std::size_t worker_threads() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* cap = std::getenv("ISALUX_THREADS")) {
    const long v = std::strtol(cap, nullptr, 10);
    if (v >= 1) n = std::min<std::size_t>(n, static_cast<std::size_t>(v));
  }
  return n;
}

/// Calls fn(i) for i in [0, n) on up to `threads` workers.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = next++; i < n; i = next++) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

inline std::string format_metrics_row(const std::string& name, const ImageMetrics& m) {
  std::ostringstream os;
  os << name << std::fixed << std::setprecision(4) << ',' << m.psnr << ',' << std::setprecision(6) << m.ssim << ','
     << m.msssim;
  return os.str();
}

inline constexpr const char* kMetricsHeader = "name,psnr_db,ssim,msssim";

inline ImageMetrics mean_metrics(const std::vector<ImageMetrics>& rows) {
  ImageMetrics mean;
  for (const auto& r : rows) {
    mean.psnr += r.psnr;
    mean.ssim += r.ssim;
    mean.msssim += r.msssim;
  }
  if (!rows.empty()) {
    const double n = static_cast<double>(rows.size());
    mean.psnr /= n;
    mean.ssim /= n;
    mean.msssim /= n;
  }
  return mean;
}

inline std::vector<std::string> png_names(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw DataError(dir + ": not a directory");
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") names.push_back(e.path().filename().string());
  }
  std::sort(names.begin(), names.end());
  return names;
}

inline int cmd_eval(const EvalOptions& opt, std::ostream& out, std::ostream& err) {
  namespace fs = std::filesystem;
  const auto preds = png_names(opt.pred_dir);
  const auto gts = png_names(opt.gt_dir);
  std::vector<std::string> matched;
  for (const auto& n : preds) {
    if (std::binary_search(gts.begin(), gts.end(), n)) {
      matched.push_back(n);
    } else {
      err << "unmatched: " << n << " has no ground truth in " << opt.gt_dir << "\n";
    }
  }
  for (const auto& n : gts) {
    if (!std::binary_search(preds.begin(), preds.end(), n)) {
      err << "unmatched: " << n << " has no prediction in " << opt.pred_dir << "\n";
    }
  }
  if (matched.empty()) {
    err << "error: no prediction matches a ground-truth filename\n";
    return kExitData;
  }
  const std::size_t threads = worker_threads();
  err << "# eval pred_dir=" << opt.pred_dir << " gt_dir=" << opt.gt_dir << " images=" << matched.size()
      << " threads=" << threads << "\n";
  std::vector<ImageMetrics> rows(matched.size());
  parallel_for(matched.size(), threads, [&](std::size_t i) {
    const auto p = read_png((fs::path(opt.pred_dir) / matched[i]).string());
    const auto g = read_png((fs::path(opt.gt_dir) / matched[i]).string());
    if (p.shape() != g.shape()) {
      throw DataError(matched[i] + ": prediction " + shape_str(p.shape()) + " and ground truth " +
                      shape_str(g.shape()) + " differ in size");
    }
    rows[i] = image_metrics(ops::reshape(p, {1, 3, p.dim(1), p.dim(2)}), ops::reshape(g, {1, 3, g.dim(1), g.dim(2)}));
  });
  std::ostringstream csv;
  csv << kMetricsHeader << "\n";
  for (std::size_t i = 0; i < rows.size(); ++i) csv << format_metrics_row(matched[i], rows[i]) << "\n";
  csv << format_metrics_row("mean", mean_metrics(rows)) << "\n";
  if (opt.output.empty()) {
    out << csv.str();
  } else {
    std::ofstream f(opt.output);
    if (!f) throw DataError("cannot write " + opt.output);
    f << csv.str();
    out << "# wrote " << opt.output << "\n";
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// describe

inline int cmd_describe(const ConfigOptions& opt, std::ostream& out) {
  const auto cfg = resolve_config(opt);
  echo_config(cfg, out);
  out << describe(cfg.model, cfg.train.patch, cfg.train.patch);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// ablate

/// Keys an ablation cell may set.
inline const std::vector<std::string>& ablation_keys() {
  static const std::vector<std::string> keys{"use_illumination", "use_semantic", "use_lora",
                                             "lambda_l2",        "lambda_perc",  "lambda_ssim"};
  return keys;
}

struct AblationCell {
  std::string label;
  std::vector<std::pair<std::string, std::string>> settings;
};

/// Matrix file: one cell per line, `label | key=value key=value ...`; `#` starts
/// a comment. Only ablation keys are accepted.
inline std::vector<AblationCell> parse_matrix(const std::string& text, const std::string& source = "matrix") {
  std::vector<AblationCell> cells;
  std::istringstream in(text);
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    line = detail::trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(lineno);
    const auto bar = line.find('|');
    if (bar == std::string::npos) throw ConfigError(where + ": expected 'label | key=value ...'");
    AblationCell cell{detail::trim(line.substr(0, bar)), {}};
    if (cell.label.empty()) throw ConfigError(where + ": empty cell label");
    if (cell.label.find(',') != std::string::npos || cell.label.find('"') != std::string::npos) {
      throw ConfigError(where + ": cell label may not contain ',' or '\"'");
    }
    std::istringstream toks(line.substr(bar + 1));
    std::string tok;
    while (toks >> tok) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos || eq == 0) throw ConfigError(where + ": expected key=value, got '" + tok + "'");
      const auto key = tok.substr(0, eq);
      const auto& keys = ablation_keys();
      if (std::find(keys.begin(), keys.end(), key) == keys.end()) {
        throw ConfigError(where + ": invalid toggle key '" + key + "'");
      }
      cell.settings.emplace_back(key, tok.substr(eq + 1));
    }
    cells.push_back(std::move(cell));
  }
  if (cells.empty()) throw ConfigError(source + ": no cells");
  return cells;
}

inline RunConfig cell_config(const RunConfig& base, const AblationCell& cell, const std::string& where) {
  RunConfig cfg = base;
  for (const auto& [k, v] : cell.settings) set_config_value(cfg, k, v, where);
  cfg.validate();
  return cfg;
}

inline std::string ablation_header() {
  std::string h = "cell";
  for (const auto& k : ablation_keys()) h += "," + k;
  return h + ",psnr_db,ssim,msssim";
}

inline std::string ablation_row(const std::string& label, const RunConfig& cfg, const ImageMetrics& m) {
  std::ostringstream os;
  os << label << ',' << (cfg.model.use_illumination ? "true" : "false") << ','
     << (cfg.model.use_semantic ? "true" : "false") << ',' << (cfg.model.use_lora ? "true" : "false") << ','
     << detail::format_double(cfg.loss.lambda_l2) << ',' << detail::format_double(cfg.loss.lambda_perc) << ','
     << detail::format_double(cfg.loss.lambda_ssim) << std::fixed << std::setprecision(4) << ',' << m.psnr << ','
     << std::setprecision(6) << m.ssim << ',' << m.msssim;
  return os.str();
}

struct AblateOptions {
  ConfigOptions config;
  std::string data_dir;
  std::string matrix;
  std::string eval_dir;  // defaults to data_dir
  std::string out_dir;   // per-cell checkpoints and ablation.csv
};

inline int cmd_ablate(const AblateOptions& opt, std::ostream& out, std::ostream& err) {
  namespace fs = std::filesystem;
  const auto base = resolve_config(opt.config);
  std::ifstream mf(opt.matrix);
  if (!mf) throw DataError("cannot open matrix " + opt.matrix);
  std::stringstream ms;
  ms << mf.rdbuf();
  const auto cells = parse_matrix(ms.str(), opt.matrix);
  std::vector<RunConfig> configs;
  for (const auto& c : cells) configs.push_back(cell_config(base, c, opt.matrix + " [" + c.label + "]"));
  echo_config(base, out);
  out << "# " << cells.size() << " cells\n";

  const auto train_pairs = load_pairs(opt.data_dir, base.model.semantic_classes, base.model.seed, err);
  const auto eval_pairs =
      opt.eval_dir.empty() ? train_pairs : load_pairs(opt.eval_dir, base.model.semantic_classes, base.model.seed, err);
  fs::create_directories(opt.out_dir);
  std::ostringstream csv;
  csv << ablation_header() << "\n";
  for (std::size_t i = 0; i < cells.size(); ++i) {
    out << "# cell " << i + 1 << "/" << cells.size() << ": " << cells[i].label << "\n";
    char dir[32];
    std::snprintf(dir, sizeof dir, "cell_%02zu", i + 1);
    std::ostringstream cell_log;
    Trainer trainer(configs[i], train_pairs, cell_log);
    trainer.run((fs::path(opt.out_dir) / dir).string());
    const auto m = mean_metrics(evaluate_pairs(trainer.model(), eval_pairs));
    const auto row = ablation_row(cells[i].label, configs[i], m);
    out << row << "\n";
    csv << row << "\n";
  }
  const auto csv_path = (fs::path(opt.out_dir) / "ablation.csv").string();
  std::ofstream f(csv_path);
  if (!f) throw DataError("cannot write " + csv_path);
  f << csv.str();
  out << "# wrote " << csv_path << "\n";
  return kExitOk;
}

}  // namespace isalux
