// Copyright 2026 The ISALux Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <fstream>

#include "isalux/commands.hpp"
#include "support.hpp"

namespace isalux {
namespace {

using testing::ScratchDir;

struct Run {
  int code = -1;
  std::string out, err;
};

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Runs the built binary with `args` (already shell-quoted).
Run cli(const std::string& args, const std::string& env = "") {
  static int n = 0;
  const auto base =
      std::filesystem::temp_directory_path() / ("isalux_cli_" + std::to_string(::getpid()) + "_" + std::to_string(n++));
  const std::string out = base.string() + ".out", err = base.string() + ".err";
  const std::string cmd = env + " '" + ISALUX_CLI_PATH + "' " + args + " >'" + out + "' 2>'" + err + "'";
  const int status = std::system(cmd.c_str());
  Run r{WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
  std::filesystem::remove(out);
  std::filesystem::remove(err);
  return r;
}

bool contains(const std::string& s, const std::string& needle) { return s.find(needle) != std::string::npos; }

// A tiny checkpoint whose model is an exact identity map.
std::string identity_checkpoint(const ScratchDir& dir, std::size_t channels = 8) {
  auto cfg = RunConfig::desk();
  cfg.model.channels = channels;
  cfg.model.blocks = {1, 1, 1};
  IsaT<float> model(cfg.model);
  for (auto& v : model.parameters().find("out_conv")->tensor.data()) v = 0.0f;
  isat::write_file(dir.str("identity.isat"), model_records(model, cfg));
  return dir.str("identity.isat");
}

std::string random_checkpoint(const ScratchDir& dir) {
  auto cfg = RunConfig::desk();
  cfg.model.channels = 8;
  cfg.model.blocks = {1, 1, 1};
  IsaT<float> model(cfg.model);
  for (auto& v : model.parameters().find("out_conv")->tensor.data()) v *= 100.0f;
  isat::write_file(dir.str("random.isat"), model_records(model, cfg));
  return dir.str("random.isat");
}

// ---------------------------------------------------------------------------
// Binary surface

TEST(Cli, HelpDocumentsEverySubcommandAndIsStable) {
  const auto a = cli("--help"), b = cli("--help");
  EXPECT_EQ(a.code, 0);
  EXPECT_EQ(a.out, b.out);
  for (const char* sub : {"train", "infer", "eval", "describe", "ablate"}) EXPECT_TRUE(contains(a.out, sub)) << sub;
  const auto infer = cli("infer --help");
  EXPECT_EQ(infer.code, 0);
  for (const char* flag : {"--checkpoint", "--input", "--output", "--seg-prior", "--synthetic-prior", "--seed"})
    EXPECT_TRUE(contains(infer.out, flag)) << flag;
  const auto train = cli("train --help");
  for (const char* flag : {"--data-dir", "--out-dir", "--resume", "--preset", "--config", "--set", "--seed"})
    EXPECT_TRUE(contains(train.out, flag)) << flag;
  EXPECT_EQ(cli("--version").code, 0);
}

TEST(Cli, UsageErrorsExitWithOne) {
  EXPECT_EQ(cli("").code, 1);
  EXPECT_EQ(cli("frobnicate").code, 1);
  EXPECT_EQ(cli("describe --no-such-flag").code, 1);
  EXPECT_EQ(cli("describe --preset huge").code, 1);
  EXPECT_EQ(cli("describe --set channels=6").code, 1);
  EXPECT_EQ(cli("eval --pred-dir x").code, 1);
}

TEST(Cli, DescribeEchoesConfigAndParameters) {
  const auto r = cli("describe --set channels=8 --set blocks=[1,1,1] --seed 4");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(contains(r.out, "# resolved config"));
  EXPECT_TRUE(contains(r.out, "#   channels = 8"));
  EXPECT_TRUE(contains(r.out, "#   seed = 4"));
  EXPECT_TRUE(contains(r.out, "out_conv"));
  EXPECT_TRUE(contains(r.out, "bot.block0.moe.gate"));
}

TEST(Cli, InferWithoutPriorNamesBothOptions) {
  ScratchDir dir("noprior");
  const auto ck = identity_checkpoint(dir);
  write_png(dir.str("in.png"), testing::pattern_image(8, 8, 1));
  const auto r = cli("infer --checkpoint " + ck + " --input " + dir.str("in.png") + " --output " + dir.str("o.png"));
  EXPECT_EQ(r.code, 1);
  EXPECT_TRUE(contains(r.err, "--seg-prior")) << r.err;
  EXPECT_TRUE(contains(r.err, "--synthetic-prior")) << r.err;
  const auto missing = cli("infer --checkpoint " + ck + " --input " + dir.str("in.png") + " --output " +
                           dir.str("o.png") + " --seg-prior " + dir.str("absent.isat"));
  EXPECT_EQ(missing.code, 2);
  EXPECT_TRUE(contains(missing.err, "--seg-prior") && contains(missing.err, "--synthetic-prior")) << missing.err;
  EXPECT_FALSE(std::filesystem::exists(dir.str("o.png")));
}

TEST(Cli, InferDataErrorsExitWithTwo) {
  ScratchDir dir("inferbad");
  const auto ck = identity_checkpoint(dir);
  write_png(dir.str("in.png"), testing::pattern_image(8, 8, 1));
  EXPECT_EQ(cli("infer --checkpoint " + dir.str("none.isat") + " --input " + dir.str("in.png") + " --output " +
                dir.str("o.png") + " --synthetic-prior")
                .code,
            2);
  EXPECT_EQ(cli("infer --checkpoint " + ck + " --input " + dir.str("none.png") + " --output " + dir.str("o.png") +
                " --synthetic-prior")
                .code,
            2);
  save_semantic_prior(dir.str("wrong.isat"), SemanticPrior<float>{Tensor(Shape{21, 4, 4}, 1.0f / 21)});
  EXPECT_EQ(cli("infer --checkpoint " + ck + " --input " + dir.str("in.png") + " --output " + dir.str("o.png") +
                " --seg-prior " + dir.str("wrong.isat"))
                .code,
            2);
}

TEST(Cli, IdentityModelReproducesFullSizeInput) {
  ScratchDir dir("identity");
  const auto ck = identity_checkpoint(dir);
  write_png(dir.str("in.png"), testing::pattern_image(400, 600, 2));
  const auto r = cli("infer --checkpoint " + ck + " --input " + dir.str("in.png") + " --output " + dir.str("out.png") +
                     " --synthetic-prior");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(contains(r.out, "forward time: "));
  EXPECT_TRUE(contains(r.out, "(400x600)"));
  const auto in = read_png(dir.str("in.png")), out = read_png(dir.str("out.png"));
  ASSERT_EQ(out.shape(), (Shape{3, 400, 600}));
  EXPECT_EQ(out.storage(), in.storage());
}

TEST(Cli, InferIsByteReproducible) {
  ScratchDir dir("repro");
  const auto ck = random_checkpoint(dir);
  write_png(dir.str("in.png"), testing::pattern_image(30, 22, 3, 0.3));
  const std::string common = "infer --checkpoint " + ck + " --input " + dir.str("in.png") + " --synthetic-prior";
  ASSERT_EQ(cli(common + " --seed 5 --output " + dir.str("a.png")).code, 0);
  ASSERT_EQ(cli(common + " --seed 5 --output " + dir.str("b.png")).code, 0);
  const auto a = isat::read_bytes(dir.str("a.png"));
  EXPECT_EQ(a, isat::read_bytes(dir.str("b.png")));
  EXPECT_NE(a, isat::read_bytes(dir.str("in.png")));
  const auto img = read_png(dir.str("a.png"));
  EXPECT_EQ(img.shape(), (Shape{3, 30, 22}));
}

TEST(Cli, InferAcceptsExportedPrior) {
  ScratchDir dir("segprior");
  const auto ck = random_checkpoint(dir);
  const auto img = testing::pattern_image(12, 16, 4);
  write_png(dir.str("in.png"), img);
  save_semantic_prior(dir.str("p.isat"), synthetic_semantic_prior(img, 21, 9));
  const auto r = cli("infer --checkpoint " + ck + " --input " + dir.str("in.png") + " --output " + dir.str("o.png") +
                     " --seg-prior " + dir.str("p.isat"));
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(std::filesystem::exists(dir.str("o.png")));
}

// ---------------------------------------------------------------------------
// eval

void write_gray(const std::string& path, std::size_t h, std::size_t w, const std::function<int(std::size_t)>& level) {
  Tensor img(Shape{3, h, w});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < h * w; ++i) img[c * h * w + i] = static_cast<float>(level(i)) / 255.0f;
  write_png(path, img);
}

TEST(Cli, EvalIdenticalFoldersGiveSentinel) {
  ScratchDir dir("evalsame");
  std::filesystem::create_directories(dir.path() / "p");
  for (int i = 0; i < 3; ++i) {
    write_png(dir.str("p/im" + std::to_string(i) + ".png"), testing::pattern_image(48, 52, 10 + i));
  }
  const auto r = cli("eval --pred-dir " + dir.str("p") + " --gt-dir " + dir.str("p"), "ISALUX_THREADS=2");
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream lines(r.out);
  std::string header, row, last;
  std::getline(lines, header);
  EXPECT_EQ(header, "name,psnr_db,ssim,msssim");
  int rows = 0;
  while (std::getline(lines, row)) {
    last = row;
    ++rows;
  }
  EXPECT_EQ(rows, 4);
  EXPECT_EQ(last, "mean,99.0000,1.000000,1.000000");
}

TEST(Cli, EvalOffsetFixtureGivesTwentyDecibels) {
  ScratchDir dir("evaloff");
  std::filesystem::create_directories(dir.path() / "p");
  std::filesystem::create_directories(dir.path() / "g");
  // Offsets of 25 and 26 levels in a checkerboard: MSE ~ 0.1^2.
  write_gray(dir.str("g/x.png"), 16, 16, [](std::size_t) { return 100; });
  write_gray(dir.str("p/x.png"), 16, 16, [](std::size_t i) { return ((i / 16 + i % 16) % 2) ? 125 : 126; });
  const auto r = cli("eval --pred-dir " + dir.str("p") + " --gt-dir " + dir.str("g") + " --output " + dir.str("m.csv"));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto csv = slurp(dir.str("m.csv"));
  const auto pos = csv.find("\nx.png,");
  ASSERT_NE(pos, std::string::npos) << csv;
  EXPECT_NEAR(std::stod(csv.substr(pos + 7)), 20.0, 0.01);
}

TEST(Cli, EvalListsUnmatchedAndFailsWhenNothingMatches) {
  ScratchDir dir("evalun");
  std::filesystem::create_directories(dir.path() / "p");
  std::filesystem::create_directories(dir.path() / "g");
  write_png(dir.str("p/a.png"), testing::pattern_image(16, 16, 1));
  write_png(dir.str("g/a.png"), testing::pattern_image(16, 16, 2));
  write_png(dir.str("p/only_pred.png"), testing::pattern_image(16, 16, 3));
  write_png(dir.str("g/only_gt.png"), testing::pattern_image(16, 16, 4));
  const auto r = cli("eval --pred-dir " + dir.str("p") + " --gt-dir " + dir.str("g"));
  EXPECT_EQ(r.code, 0);
  EXPECT_TRUE(contains(r.err, "only_pred.png"));
  EXPECT_TRUE(contains(r.err, "only_gt.png"));
  EXPECT_TRUE(contains(r.out, "\na.png,"));
  EXPECT_FALSE(contains(r.out, "only_"));
  std::filesystem::remove(dir.str("g/a.png"));
  EXPECT_EQ(cli("eval --pred-dir " + dir.str("p") + " --gt-dir " + dir.str("g")).code, 2);
  EXPECT_EQ(cli("eval --pred-dir " + dir.str("nope") + " --gt-dir " + dir.str("g")).code, 2);
}

TEST(Eval, ParallelWorkersMatchSerialResult) {
  std::vector<double> serial(37), parallel(37);
  parallel_for(37, 1, [&](std::size_t i) { serial[i] = std::sqrt(static_cast<double>(i)); });
  parallel_for(37, 4, [&](std::size_t i) { parallel[i] = std::sqrt(static_cast<double>(i)); });
  EXPECT_EQ(serial, parallel);
  EXPECT_THROW(parallel_for(5, 3,
                            [](std::size_t i) {
                              if (i == 3) throw DataError("boom");
                            }),
               DataError);
  ::setenv("ISALUX_THREADS", "1", 1);
  EXPECT_EQ(worker_threads(), 1u);
  ::unsetenv("ISALUX_THREADS");
  EXPECT_GE(worker_threads(), 1u);
}

// ---------------------------------------------------------------------------
// train

TEST(Cli, TrainWritesCheckpointAndEchoesConfig) {
  ScratchDir dir("train");
  testing::write_pair_dataset(dir.path() / "data", 2, 20, 20);
  const std::string sets =
      " --set channels=4 --set blocks=[1,1,1] --set lora_rank=4 --set patch=16 --set batch=1 --set iterations=2"
      " --set msssim_scales=1 --set msssim_weights=[1]";
  const auto r = cli("train --data-dir " + dir.str("data") + " --out-dir " + dir.str("run") + sets);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(contains(r.out, "#   iterations = 2"));
  EXPECT_TRUE(std::filesystem::exists(dir.str("run/final.isat")));
  EXPECT_EQ(cli("train --data-dir " + dir.str("missing") + " --out-dir " + dir.str("run2") + sets).code, 2);
  EXPECT_EQ(cli("train --data-dir " + dir.str("data") + " --out-dir " + dir.str("run3") + sets + " --set bogus=1").code,
            1);
}

TEST(RunGuarded, MapsExceptionsToExitCodes) {
  std::ostringstream err;
  EXPECT_EQ(run_guarded([] { return 0; }, err), 0);
  EXPECT_EQ(run_guarded([]() -> int { throw NumericError("nan"); }, err), 3);
  EXPECT_EQ(run_guarded([]() -> int { throw DataError("gone"); }, err), 2);
  EXPECT_EQ(run_guarded([]() -> int { throw ConfigError("bad"); }, err), 1);
  EXPECT_EQ(run_guarded([]() -> int { throw ShapeError("shape"); }, err), 1);
  EXPECT_TRUE(contains(err.str(), "numeric error: nan"));
}

// ---------------------------------------------------------------------------
// ablate

TEST(Ablation, MatrixParsing) {
  const auto cells = parse_matrix(
      "# comment\nNo Priors | use_illumination=false use_semantic=false\n\nL2 | "
      "lambda_perc=0 lambda_ssim=0  # trailing\nFull |\n");
  ASSERT_EQ(cells.size(), 3u);
  EXPECT_EQ(cells[0].label, "No Priors");
  EXPECT_EQ(cells[1].settings.size(), 2u);
  EXPECT_TRUE(cells[2].settings.empty());
  EXPECT_THROW(parse_matrix("A | channels=8\n"), ConfigError);
  EXPECT_THROW(parse_matrix("A | use_lora\n"), ConfigError);
  EXPECT_THROW(parse_matrix(" | use_lora=false\n"), ConfigError);
  EXPECT_THROW(parse_matrix("A,B | use_lora=false\n"), ConfigError);
  EXPECT_THROW(parse_matrix("no bar here\n"), ConfigError);
  EXPECT_THROW(parse_matrix("# only comments\n"), ConfigError);
}

TEST(Ablation, ShippedMatrixHasNineValidCells) {
  std::ifstream in(std::string(ISALUX_SOURCE_DIR) + "/configs/ablation_matrix.txt");
  ASSERT_TRUE(in);
  std::stringstream ss;
  ss << in.rdbuf();
  const auto cells = parse_matrix(ss.str());
  ASSERT_EQ(cells.size(), 9u);
  for (const auto& c : cells) EXPECT_NO_THROW(cell_config(RunConfig::desk(), c, c.label));
  const auto no_lora = cell_config(RunConfig::desk(), cells[3], "");
  EXPECT_FALSE(no_lora.model.use_lora);
}

TEST(Ablation, NoLoraCellMatchesZeroBetaAtInitialization) {
  auto base = RunConfig::desk();
  base.model.channels = 8;
  base.model.blocks = {1, 1, 1};
  const auto cells = parse_matrix("a | use_lora=true\nb | use_lora=false\n");
  IsaT<float> with(cell_config(base, cells[0], "a").model), without(cell_config(base, cells[1], "b").model);
  Rng rng(1);
  auto img = rng.uniform_tensor<float>({1, 3, 16, 16}, 0, 1);
  auto pri = make_prior_bundle(img, rng.uniform_tensor<float>({1, 21, 16, 16}, 0, 1));
  EXPECT_EQ(with.enhance(img, pri).storage(), without.enhance(img, pri).storage());
}

TEST(Ablation, InvalidKeyRejectedBeforeTraining) {
  ScratchDir dir("ablbad");
  testing::write_pair_dataset(dir.path() / "data", 1, 20, 20);
  std::ofstream(dir.str("m.txt")) << "ok | use_lora=false\nbad | learning_rate=1\n";
  const auto r =
      cli("ablate --data-dir " + dir.str("data") + " --matrix " + dir.str("m.txt") + " --out-dir " + dir.str("out"));
  EXPECT_EQ(r.code, 1);
  EXPECT_TRUE(contains(r.err, "invalid toggle key 'learning_rate'")) << r.err;
  EXPECT_FALSE(std::filesystem::exists(dir.str("out")));
  std::ofstream(dir.str("m2.txt")) << "ok | use_lora=false\nbad | lambda_l2=-1\n";
  EXPECT_EQ(
      cli("ablate --data-dir " + dir.str("data") + " --matrix " + dir.str("m2.txt") + " --out-dir " + dir.str("out"))
          .code,
      1);
  EXPECT_FALSE(std::filesystem::exists(dir.str("out")));
}

TEST(Ablation, RowsCarryResolvedToggles) {
  ScratchDir dir("abl");
  testing::write_pair_dataset(dir.path() / "data", 2, 20, 20);
  std::ofstream(dir.str("m.txt")) << "No Priors | use_illumination=false use_semantic=false\n"
                                  << "L2 | lambda_perc=0 lambda_ssim=0\n";
  AblateOptions opt;
  opt.config.overrides = {"channels=4", "blocks=[1,1,1]", "lora_rank=4",     "patch=16",
                          "batch=1",    "iterations=2",   "msssim_scales=1", "msssim_weights=[1]"};
  opt.data_dir = dir.str("data");
  opt.matrix = dir.str("m.txt");
  opt.out_dir = dir.str("out");
  std::ostringstream out, err;
  ASSERT_EQ(cmd_ablate(opt, out, err), 0) << err.str();
  std::istringstream csv(slurp(dir.str("out/ablation.csv")));
  std::vector<std::string> lines;
  for (std::string l; std::getline(csv, l);) lines.push_back(l);
  ASSERT_EQ(lines.size(), 3u);
  EXPECT_EQ(lines[0],
            "cell,use_illumination,use_semantic,use_lora,lambda_l2,lambda_perc,lambda_ssim,psnr_db,ssim,msssim");
  EXPECT_EQ(lines[1].rfind("No Priors,false,false,true,1.0,0.01,0.2,", 0), 0u) << lines[1];
  EXPECT_EQ(lines[2].rfind("L2,true,true,true,1.0,0.0,0.0,", 0), 0u) << lines[2];
  EXPECT_TRUE(std::filesystem::exists(dir.str("out/cell_01/final.isat")));
  EXPECT_TRUE(std::filesystem::exists(dir.str("out/cell_02/final.isat")));
}

}  // namespace
}  // namespace isalux
