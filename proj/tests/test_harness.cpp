#include <filesystem>
#include <fstream>

#include "bcnn/csvio.hpp"
#include "bcnn/experiment.hpp"
#include "bcnn/plot.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace bcnn;
namespace fs = std::filesystem;

namespace {

struct TempTree {
  fs::path root;
  TempTree() {
    static int counter = 0;
    root = fs::temp_directory_path() /
           ("bcnn_harness_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(root);
  }
  ~TempTree() { fs::remove_all(root); }
  std::string dir(const char* name) const { return (root / name).string(); }
};

std::string write_tiny_mnist_arch(const TempTree& tree) {
  std::string path = tree.dir("tiny_mnist.json");
  std::ofstream out(path);
  out << R"({
    "name": "tiny_mnist", "input_shape": [1, 28, 28], "num_classes": 10,
    "layers": [
      {"op": "conv", "out_channels": 4, "kernel": 3, "padding": 1, "batch_norm": true, "activation": "softplus"},
      {"op": "max_pool", "window": 2},
      {"op": "dense", "units": 10, "activation": "softmax"}
    ]})";
  return path;
}

std::string write_tiny_voxel_arch(const TempTree& tree) {
  std::string path = tree.dir("tiny_voxel.json");
  std::ofstream out(path);
  out << R"({
    "name": "tiny_voxel", "input_shape": [1, 24, 16, 24], "num_classes": 8,
    "layers": [
      {"op": "conv", "out_channels": 4, "kernel": 3, "padding": 1, "batch_norm": true, "activation": "softplus"},
      {"op": "conv", "out_channels": 8, "kernel": 1, "activation": "softmax"}
    ]})";
  return path;
}

ExperimentConfig tiny_mnist_cfg(const TempTree& tree, const char* out, const char* mode) {
  ExperimentConfig cfg;
  cfg.name = "tiny";
  cfg.task = "mnist";
  cfg.mode = mode;
  cfg.arch_file = write_tiny_mnist_arch(tree);
  cfg.sigma0 = real(0.1);
  cfg.beta = real(0.5);
  cfg.forward_passes = 3;
  cfg.epochs = 2;
  cfg.batch_size = 16;
  cfg.seed = 11;
  cfg.data.kind = "generated_digits";
  cfg.data.train_count = 80;
  cfg.data.test_count = 40;
  cfg.data.data_seed = 5;
  cfg.out_dir = tree.dir(out);
  return cfg;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("config: mode-inconsistent fields are rejected at parse time") {
  const char* det_with_beta = R"({
    "task": "mnist", "mode": "deterministic", "arch": "a.json", "beta": 1.0,
    "data": {"kind": "generated_digits"}})";
  CHECK_THROWS_WITH_AS(ExperimentConfig::from_json_text(det_with_beta),
                       doctest::Contains("beta"), ConfigError);

  const char* bayes_with_omega = R"({
    "task": "mnist", "mode": "bayesian", "arch": "a.json", "omega": 0.01,
    "data": {"kind": "generated_digits"}})";
  CHECK_THROWS_WITH_AS(ExperimentConfig::from_json_text(bayes_with_omega),
                       doctest::Contains("omega"), ConfigError);

  const char* unknown_key = R"({
    "task": "mnist", "mode": "bayesian", "arch": "a.json", "wat": 1,
    "data": {"kind": "generated_digits"}})";
  CHECK_THROWS_WITH_AS(ExperimentConfig::from_json_text(unknown_key),
                       doctest::Contains("wat"), ConfigError);

  const char* bad_task = R"({
    "task": "cifar", "mode": "bayesian", "arch": "a.json",
    "data": {"kind": "generated_digits"}})";
  CHECK_THROWS_AS(ExperimentConfig::from_json_text(bad_task), ConfigError);
}

TEST_CASE("config: json round-trip preserves every field") {
  TempTree tree;
  ExperimentConfig cfg = tiny_mnist_cfg(tree, "rt", "bayesian");
  cfg.leave_out_class = 3;
  cfg.metrics.score_bins = 12;
  cfg.metrics.bc_paper_literal = true;
  ExperimentConfig back = ExperimentConfig::from_json_text(cfg.to_json_text());
  CHECK(back.to_json_text() == cfg.to_json_text());
  CHECK(back.leave_out_class == 3);
  CHECK(back.metrics.score_bins == 12);
  CHECK(back.metrics.bc_paper_literal);
}

TEST_CASE("run_experiment writes the documented outputs" * doctest::timeout(600)) {
  TempTree tree;
  ExperimentConfig cfg = tiny_mnist_cfg(tree, "run_a", "bayesian");
  RunResult r = run_experiment(cfg);

  for (const char* f : {"manifest.json", "metrics.csv", "dump.csv", "hist_score.csv",
                        "hist_entropy.csv", "hist_score_entropy.csv", "summary.csv",
                        "checkpoint.bin"})
    CHECK(fs::exists(fs::path(cfg.out_dir) / f));

  csv::Table summary = csv::read(cfg.out_dir + "/summary.csv");
  CHECK(summary.header == summary_header());
  CHECK(summary.rows.size() == 1);
  CHECK(summary.rows[0][0] == "B");
  CHECK(summary.value(0, "miou_or_accuracy") >= 0.0);
  CHECK(summary.value(0, "map") >= 0.0);

  csv::Table dump = csv::read(cfg.out_dir + "/dump.csv");
  CHECK(dump.rows.size() == 40);
  CHECK(dump.header == element_dump_header());

  csv::Table hist = csv::read(cfg.out_dir + "/hist_score.csv");
  CHECK(hist.rows.size() == 20);
  double total = 0;
  for (size_t i = 0; i < hist.rows.size(); ++i)
    total += hist.value(i, "tp") + hist.value(i, "fn");
  CHECK(total == 40.0);

  csv::Table metrics = csv::read(cfg.out_dir + "/metrics.csv");
  CHECK(metrics.header ==
        std::vector<std::string>{"epoch", "split", "loss", "complexity_term", "nll_term",
                                 "accuracy"});
  CHECK(metrics.rows.size() == 3);  // 2 train epochs + final test row
  CHECK(r.summary.miou_or_accuracy == summary.value(0, "miou_or_accuracy"));
}

TEST_CASE("same config and seed reproduce summary and dump byte-identically" *
          doctest::timeout(600)) {
  TempTree tree;
  ExperimentConfig a = tiny_mnist_cfg(tree, "rep_a", "bayesian");
  ExperimentConfig b = tiny_mnist_cfg(tree, "rep_b", "bayesian");
  run_experiment(a);
  run_experiment(b);
  CHECK(slurp(a.out_dir + "/summary.csv") == slurp(b.out_dir + "/summary.csv"));
  CHECK(slurp(a.out_dir + "/dump.csv") == slurp(b.out_dir + "/dump.csv"));

  // a different seed changes the outputs
  ExperimentConfig c = tiny_mnist_cfg(tree, "rep_c", "bayesian");
  c.seed = 12;
  run_experiment(c);
  CHECK(slurp(a.out_dir + "/summary.csv") != slurp(c.out_dir + "/summary.csv"));
}

TEST_CASE("manifest reproduces the run" * doctest::timeout(600)) {
  TempTree tree;
  ExperimentConfig cfg = tiny_mnist_cfg(tree, "manifest_a", "deterministic");
  run_experiment(cfg);
  ExperimentConfig replay = config_from_manifest(cfg.out_dir + "/manifest.json");
  replay.out_dir = tree.dir("manifest_b");
  run_experiment(replay);
  CHECK(slurp(cfg.out_dir + "/summary.csv") == slurp(replay.out_dir + "/summary.csv"));
}

TEST_CASE("resume from checkpoint matches an uninterrupted run" * doctest::timeout(600)) {
  TempTree tree;
  ExperimentConfig half = tiny_mnist_cfg(tree, "resume", "bayesian");
  half.epochs = 1;
  run_experiment(half);
  ExperimentConfig full = tiny_mnist_cfg(tree, "resume", "bayesian");
  full.epochs = 3;
  run_experiment(full);  // resumes at epoch 1

  ExperimentConfig straight = tiny_mnist_cfg(tree, "straight", "bayesian");
  straight.epochs = 3;
  run_experiment(straight);
  CHECK(slurp(full.out_dir + "/summary.csv") == slurp(straight.out_dir + "/summary.csv"));
}

TEST_CASE("voxel run: leave-out kept in test dump, distance histograms written" *
          doctest::timeout(900)) {
  TempTree tree;
  ExperimentConfig cfg;
  cfg.name = "tiny_voxel";
  cfg.task = "voxel_ssc";
  cfg.mode = "bayesian";
  cfg.arch_file = write_tiny_voxel_arch(tree);
  cfg.sigma0 = real(0.05);
  cfg.beta = real(0.1);
  cfg.forward_passes = 2;
  cfg.epochs = 1;
  cfg.batch_size = 1;
  cfg.seed = 3;
  cfg.leave_out_class = 4;
  cfg.data.kind = "generated_scenes";
  cfg.data.scene_count = 3;
  cfg.data.train_fraction = 0.67;
  cfg.data.data_seed = 24;
  cfg.data.scene.grid_dims = {24, 16, 24};
  cfg.data.scene.image_width = 64;
  cfg.data.scene.image_height = 48;
  cfg.data.scene.min_furniture = 2;
  cfg.data.scene.max_furniture = 3;
  cfg.out_dir = tree.dir("voxel_run");

  RunResult r = run_experiment(cfg);
  CHECK(fs::exists(fs::path(cfg.out_dir) / "hist_score_dist0.csv"));
  CHECK(r.iou.per_class.size() == 8);

  // manifest records the exclusion; the test dump still has held-out voxels
  std::string manifest = slurp(cfg.out_dir + "/manifest.json");
  CHECK(manifest.find("\"leave_out_class\": 4") != std::string::npos);
  bool saw_leftout = false;
  csv::Table dump = csv::read(cfg.out_dir + "/dump.csv");
  int tl = dump.column("true_label");
  REQUIRE(tl >= 0);
  for (const auto& row : dump.rows) saw_leftout = saw_leftout || row[size_t(tl)] == "4";
  CHECK(saw_leftout);
  // distance column is populated for voxels
  int dc = dump.column("dist_to_surface");
  CHECK(dc >= 0);
  CHECK(!dump.rows[0][size_t(dc)].empty());
}

TEST_CASE("sweep: curve rows per value; bad axes rejected" * doctest::timeout(600)) {
  TempTree tree;
  ExperimentConfig base = tiny_mnist_cfg(tree, "sweep_base", "bayesian");
  base.epochs = 1;
  CHECK_THROWS_AS(sweep(base, "volume", {1.0}, tree.dir("s1")), ConfigError);
  CHECK_THROWS_AS(sweep(base, "beta", {}, tree.dir("s2")), ConfigError);

  auto results = sweep(base, "beta", {0.1, 1.0}, tree.dir("sweep_out"));
  CHECK(results.size() == 2);
  csv::Table curve = csv::read(tree.dir("sweep_out") + std::string("/curve.csv"));
  CHECK(curve.header ==
        std::vector<std::string>{"value", "epoch", "bc_score", "bc_entropy", "bc_combined",
                                 "map", "accuracy_or_miou"});
  CHECK(curve.rows.size() == 2);
  CHECK(curve.rows[0][0] == "0.1");
  CHECK(curve.rows[1][0] == "1");
  CHECK(fs::exists(tree.dir("sweep_out") + std::string("/beta=0.1/summary.csv")));

  // omega is not sweepable on a bayesian base config
  CHECK_THROWS_AS(sweep(base, "omega", {0.0, 0.01}, tree.dir("s3")), ConfigError);
}

TEST_CASE("eval re-evaluates a checkpoint with new metric options" * doctest::timeout(600)) {
  TempTree tree;
  ExperimentConfig cfg = tiny_mnist_cfg(tree, "eval_run", "bayesian");
  run_experiment(cfg);
  MetricOptions m;
  m.score_bins = 10;
  m.entropy_variant = "mean";
  RunResult r = evaluate_checkpoint(cfg.out_dir, m);
  CHECK(r.summary.map >= 0.0);
  csv::Table hist = csv::read(cfg.out_dir + "/hist_score.csv");
  CHECK(hist.rows.size() == 10);
  csv::Table ent = csv::read(cfg.out_dir + "/hist_entropy.csv");
  CHECK(ent.header[0] == "bin_lo_entropy_mean");
}

TEST_CASE("export_plots: files per histogram and per curve metric, byte-stable" *
          doctest::timeout(600)) {
  TempTree tree;
  ExperimentConfig cfg = tiny_mnist_cfg(tree, "plot_run", "bayesian");
  cfg.epochs = 1;
  run_experiment(cfg);

  auto files = export_plots({cfg.out_dir}, "histograms");
  CHECK(files.size() >= 3);
  for (const std::string& f : files) CHECK(fs::exists(f));
  std::string before = slurp(files[0]);
  export_plots({cfg.out_dir}, "histograms");
  CHECK(slurp(files[0]) == before);

  auto base = tiny_mnist_cfg(tree, "plot_sweep_base", "bayesian");
  base.epochs = 1;
  sweep(base, "beta", {0.1, 1.0}, tree.dir("plot_sweep"));
  auto curves = export_plots({tree.dir("plot_sweep")}, "curves");
  CHECK(curves.size() == 5);
  CHECK_THROWS_AS(export_plots({tree.dir("nonexistent_dir_x")}, "curves"), std::exception);
}
