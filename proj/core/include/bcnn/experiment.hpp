#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bcnn/dataset.hpp"
#include "bcnn/metrics.hpp"
#include "bcnn/network.hpp"
#include "bcnn/scene.hpp"
#include "bcnn/training.hpp"

namespace bcnn {

struct MetricOptions {
  Index score_bins = 20;
  Index entropy_bins = 20;
  std::string entropy_variant = "paper";  // "paper" | "mean"
  bool bc_paper_literal = false;
  std::string partition = "tp_fn";  // "tp_fn" | "tp_fp"
  std::vector<double> distance_edges{0, 0.16, 0.32, 0.64, 1.28, 1e30};

  HistAxis entropy_axis() const;
  PartitionKind partition_kind() const;
};

struct DataConfig {
  std::string kind;  // "idx" | "generated_digits" | "generated_scenes" | "scene_dir"
  // idx
  std::string train_images, train_labels, test_images, test_labels;
  // generated_digits
  Index train_count = 10000;
  Index test_count = 10000;
  // generated_scenes / scene_dir
  Index scene_count = 200;
  double train_fraction = 0.8;
  SceneConfig scene;
  std::string scene_dir;
  std::uint64_t data_seed = 1;
};

// Declarative description of one run. Bayesian runs own (prior, sigma0,
// beta); deterministic runs own omega; mixing them is rejected at parse
// time.
struct ExperimentConfig {
  std::string name = "experiment";
  std::string task;  // "mnist" | "voxel_ssc"
  std::string mode;  // "bayesian" | "deterministic"
  std::string arch_file;
  Prior prior = Prior::cauchy(real(0.3));
  real sigma0 = real(0.5);
  real beta = real(1);
  real omega = real(0);
  Index forward_passes = 20;  // T at evaluation time
  Index epochs = 10;
  Index batch_size = 64;
  real learning_rate = real(1e-3);
  int leave_out_class = -1;
  std::uint64_t seed = 1;
  DataConfig data;
  std::string out_dir = "run";
  MetricOptions metrics;
  Index eval_every = 0;  // also evaluate every k epochs when > 0

  static ExperimentConfig load(const std::string& path);
  // base_dir resolves relative arch/data paths (the config file's directory;
  // the BCNN_DATA_ROOT environment variable wins for data files).
  static ExperimentConfig from_json_text(const std::string& text,
                                         const std::string& base_dir = "");
  std::string to_json_text() const;
  void validate() const;
  bool bayesian() const { return mode == "bayesian"; }
};

struct SummaryRow {
  std::string type;        // "B" | "D"
  std::string arch;
  std::string parameters;  // hyperparameter description
  double miou_or_accuracy = 0;
  double map = 0;
  double bc_score = 0;
  double bc_entropy = 0;
  double bc_score_entropy = 0;
};

struct EvalPoint {
  Index epoch = 0;
  SummaryRow summary;
};

struct RunResult {
  std::string out_dir;
  SummaryRow summary;
  std::vector<EvalPoint> curve;        // eval_every points plus the final one
  IoUResult iou;                       // voxel tasks
  PrfResult prf;
  MAPResult map_detail;
  std::vector<ElementRecord> records;  // evaluated elements
  EpochStats final_train;
};

// Trains per config (resuming from out_dir/checkpoint.bin when present),
// evaluates with T sampled passes (bayesian) or one pass (deterministic),
// and writes manifest.json, metrics.csv, dump.csv, histogram CSVs,
// summary.csv and checkpoint.bin under cfg.out_dir.
RunResult run_experiment(const ExperimentConfig& cfg);

// Re-runs each value of one sweepable axis with a shared seed and writes
// out_dir/curve.csv (value, epoch, bc_score, bc_entropy, bc_combined, map,
// accuracy_or_miou).
std::vector<RunResult> sweep(const ExperimentConfig& base, const std::string& axis,
                             const std::vector<double>& values, const std::string& out_dir);

// Re-evaluates a finished run from its manifest + final checkpoint with new
// metric options (training is not repeated).
RunResult evaluate_checkpoint(const std::string& run_dir, const MetricOptions& metrics);

// Reads back a manifest into a config (out_dir overridable by the caller).
ExperimentConfig config_from_manifest(const std::string& manifest_path);

// Builds the (train, test) pair a config describes, leave-one-out applied.
std::pair<Dataset, Dataset> build_datasets(const ExperimentConfig& cfg);

// Parses the data.scene sub-schema on its own (used by scene pre-generation).
SceneConfig scene_config_from_json_text(const std::string& text);

inline const std::vector<std::string>& summary_header() {
  static const std::vector<std::string> h{"type",     "arch",       "parameters",
                                          "miou_or_accuracy", "map", "bc_score",
                                          "bc_entropy",       "bc_score_entropy"};
  return h;
}

}  // namespace bcnn
