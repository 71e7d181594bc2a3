#include "bcnn/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <cstring>
#include <numbers>
#include <numeric>
#include <sstream>

#include "bcnn/csvio.hpp"
#include "bcnn/digits.hpp"
#include "bcnn/mnist_idx.hpp"
#include "bcnn/version.hpp"
#include "json.hpp"

namespace bcnn {

namespace fs = std::filesystem;
using nlohmann::json;

// --- config parsing ------------------------------------------------------------------

HistAxis MetricOptions::entropy_axis() const {
  if (entropy_variant == "paper") return HistAxis::EntropyPaper;
  if (entropy_variant == "mean") return HistAxis::EntropyMean;
  throw ConfigError(strfmt("metrics.entropy_variant must be 'paper' or 'mean', got '%s'",
                           entropy_variant.c_str()));
}

PartitionKind MetricOptions::partition_kind() const {
  if (partition == "tp_fn") return PartitionKind::TpFn;
  if (partition == "tp_fp") return PartitionKind::TpFp;
  throw ConfigError(strfmt("metrics.partition must be 'tp_fn' or 'tp_fp', got '%s'",
                           partition.c_str()));
}

namespace {

void check_keys(const json& j, std::initializer_list<const char*> allowed, const char* ctx) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed) ok = ok || it.key() == k;
    if (!ok) throw ConfigError(strfmt("%s: unknown field '%s'", ctx, it.key().c_str()));
  }
}

std::string resolve_path(const std::string& p, const std::string& base_dir, bool data_file) {
  if (p.empty() || fs::path(p).is_absolute()) return p;
  if (data_file) {
    if (const char* root = std::getenv("BCNN_DATA_ROOT"); root && *root)
      return (fs::path(root) / p).string();
  }
  if (!base_dir.empty()) return (fs::path(base_dir) / p).string();
  return p;
}

Prior parse_prior(const json& j) {
  check_keys(j, {"kind", "gamma", "sigma", "alpha", "sigma0", "sigma1"}, "prior");
  std::string kind = j.at("kind").get<std::string>();
  if (kind == "cauchy") return Prior::cauchy(j.at("gamma").get<real>());
  if (kind == "gaussian") return Prior::gaussian(j.at("sigma").get<real>());
  if (kind == "gaussian_mixture")
    return Prior::gaussian_mixture(j.at("alpha").get<real>(), j.at("sigma0").get<real>(),
                                   j.at("sigma1").get<real>());
  throw ConfigError(strfmt("prior: unknown kind '%s'", kind.c_str()));
}

json prior_json(const Prior& p) {
  switch (p.kind) {
    case PriorKind::Cauchy: return {{"kind", "cauchy"}, {"gamma", p.cauchy_gamma}};
    case PriorKind::Gaussian: return {{"kind", "gaussian"}, {"sigma", p.gaussian_sigma}};
    case PriorKind::GaussianMixture:
      return {{"kind", "gaussian_mixture"},
              {"alpha", p.mix_alpha},
              {"sigma0", p.mix_sigma0},
              {"sigma1", p.mix_sigma1}};
  }
  return {};
}

SceneConfig parse_scene_config(const json& j) {
  check_keys(j,
             {"grid_dims", "voxel_size", "class_names", "min_furniture", "max_furniture",
              "door_probability", "image_width", "image_height", "hfov_deg", "max_range",
              "truncation_voxels"},
             "data.scene");
  SceneConfig cfg;
  if (j.contains("grid_dims")) {
    auto d = j.at("grid_dims").get<std::vector<Index>>();
    if (d.size() != 3) throw ConfigError("data.scene.grid_dims must have 3 extents");
    std::copy_n(d.begin(), 3, cfg.grid_dims.begin());
  }
  cfg.voxel_size = j.value("voxel_size", cfg.voxel_size);
  if (j.contains("class_names"))
    cfg.class_names = j.at("class_names").get<std::vector<std::string>>();
  cfg.min_furniture = j.value("min_furniture", cfg.min_furniture);
  cfg.max_furniture = j.value("max_furniture", cfg.max_furniture);
  cfg.door_probability = j.value("door_probability", cfg.door_probability);
  cfg.image_width = j.value("image_width", cfg.image_width);
  cfg.image_height = j.value("image_height", cfg.image_height);
  cfg.hfov_deg = j.value("hfov_deg", cfg.hfov_deg);
  cfg.max_range = j.value("max_range", cfg.max_range);
  cfg.truncation_voxels = j.value("truncation_voxels", cfg.truncation_voxels);
  cfg.validate();
  return cfg;
}

json scene_config_json(const SceneConfig& cfg) {
  return {{"grid_dims", cfg.grid_dims},
          {"voxel_size", cfg.voxel_size},
          {"class_names", cfg.class_names},
          {"min_furniture", cfg.min_furniture},
          {"max_furniture", cfg.max_furniture},
          {"door_probability", cfg.door_probability},
          {"image_width", cfg.image_width},
          {"image_height", cfg.image_height},
          {"hfov_deg", cfg.hfov_deg},
          {"max_range", cfg.max_range},
          {"truncation_voxels", cfg.truncation_voxels}};
}

DataConfig parse_data(const json& j, const std::string& base_dir) {
  check_keys(j,
             {"kind", "train_images", "train_labels", "test_images", "test_labels",
              "train_count", "test_count", "scene_count", "train_fraction", "scene",
              "scene_dir", "data_seed"},
             "data");
  DataConfig d;
  d.kind = j.at("kind").get<std::string>();
  d.data_seed = j.value("data_seed", d.data_seed);
  if (d.kind == "idx") {
    d.train_images = resolve_path(j.at("train_images").get<std::string>(), base_dir, true);
    d.train_labels = resolve_path(j.at("train_labels").get<std::string>(), base_dir, true);
    d.test_images = resolve_path(j.at("test_images").get<std::string>(), base_dir, true);
    d.test_labels = resolve_path(j.at("test_labels").get<std::string>(), base_dir, true);
  } else if (d.kind == "generated_digits") {
    d.train_count = j.value("train_count", d.train_count);
    d.test_count = j.value("test_count", d.test_count);
  } else if (d.kind == "generated_scenes") {
    d.scene_count = j.value("scene_count", d.scene_count);
    d.train_fraction = j.value("train_fraction", d.train_fraction);
    if (j.contains("scene")) d.scene = parse_scene_config(j.at("scene"));
  } else if (d.kind == "scene_dir") {
    d.scene_dir = resolve_path(j.at("scene_dir").get<std::string>(), base_dir, true);
    d.train_fraction = j.value("train_fraction", d.train_fraction);
  } else {
    throw ConfigError(strfmt("data.kind '%s' unknown", d.kind.c_str()));
  }
  return d;
}

json data_json(const DataConfig& d) {
  json j{{"kind", d.kind}, {"data_seed", d.data_seed}};
  if (d.kind == "idx") {
    j["train_images"] = d.train_images;
    j["train_labels"] = d.train_labels;
    j["test_images"] = d.test_images;
    j["test_labels"] = d.test_labels;
  } else if (d.kind == "generated_digits") {
    j["train_count"] = d.train_count;
    j["test_count"] = d.test_count;
  } else if (d.kind == "generated_scenes") {
    j["scene_count"] = d.scene_count;
    j["train_fraction"] = d.train_fraction;
    j["scene"] = scene_config_json(d.scene);
  } else if (d.kind == "scene_dir") {
    j["scene_dir"] = d.scene_dir;
    j["train_fraction"] = d.train_fraction;
  }
  return j;
}

MetricOptions parse_metrics(const json& j) {
  check_keys(j,
             {"score_bins", "entropy_bins", "entropy_variant", "bc_paper_literal", "partition",
              "distance_edges"},
             "metrics");
  MetricOptions m;
  m.score_bins = j.value("score_bins", m.score_bins);
  m.entropy_bins = j.value("entropy_bins", m.entropy_bins);
  m.entropy_variant = j.value("entropy_variant", m.entropy_variant);
  m.bc_paper_literal = j.value("bc_paper_literal", m.bc_paper_literal);
  m.partition = j.value("partition", m.partition);
  if (j.contains("distance_edges"))
    m.distance_edges = j.at("distance_edges").get<std::vector<double>>();
  m.entropy_axis();
  m.partition_kind();
  if (m.score_bins < 1 || m.entropy_bins < 1)
    throw ConfigError("metrics: bin counts must be >= 1");
  return m;
}

json metrics_json(const MetricOptions& m) {
  return {{"score_bins", m.score_bins},
          {"entropy_bins", m.entropy_bins},
          {"entropy_variant", m.entropy_variant},
          {"bc_paper_literal", m.bc_paper_literal},
          {"partition", m.partition},
          {"distance_edges", m.distance_edges}};
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text,
                                                  const std::string& base_dir) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(strfmt("experiment config: invalid JSON: %s", e.what()));
  }
  ExperimentConfig cfg;
  try {
    check_keys(j,
               {"name", "task", "mode", "arch", "prior", "sigma0", "beta", "omega",
                "forward_passes", "epochs", "batch_size", "learning_rate", "leave_out_class",
                "seed", "data", "out_dir", "metrics", "eval_every"},
               "experiment config");
    cfg.name = j.value("name", cfg.name);
    cfg.task = j.at("task").get<std::string>();
    cfg.mode = j.at("mode").get<std::string>();
    if (cfg.mode != "bayesian" && cfg.mode != "deterministic")
      throw ConfigError(strfmt("mode '%s' unknown", cfg.mode.c_str()));
    if (cfg.task != "mnist" && cfg.task != "voxel_ssc")
      throw ConfigError(strfmt("task '%s' unknown", cfg.task.c_str()));

    // mode/field consistency is a parse-time contract
    if (cfg.mode == "deterministic") {
      for (const char* k : {"prior", "sigma0", "beta"})
        if (j.contains(k))
          throw ConfigError(strfmt("field '%s' is only valid in bayesian mode", k));
    } else if (j.contains("omega")) {
      throw ConfigError("field 'omega' is only valid in deterministic mode");
    }

    cfg.arch_file = resolve_path(j.at("arch").get<std::string>(), base_dir, false);
    if (j.contains("prior")) cfg.prior = parse_prior(j.at("prior"));
    cfg.sigma0 = j.value("sigma0", cfg.sigma0);
    cfg.beta = j.value("beta", cfg.beta);
    cfg.omega = j.value("omega", cfg.omega);
    cfg.forward_passes = j.value("forward_passes", cfg.forward_passes);
    cfg.epochs = j.value("epochs", cfg.epochs);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.learning_rate = j.value("learning_rate", cfg.learning_rate);
    cfg.leave_out_class = j.value("leave_out_class", cfg.leave_out_class);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.data = parse_data(j.at("data"), base_dir);
    cfg.out_dir = j.value("out_dir", cfg.out_dir);
    if (j.contains("metrics")) cfg.metrics = parse_metrics(j.at("metrics"));
    cfg.eval_every = j.value("eval_every", cfg.eval_every);
  } catch (const json::exception& e) {
    throw ConfigError(strfmt("experiment config: %s", e.what()));
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(strfmt("cannot open experiment config '%s'", path.c_str()));
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json_text(ss.str(), fs::path(path).parent_path().string());
}

std::string ExperimentConfig::to_json_text() const {
  json j;
  j["name"] = name;
  j["task"] = task;
  j["mode"] = mode;
  j["arch"] = arch_file;
  if (bayesian()) {
    j["prior"] = prior_json(prior);
    j["sigma0"] = sigma0;
    j["beta"] = beta;
  } else {
    j["omega"] = omega;
  }
  j["forward_passes"] = forward_passes;
  j["epochs"] = epochs;
  j["batch_size"] = batch_size;
  j["learning_rate"] = learning_rate;
  j["leave_out_class"] = leave_out_class;
  j["seed"] = seed;
  j["data"] = data_json(data);
  j["out_dir"] = out_dir;
  j["metrics"] = metrics_json(metrics);
  j["eval_every"] = eval_every;
  return j.dump(2);
}

void ExperimentConfig::validate() const {
  if (arch_file.empty()) throw ConfigError("experiment: no architecture file");
  if (epochs < 1) throw ConfigError("experiment: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("experiment: batch_size must be >= 1");
  if (forward_passes < 1) throw ConfigError("experiment: forward_passes must be >= 1");
  if (!(learning_rate > 0)) throw ConfigError("experiment: learning_rate must be > 0");
  if (bayesian()) {
    prior.validate();
    if (!(sigma0 > 0)) throw ConfigError("experiment: sigma0 must be > 0");
    if (beta < 0) throw ConfigError("experiment: beta must be >= 0");
  } else if (omega < 0) {
    throw ConfigError("experiment: omega must be >= 0");
  }
  if (task == "mnist" && data.kind != "idx" && data.kind != "generated_digits")
    throw ConfigError("experiment: mnist task needs idx or generated_digits data");
  if (task == "voxel_ssc" && data.kind != "generated_scenes" && data.kind != "scene_dir")
    throw ConfigError("experiment: voxel_ssc task needs generated_scenes or scene_dir data");
}

// --- datasets ------------------------------------------------------------------------

namespace {

Dataset scenes_to_dataset(const std::vector<VoxelScene>& scenes, const std::string& split) {
  if (scenes.empty()) throw ConfigError("scene dataset: no scenes");
  const auto dims = scenes[0].dims;
  const Index per = dims[0] * dims[1] * dims[2];
  Dataset ds;
  ds.element_shape = {dims[0], dims[1], dims[2]};
  ds.num_classes = static_cast<Index>(scenes[0].class_names.size());
  ds.class_names = scenes[0].class_names;
  ds.split = split;
  std::vector<real> inputs;
  inputs.reserve(static_cast<size_t>(per) * scenes.size());
  ds.labels.reserve(static_cast<size_t>(per) * scenes.size());
  ds.mask.reserve(static_cast<size_t>(per) * scenes.size());
  ds.dist_to_surface.reserve(static_cast<size_t>(per) * scenes.size());
  for (const VoxelScene& s : scenes) {
    if (s.dims != dims) throw ConfigError("scene dataset: mixed grid dims");
    inputs.insert(inputs.end(), s.tsdf.begin(), s.tsdf.end());
    ds.labels.insert(ds.labels.end(), s.semantic.begin(), s.semantic.end());
    ds.mask.insert(ds.mask.end(), s.fov.begin(), s.fov.end());
    for (double d : s.dist_to_surface) ds.dist_to_surface.push_back(static_cast<float>(d));
  }
  ds.inputs = Tensor::from_values(
      {static_cast<Index>(scenes.size()), 1, dims[0], dims[1], dims[2]}, std::move(inputs));
  ds.validate();
  return ds;
}

}  // namespace

SceneConfig scene_config_from_json_text(const std::string& text) {
  try {
    return parse_scene_config(json::parse(text));
  } catch (const json::exception& e) {
    throw ConfigError(strfmt("scene config: %s", e.what()));
  }
}

std::pair<Dataset, Dataset> build_datasets(const ExperimentConfig& cfg) {
  Dataset train, test;
  if (cfg.data.kind == "idx") {
    train = load_mnist_idx(cfg.data.train_images, cfg.data.train_labels);
    test = load_mnist_idx(cfg.data.test_images, cfg.data.test_labels);
    train.split = "train";
    test.split = "test";
  } else if (cfg.data.kind == "generated_digits") {
    fs::path data_dir = fs::path(cfg.out_dir) / "data";
    fs::create_directories(data_dir);
    std::uint64_t train_seed =
        RngStream::derive(cfg.data.data_seed, {rng_tag::kDataGen, 1}).next_u64();
    std::uint64_t test_seed =
        RngStream::derive(cfg.data.data_seed, {rng_tag::kDataGen, 2}).next_u64();
    auto ti = (data_dir / "train-images.idx").string();
    auto tl = (data_dir / "train-labels.idx").string();
    auto vi = (data_dir / "test-images.idx").string();
    auto vl = (data_dir / "test-labels.idx").string();
    write_digit_idx(ti, tl, cfg.data.train_count, train_seed);
    write_digit_idx(vi, vl, cfg.data.test_count, test_seed);
    train = load_mnist_idx(ti, tl);
    test = load_mnist_idx(vi, vl);
    train.split = "train";
    test.split = "test";
  } else if (cfg.data.kind == "generated_scenes") {
    const Index n = cfg.data.scene_count;
    const Index n_train = std::max<Index>(
        1, static_cast<Index>(std::llround(double(n) * cfg.data.train_fraction)));
    std::vector<VoxelScene> train_scenes, test_scenes;
    for (Index i = 0; i < n; ++i) {
      std::uint64_t scene_seed =
          RngStream::derive(cfg.data.data_seed, {rng_tag::kScene, static_cast<std::uint64_t>(i)})
              .next_u64();
      VoxelScene s = make_scene(scene_seed, cfg.data.scene);
      (i < n_train ? train_scenes : test_scenes).push_back(std::move(s));
    }
    if (test_scenes.empty()) throw ConfigError("generated_scenes: train_fraction leaves no test scenes");
    train = scenes_to_dataset(train_scenes, "train");
    test = scenes_to_dataset(test_scenes, "test");
  } else if (cfg.data.kind == "scene_dir") {
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(cfg.data.scene_dir))
      if (e.path().extension() == ".scene") files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    if (files.size() < 2) throw ConfigError("scene_dir: need at least 2 scene files");
    const size_t n_train = std::max<size_t>(
        1, static_cast<size_t>(std::llround(double(files.size()) * cfg.data.train_fraction)));
    std::vector<VoxelScene> train_scenes, test_scenes;
    for (size_t i = 0; i < files.size(); ++i)
      (i < n_train ? train_scenes : test_scenes).push_back(load_scene(files[i]));
    if (test_scenes.empty()) throw ConfigError("scene_dir: train_fraction leaves no test scenes");
    train = scenes_to_dataset(train_scenes, "train");
    test = scenes_to_dataset(test_scenes, "test");
  } else {
    throw ConfigError("unknown data kind");
  }

  if (cfg.leave_out_class >= 0) train = leave_out_class(train, cfg.leave_out_class);
  return {std::move(train), std::move(test)};
}

// --- evaluation ------------------------------------------------------------------------

namespace {

struct EvalOutcome {
  std::vector<ElementRecord> records;  // evaluated elements, global ids
  IoUResult iou;
  PrfResult prf;
  MAPResult map;
  double nll = 0;
  bool voxel = false;
};

EvalOutcome evaluate_model(Network& net, const Dataset& test, const ExperimentConfig& cfg) {
  const bool bayes = cfg.bayesian();
  const Index T = bayes ? cfg.forward_passes : 1;
  const Index batch_size = test.per_voxel() ? 1 : 256;
  const Index N = test.sample_count();
  const Index per = test.elements_per_sample();
  const Index C = test.num_classes;

  EvalOutcome out;
  out.voxel = test.per_voxel();
  std::vector<real> mean_rows;   // [n_eval][C]
  std::vector<std::int32_t> gt_eval, pred_eval;

  Index batch_index = 0;
  for (Index lo = 0; lo < N; lo += batch_size, ++batch_index) {
    const Index hi = std::min(lo + batch_size, N);
    std::vector<Index> idx(static_cast<size_t>(hi - lo));
    std::iota(idx.begin(), idx.end(), lo);
    Batch batch = gather_batch(test, idx);

    const Index E = (hi - lo) * per;
    PredictionSet ps;
    ps.T = T;
    ps.E = E;
    ps.C = C;
    ps.probs.resize(static_cast<size_t>(T * E * C));
    ps.labels = batch.targets;
    ps.eval_mask = batch.mask;
    if (!test.dist_to_surface.empty())
      ps.dist_to_surface.assign(test.dist_to_surface.begin() + lo * per,
                                test.dist_to_surface.begin() + hi * per);

    for (Index t = 0; t < T; ++t) {
      Tensor probs;
      if (bayes) {
        RngStream rng = RngStream::derive(cfg.seed, {rng_tag::kEvalSample,
                                                     static_cast<std::uint64_t>(t),
                                                     static_cast<std::uint64_t>(batch_index)});
        probs = net.forward(batch.inputs, WeightMode::Sample, &rng, false);
      } else {
        probs = net.forward(batch.inputs, WeightMode::Mean, nullptr, false);
      }
      // [B, C, S...] -> [E][C] slab of pass t
      const Index B = hi - lo;
      const Index inner = per;
      const real* pv = probs.values().data();
      real* slab = ps.probs.data() + t * E * C;
#pragma omp parallel for schedule(static)
      for (Index e = 0; e < E; ++e) {
        const Index b = e / inner, i = e % inner;
        for (Index c = 0; c < C; ++c) slab[e * C + c] = pv[(b * C + c) * inner + i];
      }
      (void)B;
    }

    std::vector<ElementRecord> recs = summarize(ps);
    MeanPrediction mp = predictive_mean(ps);
    const Index id_base = lo * per;
    for (Index e = 0; e < E; ++e) {
      const ElementRecord& r = recs[static_cast<size_t>(e)];
      if (!r.evaluated || r.true_label == kIgnoreLabel) continue;
      ElementRecord g = r;
      g.id = id_base + e;
      out.records.push_back(g);
      for (Index c = 0; c < C; ++c)
        mean_rows.push_back(mp.mean[static_cast<size_t>(e * C + c)]);
      gt_eval.push_back(r.true_label);
      pred_eval.push_back(r.predicted);
      out.nll += -std::log(std::max(
          double(mp.mean[static_cast<size_t>(e * C + r.true_label)]), 1e-12));
    }
  }

  if (gt_eval.empty()) throw ContractError("evaluation: no elements inside the mask");
  out.nll /= static_cast<double>(gt_eval.size());
  out.map = mean_average_precision(mean_rows, C, gt_eval, {});
  out.prf = accuracy_precision_recall(out.records, C);
  if (out.voxel) out.iou = iou(pred_eval, gt_eval, {}, C);
  return out;
}

struct HistogramSet {
  Histogram2 score, entropy, combined;
  double bc_score = 0, bc_entropy = 0, bc_combined = 0;
};

double safe_bc(const Histogram2& h, bool literal) {
  double sum_p = std::accumulate(h.tp.begin(), h.tp.end(), 0.0);
  double sum_q = std::accumulate(h.other.begin(), h.other.end(), 0.0);
  if (sum_p <= 0 || sum_q <= 0) return 0.0;  // one side empty: no overlap measurable
  return bhattacharyya(h, literal);
}

HistogramSet make_histograms(const std::vector<ElementRecord>& records,
                             const ExperimentConfig& cfg, Index num_classes) {
  const MetricOptions& m = cfg.metrics;
  const Index T = cfg.bayesian() ? cfg.forward_passes : 1;
  // paper-literal entropy peaks at T/e per class; entropy of the mean at ln C
  const double entropy_hi = m.entropy_axis() == HistAxis::EntropyPaper
                                ? double(T) / std::numbers::e_v<double>
                                : std::log(double(num_classes));
  HistogramSet hs;
  auto score_edges = uniform_edges(0, 1, m.score_bins);
  auto entropy_edges = uniform_edges(0, entropy_hi, m.entropy_bins);
  PartitionKind kind = m.partition_kind();
  hs.score = bin_predictions(records, {HistAxis::Score}, {score_edges}, kind);
  hs.entropy = bin_predictions(records, {m.entropy_axis()}, {entropy_edges}, kind);
  hs.combined = bin_predictions(records, {m.entropy_axis(), HistAxis::Score},
                                {entropy_edges, score_edges}, kind);
  hs.bc_score = safe_bc(hs.score, m.bc_paper_literal);
  hs.bc_entropy = safe_bc(hs.entropy, m.bc_paper_literal);
  hs.bc_combined = safe_bc(hs.combined, m.bc_paper_literal);
  return hs;
}

void write_histogram_csv(const std::string& path, const Histogram2& h,
                         const std::string& axis0, const std::string& axis1 = "") {
  std::remove(path.c_str());
  std::vector<std::string> header;
  header.push_back("bin_lo_" + axis0);
  if (h.n_axes == 2) header.push_back("bin_lo_" + axis1);
  header.push_back("tp");
  header.push_back(h.kind == PartitionKind::TpFn ? "fn" : "fp");
  for (Index b0 = 0; b0 < h.bins0(); ++b0)
    for (Index b1 = 0; b1 < h.bins1(); ++b1) {
      std::vector<std::string> row;
      row.push_back(csv::num(h.edges0[static_cast<size_t>(b0)]));
      if (h.n_axes == 2) row.push_back(csv::num(h.edges1[static_cast<size_t>(b1)]));
      size_t bin = static_cast<size_t>(b0 * h.bins1() + b1);
      row.push_back(csv::num(h.tp[bin]));
      row.push_back(csv::num(h.other[bin]));
      csv::append_row(path, header, row);
    }
}

void write_dump_csv(const std::string& path, const std::vector<ElementRecord>& records,
                    bool voxel) {
  std::remove(path.c_str());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << csv::join(element_dump_header()) << "\n";
  for (const ElementRecord& r : records) {
    out << r.id << "," << r.true_label << "," << r.predicted << "," << csv::num(r.mean_score)
        << "," << csv::num(r.entropy_paper) << "," << csv::num(r.entropy_mean) << ","
        << csv::num(r.aleatoric_diag) << "," << csv::num(r.epistemic_diag) << ",";
    if (voxel) out << csv::num(r.dist_to_surface);
    out << "\n";
  }
}

SummaryRow make_summary(const ExperimentConfig& cfg, const NetworkSpec& arch,
                        const EvalOutcome& eval, const HistogramSet& hs) {
  SummaryRow row;
  row.type = cfg.bayesian() ? "B" : "D";
  row.arch = arch.name;
  row.parameters = cfg.bayesian()
                       ? strfmt("%s, sigma0=%g, beta=%g", cfg.prior.describe().c_str(),
                                double(cfg.sigma0), double(cfg.beta))
                       : strfmt("omega=%g", double(cfg.omega));
  row.miou_or_accuracy = eval.voxel ? eval.iou.miou : eval.prf.accuracy;
  row.map = eval.map.map;
  row.bc_score = hs.bc_score;
  row.bc_entropy = hs.bc_entropy;
  row.bc_score_entropy = hs.bc_combined;
  return row;
}

void write_summary_csv(const std::string& path, const SummaryRow& row) {
  std::remove(path.c_str());
  csv::append_row(path, summary_header(),
                  {row.type, row.arch, row.parameters, csv::num(row.miou_or_accuracy),
                   csv::num(row.map), csv::num(row.bc_score), csv::num(row.bc_entropy),
                   csv::num(row.bc_score_entropy)});
}

void write_eval_outputs(const std::string& out_dir, const ExperimentConfig& cfg,
                        const EvalOutcome& eval, const HistogramSet& hs, Index num_classes) {
  const MetricOptions& m = cfg.metrics;
  std::string fn = m.partition == "tp_fn" ? "fn" : "fp";
  write_dump_csv(out_dir + "/dump.csv", eval.records, eval.voxel);
  write_histogram_csv(out_dir + "/hist_score.csv", hs.score, "score");
  write_histogram_csv(out_dir + "/hist_entropy.csv", hs.entropy, m.entropy_variant == "paper"
                                                                     ? "entropy_paper"
                                                                     : "entropy_mean");
  write_histogram_csv(out_dir + "/hist_score_entropy.csv", hs.combined,
                      m.entropy_variant == "paper" ? "entropy_paper" : "entropy_mean", "score");

  if (eval.voxel) {
    // score/entropy histograms per distance band from the observed surface
    for (size_t b = 0; b + 1 < m.distance_edges.size(); ++b) {
      std::vector<ElementRecord> band;
      for (const ElementRecord& r : eval.records)
        if (r.dist_to_surface >= m.distance_edges[b] &&
            r.dist_to_surface < m.distance_edges[b + 1])
          band.push_back(r);
      if (band.empty()) continue;
      Histogram2 hscore = bin_predictions(band, {HistAxis::Score},
                                          {uniform_edges(0, 1, m.score_bins)},
                                          m.partition_kind());
      write_histogram_csv(strfmt("%s/hist_score_dist%zu.csv", out_dir.c_str(), b), hscore,
                          "score");
      const Index T = cfg.bayesian() ? cfg.forward_passes : 1;
      const double entropy_hi = m.entropy_axis() == HistAxis::EntropyPaper
                                    ? double(T) / std::numbers::e_v<double>
                                    : std::log(double(num_classes));
      Histogram2 hent = bin_predictions(band, {m.entropy_axis()},
                                        {uniform_edges(0, entropy_hi, m.entropy_bins)},
                                        m.partition_kind());
      write_histogram_csv(strfmt("%s/hist_entropy_dist%zu.csv", out_dir.c_str(), b), hent,
                          "entropy");
    }
  }
}

constexpr char kCheckpointMagic[9] = "BCNNCKPT";

void save_checkpoint(const std::string& path, Index epochs_done, const Network& net,
                     const AdamOptimizer& opt) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint " + tmp);
    out.write(kCheckpointMagic, 8);
    std::uint64_t e = static_cast<std::uint64_t>(epochs_done);
    out.write(reinterpret_cast<const char*>(&e), sizeof(e));
    net.save(out);
    opt.save(out);
  }
  fs::rename(tmp, path);
}

Index load_checkpoint(const std::string& path, Network& net, AdamOptimizer& opt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw IoError("checkpoint: bad magic in " + path);
  std::uint64_t e = 0;
  in.read(reinterpret_cast<char*>(&e), sizeof(e));
  net.load(in);
  opt.load(in);
  return static_cast<Index>(e);
}

}  // namespace

// --- run -------------------------------------------------------------------------------

RunResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  fs::create_directories(cfg.out_dir);

  // reproducibility manifest first
  {
    json manifest;
    manifest["config"] = json::parse(cfg.to_json_text());
    manifest["version"] = kVersion;
    manifest["revision"] = kGitRevision;
    std::ofstream out(cfg.out_dir + "/manifest.json");
    if (!out) throw IoError("cannot write manifest in " + cfg.out_dir);
    out << manifest.dump(2) << "\n";
  }

  NetworkSpec arch = NetworkSpec::load(cfg.arch_file);
  arch.mode = cfg.bayesian() ? NetworkMode::Bayesian : NetworkMode::Deterministic;
  if (cfg.bayesian()) {
    arch.prior = cfg.prior;
    arch.sigma0 = cfg.sigma0;
  }

  auto [train, test] = build_datasets(cfg);
  if (train.num_classes != arch.num_classes)
    throw ConfigError(strfmt("dataset has %lld classes but the architecture expects %lld",
                             static_cast<long long>(train.num_classes),
                             static_cast<long long>(arch.num_classes)));

  RngStream init_rng = RngStream::derive(cfg.seed, {rng_tag::kNetInit});
  Network net = Network::build(arch, init_rng);
  AdamConfig acfg;
  acfg.lr = cfg.learning_rate;
  acfg.weight_decay = cfg.bayesian() ? real(0) : cfg.omega;
  AdamOptimizer opt(net.trainable(), acfg);

  const std::string ckpt = cfg.out_dir + "/checkpoint.bin";
  const std::string metrics_csv = cfg.out_dir + "/metrics.csv";
  Index start_epoch = 0;
  if (fs::exists(ckpt)) {
    start_epoch = load_checkpoint(ckpt, net, opt);
  } else {
    std::remove(metrics_csv.c_str());
  }

  RunResult result;
  result.out_dir = cfg.out_dir;

  auto run_eval = [&](Index epoch) {
    EvalOutcome eval = evaluate_model(net, test, cfg);
    HistogramSet hs = make_histograms(eval.records, cfg, test.num_classes);
    SummaryRow row = make_summary(cfg, arch, eval, hs);
    EpochStats es;
    es.loss = eval.nll;
    es.nll = eval.nll;
    es.accuracy = row.miou_or_accuracy;
    append_epoch_metrics(metrics_csv, epoch, "test", es);
    result.curve.push_back({epoch, row});
    return std::make_tuple(std::move(eval), std::move(hs), std::move(row));
  };

  for (Index epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    EpochStats stats =
        train_epoch(net, train, cfg.batch_size, cfg.beta, opt, cfg.seed, epoch);
    append_epoch_metrics(metrics_csv, epoch, "train", stats);
    save_checkpoint(ckpt, epoch + 1, net, opt);
    result.final_train = stats;
    if (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 && epoch + 1 < cfg.epochs)
      run_eval(epoch + 1);
  }

  auto [eval, hs, row] = run_eval(cfg.epochs);
  write_eval_outputs(cfg.out_dir, cfg, eval, hs, test.num_classes);
  write_summary_csv(cfg.out_dir + "/summary.csv", row);

  result.summary = row;
  result.iou = std::move(eval.iou);
  result.prf = std::move(eval.prf);
  result.map_detail = std::move(eval.map);
  result.records = std::move(eval.records);
  return result;
}

// --- sweep -----------------------------------------------------------------------------

std::vector<RunResult> sweep(const ExperimentConfig& base, const std::string& axis,
                             const std::vector<double>& values, const std::string& out_dir) {
  static const std::vector<std::string> kDoubleAxes{"beta", "omega", "sigma0", "learning_rate"};
  static const std::vector<std::string> kIntAxes{"epochs", "batch_size", "forward_passes",
                                                 "leave_out_class", "seed", "eval_every"};
  const bool is_double = std::find(kDoubleAxes.begin(), kDoubleAxes.end(), axis) != kDoubleAxes.end();
  const bool is_int = std::find(kIntAxes.begin(), kIntAxes.end(), axis) != kIntAxes.end();
  if (!is_double && !is_int)
    throw ConfigError(strfmt("sweep: axis '%s' is not sweepable", axis.c_str()));
  if (values.empty()) throw ConfigError("sweep: empty value list");

  fs::create_directories(out_dir);
  const std::string curve_csv = out_dir + "/curve.csv";
  std::remove(curve_csv.c_str());
  const std::vector<std::string> header{"value",      "epoch",       "bc_score", "bc_entropy",
                                        "bc_combined", "map",        "accuracy_or_miou"};

  std::vector<RunResult> results;
  for (double v : values) {
    json j = json::parse(base.to_json_text());
    if (is_int)
      j[axis] = static_cast<long long>(std::llround(v));
    else
      j[axis] = v;
    std::string run_dir = out_dir + "/" + axis + "=" + csv::num(v);
    j["out_dir"] = run_dir;
    ExperimentConfig cfg = ExperimentConfig::from_json_text(j.dump());
    RunResult r = run_experiment(cfg);
    for (const EvalPoint& p : r.curve)
      csv::append_row(curve_csv, header,
                      {csv::num(v), std::to_string(p.epoch), csv::num(p.summary.bc_score),
                       csv::num(p.summary.bc_entropy), csv::num(p.summary.bc_score_entropy),
                       csv::num(p.summary.map), csv::num(p.summary.miou_or_accuracy)});
    results.push_back(std::move(r));
  }
  return results;
}

// --- re-evaluation -----------------------------------------------------------------------

ExperimentConfig config_from_manifest(const std::string& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot open manifest " + manifest_path);
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw IoError(strfmt("%s: bad manifest: %s", manifest_path.c_str(), e.what()));
  }
  return ExperimentConfig::from_json_text(manifest.at("config").dump(),
                                          fs::path(manifest_path).parent_path().string());
}

RunResult evaluate_checkpoint(const std::string& run_dir, const MetricOptions& metrics) {
  ExperimentConfig cfg = config_from_manifest(run_dir + "/manifest.json");
  cfg.out_dir = run_dir;
  cfg.metrics = metrics;

  NetworkSpec arch = NetworkSpec::load(cfg.arch_file);
  arch.mode = cfg.bayesian() ? NetworkMode::Bayesian : NetworkMode::Deterministic;
  if (cfg.bayesian()) {
    arch.prior = cfg.prior;
    arch.sigma0 = cfg.sigma0;
  }
  auto [train, test] = build_datasets(cfg);
  (void)train;
  RngStream init_rng = RngStream::derive(cfg.seed, {rng_tag::kNetInit});
  Network net = Network::build(arch, init_rng);
  AdamOptimizer opt(net.trainable(), {});
  load_checkpoint(run_dir + "/checkpoint.bin", net, opt);

  EvalOutcome eval = evaluate_model(net, test, cfg);
  HistogramSet hs = make_histograms(eval.records, cfg, test.num_classes);
  SummaryRow row = make_summary(cfg, arch, eval, hs);
  write_eval_outputs(run_dir, cfg, eval, hs, test.num_classes);
  write_summary_csv(run_dir + "/summary.csv", row);

  RunResult result;
  result.out_dir = run_dir;
  result.summary = row;
  result.curve.push_back({cfg.epochs, row});
  result.iou = std::move(eval.iou);
  result.prf = std::move(eval.prf);
  result.map_detail = std::move(eval.map);
  result.records = std::move(eval.records);
  return result;
}

}  // namespace bcnn
