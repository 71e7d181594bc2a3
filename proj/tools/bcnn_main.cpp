#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "bcnn/experiment.hpp"
#include "bcnn/plot.hpp"
#include "bcnn/rng.hpp"
#include "bcnn/scene.hpp"
#include "bcnn/version.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// "a.b.c=value" applied to a config json; values parse as JSON, bare words
// fall back to strings.
void apply_override(json& j, const std::string& kv) {
  auto eq = kv.find('=');
  if (eq == std::string::npos)
    throw bcnn::ConfigError("override must look like key=value: " + kv);
  std::string key = kv.substr(0, eq);
  std::string value = kv.substr(eq + 1);
  json* node = &j;
  size_t pos = 0;
  while (true) {
    size_t dot = key.find('.', pos);
    std::string part = key.substr(pos, dot == std::string::npos ? dot : dot - pos);
    if (part.empty()) throw bcnn::ConfigError("override has an empty key segment: " + kv);
    if (dot == std::string::npos) {
      json parsed = json::parse(value, nullptr, /*allow_exceptions=*/false);
      (*node)[part] = parsed.is_discarded() ? json(value) : parsed;
      return;
    }
    node = &(*node)[part];
    pos = dot + 1;
  }
}

bcnn::ExperimentConfig load_config(const std::string& path,
                                   const std::vector<std::string>& overrides,
                                   const std::string& out_dir, std::uint64_t seed,
                                   bool seed_set) {
  bcnn::ExperimentConfig cfg = bcnn::ExperimentConfig::load(path);
  json j = json::parse(cfg.to_json_text());
  for (const std::string& kv : overrides) apply_override(j, kv);
  if (!out_dir.empty()) j["out_dir"] = out_dir;
  if (seed_set) j["seed"] = seed;
  return bcnn::ExperimentConfig::from_json_text(j.dump());
}

std::vector<double> parse_values(const std::string& csv_list) {
  std::vector<double> out;
  size_t pos = 0;
  while (pos <= csv_list.size()) {
    size_t comma = csv_list.find(',', pos);
    std::string tok = csv_list.substr(pos, comma == std::string::npos ? comma : comma - pos);
    if (!tok.empty()) out.push_back(std::stod(tok));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian convolutional networks for classification and semantic scene "
               "completion, with uncertainty metrics"};
  app.set_version_flag("--version",
                       std::string(bcnn::kVersion) + " (" + bcnn::kGitRevision + ")");
  app.require_subcommand(1);

  std::string config_path, out_dir, axis, values_list, kind = "histograms", run_dir;
  std::uint64_t seed = 0;
  std::vector<std::string> overrides, dirs;
  std::uint64_t count = 50;

  CLI::App* run = app.add_subcommand("run", "train and evaluate one experiment");
  run->add_option("--config", config_path, "experiment config (JSON)")->required();
  bool run_seed_set = false;
  run->add_option("--seed", seed, "override the run seed")->each([&](const std::string&) {
    run_seed_set = true;
  });
  run->add_option("--out", out_dir, "output directory (overrides the config)");
  run->add_option("--override", overrides, "key=value config override (repeatable)");

  CLI::App* sw = app.add_subcommand("sweep", "run one config across an axis of values");
  sw->add_option("--config", config_path, "base experiment config (JSON)")->required();
  sw->add_option("--axis", axis, "config field to sweep")->required();
  sw->add_option("--values", values_list, "comma-separated values")->required();
  bool sweep_seed_set = false;
  sw->add_option("--seed", seed, "shared seed for every run")->each([&](const std::string&) {
    sweep_seed_set = true;
  });
  sw->add_option("--out", out_dir, "sweep output directory")->required();
  sw->add_option("--override", overrides, "key=value config override (repeatable)");

  CLI::App* ev = app.add_subcommand("eval", "re-evaluate a finished run's checkpoint");
  ev->add_option("--run", run_dir, "run directory with manifest.json + checkpoint.bin")
      ->required();
  ev->add_option("--override", overrides, "metrics.* override (repeatable)");

  CLI::App* pl = app.add_subcommand("plot", "render CSV outputs as SVG");
  pl->add_option("--kind", kind, "histograms | curves");
  pl->add_option("dirs", dirs, "run or sweep directories")->required();

  CLI::App* gs = app.add_subcommand("gen-scenes", "pre-generate a synthetic scene set");
  gs->add_option("--out", out_dir, "target directory")->required();
  gs->add_option("--count", count, "number of scenes");
  bool gs_seed_set = false;
  gs->add_option("--seed", seed, "base seed")->each([&](const std::string&) {
    gs_seed_set = true;
  });
  gs->add_option("--override", overrides, "scene.* config override (repeatable)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      bcnn::ExperimentConfig cfg =
          load_config(config_path, overrides, out_dir, seed, run_seed_set);
      bcnn::RunResult r = bcnn::run_experiment(cfg);
      std::printf("run %s: %s=%.4f map=%.4f bc_score=%.4f -> %s\n", cfg.name.c_str(),
                  cfg.task == "voxel_ssc" ? "miou" : "accuracy", r.summary.miou_or_accuracy,
                  r.summary.map, r.summary.bc_score, cfg.out_dir.c_str());
    } else if (*sw) {
      bcnn::ExperimentConfig base =
          load_config(config_path, overrides, "", seed, sweep_seed_set);
      auto results = bcnn::sweep(base, axis, parse_values(values_list), out_dir);
      std::printf("sweep %s over %zu values -> %s/curve.csv\n", axis.c_str(), results.size(),
                  out_dir.c_str());
    } else if (*ev) {
      bcnn::MetricOptions metrics =
          bcnn::config_from_manifest(run_dir + "/manifest.json").metrics;
      if (!overrides.empty()) {
        json j{{"m", json::parse(R"({})")}};
        j["m"] = {{"score_bins", metrics.score_bins},
                  {"entropy_bins", metrics.entropy_bins},
                  {"entropy_variant", metrics.entropy_variant},
                  {"bc_paper_literal", metrics.bc_paper_literal},
                  {"partition", metrics.partition},
                  {"distance_edges", metrics.distance_edges}};
        for (const std::string& kv : overrides) {
          if (kv.rfind("metrics.", 0) != 0)
            throw bcnn::ConfigError("eval overrides must target metrics.*: " + kv);
          apply_override(j["m"], kv.substr(8));
        }
        metrics.score_bins = j["m"].at("score_bins").get<bcnn::Index>();
        metrics.entropy_bins = j["m"].at("entropy_bins").get<bcnn::Index>();
        metrics.entropy_variant = j["m"].at("entropy_variant").get<std::string>();
        metrics.bc_paper_literal = j["m"].at("bc_paper_literal").get<bool>();
        metrics.partition = j["m"].at("partition").get<std::string>();
        metrics.distance_edges = j["m"].at("distance_edges").get<std::vector<double>>();
      }
      bcnn::RunResult r = bcnn::evaluate_checkpoint(run_dir, metrics);
      std::printf("eval %s: metric=%.4f map=%.4f bc_score=%.4f\n", run_dir.c_str(),
                  r.summary.miou_or_accuracy, r.summary.map, r.summary.bc_score);
    } else if (*pl) {
      auto files = bcnn::export_plots(dirs, kind);
      std::printf("wrote %zu plot(s)\n", files.size());
    } else if (*gs) {
      json scene_json = json::object();
      for (const std::string& kv : overrides) {
        if (kv.rfind("scene.", 0) != 0)
          throw bcnn::ConfigError("gen-scenes overrides must target scene.*: " + kv);
        apply_override(scene_json, kv.substr(6));
      }
      bcnn::SceneConfig scfg = scene_json.empty()
                                   ? bcnn::SceneConfig{}
                                   : bcnn::scene_config_from_json_text(scene_json.dump());
      fs::create_directories(out_dir);
      std::uint64_t base_seed = gs_seed_set ? seed : 1;
      for (std::uint64_t i = 0; i < count; ++i) {
        std::uint64_t scene_seed =
            bcnn::RngStream::derive(base_seed, {bcnn::rng_tag::kScene, i}).next_u64();
        bcnn::VoxelScene s = bcnn::make_scene(scene_seed, scfg);
        bcnn::save_scene(out_dir + bcnn::strfmt("/scene_%04llu.scene",
                                                static_cast<unsigned long long>(i)),
                         s);
      }
      std::printf("wrote %llu scene(s) to %s\n", static_cast<unsigned long long>(count),
                  out_dir.c_str());
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
