// protoformer: synthetic data, training, evaluation and expert diagnostics.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "protoformer/protoformer.hpp"

namespace fs = std::filesystem;
using namespace protoformer;

namespace {

fs::path relative_to(const fs::path& base_file, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() ? path : base_file.parent_path() / path;
}

/// A config file either is a registry or names one under "registry".
UnifiedIndexMap registry_for(const fs::path& config_path, const json& cfg) {
  if (cfg.contains("unified_size") && cfg.contains("schemes") && cfg.at("schemes").is_array() &&
      !cfg.at("schemes").empty() && cfg.at("schemes")[0].is_object()) {
    return registry_from_json(cfg);
  }
  if (!cfg.contains("registry")) throw ConfigError(config_path.string() + " names no registry");
  return load_registry(relative_to(config_path, cfg.at("registry").get<std::string>()));
}

int synth_command(const fs::path& config_path, std::optional<unsigned long long> seed, const fs::path& out_dir) {
  const json cfg = read_json_file(config_path);
  try {
    const auto map = registry_for(config_path, cfg);
    const auto schemes = cfg.at("schemes").get<std::vector<std::string>>();
    const double noise = cfg.value("noise", 0.0);
    const int image_size = cfg.value("image_size", 64);
    const unsigned long long base_seed = seed.value_or(cfg.value("seed", 0ULL));
    save_registry(map, out_dir / "registry.json");
    int split_index = 0;
    for (const auto& split : cfg.at("splits")) {
      const int n = split.at("n_images").get<int>();
      const std::string suffix = split.value("suffix", "");
      const std::string prefix = split.value("id_prefix", "");
      // Each split draws from its own stream so splits never share faces.
      const auto samples = synth_dataset(n, schemes, map, noise, base_seed * 1000003ULL + split_index, image_size, prefix);
      write_synth_split(samples, schemes, out_dir, suffix);
      std::cout << "wrote " << n << " images for split '" << suffix << "' to " << out_dir << "\n";
      ++split_index;
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed synth config: ") + e.what());
  }
  return 0;
}

int train_command(const fs::path& config_path, std::optional<unsigned long long> seed, const fs::path& out_dir,
                  long max_steps) {
  auto cfg = train_config_from_json(read_json_file(config_path), config_path.parent_path());
  if (seed) cfg.seed = *seed;
  if (max_steps > 0) cfg.max_steps = max_steps;
  if (cfg.registry.empty()) throw ConfigError("train config names no registry");
  const auto map = load_registry(cfg.registry);
  auto train = load_datasets(cfg.datasets, map);
  auto validation = load_datasets(cfg.validation, map);
  std::cout << "training on " << train.size() << " images, validating on " << validation.size() << "\n";
  Trainer trainer(cfg, map, std::move(train), std::move(validation));
  const long total = trainer.total_steps();
  auto summary = trainer.run(out_dir, [&](const StepRecord& r) {
    if (r.step == 1 || r.step % 50 == 0 || r.step == total) {
      std::printf("step %ld/%ld  coord %.5f  index %.5f  pa %.5f  total %.5f\n", r.step, total, r.coord_loss,
                  r.index_loss, r.pa_loss, r.total);
      std::fflush(stdout);
    }
  });
  if (summary.best_validation_nme) {
    std::printf("best validation NME %.6f at step %ld\n", *summary.best_validation_nme, summary.best_step);
  }
  return 0;
}

int eval_command(const fs::path& config_path, const fs::path& out_dir, const std::string& scheme_name,
                 const std::string& norm, double fr_threshold, const std::string& checkpoint,
                 const std::string& annotations, bool oracle) {
  const json cfg = read_json_file(config_path);
  const auto map = registry_for(config_path, cfg);
  const auto& scheme = map.scheme(scheme_name);
  fs::path ann_path;
  if (!annotations.empty()) {
    ann_path = annotations;
  } else {
    const auto specs = train_config_from_json(cfg, config_path.parent_path()).validation;
    for (const auto& s : specs) {
      if (s.scheme == scheme_name) ann_path = s.annotations;
    }
    if (ann_path.empty()) throw ConfigError("no validation annotations for scheme '" + scheme_name + "'; pass --annotations");
  }
  const auto samples = load_dataset({scheme_name, ann_path}, map, 0);

  std::optional<ProtoFormer> model;
  if (!oracle) {
    if (checkpoint.empty()) throw ConfigError("eval needs --checkpoint or --oracle");
    model.emplace(load_checkpoint(checkpoint));
    check_compatible(*model, map);
  }
  const auto report = evaluate(model ? &*model : nullptr, samples, scheme, parse_norm_kind(norm), fr_threshold);
  write_text_file(out_dir / ("eval_" + scheme_name + ".json"), report_to_json(report).dump(2) + "\n");
  std::printf("%s: NME(%s) %.6f  FR@%.2f %.4f  over %zu images\n", scheme_name.c_str(), norm.c_str(), report.nme,
              fr_threshold, report.failure_rate, report.per_image.size());
  return 0;
}

int diagnose_command(const fs::path& config_path, const fs::path& out_dir, const std::string& checkpoint,
                     const std::vector<std::string>& annotations) {
  const json cfg = read_json_file(config_path);
  const auto map = registry_for(config_path, cfg);
  std::vector<DatasetSpec> specs;
  if (!annotations.empty()) {
    for (const auto& a : annotations) {
      const auto eq = a.find('=');
      if (eq == std::string::npos) throw ConfigError("--annotations expects scheme=path, got '" + a + "'");
      specs.push_back({a.substr(0, eq), a.substr(eq + 1)});
    }
  } else {
    auto tc = train_config_from_json(cfg, config_path.parent_path());
    specs = tc.validation.empty() ? tc.datasets : tc.validation;
  }
  if (checkpoint.empty()) throw ConfigError("diagnose needs --checkpoint");
  const auto model = load_checkpoint(checkpoint);
  check_compatible(model, map);

  std::vector<std::string> names;
  for (const auto& s : specs) names.push_back(s.scheme);
  const auto samples = load_datasets(specs, map);
  const auto report = summarize_gating(collect_gating(model, samples), names);
  write_usage_report(report, names, out_dir);
  for (const auto& d : report.datasets) {
    std::printf("%s: %d samples\n", d.name.c_str(), d.samples);
    for (std::size_t s = 0; s < d.normalized.size(); ++s) {
      std::printf("  scale %zu normalized weights:", s + 1);
      for (Eigen::Index e = 0; e < d.normalized[s].size(); ++e) std::printf(" %+.4f", d.normalized[s](e));
      std::printf("\n");
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Unified facial landmark detection with prototype experts"};
  app.require_subcommand(1);

  std::string config;
  std::string out_dir = "out";
  std::optional<unsigned long long> seed;
  auto common = [&](CLI::App* sub) {
    sub->add_option("config", config, "configuration file")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "override the configured seed");
    sub->add_option("--out-dir", out_dir, "output directory");
  };

  auto* synth = app.add_subcommand("synth-data", "generate synthetic multi-scheme face data");
  common(synth);

  long max_steps = 0;
  auto* train = app.add_subcommand("train", "train a model");
  common(train);
  train->add_option("--max-steps", max_steps, "override the configured step budget");

  std::string scheme, norm = "io", checkpoint, annotations;
  double fr_threshold = 0.10;
  bool oracle = false;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on one scheme");
  common(eval);
  eval->add_option("--scheme", scheme, "landmark scheme to evaluate")->required();
  eval->add_option("--norm", norm, "normalizer")->check(CLI::IsMember({"io", "ip", "box"}));
  eval->add_option("--fr-threshold", fr_threshold, "failure-rate threshold")->check(CLI::PositiveNumber);
  eval->add_option("--checkpoint", checkpoint, "checkpoint file");
  eval->add_option("--annotations", annotations, "annotation file (default: the config's validation set)");
  eval->add_flag("--oracle", oracle, "use the ground truth as the prediction");

  std::vector<std::string> diag_annotations;
  auto* diag = app.add_subcommand("diagnose", "report expert usage per dataset");
  common(diag);
  diag->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  diag->add_option("--annotations", diag_annotations, "scheme=path pairs (default: the config's datasets)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) return synth_command(config, seed, out_dir);
    if (*train) return train_command(config, seed, out_dir, max_steps);
    if (*eval) return eval_command(config, out_dir, scheme, norm, fr_threshold, checkpoint, annotations, oracle);
    if (*diag) return diagnose_command(config, out_dir, checkpoint, diag_annotations);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
