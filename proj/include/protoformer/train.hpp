#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "protoformer/augment.hpp"
#include "protoformer/checkpoint.hpp"
#include "protoformer/dataset.hpp"
#include "protoformer/evaluate.hpp"
#include "protoformer/losses.hpp"
#include "protoformer/model.hpp"
#include "protoformer/optimizer.hpp"

namespace protoformer {

struct TrainConfig {
  int epochs = 100;
  long max_steps = 0;  // > 0 overrides epochs
  int batch_size = 8;
  double learning_rate = 5e-5;
  double weight_decay = 1e-4;
  double max_grad_norm = 0.1;  // global gradient clip, 0 disables
  unsigned long long seed = 0;
  AugmentConfig augmentation;
  LossWeights loss_weights;
  PaMode pa_mode = PaMode::SameDataset;
  double no_landmark_weight = 1.0;
  ModelConfig model;
  std::filesystem::path registry;
  std::vector<DatasetSpec> datasets;
  std::vector<DatasetSpec> validation;
  int eval_every = 0;
  NormKind eval_norm = NormKind::Unit;

  /// Matching uses the loss weights: class weight = index weight, coordinate weight = coord weight.
  MatchCostWeights match_weights() const { return {loss_weights.index, loss_weights.coord}; }

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("train config: learning_rate must be positive");
    if (max_grad_norm < 0.0) throw ConfigError("train config: max_grad_norm must be nonnegative");
    if (batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
    if (loss_weights.pa > 0.0 && batch_size < 2) throw ConfigError("train config: PA loss needs batch_size >= 2");
    if (loss_weights.coord < 0.0 || loss_weights.index < 0.0 || loss_weights.pa < 0.0) {
      throw ConfigError("train config: loss weights must be nonnegative");
    }
    if (augmentation.flip_prob < 0.0 || augmentation.flip_prob > 1.0) throw ConfigError("train config: flip_prob outside [0, 1]");
    if (augmentation.max_rotation_deg < 0.0) throw ConfigError("train config: max_rotation_deg must be nonnegative");
    if (epochs < 1 && max_steps <= 0) throw ConfigError("train config: need epochs or max_steps");
    model.validate();
  }
};

inline std::vector<DatasetSpec> dataset_specs_from_json(const json& j) {
  std::vector<DatasetSpec> out;
  if (j.is_object()) {
    for (const auto& [scheme, file] : j.items()) out.push_back({scheme, file.get<std::string>()});
  } else {
    for (const auto& e : j) out.push_back({e.at("scheme").get<std::string>(), e.at("annotations").get<std::string>()});
  }
  return out;
}

/// Relative paths are taken relative to `base_dir`.
inline TrainConfig train_config_from_json(const json& j, const std::filesystem::path& base_dir = {}) {
  TrainConfig c;
  auto path = [&](const std::string& s) {
    std::filesystem::path p(s);
    return p.is_absolute() || base_dir.empty() ? p : base_dir / p;
  };
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("epochs", c.epochs);
    get("max_steps", c.max_steps);
    get("batch_size", c.batch_size);
    get("learning_rate", c.learning_rate);
    get("weight_decay", c.weight_decay);
    get("max_grad_norm", c.max_grad_norm);
    get("seed", c.seed);
    get("no_landmark_weight", c.no_landmark_weight);
    get("eval_every", c.eval_every);
    if (j.contains("augmentation")) {
      const auto& a = j.at("augmentation");
      if (a.contains("max_rotation_deg")) c.augmentation.max_rotation_deg = a.at("max_rotation_deg").get<double>();
      if (a.contains("flip_prob")) c.augmentation.flip_prob = a.at("flip_prob").get<double>();
    }
    if (j.contains("loss_weights")) {
      const auto& w = j.at("loss_weights");
      if (w.contains("coord")) c.loss_weights.coord = w.at("coord").get<double>();
      if (w.contains("index")) c.loss_weights.index = w.at("index").get<double>();
      if (w.contains("pa")) c.loss_weights.pa = w.at("pa").get<double>();
    }
    if (j.contains("pa_mode")) c.pa_mode = parse_pa_mode(j.at("pa_mode").get<std::string>());
    if (j.contains("eval_norm")) c.eval_norm = parse_norm_kind(j.at("eval_norm").get<std::string>());
    if (j.contains("model")) {
      const auto& m = j.at("model");
      c.model = m.is_string() ? model_config_from_json(read_json_file(path(m.get<std::string>())))
                              : model_config_from_json(m);
    }
    if (j.contains("registry")) c.registry = path(j.at("registry").get<std::string>());
    if (j.contains("datasets")) c.datasets = dataset_specs_from_json(j.at("datasets"));
    if (j.contains("validation")) c.validation = dataset_specs_from_json(j.at("validation"));
    for (auto& d : c.datasets) d.annotations = path(d.annotations.string());
    for (auto& d : c.validation) d.annotations = path(d.annotations.string());
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed train config: ") + e.what());
  }
  c.validate();
  return c;
}

struct StepRecord {
  long step = 0;
  double coord_loss = 0.0;
  double index_loss = 0.0;
  double pa_loss = 0.0;
  double total = 0.0;
};

inline json step_to_json(const StepRecord& r) {
  return {{"step", r.step}, {"coord_loss", r.coord_loss}, {"index_loss", r.index_loss}, {"pa_loss", r.pa_loss}, {"total", r.total}};
}

struct BatchLoss {
  ag::Var total;
  ag::Var coord;
  ag::Var index;
  ag::Var pa;
  std::vector<Mat> gates;  // per scale, B x N
  std::vector<MatchResult> matches;
};

/// Forward pass and the weighted loss over a batch.
inline BatchLoss compute_batch_loss(const ProtoFormer& model, const std::vector<Sample>& batch, const UnifiedIndexMap& map,
                                    const TrainConfig& cfg) {
  std::vector<ag::Var> matched_pred, all_logits;
  std::vector<Mat> matched_target;
  std::vector<int> labels;
  std::vector<double> label_weights;
  std::vector<std::vector<ag::Var>> gate_rows(2);
  std::vector<int> dataset_ids;
  BatchLoss out;
  const int u = model.config().unified_size;
  for (const auto& s : batch) {
    const auto& scheme = map.scheme(s.annotation.scheme_name);
    auto r = model.forward(s.image);
    const auto& logits = r.prediction.index_logits;
    const auto& coords = r.prediction.coords;
    auto match = hungarian_match(logits.value(), coords.value(), scheme.unified_ids, s.annotation.coords, cfg.match_weights());
    std::vector<int> qs;
    Mat target(static_cast<Eigen::Index>(match.assignment.size()), 2);
    for (std::size_t k = 0; k < match.assignment.size(); ++k) {
      qs.push_back(match.assignment[k].first);
      target.row(static_cast<Eigen::Index>(k)) = s.annotation.coords.row(match.assignment[k].second);
    }
    if (!qs.empty()) {
      matched_pred.push_back(ag::gather_rows(coords, qs));
      matched_target.push_back(target);
    }
    for (int l : query_labels(match, scheme.unified_ids, static_cast<int>(logits.rows()), u)) {
      labels.push_back(l);
      label_weights.push_back(l == u ? cfg.no_landmark_weight : 1.0);
    }
    all_logits.push_back(logits);
    for (std::size_t g = 0; g < r.gates.size(); ++g) gate_rows[g].push_back(r.gates[g].distribution);
    dataset_ids.push_back(s.dataset);
    out.matches.push_back(std::move(match));
  }

  if (matched_pred.empty()) {
    out.coord = coord_loss(ag::constant(Mat(0, 2)), Mat(0, 2));
  } else {
    Eigen::Index rows = 0;
    for (const auto& t : matched_target) rows += t.rows();
    Mat target(rows, 2);
    Eigen::Index off = 0;
    for (const auto& t : matched_target) {
      target.middleRows(off, t.rows()) = t;
      off += t.rows();
    }
    out.coord = coord_loss(ag::concat_rows(matched_pred), target);
  }
  out.index = ag::cross_entropy(ag::concat_rows(all_logits), labels, label_weights);

  std::vector<ag::Var> pa_terms;
  for (auto& rows : gate_rows) {
    if (rows.empty()) continue;
    auto gates = ag::concat_rows(rows);
    out.gates.push_back(gates.value());
    pa_terms.push_back(pa_loss(gates, dataset_ids, cfg.pa_mode));
  }
  out.pa = pa_terms.empty() ? ag::scalar(0.0) : ag::add_n(pa_terms);
  out.total = total_loss(out.coord, out.index, out.pa, cfg.loss_weights);
  return out;
}

/// Owns the model, optimizer and sampler state of one training run.
class Trainer {
 public:
  Trainer(TrainConfig cfg, UnifiedIndexMap map, std::vector<Sample> train, std::vector<Sample> validation = {})
      : cfg_(std::move(cfg)),
        map_(std::move(map)),
        train_(std::move(train)),
        validation_(std::move(validation)),
        model_(cfg_.model, cfg_.seed),
        optimizer_(model_.parameters(), {cfg_.learning_rate, 0.9, 0.999, 1e-8, cfg_.weight_decay, cfg_.max_grad_norm}) {
    cfg_.validate();
    check_compatible(model_, map_);
    if (train_.empty()) throw ConfigError("training set is empty");
  }

  const ProtoFormer& model() const { return model_; }
  ProtoFormer& model() { return model_; }
  const TrainConfig& config() const { return cfg_; }
  long step_count() const { return step_; }

  long steps_per_epoch() const {
    return (static_cast<long>(train_.size()) + cfg_.batch_size - 1) / cfg_.batch_size;
  }
  long total_steps() const { return cfg_.max_steps > 0 ? cfg_.max_steps : cfg_.epochs * steps_per_epoch(); }

  /// Uniform over the concatenated pool: a fresh permutation per epoch, consumed in order.
  std::vector<Sample> next_batch() {
    std::vector<Sample> batch;
    for (int slot = 0; slot < cfg_.batch_size; ++slot) {
      if (cursor_ >= order_.size()) {
        order_.resize(train_.size());
        std::iota(order_.begin(), order_.end(), 0);
        std::seed_seq seq{static_cast<unsigned long long>(cfg_.seed), static_cast<unsigned long long>(epoch_++), 0xe90cULL};
        Rng rng(seq);
        std::shuffle(order_.begin(), order_.end(), rng);
        cursor_ = 0;
      }
      const auto& s = train_[order_[cursor_++]];
      std::seed_seq seq{static_cast<unsigned long long>(cfg_.seed), static_cast<unsigned long long>(step_),
                        static_cast<unsigned long long>(slot), 0xa06ULL};
      Rng aug_rng(seq);
      auto [img, ann] = augment(s.image, s.annotation, map_.scheme(s.annotation.scheme_name), cfg_.augmentation, aug_rng);
      batch.push_back({std::move(img), std::move(ann), s.dataset});
    }
    return batch;
  }

  StepRecord step(const std::filesystem::path& dump_dir = {}) {
    auto batch = next_batch();
    ++step_;
    optimizer_.zero_grad();
    auto dump_batch = [&](json dump) {
      json ids = json::array();
      for (const auto& s : batch) ids.push_back(s.annotation.image_id);
      dump["step"] = step_;
      dump["image_ids"] = ids;
      if (!dump_dir.empty()) write_text_file(dump_dir / "nonfinite_batch.json", dump.dump(2) + "\n");
      return dump;
    };
    BatchLoss loss;
    try {
      loss = compute_batch_loss(model_, batch, map_, cfg_);
    } catch (const NumericError& e) {
      dump_batch({{"error", e.what()}});
      throw;
    }
    StepRecord rec{step_, loss.coord.item(), loss.index.item(), loss.pa.item(), loss.total.item()};
    if (!std::isfinite(rec.total)) {
      const json dump = dump_batch(step_to_json(rec));
      throw NumericError("non-finite loss at step " + std::to_string(step_) + ": " + dump.dump());
    }
    ag::backward(loss.total);
    optimizer_.step();
    last_gates_ = std::move(loss.gates);
    return rec;
  }

  const std::vector<Mat>& last_gates() const { return last_gates_; }

  double validation_nme() const {
    return mean_nme(model_, validation_.empty() ? train_ : validation_, map_, cfg_.eval_norm);
  }

  struct Summary {
    long steps = 0;
    std::vector<StepRecord> log;
    std::optional<double> best_validation_nme;
    long best_step = 0;
  };

  /// Runs to total_steps(). With an output directory: metrics.jsonl, eval.jsonl,
  /// last.ckpt.json and best.ckpt.json (best validation NME).
  Summary run(const std::filesystem::path& out_dir = {}, const std::function<void(const StepRecord&)>& on_step = {}) {
    Summary summary;
    std::ofstream metrics, evals;
    if (!out_dir.empty()) {
      std::filesystem::create_directories(out_dir);
      metrics.open(out_dir / "metrics.jsonl", std::ios::binary);
      evals.open(out_dir / "eval.jsonl", std::ios::binary);
    }
    const long total = total_steps();
    auto maybe_eval = [&](bool force) {
      if (validation_.empty() || (!force && (cfg_.eval_every <= 0 || step_ % cfg_.eval_every != 0))) return;
      const double v = validation_nme();
      if (evals.is_open()) evals << json{{"step", step_}, {"val_nme", v}}.dump() << "\n" << std::flush;
      if (!summary.best_validation_nme || v < *summary.best_validation_nme) {
        summary.best_validation_nme = v;
        summary.best_step = step_;
        if (!out_dir.empty()) save_checkpoint(model_, out_dir / "best.ckpt.json", {{"step", step_}, {"val_nme", v}});
      }
    };
    while (step_ < total) {
      auto rec = step(out_dir);
      summary.log.push_back(rec);
      if (metrics.is_open()) metrics << step_to_json(rec).dump() << "\n" << std::flush;
      if (on_step) on_step(rec);
      if (step_ < total) maybe_eval(false);
    }
    maybe_eval(true);
    summary.steps = step_;
    if (!out_dir.empty()) save_checkpoint(model_, out_dir / "last.ckpt.json", {{"step", step_}});
    return summary;
  }

 private:
  TrainConfig cfg_;
  UnifiedIndexMap map_;
  std::vector<Sample> train_;
  std::vector<Sample> validation_;
  ProtoFormer model_;
  AdamW optimizer_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  unsigned long long epoch_ = 0;
  long step_ = 0;
  std::vector<Mat> last_gates_;
};

}  // namespace protoformer
