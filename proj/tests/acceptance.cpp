// Acceptance gate: one PASS/FAIL line per criterion.
// Usage: acceptance [key ...]   (no keys: run everything)

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "test_support.hpp"

using namespace protoformer;
using namespace testing_support;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances and budgets.
constexpr double kGateSumTol = 1e-6;
constexpr double kGradRelTol = 1e-4;
constexpr double kGradStep = 1e-5;
constexpr double kTieMargin = 1e-3;
constexpr double kMetricTol = 1e-12;
constexpr double kOverfitNme = 0.01;
constexpr int kOverfitSteps = 2000;
constexpr int kAblationSteps = 6000;
constexpr int kAblationTrain = 200;
constexpr int kAblationValidation = 40;

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  std::string key;
  std::string title;
  double budget_seconds;
  std::function<Outcome()> run;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

FeatureMap random_feature_map(int c, int h, Rng& rng, bool trainable = false) {
  Mat m = random_mat(c, h * h, rng);
  return {trainable ? ag::param(m) : ag::constant(m), c, h, h};
}

/// Independent TopK: sort (value desc, index asc) pairs.
std::vector<int> topk_oracle(const Eigen::RowVectorXd& g, int k) {
  std::vector<std::pair<double, int>> v;
  for (int i = 0; i < g.size(); ++i) v.emplace_back(-g(i), i);
  std::sort(v.begin(), v.end());
  std::vector<int> out;
  for (int i = 0; i < k; ++i) out.push_back(v[i].second);
  return out;
}

// ---------------------------------------------------------------------------

Outcome gating_contract() {
  struct Shape {
    int channels, n, k, heads, h;
  };
  const std::vector<Shape> configs{{8, 4, 2, 2, 4}, {16, 8, 3, 1, 4}, {12, 6, 6, 3, 2}, {8, 5, 1, 2, 3}, {16, 16, 8, 4, 2}};
  Rng rng(101);
  int inputs = 0, ties_seen = 0;
  double worst_sum = 0.0;
  for (const auto& s : configs) {
    Router router(s.channels, s.n, s.k, s.heads, rng);
    for (int i = 0; i < 200; ++i, ++inputs) {
      GatingDecision g;
      if (i % 2 == 0) {
        g = route(random_feature_map(s.channels, s.h, rng), router);
      } else {
        // Quantized logits force exact ties among the gate values.
        Mat logits(1, s.n);
        for (int e = 0; e < s.n; ++e) logits(0, e) = std::uniform_int_distribution<int>(0, 2)(rng);
        g = gate_from_logits(ag::constant(logits), s.k);
      }
      const Eigen::RowVectorXd dist = g.distribution.value().row(0);
      worst_sum = std::max(worst_sum, std::abs(dist.sum() - 1.0));
      if (worst_sum > kGateSumTol) return {false, fmt("sum deviates by %.3g", worst_sum)};
      if (g.selected != topk_oracle(dist, s.k)) return {false, fmt("TopK mismatch at input %d", inputs)};
      if (g.scores.size() != g.selected.size()) return {false, "score count differs from K"};
      for (std::size_t j = 0; j < g.selected.size(); ++j) {
        if (g.scores[j] != dist(g.selected[j])) return {false, "selected scores are not G at the selected indices"};
      }
      std::set<double> distinct(dist.data(), dist.data() + dist.size());
      if (static_cast<int>(distinct.size()) < s.n) ++ties_seen;
    }
  }
  return {true, fmt("%d inputs, max |sum-1| %.2g, %d inputs with ties", inputs, worst_sum, ties_seen)};
}

Outcome hungarian_oracle() {
  Rng rng(202);
  std::uniform_int_distribution<int> tdist(0, 7);
  for (int trial = 0; trial < 200; ++trial) {
    const int t = tdist(rng);
    const int n = std::max(t, 1) + std::uniform_int_distribution<int>(0, 8 - std::max(t, 1))(rng);
    const int u = 9;
    const Mat logits = random_mat(n, u + 1, rng, -3, 3);
    const Mat coords = random_mat(n, 2, rng, 0, 1);
    std::vector<int> ids(u);
    std::iota(ids.begin(), ids.end(), 0);
    std::shuffle(ids.begin(), ids.end(), rng);
    ids.resize(t);
    const Mat targets = random_mat(t, 2, rng, 0, 1);
    const auto m = hungarian_match(logits, coords, ids, targets);
    if (static_cast<int>(m.assignment.size()) != t) return {false, fmt("instance %d: %zu assignments for %d targets", trial, m.assignment.size(), t)};
    if (t == 0) continue;
    // Cost rebuilt here from the definition.
    Mat cost(n, t);
    for (int q = 0; q < n; ++q) {
      double z = 0.0;
      for (int c = 0; c <= u; ++c) z += std::exp(logits(q, c));
      for (int j = 0; j < t; ++j) {
        cost(q, j) = -5.0 * std::exp(logits(q, ids[j])) / z +
                     std::abs(coords(q, 0) - targets(j, 0)) + std::abs(coords(q, 1) - targets(j, 1));
      }
    }
    const Mat used = matching_cost(logits, coords, ids, targets, {});
    double recomputed = 0.0;
    for (const auto& [q, j] : m.assignment) recomputed += used(q, j);
    const double best = brute_force_assignment(used);
    if (recomputed != best || m.total_cost != best) {
      return {false, fmt("instance %d: assignment cost %.17g, exhaustive %.17g", trial, recomputed, best)};
    }
    if ((cost - used).cwiseAbs().maxCoeff() > 1e-12) return {false, "matching cost disagrees with its definition"};
  }
  return {true, "200 instances equal the exhaustive minimum"};
}

struct GradStats {
  double worst = 0.0;
  int points = 0;
};

Outcome report_grad(const std::string& what, const GradStats& s) {
  return {s.worst <= kGradRelTol, fmt("%s: worst relative error %.2e over %d points", what.c_str(), s.worst, s.points)};
}

Outcome gradient_suite() {
  Rng rng(303);
  std::vector<std::string> details;
  bool pass = true;
  auto record = [&](const std::string& what, const GradStats& s) {
    auto o = report_grad(what, s);
    pass = pass && o.pass;
    details.push_back(o.detail);
  };

  {  // pa_loss
    GradStats s;
    while (s.points < 20) {
      const int b = std::uniform_int_distribution<int>(2, 6)(rng);
      Mat g = random_mat(b, 5, rng, 0.05, 1.0);
      for (int i = 0; i < b; ++i) g.row(i) /= g.row(i).sum();
      std::vector<int> ids(b);
      for (auto& i : ids) i = std::uniform_int_distribution<int>(0, 1)(rng);
      auto gates = ag::param(g);
      const auto mode = s.points % 2 ? PaMode::AllPairs : PaMode::SameDataset;
      s.worst = std::max(s.worst, grad_check([&] { return pa_loss(gates, ids, mode); }, {gates}, kGradStep).relative_error);
      ++s.points;
    }
    record("pa_loss", s);
  }
  {  // fuse, with the prompt it consumes
    GradStats s;
    while (s.points < 20) {
      const int d = 8, c = 6, h = 3, nq = 4;
      PromptGenerator gen(c, d, s.points % 2 ? SimilarityKind::Cosine : SimilarityKind::Dot, rng);
      FusionBlock block(d, rng);
      block.alpha.mutable_value() = random_mat(1, d, rng, 0.5, 1.5);
      auto p1 = random_feature_map(c, h, rng, true);
      auto q = ag::param(random_mat(nq, d, rng));
      const auto probe = gen(p1, q);
      bool tied = false;
      for (int r = 0; r < nq; ++r) {
        Eigen::RowVectorXd row = probe.similarity.row(r);
        const int best = probe.indices[r];
        row(best) = -std::numeric_limits<double>::infinity();
        if (probe.similarity(r, best) - row.maxCoeff() < kTieMargin) tied = true;
      }
      if (tied) continue;
      const Mat w = random_mat(nq, d, rng);
      auto f = [&] { return project(fuse(q, gen(p1, q), block), w); };
      std::vector<ag::Var> leaves{q, p1.data, block.w1.weight, block.w2.weight, block.alpha,
                                  gen.project_prototype.weight, gen.project_queries.weight};
      s.worst = std::max(s.worst, grad_check(f, leaves, kGradStep).relative_error);
      ++s.points;
    }
    record("fuse", s);
  }
  {  // decode_layer
    GradStats s;
    while (s.points < 20) {
      const int d = 8, nq = 5, l = 7;
      DecoderLayer layer(d, 2, 12, rng);
      auto prev = ag::param(random_mat(nq, d, rng));
      auto refined = ag::param(random_mat(nq, d, rng));
      auto q0 = ag::param(random_mat(nq, d, rng));
      auto memory = ag::param(random_mat(l, d, rng));
      const Mat w = random_mat(nq, d, rng);
      auto f = [&] { return project(decode_layer(prev, refined, q0, memory, layer), w); };
      std::vector<ag::Var> leaves{prev, refined, q0, memory, layer.query_attention.q_proj.weight,
                                  layer.memory_attention.v_proj.weight, layer.norm1.gamma, layer.ffn.fc1.weight};
      s.worst = std::max(s.worst, grad_check(f, leaves, kGradStep).relative_error);
      ++s.points;
    }
    record("decode_layer", s);
  }
  {  // extract_prototype through the soft gate values, selection held fixed
    GradStats s;
    while (s.points < 20) {
      const int c = 6, h = 3, n = 4, k = 2;
      std::vector<PrototypeExpert> experts;
      for (int i = 0; i < n; ++i) {
        experts.emplace_back(c, 2, rng);
        experts.back().bias.mutable_value() = random_mat(c, 1, rng, -0.5, 0.5);
      }
      auto x = random_feature_map(c, h, rng, true);
      auto logits = ag::param(random_mat(1, n, rng, -2, 2));
      const auto probe = gate_from_logits(logits, k);
      const Eigen::RowVectorXd dist = probe.distribution.value().row(0);
      std::vector<double> sorted(dist.data(), dist.data() + n);
      std::sort(sorted.rbegin(), sorted.rend());
      if (sorted[k - 1] - sorted[k] < kTieMargin) continue;
      const Mat w = random_mat(c, h * h, rng);
      auto f = [&] { return project(extract_prototype(x, experts, gate_from_logits(logits, k)).data, w); };
      std::vector<ag::Var> leaves{x.data, logits};
      for (int i : probe.selected) {
        leaves.push_back(experts[i].conv_a.weight);
        leaves.push_back(experts[i].conv_b.weight);
        leaves.push_back(experts[i].bias);
      }
      s.worst = std::max(s.worst, grad_check(f, leaves, kGradStep).relative_error);
      ++s.points;
    }
    record("extract_prototype", s);
  }
  std::string joined;
  for (const auto& d : details) joined += (joined.empty() ? "" : "; ") + d;
  return {pass, joined};
}

Outcome pa_closed_forms() {
  Rng rng(404);
  for (int trial = 0; trial < 50; ++trial) {
    const int b = std::uniform_int_distribution<int>(2, 9)(rng);
    const int n = std::uniform_int_distribution<int>(2, 16)(rng);
    Eigen::RowVectorXd row = random_mat(1, n, rng, 0.0, 1.0);
    row /= row.sum();
    const Mat g = row.replicate(b, 1);
    std::vector<int> ids(b);
    for (auto& i : ids) i = std::uniform_int_distribution<int>(0, 2)(rng);
    if (pa_loss_value(g, ids, PaMode::AllPairs) != 0.0 || pa_loss_value(g, ids, PaMode::SameDataset) != 0.0) {
      return {false, fmt("identical rows (B=%d, N=%d) did not give exactly 0", b, n)};
    }
  }
  for (int n = 2; n <= 16; ++n) {
    for (int b = 2; b <= n; ++b) {
      Mat g = Mat::Zero(b, n);
      std::vector<int> cols(n);
      std::iota(cols.begin(), cols.end(), 0);
      std::shuffle(cols.begin(), cols.end(), rng);
      for (int i = 0; i < b; ++i) g(i, cols[i]) = 1.0;
      std::vector<int> ids(b);
      std::iota(ids.begin(), ids.end(), 0);
      if (pa_loss_value(g, ids, PaMode::AllPairs) != b * (b - 1) / 2.0) {
        return {false, fmt("one-hot rows B=%d, N=%d did not give B(B-1)/2", b, n)};
      }
    }
  }
  for (int trial = 0; trial < 100; ++trial) {
    const int b = std::uniform_int_distribution<int>(2, 12)(rng);
    Mat g = random_mat(b, 8, rng, 0.0, 1.0);
    for (int i = 0; i < b; ++i) g.row(i) /= g.row(i).sum();
    std::vector<int> ids(b);
    for (auto& i : ids) i = std::uniform_int_distribution<int>(0, 3)(rng);
    if (pa_loss_value(g, ids, PaMode::SameDataset) > pa_loss_value(g, ids, PaMode::AllPairs)) {
      return {false, fmt("batch %d: same_dataset exceeds all_pairs", trial)};
    }
  }
  return {true, "identical rows exact 0; one-hot rows exact B(B-1)/2; same_dataset <= all_pairs on 100 batches"};
}

Outcome full_size_shapes() {
  ModelConfig cfg = full_model_config();
  const auto plan = plan_shapes(cfg);
  if (plan.token_length != 1280 || plan.query_count != 124 || plan.index_classes != 125) {
    return {false, fmt("plan: l=%d, logits %dx%d", plan.token_length, plan.query_count, plan.index_classes)};
  }
  // A real forward at full resolution and widths.
  ProtoFormer model(cfg, 5);
  ag::NoGradGuard guard;
  Rng rng(505);
  std::vector<double> gray(512 * 512);
  for (auto& v : gray) v = std::uniform_real_distribution<double>(0, 1)(rng);
  const auto r = model.forward(Image::from_gray(512, gray));
  const bool ok = r.features.x1.channels == 1024 && r.features.x1.height == 32 && r.features.x1.width == 32 &&
                  r.features.x2.channels == 2048 && r.features.x2.height == 16 && r.features.x2.width == 16 &&
                  r.tokens.rows() == 1280 && r.tokens.cols() == 256 && r.prediction.index_logits.rows() == 124 &&
                  r.prediction.index_logits.cols() == 125 && r.prediction.coords.rows() == 124 &&
                  r.prediction.coords.cols() == 2;
  return {ok, fmt("x1 %dx%dx%d, x2 %dx%dx%d, tokens %ldx%ld, index logits %ldx%ld", r.features.x1.channels,
                  r.features.x1.height, r.features.x1.width, r.features.x2.channels, r.features.x2.height,
                  r.features.x2.width, static_cast<long>(r.tokens.rows()), static_cast<long>(r.tokens.cols()),
                  static_cast<long>(r.prediction.index_logits.rows()),
                  static_cast<long>(r.prediction.index_logits.cols()))};
}

Outcome tiny_overfit() {
  const auto map = toy_registry();
  const std::vector<std::string> schemes{"five", "seven"};
  const auto samples = samples_from_synth(synth_dataset(8, schemes, map, 0.0, 1, 64), schemes);
  TrainConfig cfg;
  cfg.model = tiny_model_config();
  cfg.batch_size = 8;
  cfg.learning_rate = 1e-3;
  cfg.max_steps = kOverfitSteps;
  cfg.augmentation = {0.0, 0.0};
  Trainer trainer(cfg, map, samples);
  trainer.run();
  double nme_sum = 0.0;
  int correct = 0, matched = 0;
  ag::NoGradGuard guard;
  for (const auto& s : samples) {
    const auto& scheme = map.scheme(s.annotation.scheme_name);
    const auto r = trainer.model().forward(s.image);
    const Mat& logits = r.prediction.index_logits.value();
    nme_sum += nme(select_landmarks(logits, r.prediction.coords.value(), scheme), s.annotation.coords, 1.0);
    const auto m = hungarian_match(logits, r.prediction.coords.value(), scheme.unified_ids, s.annotation.coords, cfg.match_weights());
    for (const auto& [q, t] : m.assignment) {
      Eigen::Index best;
      logits.row(q).maxCoeff(&best);
      correct += best == scheme.unified_ids[t];
      ++matched;
    }
  }
  const double mean = nme_sum / static_cast<double>(samples.size());
  const double acc = static_cast<double>(correct) / matched;
  return {mean < kOverfitNme && correct == matched, fmt("mean NME %.5f (< %.2f), index accuracy %.1f%% (%d/%d)", mean, kOverfitNme, 100.0 * acc, correct, matched)};
}

Outcome ablation_direction() {
  const auto map = toy_registry();
  const std::vector<std::string> schemes{"five", "seven"};
  const auto train = samples_from_synth(synth_dataset(kAblationTrain, schemes, map, 0.01, 2024, 64, "train_"), schemes);
  const auto validation = samples_from_synth(synth_dataset(kAblationValidation, schemes, map, 0.01, 2025, 64, "val_"), schemes);
  auto run = [&](bool full, unsigned long long seed) {
    TrainConfig cfg;
    cfg.model = tiny_model_config();
    cfg.model.use_ape = full;
    cfg.model.use_prompt = full;
    cfg.loss_weights.pa = full ? 0.01 : 0.0;
    cfg.batch_size = 8;
    cfg.learning_rate = 1e-3;
    cfg.max_steps = kAblationSteps;
    cfg.augmentation = {0.0, 0.5};
    cfg.seed = seed;
    cfg.eval_norm = NormKind::InterOcular;
    Trainer trainer(cfg, map, train, validation);
    trainer.run();
    return trainer.validation_nme();
  };
  int wins = 0;
  std::string detail;
  for (unsigned long long seed : {0ULL, 1ULL, 2ULL}) {
    const double base = run(false, seed), full = run(true, seed);
    wins += full <= base;
    detail += fmt("seed %llu: full %.4f vs trans %.4f; ", seed, full, base);
  }
  detail += fmt("full <= trans in %d/3", wins);
  return {wins >= 2, detail};
}

Outcome metric_oracles() {
  Rng rng(808);
  std::vector<double> values;
  for (int i = 0; i < 500; ++i) {
    const int n = std::uniform_int_distribution<int>(4, 12)(rng);
    const Mat gt = random_mat(n, 2, rng, 0, 1);
    const Mat pred = gt + random_mat(n, 2, rng, -0.1, 0.1);
    LandmarkScheme s{"s", {}, {}, std::make_pair(0, n - 1), std::make_pair(std::vector<int>{0, 1}, std::vector<int>{n - 2, n - 1})};
    for (int k = 0; k < n; ++k) {
      s.unified_ids.push_back(k);
      s.flip_perm.push_back(k);
    }
    // Normalizers and error written out from their definitions.
    const double io = std::hypot(gt(0, 0) - gt(n - 1, 0), gt(0, 1) - gt(n - 1, 1));
    const double ip = std::hypot((gt(0, 0) + gt(1, 0)) / 2 - (gt(n - 2, 0) + gt(n - 1, 0)) / 2,
                                 (gt(0, 1) + gt(1, 1)) / 2 - (gt(n - 2, 1) + gt(n - 1, 1)) / 2);
    const double box = std::sqrt((gt.col(0).maxCoeff() - gt.col(0).minCoeff()) * (gt.col(1).maxCoeff() - gt.col(1).minCoeff()));
    double err = 0.0;
    for (int k = 0; k < n; ++k) err += std::hypot(pred(k, 0) - gt(k, 0), pred(k, 1) - gt(k, 1));
    err /= n;
    const std::vector<std::pair<NormKind, double>> norms{
        {NormKind::InterOcular, io}, {NormKind::InterPupil, ip}, {NormKind::Box, box}, {NormKind::Unit, 1.0}};
    for (const auto& [kind, d] : norms) {
      const double got = nme(pred, gt, normalizer(gt, kind, s));
      if (std::abs(got - err / d) > kMetricTol) return {false, fmt("pair %d: nme %.17g vs %.17g", i, got, err / d)};
    }
    values.push_back(err / io);
  }
  for (double threshold : {0.02, 0.05, 0.10, 0.2}) {
    int above = 0;
    for (double v : values) above += v > threshold ? 1 : 0;
    const double expect = above / 500.0;
    if (std::abs(failure_rate(values, threshold) - expect) > kMetricTol) return {false, fmt("failure rate at %.2f", threshold)};
  }
  return {true, "500 pairs, four normalizers and four thresholds within 1e-12"};
}

Outcome determinism() {
  const auto map = toy_registry();
  const std::vector<std::string> schemes{"five", "seven"};
  const auto samples = samples_from_synth(synth_dataset(24, schemes, map, 0.01, 9, 64), schemes);
  TrainConfig cfg;
  cfg.model = tiny_model_config();
  cfg.batch_size = 8;
  cfg.learning_rate = 1e-3;
  cfg.max_steps = 60;
  cfg.augmentation = {30.0, 0.5};
  cfg.seed = 17;
  const auto root = fs::temp_directory_path() / "pf_acceptance_determinism";
  fs::remove_all(root);
  auto run = [&](const std::string& name) {
    Trainer trainer(cfg, map, samples);
    trainer.run(root / name);
    std::ifstream in(root / name / "metrics.jsonl", std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
  };
  const auto a = run("a"), b = run("b");
  fs::remove_all(root);
  const auto lines = std::count(a.begin(), a.end(), '\n');
  return {!a.empty() && a == b, fmt("%ld logged steps, logs %s", static_cast<long>(lines), a == b ? "identical" : "differ")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria{
      {"gating", "Gating contract", 60, gating_contract},
      {"hungarian", "Hungarian oracle equivalence", 60, hungarian_oracle},
      {"gradients", "Gradient suite", 300, gradient_suite},
      {"pa", "PA-loss closed forms", 60, pa_closed_forms},
      {"shapes", "Shape fidelity at full-size dims", 600, full_size_shapes},
      {"overfit", "Tiny overfit", 900, tiny_overfit},
      {"ablation", "Ablation direction check", 3600, ablation_direction},
      {"metrics", "Metric oracles", 60, metric_oracles},
      {"determinism", "Determinism", 300, determinism},
  };
  std::set<std::string> wanted(argv + 1, argv + argc);
  int failures = 0;
  for (const auto& c : criteria) {
    if (!wanted.empty() && !wanted.count(c.key)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (secs > c.budget_seconds) {
      o.pass = false;
      o.detail += fmt("; over the %.0f s budget", c.budget_seconds);
    }
    failures += o.pass ? 0 : 1;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << c.title << " - " << o.detail << fmt(" [%.1f s]", secs) << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
