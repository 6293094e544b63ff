#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <numeric>
#include <set>

#include "test_support.hpp"

using namespace protoformer;
using namespace testing_support;

namespace {

TEST(ToUnified, RelabelsRowsWithSchemeIds) {
  UnifiedIndexMap map(10);
  map.add({"pair", {3, 7}, {1, 0}, std::nullopt, std::nullopt});
  Mat c(2, 2);
  c << 0.1, 0.2, 0.5, 0.5;
  const auto u = to_unified({"img", "pair", c}, map);
  ASSERT_EQ(u.size(), 2u);
  EXPECT_EQ(u[0], (UnifiedPoint{3, 0.1, 0.2}));
  EXPECT_EQ(u[1], (UnifiedPoint{7, 0.5, 0.5}));
}

TEST(ToUnified, UnknownSchemeIsConfigError) {
  const auto map = toy_registry();
  EXPECT_THROW(to_unified({"img", "nope", Mat::Zero(5, 2)}, map), ConfigError);
}

TEST(FromUnified, FollowsSchemeOrder) {
  LandmarkScheme s{"swap", {7, 3}, {1, 0}, std::nullopt, std::nullopt};
  const std::vector<UnifiedPoint> pred{{3, 0.1, 0.2}, {7, 0.5, 0.6}};
  const Mat m = from_unified(pred, s);
  EXPECT_EQ(m(0, 0), 0.5);
  EXPECT_EQ(m(0, 1), 0.6);
  EXPECT_EQ(m(1, 0), 0.1);
  EXPECT_EQ(m(1, 1), 0.2);
}

TEST(FromUnified, MissingIdNamesTheId) {
  LandmarkScheme s{"swap", {7, 3}, {1, 0}, std::nullopt, std::nullopt};
  const std::vector<UnifiedPoint> pred{{3, 0.1, 0.2}};
  try {
    from_unified(pred, s);
    FAIL() << "expected IncompletePredictionError";
  } catch (const IncompletePredictionError& e) {
    EXPECT_EQ(e.missing_id(), 7);
    EXPECT_NE(std::string(e.what()).find('7'), std::string::npos);
  }
}

TEST(FromUnified, SelectsSubsetOfFullPrediction) {
  const auto map = toy_registry();
  std::vector<UnifiedPoint> full;
  for (int id = 0; id < 9; ++id) full.push_back({id, 0.1 * id, 0.05 * id});
  const Mat five = from_unified(full, map.scheme("five"));
  ASSERT_EQ(five.rows(), 5);
  EXPECT_DOUBLE_EQ(five(4, 0), 0.8);  // unified id 8
  EXPECT_DOUBLE_EQ(five(2, 1), 0.1);  // unified id 2
}

TEST(UnifiedRoundTrip, IdentityForEveryScheme) {
  const auto map = toy_registry();
  Rng rng(3);
  for (const auto& name : map.names()) {
    const auto& s = map.scheme(name);
    GroundTruthAnnotation a{"img", name, random_mat(s.count(), 2, rng, 0, 1)};
    EXPECT_TRUE(from_unified(to_unified(a, map), s) == a.coords) << name;
  }
}

TEST(SchemeValidation, RejectsBrokenSchemes) {
  UnifiedIndexMap map(5);
  EXPECT_THROW(map.add({"dup", {1, 1}, {1, 0}, std::nullopt, std::nullopt}), ConfigError);
  EXPECT_THROW(map.add({"range", {1, 5}, {1, 0}, std::nullopt, std::nullopt}), ConfigError);
  EXPECT_THROW(map.add({"perm", {0, 1, 2}, {1, 2, 0}, std::nullopt, std::nullopt}), ConfigError);
  EXPECT_THROW(map.add({"len", {0, 1}, {0}, std::nullopt, std::nullopt}), ConfigError);
}

TEST(Hungarian, EmptyTargetsLeavesAllQueriesUnmatched) {
  Rng rng(1);
  const auto r = hungarian_match(random_mat(4, 10, rng), random_mat(4, 2, rng, 0, 1), {}, Mat(0, 2));
  EXPECT_TRUE(r.assignment.empty());
  EXPECT_EQ(r.unmatched_queries, (std::vector<int>{0, 1, 2, 3}));
}

TEST(Hungarian, DiagonalDominantGivesIdentity) {
  // Query q predicts class q with high confidence and sits on target q.
  Mat logits = Mat::Constant(3, 4, -5.0);
  Mat coords(3, 2);
  for (int q = 0; q < 3; ++q) {
    logits(q, q) = 5.0;
    coords.row(q) << 0.2 * (q + 1), 0.3;
  }
  const std::vector<int> ids{0, 1, 2};
  const auto r = hungarian_match(logits, coords, ids, coords);
  ASSERT_EQ(r.assignment.size(), 3u);
  for (int t = 0; t < 3; ++t) EXPECT_EQ(r.assignment[t], std::make_pair(t, t));
  EXPECT_TRUE(r.unmatched_queries.empty());
}

TEST(Hungarian, FiveByFiveMatchesAllPermutations) {
  Rng rng(5);
  const Mat logits = random_mat(5, 11, rng, -2, 2);
  const Mat pred = random_mat(5, 2, rng, 0, 1);
  const Mat target = random_mat(5, 2, rng, 0, 1);
  const std::vector<int> ids{4, 0, 9, 2, 7};
  const MatchCostWeights w{};
  const Mat cost = matching_cost(logits, pred, ids, target, w);
  // Oracle: scan all 120 permutations explicitly.
  std::vector<int> perm{0, 1, 2, 3, 4};
  double best = std::numeric_limits<double>::infinity();
  do {
    double c = 0.0;
    for (int t = 0; t < 5; ++t) c += cost(perm[t], t);
    best = std::min(best, c);
  } while (std::next_permutation(perm.begin(), perm.end()));
  EXPECT_EQ(hungarian_match(logits, pred, ids, target, w).total_cost, best);
}

TEST(Hungarian, CostMatrixFollowsDefinition) {
  Rng rng(6);
  const Mat logits = random_mat(3, 5, rng, -2, 2);
  const Mat pred = random_mat(3, 2, rng, 0, 1);
  const Mat target = random_mat(2, 2, rng, 0, 1);
  const std::vector<int> ids{1, 3};
  const Mat cost = matching_cost(logits, pred, ids, target, {5.0, 1.0});
  for (int q = 0; q < 3; ++q) {
    const Eigen::RowVectorXd e = logits.row(q).array().exp();
    for (int t = 0; t < 2; ++t) {
      const double p = e(ids[t]) / e.sum();
      const double l1 = std::abs(pred(q, 0) - target(t, 0)) + std::abs(pred(q, 1) - target(t, 1));
      EXPECT_NEAR(cost(q, t), -5.0 * p + l1, 1e-12);
    }
  }
}

TEST(Hungarian, RandomInstancesMatchBruteForceAndAreValid) {
  Rng rng(7);
  std::uniform_int_distribution<int> tdist(1, 7);
  for (int trial = 0; trial < 100; ++trial) {
    const int t = tdist(rng);
    const int n = t + std::uniform_int_distribution<int>(0, 3)(rng);
    const Mat logits = random_mat(n, 10, rng, -3, 3);
    const Mat pred = random_mat(n, 2, rng, 0, 1);
    const Mat target = random_mat(t, 2, rng, 0, 1);
    std::vector<int> ids(9);
    std::iota(ids.begin(), ids.end(), 0);
    std::shuffle(ids.begin(), ids.end(), rng);
    ids.resize(t);
    const auto r = hungarian_match(logits, pred, ids, target);
    EXPECT_EQ(r.total_cost, brute_force_assignment(matching_cost(logits, pred, ids, target, {})));
    std::set<int> qs, ts;
    for (auto [q, tt] : r.assignment) {
      EXPECT_TRUE(qs.insert(q).second);
      EXPECT_TRUE(ts.insert(tt).second);
    }
    EXPECT_EQ(static_cast<int>(ts.size()), t);
    EXPECT_EQ(static_cast<int>(r.unmatched_queries.size()), n - t);
    for (int q : r.unmatched_queries) EXPECT_EQ(qs.count(q), 0u);
  }
}

TEST(Hungarian, MoreTargetsThanQueriesIsCapacityError) {
  const std::vector<int> ids{0, 1, 2};
  EXPECT_THROW(hungarian_match(Mat::Zero(2, 4), Mat::Zero(2, 2), ids, Mat::Zero(3, 2)), CapacityError);
}

TEST(Hungarian, NonFiniteCostIsNumericError) {
  Mat pred = Mat::Zero(2, 2);
  pred(0, 0) = std::numeric_limits<double>::quiet_NaN();
  const std::vector<int> ids{0};
  EXPECT_THROW(hungarian_match(Mat::Zero(2, 3), pred, ids, Mat::Zero(1, 2)), NumericError);
}

TEST(SolveAssignment, RectangularRowsLeqCols) {
  Mat cost(2, 3);
  cost << 4, 1, 3, 2, 0, 5;
  const auto a = solve_assignment(cost);
  EXPECT_EQ(cost(0, a[0]) + cost(1, a[1]), brute_force_assignment(cost.transpose()));
}

TEST(Nme, ZeroForPerfectPrediction) {
  Mat gt(3, 2);
  gt << 0.1, 0.2, 0.3, 0.4, 0.5, 0.6;
  EXPECT_EQ(nme(gt, gt, 0.3), 0.0);
}

TEST(Nme, ThreeFourFive) {
  Mat pred(1, 2), gt = Mat::Zero(1, 2);
  pred << 0.3, 0.4;
  EXPECT_DOUBLE_EQ(nme(pred, gt, 1.0), 0.5);
}

TEST(Nme, TwoPointHandInstance) {
  Mat pred(2, 2), gt(2, 2);
  pred << 0.0, 0.0, 1.0, 1.0;
  gt << 0.6, 0.8, 1.0, 0.5;
  // distances 1.0 and 0.5, mean 0.75, normalized by 0.5
  EXPECT_DOUBLE_EQ(nme(pred, gt, 0.5), 1.5);
}

TEST(Nme, DegenerateNormalizerThrows) {
  EXPECT_THROW(nme(Mat::Zero(1, 2), Mat::Zero(1, 2), 0.0), DegenerateError);
  EXPECT_THROW(nme(Mat::Zero(1, 2), Mat::Zero(1, 2), -1.0), DegenerateError);
}

TEST(Nme, TranslationInvariantAndScaleCovariant) {
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const Mat pred = random_mat(6, 2, rng, 0, 1), gt = random_mat(6, 2, rng, 0, 1);
    const Eigen::RowVector2d shift = random_mat(1, 2, rng);
    const double s = std::uniform_real_distribution<double>(0.1, 5.0)(rng);
    const double base = nme(pred, gt, 1.0);
    EXPECT_NEAR(nme(pred.rowwise() + shift, gt.rowwise() + shift, 1.0), base, 1e-12);
    EXPECT_NEAR(nme(pred * s, gt * s, 1.0), s * base, 1e-12);
  }
}

TEST(Normalizer, HandComputedValues) {
  LandmarkScheme s{"s", {0, 1, 2, 3}, {1, 0, 3, 2}, std::make_pair(0, 1),
                   std::make_pair(std::vector<int>{0, 2}, std::vector<int>{1, 3})};
  Mat gt(4, 2);
  gt << 0.2, 0.4, 0.8, 0.4, 0.2, 0.6, 0.8, 0.6;
  EXPECT_NEAR(normalizer(gt, NormKind::InterOcular, s), 0.6, 1e-15);
  EXPECT_NEAR(normalizer(gt, NormKind::InterPupil, s), 0.6, 1e-15);
  EXPECT_NEAR(normalizer(gt, NormKind::Box, s), std::sqrt(0.6 * 0.2), 1e-15);
  LandmarkScheme bare{"b", {0}, {0}, std::nullopt, std::nullopt};
  EXPECT_THROW(normalizer(gt.topRows(1), NormKind::InterOcular, bare), ConfigError);
}

TEST(FailureRate, Examples) {
  const std::vector<double> low{0.01, 0.05, 0.099};
  EXPECT_EQ(failure_rate(low, 0.10), 0.0);
  const std::vector<double> half{0.05, 0.15};
  EXPECT_EQ(failure_rate(half, 0.10), 0.5);
  const std::vector<double> at{0.10};
  EXPECT_EQ(failure_rate(at, 0.10), 0.0);  // strictly greater
  EXPECT_THROW(failure_rate(std::vector<double>{}, 0.10), UndefinedStatisticError);
}

TEST(FailureRate, MonotoneNonIncreasingInThreshold) {
  Rng rng(11);
  std::vector<double> v(200);
  for (auto& x : v) x = std::uniform_real_distribution<double>(0.0, 0.3)(rng);
  double prev = 1.0;
  for (double th = 0.005; th < 0.35; th += 0.005) {
    const double fr = failure_rate(v, th);
    EXPECT_LE(fr, prev);
    prev = fr;
  }
}

TEST(Flip, SymmetricPairSwapsToSameSet) {
  LandmarkScheme s{"eyes", {0, 1}, {1, 0}, std::nullopt, std::nullopt};
  Mat c(2, 2);
  c << 0.4, 0.3, 0.6, 0.3;
  const auto f = flip_annotation({"i", "eyes", c}, s);
  EXPECT_NEAR(f.coords(0, 0), 0.4, 1e-15);
  EXPECT_NEAR(f.coords(1, 0), 0.6, 1e-15);
}

TEST(Flip, AsymmetricFivePointHandPermuted) {
  const auto map = toy_registry();
  const auto& s = map.scheme("five");  // flip_perm [1, 0, 3, 2, 4]
  Mat c(5, 2);
  c << 0.30, 0.40, 0.70, 0.41, 0.20, 0.70, 0.75, 0.72, 0.52, 0.60;
  Mat expected(5, 2);
  expected << 0.30, 0.41, 0.70, 0.40, 0.25, 0.72, 0.80, 0.70, 0.48, 0.60;
  const auto f = flip_annotation({"i", "five", c}, s);
  EXPECT_LT((f.coords - expected).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Flip, InvolutionForEveryScheme) {
  const auto map = toy_registry();
  Rng rng(12);
  for (const auto& name : map.names()) {
    const auto& s = map.scheme(name);
    GroundTruthAnnotation a{"i", name, random_mat(s.count(), 2, rng, 0, 1)};
    EXPECT_LT((flip_annotation(flip_annotation(a, s), s).coords - a.coords).cwiseAbs().maxCoeff(), 1e-15);
  }
}

TEST(Io, RegistryAndAnnotationsRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "pf_io_test";
  const auto map = toy_registry();
  save_registry(map, dir / "registry.json");
  const auto back = load_registry(dir / "registry.json");
  EXPECT_EQ(back.unified_size(), 9);
  EXPECT_EQ(back.scheme("seven").flip_perm, map.scheme("seven").flip_perm);
  EXPECT_EQ(back.scheme("five").inter_ocular, map.scheme("five").inter_ocular);

  Rng rng(13);
  std::vector<GroundTruthAnnotation> anns{{"a", "five", random_mat(5, 2, rng, 0, 1)}, {"b", "five", random_mat(5, 2, rng, 0, 1)}};
  save_annotations(anns, dir / "five.jsonl");
  const auto loaded = load_annotations(dir / "five.jsonl");
  ASSERT_EQ(loaded.size(), 2u);
  EXPECT_EQ(loaded[1].image_id, "b");
  EXPECT_TRUE(loaded[1].coords == anns[1].coords);
  std::filesystem::remove_all(dir);
}

TEST(Io, MalformedRegistryIsConfigError) {
  EXPECT_THROW(registry_from_json(json{{"unified_size", 4}}), ConfigError);
  EXPECT_THROW(load_registry("/nonexistent/registry.json"), ConfigError);
}

}  // namespace
