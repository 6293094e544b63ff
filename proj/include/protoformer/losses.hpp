#pragma once

#include <iostream>
#include <span>
#include <string>
#include <vector>

#include "protoformer/autograd.hpp"
#include "protoformer/error.hpp"
#include "protoformer/unified_landmarks.hpp"

namespace protoformer {

struct LossWeights {
  double coord = 1.0;
  double index = 5.0;
  double pa = 0.01;
};

/// all_pairs sums every i < j pair; same_dataset keeps pairs with equal dataset labels.
enum class PaMode { AllPairs, SameDataset };

inline PaMode parse_pa_mode(const std::string& s) {
  if (s == "all_pairs") return PaMode::AllPairs;
  if (s == "same_dataset") return PaMode::SameDataset;
  throw ConfigError("pa_mode must be all_pairs or same_dataset");
}

inline double gating_similarity(const Eigen::Ref<const Eigen::RowVectorXd>& a, const Eigen::Ref<const Eigen::RowVectorXd>& b) {
  if (a.size() != b.size()) throw ShapeError("gating_similarity: length mismatch");
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) throw DegenerateError("gating_similarity: zero gating vector");
  return a.dot(b) / (na * nb);
}

/// Sum over selected pairs i < j of (1 - cos(s_i, s_j)); zero for fewer than two rows.
/// Each term is evaluated as |u_i - u_j|^2 / 2 on the unit rows u, which equals
/// 1 - cos exactly in real arithmetic and is exactly zero for identical rows.
inline ag::Var pa_loss(const ag::Var& gates, std::span<const int> dataset_ids, PaMode mode) {
  const Eigen::Index b = gates.rows();
  if (static_cast<Eigen::Index>(dataset_ids.size()) != b) throw ShapeError("pa_loss: one dataset label per row required");
  if (b < 2) return ag::scalar(0.0);
  for (Eigen::Index i = 0; i < b; ++i) {
    if (gates.value().row(i).norm() == 0.0) throw DegenerateError("pa_loss: zero gating vector in row " + std::to_string(i));
  }
  std::vector<int> first, second;
  for (Eigen::Index i = 0; i < b; ++i) {
    for (Eigen::Index j = i + 1; j < b; ++j) {
      if (mode == PaMode::AllPairs || dataset_ids[i] == dataset_ids[j]) {
        first.push_back(static_cast<int>(i));
        second.push_back(static_cast<int>(j));
      }
    }
  }
  if (first.empty()) return ag::scalar(0.0);
  auto unit = ag::row_l2_normalize(gates, 0.0);
  auto diff = ag::sub(ag::gather_rows(unit, first), ag::gather_rows(unit, second));
  return ag::scale(ag::sum_all(ag::mul(diff, diff)), 0.5);
}

inline double pa_loss_value(const Mat& gates, std::span<const int> dataset_ids, PaMode mode) {
  ag::NoGradGuard guard;
  return pa_loss(ag::constant(gates), dataset_ids, mode).item();
}

/// Mean absolute error over matched rows and both coordinates.
inline ag::Var coord_loss(const ag::Var& pred, const Mat& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) throw ShapeError("coord_loss: shape mismatch");
  if (pred.rows() == 0) {
    std::clog << "warning: coord_loss over an empty match set, returning 0\n";
    return ag::scalar(0.0);
  }
  return ag::mean_all(ag::abs(ag::add_const(pred, -target)));
}

/// Class label per query: the matched target's unified id, or `unified_size` for "no landmark".
inline std::vector<int> query_labels(const MatchResult& match, std::span<const int> target_ids, int query_count,
                                     int unified_size) {
  std::vector<int> labels(query_count, unified_size);
  for (auto [q, t] : match.assignment) labels[q] = target_ids[t];
  return labels;
}

/// Mean cross-entropy over all queries; `no_landmark_weight` scales the "no landmark" rows.
inline ag::Var index_loss(const ag::Var& logits, const MatchResult& match, std::span<const int> target_ids,
                          double no_landmark_weight = 1.0) {
  const int n = static_cast<int>(logits.rows());
  const int u = static_cast<int>(logits.cols()) - 1;
  const auto labels = query_labels(match, target_ids, n, u);
  std::vector<double> weights(n, 1.0);
  for (int i = 0; i < n; ++i) {
    if (labels[i] == u) weights[i] = no_landmark_weight;
  }
  return ag::cross_entropy(logits, labels, weights);
}

inline double total_loss(double coord, double index, double pa, const LossWeights& w) {
  return w.coord * coord + w.index * index + w.pa * pa;
}

inline ag::Var total_loss(const ag::Var& coord, const ag::Var& index, const ag::Var& pa, const LossWeights& w) {
  std::vector<ag::Var> terms{ag::scale(coord, w.coord), ag::scale(index, w.index), ag::scale(pa, w.pa)};
  return ag::add_n(terms);
}

}  // namespace protoformer
