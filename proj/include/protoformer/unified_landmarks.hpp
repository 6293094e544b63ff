#pragma once

// Landmark schemes, the unified landmark index, set matching between
// query predictions and ground truth, and evaluation metrics.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "protoformer/autograd.hpp"
#include "protoformer/error.hpp"
#include "protoformer/hungarian.hpp"

namespace protoformer {

using json = nlohmann::json;

/// A per-dataset annotation convention.
struct LandmarkScheme {
  std::string name;
  std::vector<int> unified_ids;
  std::vector<int> flip_perm;
  // Optional rows used for NME normalization.
  std::optional<std::pair<int, int>> inter_ocular;
  std::optional<std::pair<std::vector<int>, std::vector<int>>> inter_pupil;

  int count() const { return static_cast<int>(unified_ids.size()); }

  /// Throws ConfigError when the scheme breaks its invariants for index size `unified_size`.
  void validate(int unified_size) const {
    const int n = count();
    if (n <= 0) throw ConfigError("scheme '" + name + "': empty landmark list");
    if (static_cast<int>(flip_perm.size()) != n) {
      throw ConfigError("scheme '" + name + "': flip_perm length differs from landmark count");
    }
    std::set<int> seen;
    for (int id : unified_ids) {
      if (id < 0 || id >= unified_size) {
        throw ConfigError("scheme '" + name + "': unified id " + std::to_string(id) + " outside [0, " +
                          std::to_string(unified_size) + ")");
      }
      if (!seen.insert(id).second) throw ConfigError("scheme '" + name + "': duplicate unified id " + std::to_string(id));
    }
    for (int i = 0; i < n; ++i) {
      const int j = flip_perm[i];
      if (j < 0 || j >= n || flip_perm[j] != i) throw ConfigError("scheme '" + name + "': flip_perm is not an involution");
    }
    auto check_row = [&](int r) {
      if (r < 0 || r >= n) throw ConfigError("scheme '" + name + "': normalizer row out of range");
    };
    if (inter_ocular) {
      check_row(inter_ocular->first);
      check_row(inter_ocular->second);
    }
    if (inter_pupil) {
      if (inter_pupil->first.empty() || inter_pupil->second.empty()) {
        throw ConfigError("scheme '" + name + "': empty pupil group");
      }
      for (int r : inter_pupil->first) check_row(r);
      for (int r : inter_pupil->second) check_row(r);
    }
  }
};

/// The unified index and the schemes registered against it.
class UnifiedIndexMap {
 public:
  UnifiedIndexMap() = default;
  explicit UnifiedIndexMap(int unified_size) : unified_size_(unified_size) {
    if (unified_size <= 0) throw ConfigError("unified_size must be positive");
  }

  int unified_size() const { return unified_size_; }

  void add(LandmarkScheme scheme) {
    scheme.validate(unified_size_);
    if (schemes_.count(scheme.name)) throw ConfigError("scheme '" + scheme.name + "' registered twice");
    schemes_.emplace(scheme.name, std::move(scheme));
  }

  bool contains(const std::string& name) const { return schemes_.count(name) != 0; }

  const LandmarkScheme& scheme(const std::string& name) const {
    auto it = schemes_.find(name);
    if (it == schemes_.end()) throw ConfigError("unknown landmark scheme '" + name + "'");
    return it->second;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [k, _] : schemes_) out.push_back(k);
    return out;
  }

  /// Union of all registered unified ids.
  std::set<int> covered_ids() const {
    std::set<int> ids;
    for (const auto& [_, s] : schemes_) ids.insert(s.unified_ids.begin(), s.unified_ids.end());
    return ids;
  }

 private:
  int unified_size_ = 124;
  std::map<std::string, LandmarkScheme> schemes_;
};

struct GroundTruthAnnotation {
  std::string image_id;
  std::string scheme_name;
  Mat coords;  // count x 2, normalized to [0, 1]
};

struct UnifiedPoint {
  int id = 0;
  double x = 0.0;
  double y = 0.0;
  bool operator==(const UnifiedPoint&) const = default;
};

inline std::vector<UnifiedPoint> to_unified(const GroundTruthAnnotation& ann, const UnifiedIndexMap& map) {
  const auto& scheme = map.scheme(ann.scheme_name);
  if (ann.coords.rows() != scheme.count() || ann.coords.cols() != 2) {
    throw ShapeError("annotation '" + ann.image_id + "' has " + std::to_string(ann.coords.rows()) +
                     " rows, scheme expects " + std::to_string(scheme.count()));
  }
  if (!ann.coords.allFinite()) throw NumericError("annotation '" + ann.image_id + "' has non-finite coordinates");
  std::vector<UnifiedPoint> out;
  out.reserve(scheme.unified_ids.size());
  for (int i = 0; i < scheme.count(); ++i) out.push_back({scheme.unified_ids[i], ann.coords(i, 0), ann.coords(i, 1)});
  return out;
}

inline Mat from_unified(std::span<const UnifiedPoint> pred, const LandmarkScheme& scheme) {
  std::map<int, std::pair<double, double>> by_id;
  for (const auto& p : pred) by_id.emplace(p.id, std::make_pair(p.x, p.y));
  Mat out(scheme.count(), 2);
  for (int i = 0; i < scheme.count(); ++i) {
    auto it = by_id.find(scheme.unified_ids[i]);
    if (it == by_id.end()) throw IncompletePredictionError(scheme.unified_ids[i]);
    out(i, 0) = it->second.first;
    out(i, 1) = it->second.second;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Set matching

struct MatchResult {
  std::vector<std::pair<int, int>> assignment;  // (query, target), sorted by target
  std::vector<int> unmatched_queries;            // ascending
  double total_cost = 0.0;
};

struct MatchCostWeights {
  double cls = 5.0;
  double coord = 1.0;
};

/// cost(q, t) = -w_cls * softmax(logits[q])[id_t] + w_coord * |pred_q - target_t|_1
inline Mat matching_cost(const Mat& class_logits, const Mat& pred_coords, std::span<const int> target_ids,
                         const Mat& target_coords, MatchCostWeights w) {
  const Eigen::Index n = class_logits.rows();
  const Eigen::Index t = static_cast<Eigen::Index>(target_ids.size());
  if (pred_coords.rows() != n || pred_coords.cols() != 2) throw ShapeError("matching: prediction shape mismatch");
  if (target_coords.rows() != t || (t > 0 && target_coords.cols() != 2)) {
    throw ShapeError("matching: target shape mismatch");
  }
  const Mat prob = ag::softmax_rows_value(class_logits);
  Mat cost(n, t);
  for (Eigen::Index j = 0; j < t; ++j) {
    const int id = target_ids[j];
    if (id < 0 || id >= class_logits.cols() - 1) throw ShapeError("matching: target id outside the class range");
    for (Eigen::Index q = 0; q < n; ++q) {
      const double l1 = std::abs(pred_coords(q, 0) - target_coords(j, 0)) + std::abs(pred_coords(q, 1) - target_coords(j, 1));
      cost(q, j) = -w.cls * prob(q, id) + w.coord * l1;
    }
  }
  return cost;
}

inline MatchResult hungarian_match(const Mat& class_logits, const Mat& pred_coords, std::span<const int> target_ids,
                                   const Mat& target_coords, MatchCostWeights w = {}) {
  const int n = static_cast<int>(class_logits.rows());
  const int t = static_cast<int>(target_ids.size());
  if (t > n) {
    throw CapacityError("matching: " + std::to_string(t) + " targets exceed " + std::to_string(n) + " queries");
  }
  MatchResult result;
  if (t == 0) {
    for (int q = 0; q < n; ++q) result.unmatched_queries.push_back(q);
    return result;
  }
  const Mat cost = matching_cost(class_logits, pred_coords, target_ids, target_coords, w);
  if (!cost.allFinite()) throw NumericError("matching: non-finite cost");
  const Mat by_target = cost.transpose();
  const auto query_of_target = solve_assignment(by_target);
  std::vector<char> used(n, 0);
  for (int j = 0; j < t; ++j) {
    result.assignment.emplace_back(query_of_target[j], j);
    result.total_cost += cost(query_of_target[j], j);
    used[query_of_target[j]] = 1;
  }
  for (int q = 0; q < n; ++q) {
    if (!used[q]) result.unmatched_queries.push_back(q);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Metrics

enum class NormKind { InterOcular, InterPupil, Box, Unit };

inline NormKind parse_norm_kind(const std::string& s) {
  if (s == "io" || s == "inter_ocular") return NormKind::InterOcular;
  if (s == "ip" || s == "inter_pupil") return NormKind::InterPupil;
  if (s == "box") return NormKind::Box;
  if (s == "unit" || s == "none") return NormKind::Unit;
  throw ConfigError("unknown normalization '" + s + "' (expected io, ip, box or unit)");
}

inline std::string to_string(NormKind k) {
  switch (k) {
    case NormKind::InterOcular: return "io";
    case NormKind::InterPupil: return "ip";
    case NormKind::Box: return "box";
    case NormKind::Unit: return "unit";
  }
  return "unit";
}

/// Normalizer computed from ground truth with the scheme's landmark rows.
inline double normalizer(const Mat& gt, NormKind kind, const LandmarkScheme& scheme) {
  switch (kind) {
    case NormKind::Unit:
      return 1.0;
    case NormKind::Box: {
      const double w = gt.col(0).maxCoeff() - gt.col(0).minCoeff();
      const double h = gt.col(1).maxCoeff() - gt.col(1).minCoeff();
      return std::sqrt(w * h);
    }
    case NormKind::InterOcular: {
      if (!scheme.inter_ocular) throw ConfigError("scheme '" + scheme.name + "' defines no inter-ocular rows");
      return (gt.row(scheme.inter_ocular->first) - gt.row(scheme.inter_ocular->second)).norm();
    }
    case NormKind::InterPupil: {
      if (!scheme.inter_pupil) throw ConfigError("scheme '" + scheme.name + "' defines no pupil groups");
      auto center = [&](const std::vector<int>& rows) {
        Eigen::RowVector2d c = Eigen::RowVector2d::Zero();
        for (int r : rows) c += gt.row(r);
        return Eigen::RowVector2d(c / static_cast<double>(rows.size()));
      };
      return (center(scheme.inter_pupil->first) - center(scheme.inter_pupil->second)).norm();
    }
  }
  return 1.0;
}

/// Mean point-to-point error divided by `norm_value`.
inline double nme(const Mat& pred, const Mat& gt, double norm_value) {
  if (pred.rows() != gt.rows() || pred.cols() != gt.cols() || pred.cols() != 2) {
    throw ShapeError("nme: prediction and ground truth shapes differ");
  }
  if (!(norm_value > 0.0)) throw DegenerateError("nme: normalizer must be positive");
  if (pred.rows() == 0) throw UndefinedStatisticError("nme: no landmarks");
  double sum = 0.0;
  for (Eigen::Index i = 0; i < pred.rows(); ++i) sum += (pred.row(i) - gt.row(i)).norm();
  return sum / static_cast<double>(pred.rows()) / norm_value;
}

/// Fraction of entries strictly above `threshold`.
inline double failure_rate(std::span<const double> nmes, double threshold) {
  if (nmes.empty()) throw UndefinedStatisticError("failure_rate: empty list");
  if (!(threshold > 0.0)) throw ConfigError("failure_rate: threshold must be positive");
  const auto failures = std::count_if(nmes.begin(), nmes.end(), [&](double v) { return v > threshold; });
  return static_cast<double>(failures) / static_cast<double>(nmes.size());
}

/// Horizontal mirror: x -> 1 - x, then rows re-labelled by flip_perm.
inline GroundTruthAnnotation flip_annotation(const GroundTruthAnnotation& ann, const LandmarkScheme& scheme) {
  if (ann.coords.rows() != scheme.count()) throw ShapeError("flip: annotation does not match scheme");
  GroundTruthAnnotation out = ann;
  for (int i = 0; i < scheme.count(); ++i) {
    const int src = scheme.flip_perm[i];
    out.coords(i, 0) = 1.0 - ann.coords(src, 0);
    out.coords(i, 1) = ann.coords(src, 1);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Files: scheme registry (JSON) and annotations (JSON lines).

inline LandmarkScheme scheme_from_json(const json& j) {
  LandmarkScheme s;
  try {
    s.name = j.at("name").get<std::string>();
    s.unified_ids = j.at("unified_ids").get<std::vector<int>>();
    s.flip_perm = j.at("flip_perm").get<std::vector<int>>();
    if (j.contains("inter_ocular")) {
      auto v = j.at("inter_ocular").get<std::vector<int>>();
      if (v.size() != 2) throw ConfigError("inter_ocular must list two rows");
      s.inter_ocular = std::make_pair(v[0], v[1]);
    }
    if (j.contains("inter_pupil")) {
      auto v = j.at("inter_pupil").get<std::vector<std::vector<int>>>();
      if (v.size() != 2) throw ConfigError("inter_pupil must list two row groups");
      s.inter_pupil = std::make_pair(v[0], v[1]);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed scheme entry: ") + e.what());
  }
  return s;
}

inline json scheme_to_json(const LandmarkScheme& s) {
  json j{{"name", s.name}, {"unified_ids", s.unified_ids}, {"flip_perm", s.flip_perm}};
  if (s.inter_ocular) j["inter_ocular"] = {s.inter_ocular->first, s.inter_ocular->second};
  if (s.inter_pupil) j["inter_pupil"] = {s.inter_pupil->first, s.inter_pupil->second};
  return j;
}

inline UnifiedIndexMap registry_from_json(const json& j) {
  try {
    UnifiedIndexMap map(j.at("unified_size").get<int>());
    for (const auto& s : j.at("schemes")) map.add(scheme_from_json(s));
    if (static_cast<int>(map.covered_ids().size()) > map.unified_size()) {
      throw ConfigError("registry covers more ids than unified_size");
    }
    return map;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed scheme registry: ") + e.what());
  }
}

inline json registry_to_json(const UnifiedIndexMap& map) {
  json schemes = json::array();
  for (const auto& name : map.names()) schemes.push_back(scheme_to_json(map.scheme(name)));
  return {{"unified_size", map.unified_size()}, {"schemes", schemes}};
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("cannot parse " + path.string() + ": " + e.what());
  }
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

inline UnifiedIndexMap load_registry(const std::filesystem::path& path) { return registry_from_json(read_json_file(path)); }

inline void save_registry(const UnifiedIndexMap& map, const std::filesystem::path& path) {
  write_text_file(path, registry_to_json(map).dump(2) + "\n");
}

inline json annotation_to_json(const GroundTruthAnnotation& a) {
  json coords = json::array();
  for (Eigen::Index i = 0; i < a.coords.rows(); ++i) coords.push_back({a.coords(i, 0), a.coords(i, 1)});
  return {{"image_id", a.image_id}, {"scheme_name", a.scheme_name}, {"coords", coords}};
}

inline GroundTruthAnnotation annotation_from_json(const json& j) {
  GroundTruthAnnotation a;
  try {
    a.image_id = j.at("image_id").get<std::string>();
    a.scheme_name = j.at("scheme_name").get<std::string>();
    const auto& c = j.at("coords");
    a.coords.resize(static_cast<Eigen::Index>(c.size()), 2);
    for (std::size_t i = 0; i < c.size(); ++i) {
      if (c[i].size() != 2) throw ConfigError("coordinate entry must have two values");
      a.coords(static_cast<Eigen::Index>(i), 0) = c[i][0].get<double>();
      a.coords(static_cast<Eigen::Index>(i), 1) = c[i][1].get<double>();
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed annotation record: ") + e.what());
  }
  if (!a.coords.allFinite()) throw NumericError("annotation '" + a.image_id + "' has non-finite coordinates");
  return a;
}

/// One JSON object per line.
inline std::string annotations_to_text(std::span<const GroundTruthAnnotation> anns) {
  std::string text;
  for (const auto& a : anns) text += annotation_to_json(a).dump() + "\n";
  return text;
}

inline void save_annotations(std::span<const GroundTruthAnnotation> anns, const std::filesystem::path& path) {
  write_text_file(path, annotations_to_text(anns));
}

inline std::vector<GroundTruthAnnotation> load_annotations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::vector<GroundTruthAnnotation> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(annotation_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw ConfigError("cannot parse " + path.string() + ": " + e.what());
    }
  }
  return out;
}

}  // namespace protoformer
