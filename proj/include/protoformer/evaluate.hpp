#pragma once

#include <limits>
#include <string>
#include <vector>

#include "protoformer/dataset.hpp"
#include "protoformer/model.hpp"
#include "protoformer/unified_landmarks.hpp"

namespace protoformer {

/// For each unified id of the scheme, the query with the highest probability
/// for that id (lower query index on ties), returned as scheme-ordered rows.
inline Mat select_landmarks(const Mat& index_logits, const Mat& coords, const LandmarkScheme& scheme) {
  const Mat prob = ag::softmax_rows_value(index_logits);
  const int u = static_cast<int>(index_logits.cols()) - 1;
  std::vector<UnifiedPoint> points;
  for (int id : scheme.unified_ids) {
    if (id >= u) throw ConfigError("scheme '" + scheme.name + "' uses id " + std::to_string(id) + " beyond the model's index");
    Eigen::Index best = 0;
    for (Eigen::Index q = 1; q < prob.rows(); ++q) {
      if (prob(q, id) > prob(best, id)) best = q;
    }
    points.push_back({id, coords(best, 0), coords(best, 1)});
  }
  return from_unified(points, scheme);
}

inline Mat predict_landmarks(const ProtoFormer& model, const Image& image, const LandmarkScheme& scheme) {
  ag::NoGradGuard guard;
  auto r = model.forward(image);
  return select_landmarks(r.prediction.index_logits.value(), r.prediction.coords.value(), scheme);
}

struct ImageMetric {
  std::string image_id;
  double nme = 0.0;
};

struct EvalReport {
  std::string scheme;
  NormKind norm = NormKind::InterOcular;
  double fr_threshold = 0.10;
  double nme = 0.0;
  double failure_rate = 0.0;
  std::vector<ImageMetric> per_image;
};

inline json report_to_json(const EvalReport& r) {
  json per = json::array();
  for (const auto& m : r.per_image) per.push_back({{"image_id", m.image_id}, {"nme", m.nme}});
  return {{"scheme", r.scheme}, {"norm", to_string(r.norm)}, {"fr_threshold", r.fr_threshold},
          {"nme", r.nme},       {"failure_rate", r.failure_rate}, {"per_image", per}};
}

inline void check_compatible(const ProtoFormer& model, const UnifiedIndexMap& map) {
  if (model.config().unified_size != map.unified_size()) {
    throw ConfigError("checkpoint unified size " + std::to_string(model.config().unified_size) +
                      " does not match registry unified size " + std::to_string(map.unified_size()));
  }
}

/// Metrics over `samples`, all annotated with `scheme`. In oracle mode the
/// ground truth stands in for the model output.
inline EvalReport evaluate(const ProtoFormer* model, const std::vector<Sample>& samples, const LandmarkScheme& scheme,
                           NormKind norm, double fr_threshold) {
  EvalReport report;
  report.scheme = scheme.name;
  report.norm = norm;
  report.fr_threshold = fr_threshold;
  std::vector<double> nmes;
  for (const auto& s : samples) {
    if (s.annotation.scheme_name != scheme.name) throw ConfigError("sample '" + s.annotation.image_id + "' is not annotated with " + scheme.name);
    const Mat& gt = s.annotation.coords;
    const Mat pred = model ? predict_landmarks(*model, s.image, scheme) : gt;
    const double v = nme(pred, gt, normalizer(gt, norm, scheme));
    nmes.push_back(v);
    report.per_image.push_back({s.annotation.image_id, v});
  }
  if (nmes.empty()) throw UndefinedStatisticError("evaluate: no samples");
  double sum = 0.0;
  for (double v : nmes) sum += v;
  report.nme = sum / static_cast<double>(nmes.size());
  report.failure_rate = failure_rate(nmes, fr_threshold);
  return report;
}

/// Mean NME over a mixed pool, each sample normalized by its own scheme.
inline double mean_nme(const ProtoFormer& model, const std::vector<Sample>& samples, const UnifiedIndexMap& map, NormKind norm) {
  if (samples.empty()) throw UndefinedStatisticError("mean_nme: no samples");
  double sum = 0.0;
  for (const auto& s : samples) {
    const auto& scheme = map.scheme(s.annotation.scheme_name);
    const Mat pred = predict_landmarks(model, s.image, scheme);
    sum += nme(pred, s.annotation.coords, normalizer(s.annotation.coords, norm, scheme));
  }
  return sum / static_cast<double>(samples.size());
}

}  // namespace protoformer
