#pragma once

// Expert-usage diagnostics: per-dataset mean gating vectors, their deviation
// from the mean over all samples, TopK activation counts, and plot inputs.

#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "protoformer/dataset.hpp"
#include "protoformer/model.hpp"

namespace protoformer {

struct GatingRecord {
  std::string image_id;
  int dataset = 0;
  std::vector<Eigen::RowVectorXd> distributions;  // per scale
  std::vector<std::vector<int>> selected;         // per scale
};

struct DatasetUsage {
  std::string name;
  int samples = 0;
  std::vector<Eigen::RowVectorXd> mean;        // per scale
  std::vector<Eigen::RowVectorXd> normalized;  // mean minus the all-sample mean, per scale
  std::vector<std::vector<int>> activations;   // TopK selection counts, per scale
};

struct ExpertUsageReport {
  std::vector<DatasetUsage> datasets;
  std::vector<GatingRecord> records;
};

inline std::vector<GatingRecord> collect_gating(const ProtoFormer& model, const std::vector<Sample>& samples) {
  if (!model.config().use_ape) throw ConfigError("diagnose: model was built without the prototype extractor");
  ag::NoGradGuard guard;
  std::vector<GatingRecord> out;
  for (const auto& s : samples) {
    auto r = model.forward(s.image);
    GatingRecord rec{s.annotation.image_id, s.dataset, {}, {}};
    for (const auto& g : r.gates) {
      rec.distributions.push_back(g.distribution.value().row(0));
      rec.selected.push_back(g.selected);
    }
    out.push_back(std::move(rec));
  }
  return out;
}

/// Aggregates records by dataset; datasets without samples are skipped with a warning.
inline ExpertUsageReport summarize_gating(std::vector<GatingRecord> records, const std::vector<std::string>& dataset_names) {
  ExpertUsageReport report;
  report.records = std::move(records);
  if (report.records.empty()) throw UndefinedStatisticError("diagnose: no samples");
  const std::size_t scales = report.records.front().distributions.size();
  const Eigen::Index n = report.records.front().distributions.front().size();

  std::vector<Eigen::RowVectorXd> overall(scales, Eigen::RowVectorXd::Zero(n));
  for (const auto& r : report.records) {
    for (std::size_t s = 0; s < scales; ++s) overall[s] += r.distributions[s];
  }
  for (auto& v : overall) v /= static_cast<double>(report.records.size());

  for (std::size_t d = 0; d < dataset_names.size(); ++d) {
    DatasetUsage usage;
    usage.name = dataset_names[d];
    usage.mean.assign(scales, Eigen::RowVectorXd::Zero(n));
    usage.activations.assign(scales, std::vector<int>(n, 0));
    for (const auto& r : report.records) {
      if (r.dataset != static_cast<int>(d)) continue;
      ++usage.samples;
      for (std::size_t s = 0; s < scales; ++s) {
        usage.mean[s] += r.distributions[s];
        for (int e : r.selected[s]) ++usage.activations[s][e];
      }
    }
    if (usage.samples == 0) {
      std::clog << "warning: dataset '" << usage.name << "' has no samples, skipped\n";
      continue;
    }
    for (std::size_t s = 0; s < scales; ++s) {
      usage.mean[s] /= static_cast<double>(usage.samples);
      usage.normalized.push_back(usage.mean[s] - overall[s]);
    }
    report.datasets.push_back(std::move(usage));
  }
  return report;
}

inline json usage_report_to_json(const ExpertUsageReport& r) {
  auto vec = [](const Eigen::RowVectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  json datasets = json::array();
  for (const auto& d : r.datasets) {
    json scales = json::array();
    for (std::size_t s = 0; s < d.mean.size(); ++s) {
      scales.push_back({{"scale", s + 1}, {"mean_gating", vec(d.mean[s])}, {"normalized_weights", vec(d.normalized[s])},
                        {"activation_counts", d.activations[s]}});
    }
    datasets.push_back({{"dataset", d.name}, {"samples", d.samples}, {"scales", scales}});
  }
  return {{"version", 1}, {"datasets", datasets}};
}

/// Bar chart of normalized expert weights for one dataset and scale.
inline std::string usage_bar_chart_svg(const DatasetUsage& d, std::size_t scale) {
  const auto& v = d.normalized[scale];
  const int n = static_cast<int>(v.size());
  const double width = 40.0 * n + 60.0, height = 240.0, mid = 120.0;
  double peak = 1e-12;
  for (int i = 0; i < n; ++i) peak = std::max(peak, std::abs(v(i)));
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
  svg << "<text x=\"10\" y=\"20\" font-size=\"14\">" << d.name << " scale " << scale + 1 << " normalized expert weights</text>\n";
  svg << "<line x1=\"30\" y1=\"" << mid << "\" x2=\"" << width - 10 << "\" y2=\"" << mid << "\" stroke=\"black\"/>\n";
  for (int i = 0; i < n; ++i) {
    const double h = 90.0 * v(i) / peak;
    const double x = 40.0 + 40.0 * i;
    svg << "<rect x=\"" << x << "\" y=\"" << (h >= 0 ? mid - h : mid) << "\" width=\"28\" height=\"" << std::abs(h)
        << "\" fill=\"" << (h >= 0 ? "#3b6ea5" : "#c0504d") << "\"/>\n";
    svg << "<text x=\"" << x + 8 << "\" y=\"" << height - 10 << "\" font-size=\"11\">" << i << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

/// CSV of per-sample gating vectors, input to an external 2-D embedding.
inline std::string gating_embedding_csv(const ExpertUsageReport& r, const std::vector<std::string>& dataset_names) {
  std::ostringstream csv;
  csv.precision(17);
  csv << "image_id,dataset,scale";
  const Eigen::Index n = r.records.front().distributions.front().size();
  for (Eigen::Index e = 0; e < n; ++e) csv << ",g" << e;
  csv << "\n";
  for (const auto& rec : r.records) {
    for (std::size_t s = 0; s < rec.distributions.size(); ++s) {
      csv << rec.image_id << "," << dataset_names.at(rec.dataset) << "," << s + 1;
      for (Eigen::Index e = 0; e < n; ++e) csv << "," << rec.distributions[s](e);
      csv << "\n";
    }
  }
  return csv.str();
}

/// Writes expert_usage.json, experts_<dataset>_scale<k>.svg and gating_embedding.csv.
inline void write_usage_report(const ExpertUsageReport& r, const std::vector<std::string>& dataset_names,
                               const std::filesystem::path& out_dir) {
  write_text_file(out_dir / "expert_usage.json", usage_report_to_json(r).dump(2) + "\n");
  for (const auto& d : r.datasets) {
    for (std::size_t s = 0; s < d.normalized.size(); ++s) {
      write_text_file(out_dir / ("experts_" + d.name + "_scale" + std::to_string(s + 1) + ".svg"), usage_bar_chart_svg(d, s));
    }
  }
  write_text_file(out_dir / "gating_embedding.csv", gating_embedding_csv(r, dataset_names));
}

}  // namespace protoformer
