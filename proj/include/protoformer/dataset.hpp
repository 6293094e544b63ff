#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "protoformer/image.hpp"
#include "protoformer/synth.hpp"
#include "protoformer/unified_landmarks.hpp"

namespace protoformer {

struct Sample {
  Image image;
  GroundTruthAnnotation annotation;
  int dataset = 0;  // index into the dataset list the sample came from
};

struct DatasetSpec {
  std::string scheme;
  std::filesystem::path annotations;
};

/// Loads annotation records and their images; every record must use `spec.scheme`.
inline std::vector<Sample> load_dataset(const DatasetSpec& spec, const UnifiedIndexMap& map, int dataset_index) {
  const auto& scheme = map.scheme(spec.scheme);
  std::vector<Sample> out;
  for (auto& ann : load_annotations(spec.annotations)) {
    if (ann.scheme_name != spec.scheme) {
      throw ConfigError("record '" + ann.image_id + "' in " + spec.annotations.string() + " uses scheme '" +
                        ann.scheme_name + "', expected '" + spec.scheme + "'");
    }
    if (ann.coords.rows() != scheme.count()) throw ShapeError("record '" + ann.image_id + "' has the wrong landmark count");
    Image img = load_pgm(image_path_for(spec.annotations, ann.image_id));
    out.push_back({std::move(img), std::move(ann), dataset_index});
  }
  return out;
}

inline std::vector<Sample> load_datasets(const std::vector<DatasetSpec>& specs, const UnifiedIndexMap& map) {
  std::vector<Sample> pool;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    auto part = load_dataset(specs[i], map, static_cast<int>(i));
    pool.insert(pool.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
  }
  return pool;
}

/// In-memory samples straight from the generator, labelled by scheme order.
inline std::vector<Sample> samples_from_synth(std::vector<SynthSample> synth, const std::vector<std::string>& schemes) {
  std::vector<Sample> out;
  for (auto& s : synth) {
    int idx = 0;
    for (std::size_t i = 0; i < schemes.size(); ++i) {
      if (schemes[i] == s.annotation.scheme_name) idx = static_cast<int>(i);
    }
    out.push_back({std::move(s.image), std::move(s.annotation), idx});
  }
  return out;
}

}  // namespace protoformer
