#pragma once

// Procedural face-like images whose landmark positions are known by
// construction. Every face is laid out in the unified index, so schemes that
// share a unified id see the same position for that id.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "protoformer/image.hpp"
#include "protoformer/unified_landmarks.hpp"

namespace protoformer {

/// Face-local template position of unified id `u` in [-1, 1]^2.
/// Ids pair up as mirror images (2k, 2k+1); with odd `unified_size` the last id sits on the midline.
inline Eigen::RowVector2d template_position(int u, int unified_size) {
  const int pairs = unified_size / 2;
  if (u == 2 * pairs) return {0.0, 0.75};
  const int k = u / 2;
  const double golden = 0.6180339887498949;
  const double frac = k * golden - std::floor(k * golden);
  const double x = 0.15 + 0.6 * frac;
  const double y = -0.7 + 1.4 * (k + 0.5) / pairs;
  return {u % 2 == 0 ? x : -x, y};
}

/// Canonical flip pairing of the synthetic template.
inline int template_mirror(int u, int unified_size) {
  if (u == 2 * (unified_size / 2)) return u;
  return u % 2 == 0 ? u + 1 : u - 1;
}

struct FaceParams {
  double cx = 0.5, cy = 0.5;
  double scale = 0.3;   // half-width in normalized units
  double aspect = 1.2;  // half-height / half-width
  double angle_deg = 0.0;
  Mat jitter;           // unified_size x 2 landmark offsets
};

/// Positions of every unified id for a face: center + R(angle) (scale*tx, scale*aspect*ty) + jitter.
inline Mat face_landmarks(const FaceParams& f, int unified_size) {
  const double t = f.angle_deg * 3.14159265358979323846 / 180.0;
  const double c = std::cos(t), s = std::sin(t);
  Mat out(unified_size, 2);
  for (int u = 0; u < unified_size; ++u) {
    const auto p = template_position(u, unified_size);
    const double lx = f.scale * p(0), ly = f.scale * f.aspect * p(1);
    out(u, 0) = f.cx + c * lx - s * ly;
    out(u, 1) = f.cy + s * lx + c * ly;
    if (f.jitter.size() != 0) out.row(u) += f.jitter.row(u);
  }
  return out;
}

inline FaceParams sample_face(int unified_size, double noise, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  FaceParams f;
  f.cx = 0.42 + 0.16 * unit(rng);
  f.cy = 0.42 + 0.16 * unit(rng);
  f.scale = 0.24 + 0.08 * unit(rng);
  f.aspect = 1.1 + 0.15 * unit(rng);
  f.angle_deg = -12.0 + 24.0 * unit(rng);
  f.jitter = Mat::Zero(unified_size, 2);
  if (noise > 0.0) {
    std::normal_distribution<double> n(0.0, noise);
    for (Eigen::Index i = 0; i < f.jitter.size(); ++i) f.jitter.data()[i] = n(rng);
  }
  return f;
}

/// Renders a face; `style` selects the dataset-specific background texture.
inline Image render_face(const FaceParams& f, const std::vector<int>& visible_ids, int unified_size, int style,
                         int size, double pixel_noise, Rng& rng) {
  const Mat marks = face_landmarks(f, unified_size);
  const double t = f.angle_deg * 3.14159265358979323846 / 180.0;
  const double c = std::cos(t), s = std::sin(t);
  const double sigma = 0.022;
  std::normal_distribution<double> noise(0.0, pixel_noise > 0.0 ? pixel_noise : 1.0);
  std::vector<double> gray(static_cast<std::size_t>(size) * size);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double nx = (x + 0.5) / size, ny = (y + 0.5) / size;
      double v = 0.12 + 0.08 * style + 0.05 * std::sin(6.283185307179586 * (style + 1) * 2.0 * nx);
      // face ellipse in face-local coordinates with a soft rim
      const double dx = nx - f.cx, dy = ny - f.cy;
      const double lx = (c * dx + s * dy) / f.scale;
      const double ly = (-s * dx + c * dy) / (f.scale * f.aspect);
      const double r = std::sqrt(lx * lx + ly * ly);
      const double inside = 1.0 / (1.0 + std::exp((r - 1.0) * 25.0));
      v = v * (1.0 - inside) + 0.55 * inside;
      for (int u : visible_ids) {
        const int k = u / 2;
        const bool midline = u == 2 * (unified_size / 2);
        const double amp = midline ? 0.4 : (k % 2 == 0 ? 1.0 : -1.0) * (0.2 + 0.125 * (k % 3));
        const double ex = nx - marks(u, 0), ey = ny - marks(u, 1);
        v += amp * std::exp(-(ex * ex + ey * ey) / (2.0 * sigma * sigma));
      }
      if (pixel_noise > 0.0) v += noise(rng);
      gray[static_cast<std::size_t>(y) * size + x] = std::clamp(v, 0.0, 1.0);
    }
  }
  return Image::from_gray(size, gray);
}

struct SynthSample {
  Image image;
  GroundTruthAnnotation annotation;
  FaceParams face;
};

/// Annotation of a face under `scheme`: the unified positions of its ids.
inline GroundTruthAnnotation annotate_face(const FaceParams& f, const LandmarkScheme& scheme, int unified_size,
                                           const std::string& image_id) {
  const Mat marks = face_landmarks(f, unified_size);
  GroundTruthAnnotation a{image_id, scheme.name, Mat(scheme.count(), 2)};
  for (int i = 0; i < scheme.count(); ++i) a.coords.row(i) = marks.row(scheme.unified_ids[i]);
  return a;
}

/// Deterministic sample pool: image i uses scheme i mod |schemes| and its own RNG stream.
inline std::vector<SynthSample> synth_dataset(int n_images, const std::vector<std::string>& schemes,
                                              const UnifiedIndexMap& map, double noise, unsigned long long seed,
                                              int image_size, const std::string& id_prefix = "") {
  if (schemes.empty()) throw ConfigError("synth: no schemes given");
  for (const auto& s : schemes) map.scheme(s);
  const auto covered = map.covered_ids();
  const std::vector<int> visible(covered.begin(), covered.end());
  std::vector<SynthSample> out;
  out.reserve(n_images);
  for (int i = 0; i < n_images; ++i) {
    std::seed_seq seq{static_cast<unsigned long long>(seed), static_cast<unsigned long long>(i), 0x5eedULL};
    Rng rng(seq);
    const int style = i % static_cast<int>(schemes.size());
    const auto& scheme = map.scheme(schemes[style]);
    FaceParams face = sample_face(map.unified_size(), noise, rng);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%05d", i);
    const std::string id = id_prefix + scheme.name + "_" + buf;
    Image img = render_face(face, visible, map.unified_size(), style, image_size, noise, rng);
    out.push_back({std::move(img), annotate_face(face, scheme, map.unified_size(), id), std::move(face)});
  }
  return out;
}

inline json face_to_json(const std::string& image_id, const FaceParams& f) {
  json jitter = json::array();
  for (Eigen::Index i = 0; i < f.jitter.rows(); ++i) jitter.push_back({f.jitter(i, 0), f.jitter(i, 1)});
  return {{"image_id", image_id}, {"cx", f.cx},           {"cy", f.cy},       {"scale", f.scale},
          {"aspect", f.aspect},   {"angle_deg", f.angle_deg}, {"jitter", jitter}};
}

inline FaceParams face_from_json(const json& j) {
  FaceParams f;
  f.cx = j.at("cx").get<double>();
  f.cy = j.at("cy").get<double>();
  f.scale = j.at("scale").get<double>();
  f.aspect = j.at("aspect").get<double>();
  f.angle_deg = j.at("angle_deg").get<double>();
  const auto& jt = j.at("jitter");
  f.jitter.resize(static_cast<Eigen::Index>(jt.size()), 2);
  for (std::size_t i = 0; i < jt.size(); ++i) {
    f.jitter(static_cast<Eigen::Index>(i), 0) = jt[i][0].get<double>();
    f.jitter(static_cast<Eigen::Index>(i), 1) = jt[i][1].get<double>();
  }
  return f;
}

/// Writes images/<id>.pgm, one <scheme><suffix>.jsonl per scheme and faces<suffix>.jsonl.
inline void write_synth_split(const std::vector<SynthSample>& samples, const std::vector<std::string>& schemes,
                              const std::filesystem::path& out_dir, const std::string& suffix) {
  for (const auto& s : samples) save_pgm(s.image, out_dir / "images" / (s.annotation.image_id + ".pgm"));
  for (const auto& name : schemes) {
    std::vector<GroundTruthAnnotation> anns;
    for (const auto& s : samples) {
      if (s.annotation.scheme_name == name) anns.push_back(s.annotation);
    }
    save_annotations(anns, out_dir / (name + suffix + ".jsonl"));
  }
  std::string faces;
  for (const auto& s : samples) faces += face_to_json(s.annotation.image_id, s.face).dump() + "\n";
  write_text_file(out_dir / ("faces" + suffix + ".jsonl"), faces);
}

/// Image file for an annotation record: <annotation dir>/images/<image_id>.pgm
inline std::filesystem::path image_path_for(const std::filesystem::path& annotation_file, const std::string& image_id) {
  return annotation_file.parent_path() / "images" / (image_id + ".pgm");
}

}  // namespace protoformer
