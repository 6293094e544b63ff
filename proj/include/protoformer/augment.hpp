#pragma once

#include <cmath>
#include <random>
#include <utility>

#include "protoformer/image.hpp"
#include "protoformer/nn.hpp"
#include "protoformer/unified_landmarks.hpp"

namespace protoformer {

struct AugmentConfig {
  double max_rotation_deg = 30.0;
  double flip_prob = 0.5;
};

/// Rotates a normalized point about (0.5, 0.5), y pointing down.
inline Eigen::RowVector2d rotate_point(const Eigen::RowVector2d& p, double degrees) {
  const double t = degrees * 3.14159265358979323846 / 180.0;
  const double c = std::cos(t), s = std::sin(t);
  const double dx = p(0) - 0.5, dy = p(1) - 0.5;
  return {0.5 + c * dx - s * dy, 0.5 + s * dx + c * dy};
}

/// Applies a fixed rotation and optional flip; coordinates are clamped to [0, 1].
inline std::pair<Image, GroundTruthAnnotation> apply_augmentation(const Image& image, const GroundTruthAnnotation& ann,
                                                                  const LandmarkScheme& scheme, double degrees,
                                                                  bool flip) {
  Image img = degrees == 0.0 ? image : rotate_image(image, degrees);
  GroundTruthAnnotation out = ann;
  if (degrees != 0.0) {
    for (Eigen::Index i = 0; i < out.coords.rows(); ++i) out.coords.row(i) = rotate_point(ann.coords.row(i), degrees);
  }
  if (flip) {
    img = flip_image(img);
    out = flip_annotation(out, scheme);
  }
  out.coords = out.coords.cwiseMax(0.0).cwiseMin(1.0);
  return {std::move(img), std::move(out)};
}

/// Angle uniform in [-max, max], flip with probability flip_prob.
inline std::pair<Image, GroundTruthAnnotation> augment(const Image& image, const GroundTruthAnnotation& ann,
                                                       const LandmarkScheme& scheme, const AugmentConfig& cfg, Rng& rng) {
  std::uniform_real_distribution<double> angle(-cfg.max_rotation_deg, cfg.max_rotation_deg);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double degrees = cfg.max_rotation_deg > 0.0 ? angle(rng) : 0.0;
  const bool flip = cfg.flip_prob > 0.0 && unit(rng) < cfg.flip_prob;
  return apply_augmentation(image, ann, scheme, degrees, flip);
}

}  // namespace protoformer
