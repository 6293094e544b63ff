#pragma once

#include <string>
#include <vector>

#include "protoformer/apae.hpp"
#include "protoformer/config.hpp"
#include "protoformer/image.hpp"
#include "protoformer/nn.hpp"
#include "protoformer/ppad.hpp"

namespace protoformer {

/// Static shape contract of a configuration, computed without building a model.
struct ShapePlan {
  int x1_channels, x1_height, x1_width;
  int x2_channels, x2_height, x2_width;
  int token_length;
  int token_channels;
  int query_count;
  int query_dim;
  int index_classes;
  int coord_dims;
};

inline ShapePlan plan_shapes(const ModelConfig& cfg) {
  cfg.validate();
  const auto& b = cfg.backbone;
  return {b.c1, b.h1, b.w1, b.c2, b.h2, b.w2, b.h1 * b.w1 + b.h2 * b.w2, cfg.token_channels,
          cfg.query_count, cfg.query_dim, cfg.unified_size + 1, 2};
}

struct ForwardResult {
  MultiScaleFeatures features;
  FeatureMap p1, p2;
  ag::Var tokens;                      // refined prototype tokens, l x c'
  std::vector<GatingDecision> gates;   // one per scale; empty without the extractor
  LandmarkPrediction prediction;
};

class ProtoFormer {
 public:
  explicit ProtoFormer(const ModelConfig& cfg, unsigned long long seed = 0) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    backbone_ = Backbone(cfg_, rng);
    if (cfg_.use_ape) {
      extractor1_ = PrototypeExtractor(cfg_.backbone.c1, cfg_, rng);
      extractor2_ = PrototypeExtractor(cfg_.backbone.c2, cfg_, rng);
    }
    encoder_ = ProtoEncoder(cfg_, rng);
    decoder_ = Decoder(cfg_, rng);
    heads_ = PredictionHeads(cfg_.query_dim, cfg_.unified_size, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  const Backbone& backbone() const { return backbone_; }
  const PrototypeExtractor& extractor(int scale) const { return scale == 0 ? extractor1_ : extractor2_; }
  const ProtoEncoder& encoder() const { return encoder_; }
  const Decoder& decoder() const { return decoder_; }
  const PredictionHeads& heads() const { return heads_; }

  ForwardResult forward(const Image& image) const {
    if (image.size != cfg_.image_size) {
      throw ShapeError("model expects " + std::to_string(cfg_.image_size) + "px images, got " + std::to_string(image.size));
    }
    ForwardResult r;
    r.features = backbone_(ag::constant(normalize_pixels(image.pixels)));
    if (cfg_.use_ape) {
      auto [p1, g1] = extractor1_(r.features.x1);
      auto [p2, g2] = extractor2_(r.features.x2);
      r.p1 = p1;
      r.p2 = p2;
      r.gates = {std::move(g1), std::move(g2)};
    } else {
      r.p1 = r.features.x1;
      r.p2 = r.features.x2;
    }
    r.tokens = encoder_(r.p1, r.p2);
    r.prediction = heads_(decoder_(r.p1, r.tokens));
    return r;
  }

  /// Every trainable tensor with a stable hierarchical name.
  ParamList parameters() const {
    ParamList out;
    backbone_.collect(out, "backbone");
    if (cfg_.use_ape) {
      extractor1_.collect(out, "ape.scale1");
      extractor2_.collect(out, "ape.scale2");
    }
    encoder_.collect(out, "encoder");
    decoder_.collect(out, "decoder");
    heads_.collect(out, "heads");
    return out;
  }

  static Mat normalize_pixels(const Mat& pixels) { return (pixels.array() - 0.5) / 0.25; }

 private:
  ModelConfig cfg_;
  Backbone backbone_;
  PrototypeExtractor extractor1_, extractor2_;
  ProtoEncoder encoder_;
  Decoder decoder_;
  PredictionHeads heads_;
};

}  // namespace protoformer
