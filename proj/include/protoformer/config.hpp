#pragma once

#include <algorithm>
#include <initializer_list>
#include <string>
#include <type_traits>
#include <utility>

#include <nlohmann/json.hpp>

#include "protoformer/error.hpp"

namespace protoformer {

enum class SimilarityKind { Dot, Cosine };

/// Spatial/channel contract of the backbone output pair.
struct BackboneProfile {
  int c1 = 32, h1 = 8, w1 = 8;
  int c2 = 64, h2 = 4, w2 = 4;
  int stem_width = 16;

  static BackboneProfile full() { return {1024, 32, 32, 2048, 16, 16, 64}; }
  static BackboneProfile tiny() { return {32, 8, 8, 64, 4, 4, 16}; }
};

struct ModelConfig {
  int image_size = 64;
  BackboneProfile backbone = BackboneProfile::tiny();

  // Adaptive prototype extractor.
  int expert_count = 16;
  int topk = 8;
  int expert_rank = 0;  // 0: channels / 8 per scale
  int router_heads = 2;

  // Proto-Encoder.
  int encoder_depth = 6;
  int encoder_heads = 8;
  double fusion_scale = 0.1;
  int token_channels = 256;
  int ffn_hidden = 0;  // 0: 2 * width

  // Decoder.
  int query_count = 124;
  int query_dim = 256;
  int decoder_depth = 6;
  int decoder_heads = 8;
  SimilarityKind similarity = SimilarityKind::Dot;

  int unified_size = 124;

  // Ablation switches: Trans baseline is use_ape = use_prompt = false.
  bool use_ape = true;
  bool use_prompt = true;

  int rank_for(int channels) const { return expert_rank > 0 ? expert_rank : std::max(1, channels / 8); }
  int encoder_ffn() const { return ffn_hidden > 0 ? ffn_hidden : 2 * token_channels; }
  int decoder_ffn() const { return ffn_hidden > 0 ? ffn_hidden : 2 * query_dim; }
  int token_length() const { return backbone.h1 * backbone.w1 + backbone.h2 * backbone.w2; }

  /// Number of stride-2 stages between the image and the x1 scale.
  int stem_stages() const {
    int s = 0, size = image_size;
    while (size > backbone.h1) {
      if (size % 2 != 0) return -1;
      size /= 2;
      ++s;
    }
    return size == backbone.h1 ? s : -1;
  }

  void validate() const {
    auto require = [](bool ok, const std::string& what) {
      if (!ok) throw ConfigError("model config: " + what);
    };
    const auto& b = backbone;
    require(b.c1 > 0 && b.h1 > 0 && b.w1 > 0 && b.c2 > 0 && b.h2 > 0 && b.w2 > 0, "backbone dimensions must be positive");
    require(b.h1 == b.w1, "backbone scales must be square");
    require(b.h1 == 2 * b.h2 && b.w1 == 2 * b.w2, "x2 must be half the resolution of x1");
    require(stem_stages() >= 1, "image_size must be h1 times a power of two");
    require(b.stem_width > 0, "stem_width must be positive");
    require(expert_count >= 1, "expert_count must be >= 1");
    require(topk >= 1 && topk <= expert_count, "topk must lie in [1, expert_count]");
    for (int c : {b.c1, b.c2}) {
      require(c >= 4, "backbone channels must be >= 4 for the router");
      require((c / 4) % router_heads == 0, "router width C/4 must be divisible by router_heads");
      const int r = rank_for(c);
      require(r < c, "expert_rank must be smaller than the feature channels");
    }
    require(encoder_depth >= 1, "encoder_depth must be >= 1");
    require(token_channels > 0 && token_channels % encoder_heads == 0, "token_channels must be divisible by encoder_heads");
    require(query_count >= 1, "query_count must be >= 1");
    require(query_dim > 0 && query_dim % decoder_heads == 0, "query_dim must be divisible by decoder_heads");
    require(decoder_depth >= 1, "decoder_depth must be >= 1");
    require(unified_size >= 1, "unified_size must be >= 1");
    require(fusion_scale >= 0.0, "fusion_scale must be nonnegative");
  }
};

inline ModelConfig full_model_config() {
  ModelConfig c;
  c.image_size = 512;
  c.backbone = BackboneProfile::full();
  return c;
}

/// Small configuration used for desk-scale training and tests.
inline ModelConfig tiny_model_config() {
  ModelConfig c;
  c.image_size = 64;
  c.backbone = BackboneProfile::tiny();
  c.expert_count = 4;
  c.topk = 2;
  c.router_heads = 2;
  c.encoder_depth = 2;
  c.encoder_heads = 4;
  c.token_channels = 32;
  c.query_count = 12;
  c.query_dim = 32;
  c.decoder_depth = 2;
  c.decoder_heads = 4;
  c.unified_size = 9;
  return c;
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  const auto& b = c.backbone;
  j = nlohmann::json{
      {"image_size", c.image_size},
      {"backbone", {{"c1", b.c1}, {"h1", b.h1}, {"w1", b.w1}, {"c2", b.c2}, {"h2", b.h2}, {"w2", b.w2}, {"stem_width", b.stem_width}}},
      {"expert_count", c.expert_count},
      {"topk", c.topk},
      {"expert_rank", c.expert_rank},
      {"router_heads", c.router_heads},
      {"encoder_depth", c.encoder_depth},
      {"encoder_heads", c.encoder_heads},
      {"fusion_scale", c.fusion_scale},
      {"token_channels", c.token_channels},
      {"ffn_hidden", c.ffn_hidden},
      {"query_count", c.query_count},
      {"query_dim", c.query_dim},
      {"decoder_depth", c.decoder_depth},
      {"decoder_heads", c.decoder_heads},
      {"similarity_kind", c.similarity == SimilarityKind::Dot ? "dot" : "cosine"},
      {"unified_size", c.unified_size},
      {"use_ape", c.use_ape},
      {"use_prompt", c.use_prompt},
  };
}

/// Missing keys keep their defaults; "backbone" may be a profile name or an object.
inline ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig c = {}) {
  try {
    if (j.contains("profile")) {
      const auto p = j.at("profile").get<std::string>();
      if (p == "full") c = full_model_config();
      else if (p == "tiny") c = tiny_model_config();
      else throw ConfigError("unknown model profile '" + p + "'");
    }
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("image_size", c.image_size);
    if (j.contains("backbone")) {
      const auto& bj = j.at("backbone");
      if (bj.is_string()) {
        const auto p = bj.get<std::string>();
        if (p == "full") c.backbone = BackboneProfile::full();
        else if (p == "tiny") c.backbone = BackboneProfile::tiny();
        else throw ConfigError("unknown backbone profile '" + p + "'");
      } else {
        auto& b = c.backbone;
        const std::initializer_list<std::pair<const char*, int*>> fields{
            {"c1", &b.c1}, {"h1", &b.h1}, {"w1", &b.w1}, {"c2", &b.c2},
            {"h2", &b.h2}, {"w2", &b.w2}, {"stem_width", &b.stem_width}};
        for (auto [key, field] : fields) {
          if (bj.contains(key)) *field = bj.at(key).get<int>();
        }
      }
    }
    get("expert_count", c.expert_count);
    get("topk", c.topk);
    get("expert_rank", c.expert_rank);
    get("router_heads", c.router_heads);
    get("encoder_depth", c.encoder_depth);
    get("encoder_heads", c.encoder_heads);
    get("fusion_scale", c.fusion_scale);
    get("token_channels", c.token_channels);
    get("ffn_hidden", c.ffn_hidden);
    get("query_count", c.query_count);
    get("query_dim", c.query_dim);
    get("decoder_depth", c.decoder_depth);
    get("decoder_heads", c.decoder_heads);
    get("unified_size", c.unified_size);
    get("use_ape", c.use_ape);
    get("use_prompt", c.use_prompt);
    if (j.contains("similarity_kind")) {
      const auto s = j.at("similarity_kind").get<std::string>();
      if (s == "dot") c.similarity = SimilarityKind::Dot;
      else if (s == "cosine") c.similarity = SimilarityKind::Cosine;
      else throw ConfigError("similarity_kind must be dot or cosine");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed model config: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace protoformer
