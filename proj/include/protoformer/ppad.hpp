#pragma once

// Progressive prototype-aware decoder: prompt generation from the
// high-resolution prototype, query/prompt fusion, cascaded cross-attention
// layers and the prediction heads.

#include <cmath>
#include <string>
#include <vector>

#include "protoformer/apae.hpp"
#include "protoformer/autograd.hpp"
#include "protoformer/config.hpp"
#include "protoformer/nn.hpp"

namespace protoformer {

struct Prompt {
  std::vector<int> indices;  // one flattened p1 position per query
  ag::Var rows;              // N_q x D, gathered from p1'
  ag::Var queries;           // q' = projection2(q), N_q x D
  Mat similarity;            // N_q x H1W1
};

/// Row-wise argmax; ties go to the lower column.
inline std::vector<int> argmax_rows(const Mat& m) {
  std::vector<int> out(m.rows());
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < m.cols(); ++c) {
      if (m(r, c) > m(r, best)) best = c;
    }
    out[r] = static_cast<int>(best);
  }
  return out;
}

struct PromptGenerator {
  Linear project_prototype;  // C1 -> D
  Linear project_queries;    // D -> D
  SimilarityKind kind = SimilarityKind::Dot;

  PromptGenerator() = default;
  PromptGenerator(int prototype_channels, int dim, SimilarityKind k, Rng& rng)
      : project_prototype(prototype_channels, dim, rng), project_queries(dim, dim, rng), kind(k) {}

  Mat similarity(const Mat& queries, const Mat& prototype) const {
    if (kind == SimilarityKind::Cosine) {
      Mat qn = queries.rowwise().normalized();
      Mat pn = prototype.rowwise().normalized();
      return qn * pn.transpose();
    }
    return queries * prototype.transpose() / std::sqrt(static_cast<double>(queries.cols()));
  }

  Prompt operator()(const FeatureMap& p1, const ag::Var& q) const {
    if (p1.channels != project_prototype.in_features()) throw ShapeError("prompt: prototype channel mismatch");
    auto proto = project_prototype(ag::transpose(p1.data));  // H1W1 x D
    Prompt out;
    out.queries = project_queries(q);
    out.similarity = similarity(out.queries.value(), proto.value());
    out.indices = argmax_rows(out.similarity);
    out.rows = ag::gather_rows(proto, out.indices);
    return out;
  }

  void collect(ParamList& out, const std::string& prefix) const {
    project_prototype.collect(out, prefix + ".proj1");
    project_queries.collect(out, prefix + ".proj2");
  }
};

inline Prompt generate_prompt(const FeatureMap& p1, const ag::Var& q, const PromptGenerator& gen) { return gen(p1, q); }

/// A = (q' (.) p) W1;  q_hat = q + (alpha (.) A / (|A|_2 + eps) + p) W2
struct FusionBlock {
  Linear w1;
  Linear w2;
  ag::Var alpha;  // 1 x D
  static constexpr double kNormEps = 1e-6;

  FusionBlock() = default;
  FusionBlock(int dim, Rng& rng) : w1(dim, dim, rng, false), w2(dim, dim, rng, false), alpha(ag::param(Mat::Ones(1, dim))) {}

  ag::Var operator()(const ag::Var& q, const ag::Var& projected_queries, const ag::Var& prompt_rows) const {
    if (q.rows() != prompt_rows.rows() || q.cols() != prompt_rows.cols()) throw ShapeError("fuse: query/prompt shape mismatch");
    auto a = w1(ag::mul(projected_queries, prompt_rows));
    auto weighted = ag::mul_row(ag::row_l2_normalize(a, kNormEps), alpha);
    return ag::add(q, w2(ag::add(weighted, prompt_rows)));
  }

  void collect(ParamList& out, const std::string& prefix) const {
    w1.collect(out, prefix + ".w1");
    w2.collect(out, prefix + ".w2");
    out.push_back({prefix + ".alpha", alpha});
  }
};

inline ag::Var fuse(const ag::Var& q, const Prompt& prompt, const FusionBlock& block) {
  return block(q, prompt.queries, prompt.rows);
}

/// q~ = q_prev + LN(MHCA(q_hat, q0, q0));  q~' = MHCA(q~, P~, P~);  out = FFN(LN(q~') + q~)
struct DecoderLayer {
  MultiHeadAttention query_attention;
  LayerNorm norm1;
  MultiHeadAttention memory_attention;
  LayerNorm norm2;
  FeedForward ffn;

  DecoderLayer() = default;
  DecoderLayer(int dim, int heads, int hidden, Rng& rng)
      : query_attention(dim, heads, rng), norm1(dim), memory_attention(dim, heads, rng), norm2(dim), ffn(dim, hidden, rng) {}

  ag::Var operator()(const ag::Var& prev, const ag::Var& refined, const ag::Var& initial_queries,
                     const ag::Var& memory) const {
    if (prev.cols() != refined.cols() || prev.rows() != refined.rows()) throw ShapeError("decode_layer: query shape mismatch");
    if (memory.cols() != prev.cols()) throw ShapeError("decode_layer: memory width differs from query width");
    auto mixed = ag::add(prev, norm1(query_attention(refined, initial_queries, initial_queries)));
    auto attended = memory_attention(mixed, memory, memory);
    return ffn(ag::add(norm2(attended), mixed));
  }

  void collect(ParamList& out, const std::string& prefix) const {
    query_attention.collect(out, prefix + ".query_attn");
    norm1.collect(out, prefix + ".norm1");
    memory_attention.collect(out, prefix + ".memory_attn");
    norm2.collect(out, prefix + ".norm2");
    ffn.collect(out, prefix + ".ffn");
  }
};

inline ag::Var decode_layer(const ag::Var& prev, const ag::Var& refined, const ag::Var& initial_queries,
                            const ag::Var& memory, const DecoderLayer& layer) {
  return layer(prev, refined, initial_queries, memory);
}

/// Learned queries refined by one prompt generator, fusion block and decoder
/// layer per level.
struct Decoder {
  ag::Var queries;  // N_q x D
  std::vector<PromptGenerator> prompts;
  std::vector<FusionBlock> fusions;
  std::vector<DecoderLayer> layers;
  Linear memory_projection;  // c' -> D, only when they differ
  bool use_prompt = true;

  Decoder() = default;
  Decoder(const ModelConfig& cfg, Rng& rng) : use_prompt(cfg.use_prompt) {
    const int d = cfg.query_dim;
    queries = ag::param(normal_init(cfg.query_count, d, 1.0, rng));
    for (int i = 0; i < cfg.decoder_depth; ++i) {
      if (use_prompt) {
        prompts.emplace_back(cfg.backbone.c1, d, cfg.similarity, rng);
        fusions.emplace_back(d, rng);
      }
      layers.emplace_back(d, cfg.decoder_heads, cfg.decoder_ffn(), rng);
    }
    if (cfg.token_channels != d) memory_projection = Linear(cfg.token_channels, d, rng);
  }

  int depth() const { return static_cast<int>(layers.size()); }

  /// Returns the output of the final layer; `trace` receives every layer output.
  ag::Var operator()(const FeatureMap& p1, const ag::Var& memory_tokens, std::vector<ag::Var>* trace = nullptr) const {
    auto memory = memory_projection.weight.defined() ? memory_projection(memory_tokens) : memory_tokens;
    ag::Var q = queries;
    for (int i = 0; i < depth(); ++i) {
      ag::Var refined = q;
      if (use_prompt) {
        auto prompt = prompts[i](p1, q);
        refined = fuse(q, prompt, fusions[i]);
      }
      q = layers[i](q, refined, queries, memory);
      if (trace) trace->push_back(q);
    }
    return q;
  }

  void collect(ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".queries", queries});
    for (int i = 0; i < depth(); ++i) {
      const auto level = prefix + ".level" + std::to_string(i);
      if (use_prompt) {
        prompts[i].collect(out, level + ".prompt");
        fusions[i].collect(out, level + ".fusion");
      }
      layers[i].collect(out, level + ".layer");
    }
    if (memory_projection.weight.defined()) memory_projection.collect(out, prefix + ".memory_proj");
  }
};

struct LandmarkPrediction {
  ag::Var index_logits;  // N_q x (U + 1); last column is "no landmark"
  ag::Var coords;        // N_q x 2 in [0, 1]
};

struct PredictionHeads {
  Linear index_head;
  Linear coord_hidden;
  Linear coord_out;

  PredictionHeads() = default;
  PredictionHeads(int dim, int unified_size, Rng& rng)
      : index_head(dim, unified_size + 1, rng), coord_hidden(dim, dim, rng), coord_out(dim, 2, rng) {}

  int unified_size() const { return index_head.out_features() - 1; }

  LandmarkPrediction operator()(const ag::Var& q) const {
    return {index_head(q), ag::sigmoid(coord_out(ag::relu(coord_hidden(q))))};
  }

  void collect(ParamList& out, const std::string& prefix) const {
    index_head.collect(out, prefix + ".index");
    coord_hidden.collect(out, prefix + ".coord_hidden");
    coord_out.collect(out, prefix + ".coord_out");
  }
};

}  // namespace protoformer
