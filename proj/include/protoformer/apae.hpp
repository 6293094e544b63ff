#pragma once

// Adaptive prototype-aware encoder: backbone features, low-rank prototype
// experts, the TopK router, prototype extraction and the Proto-Encoder.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "protoformer/autograd.hpp"
#include "protoformer/config.hpp"
#include "protoformer/nn.hpp"

namespace protoformer {

/// A feature map stored channel-major: channels x (height * width).
struct FeatureMap {
  ag::Var data;
  int channels = 0;
  int height = 0;
  int width = 0;

  int positions() const { return height * width; }
};

struct MultiScaleFeatures {
  FeatureMap x1;
  FeatureMap x2;
};

/// Plain strided-convolution backbone emitting the (x1, x2) pair.
struct Backbone {
  std::vector<Conv2d> stem;
  Conv2d down;  // x1 -> x2
  int image_size = 0;

  Backbone() = default;
  Backbone(const ModelConfig& cfg, Rng& rng) : image_size(cfg.image_size) {
    const int stages = cfg.stem_stages();
    int in = 3;
    for (int s = 0; s < stages; ++s) {
      const int out = (s + 1 == stages) ? cfg.backbone.c1 : cfg.backbone.stem_width;
      stem.emplace_back(in, out, 3, 2, 1, rng);
      in = out;
    }
    down = Conv2d(cfg.backbone.c1, cfg.backbone.c2, 3, 2, 1, rng);
  }

  /// image: 3 x (image_size^2)
  MultiScaleFeatures operator()(const ag::Var& image) const {
    ag::Var x = image;
    int size = image_size;
    for (const auto& conv : stem) {
      x = ag::relu(conv(x, size, size));
      size /= 2;
    }
    FeatureMap x1{x, static_cast<int>(x.rows()), size, size};
    auto y = ag::relu(down(x, size, size));
    FeatureMap x2{y, static_cast<int>(y.rows()), size / 2, size / 2};
    return {x1, x2};
  }

  void collect(ParamList& out, const std::string& prefix) const {
    for (std::size_t i = 0; i < stem.size(); ++i) stem[i].collect(out, prefix + ".stem" + std::to_string(i));
    down.collect(out, prefix + ".down");
  }
};

// ---------------------------------------------------------------------------
// Prototype experts

/// Low-rank expert: 3x3 conv (channels -> rank), 1x1 conv (rank -> channels), bias.
struct PrototypeExpert {
  Conv2d conv_a;
  Conv2d conv_b;
  ag::Var bias;  // channels x 1
  int rank = 0;

  PrototypeExpert() = default;
  PrototypeExpert(int channels, int r, Rng& rng) : rank(r) {
    conv_a = Conv2d(channels, r, 3, 1, 1, rng, false);
    conv_b = Conv2d(r, channels, 1, 1, 0, rng, false);
    bias = ag::param(Mat::Zero(channels, 1));
  }

  int in_channels() const { return conv_a.in_channels; }
  int out_channels() const { return conv_b.out_channels; }

  long parameter_count() const { return conv_a.parameter_count() + conv_b.parameter_count() + static_cast<long>(bias.rows()); }

  void collect(ParamList& out, const std::string& prefix) const {
    conv_a.collect(out, prefix + ".a");
    conv_b.collect(out, prefix + ".b");
    out.push_back({prefix + ".bias", bias});
  }
};

inline ag::Var expert_forward(const FeatureMap& x, const PrototypeExpert& e) {
  if (x.channels != e.in_channels() || e.out_channels() != x.channels) {
    throw ShapeError("expert: input has " + std::to_string(x.channels) + " channels, expert expects " +
                     std::to_string(e.in_channels()) + " -> " + std::to_string(e.out_channels()));
  }
  auto h = e.conv_a(x.data, x.height, x.width);
  auto y = e.conv_b(h, x.height, x.width);
  return ag::add_col(y, e.bias);
}

// ---------------------------------------------------------------------------
// Routing

struct GatingDecision {
  Mat logits;                     // 1 x N, pre-softmax
  ag::Var distribution;           // 1 x N softmax
  std::vector<int> selected;      // K expert indices, descending score
  std::vector<double> scores;     // distribution at `selected`

  int expert_count() const { return static_cast<int>(distribution.cols()); }
};

/// Indices of the k largest entries, descending; equal values keep the lower index first.
inline std::vector<int> topk_indices(const Eigen::Ref<const Eigen::RowVectorXd>& values, int k) {
  const int n = static_cast<int>(values.size());
  if (k < 1 || k > n) throw ConfigError("topk: K must lie in [1, N]");
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return values(a) > values(b); });
  idx.resize(k);
  return idx;
}

/// Softmax over pre-gate logits followed by TopK selection.
inline GatingDecision gate_from_logits(const ag::Var& logits, int k) {
  GatingDecision g;
  g.logits = logits.value();
  g.distribution = ag::softmax_rows(logits);
  g.selected = topk_indices(g.distribution.value().row(0), k);
  for (int i : g.selected) g.scores.push_back(g.distribution.value()(0, i));
  return g;
}

/// conv3x3 -> MHSA, plus a position-awareness branch, -> 1x1 conv to N -> pool -> softmax -> TopK.
struct Router {
  Conv2d reduce;
  MultiHeadAttention attention;
  Linear position_in;   // C -> 1 per position
  Linear position_out;  // 1 -> N per position
  Linear mix;           // (C/4 + N) -> N, a 1x1 conv over tokens
  int experts = 0;
  int topk = 0;

  Router() = default;
  Router(int channels, int n, int k, int heads, Rng& rng) : experts(n), topk(k) {
    if (k < 1 || k > n) throw ConfigError("router: topk " + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
    const int width = channels / 4;
    reduce = Conv2d(channels, width, 3, 1, 1, rng);
    attention = MultiHeadAttention(width, heads, rng);
    position_in = Linear(channels, 1, rng);
    position_out = Linear(1, n, rng);
    mix = Linear(width + n, n, rng);
  }

  /// Pre-softmax gate logits (1 x N).
  ag::Var logits(const FeatureMap& x) const {
    auto seq = ag::transpose(reduce(x.data, x.height, x.width));  // HW x C/4
    auto context = attention(seq, seq, seq);
    auto tokens = ag::transpose(x.data);  // HW x C
    auto position = position_out(ag::relu(position_in(tokens)));  // HW x N
    std::vector<ag::Var> parts{context, position};
    auto per_position = mix(ag::concat_cols(parts));  // HW x N
    return ag::mean_rows(per_position);
  }

  GatingDecision operator()(const FeatureMap& x) const { return gate_from_logits(logits(x), topk); }

  void collect(ParamList& out, const std::string& prefix) const {
    reduce.collect(out, prefix + ".reduce");
    attention.collect(out, prefix + ".mhsa");
    position_in.collect(out, prefix + ".pos_in");
    position_out.collect(out, prefix + ".pos_out");
    mix.collect(out, prefix + ".mix");
  }
};

inline GatingDecision route(const FeatureMap& x, const Router& router) {
  if (x.channels != router.reduce.in_channels) throw ShapeError("route: channel mismatch");
  return router(x);
}

/// p = [sum_k g_k * E_k(x)] (.) x over the selected experts.
inline FeatureMap extract_prototype(const FeatureMap& x, const std::vector<PrototypeExpert>& experts,
                                    const GatingDecision& gate) {
  if (static_cast<int>(experts.size()) != gate.expert_count()) {
    throw ConfigError("extract_prototype: " + std::to_string(experts.size()) + " experts for a gate over " +
                      std::to_string(gate.expert_count()));
  }
  std::vector<ag::Var> terms;
  terms.reserve(gate.selected.size());
  for (int idx : gate.selected) {
    auto g = ag::element(gate.distribution, 0, idx);
    terms.push_back(ag::scale_by(expert_forward(x, experts[idx]), g));
  }
  auto mixed = terms.size() == 1 ? terms[0] : ag::add_n(terms);
  return {ag::mul(mixed, x.data), x.channels, x.height, x.width};
}

/// Router and expert bank for one feature scale.
struct PrototypeExtractor {
  Router router;
  std::vector<PrototypeExpert> experts;

  PrototypeExtractor() = default;
  PrototypeExtractor(int channels, const ModelConfig& cfg, Rng& rng)
      : router(channels, cfg.expert_count, cfg.topk, cfg.router_heads, rng) {
    const int rank = cfg.rank_for(channels);
    for (int i = 0; i < cfg.expert_count; ++i) experts.emplace_back(channels, rank, rng);
  }

  std::pair<FeatureMap, GatingDecision> operator()(const FeatureMap& x) const {
    auto gate = route(x, router);
    auto p = extract_prototype(x, experts, gate);
    return {p, std::move(gate)};
  }

  void collect(ParamList& out, const std::string& prefix) const {
    router.collect(out, prefix + ".router");
    for (std::size_t i = 0; i < experts.size(); ++i) experts[i].collect(out, prefix + ".expert" + std::to_string(i));
  }
};

// ---------------------------------------------------------------------------
// Proto-Encoder

/// Fixed 2-D sine positional encoding for a height x width grid, dim columns.
inline Mat sine_position_encoding(int height, int width, int dim) {
  Mat pe = Mat::Zero(static_cast<Eigen::Index>(height) * width, dim);
  const int per_axis = dim / 2;
  const int freqs = per_axis / 2;
  constexpr double two_pi = 6.283185307179586;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const Eigen::Index row = static_cast<Eigen::Index>(y) * width + x;
      const double py = (y + 0.5) / height * two_pi;
      const double px = (x + 0.5) / width * two_pi;
      for (int f = 0; f < freqs; ++f) {
        const double omega = std::pow(10000.0, -2.0 * f / std::max(1, per_axis));
        pe(row, 2 * f) = std::sin(py * omega);
        pe(row, 2 * f + 1) = std::cos(py * omega);
        pe(row, per_axis + 2 * f) = std::sin(px * omega);
        pe(row, per_axis + 2 * f + 1) = std::cos(px * omega);
      }
    }
  }
  return pe;
}

/// Pre-norm self-attention block.
struct EncoderBlock {
  LayerNorm norm1, norm2;
  MultiHeadAttention attention;
  FeedForward ffn;

  EncoderBlock() = default;
  EncoderBlock(int dim, int heads, int hidden, Rng& rng)
      : norm1(dim), norm2(dim), attention(dim, heads, rng), ffn(dim, hidden, rng) {}

  ag::Var operator()(const ag::Var& x) const {
    auto h = norm1(x);
    auto y = ag::add(x, attention(h, h, h));
    return ag::add(y, ffn(norm2(y)));
  }

  void collect(ParamList& out, const std::string& prefix) const {
    norm1.collect(out, prefix + ".norm1");
    norm2.collect(out, prefix + ".norm2");
    attention.collect(out, prefix + ".attn");
    ffn.collect(out, prefix + ".ffn");
  }
};

/// Aligns both prototype scales to the token width, stacks them and runs
/// L blocks; intermediate block outputs are fused by an MLP scaled by lambda.
struct ProtoEncoder {
  Linear align1, align2;
  std::vector<EncoderBlock> blocks;
  Linear fuse_in, fuse_out;  // (L-1)*c' -> c' -> c'; unused when L == 1
  double fusion_scale = 0.1;
  Mat positions;  // l x c'

  ProtoEncoder() = default;
  ProtoEncoder(const ModelConfig& cfg, Rng& rng) : fusion_scale(cfg.fusion_scale) {
    const int d = cfg.token_channels;
    align1 = Linear(cfg.backbone.c1, d, rng);
    align2 = Linear(cfg.backbone.c2, d, rng);
    for (int i = 0; i < cfg.encoder_depth; ++i) blocks.emplace_back(d, cfg.encoder_heads, cfg.encoder_ffn(), rng);
    if (cfg.encoder_depth > 1) {
      fuse_in = Linear((cfg.encoder_depth - 1) * d, d, rng);
      fuse_out = Linear(d, d, rng);
    }
    Mat pe1 = sine_position_encoding(cfg.backbone.h1, cfg.backbone.w1, d);
    Mat pe2 = sine_position_encoding(cfg.backbone.h2, cfg.backbone.w2, d);
    positions.resize(pe1.rows() + pe2.rows(), d);
    positions << pe1, pe2;
  }

  int depth() const { return static_cast<int>(blocks.size()); }

  /// Tokens before the encoder blocks: l x c'.
  ag::Var tokens(const FeatureMap& p1, const FeatureMap& p2) const {
    std::vector<ag::Var> parts{align1(ag::transpose(p1.data)), align2(ag::transpose(p2.data))};
    auto stacked = ag::concat_rows(parts);
    if (stacked.rows() != positions.rows()) throw ShapeError("proto-encoder: token count does not match configured scales");
    return ag::add_const(stacked, positions);
  }

  ag::Var operator()(const FeatureMap& p1, const FeatureMap& p2) const {
    auto x = tokens(p1, p2);
    std::vector<ag::Var> intermediate;
    for (int i = 0; i + 1 < depth(); ++i) {
      x = blocks[i](x);
      intermediate.push_back(x);
    }
    auto last = blocks.back()(x);
    if (intermediate.empty() || fusion_scale == 0.0) return last;
    auto fused = fuse_out(ag::relu(fuse_in(ag::concat_cols(intermediate))));
    return ag::add(ag::scale(fused, fusion_scale), last);
  }

  void collect(ParamList& out, const std::string& prefix) const {
    align1.collect(out, prefix + ".align1");
    align2.collect(out, prefix + ".align2");
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(out, prefix + ".block" + std::to_string(i));
    if (fuse_in.weight.defined()) {
      fuse_in.collect(out, prefix + ".fuse_in");
      fuse_out.collect(out, prefix + ".fuse_out");
    }
  }
};

}  // namespace protoformer
