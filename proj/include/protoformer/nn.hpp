#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "protoformer/autograd.hpp"

namespace protoformer {

using Rng = std::mt19937_64;

struct NamedParam {
  std::string name;
  ag::Var var;
};
using ParamList = std::vector<NamedParam>;

inline Mat uniform_init(Eigen::Index rows, Eigen::Index cols, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

inline Mat normal_init(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

/// y = x W + b on token matrices (tokens x in -> tokens x out).
struct Linear {
  ag::Var weight;  // in x out
  ag::Var bias;    // 1 x out

  Linear() = default;
  Linear(int in, int out, Rng& rng, bool with_bias = true) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    weight = ag::param(uniform_init(in, out, bound, rng));
    if (with_bias) bias = ag::param(uniform_init(1, out, bound, rng));
  }

  int in_features() const { return static_cast<int>(weight.rows()); }
  int out_features() const { return static_cast<int>(weight.cols()); }

  ag::Var operator()(const ag::Var& x) const {
    if (x.cols() != weight.rows()) {
      throw ShapeError("linear: input has " + std::to_string(x.cols()) + " features, expected " +
                       std::to_string(weight.rows()));
    }
    auto y = ag::matmul(x, weight);
    return bias.defined() ? ag::add_row(y, bias) : y;
  }

  void collect(ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    if (bias.defined()) out.push_back({prefix + ".bias", bias});
  }
};

/// Square-kernel convolution over C x (H*W) feature maps.
struct Conv2d {
  ag::Var weight;  // out x in*k*k
  ag::Var bias;    // out x 1
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 3;
  int stride = 1;
  int padding = 1;

  Conv2d() = default;
  Conv2d(int in, int out, int k, int s, int pad, Rng& rng, bool with_bias = true)
      : in_channels(in), out_channels(out), kernel(k), stride(s), padding(pad) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in * k * k));
    weight = ag::param(uniform_init(out, static_cast<Eigen::Index>(in) * k * k, bound, rng));
    if (with_bias) bias = ag::param(uniform_init(out, 1, bound, rng));
  }

  ag::ConvGeometry geometry(int height, int width) const {
    return {in_channels, height, width, kernel, stride, padding};
  }

  ag::Var operator()(const ag::Var& x, int height, int width) const {
    if (x.rows() != in_channels) {
      throw ShapeError("conv2d: input has " + std::to_string(x.rows()) + " channels, expected " +
                       std::to_string(in_channels));
    }
    auto y = ag::conv2d(x, weight, geometry(height, width));
    return bias.defined() ? ag::add_col(y, bias) : y;
  }

  long parameter_count() const {
    return static_cast<long>(weight.value().size()) + (bias.defined() ? static_cast<long>(bias.value().size()) : 0L);
  }

  void collect(ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    if (bias.defined()) out.push_back({prefix + ".bias", bias});
  }
};

struct LayerNorm {
  ag::Var gamma;
  ag::Var beta;

  LayerNorm() = default;
  explicit LayerNorm(int dim) : gamma(ag::param(Mat::Ones(1, dim))), beta(ag::param(Mat::Zero(1, dim))) {}

  ag::Var operator()(const ag::Var& x) const { return ag::layer_norm_rows(x, gamma, beta); }

  void collect(ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
  }
};

/// Multi-head scaled dot-product attention with Q/K/V and output maps.
struct MultiHeadAttention {
  Linear q_proj, k_proj, v_proj, out_proj;
  int heads = 1;
  int dim = 0;

  MultiHeadAttention() = default;
  MultiHeadAttention(int d, int h, Rng& rng) : heads(h), dim(d) {
    if (h <= 0 || d % h != 0) {
      throw ConfigError("attention: dim " + std::to_string(d) + " not divisible by " + std::to_string(h) + " heads");
    }
    q_proj = Linear(d, d, rng);
    k_proj = Linear(d, d, rng);
    v_proj = Linear(d, d, rng);
    out_proj = Linear(d, d, rng);
  }

  /// query: n x d, key/value: m x d. Optionally records per-head weights.
  ag::Var operator()(const ag::Var& query, const ag::Var& key, const ag::Var& value,
                     std::vector<Mat>* weights = nullptr) const {
    auto q = q_proj(query);
    auto k = k_proj(key);
    auto v = v_proj(value);
    const int hd = dim / heads;
    const double inv = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<ag::Var> outs;
    outs.reserve(heads);
    for (int h = 0; h < heads; ++h) {
      auto qh = heads == 1 ? q : ag::slice_cols(q, h * hd, hd);
      auto kh = heads == 1 ? k : ag::slice_cols(k, h * hd, hd);
      auto vh = heads == 1 ? v : ag::slice_cols(v, h * hd, hd);
      auto attn = ag::softmax_rows(ag::scale(ag::matmul_nt(qh, kh), inv));
      if (weights) weights->push_back(attn.value());
      outs.push_back(ag::matmul(attn, vh));
    }
    auto merged = heads == 1 ? outs[0] : ag::concat_cols(outs);
    return out_proj(merged);
  }

  void collect(ParamList& out, const std::string& prefix) const {
    q_proj.collect(out, prefix + ".q");
    k_proj.collect(out, prefix + ".k");
    v_proj.collect(out, prefix + ".v");
    out_proj.collect(out, prefix + ".out");
  }
};

struct FeedForward {
  Linear fc1, fc2;

  FeedForward() = default;
  FeedForward(int dim, int hidden, Rng& rng) : fc1(dim, hidden, rng), fc2(hidden, dim, rng) {}

  ag::Var operator()(const ag::Var& x) const { return fc2(ag::relu(fc1(x))); }

  void collect(ParamList& out, const std::string& prefix) const {
    fc1.collect(out, prefix + ".fc1");
    fc2.collect(out, prefix + ".fc2");
  }
};

inline long parameter_count(const ParamList& params) {
  long n = 0;
  for (const auto& p : params) n += static_cast<long>(p.var.value().size());
  return n;
}

inline void zero_grads(ParamList& params) {
  for (auto& p : params) p.var.zero_grad();
}

}  // namespace protoformer
