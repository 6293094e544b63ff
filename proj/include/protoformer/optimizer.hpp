#pragma once

#include <cmath>
#include <vector>

#include "protoformer/nn.hpp"

namespace protoformer {

/// Adam with decoupled weight decay.
class AdamW {
 public:
  struct Options {
    double lr = 5e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
    double max_grad_norm = 0.0;  // global L2 clip; 0 disables
  };

  AdamW(ParamList params, Options opt) : params_(std::move(params)), opt_(opt) {
    for (const auto& p : params_) {
      m_.push_back(Mat::Zero(p.var.rows(), p.var.cols()));
      v_.push_back(Mat::Zero(p.var.rows(), p.var.cols()));
    }
  }

  void zero_grad() { zero_grads(params_); }

  /// Global L2 norm of all current gradients.
  double grad_norm() const {
    double sq = 0.0;
    for (const auto& p : params_) {
      if (p.var.grad().size() != 0) sq += p.var.grad().squaredNorm();
    }
    return std::sqrt(sq);
  }

  void step() {
    ++t_;
    if (opt_.max_grad_norm > 0.0) {
      const double norm = grad_norm();
      if (norm > opt_.max_grad_norm) {
        const double s = opt_.max_grad_norm / norm;
        for (auto& p : params_) {
          if (p.var.grad().size() != 0) p.var.mutable_grad() *= s;
        }
      }
    }
    const double bc1 = 1.0 - std::pow(opt_.beta1, t_);
    const double bc2 = 1.0 - std::pow(opt_.beta2, t_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& var = params_[i].var;
      Mat& w = var.mutable_value();
      if (opt_.weight_decay > 0.0) w *= (1.0 - opt_.lr * opt_.weight_decay);
      if (var.grad().size() == 0) continue;
      const Mat& g = var.grad();
      m_[i] = opt_.beta1 * m_[i] + (1.0 - opt_.beta1) * g;
      v_[i] = opt_.beta2 * v_[i] + (1.0 - opt_.beta2) * g.cwiseProduct(g);
      w.array() -= opt_.lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + opt_.eps);
    }
  }

  long steps() const { return t_; }
  const Options& options() const { return opt_; }

 private:
  ParamList params_;
  Options opt_;
  std::vector<Mat> m_, v_;
  long t_ = 0;
};

}  // namespace protoformer
