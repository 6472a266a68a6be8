// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "muap/tensor.hpp"

namespace muap {

enum class MetaOptimizer { kAdam, kSgd };

inline const char* optimizer_name(MetaOptimizer o) { return o == MetaOptimizer::kAdam ? "adam" : "sgd"; }

inline MetaOptimizer parse_optimizer(const std::string& s) {
  if (s == "adam") return MetaOptimizer::kAdam;
  if (s == "sgd") return MetaOptimizer::kSgd;
  throw InvalidArgument("unknown optimizer '" + s + "' (expected adam or sgd)");
}

/// Adam (beta1 0.9, beta2 0.999, eps 1e-8, bias-corrected) or plain
/// p <- p - lr * g over a fixed list of tensors.
class ParamOptimizer {
 public:
  ParamOptimizer(MetaOptimizer kind, double lr) : kind_(kind), lr_(lr) {}

  void step(std::vector<Tensor>& params, const std::vector<Tensor>& grads) {
    if (grads.size() != params.size()) throw InvalidArgument("optimizer got mismatched gradient list");
    if (m_.empty()) {
      for (const Tensor& p : params) {
        m_.emplace_back(p.numel(), 0.0);
        v_.emplace_back(p.numel(), 0.0);
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      std::vector<float> p = params[k].vec();
      auto g = grads[k].data();
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g[i];
        if (kind_ == MetaOptimizer::kSgd) {
          p[i] = static_cast<float>(p[i] - lr_ * gi);
          continue;
        }
        m_[k][i] = kBeta1 * m_[k][i] + (1.0 - kBeta1) * gi;
        v_[k][i] = kBeta2 * v_[k][i] + (1.0 - kBeta2) * gi * gi;
        p[i] = static_cast<float>(p[i] - lr_ * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + kEps));
      }
      params[k] = Tensor(params[k].shape(), std::move(p));
    }
  }

 private:
  static constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  MetaOptimizer kind_;
  double lr_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace muap
