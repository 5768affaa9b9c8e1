#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "cdpo/diffcore.hpp"

namespace cdpo {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// AdamW: bias-corrected Adam moments with weight decay applied directly to
// the parameters rather than folded into the gradient. Moments are keyed by
// parameter name and created zero on first sight.
class AdamW {
 public:
  explicit AdamW(AdamWConfig config = {}) : config_(config) {}

  void step(std::span<diff::Parameter* const> params, double lr) {
    for (const diff::Parameter* p : params) {
      if (!diff::all_finite(p->grad)) {
        throw NumericError("AdamW: non-finite gradient in parameter '" + p->name + "'");
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (diff::Parameter* p : params) {
      auto [it, inserted] = moments_.try_emplace(p->name);
      Moments& m = it->second;
      if (inserted) {
        m.first = diff::Tensor(p->value.rows(), p->value.cols());
        m.second = diff::Tensor(p->value.rows(), p->value.cols());
      }
      auto& w = p->value;
      const auto& g = p->grad;
      for (std::size_t i = 0; i < w.size(); ++i) {
        w[i] -= lr * config_.weight_decay * w[i];
        m.first[i] = config_.beta1 * m.first[i] + (1.0 - config_.beta1) * g[i];
        m.second[i] = config_.beta2 * m.second[i] + (1.0 - config_.beta2) * g[i] * g[i];
        const double mhat = m.first[i] / bc1;
        const double vhat = m.second[i] / bc2;
        w[i] -= lr * mhat / (std::sqrt(vhat) + config_.eps);
      }
    }
  }

  std::int64_t steps() const { return t_; }
  const AdamWConfig& config() const { return config_; }

  // Flat export for checkpoints: "<prefix>m/<name>", "<prefix>v/<name>" and
  // "<prefix>t" (1x1).
  std::map<std::string, diff::Tensor> export_state(const std::string& prefix) const {
    std::map<std::string, diff::Tensor> out;
    for (const auto& [name, m] : moments_) {
      out.emplace(prefix + "m/" + name, m.first);
      out.emplace(prefix + "v/" + name, m.second);
    }
    out.emplace(prefix + "t", diff::Tensor::scalar(static_cast<double>(t_)));
    return out;
  }

  void import_state(const std::map<std::string, diff::Tensor>& tensors, const std::string& prefix) {
    moments_.clear();
    auto t = tensors.find(prefix + "t");
    if (t == tensors.end()) throw FormatError("AdamW: missing step counter '" + prefix + "t'");
    t_ = static_cast<std::int64_t>(t->second.item());
    const std::string mp = prefix + "m/";
    for (const auto& [key, value] : tensors) {
      if (key.rfind(mp, 0) != 0) continue;
      const std::string name = key.substr(mp.size());
      auto v = tensors.find(prefix + "v/" + name);
      if (v == tensors.end()) throw FormatError("AdamW: missing second moment for '" + name + "'");
      moments_[name] = {value, v->second};
    }
  }

 private:
  using Moments = std::pair<diff::Tensor, diff::Tensor>;
  AdamWConfig config_;
  std::map<std::string, Moments> moments_;
  std::int64_t t_ = 0;
};

inline double global_grad_norm(std::span<diff::Parameter* const> params) {
  double sq = 0.0;
  for (const diff::Parameter* p : params)
    for (double g : p->grad.data()) sq += g * g;
  return std::sqrt(sq);
}

// Rescales all gradients so their joint L2 norm is at most max_norm.
// Returns the norm before clipping.
inline double clip_grad_norm(std::span<diff::Parameter* const> params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / (norm + 1e-12);
    for (diff::Parameter* p : params)
      for (double& g : p->grad.data()) g *= s;
  }
  return norm;
}

// Cosine decay from lr_max at step 0 to zero at step total-1.
inline double cosine_lr(double lr_max, std::int64_t step, std::int64_t total) {
  if (total <= 1) return lr_max;
  const double frac = static_cast<double>(step) / static_cast<double>(total - 1);
  return lr_max * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(frac, 1.0)));
}

}  // namespace cdpo
