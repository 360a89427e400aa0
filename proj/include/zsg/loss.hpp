#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "anchor.hpp"
#include "ops.hpp"

namespace zsg {

enum class LossVariant { Focal, Bce, Softmax };

inline std::string to_string(LossVariant v) {
  switch (v) {
    case LossVariant::Focal: return "focal";
    case LossVariant::Bce: return "bce";
    case LossVariant::Softmax: return "softmax";
  }
  return "focal";
}

inline LossVariant parse_loss_variant(const std::string& s) {
  if (s == "focal") return LossVariant::Focal;
  if (s == "bce") return LossVariant::Bce;
  if (s == "softmax") return LossVariant::Softmax;
  fail(ErrorClass::ConfigError, "unknown loss variant '" + s + "'");
}

struct LossConfig {
  double alpha = 0.25;
  double gamma = 2.0;
  double lambda = 1.0;
  LossVariant variant = LossVariant::Focal;

  void validate() const {
    require(alpha > 0 && alpha < 1, ErrorClass::ConfigError, "loss: alpha must lie in (0,1)");
    require(gamma >= 0, ErrorClass::ConfigError, "loss: gamma must be >= 0");
    require(lambda >= 0, ErrorClass::ConfigError, "loss: lambda must be >= 0");
  }
};

inline constexpr double kProbClamp = 1e-6;

inline double clamp_probability(double p) { return std::clamp(p, kProbClamp, 1.0 - kProbClamp); }

/// Focal loss of one prediction: -a (1-p)^g log p for foreground,
/// -(1-a) p^g log(1-p) for background.
inline double focal_loss(double p, bool foreground, double alpha, double gamma) {
  p = clamp_probability(p);
  if (foreground) return -alpha * std::pow(1.0 - p, gamma) * std::log(p);
  return -(1.0 - alpha) * std::pow(p, gamma) * std::log(1.0 - p);
}

inline double binary_cross_entropy(double p, bool foreground) {
  p = clamp_probability(p);
  return foreground ? -std::log(p) : -std::log(1.0 - p);
}

/// 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise.
inline double smooth_l1(double x) {
  const double a = std::abs(x);
  return a < 1.0 ? 0.5 * x * x : a - 0.5;
}

template <class T>
struct LossBreakdown {
  ad::Tensor<T> l_pred;
  ad::Tensor<T> l_reg;
  ad::Tensor<T> total;
  std::size_t num_foreground = 0;
};

namespace detail {

// p = clamp(sigmoid(z)); returns p and dp/dz (zero where the clamp is active).
template <class T>
std::pair<T, T> clamped_sigmoid(ad::Tape<T>& tape, T z) {
  const T p = ad::detail::stable_sigmoid(z);
  const T lo = static_cast<T>(kProbClamp), hi = static_cast<T>(1.0 - kProbClamp);
  const bool inside = p > lo && p < hi;
  tape.log_branch(inside);
  if (!inside) return {std::clamp(p, lo, hi), T(0)};
  return {p, p * (T(1) - p)};
}

template <class T>
std::pair<T, T> focal_term(T p, bool fg, T alpha, T gamma) {
  // value and d(value)/dp
  if (fg) {
    const T q = T(1) - p;
    const T qg = std::pow(q, gamma);
    const T value = -alpha * qg * std::log(p);
    T dp = -alpha * qg / p;
    if (gamma != T(0)) dp += alpha * gamma * std::pow(q, gamma - T(1)) * std::log(p);
    return {value, dp};
  }
  const T pg = std::pow(p, gamma);
  const T value = -(T(1) - alpha) * pg * std::log(T(1) - p);
  T dp = (T(1) - alpha) * pg / (T(1) - p);
  if (gamma != T(0)) dp -= (T(1) - alpha) * gamma * std::pow(p, gamma - T(1)) * std::log(T(1) - p);
  return {value, dp};
}

}  // namespace detail

/// Sum of focal terms over all anchors (not normalized).
template <class T>
ad::Tensor<T> focal_sum(ad::Tape<T>& tape, const ad::Tensor<T>& logits,
                        const std::vector<unsigned char>& foreground, T alpha, T gamma) {
  require(logits.size() == foreground.size(), ErrorClass::InvalidInput, "focal_sum: mask length mismatch");
  auto out = ad::make_output(tape, ad::Shape{1}, {&logits});
  std::vector<T> dz(logits.size());
  T acc = 0;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    const auto [p, dpdz] = detail::clamped_sigmoid(tape, logits[j]);
    const auto [v, dvdp] = detail::focal_term(p, foreground[j] != 0, alpha, gamma);
    acc += v;
    dz[j] = dvdp * dpdz;
  }
  out[0] = acc;
  if (out.requires_grad()) {
    tape.record([zn = logits.shared_node(), yn = out.shared_node(), dz = std::move(dz)] {
      for (std::size_t j = 0; j < dz.size(); ++j) zn->grad[j] += yn->grad[0] * dz[j];
    });
  }
  return out;
}

/// Mean binary cross-entropy over all anchors.
template <class T>
ad::Tensor<T> bce_mean(ad::Tape<T>& tape, const ad::Tensor<T>& logits, const std::vector<unsigned char>& foreground) {
  require(logits.size() == foreground.size(), ErrorClass::InvalidInput, "bce_mean: mask length mismatch");
  auto out = ad::make_output(tape, ad::Shape{1}, {&logits});
  const T inv_n = T(1) / static_cast<T>(logits.size());
  std::vector<T> dz(logits.size());
  T acc = 0;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    const auto [p, dpdz] = detail::clamped_sigmoid(tape, logits[j]);
    if (foreground[j]) {
      acc += -std::log(p);
      dz[j] = -dpdz / p * inv_n;
    } else {
      acc += -std::log(T(1) - p);
      dz[j] = dpdz / (T(1) - p) * inv_n;
    }
  }
  out[0] = acc * inv_n;
  if (out.requires_grad()) {
    tape.record([zn = logits.shared_node(), yn = out.shared_node(), dz = std::move(dz)] {
      for (std::size_t j = 0; j < dz.size(); ++j) zn->grad[j] += yn->grad[0] * dz[j];
    });
  }
  return out;
}

/// Cross-entropy of a softmax over all anchor logits with one target anchor.
template <class T>
ad::Tensor<T> softmax_cross_entropy(ad::Tape<T>& tape, const ad::Tensor<T>& logits, std::size_t target) {
  require(target < logits.size(), ErrorClass::InvalidInput, "softmax_cross_entropy: target out of range");
  auto out = ad::make_output(tape, ad::Shape{1}, {&logits});
  T mx = logits[0];
  for (std::size_t j = 1; j < logits.size(); ++j) mx = std::max(mx, logits[j]);
  T z = 0;
  for (std::size_t j = 0; j < logits.size(); ++j) z += std::exp(logits[j] - mx);
  const T lse = mx + std::log(z);
  out[0] = lse - logits[target];
  if (out.requires_grad()) {
    tape.record([zn = logits.shared_node(), yn = out.shared_node(), lse, target] {
      const T g = yn->grad[0];
      for (std::size_t j = 0; j < zn->value.size(); ++j) {
        const T s = std::exp(zn->value[j] - lse);
        zn->grad[j] += g * (s - (j == target ? T(1) : T(0)));
      }
    });
  }
  return out;
}

/// Sum over foreground anchors of the smooth-L1 distance between predicted
/// and target regression parameters (4 components each).
template <class T>
ad::Tensor<T> smooth_l1_sum(ad::Tape<T>& tape, const ad::Tensor<T>& regression, const MatchResult& match) {
  require(regression.size() == 4 * match.foreground.size(), ErrorClass::InvalidInput,
          "smooth_l1_sum: regression tensor must hold 4 values per anchor");
  auto out = ad::make_output(tape, ad::Shape{1}, {&regression});
  std::vector<std::pair<std::size_t, T>> dr;
  T acc = 0;
  for (std::size_t m = 0; m < match.members.size(); ++m) {
    const std::size_t j = match.members[m];
    const auto& t = match.targets[m];
    const double target[4] = {t.tx, t.ty, t.tw, t.th};
    for (int k = 0; k < 4; ++k) {
      const T x = regression[4 * j + k] - static_cast<T>(target[k]);
      const bool quad = std::abs(x) < T(1);
      tape.log_branch(quad);
      acc += quad ? T(0.5) * x * x : std::abs(x) - T(0.5);
      dr.emplace_back(4 * j + k, quad ? x : (x > 0 ? T(1) : T(-1)));
    }
  }
  out[0] = acc;
  if (out.requires_grad()) {
    tape.record([rn = regression.shared_node(), yn = out.shared_node(), dr = std::move(dr)] {
      for (const auto& [i, d] : dr) rn->grad[i] += yn->grad[0] * d;
    });
  }
  return out;
}

/// Classification term for the configured variant: focal sum over all
/// anchors divided by |G|, mean BCE, or softmax cross-entropy against the
/// best-IoU anchor.
template <class T>
ad::Tensor<T> classification_loss(ad::Tape<T>& tape, const ad::Tensor<T>& logits, const MatchResult& match,
                                  const LossConfig& config) {
  require(!match.members.empty(), ErrorClass::ContractViolation, "loss: empty foreground set");
  switch (config.variant) {
    case LossVariant::Focal:
      return ad::scale(tape,
                       focal_sum(tape, logits, match.foreground, static_cast<T>(config.alpha),
                                 static_cast<T>(config.gamma)),
                       T(1) / static_cast<T>(match.members.size()));
    case LossVariant::Bce: return bce_mean(tape, logits, match.foreground);
    case LossVariant::Softmax: return softmax_cross_entropy(tape, logits, match.best_anchor);
  }
  fail(ErrorClass::ConfigError, "loss: unknown variant");
}

/// L = L_pred + lambda * L_reg for one sample.
template <class T>
LossBreakdown<T> grounding_loss(ad::Tape<T>& tape, const ad::Tensor<T>& logits, const ad::Tensor<T>& regression,
                                const MatchResult& match, const LossConfig& config) {
  config.validate();
  require(!match.members.empty(), ErrorClass::ContractViolation, "grounding_loss: |G| = 0");
  require(logits.size() == match.foreground.size(), ErrorClass::InvalidInput,
          "grounding_loss: logits do not match the anchor count");
  LossBreakdown<T> out;
  out.num_foreground = match.members.size();
  out.l_pred = classification_loss(tape, logits, match, config);
  out.l_reg = ad::scale(tape, smooth_l1_sum(tape, regression, match), T(1) / static_cast<T>(out.num_foreground));
  out.total = ad::add(tape, out.l_pred, ad::scale(tape, out.l_reg, static_cast<T>(config.lambda)));
  return out;
}

}  // namespace zsg
