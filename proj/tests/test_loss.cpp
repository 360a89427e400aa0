#include <catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "zsg/loss.hpp"
#include "zsg/rng.hpp"

using namespace zsg;
using Catch::Approx;
using TD = ad::Tensor<double>;

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

MatchResult match_of(const std::vector<unsigned char>& fg, std::size_t best) {
  MatchResult m;
  m.foreground = fg;
  for (std::size_t j = 0; j < fg.size(); ++j)
    if (fg[j]) {
      m.members.push_back(j);
      m.targets.push_back({});
    }
  m.best_anchor = best;
  return m;
}

double eval_loss(const std::vector<double>& logits, const std::vector<double>& reg, const MatchResult& m,
                 const LossConfig& cfg, double* l_pred = nullptr) {
  ad::Tape<double> tape(false);
  TD z(ad::Shape{1, logits.size()}, logits);
  TD r(ad::Shape{1, logits.size(), 4}, reg);
  auto out = grounding_loss(tape, z, r, m, cfg);
  if (l_pred) *l_pred = out.l_pred.item();
  return out.total.item();
}

}  // namespace

TEST_CASE("focal loss closed forms", "[loss][focal]") {
  REQUIRE(focal_loss(0.5, true, 0.25, 2.0) == Approx(0.25 * 0.25 * std::log(2.0)).margin(1e-9));
  REQUIRE(focal_loss(0.5, true, 0.25, 2.0) == Approx(0.043322).margin(1e-6));
  REQUIRE(focal_loss(1.0, true, 0.25, 2.0) < 1e-12);
  for (double p : {1e-3, 0.1, 0.3, 0.5, 0.77, 0.999}) {
    for (bool g : {true, false}) {
      REQUIRE(focal_loss(p, g, 0.5, 0.0) == Approx(0.5 * binary_cross_entropy(p, g)).epsilon(1e-14));
    }
  }
}

TEST_CASE("smooth L1 closed forms", "[loss][smooth_l1]") {
  REQUIRE(smooth_l1(0.0) == 0.0);
  REQUIRE(std::abs(smooth_l1(0.5) - 0.125) < 1e-12);
  REQUIRE(std::abs(smooth_l1(2.0) - 1.5) < 1e-12);
  REQUIRE(smooth_l1(-2.0) == smooth_l1(2.0));
  REQUIRE(smooth_l1(1.0) == Approx(0.5));
}

TEST_CASE("ablation variants", "[loss][variants]") {
  LossConfig cfg;
  cfg.variant = LossVariant::Softmax;
  REQUIRE(eval_loss({3.7}, {0, 0, 0, 0}, match_of({1}, 0), cfg) == Approx(0.0).margin(1e-12));
  cfg.variant = LossVariant::Bce;
  double lp = 0;
  eval_loss({0, 0, 0, 0}, std::vector<double>(16, 0.0), match_of({0, 1, 0, 0}, 1), cfg, &lp);
  REQUIRE(lp == Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("3-anchor hand instance", "[loss][oracle]") {
  const std::vector<double> z{0.3, -1.2, 2.0};
  const std::vector<double> reg{0, 0, 0, 0, 0.5, -2.0, 0.1, 0, 0, 0, 0, 0};
  auto m = match_of({0, 1, 0}, 1);
  m.targets[0] = {0.0, 0.0, 0.1, 0.0};
  // hand sum: focal over the three anchors, one foreground; smooth-L1 of (0.5, -2, 0, 0)
  const double expected = focal_loss(sigmoid(0.3), false, 0.25, 2) + focal_loss(sigmoid(-1.2), true, 0.25, 2) +
                          focal_loss(sigmoid(2.0), false, 0.25, 2) + 0.125 + 1.5;
  REQUIRE(eval_loss(z, reg, m, LossConfig{}) == Approx(expected).epsilon(1e-12));
}

TEST_CASE("near-perfect predictions give near-zero loss", "[loss]") {
  std::vector<double> z(50, -40.0);
  z[7] = 40.0;
  std::vector<unsigned char> fg(50, 0);
  fg[7] = 1;
  REQUIRE(eval_loss(z, std::vector<double>(200, 0.0), match_of(fg, 7), LossConfig{}) < 1e-6);
}

TEST_CASE("loss matches per-anchor summation on random instances", "[loss][oracle]") {
  Rng rng(31);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng.below(40);
    std::vector<double> z(n), reg(4 * n);
    std::vector<unsigned char> fg(n, 0);
    for (auto& v : z) v = 3 * rng.normal();
    for (auto& v : reg) v = 2 * rng.normal();
    const std::size_t k = 1 + rng.below(std::min<std::size_t>(n, 5));
    for (std::size_t i = 0; i < k; ++i) fg[rng.below(n)] = 1;
    std::size_t best = 0;
    while (!fg[best]) ++best;
    auto m = match_of(fg, best);
    for (auto& t : m.targets) t = {rng.normal(), rng.normal(), rng.normal(), rng.normal()};
    const double g = static_cast<double>(m.members.size());

    double reg_sum = 0;
    for (std::size_t q = 0; q < m.members.size(); ++q) {
      const std::size_t j = m.members[q];
      const double t[4] = {m.targets[q].tx, m.targets[q].ty, m.targets[q].tw, m.targets[q].th};
      for (int c = 0; c < 4; ++c) reg_sum += smooth_l1(reg[4 * j + c] - t[c]);
    }
    double focal = 0, bce = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const double p = clamp_probability(sigmoid(z[j]));
      focal += fg[j] ? -0.25 * (1 - p) * (1 - p) * std::log(p) : -0.75 * p * p * std::log(1 - p);
      bce += fg[j] ? -std::log(p) : -std::log(1 - p);
    }
    double zmax = z[0];
    for (double v : z) zmax = std::max(zmax, v);
    double se = 0;
    for (double v : z) se += std::exp(v - zmax);
    const double softmax = -(z[best] - zmax - std::log(se));

    LossConfig cfg;
    REQUIRE(eval_loss(z, reg, m, cfg) == Approx(focal / g + reg_sum / g).epsilon(1e-12));
    cfg.variant = LossVariant::Bce;
    REQUIRE(eval_loss(z, reg, m, cfg) == Approx(bce / n + reg_sum / g).epsilon(1e-12));
    cfg.variant = LossVariant::Softmax;
    REQUIRE(eval_loss(z, reg, m, cfg) == Approx(softmax + reg_sum / g).epsilon(1e-12));
  }
}

TEST_CASE("padding with confident background leaves the classification term unchanged", "[loss][property]") {
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 3 + rng.below(20);
    std::vector<double> z(n);
    std::vector<unsigned char> fg(n, 0);
    for (auto& v : z) v = 2 * rng.normal();
    fg[rng.below(n)] = 1;
    fg[rng.below(n)] = 1;
    std::size_t best = 0;
    while (!fg[best]) ++best;
    double base = 0, padded = 0;
    eval_loss(z, std::vector<double>(4 * n, 0.0), match_of(fg, best), LossConfig{}, &base);
    const std::size_t extra = 10 + rng.below(5000);
    z.insert(z.end(), extra, -30.0);
    fg.insert(fg.end(), extra, 0);
    eval_loss(z, std::vector<double>(4 * z.size(), 0.0), match_of(fg, best), LossConfig{}, &padded);
    REQUIRE(std::abs(padded - base) < 1e-6);
  }
}

TEST_CASE("loss errors", "[loss][errors]") {
  ad::Tape<double> tape(false);
  TD z(ad::Shape{1, 3}), r(ad::Shape{1, 3, 4});
  MatchResult empty;
  empty.foreground.assign(3, 0);
  try {
    grounding_loss(tape, z, r, empty, LossConfig{});
    FAIL("expected an error");
  } catch (const Error& e) {
    REQUIRE(e.error_class() == ErrorClass::ContractViolation);
  }
  LossConfig bad;
  bad.alpha = 1.5;
  REQUIRE_THROWS_AS(bad.validate(), Error);
  REQUIRE_THROWS_AS(parse_loss_variant("hinge"), Error);
}
