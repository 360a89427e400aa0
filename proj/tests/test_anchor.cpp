#include <catch_amalgamated.hpp>

#include <vector>

#include "zsg/anchor.hpp"
#include "zsg/rng.hpp"

using namespace zsg;
using Catch::Approx;

TEST_CASE("anchor counts", "[anchor]") {
  const auto cfg = AnchorConfig::for_strides({8, 16, 32});
  REQUIRE(generate_anchors({32, 32}, {{0, 8, 4, 4}}, cfg).size() == 144);
  const auto specs = pyramid_specs({64, 64}, 3);
  REQUIRE(specs.size() == 3);
  REQUIRE(specs[0].width == 8);
  REQUIRE(specs[1].width == 4);
  REQUIRE(specs[2].width == 2);
  const auto set = generate_anchors({64, 64}, specs, cfg);
  REQUIRE(set.size() == 756);
  REQUIRE(set.level_offset == std::vector<std::size_t>{0, 576, 720, 756});
}

TEST_CASE("first anchor geometry", "[anchor]") {
  AnchorConfig cfg;
  cfg.base_size = {32};
  const auto set = generate_anchors({64, 64}, {{0, 8, 8, 8}}, cfg);
  const Box& a = set.boxes[0];
  REQUIRE(a.center_x() == Approx(4.0));
  REQUIRE(a.center_y() == Approx(4.0));
  REQUIRE(a.width() == Approx(32.0));
  REQUIRE(a.height() == Approx(32.0));
  REQUIRE(set.owner[0].slot == 0);
  // slot = scale index * 3 + ratio index
  const Box& s4 = set.boxes[4];
  REQUIRE(s4.width() / s4.height() == Approx(0.5));
  REQUIRE(std::sqrt(s4.width() * s4.height()) == Approx(32.0 * std::pow(2.0, 1.0 / 3.0)));
}

TEST_CASE("anchor errors", "[anchor][errors]") {
  const auto cfg = AnchorConfig::for_strides({8});
  REQUIRE_THROWS_AS(generate_anchors({64, 64}, {{0, 8, 0, 8}}, cfg), Error);
  REQUIRE_THROWS_AS(match_anchors(generate_anchors({64, 64}, {{0, 8, 8, 8}}, cfg), Box{1, 1, 1, 5}), Error);
}

TEST_CASE("matching hand cases", "[anchor][match]") {
  const auto set = generate_anchors({64, 64}, pyramid_specs({64, 64}, 3), AnchorConfig::for_strides({8, 16, 32}));
  const auto m = match_anchors(set, set.boxes[100]);
  REQUIRE(m.foreground[100] == 1);
  REQUIRE(!m.forced);

  // far outside the image: every IoU is 0, so anchor 0 is forced in
  const auto far = match_anchors(set, Box{500, 500, 510, 510});
  REQUIRE(far.forced);
  REQUIRE(far.members == std::vector<std::size_t>{0});
  REQUIRE(far.best_anchor == 0);
}

TEST_CASE("matching equals a brute-force IoU filter", "[anchor][match][oracle]") {
  Rng rng(41);
  for (int trial = 0; trial < 1000; ++trial) {
    // 500 random anchors
    AnchorSet set;
    for (int j = 0; j < 500; ++j) {
      const double x = rng.uniform(0, 60), y = rng.uniform(0, 60);
      set.boxes.push_back({x, y, x + rng.uniform(2, 30), y + rng.uniform(2, 30)});
    }
    const double gx = rng.uniform(0, 50), gy = rng.uniform(0, 50);
    const Box gt{gx, gy, gx + rng.uniform(4, 30), gy + rng.uniform(4, 30)};
    const auto m = match_anchors(set, gt, 0.5);
    std::vector<std::size_t> expected;
    std::size_t best = 0;
    for (std::size_t j = 0; j < set.size(); ++j) {
      const Box& a = set.boxes[j];
      const double iw = std::max(0.0, std::min(a.x2, gt.x2) - std::max(a.x1, gt.x1));
      const double ih = std::max(0.0, std::min(a.y2, gt.y2) - std::max(a.y1, gt.y1));
      const double v = iw * ih / (a.width() * a.height() + gt.width() * gt.height() - iw * ih);
      if (v >= 0.5) expected.push_back(j);
      if (v > iou(set.boxes[best], gt)) best = j;
    }
    if (expected.empty()) expected.push_back(best);
    REQUIRE(m.members == expected);
    REQUIRE(m.members.size() >= 1);
    for (std::size_t k = 0; k < m.members.size(); ++k) {
      const Box r = decode_regression(set.boxes[m.members[k]], m.targets[k]);
      REQUIRE(r.x1 == Approx(gt.x1).margin(1e-9));
      REQUIRE(r.y2 == Approx(gt.y2).margin(1e-9));
    }
  }
}
