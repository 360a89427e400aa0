#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <vector>

#include "error.hpp"
#include "geometry.hpp"

namespace zsg {

/// One level of the feature pyramid.
struct FeatureMapSpec {
  int level = 0;
  int stride = 8;
  int height = 0;
  int width = 0;
};

inline constexpr int kAnchorsPerCell = 9;

struct AnchorConfig {
  std::vector<double> base_size;  // pixels, one per level
  std::vector<double> scales{1.0, std::pow(2.0, 1.0 / 3.0), std::pow(2.0, 2.0 / 3.0)};
  std::vector<double> ratios{1.0, 0.5, 2.0};  // width : height

  /// RetinaNet-style scales and ratios with base = 2.5 x stride.
  static AnchorConfig for_strides(const std::vector<int>& strides) {
    AnchorConfig c;
    for (int s : strides) c.base_size.push_back(2.5 * s);
    return c;
  }
};

struct AnchorOwner {
  int level = 0;
  int cell_y = 0;
  int cell_x = 0;
  int slot = 0;
};

struct AnchorSet {
  std::vector<Box> boxes;
  std::vector<AnchorOwner> owner;
  std::vector<std::size_t> level_offset;  // first anchor index of each level, plus total

  std::size_t size() const { return boxes.size(); }
};

/// Standard pyramid specs for strides 8, 16, 32, ... (ceil division).
inline std::vector<FeatureMapSpec> pyramid_specs(ImageSize image, int levels, int first_stride = 8) {
  std::vector<FeatureMapSpec> specs;
  int stride = first_stride;
  for (int l = 0; l < levels; ++l, stride *= 2) {
    specs.push_back({l, stride, (image.height + stride - 1) / stride,
                     (image.width + stride - 1) / stride});
  }
  return specs;
}

inline AnchorSet generate_anchors(ImageSize image, const std::vector<FeatureMapSpec>& specs,
                                  const AnchorConfig& config) {
  require(config.scales.size() * config.ratios.size() == kAnchorsPerCell, ErrorClass::InvalidInput,
          "generate_anchors: |scales| x |ratios| must be 9");
  require(config.base_size.size() >= specs.size(), ErrorClass::InvalidInput,
          "generate_anchors: one base size per level required");
  AnchorSet set;
  for (std::size_t l = 0; l < specs.size(); ++l) {
    const auto& s = specs[l];
    require(s.height > 0 && s.width > 0 && s.stride > 0, ErrorClass::InvalidInput,
            "generate_anchors: zero-dimension feature map");
    require(s.stride * s.width >= image.width - s.stride &&
                s.stride * s.height >= image.height - s.stride,
            ErrorClass::InvalidInput, "generate_anchors: feature map does not tile the image");
    set.level_offset.push_back(set.boxes.size());
    const double base = config.base_size[l];
    for (int y = 0; y < s.height; ++y) {
      for (int x = 0; x < s.width; ++x) {
        const double cx = (x + 0.5) * s.stride;
        const double cy = (y + 0.5) * s.stride;
        int slot = 0;
        for (double scale : config.scales) {
          for (double ratio : config.ratios) {
            const double side = base * scale;
            const double w = side * std::sqrt(ratio);
            const double h = side / std::sqrt(ratio);
            set.boxes.push_back({cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h});
            set.owner.push_back({s.level, y, x, slot});
            ++slot;
          }
        }
      }
    }
  }
  set.level_offset.push_back(set.boxes.size());
  return set;
}

struct MatchResult {
  std::vector<unsigned char> foreground;      // g, one per anchor
  std::vector<std::size_t> members;           // G, ascending anchor index
  std::vector<RegressionParams> targets;      // aligned with members
  std::size_t best_anchor = 0;                // argmax IoU, lowest index on ties
  bool forced = false;                        // true when no anchor reached the threshold
};

/// Foreground set: every anchor with IoU >= threshold; if none qualifies the
/// best-IoU anchor is forced in so that |G| >= 1.
inline MatchResult match_anchors(const AnchorSet& anchors, const Box& gt, double iou_threshold = 0.5) {
  require(gt.is_valid() && gt.area() > 0, ErrorClass::InvalidInput,
          "match_anchors: ground truth must have positive area");
  require(!anchors.boxes.empty(), ErrorClass::InvalidInput, "match_anchors: empty anchor set");
  MatchResult m;
  m.foreground.assign(anchors.size(), 0);
  double best = -1.0;
  for (std::size_t j = 0; j < anchors.size(); ++j) {
    const double v = iou(anchors.boxes[j], gt);
    if (v > best) {
      best = v;
      m.best_anchor = j;
    }
    if (v >= iou_threshold) {
      m.foreground[j] = 1;
      m.members.push_back(j);
    }
  }
  if (m.members.empty()) {
    m.forced = true;
    m.foreground[m.best_anchor] = 1;
    m.members.push_back(m.best_anchor);
  }
  m.targets.reserve(m.members.size());
  for (std::size_t j : m.members) m.targets.push_back(encode_regression(anchors.boxes[j], gt));
  return m;
}

}  // namespace zsg
