#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"

namespace zsg {

/// Axis-aligned box in pixel coordinates, corner convention.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  double center_x() const { return 0.5 * (x1 + x2); }
  double center_y() const { return 0.5 * (y1 + y2); }

  bool is_valid() const {
    return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) &&
           std::isfinite(y2) && x1 <= x2 && y1 <= y2;
  }

  friend bool operator==(const Box&, const Box&) = default;
};

struct ImageSize {
  int width = 0;
  int height = 0;
  friend bool operator==(const ImageSize&, const ImageSize&) = default;
};

/// Anchor-relative box offsets: center shift over anchor size, log size ratio.
struct RegressionParams {
  double tx = 0, ty = 0, tw = 0, th = 0;

  bool is_finite() const {
    return std::isfinite(tx) && std::isfinite(ty) && std::isfinite(tw) && std::isfinite(th);
  }
};

inline std::string to_string(const Box& b) {
  return "[" + std::to_string(b.x1) + "," + std::to_string(b.y1) + "," +
         std::to_string(b.x2) + "," + std::to_string(b.y2) + "]";
}

inline double intersection_area(const Box& a, const Box& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0 || ih <= 0) return 0.0;
  return iw * ih;
}

/// Intersection over union. Two zero-area boxes give 0 by convention.
inline double iou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

inline Box clip_box(const Box& b, ImageSize image) {
  const double w = image.width, h = image.height;
  Box c{std::clamp(b.x1, 0.0, w), std::clamp(b.y1, 0.0, h), std::clamp(b.x2, 0.0, w),
        std::clamp(b.y2, 0.0, h)};
  return c;
}

inline RegressionParams encode_regression(const Box& anchor, const Box& target) {
  require(anchor.width() > 0 && anchor.height() > 0, ErrorClass::InvalidInput,
          "encode_regression: anchor must have positive width and height");
  require(target.width() > 0 && target.height() > 0, ErrorClass::InvalidInput,
          "encode_regression: target must have positive width and height");
  const double wa = anchor.width(), ha = anchor.height();
  return {(target.center_x() - anchor.center_x()) / wa, (target.center_y() - anchor.center_y()) / ha,
          std::log(target.width() / wa), std::log(target.height() / ha)};
}

// Log-size offsets are clamped before exponentiation so an untrained head
// cannot produce an infinite box.
inline constexpr double kMaxLogScale = 10.0;

inline Box decode_regression(const Box& anchor, const RegressionParams& p,
                             std::optional<ImageSize> clip_to = std::nullopt) {
  require(anchor.width() > 0 && anchor.height() > 0, ErrorClass::InvalidInput,
          "decode_regression: anchor must have positive width and height");
  require(p.is_finite(), ErrorClass::InvalidInput, "decode_regression: non-finite parameters");
  const double wa = anchor.width(), ha = anchor.height();
  const double cx = anchor.center_x() + p.tx * wa;
  const double cy = anchor.center_y() + p.ty * ha;
  const double w = wa * std::exp(std::min(p.tw, kMaxLogScale));
  const double h = ha * std::exp(std::min(p.th, kMaxLogScale));
  Box b{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
  if (clip_to) b = clip_box(b, *clip_to);
  return b;
}

/// Visiting order for greedy suppression: descending priority, then larger
/// area, then lower index.
inline std::vector<std::size_t> nms_order(std::span<const Box> boxes,
                                          std::span<const double> priority) {
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (priority[a] != priority[b]) return priority[a] > priority[b];
    const double aa = boxes[a].area(), ab = boxes[b].area();
    if (aa != ab) return aa > ab;
    return a < b;
  });
  return order;
}

struct NmsResult {
  std::vector<std::size_t> kept;      // in visiting (rank) order
  std::vector<std::size_t> assigned;  // per input box: the kept box that represents it
};

/// Greedy non-maxima suppression that also reports which kept box absorbed
/// each suppressed one. A box is suppressed when its IoU with an already
/// kept box exceeds the threshold. Without priorities, box area is used.
inline NmsResult nms_with_assignment(std::span<const Box> boxes,
                                     std::optional<std::span<const double>> priority,
                                     double iou_threshold) {
  require(iou_threshold > 0 && iou_threshold < 1, ErrorClass::InvalidInput,
          "nms: iou_threshold must lie in (0,1)");
  std::vector<double> area_priority;
  std::span<const double> prio;
  if (priority) {
    require(priority->size() == boxes.size(), ErrorClass::InvalidInput,
            "nms: boxes and priority differ in length");
    prio = *priority;
  } else {
    area_priority.reserve(boxes.size());
    for (const auto& b : boxes) area_priority.push_back(b.area());
    prio = area_priority;
  }
  NmsResult r;
  r.assigned.assign(boxes.size(), 0);
  std::vector<bool> removed(boxes.size(), false);
  for (std::size_t i : nms_order(boxes, prio)) {
    if (removed[i]) continue;
    r.kept.push_back(i);
    r.assigned[i] = i;
    for (std::size_t j = 0; j < boxes.size(); ++j) {
      if (removed[j] || j == i) continue;
      if (std::find(r.kept.begin(), r.kept.end(), j) != r.kept.end()) continue;
      if (iou(boxes[i], boxes[j]) > iou_threshold) {
        removed[j] = true;
        r.assigned[j] = i;
      }
    }
  }
  return r;
}

inline std::vector<std::size_t> nms(std::span<const Box> boxes, std::span<const double> priority,
                                    double iou_threshold) {
  return nms_with_assignment(boxes, priority, iou_threshold).kept;
}

inline std::vector<std::size_t> nms(std::span<const Box> boxes, double iou_threshold) {
  return nms_with_assignment(boxes, std::nullopt, iou_threshold).kept;
}

}  // namespace zsg
