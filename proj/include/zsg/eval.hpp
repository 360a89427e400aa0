#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "anchor.hpp"
#include "error.hpp"
#include "geometry.hpp"
#include "image_io.hpp"
#include "rng.hpp"
#include "sample.hpp"
#include "train.hpp"

namespace zsg {

struct EvalConfig {
  double iou_threshold = 0.5;
  std::vector<double> bucket_edges{0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8};

  void validate() const {
    require(iou_threshold > 0 && iou_threshold < 1, ErrorClass::ConfigError, "eval: IoU threshold must lie in (0, 1)");
    require(std::is_sorted(bucket_edges.begin(), bucket_edges.end()) &&
                std::adjacent_find(bucket_edges.begin(), bucket_edges.end()) == bucket_edges.end(),
            ErrorClass::ConfigError, "eval: bucket edges must be strictly increasing");
  }
};

// ---------------------------------------------------------------- accuracy

/// Fraction of pairs whose IoU is strictly greater than the threshold.
inline double accuracy_at_iou(const std::vector<Box>& predictions, const std::vector<Box>& gts, double threshold) {
  require(predictions.size() == gts.size(), ErrorClass::InvalidInput, "accuracy: length mismatch");
  require(!gts.empty(), ErrorClass::InvalidInput, "accuracy: empty input");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < gts.size(); ++i) correct += iou(predictions[i], gts[i]) > threshold ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(gts.size());
}

inline std::vector<Box> boxes_of(const std::vector<GroundingPrediction>& preds) {
  std::vector<Box> out;
  out.reserve(preds.size());
  for (const auto& p : preds) out.push_back(p.box);
  return out;
}

inline std::vector<Box> gts_of(const std::vector<GroundingSample>& samples) {
  std::vector<Box> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.gt);
  return out;
}

inline std::vector<bool> correctness(const std::vector<Box>& predictions, const std::vector<Box>& gts,
                                     double threshold) {
  require(predictions.size() == gts.size(), ErrorClass::InvalidInput, "correctness: length mismatch");
  std::vector<bool> out(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i) out[i] = iou(predictions[i], gts[i]) > threshold;
  return out;
}

// ---------------------------------------------------------------- recall

/// Fraction of ground truths covered by at least one proposal with IoU >= threshold.
inline double proposal_recall(const std::vector<std::vector<Box>>& proposals, const std::vector<Box>& gts,
                              double threshold) {
  require(proposals.size() == gts.size(), ErrorClass::InvalidInput, "proposal_recall: one proposal list per gt");
  if (gts.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < gts.size(); ++i)
    hit += std::any_of(proposals[i].begin(), proposals[i].end(),
                       [&](const Box& p) { return iou(p, gts[i]) >= threshold; })
               ? 1
               : 0;
  return static_cast<double>(hit) / static_cast<double>(gts.size());
}

/// Dense-anchor recall by scanning the flat anchor list.
inline double anchor_recall_flat(const AnchorSet& anchors, const std::vector<Box>& gts, double threshold) {
  if (gts.empty()) return 0.0;
  std::size_t hit = 0;
  for (const auto& g : gts)
    hit += std::any_of(anchors.boxes.begin(), anchors.boxes.end(), [&](const Box& a) { return iou(a, g) >= threshold; })
               ? 1
               : 0;
  return static_cast<double>(hit) / static_cast<double>(gts.size());
}

/// Dense-anchor recall level by level: anchors are rebuilt from the pyramid
/// geometry only for cells whose anchors can intersect the ground truth.
inline double anchor_recall_per_level(const std::vector<FeatureMapSpec>& specs, const AnchorConfig& config,
                                      const std::vector<Box>& gts, double threshold) {
  if (gts.empty()) return 0.0;
  std::size_t hit = 0;
  for (const auto& g : gts) {
    bool covered = false;
    for (std::size_t l = 0; l < specs.size() && !covered; ++l) {
      const auto& s = specs[l];
      const double base = config.base_size[l];
      for (double scale : config.scales) {
        for (double ratio : config.ratios) {
          const double side = base * scale;
          const double w = side * std::sqrt(ratio), h = side / std::sqrt(ratio);
          // Cells whose anchor of this shape overlaps g at all.
          const int x_lo = std::max(0, static_cast<int>(std::floor((g.x1 - 0.5 * w) / s.stride - 0.5)));
          const int x_hi = std::min(s.width - 1, static_cast<int>(std::ceil((g.x2 + 0.5 * w) / s.stride - 0.5)));
          const int y_lo = std::max(0, static_cast<int>(std::floor((g.y1 - 0.5 * h) / s.stride - 0.5)));
          const int y_hi = std::min(s.height - 1, static_cast<int>(std::ceil((g.y2 + 0.5 * h) / s.stride - 0.5)));
          for (int y = y_lo; y <= y_hi && !covered; ++y)
            for (int x = x_lo; x <= x_hi && !covered; ++x) {
              const double cx = (x + 0.5) * s.stride, cy = (y + 0.5) * s.stride;
              const Box a{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
              covered = iou(a, g) >= threshold;
            }
        }
      }
    }
    hit += covered ? 1 : 0;
  }
  return static_cast<double>(hit) / static_cast<double>(gts.size());
}

// ---------------------------------------------------------------- breakdowns

struct BucketStat {
  double lo = 0, hi = 0;
  std::size_t count = 0, correct = 0;
  std::optional<double> accuracy;  // absent for an empty bucket
};

struct BucketReport {
  std::vector<BucketStat> buckets;
  std::size_t out_of_range = 0, out_of_range_correct = 0;
};

/// Buckets [e_i, e_{i+1}); the last bucket also includes its upper edge.
/// Samples outside every bucket, including those with a negative
/// (undefined) distance, are counted separately.
inline BucketReport bucketed_accuracy(const std::vector<bool>& correct, const std::vector<double>& distances,
                                      const std::vector<double>& edges) {
  require(correct.size() == distances.size(), ErrorClass::InvalidInput, "bucketed_accuracy: length mismatch");
  BucketReport r;
  for (std::size_t b = 0; b + 1 < edges.size(); ++b) r.buckets.push_back({edges[b], edges[b + 1], 0, 0, {}});
  for (std::size_t i = 0; i < correct.size(); ++i) {
    const double d = distances[i];
    BucketStat* slot = nullptr;
    for (std::size_t b = 0; b < r.buckets.size(); ++b) {
      const bool last = b + 1 == r.buckets.size();
      if (d >= r.buckets[b].lo && (d < r.buckets[b].hi || (last && d == r.buckets[b].hi))) {
        slot = &r.buckets[b];
        break;
      }
    }
    if (!slot) {
      ++r.out_of_range;
      r.out_of_range_correct += correct[i] ? 1 : 0;
      continue;
    }
    ++slot->count;
    slot->correct += correct[i] ? 1 : 0;
  }
  for (auto& b : r.buckets)
    if (b.count > 0) b.accuracy = static_cast<double>(b.correct) / static_cast<double>(b.count);
  return r;
}

struct GroupStat {
  std::size_t count = 0, correct = 0;
  double accuracy = 0;
};

inline const char* kUncategorized = "uncategorized";

inline std::map<std::string, GroupStat> per_category_accuracy(const std::vector<bool>& correct,
                                                              const std::vector<std::string>& categories) {
  require(correct.size() == categories.size(), ErrorClass::InvalidInput, "per_category_accuracy: length mismatch");
  std::map<std::string, GroupStat> out;
  for (std::size_t i = 0; i < correct.size(); ++i) {
    auto& g = out[categories[i].empty() ? std::string(kUncategorized) : categories[i]];
    ++g.count;
    g.correct += correct[i] ? 1 : 0;
  }
  for (auto& [k, g] : out) g.accuracy = static_cast<double>(g.correct) / static_cast<double>(g.count);
  return out;
}

// ---------------------------------------------------------------- baselines

/// A box of the mean training gt size, centred in the image.
inline std::vector<Box> center_box_baseline(const std::vector<GroundingSample>& samples,
                                            const std::vector<GroundingSample>& train_set) {
  require(!train_set.empty(), ErrorClass::InvalidInput, "center baseline: empty training set");
  double w = 0, h = 0;
  for (const auto& s : train_set) {
    w += s.gt.width();
    h += s.gt.height();
  }
  w /= static_cast<double>(train_set.size());
  h /= static_cast<double>(train_set.size());
  std::vector<Box> out;
  for (const auto& s : samples) {
    const double cx = s.image_size.width / 2.0, cy = s.image_size.height / 2.0;
    out.push_back(clip_box({cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2}, s.image_size));
  }
  return out;
}

/// A uniformly random anchor per sample, without regression.
inline std::vector<Box> random_anchor_baseline(const std::vector<GroundingSample>& samples, const AnchorSet& anchors,
                                               std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x4A4E));
  std::vector<Box> out;
  for (const auto& s : samples) out.push_back(clip_box(anchors.boxes[rng.below(anchors.size())], s.image_size));
  return out;
}

// ---------------------------------------------------------------- reports

struct EvalReport {
  double iou_threshold = 0.5;
  std::size_t total = 0, correct = 0;
  double accuracy = 0;
  std::map<std::string, GroupStat> categories;
  std::map<std::string, GroupStat> cases;
  BucketReport buckets;
  std::optional<double> anchor_recall;
  std::map<std::string, double> baselines;
};

inline EvalReport make_report(const std::vector<Box>& predictions, const std::vector<GroundingSample>& samples,
                              const EvalConfig& config) {
  config.validate();
  const auto gts = gts_of(samples);
  EvalReport r;
  r.iou_threshold = config.iou_threshold;
  const auto ok = correctness(predictions, gts, config.iou_threshold);
  r.total = samples.size();
  r.correct = static_cast<std::size_t>(std::count(ok.begin(), ok.end(), true));
  r.accuracy = accuracy_at_iou(predictions, gts, config.iou_threshold);
  std::vector<std::string> cats, cases;
  std::vector<double> dists;
  for (const auto& s : samples) {
    cats.push_back(s.category);
    cases.push_back(to_string(s.label));
    dists.push_back(s.semantic_distance);
  }
  r.categories = per_category_accuracy(ok, cats);
  r.cases = per_category_accuracy(ok, cases);
  r.buckets = bucketed_accuracy(ok, dists, config.bucket_edges);
  return r;
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j;
  j["iou_threshold"] = r.iou_threshold;
  j["total"] = r.total;
  j["correct"] = r.correct;
  j["accuracy"] = r.accuracy;
  auto groups = [](const std::map<std::string, GroupStat>& m) {
    nlohmann::json g = nlohmann::json::object();
    for (const auto& [k, s] : m) g[k] = {{"count", s.count}, {"correct", s.correct}, {"accuracy", s.accuracy}};
    return g;
  };
  j["categories"] = groups(r.categories);
  j["cases"] = groups(r.cases);
  j["buckets"] = nlohmann::json::array();
  for (const auto& b : r.buckets.buckets) {
    nlohmann::json jb{{"lo", b.lo}, {"hi", b.hi}, {"count", b.count}, {"correct", b.correct}};
    jb["accuracy"] = b.accuracy ? nlohmann::json(*b.accuracy) : nlohmann::json(nullptr);
    j["buckets"].push_back(jb);
  }
  j["out_of_range"] = {{"count", r.buckets.out_of_range}, {"correct", r.buckets.out_of_range_correct}};
  if (r.anchor_recall) j["anchor_recall"] = *r.anchor_recall;
  j["baselines"] = r.baselines;
  return j;
}

/// Flat table: section,key,count,correct,accuracy. Absent accuracies are empty.
inline std::string to_csv(const EvalReport& r) {
  std::ostringstream os;
  os.precision(9);
  os << "section,key,count,correct,accuracy\n";
  os << "overall,all," << r.total << ',' << r.correct << ',' << r.accuracy << '\n';
  for (const auto& [k, g] : r.cases) os << "case," << k << ',' << g.count << ',' << g.correct << ',' << g.accuracy << '\n';
  for (const auto& [k, g] : r.categories)
    os << "category," << k << ',' << g.count << ',' << g.correct << ',' << g.accuracy << '\n';
  for (const auto& b : r.buckets.buckets) {
    os << "bucket," << b.lo << '-' << b.hi << ',' << b.count << ',' << b.correct << ',';
    if (b.accuracy) os << *b.accuracy;
    os << '\n';
  }
  os << "bucket,out_of_range," << r.buckets.out_of_range << ',' << r.buckets.out_of_range_correct << ",\n";
  if (r.anchor_recall) os << "recall,anchors,,," << *r.anchor_recall << '\n';
  for (const auto& [k, v] : r.baselines) os << "baseline," << k << ",,," << v << '\n';
  return os.str();
}

/// Writes the sample image with the ground truth in green and the prediction in red.
inline void write_overlay(const GroundingSample& s, const Box& prediction, const std::string& path) {
  std::vector<float> px = s.pixels;
  draw_box(px, s.image_size, s.gt, 0.0f, 1.0f, 0.0f);
  draw_box(px, s.image_size, prediction, 1.0f, 0.0f, 0.0f);
  write_ppm(path, s.image_size, px);
}

}  // namespace zsg
