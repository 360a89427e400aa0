#pragma once

#include <string>
#include <vector>

#include "error.hpp"
#include "geometry.hpp"

namespace zsg {

enum class CaseLabel { Train, Val, Case0, Case1, Case2, Case3 };

inline std::string to_string(CaseLabel c) {
  switch (c) {
    case CaseLabel::Train: return "train";
    case CaseLabel::Val: return "val";
    case CaseLabel::Case0: return "case0";
    case CaseLabel::Case1: return "case1";
    case CaseLabel::Case2: return "case2";
    case CaseLabel::Case3: return "case3";
  }
  return "train";
}

inline CaseLabel parse_case_label(const std::string& s) {
  if (s == "train") return CaseLabel::Train;
  if (s == "val") return CaseLabel::Val;
  if (s == "case0") return CaseLabel::Case0;
  if (s == "case1") return CaseLabel::Case1;
  if (s == "case2") return CaseLabel::Case2;
  if (s == "case3") return CaseLabel::Case3;
  fail(ErrorClass::InvalidInput, "unknown case label '" + s + "'");
}

/// One rendered object in a scene.
struct SceneObject {
  std::string noun;
  std::string color;
  std::string size;
  Box box;
};

/// Image, query, and ground truth consumed by training and evaluation.
/// Pixels are planar RGB in [0, 1], 3 x H x W.
struct GroundingSample {
  std::string id;
  ImageSize image_size;
  std::vector<float> pixels;
  std::string query;
  std::vector<int> tokens;
  Box gt;
  CaseLabel label = CaseLabel::Train;
  std::string noun;                  // referred noun
  std::vector<SceneObject> objects;  // target first, then distractors
  std::string category;              // cluster name of the referred noun
  double semantic_distance = -1;     // to the closest seen same-cluster noun, when unseen
};

}  // namespace zsg
