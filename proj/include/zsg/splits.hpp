#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "embedding.hpp"
#include "error.hpp"
#include "geometry.hpp"
#include "kmeans.hpp"
#include "rng.hpp"
#include "sample.hpp"

namespace zsg {

// ---------------------------------------------------------------------------
// Annotation records

struct Phrase {
  std::string query;
  Box box;
  std::optional<std::string> category;  // entity category
  std::optional<std::string> object;    // referred-object name
};

struct ObjectAnnotation {
  std::string name;
  Box box;
};

struct AnnotationRecord {
  std::string image_id;
  ImageSize size;
  std::vector<Phrase> phrases;
  std::vector<ObjectAnnotation> objects;

  void validate() const {
    require(!image_id.empty(), ErrorClass::InvalidInput, "record: empty image id");
    require(size.width > 0 && size.height > 0, ErrorClass::InvalidInput, "record " + image_id + ": bad image size");
    auto inside = [&](const Box& b) {
      return b.is_valid() && b.x1 >= 0 && b.y1 >= 0 && b.x2 <= size.width && b.y2 <= size.height;
    };
    for (const auto& p : phrases) {
      require(!p.query.empty(), ErrorClass::InvalidInput, "record " + image_id + ": empty query");
      require(inside(p.box), ErrorClass::InvalidInput, "record " + image_id + ": phrase box outside image");
    }
    for (const auto& o : objects)
      require(inside(o.box), ErrorClass::InvalidInput, "record " + image_id + ": object box outside image");
  }
};

inline nlohmann::json to_json(const AnnotationRecord& r) {
  nlohmann::json j;
  j["image_id"] = r.image_id;
  j["width"] = r.size.width;
  j["height"] = r.size.height;
  j["phrases"] = nlohmann::json::array();
  for (const auto& p : r.phrases) {
    nlohmann::json jp{{"query", p.query}, {"box", {p.box.x1, p.box.y1, p.box.x2, p.box.y2}}};
    if (p.category) jp["category"] = *p.category;
    if (p.object) jp["object"] = *p.object;
    j["phrases"].push_back(jp);
  }
  j["objects"] = nlohmann::json::array();
  for (const auto& o : r.objects) j["objects"].push_back({{"name", o.name}, {"box", {o.box.x1, o.box.y1, o.box.x2, o.box.y2}}});
  return j;
}

inline AnnotationRecord record_from_json(const nlohmann::json& j) {
  auto box = [](const nlohmann::json& b) {
    require(b.is_array() && b.size() == 4, ErrorClass::InvalidInput, "box must be [x1, y1, x2, y2]");
    return Box{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()};
  };
  AnnotationRecord r;
  r.image_id = j.at("image_id").get<std::string>();
  r.size = {j.at("width").get<int>(), j.at("height").get<int>()};
  for (const auto& jp : j.value("phrases", nlohmann::json::array())) {
    Phrase p{jp.at("query").get<std::string>(), box(jp.at("box")), std::nullopt, std::nullopt};
    if (jp.contains("category") && !jp["category"].is_null()) p.category = jp["category"].get<std::string>();
    if (jp.contains("object") && !jp["object"].is_null()) p.object = jp["object"].get<std::string>();
    r.phrases.push_back(std::move(p));
  }
  for (const auto& jo : j.value("objects", nlohmann::json::array()))
    r.objects.push_back({jo.at("name").get<std::string>(), box(jo.at("box"))});
  r.validate();
  return r;
}

inline std::vector<AnnotationRecord> read_annotations(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorClass::IoError, "cannot open annotations " + path);
  std::vector<AnnotationRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(record_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorClass::InvalidInput, path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline void write_annotations(const std::vector<AnnotationRecord>& records, const std::string& path) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorClass::IoError, "cannot write annotations " + path);
  for (const auto& r : records) out << to_json(r).dump() << "\n";
}

/// Synthetic samples as annotation records: one phrase per image, categorised
/// by cluster, with held-out-cluster phrases marked "other".
inline std::vector<AnnotationRecord> records_from_samples(const std::vector<GroundingSample>& samples,
                                                          const std::set<std::string>& other_categories = {}) {
  std::vector<AnnotationRecord> out;
  for (const auto& s : samples) {
    AnnotationRecord r{s.id, s.image_size, {}, {}};
    const std::string cat = other_categories.contains(s.category) ? "other" : s.category;
    r.phrases.push_back({s.query, s.gt, cat, s.noun});
    for (const auto& o : s.objects) r.objects.push_back({o.noun, o.box});
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Lemmas and query words

using Lemmatizer = std::function<std::string(const std::string&)>;
using HeadWordExtractor = std::function<std::string(const std::string&)>;

/// Rule-based English lemmatizer: case folding, a few irregular plurals, and
/// s / es / ies stripping.
inline std::string lemmatize(const std::string& word) {
  std::string w = to_lower(word);
  static const std::map<std::string, std::string> irregular = {
      {"men", "man"},     {"women", "woman"}, {"children", "child"}, {"feet", "foot"},
      {"teeth", "tooth"}, {"mice", "mouse"},  {"geese", "goose"},    {"people", "person"}};
  if (auto it = irregular.find(w); it != irregular.end()) return it->second;
  auto ends = [&](const std::string& suf) { return w.size() > suf.size() && w.ends_with(suf); };
  if (w.size() > 4 && ends("ies")) return w.substr(0, w.size() - 3) + "y";
  for (const char* suf : {"sses", "ches", "shes", "xes", "zes"})
    if (ends(suf)) return w.substr(0, w.size() - 2);
  if (ends("ss") || ends("us") || ends("is")) return w;
  if (w.size() > 3 && ends("s")) return w.substr(0, w.size() - 1);
  return w;
}

/// Default query word: the last token of the phrase.
inline std::string last_word(const std::string& query) {
  const auto words = split_words(query);
  return words.empty() ? std::string() : words.back();
}

// ---------------------------------------------------------------------------
// Split results

struct SplitItem {
  std::string image_id;
  std::size_t phrase = 0;  // index into the record's phrases
  std::string rule;        // why the item landed where it did
};

struct Certificate {
  bool passed = true;
  std::vector<std::string> checks;
  std::vector<std::string> violations;

  void check(bool ok, const std::string& what) {
    checks.push_back(what);
    if (!ok) {
      passed = false;
      violations.push_back(what);
    }
  }
};

struct SplitResult {
  std::vector<SplitItem> train, val, test;
  std::vector<std::string> always_seen, include, exclude;  // case0 vocabulary lists
  std::vector<std::string> warnings;
  Certificate certificate;
};

namespace detail {

inline std::map<std::string, const AnnotationRecord*> index_records(const std::vector<AnnotationRecord>& records) {
  std::map<std::string, const AnnotationRecord*> idx;
  for (const auto& r : records) {
    auto [it, fresh] = idx.emplace(r.image_id, &r);
    require(fresh, ErrorClass::InvalidInput, "duplicate image id " + r.image_id);
  }
  return idx;
}

inline std::set<std::string> images_of(const std::vector<SplitItem>& items) {
  std::set<std::string> s;
  for (const auto& i : items) s.insert(i.image_id);
  return s;
}

inline bool disjoint(const std::set<std::string>& a, const std::set<std::string>& b) {
  for (const auto& x : a)
    if (b.contains(x)) return false;
  return true;
}

inline void check_disjoint(Certificate& c, const std::vector<SplitItem>& train, const std::vector<SplitItem>& val,
                           const std::vector<SplitItem>& test) {
  const auto a = images_of(train), b = images_of(val), t = images_of(test);
  c.check(disjoint(a, b) && disjoint(a, t) && disjoint(b, t), "train/val/test image sets are disjoint");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Case 0: unseen query words

/// Audits a case0 split from the raw records: train and test query-word
/// lemma sets are disjoint, every test/val word is in the exclude list, and
/// images do not overlap.
inline Certificate audit_case0(const std::vector<AnnotationRecord>& records, const SplitResult& split,
                               const Lemmatizer& lemma = lemmatize, const HeadWordExtractor& head = last_word) {
  Certificate c;
  const auto idx = detail::index_records(records);
  const std::set<std::string> excluded(split.exclude.begin(), split.exclude.end());
  auto word_of = [&](const SplitItem& it) {
    auto r = idx.find(it.image_id);
    require(r != idx.end() && it.phrase < r->second->phrases.size(), ErrorClass::ContractViolation,
            "case0 audit: dangling item " + it.image_id);
    return lemma(head(r->second->phrases[it.phrase].query));
  };
  std::set<std::string> train_words, test_words;
  for (const auto& it : split.train) train_words.insert(word_of(it));
  bool held_ok = true;
  for (const auto* part : {&split.val, &split.test})
    for (const auto& it : *part) {
      const auto w = word_of(it);
      test_words.insert(w);
      held_ok = held_ok && excluded.contains(w);
    }
  c.check(held_ok, "every val/test query word is in the exclude list");
  bool train_ok = true;
  for (const auto& w : train_words) train_ok = train_ok && !excluded.contains(w);
  c.check(train_ok, "no train query word is in the exclude list");
  c.check(detail::disjoint(train_words, test_words), "train and test query-word lemmas are disjoint");
  detail::check_disjoint(c, split.train, split.val, split.test);
  return c;
}

/// Query words are ranked by frequency; the top_i are always seen, the rest
/// are shuffled and split ratio : (1 - ratio) into include / exclude with the
/// exclude count floored. Images holding an excluded word are split evenly
/// into val and test (test takes the odd one) and keep only their
/// excluded-word phrases; all other images go to train.
inline SplitResult case0_split(const std::vector<AnnotationRecord>& records, std::size_t top_i = 1000,
                               double ratio = 0.7, std::uint64_t seed = 0, const Lemmatizer& lemma = lemmatize,
                               const HeadWordExtractor& head = last_word) {
  require(!records.empty(), ErrorClass::InvalidInput, "case0_split: no records");
  require(ratio > 0 && ratio < 1, ErrorClass::ConfigError, "case0_split: ratio must lie in (0, 1)");
  detail::index_records(records);
  std::map<std::string, std::size_t> freq;
  for (const auto& r : records)
    for (const auto& p : r.phrases) ++freq[lemma(head(p.query))];
  std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });

  SplitResult s;
  std::vector<std::string> rest;
  for (std::size_t i = 0; i < ranked.size(); ++i)
    (i < top_i ? s.always_seen : rest).push_back(ranked[i].first);
  std::sort(rest.begin(), rest.end());
  Rng rng(derive_seed(seed, 0xC0));
  rng.shuffle(rest);
  const auto n_exclude = static_cast<std::size_t>(std::floor((1.0 - ratio) * static_cast<double>(rest.size()) + 1e-9));
  if (rest.empty()) {
    s.warnings.push_back("every query word is among the top " + std::to_string(top_i) + "; test set is empty");
  } else {
    require(n_exclude > 0, ErrorClass::ConfigError,
            "case0_split: exclude list is empty (" + std::to_string(rest.size()) + " candidate words)");
  }
  s.exclude.assign(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(n_exclude));
  s.include.assign(rest.begin() + static_cast<std::ptrdiff_t>(n_exclude), rest.end());
  std::sort(s.exclude.begin(), s.exclude.end());
  std::sort(s.include.begin(), s.include.end());
  const std::set<std::string> excluded(s.exclude.begin(), s.exclude.end());

  std::vector<const AnnotationRecord*> held;
  for (const auto& r : records) {
    bool has = false;
    for (const auto& p : r.phrases) has = has || excluded.contains(lemma(head(p.query)));
    if (has) {
      held.push_back(&r);
      continue;
    }
    for (std::size_t i = 0; i < r.phrases.size(); ++i) s.train.push_back({r.image_id, i, "no excluded query word"});
  }
  rng.shuffle(held);
  const std::size_t n_val = held.size() / 2;
  for (std::size_t h = 0; h < held.size(); ++h) {
    auto& dst = h < n_val ? s.val : s.test;
    for (std::size_t i = 0; i < held[h]->phrases.size(); ++i)
      if (excluded.contains(lemma(head(held[h]->phrases[i].query))))
        dst.push_back({held[h]->image_id, i, "query word in exclude list"});
  }
  s.certificate = audit_case0(records, s, lemma, head);
  return s;
}

// ---------------------------------------------------------------------------
// Case 1: held-out category

inline const char* kOtherCategory = "other";

inline bool is_other(const Phrase& p) { return p.category && to_lower(*p.category) == kOtherCategory; }

/// Drops every phrase of the given category (case-insensitive).
inline AnnotationRecord remove_category(AnnotationRecord r, const std::string& category) {
  const std::string c = to_lower(category);
  std::erase_if(r.phrases, [&](const Phrase& p) { return p.category && to_lower(*p.category) == c; });
  return r;
}

inline Certificate audit_case1(const std::vector<AnnotationRecord>& records, const SplitResult& split) {
  Certificate c;
  const auto idx = detail::index_records(records);
  auto phrase = [&](const SplitItem& it) -> const Phrase& {
    auto r = idx.find(it.image_id);
    require(r != idx.end() && it.phrase < r->second->phrases.size(), ErrorClass::ContractViolation,
            "case1 audit: dangling item " + it.image_id);
    return r->second->phrases[it.phrase];
  };
  bool clean = true;
  for (const auto& it : split.train) clean = clean && !is_other(phrase(it));
  c.check(clean, "no 'other' phrase in train");
  bool held = true;
  for (const auto* part : {&split.val, &split.test})
    for (const auto& it : *part) held = held && is_other(phrase(it));
  c.check(held, "every val/test phrase is 'other'");
  c.check(!split.val.empty() && !split.test.empty(), "val and test are nonempty");
  detail::check_disjoint(c, split.train, split.val, split.test);
  return c;
}

/// Images with an "other" phrase are shuffled and split evenly into val and
/// test (test takes the odd one), keeping their "other" phrases; the
/// remaining images form train with "other" phrases removed.
inline SplitResult case1_split(const std::vector<AnnotationRecord>& records, std::uint64_t seed = 0) {
  require(!records.empty(), ErrorClass::InvalidInput, "case1_split: no records");
  detail::index_records(records);
  SplitResult s;
  std::vector<const AnnotationRecord*> held;
  for (const auto& r : records) {
    if (std::any_of(r.phrases.begin(), r.phrases.end(), is_other)) {
      held.push_back(&r);
      continue;
    }
    for (std::size_t i = 0; i < r.phrases.size(); ++i)
      if (!is_other(r.phrases[i])) s.train.push_back({r.image_id, i, "image has no 'other' phrase"});
  }
  require(!held.empty(), ErrorClass::ConfigError, "case1_split: no 'other' annotations");
  require(held.size() >= 2, ErrorClass::ConfigError, "case1_split: need at least 2 'other' images for val and test");
  Rng rng(derive_seed(seed, 0xC1));
  rng.shuffle(held);
  const std::size_t n_val = held.size() / 2;
  for (std::size_t h = 0; h < held.size(); ++h)
    for (std::size_t i = 0; i < held[h]->phrases.size(); ++i)
      if (is_other(held[h]->phrases[i]))
        (h < n_val ? s.val : s.test).push_back({held[h]->image_id, i, "'other' phrase"});
  s.certificate = audit_case1(records, s);
  return s;
}

// ---------------------------------------------------------------------------
// Annotation cleaning

inline const char* kUnresolved = "unresolved";
inline constexpr double kDedupIou = 0.7;

struct CleanResult {
  std::vector<AnnotationRecord> records;
  std::size_t unresolved = 0;
  std::size_t collapsed = 0;  // phrases whose box was replaced by a canonical one
  double dedup_iou = kDedupIou;
};

/// Labels each phrase with the object of maximum IoU (lowest index on ties,
/// "unresolved" when every IoU is zero), then runs NMS over the phrase boxes
/// of each label so that repeated references to one instance share the box of
/// the largest one.
inline CleanResult clean_annotations(std::vector<AnnotationRecord> records, double dedup_iou = kDedupIou) {
  CleanResult out;
  out.dedup_iou = dedup_iou;
  for (auto& r : records) {
    for (auto& p : r.phrases) {
      double best = 0;
      std::optional<std::size_t> arg;
      for (std::size_t o = 0; o < r.objects.size(); ++o) {
        const double v = iou(p.box, r.objects[o].box);
        if (v > best) {
          best = v;
          arg = o;
        }
      }
      p.object = arg ? r.objects[*arg].name : std::string(kUnresolved);
      if (!arg) ++out.unresolved;
    }
    std::map<std::string, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < r.phrases.size(); ++i)
      if (*r.phrases[i].object != kUnresolved) groups[*r.phrases[i].object].push_back(i);
    for (const auto& [name, members] : groups) {
      std::vector<Box> boxes;
      for (std::size_t i : members) boxes.push_back(r.phrases[i].box);
      const auto nr = nms_with_assignment(boxes, std::nullopt, dedup_iou);
      std::vector<Box> canonical(boxes.size());
      for (std::size_t k = 0; k < boxes.size(); ++k) canonical[k] = boxes[nr.assigned[k]];
      for (std::size_t k = 0; k < boxes.size(); ++k)
        if (nr.assigned[k] != k) {
          r.phrases[members[k]].box = canonical[k];
          ++out.collapsed;
        }
    }
  }
  out.records = std::move(records);
  return out;
}

// ---------------------------------------------------------------------------
// Cases 2 / 3: clustered object vocabulary

struct ClusterPartition {
  std::vector<std::vector<double>> centers;
  std::vector<std::vector<std::string>> members;  // frequency-descending
  std::vector<std::vector<std::string>> seen;     // first ceil(n / 2)
  std::vector<std::vector<std::string>> unseen;
  std::map<std::string, std::size_t> frequency;
  std::vector<std::string> skipped;  // top words without an embedding

  std::optional<std::size_t> cluster_of(const std::string& w) const {
    for (std::size_t k = 0; k < members.size(); ++k)
      if (std::find(members[k].begin(), members[k].end(), w) != members[k].end()) return k;
    return std::nullopt;
  }
  bool is_seen(const std::string& w) const {
    for (const auto& s : seen)
      if (std::find(s.begin(), s.end(), w) != s.end()) return true;
    return false;
  }
  bool is_unseen(const std::string& w) const {
    for (const auto& u : unseen)
      if (std::find(u.begin(), u.end(), w) != u.end()) return true;
    return false;
  }
  std::size_t word_count() const {
    std::size_t n = 0;
    for (const auto& m : members) n += m.size();
    return n;
  }
};

namespace detail {

inline std::vector<std::pair<std::string, std::size_t>> ranked_counts(const std::map<std::string, std::size_t>& freq) {
  std::vector<std::pair<std::string, std::size_t>> v(freq.begin(), freq.end());
  std::stable_sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  return v;
}

}  // namespace detail

/// Counts object names, keeps the top_i, skips words without an embedding,
/// clusters the rest with k-means, and marks the more frequent half of each
/// cluster (rounded up) as seen.
inline ClusterPartition seen_unseen_partition(const std::vector<AnnotationRecord>& records,
                                              const EmbeddingTable& table, std::size_t top_i = 1000,
                                              std::size_t k = 20, std::uint64_t seed = 0) {
  ClusterPartition part;
  for (const auto& r : records)
    for (const auto& o : r.objects) ++part.frequency[o.name];
  std::vector<std::string> words;
  for (const auto& [w, n] : detail::ranked_counts(part.frequency)) {
    if (words.size() + part.skipped.size() >= top_i) break;
    if (table.contains(w)) words.push_back(w);
    else part.skipped.push_back(w);
  }
  std::vector<std::vector<double>> points;
  for (const auto& w : words) points.push_back(table.vector(w));
  const auto km = kmeans(points, k, seed);
  part.centers = km.centers;
  part.members.assign(k, {});
  for (std::size_t i = 0; i < words.size(); ++i) part.members[km.assignment[i]].push_back(words[i]);
  for (auto& m : part.members) {
    std::stable_sort(m.begin(), m.end(), [&](const std::string& a, const std::string& b) {
      const auto fa = part.frequency.at(a), fb = part.frequency.at(b);
      return fa != fb ? fa > fb : a < b;
    });
    const std::size_t n_seen = (m.size() + 1) / 2;
    part.seen.emplace_back(m.begin(), m.begin() + static_cast<std::ptrdiff_t>(n_seen));
    part.unseen.emplace_back(m.begin() + static_cast<std::ptrdiff_t>(n_seen), m.end());
  }
  return part;
}

struct Case23Result {
  std::vector<SplitItem> case2, case3;
  std::vector<AnnotationRecord> train_candidates;  // U annotations stripped
  Certificate certificate;
};

inline bool referred_is(const Phrase& p, const std::function<bool(const std::string&)>& pred) {
  return p.object && *p.object != kUnresolved && pred(*p.object);
}

inline Certificate audit_case23(const std::vector<AnnotationRecord>& records, const ClusterPartition& part,
                                const Case23Result& res) {
  Certificate c;
  const auto idx = detail::index_records(records);
  auto has_seen_in = [&](const AnnotationRecord& r, std::size_t k) {
    for (const auto& o : r.objects)
      if (std::find(part.seen[k].begin(), part.seen[k].end(), o.name) != part.seen[k].end()) return true;
    return false;
  };
  auto phrase_cluster = [&](const SplitItem& it, const AnnotationRecord*& rec) -> std::optional<std::size_t> {
    auto r = idx.find(it.image_id);
    require(r != idx.end() && it.phrase < r->second->phrases.size(), ErrorClass::ContractViolation,
            "case2/3 audit: dangling item " + it.image_id);
    rec = r->second;
    const auto& p = rec->phrases[it.phrase];
    if (!p.object || !part.is_unseen(*p.object)) return std::nullopt;
    return part.cluster_of(*p.object);
  };
  bool ok3 = true, ok2 = true;
  for (const auto& it : res.case3) {
    const AnnotationRecord* r = nullptr;
    const auto k = phrase_cluster(it, r);
    ok3 = ok3 && k && has_seen_in(*r, *k);
  }
  for (const auto& it : res.case2) {
    const AnnotationRecord* r = nullptr;
    const auto k = phrase_cluster(it, r);
    ok2 = ok2 && k && !has_seen_in(*r, *k);
  }
  c.check(ok3, "every case3 item refers to an unseen object whose cluster has a seen object in the image");
  c.check(ok2, "every case2 item refers to an unseen object with no seen same-cluster object in the image");
  bool clean = true, has_seen = true;
  std::set<std::string> train_ids;
  for (const auto& r : res.train_candidates) {
    train_ids.insert(r.image_id);
    bool any_seen = false;
    for (const auto& o : r.objects) clean = clean && !part.is_unseen(o.name);
    for (const auto& p : r.phrases) {
      clean = clean && !(p.object && part.is_unseen(*p.object));
      any_seen = any_seen || (p.object && part.is_seen(*p.object));
    }
    has_seen = has_seen && any_seen;
  }
  c.check(clean, "train candidates carry no unseen-object annotation");
  c.check(has_seen, "every train candidate refers to at least one seen object");
  const auto s2 = detail::images_of(res.case2), s3 = detail::images_of(res.case3);
  c.check(detail::disjoint(s2, s3) && detail::disjoint(s2, train_ids) && detail::disjoint(s3, train_ids),
          "case2, case3 and train image sets are disjoint");
  return c;
}

/// Images holding any unseen object are test images. A test phrase referring
/// to an unseen object of cluster k is case3 when the image also holds a seen
/// object of cluster k; an image with at least one such phrase is a case3
/// image and keeps only those phrases, otherwise it is a case2 image. Other
/// images become train candidates after dropping unseen annotations; they
/// must still refer to a seen object.
inline Case23Result assign_case23(const std::vector<AnnotationRecord>& records, const ClusterPartition& part) {
  Case23Result res;
  for (const auto& r : records) {
    const bool test = std::any_of(r.objects.begin(), r.objects.end(),
                                  [&](const ObjectAnnotation& o) { return part.is_unseen(o.name); });
    if (test) {
      std::vector<SplitItem> c2, c3;
      for (std::size_t i = 0; i < r.phrases.size(); ++i) {
        const auto& p = r.phrases[i];
        if (!referred_is(p, [&](const std::string& w) { return part.is_unseen(w); })) continue;
        const std::size_t k = *part.cluster_of(*p.object);
        bool same = false;
        for (const auto& o : r.objects)
          same = same || std::find(part.seen[k].begin(), part.seen[k].end(), o.name) != part.seen[k].end();
        (same ? c3 : c2).push_back({r.image_id, i, same ? "unseen object with seen same-cluster object"
                                                        : "unseen object, no seen same-cluster object"});
      }
      if (!c3.empty()) res.case3.insert(res.case3.end(), c3.begin(), c3.end());
      else res.case2.insert(res.case2.end(), c2.begin(), c2.end());
      continue;
    }
    AnnotationRecord t = r;
    std::erase_if(t.phrases, [&](const Phrase& p) { return p.object && part.is_unseen(*p.object); });
    const bool any_seen = std::any_of(t.phrases.begin(), t.phrases.end(), [&](const Phrase& p) {
      return referred_is(p, [&](const std::string& w) { return part.is_seen(w); });
    });
    if (any_seen) res.train_candidates.push_back(std::move(t));
  }
  res.certificate = audit_case23(records, part, res);
  return res;
}

// ---------------------------------------------------------------------------
// Zipf balancing

struct BalanceResult {
  std::vector<AnnotationRecord> records;
  std::map<std::size_t, std::size_t> before, after;  // per cluster annotation counts
  std::size_t threshold = 0;
  double zipf_mean = 0;
};

/// Zipf threshold for per-cluster annotation counts: with C the largest
/// count and K the number of nonempty clusters, mean = C * H_K / K; the
/// threshold is max(floor(mean), 2 * smallest count).
inline std::size_t zipf_threshold(std::vector<std::size_t> counts, double* mean_out = nullptr) {
  std::erase(counts, std::size_t{0});
  require(!counts.empty(), ErrorClass::InvalidInput, "zipf_balance: no nonempty cluster");
  const double c = static_cast<double>(*std::max_element(counts.begin(), counts.end()));
  double harmonic = 0;
  for (std::size_t r = 1; r <= counts.size(); ++r) harmonic += 1.0 / static_cast<double>(r);
  const double mean = c * harmonic / static_cast<double>(counts.size());
  if (mean_out) *mean_out = mean;
  const std::size_t lo = 2 * *std::min_element(counts.begin(), counts.end());
  return std::max(static_cast<std::size_t>(std::floor(mean + 1e-9)), lo);
}

/// Counts seen-object phrases per cluster and keeps a seeded random subset of
/// exactly `threshold` phrases in every cluster above the threshold. Records
/// left without phrases are dropped.
inline BalanceResult zipf_balance(const std::vector<AnnotationRecord>& candidates, const ClusterPartition& part,
                                  std::uint64_t seed = 0) {
  BalanceResult out;
  std::map<std::size_t, std::vector<std::pair<std::size_t, std::size_t>>> by_cluster;  // (record, phrase)
  for (std::size_t r = 0; r < candidates.size(); ++r)
    for (std::size_t p = 0; p < candidates[r].phrases.size(); ++p) {
      const auto& ph = candidates[r].phrases[p];
      if (!ph.object) continue;
      if (auto k = part.cluster_of(*ph.object)) by_cluster[*k].push_back({r, p});
    }
  std::vector<std::size_t> counts;
  for (const auto& [k, v] : by_cluster) {
    out.before[k] = v.size();
    counts.push_back(v.size());
  }
  out.threshold = zipf_threshold(counts, &out.zipf_mean);
  std::set<std::pair<std::size_t, std::size_t>> dropped;
  Rng rng(derive_seed(seed, 0x21F));
  for (auto& [k, v] : by_cluster) {
    if (v.size() > out.threshold) {
      rng.shuffle(v);
      dropped.insert(v.begin() + static_cast<std::ptrdiff_t>(out.threshold), v.end());
    }
    out.after[k] = std::min(v.size(), out.threshold);
  }
  for (std::size_t r = 0; r < candidates.size(); ++r) {
    AnnotationRecord rec = candidates[r];
    rec.phrases.clear();
    for (std::size_t p = 0; p < candidates[r].phrases.size(); ++p)
      if (!dropped.contains({r, p})) rec.phrases.push_back(candidates[r].phrases[p]);
    if (!rec.phrases.empty()) out.records.push_back(std::move(rec));
  }
  return out;
}

/// Re-counts a balanced set and checks count_k = min(before_k, threshold).
inline Certificate audit_zipf(const BalanceResult& b, const ClusterPartition& part) {
  Certificate c;
  std::map<std::size_t, std::size_t> recount;
  for (const auto& r : b.records)
    for (const auto& p : r.phrases)
      if (p.object)
        if (auto k = part.cluster_of(*p.object)) ++recount[*k];
  bool ok = true;
  for (const auto& [k, n] : b.before) {
    const std::size_t got = recount.contains(k) ? recount.at(k) : 0;
    ok = ok && got == std::min(n, b.threshold);
  }
  c.check(ok, "post-balance cluster counts equal min(original, threshold)");
  return c;
}

// ---------------------------------------------------------------------------
// Semantic distance

struct SemanticDistance {
  double distance = 0;
  std::string closest;
};

/// L2 distance from an unseen word to the closest seen word of its cluster
/// (lexicographically smallest word on ties).
inline SemanticDistance semantic_distance(const std::string& word, const ClusterPartition& part,
                                          const EmbeddingTable& table) {
  require(part.is_unseen(word), ErrorClass::InvalidInput, "semantic_distance: '" + word + "' is not unseen");
  const std::size_t k = *part.cluster_of(word);
  require(!part.seen[k].empty(), ErrorClass::ConfigError, "semantic_distance: cluster has no seen word");
  std::vector<std::string> cands = part.seen[k];
  std::sort(cands.begin(), cands.end());
  SemanticDistance best{std::numeric_limits<double>::infinity(), ""};
  const auto v = table.vector(word);
  for (const auto& s : cands) {
    const double d = l2_distance(v, table.vector(s));
    if (d < best.distance) best = {d, s};
  }
  return best;
}

// ---------------------------------------------------------------------------
// Output

inline void write_split_manifest(const std::vector<SplitItem>& items, const std::string& label, const std::string& path) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorClass::IoError, "cannot write " + path);
  for (const auto& it : items)
    out << nlohmann::json{{"image_id", it.image_id}, {"phrase", it.phrase}, {"case", label}, {"rule", it.rule}}.dump()
        << "\n";
}

inline std::string certificate_text(const Certificate& c) {
  std::ostringstream os;
  os << "certificate: " << (c.passed ? "PASS" : "FAIL") << "\n";
  for (const auto& chk : c.checks) {
    const bool bad = std::find(c.violations.begin(), c.violations.end(), chk) != c.violations.end();
    os << "  [" << (bad ? "FAIL" : "ok") << "] " << chk << "\n";
  }
  return os.str();
}

inline std::string split_report(const std::string& name, const SplitResult& s) {
  std::ostringstream os;
  os << "split: " << name << "\n";
  os << "train items: " << s.train.size() << " (" << detail::images_of(s.train).size() << " images)\n";
  os << "val items: " << s.val.size() << " (" << detail::images_of(s.val).size() << " images)\n";
  os << "test items: " << s.test.size() << " (" << detail::images_of(s.test).size() << " images)\n";
  if (!s.always_seen.empty() || !s.exclude.empty())
    os << "always seen: " << s.always_seen.size() << ", include: " << s.include.size()
       << ", exclude: " << s.exclude.size() << "\n";
  for (const auto& w : s.warnings) os << "warning: " << w << "\n";
  os << certificate_text(s.certificate);
  return os.str();
}

}  // namespace zsg
