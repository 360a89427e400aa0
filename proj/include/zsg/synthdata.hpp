#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "embedding.hpp"
#include "error.hpp"
#include "geometry.hpp"
#include "image_io.hpp"
#include "rng.hpp"
#include "sample.hpp"

namespace zsg {

// ---------------------------------------------------------------------------
// Shapes

/// A rasterizable shape. `inside` is evaluated on box-normalized coordinates
/// u, v in [-1, 1] (v grows downward); every shape touches all four box edges
/// so its bounding box is tight. `aspect` is box width / height.
struct ShapeKind {
  double aspect = 1.0;
  std::function<bool(double, double)> inside;
};

namespace detail {

inline bool band(double t, int bands) {
  const int i = std::min(bands - 1, static_cast<int>((t + 1.0) * 0.5 * bands));
  return i % 2 == 0;
}

inline bool triangle_up(double u, double v) { return std::abs(u) <= (v + 1.0) * 0.5; }

}  // namespace detail

inline const std::map<std::string, ShapeKind>& shape_registry() {
  using detail::band;
  using detail::triangle_up;
  static const std::map<std::string, ShapeKind> kinds = {
      {"disk", {1.0, [](double u, double v) { return u * u + v * v <= 1.0; }}},
      {"ring", {1.0, [](double u, double v) { double r = u * u + v * v; return r <= 1.0 && r >= 0.36; }}},
      {"oval", {1.6, [](double u, double v) { return u * u + v * v <= 1.0; }}},
      {"egg", {0.65, [](double u, double v) { return u * u + v * v <= 1.0; }}},
      {"halfdisk", {2.0, [](double u, double v) { double t = (v + 1.0) * 0.5; return u * u + t * t <= 1.0; }}},
      {"square", {1.0, [](double, double) { return true; }}},
      {"frame", {1.0, [](double u, double v) { return std::max(std::abs(u), std::abs(v)) >= 0.6; }}},
      {"diamond", {1.0, [](double u, double v) { return std::abs(u) + std::abs(v) <= 1.0; }}},
      {"window", {1.0, [](double u, double v) {
         return std::max(std::abs(u), std::abs(v)) >= 0.7 || std::abs(u) < 0.15 || std::abs(v) < 0.15; }}},
      {"notch", {1.0, [](double u, double v) { return !(u > 0.0 && v < 0.0); }}},
      {"triangle", {1.0, [](double u, double v) { return triangle_up(u, v); }}},
      {"wedge", {1.0, [](double u, double v) { return std::abs(u) <= (1.0 - v) * 0.5; }}},
      {"ramp", {1.0, [](double u, double v) { return u <= v; }}},
      {"spike", {0.5, [](double u, double v) { return triangle_up(u, v); }}},
      {"chevron", {1.0, [](double u, double v) {
         return triangle_up(u, v) && !(v > 0.2 && std::abs(u) < (v - 0.2) * 0.5); }}},
      {"plus", {1.0, [](double u, double v) { return std::abs(u) < 0.33 || std::abs(v) < 0.33; }}},
      {"xmark", {1.0, [](double u, double v) { return std::abs(u - v) < 0.45 || std::abs(u + v) < 0.45; }}},
      {"star", {1.0, [](double u, double v) { return std::sqrt(std::abs(u)) + std::sqrt(std::abs(v)) <= 1.0; }}},
      {"asterisk", {1.0, [](double u, double v) {
         return std::abs(u) < 0.2 || std::abs(v) < 0.2 || std::abs(u - v) < 0.3 || std::abs(u + v) < 0.3; }}},
      {"tee", {1.0, [](double u, double v) { return v < -0.4 || std::abs(u) < 0.3; }}},
      {"bar", {2.0, [](double, double) { return true; }}},
      {"pillar", {0.5, [](double, double) { return true; }}},
      {"stripes", {1.0, [](double, double v) { return band(v, 5); }}},
      {"columns", {1.0, [](double u, double) { return band(u, 5); }}},
      {"ladder", {0.6, [](double u, double v) { return std::abs(u) > 0.6 || band(v, 7); }}},
      {"hourglass", {1.0, [](double u, double v) { return std::abs(u) <= std::abs(v); }}},
      {"bowtie", {1.0, [](double u, double v) { return std::abs(v) <= std::abs(u); }}},
      {"checker", {1.0, [](double u, double v) { return (u < 0.0) == (v < 0.0); }}},
      {"dots", {1.0, [](double u, double v) {
         double a = std::abs(u) - 0.5, b = std::abs(v) - 0.5; return a * a + b * b <= 0.25; }}},
  };
  return kinds;
}

inline const ShapeKind& shape_kind(const std::string& visual) {
  const auto& reg = shape_registry();
  auto it = reg.find(visual);
  require(it != reg.end(), ErrorClass::InvalidInput, "unknown shape '" + visual + "'");
  return it->second;
}

/// Box of a shape with geometric-mean side `side` centred at (cx, cy).
inline Box shape_box(const std::string& visual, double side, double cx, double cy) {
  const double a = shape_kind(visual).aspect;
  const double w = side * std::sqrt(a), h = side / std::sqrt(a);
  return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
}

// ---------------------------------------------------------------------------
// Vocabulary

struct NounSpec {
  std::string word;
  std::string visual;
  bool seen = true;
  std::string synonym_of;  // seen noun this word renames; empty if none
};

struct ClusterSpec {
  std::string name;
  std::vector<NounSpec> nouns;
  bool holdout = false;  // every noun unseen; feeds the held-out category split
};

struct NamedColor {
  std::string word;
  std::array<float, 3> rgb;
};

struct SizeWord {
  std::string word;
  double min_side = 0;  // at 64 px image width
  double max_side = 0;
};

enum class Location { Any, Left, Right, Top, Bottom };

inline std::string to_string(Location l) {
  switch (l) {
    case Location::Any: return "any";
    case Location::Left: return "left";
    case Location::Right: return "right";
    case Location::Top: return "top";
    case Location::Bottom: return "bottom";
  }
  return "any";
}

inline Location parse_location(const std::string& s) {
  if (s == "any") return Location::Any;
  if (s == "left") return Location::Left;
  if (s == "right") return Location::Right;
  if (s == "top") return Location::Top;
  if (s == "bottom") return Location::Bottom;
  fail(ErrorClass::InvalidInput, "unknown location '" + s + "'");
}

inline Location opposite(Location l) {
  switch (l) {
    case Location::Left: return Location::Right;
    case Location::Right: return Location::Left;
    case Location::Top: return Location::Bottom;
    case Location::Bottom: return Location::Top;
    default: return Location::Any;
  }
}

/// Whether a box centre lies in the half named by `l`.
inline bool location_holds(Location l, const Box& b, ImageSize image) {
  switch (l) {
    case Location::Any: return true;
    case Location::Left: return b.center_x() < image.width / 2.0;
    case Location::Right: return b.center_x() > image.width / 2.0;
    case Location::Top: return b.center_y() < image.height / 2.0;
    case Location::Bottom: return b.center_y() > image.height / 2.0;
  }
  return false;
}

struct VocabSpec {
  std::vector<ClusterSpec> clusters;
  std::vector<NamedColor> colors;
  std::vector<SizeWord> sizes;
  std::vector<std::string> locations = {"left", "right", "top", "bottom"};
  std::vector<std::string> function_words = {"on", "the"};
  int embed_dim = 32;
  std::uint64_t seed = 7;

  const NounSpec* find_noun(const std::string& word) const {
    for (const auto& c : clusters)
      for (const auto& n : c.nouns)
        if (n.word == word) return &n;
    return nullptr;
  }

  const ClusterSpec* cluster_of(const std::string& word) const {
    for (const auto& c : clusters)
      for (const auto& n : c.nouns)
        if (n.word == word) return &c;
    return nullptr;
  }

  const NamedColor& color(const std::string& word) const {
    for (const auto& c : colors)
      if (c.word == word) return c;
    fail(ErrorClass::InvalidInput, "unknown color '" + word + "'");
  }

  const SizeWord& size(const std::string& word) const {
    for (const auto& s : sizes)
      if (s.word == word) return s;
    fail(ErrorClass::InvalidInput, "unknown size '" + word + "'");
  }

  std::set<std::string> seen_words() const {
    std::set<std::string> out;
    for (const auto& c : clusters)
      for (const auto& n : c.nouns)
        if (n.seen) out.insert(n.word);
    for (const auto& c : colors) out.insert(c.word);
    for (const auto& s : sizes) out.insert(s.word);
    out.insert(locations.begin(), locations.end());
    out.insert(function_words.begin(), function_words.end());
    return out;
  }

  void validate() const {
    require(!clusters.empty(), ErrorClass::ConfigError, "vocab: no clusters");
    require(!colors.empty() && !sizes.empty(), ErrorClass::ConfigError, "vocab: colors and sizes required");
    require(embed_dim >= 16, ErrorClass::ConfigError, "vocab: embed_dim must be >= 16");
    std::set<std::string> words;
    auto unique = [&](const std::string& w) {
      require(!w.empty() && words.insert(w).second, ErrorClass::ConfigError, "vocab: duplicate word '" + w + "'");
    };
    for (const auto& c : clusters) {
      bool any_seen = false;
      for (const auto& n : c.nouns) {
        unique(n.word);
        shape_kind(n.visual);
        any_seen = any_seen || n.seen;
        require(!(c.holdout && n.seen), ErrorClass::ConfigError, "vocab: held-out cluster has seen noun " + n.word);
        if (!n.synonym_of.empty()) {
          require(!n.seen, ErrorClass::ConfigError, "vocab: synonym '" + n.word + "' must be unseen");
          const NounSpec* base = nullptr;
          for (const auto& m : c.nouns)
            if (m.word == n.synonym_of) base = &m;
          require(base && base->seen, ErrorClass::ConfigError,
                  "vocab: synonym '" + n.word + "' needs a seen same-cluster base");
          require(base->visual == n.visual, ErrorClass::ConfigError, "vocab: synonyms must share a visual");
        }
      }
      require(c.holdout || any_seen, ErrorClass::ConfigError, "vocab: cluster " + c.name + " has no seen noun");
    }
    // Two nouns with the same visual must be synonyms, else "unique match" is ill-defined.
    std::map<std::string, std::string> visual_root;
    for (const auto& c : clusters)
      for (const auto& n : c.nouns) {
        const std::string root = n.synonym_of.empty() ? n.word : n.synonym_of;
        auto [it, fresh] = visual_root.emplace(n.visual, root);
        require(fresh || it->second == root, ErrorClass::ConfigError,
                "vocab: visual '" + n.visual + "' shared by unrelated nouns");
      }
    for (const auto& c : colors) unique(c.word);
    for (const auto& s : sizes) {
      unique(s.word);
      require(s.min_side > 0 && s.max_side >= s.min_side, ErrorClass::ConfigError, "vocab: bad size range");
    }
    for (const auto& l : locations) {
      unique(l);
      parse_location(l);
    }
    for (const auto& f : function_words) unique(f);
  }
};

inline VocabSpec default_vocab() {
  VocabSpec v;
  auto seen = [](std::string w, std::string vis) { return NounSpec{std::move(w), std::move(vis), true, ""}; };
  auto novel = [](std::string w, std::string vis) { return NounSpec{std::move(w), std::move(vis), false, ""}; };
  auto syn = [](std::string w, std::string vis, std::string of) {
    return NounSpec{std::move(w), std::move(vis), false, std::move(of)};
  };
  v.clusters = {
      {"round", {seen("circle", "disk"), seen("ring", "ring"), seen("oval", "oval"),
                 syn("disc", "disk", "circle"), novel("egg", "egg"), novel("halfmoon", "halfdisk")}},
      {"boxy", {seen("square", "square"), seen("frame", "frame"), seen("diamond", "diamond"),
                syn("block", "square", "square"), novel("window", "window"), novel("notch", "notch")}},
      {"pointed", {seen("triangle", "triangle"), seen("wedge", "wedge"), seen("ramp", "ramp"),
                   syn("pyramid", "triangle", "triangle"), novel("spike", "spike"), novel("chevron", "chevron")}},
      {"crossed", {seen("plus", "plus"), seen("xmark", "xmark"), seen("star", "star"),
                   syn("cross", "plus", "plus"), novel("asterisk", "asterisk"), novel("tee", "tee")}},
      {"striped", {seen("bar", "bar"), seen("pillar", "pillar"), seen("stripes", "stripes"),
                   syn("rod", "bar", "bar"), novel("columns", "columns"), novel("ladder", "ladder")}},
      {"odd",
       {novel("hourglass", "hourglass"), novel("bowtie", "bowtie"), novel("checker", "checker"), novel("dots", "dots")},
       true},
  };
  v.colors = {{"red", {0.90f, 0.12f, 0.10f}},    {"green", {0.12f, 0.75f, 0.18f}},
              {"blue", {0.15f, 0.28f, 0.95f}},   {"yellow", {0.95f, 0.90f, 0.12f}},
              {"cyan", {0.10f, 0.85f, 0.90f}},   {"magenta", {0.88f, 0.15f, 0.85f}},
              {"orange", {1.00f, 0.55f, 0.05f}}, {"white", {0.97f, 0.97f, 0.97f}}};
  v.sizes = {{"small", 18, 24}, {"medium", 25, 31}, {"large", 32, 40}};
  return v;
}

inline nlohmann::json to_json(const VocabSpec& v) {
  nlohmann::json j;
  j["embed_dim"] = v.embed_dim;
  j["seed"] = v.seed;
  j["locations"] = v.locations;
  j["function_words"] = v.function_words;
  for (const auto& c : v.clusters) {
    nlohmann::json jc{{"name", c.name}, {"holdout", c.holdout}, {"nouns", nlohmann::json::array()}};
    for (const auto& n : c.nouns)
      jc["nouns"].push_back({{"word", n.word}, {"visual", n.visual}, {"seen", n.seen}, {"synonym_of", n.synonym_of}});
    j["clusters"].push_back(jc);
  }
  for (const auto& c : v.colors) j["colors"].push_back({{"word", c.word}, {"rgb", c.rgb}});
  for (const auto& s : v.sizes) j["sizes"].push_back({{"word", s.word}, {"min_side", s.min_side}, {"max_side", s.max_side}});
  return j;
}

inline VocabSpec vocab_from_json(const nlohmann::json& j) {
  try {
    VocabSpec v;
    v.embed_dim = j.at("embed_dim").get<int>();
    v.seed = j.at("seed").get<std::uint64_t>();
    v.locations = j.at("locations").get<std::vector<std::string>>();
    v.function_words = j.at("function_words").get<std::vector<std::string>>();
    for (const auto& jc : j.at("clusters")) {
      ClusterSpec c{jc.at("name").get<std::string>(), {}, jc.at("holdout").get<bool>()};
      for (const auto& jn : jc.at("nouns"))
        c.nouns.push_back({jn.at("word").get<std::string>(), jn.at("visual").get<std::string>(),
                           jn.at("seen").get<bool>(), jn.at("synonym_of").get<std::string>()});
      v.clusters.push_back(std::move(c));
    }
    for (const auto& jc : j.at("colors"))
      v.colors.push_back({jc.at("word").get<std::string>(), jc.at("rgb").get<std::array<float, 3>>()});
    for (const auto& js : j.at("sizes"))
      v.sizes.push_back({js.at("word").get<std::string>(), js.at("min_side").get<double>(),
                         js.at("max_side").get<double>()});
    v.validate();
    return v;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorClass::InvalidInput, std::string("vocab json: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Embeddings

namespace detail {

inline std::vector<double> random_in_subspace(Rng& rng, std::size_t dim, std::size_t lo, std::size_t hi,
                                              double scale) {
  std::vector<double> v(dim, 0.0);
  for (std::size_t i = lo; i < hi; ++i) v[i] = scale * rng.normal();
  return v;
}

inline void normalize(std::vector<double>& v) {
  double n = 0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  if (n > 0)
    for (double& x : v) x /= n;
}

}  // namespace detail

inline constexpr double kMemberSigma = 0.1;
inline constexpr double kSynonymSigma = 0.02;

/// Cluster-structured synthetic embeddings. Nouns live in the first half of
/// the dimensions, colours in the next quarter, sizes and location/function
/// words share the rest. Rows are unit-normalised.
inline EmbeddingTable synth_embeddings(const VocabSpec& vocab) {
  vocab.validate();
  const std::size_t d = static_cast<std::size_t>(vocab.embed_dim);
  const std::size_t noun_end = d / 2, color_end = noun_end + d / 4;
  const std::size_t size_end = color_end + (d - color_end) / 2;
  Rng rng(derive_seed(vocab.seed, 0xE3B));
  EmbeddingTable table(d);
  for (const auto& c : vocab.clusters) {
    auto center = detail::random_in_subspace(rng, d, 0, noun_end, 1.0);
    detail::normalize(center);
    std::map<std::string, std::vector<double>> base;
    for (const auto& n : c.nouns) {
      if (!n.synonym_of.empty()) continue;
      auto v = center;
      for (std::size_t i = 0; i < noun_end; ++i) v[i] += kMemberSigma * rng.normal();
      detail::normalize(v);
      base[n.word] = v;
    }
    for (const auto& n : c.nouns) {
      if (n.synonym_of.empty()) {
        table.add(n.word, base.at(n.word));
      } else {
        auto v = base.at(n.synonym_of);
        for (std::size_t i = 0; i < noun_end; ++i) v[i] += kSynonymSigma * rng.normal();
        detail::normalize(v);
        table.add(n.word, v);
      }
    }
  }
  auto add_group = [&](const std::vector<std::string>& words, std::size_t lo, std::size_t hi) {
    for (const auto& w : words) {
      auto v = detail::random_in_subspace(rng, d, lo, hi, 1.0);
      detail::normalize(v);
      table.add(w, v);
    }
  };
  std::vector<std::string> colors, sizes, rest = vocab.locations;
  for (const auto& c : vocab.colors) colors.push_back(c.word);
  for (const auto& s : vocab.sizes) sizes.push_back(s.word);
  rest.insert(rest.end(), vocab.function_words.begin(), vocab.function_words.end());
  add_group(colors, noun_end, color_end);
  add_group(sizes, color_end, size_end);
  add_group(rest, size_end, d);
  return table;
}

/// L2 distance from `noun` to its closest seen noun in the same cluster, or to
/// the closest seen noun anywhere when its cluster has none.
inline double semantic_distance_of(const VocabSpec& vocab, const EmbeddingTable& table, const std::string& noun) {
  const ClusterSpec* own = vocab.cluster_of(noun);
  require(own != nullptr, ErrorClass::InvalidInput, "unknown noun '" + noun + "'");
  auto best_in = [&](bool same_cluster) {
    double best = -1;
    for (const auto& c : vocab.clusters) {
      if (same_cluster && &c != own) continue;
      for (const auto& n : c.nouns)
        if (n.seen && n.word != noun) {
          const double dist = l2_distance(table.vector(noun), table.vector(n.word));
          if (best < 0 || dist < best) best = dist;
        }
    }
    return best;
  };
  const double same = best_in(true);
  return same >= 0 ? same : best_in(false);
}

// ---------------------------------------------------------------------------
// Rendering

struct ShapeSpec {
  std::string visual;
  std::array<float, 3> rgb{1, 1, 1};
  double side = 20;  // geometric-mean side in pixels
  Location where = Location::Any;
  std::optional<std::array<double, 2>> center;  // fixed centre; skips sampling
};

struct RenderedScene {
  ImageSize size;
  std::vector<float> pixels;  // planar RGB, 8-bit quantised values in [0, 1]
  std::vector<Box> boxes;     // one per shape, in input order
};

inline constexpr double kMaxShapeOverlap = 0.2;
inline constexpr int kPlacementTries = 100;
inline constexpr int kSupersample = 4;

namespace detail {

inline void paint_background(std::vector<float>& px, ImageSize size, Rng& rng) {
  const std::size_t hw = static_cast<std::size_t>(size.width * size.height);
  const double base = rng.uniform(0.22, 0.42);
  std::array<double, 3> tint{rng.uniform(-0.04, 0.04), rng.uniform(-0.04, 0.04), rng.uniform(-0.04, 0.04)};
  const double fx = rng.uniform(0.1, 0.5), fy = rng.uniform(0.1, 0.5);
  const double px0 = rng.uniform(0, 6.3), py0 = rng.uniform(0, 6.3);
  const double amp = rng.uniform(0.02, 0.07);
  for (int y = 0; y < size.height; ++y)
    for (int x = 0; x < size.width; ++x) {
      const double wave = amp * std::sin(fx * x + px0) * std::sin(fy * y + py0);
      const std::size_t i = static_cast<std::size_t>(y * size.width + x);
      for (std::size_t c = 0; c < 3; ++c)
        px[c * hw + i] = static_cast<float>(base + tint[c] + wave + 0.025 * rng.normal());
    }
}

inline void paint_shape(std::vector<float>& px, ImageSize size, const ShapeKind& kind, const Box& b,
                        const std::array<float, 3>& rgb) {
  const std::size_t hw = static_cast<std::size_t>(size.width * size.height);
  const int x0 = std::max(0, static_cast<int>(std::floor(b.x1)));
  const int x1 = std::min(size.width, static_cast<int>(std::ceil(b.x2)));
  const int y0 = std::max(0, static_cast<int>(std::floor(b.y1)));
  const int y1 = std::min(size.height, static_cast<int>(std::ceil(b.y2)));
  const double hw_box = b.width() / 2, hh_box = b.height() / 2;
  const double cx = b.center_x(), cy = b.center_y();
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSupersample; ++sy)
        for (int sx = 0; sx < kSupersample; ++sx) {
          const double qx = x + (sx + 0.5) / kSupersample, qy = y + (sy + 0.5) / kSupersample;
          const double u = (qx - cx) / hw_box, v = (qy - cy) / hh_box;
          if (std::abs(u) <= 1.0 && std::abs(v) <= 1.0 && kind.inside(u, v)) ++hits;
        }
      if (hits == 0) continue;
      const float a = static_cast<float>(hits) / (kSupersample * kSupersample);
      const std::size_t i = static_cast<std::size_t>(y * size.width + x);
      for (std::size_t c = 0; c < 3; ++c) px[c * hw + i] = (1 - a) * px[c * hw + i] + a * rgb[c];
    }
}

}  // namespace detail

/// Places and rasterises 1-4 shapes. Positions are rejection-sampled so that
/// each box lies inside the image, honours its location constraint, and
/// overlaps every earlier box by IoU <= 0.2.
inline RenderedScene render_scene(const std::vector<ShapeSpec>& shapes, ImageSize size, std::uint64_t seed) {
  require(!shapes.empty() && shapes.size() <= 4, ErrorClass::InvalidInput, "render_scene: need 1-4 shapes");
  require(size.width > 0 && size.height > 0, ErrorClass::InvalidInput, "render_scene: empty image");
  Rng rng(seed);
  RenderedScene scene{size, std::vector<float>(3 * static_cast<std::size_t>(size.width * size.height)), {}};
  detail::paint_background(scene.pixels, size, rng);
  for (const auto& s : shapes) {
    shape_kind(s.visual);  // rejects unknown shapes
    require(std::isfinite(s.side) && s.side > 0, ErrorClass::InvalidInput, "render_scene: degenerate shape");
    const Box proto = shape_box(s.visual, s.side, 0, 0);
    require(proto.width() <= size.width && proto.height() <= size.height, ErrorClass::InvalidInput,
            "render_scene: shape larger than image");
    std::optional<Box> placed;
    for (int t = 0; t < kPlacementTries && !placed; ++t) {
      double cx, cy;
      if (s.center) {
        cx = (*s.center)[0];
        cy = (*s.center)[1];
      } else {
        cx = rng.uniform(proto.width() / 2, size.width - proto.width() / 2);
        cy = rng.uniform(proto.height() / 2, size.height - proto.height() / 2);
      }
      const Box b = shape_box(s.visual, s.side, cx, cy);
      if (b.x1 < 0 || b.y1 < 0 || b.x2 > size.width || b.y2 > size.height) continue;
      if (!location_holds(s.where, b, size)) continue;
      bool ok = true;
      for (const auto& other : scene.boxes) ok = ok && iou(b, other) <= kMaxShapeOverlap;
      if (ok) placed = b;
    }
    if (!placed) fail(ErrorClass::PlacementError, "render_scene: no valid placement for " + s.visual);
    scene.boxes.push_back(*placed);
  }
  for (std::size_t i = 0; i < shapes.size(); ++i)
    detail::paint_shape(scene.pixels, size, shape_kind(shapes[i].visual), scene.boxes[i], shapes[i].rgb);
  for (float& v : scene.pixels) v = static_cast<float>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)) / 255.0f;
  return scene;
}

// ---------------------------------------------------------------------------
// Benchmark generation

struct SplitSizes {
  std::size_t train = 5000, val = 500, case0 = 500, case1 = 500, case2 = 500, case3 = 500;

  std::size_t of(CaseLabel c) const {
    switch (c) {
      case CaseLabel::Train: return train;
      case CaseLabel::Val: return val;
      case CaseLabel::Case0: return case0;
      case CaseLabel::Case1: return case1;
      case CaseLabel::Case2: return case2;
      case CaseLabel::Case3: return case3;
    }
    return 0;
  }
};

inline const std::vector<CaseLabel>& all_case_labels() {
  static const std::vector<CaseLabel> labels = {CaseLabel::Train, CaseLabel::Val,   CaseLabel::Case0,
                                                CaseLabel::Case1, CaseLabel::Case2, CaseLabel::Case3};
  return labels;
}

struct SynthOptions {
  ImageSize image{64, 64};
  std::uint64_t seed = 1;
  int min_objects = 1;  // case3 always has at least 2
  int max_objects = 4;
};

struct Benchmark {
  VocabSpec vocab;
  EmbeddingTable table;
  ImageSize image;
  std::map<CaseLabel, std::vector<GroundingSample>> splits;
};

enum class QueryForm { ColorNoun, SizeColorNoun, NounLocation };

/// Parsed query of the synthetic grammar.
struct SynthQuery {
  QueryForm form = QueryForm::ColorNoun;
  std::string noun, color, size;
  Location where = Location::Any;
};

inline std::string render_query(const SynthQuery& q) {
  switch (q.form) {
    case QueryForm::ColorNoun: return q.color + " " + q.noun;
    case QueryForm::SizeColorNoun: return q.size + " " + q.color + " " + q.noun;
    case QueryForm::NounLocation: return q.noun + " on the " + to_string(q.where);
  }
  return q.noun;
}

inline SynthQuery parse_synth_query(const std::string& text) {
  const auto w = split_words(text);
  SynthQuery q;
  if (w.size() == 2) {
    q = {QueryForm::ColorNoun, w[1], w[0], "", Location::Any};
  } else if (w.size() == 3) {
    q = {QueryForm::SizeColorNoun, w[2], w[1], w[0], Location::Any};
  } else if (w.size() == 4 && w[1] == "on" && w[2] == "the") {
    q = {QueryForm::NounLocation, w[0], "", "", parse_location(w[3])};
  } else {
    fail(ErrorClass::InvalidInput, "query outside the synthetic grammar: '" + text + "'");
  }
  return q;
}

/// Whether an object satisfies the query. Nouns match by rendered visual, so a
/// synonym and its base refer to the same objects.
inline bool object_matches(const VocabSpec& vocab, const SynthQuery& q, const SceneObject& o, ImageSize image) {
  const NounSpec* qn = vocab.find_noun(q.noun);
  const NounSpec* on = vocab.find_noun(o.noun);
  if (!qn || !on || qn->visual != on->visual) return false;
  switch (q.form) {
    case QueryForm::ColorNoun: return o.color == q.color;
    case QueryForm::SizeColorNoun: return o.color == q.color && o.size == q.size;
    case QueryForm::NounLocation: return location_holds(q.where, o.box, image);
  }
  return false;
}

namespace detail {

struct NounPools {
  std::vector<std::string> seen;
  std::vector<std::string> synonyms;
  std::vector<std::string> novel;    // unseen, non-synonym, regular cluster
  std::vector<std::string> holdout;
};

inline NounPools noun_pools(const VocabSpec& v) {
  NounPools p;
  for (const auto& c : v.clusters)
    for (const auto& n : c.nouns) {
      if (c.holdout) p.holdout.push_back(n.word);
      else if (n.seen) p.seen.push_back(n.word);
      else if (!n.synonym_of.empty()) p.synonyms.push_back(n.word);
      else p.novel.push_back(n.word);
    }
  return p;
}

template <class T>
const T& pick(Rng& rng, const std::vector<T>& v) {
  return v[rng.below(v.size())];
}

inline constexpr int kSampleAttempts = 200;

inline GroundingSample make_sample(const VocabSpec& vocab, const EmbeddingTable& table, const NounPools& pools,
                                   const SynthOptions& opt, CaseLabel label, std::size_t index, std::uint64_t seed) {
  Rng rng(seed);
  const ImageSize image = opt.image;
  const double scale = image.width / 64.0;
  for (int attempt = 0; attempt < kSampleAttempts; ++attempt) {
    // Target noun and distractor pool.
    std::string target;
    switch (label) {
      case CaseLabel::Train:
      case CaseLabel::Val: target = pick(rng, pools.seen); break;
      case CaseLabel::Case0: target = pick(rng, pools.synonyms); break;
      case CaseLabel::Case1: target = pick(rng, pools.holdout); break;
      case CaseLabel::Case2:
      case CaseLabel::Case3: target = pick(rng, pools.novel); break;
    }
    const ClusterSpec* cluster = vocab.cluster_of(target);
    std::vector<std::string> distractor_pool, same_cluster_seen;
    for (const auto& n : pools.seen) {
      const bool same = vocab.cluster_of(n) == cluster;
      if (same) same_cluster_seen.push_back(n);
      if (!(label == CaseLabel::Case2 && same)) distractor_pool.push_back(n);
    }
    if (label == CaseLabel::Case3 && same_cluster_seen.empty()) continue;

    SynthQuery q;
    q.noun = target;
    q.color = pick(rng, vocab.colors).word;
    q.size = pick(rng, vocab.sizes).word;
    q.form = static_cast<QueryForm>(rng.below(3));
    if (q.form == QueryForm::NounLocation) q.where = parse_location(pick(rng, vocab.locations));

    const int lo = label == CaseLabel::Case3 ? std::max(2, opt.min_objects) : opt.min_objects;
    const int n_objects = lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(opt.max_objects - lo + 1)));

    std::vector<SceneObject> objects{{target, q.color, q.size, {}}};
    std::vector<ShapeSpec> specs;
    const bool seen_target = vocab.find_noun(target)->seen;
    const std::string target_visual = vocab.find_noun(target)->visual;
    for (int k = 1; k < n_objects; ++k) {
      SceneObject o;
      const double r = rng.uniform();
      if (label == CaseLabel::Case3 && k == 1) {
        o.noun = pick(rng, same_cluster_seen);
      } else if (r < 0.35) {
        // Same referent, different attributes: forces attention to modifiers.
        if (seen_target) o.noun = target;
        else if (const NounSpec* t = vocab.find_noun(target); !t->synonym_of.empty()) o.noun = t->synonym_of;
        else o.noun = pick(rng, distractor_pool);
      } else {
        o.noun = pick(rng, distractor_pool);
      }
      o.color = rng.uniform() < 0.3 ? q.color : pick(rng, vocab.colors).word;
      o.size = pick(rng, vocab.sizes).word;
      objects.push_back(o);
    }
    for (std::size_t k = 0; k < objects.size(); ++k) {
      const auto& o = objects[k];
      const SizeWord& sw = vocab.size(o.size);
      ShapeSpec s{vocab.find_noun(o.noun)->visual, vocab.color(o.color).rgb,
                  rng.uniform(sw.min_side, sw.max_side) * scale, Location::Any, std::nullopt};
      for (auto& c : s.rgb) c = std::clamp(c + static_cast<float>(rng.uniform(-0.04, 0.04)), 0.0f, 1.0f);
      if (q.form == QueryForm::NounLocation)
        s.where = k == 0 ? q.where : (s.visual == target_visual ? opposite(q.where) : Location::Any);
      specs.push_back(s);
    }
    RenderedScene scene;
    try {
      scene = render_scene(specs, image, rng.next());
    } catch (const Error& e) {
      if (e.error_class() == ErrorClass::PlacementError) continue;
      throw;
    }
    for (std::size_t k = 0; k < objects.size(); ++k) objects[k].box = scene.boxes[k];
    int matches = 0;
    for (const auto& o : objects) matches += object_matches(vocab, q, o, image) ? 1 : 0;
    if (matches != 1) continue;

    GroundingSample s;
    s.id = to_string(label) + "_" + std::to_string(index);
    s.image_size = image;
    s.pixels = std::move(scene.pixels);
    s.query = render_query(q);
    s.tokens = table.tokenize(s.query);
    s.gt = objects[0].box;
    s.label = label;
    s.noun = target;
    s.objects = std::move(objects);
    s.category = cluster->name;
    if (!vocab.find_noun(target)->seen) s.semantic_distance = semantic_distance_of(vocab, table, target);
    return s;
  }
  fail(ErrorClass::GenerationError, "could not generate " + to_string(label) + " sample " + std::to_string(index));
}

}  // namespace detail

/// Generates one split. Each sample uses a seed derived from (seed, split,
/// index), so the output does not depend on generation order.
inline std::vector<GroundingSample> generate_split(const VocabSpec& vocab, const EmbeddingTable& table,
                                                   CaseLabel label, std::size_t count, const SynthOptions& opt) {
  const auto pools = detail::noun_pools(vocab);
  auto need = [&](bool ok, const std::string& what) {
    require(count == 0 || ok, ErrorClass::GenerationError,
            to_string(label) + " split needs " + what + " in the vocabulary");
  };
  need(!pools.seen.empty(), "seen nouns");
  switch (label) {
    case CaseLabel::Case0: need(!pools.synonyms.empty(), "unseen synonyms"); break;
    case CaseLabel::Case1: need(!pools.holdout.empty(), "a held-out cluster"); break;
    case CaseLabel::Case2: {
      bool ok = !pools.novel.empty();
      for (const auto& n : pools.novel) {
        // case2 needs distractor nouns from other clusters when scenes have >1 object
        std::size_t other = 0;
        for (const auto& s : pools.seen) other += vocab.cluster_of(s) != vocab.cluster_of(n) ? 1 : 0;
        ok = ok && (other > 0 || opt.max_objects == 1);
      }
      need(ok, "novel unseen nouns and other-cluster seen nouns");
      break;
    }
    case CaseLabel::Case3: need(!pools.novel.empty() && opt.max_objects >= 2, "novel unseen nouns and room for 2 objects"); break;
    default: break;
  }
  require(opt.min_objects >= 1 && opt.max_objects <= 4 && opt.min_objects <= opt.max_objects, ErrorClass::ConfigError,
          "synth: object count range must lie in [1, 4]");
  std::vector<GroundingSample> out;
  out.reserve(count);
  const std::uint64_t split_seed = derive_seed(opt.seed, static_cast<std::uint64_t>(label) + 1);
  for (std::size_t i = 0; i < count; ++i)
    out.push_back(detail::make_sample(vocab, table, pools, opt, label, i, derive_seed(split_seed, i)));
  return out;
}

inline Benchmark generate_benchmark(const VocabSpec& vocab, const SplitSizes& sizes, const SynthOptions& opt) {
  vocab.validate();
  Benchmark bm{vocab, synth_embeddings(vocab), opt.image, {}};
  for (CaseLabel c : all_case_labels()) bm.splits[c] = generate_split(vocab, bm.table, c, sizes.of(c), opt);
  return bm;
}

// ---------------------------------------------------------------------------
// Audits

/// Checks every case predicate and grammar property on a split; returns one
/// message per violation.
inline std::vector<std::string> audit_split(const VocabSpec& vocab, const std::vector<GroundingSample>& samples,
                                            CaseLabel label) {
  std::vector<std::string> bad;
  const auto seen = vocab.seen_words();
  for (const auto& s : samples) {
    auto flag = [&](const std::string& why) { bad.push_back(s.id + ": " + why); };
    if (s.label != label) flag("wrong case label");
    if (!(s.gt.is_valid() && s.gt.area() > 0 && s.gt.x1 >= 0 && s.gt.y1 >= 0 && s.gt.x2 <= s.image_size.width &&
          s.gt.y2 <= s.image_size.height))
      flag("gt box invalid or outside image");
    const SynthQuery q = parse_synth_query(s.query);
    const NounSpec* noun = vocab.find_noun(q.noun);
    const ClusterSpec* cluster = vocab.cluster_of(q.noun);
    if (!noun || !cluster) {
      flag("query noun not in vocabulary");
      continue;
    }
    int matches = 0;
    for (const auto& o : s.objects) matches += object_matches(vocab, q, o, s.image_size) ? 1 : 0;
    if (matches != 1) flag("query matches " + std::to_string(matches) + " objects");
    if (s.objects.empty() || !object_matches(vocab, q, s.objects.front(), s.image_size) ||
        iou(s.objects.front().box, s.gt) < 1.0 - 1e-12)
      flag("gt is not the matching object");
    if (q.form == QueryForm::NounLocation && !location_holds(q.where, s.gt, s.image_size))
      flag("location word not truthful");
    bool same_cluster_seen = false;
    for (const auto& o : s.objects) {
      const NounSpec* on = vocab.find_noun(o.noun);
      if (on && on->seen && vocab.cluster_of(o.noun) == cluster && o.noun != q.noun) same_cluster_seen = true;
    }
    switch (label) {
      case CaseLabel::Train:
      case CaseLabel::Val:
        for (const auto& w : split_words(s.query))
          if (!seen.contains(w)) flag("unseen word '" + w + "' in query");
        break;
      case CaseLabel::Case0:
        if (noun->seen || noun->synonym_of.empty()) flag("case0 query noun is not an unseen synonym");
        break;
      case CaseLabel::Case1:
        if (!cluster->holdout) flag("case1 noun outside the held-out cluster");
        break;
      case CaseLabel::Case2:
        if (noun->seen || !noun->synonym_of.empty() || cluster->holdout) flag("case2 noun is not a novel unseen noun");
        if (same_cluster_seen) flag("case2 image contains a same-cluster seen object");
        break;
      case CaseLabel::Case3:
        if (noun->seen || !noun->synonym_of.empty() || cluster->holdout) flag("case3 noun is not a novel unseen noun");
        if (!same_cluster_seen) flag("case3 image lacks a same-cluster seen object");
        break;
    }
  }
  return bad;
}

inline std::vector<std::string> audit_benchmark(const Benchmark& bm, const SplitSizes& sizes) {
  std::vector<std::string> bad;
  for (CaseLabel c : all_case_labels()) {
    auto it = bm.splits.find(c);
    const std::size_t n = it == bm.splits.end() ? 0 : it->second.size();
    if (n != sizes.of(c))
      bad.push_back(to_string(c) + ": " + std::to_string(n) + " samples, expected " + std::to_string(sizes.of(c)));
    if (it != bm.splits.end()) {
      auto v = audit_split(bm.vocab, it->second, c);
      bad.insert(bad.end(), v.begin(), v.end());
    }
  }
  return bad;
}

// ---------------------------------------------------------------------------
// On-disk layout: <dir>/vocab.json, <dir>/embeddings.txt,
// <dir>/<split>.jsonl and <dir>/images/<split>/<id>.ppm

inline nlohmann::json manifest_record(const GroundingSample& s, const std::string& image_path) {
  nlohmann::json j;
  j["id"] = s.id;
  j["image"] = image_path;
  j["width"] = s.image_size.width;
  j["height"] = s.image_size.height;
  j["query"] = s.query;
  j["tokens"] = s.tokens;
  j["gt"] = {s.gt.x1, s.gt.y1, s.gt.x2, s.gt.y2};
  j["case"] = to_string(s.label);
  j["noun"] = s.noun;
  j["category"] = s.category;
  j["semantic_distance"] = s.semantic_distance;
  j["objects"] = nlohmann::json::array();
  for (const auto& o : s.objects)
    j["objects"].push_back(
        {{"noun", o.noun}, {"color", o.color}, {"size", o.size}, {"box", {o.box.x1, o.box.y1, o.box.x2, o.box.y2}}});
  return j;
}

namespace detail {

inline Box box_from_json(const nlohmann::json& j) {
  require(j.is_array() && j.size() == 4, ErrorClass::InvalidInput, "box must be [x1, y1, x2, y2]");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

}  // namespace detail

inline void write_benchmark(const Benchmark& bm, const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec, ErrorClass::IoError, "cannot create " + dir);
  {
    std::ofstream v(fs::path(dir) / "vocab.json");
    require(static_cast<bool>(v), ErrorClass::IoError, "cannot write vocab.json");
    nlohmann::json j = to_json(bm.vocab);
    j["image"] = {bm.image.width, bm.image.height};
    v << j.dump(2) << "\n";
  }
  write_embedding_file(bm.table, (fs::path(dir) / "embeddings.txt").string());
  for (const auto& [label, samples] : bm.splits) {
    const std::string name = to_string(label);
    fs::create_directories(fs::path(dir) / "images" / name, ec);
    require(!ec, ErrorClass::IoError, "cannot create image directory");
    std::ofstream m(fs::path(dir) / (name + ".jsonl"));
    require(static_cast<bool>(m), ErrorClass::IoError, "cannot write manifest " + name);
    for (const auto& s : samples) {
      const std::string rel = "images/" + name + "/" + s.id + ".ppm";
      write_ppm((fs::path(dir) / rel).string(), s.image_size, s.pixels);
      m << manifest_record(s, rel).dump() << "\n";
    }
  }
}

inline VocabSpec read_vocab(const std::string& dir) {
  std::ifstream in(std::filesystem::path(dir) / "vocab.json");
  require(static_cast<bool>(in), ErrorClass::IoError, "cannot open " + dir + "/vocab.json");
  try {
    return vocab_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorClass::InvalidInput, std::string("vocab.json: ") + e.what());
  }
}

/// Loads one split. Tokens are re-derived from the query with `table`.
inline std::vector<GroundingSample> read_split(const std::string& dir, CaseLabel label, const EmbeddingTable& table) {
  namespace fs = std::filesystem;
  const fs::path manifest = fs::path(dir) / (to_string(label) + ".jsonl");
  std::ifstream in(manifest);
  require(static_cast<bool>(in), ErrorClass::IoError, "cannot open manifest " + manifest.string());
  std::vector<GroundingSample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      GroundingSample s;
      s.id = j.at("id").get<std::string>();
      s.query = j.at("query").get<std::string>();
      s.tokens = table.tokenize(s.query);
      s.gt = detail::box_from_json(j.at("gt"));
      s.label = parse_case_label(j.at("case").get<std::string>());
      s.noun = j.value("noun", "");
      s.category = j.value("category", "");
      s.semantic_distance = j.value("semantic_distance", -1.0);
      for (const auto& o : j.value("objects", nlohmann::json::array()))
        s.objects.push_back({o.at("noun").get<std::string>(), o.at("color").get<std::string>(),
                             o.at("size").get<std::string>(), detail::box_from_json(o.at("box"))});
      s.pixels = read_ppm((fs::path(dir) / j.at("image").get<std::string>()).string(), &s.image_size);
      out.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorClass::InvalidInput, manifest.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace zsg
