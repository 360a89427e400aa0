#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <set>
#include <vector>

#include "zsg/synthdata.hpp"

using namespace zsg;
using Catch::Approx;

namespace {

// Bounding box of pixels whose color is within `tol` of rgb.
Box painted_extent(const std::vector<float>& px, ImageSize size, std::array<float, 3> rgb, float tol = 0.02f) {
  const std::size_t plane = static_cast<std::size_t>(size.width * size.height);
  double x1 = 1e9, y1 = 1e9, x2 = -1, y2 = -1;
  for (int y = 0; y < size.height; ++y)
    for (int x = 0; x < size.width; ++x) {
      const std::size_t i = static_cast<std::size_t>(y * size.width + x);
      bool match = true;
      for (int c = 0; c < 3; ++c) match = match && std::abs(px[c * plane + i] - rgb[c]) <= tol;
      if (!match) continue;
      x1 = std::min<double>(x1, x);
      y1 = std::min<double>(y1, y);
      x2 = std::max<double>(x2, x + 1);
      y2 = std::max<double>(y2, y + 1);
    }
  return {x1, y1, x2, y2};
}

}  // namespace

TEST_CASE("default vocabulary", "[synthdata][vocab]") {
  const VocabSpec v = default_vocab();
  REQUIRE_NOTHROW(v.validate());
  std::size_t regular = 0;
  for (const auto& c : v.clusters) {
    if (c.holdout) continue;
    ++regular;
    REQUIRE(c.nouns.size() == 6);
    std::size_t seen = 0;
    for (const auto& n : c.nouns) seen += n.seen;
    REQUIRE(seen == 3);
  }
  REQUIRE(regular == 5);
  REQUIRE(v.colors.size() == 8);
  REQUIRE(v.sizes.size() == 3);
  REQUIRE(v.locations.size() == 4);
  const auto back = vocab_from_json(to_json(v));
  REQUIRE(to_json(back) == to_json(v));
}

TEST_CASE("vocabulary validation errors", "[synthdata][vocab][errors]") {
  auto v = default_vocab();
  v.clusters.back().nouns[0].seen = true;
  REQUIRE_THROWS_AS(v.validate(), Error);
  auto w = default_vocab();
  w.clusters[0].nouns[3].visual = "ring";
  REQUIRE_THROWS_AS(w.validate(), Error);
  auto x = default_vocab();
  x.clusters[1].nouns[4].visual = "disk";
  REQUIRE_THROWS_AS(x.validate(), Error);
}

TEST_CASE("synthetic embeddings", "[synthdata][embedding]") {
  double cross_sum = 0;
  int cross_n = 0;
  for (std::uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
    auto v = default_vocab();
    v.seed = seed;
    const auto t = synth_embeddings(v);
    for (const auto& c : v.clusters)
      for (const auto& n : c.nouns) {
        if (!n.synonym_of.empty()) REQUIRE(cosine_similarity(t.vector(n.word), t.vector(n.synonym_of)) > 0.98);
        if (!n.seen && !n.synonym_of.empty()) REQUIRE(t.contains(n.word));
      }
    for (std::size_t a = 0; a < v.clusters.size(); ++a)
      for (std::size_t b = a + 1; b < v.clusters.size(); ++b) {
        cross_sum += cosine_similarity(t.vector(v.clusters[a].nouns[0].word), t.vector(v.clusters[b].nouns[0].word));
        ++cross_n;
      }
    REQUIRE(synth_embeddings(v) == t);
  }
  REQUIRE(cross_sum / cross_n < 0.5);
}

TEST_CASE("rendering contracts", "[synthdata][render]") {
  const ImageSize size{64, 64};
  const std::array<float, 3> red{0.9f, 0.12f, 0.1f};
  for (double side : {18.0, 25.0, 33.0, 40.0}) {
    const auto scene = render_scene({{"square", red, side, Location::Any, std::array<double, 2>{32, 32}}}, size, 4);
    const Box& b = scene.boxes[0];
    REQUIRE(b.width() == Approx(side).margin(1.0));
    REQUIRE(b.height() == Approx(side).margin(1.0));
    REQUIRE(b.center_x() == Approx(32));
    // the painted square fills its box to within a pixel of anti-aliasing
    const Box ext = painted_extent(scene.pixels, size, red, 0.03f);
    REQUIRE(ext.x1 >= b.x1 - 1);
    REQUIRE(ext.x2 <= b.x2 + 1);
    REQUIRE(ext.width() >= side - 2);
  }

  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const auto s = render_scene({{"disk", red, 30, Location::Any, {}}, {"plus", red, 30, Location::Any, {}}}, size,
                                rng.next());
    REQUIRE(iou(s.boxes[0], s.boxes[1]) <= kMaxShapeOverlap);
    for (const auto& b : s.boxes) {
      REQUIRE(b.x1 >= 0);
      REQUIRE(b.x2 <= 64);
    }
  }

  const auto a = render_scene({{"star", red, 28, Location::Left, {}}}, size, 99);
  const auto b = render_scene({{"star", red, 28, Location::Left, {}}}, size, 99);
  REQUIRE(a.pixels == b.pixels);
  REQUIRE(a.boxes[0].center_x() < 32);

  std::vector<ShapeSpec> crowded(3, {"square", red, 40, Location::Any, std::array<double, 2>{32, 32}});
  try {
    render_scene(crowded, size, 1);
    FAIL("expected a placement error");
  } catch (const Error& e) {
    REQUIRE(e.error_class() == ErrorClass::PlacementError);
  }
}

TEST_CASE("benchmark generation satisfies every case predicate", "[synthdata][generate]") {
  const SplitSizes sizes{300, 60, 60, 60, 60, 60};
  SynthOptions opt;
  opt.seed = 21;
  const auto bm = generate_benchmark(default_vocab(), sizes, opt);
  REQUIRE(audit_benchmark(bm, sizes).empty());
  const auto seen = bm.vocab.seen_words();
  for (CaseLabel c : all_case_labels()) {
    const auto& split = bm.splits.at(c);
    REQUIRE(split.size() == sizes.of(c));
    for (const auto& s : split) {
      const auto q = parse_synth_query(s.query);
      int matches = 0;
      for (const auto& o : s.objects) matches += object_matches(bm.vocab, q, o, s.image_size);
      REQUIRE(matches == 1);
      if (q.form == QueryForm::NounLocation) {
        if (q.where == Location::Left) REQUIRE(s.gt.center_x() < 32);
        if (q.where == Location::Right) REQUIRE(s.gt.center_x() > 32);
        if (q.where == Location::Top) REQUIRE(s.gt.center_y() < 32);
        if (q.where == Location::Bottom) REQUIRE(s.gt.center_y() > 32);
      }
      if (c == CaseLabel::Train) {
        for (const auto& w : split_words(s.query)) REQUIRE(seen.contains(w));
      }
      // sizes scale with the image and stay inside the named band
      if (q.form == QueryForm::SizeColorNoun) {
        const auto& band = bm.vocab.size(q.size);
        const double side = std::sqrt(s.gt.width() * s.gt.height());
        REQUIRE(side >= band.min_side - 1.0);
        REQUIRE(side <= band.max_side + 1.0);
      }
    }
  }
  for (const auto& s : bm.splits.at(CaseLabel::Case3)) {
    const ClusterSpec* cl = bm.vocab.cluster_of(s.noun);
    bool has = false;
    for (const auto& o : s.objects) has = has || (bm.vocab.find_noun(o.noun)->seen && bm.vocab.cluster_of(o.noun) == cl);
    REQUIRE(has);
  }
  for (const auto& s : bm.splits.at(CaseLabel::Case2)) {
    const ClusterSpec* cl = bm.vocab.cluster_of(s.noun);
    for (const auto& o : s.objects) REQUIRE(!(bm.vocab.find_noun(o.noun)->seen && bm.vocab.cluster_of(o.noun) == cl));
  }
  for (const auto& s : bm.splits.at(CaseLabel::Case1)) REQUIRE(bm.vocab.cluster_of(s.noun)->holdout);

  const auto again = generate_benchmark(default_vocab(), sizes, opt);
  for (CaseLabel c : all_case_labels())
    for (std::size_t i = 0; i < sizes.of(c); ++i) {
      REQUIRE(again.splits.at(c)[i].query == bm.splits.at(c)[i].query);
      REQUIRE(again.splits.at(c)[i].pixels == bm.splits.at(c)[i].pixels);
    }
}

TEST_CASE("audit catches a corrupted sample", "[synthdata][audit]") {
  const SplitSizes sizes{20, 0, 0, 0, 0, 0};
  auto bm = generate_benchmark(default_vocab(), sizes, SynthOptions{});
  auto split = bm.splits.at(CaseLabel::Train);
  split[0].query = "red disc";
  REQUIRE_FALSE(audit_split(bm.vocab, split, CaseLabel::Train).empty());
  REQUIRE_FALSE(audit_benchmark(bm, SplitSizes{21, 0, 0, 0, 0, 0}).empty());
}

TEST_CASE("generation errors", "[synthdata][errors]") {
  auto v = default_vocab();
  for (auto& c : v.clusters)
    std::erase_if(c.nouns, [](const NounSpec& n) { return !n.synonym_of.empty(); });
  const auto t = synth_embeddings(v);
  try {
    generate_split(v, t, CaseLabel::Case0, 5, SynthOptions{});
    FAIL("expected a generation error");
  } catch (const Error& e) {
    REQUIRE(e.error_class() == ErrorClass::GenerationError);
  }
  REQUIRE(generate_split(v, t, CaseLabel::Case0, 0, SynthOptions{}).empty());
}

TEST_CASE("benchmark disk round trip", "[synthdata][io]") {
  const SplitSizes sizes{6, 3, 2, 2, 2, 2};
  const auto bm = generate_benchmark(default_vocab(), sizes, SynthOptions{});
  const auto dir = (std::filesystem::temp_directory_path() / "zsg_synth_io").string();
  std::filesystem::remove_all(dir);
  write_benchmark(bm, dir);
  const auto vocab = read_vocab(dir);
  REQUIRE(to_json(vocab) == to_json(bm.vocab));
  const auto table = read_embedding_file(dir + "/embeddings.txt");
  REQUIRE(table == bm.table);
  for (CaseLabel c : all_case_labels()) {
    const auto back = read_split(dir, c, table);
    REQUIRE(back.size() == sizes.of(c));
    for (std::size_t i = 0; i < back.size(); ++i) {
      const auto& s = bm.splits.at(c)[i];
      REQUIRE(back[i].query == s.query);
      REQUIRE(back[i].tokens == s.tokens);
      REQUIRE(back[i].gt == s.gt);
      REQUIRE(back[i].pixels == s.pixels);
      REQUIRE(back[i].objects.size() == s.objects.size());
    }
  }
  std::filesystem::remove_all(dir);
}
