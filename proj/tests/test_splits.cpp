#include <catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <vector>

#include "support/split_oracles.hpp"
#include "zsg/synthdata.hpp"

using namespace zsg;
using namespace zsg::testing;
using Catch::Approx;

namespace {

AnnotationRecord rec(const std::string& id, std::vector<Phrase> phrases, std::vector<ObjectAnnotation> objects = {}) {
  return AnnotationRecord{id, {64, 64}, std::move(phrases), std::move(objects)};
}

Phrase phr(const std::string& q, std::optional<std::string> cat = std::nullopt, std::optional<std::string> obj = std::nullopt,
           Box b = {1, 1, 10, 10}) {
  return Phrase{q, b, std::move(cat), std::move(obj)};
}

ClusterPartition partition_of(std::vector<std::vector<std::string>> seen, std::vector<std::vector<std::string>> unseen) {
  ClusterPartition p;
  for (std::size_t k = 0; k < seen.size(); ++k) {
    std::vector<std::string> m = seen[k];
    m.insert(m.end(), unseen[k].begin(), unseen[k].end());
    p.members.push_back(m);
  }
  p.seen = std::move(seen);
  p.unseen = std::move(unseen);
  return p;
}

}  // namespace

TEST_CASE("lemmatizer", "[splits][lemma]") {
  REQUIRE(lemmatize("cars") == "car");
  REQUIRE(lemmatize("ladies") == "lady");
  REQUIRE(lemmatize("Boxes") == "box");
  REQUIRE(lemmatize("women") == "woman");
  REQUIRE(lemmatize("glass") == "glass");
  REQUIRE(lemmatize("automobile") != lemmatize("car"));
  REQUIRE(last_word("a big red Cars") == "cars");
}

TEST_CASE("case0 toy corpus", "[splits][case0]") {
  std::vector<AnnotationRecord> rs;
  const std::vector<std::string> words{"apple", "bench", "cup", "door", "eagle", "fork", "gate", "hat", "igloo", "jar"};
  for (std::size_t i = 0; i < words.size(); ++i) rs.push_back(rec("i" + std::to_string(i), {phr("the " + words[i])}));
  const auto s = case0_split(rs, 0, 0.7, 5);
  REQUIRE(s.include.size() == 7);
  REQUIRE(s.exclude.size() == 3);
  REQUIRE(s.certificate.passed);
  REQUIRE(s.val.size() + s.test.size() == 3);
  REQUIRE(s.val.size() == 1);
  REQUIRE(s.train.size() == 7);
  REQUIRE(audit_case0_independent(rs, s).ok());

  const auto again = case0_split(rs, 0, 0.7, 5);
  REQUIRE(again.exclude == s.exclude);

  const auto all_seen = case0_split(rs, 1000, 0.7, 5);
  REQUIRE(all_seen.test.empty());
  REQUIRE(all_seen.val.empty());
  REQUIRE_FALSE(all_seen.warnings.empty());

  // three candidate words: floor(0.3 * 3) = 0 excluded
  std::vector<AnnotationRecord> tiny(rs.begin(), rs.begin() + 3);
  try {
    case0_split(tiny, 0, 0.7, 1);
    FAIL("expected a configuration error");
  } catch (const Error& e) {
    REQUIRE(e.error_class() == ErrorClass::ConfigError);
  }
}

TEST_CASE("case0 keeps only excluded-word phrases of held-out images", "[splits][case0]") {
  std::vector<AnnotationRecord> rs;
  for (int i = 0; i < 30; ++i)
    rs.push_back(rec("r" + std::to_string(i), {phr("a dog"), phr("the word" + std::to_string(i % 10) + "s")}));
  const auto s = case0_split(rs, 1, 0.7, 3);
  REQUIRE(s.always_seen == std::vector<std::string>{"dog"});
  REQUIRE(s.certificate.passed);
  REQUIRE(audit_case0_independent(rs, s).ok());
  for (const auto* part : {&s.val, &s.test})
    for (const auto& it : *part) REQUIRE(it.phrase == 1);
}

TEST_CASE("case1 routing", "[splits][case1]") {
  std::vector<AnnotationRecord> none{rec("a", {phr("a man", "people")})};
  try {
    case1_split(none, 0);
    FAIL("expected a configuration error");
  } catch (const Error& e) {
    REQUIRE(e.error_class() == ErrorClass::ConfigError);
  }

  std::vector<AnnotationRecord> rs;
  for (int i = 0; i < 4; ++i) rs.push_back(rec("o" + std::to_string(i), {phr("a thing", "other"), phr("a man", "people")}));
  for (int i = 0; i < 5; ++i) rs.push_back(rec("p" + std::to_string(i), {phr("a dog", "animals")}));
  const auto s = case1_split(rs, 2);
  REQUIRE(ids_of(s.val).size() == 2);
  REQUIRE(ids_of(s.test).size() == 2);
  REQUIRE(s.train.size() == 5);
  REQUIRE(s.certificate.passed);
  REQUIRE(audit_case1_independent(rs, s).ok());

  // the train-side filter on an image holding one "other" and one "people" phrase
  const auto kept = remove_category(rec("t", {phr("a thing", "other"), phr("a man", "people")}), "other");
  REQUIRE(kept.phrases.size() == 1);
  REQUIRE(*kept.phrases[0].category == "people");
}

TEST_CASE("annotation cleaning", "[splits][clean]") {
  const Box car{10, 10, 30, 30}, dog{40, 40, 60, 60};
  // phrase boxes with IoU 0.9 to each other: the larger one is canonical
  const Box big{10, 10, 30, 30}, near{10, 10, 30, 28};
  REQUIRE(iou(big, near) == Approx(0.9));
  std::vector<AnnotationRecord> rs{rec("x",
                                       {phr("a car", std::nullopt, std::nullopt, near), phr("the car", std::nullopt, std::nullopt, big),
                                        phr("a dog", std::nullopt, std::nullopt, dog),
                                        phr("a ghost", std::nullopt, std::nullopt, {0, 60, 4, 64})},
                                       {{"car", car}, {"dog", dog}})};
  const auto c = clean_annotations(rs);
  const auto& p = c.records[0].phrases;
  REQUIRE(*p[0].object == "car");
  REQUIRE(*p[1].object == "car");
  REQUIRE(*p[2].object == "dog");
  REQUIRE(*p[3].object == kUnresolved);
  REQUIRE(c.unresolved == 1);
  REQUIRE(c.collapsed == 1);
  REQUIRE(p[0].box == big);
  REQUIRE(p[1].box == big);
}

TEST_CASE("kmeans", "[splits][kmeans]") {
  std::vector<std::vector<double>> pts{{1, 2}, {3, 4}, {5, 0}, {-1, 2}};
  const auto one = kmeans(pts, 1, 0);
  REQUIRE(one.centers[0][0] == Approx(2.0));
  REQUIRE(one.centers[0][1] == Approx(2.0));

  Rng rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::vector<double>> blobs;
    std::vector<int> truth;
    for (int i = 0; i < 40; ++i) {
      const int b = i % 2;
      blobs.push_back({(b ? 20.0 : -20.0) + rng.normal(), rng.normal(), rng.normal()});
      truth.push_back(b);
    }
    const auto km = kmeans(blobs, 2, rng.next());
    REQUIRE(km.converged);
    for (std::size_t i = 0; i < blobs.size(); ++i) {
      // brute-force nearest center
      std::size_t best = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < 2; ++c) {
        double d = 0;
        for (std::size_t j = 0; j < 3; ++j) d += (blobs[i][j] - km.centers[c][j]) * (blobs[i][j] - km.centers[c][j]);
        if (d < bd) {
          bd = d;
          best = c;
        }
      }
      REQUIRE(km.assignment[i] == best);
      REQUIRE((km.assignment[i] == km.assignment[0]) == (truth[i] == truth[0]));
    }
    const auto again = kmeans(blobs, 2, 99);
    REQUIRE(kmeans(blobs, 2, 99).assignment == again.assignment);
  }

  std::vector<std::vector<double>> dup{{1, 1}, {1, 1}, {1, 1}, {2, 2}};
  REQUIRE_THROWS_AS(kmeans(dup, 3, 0), Error);
  REQUIRE(kmeans(dup, 2, 0).centers.size() == 2);
  REQUIRE_THROWS_AS(kmeans(pts, 5, 0), Error);
}

TEST_CASE("seen/unseen partition", "[splits][partition]") {
  EmbeddingTable t(2);
  // cluster A (4 words) near (10, 0), cluster B (5 words) near (-10, 0)
  const std::vector<std::string> a{"car", "bus", "van", "minivan"}, b{"chair", "sofa", "stool", "bench", "desk"};
  for (std::size_t i = 0; i < a.size(); ++i) t.add(a[i], {10.0 + 0.1 * static_cast<double>(i), 0.0});
  for (std::size_t i = 0; i < b.size(); ++i) t.add(b[i], {-10.0, 0.1 * static_cast<double>(i)});
  std::vector<AnnotationRecord> rs;
  int id = 0;
  auto add = [&](const std::string& w, int n) {
    for (int i = 0; i < n; ++i) rs.push_back(rec("p" + std::to_string(id++), {}, {{w, {1, 1, 9, 9}}}));
  };
  add("car", 9), add("bus", 8), add("van", 3), add("minivan", 2);
  add("chair", 9), add("sofa", 7), add("stool", 6), add("bench", 2), add("desk", 1);
  add("nonword", 20);
  const auto part = seen_unseen_partition(rs, t, 1000, 2, 1);
  REQUIRE(part.skipped == std::vector<std::string>{"nonword"});
  const std::size_t ka = *part.cluster_of("car"), kb = *part.cluster_of("chair");
  REQUIRE(ka != kb);
  REQUIRE(part.seen[ka] == std::vector<std::string>{"car", "bus"});
  REQUIRE(part.unseen[ka] == std::vector<std::string>{"van", "minivan"});
  REQUIRE(part.seen[kb] == std::vector<std::string>{"chair", "sofa", "stool"});
  REQUIRE(part.unseen[kb].size() == 2);
  std::size_t total = 0;
  for (std::size_t k = 0; k < 2; ++k) total += part.seen[k].size() + part.unseen[k].size();
  REQUIRE(total == part.word_count());
  REQUIRE(total == 9);
}

TEST_CASE("case2/case3 predicates", "[splits][case23]") {
  const auto part = partition_of({{"car", "bus"}, {"chair", "sofa"}}, {{"minivan"}, {"stool"}});
  std::vector<AnnotationRecord> rs{
      rec("c3", {phr("a minivan", {}, "minivan")}, {{"minivan", {1, 1, 9, 9}}, {"car", {20, 20, 30, 30}}}),
      rec("c2", {phr("a stool", {}, "stool")}, {{"stool", {1, 1, 9, 9}}, {"car", {20, 20, 30, 30}}}),
      rec("tr", {phr("a car", {}, "car"), phr("a bus", {}, "bus")}, {{"car", {1, 1, 9, 9}}, {"bus", {20, 20, 30, 30}}}),
      rec("none", {phr("a ghost", {}, std::string(kUnresolved))}, {{"lamp", {1, 1, 9, 9}}}),
  };
  const auto res = assign_case23(rs, part);
  REQUIRE(ids_of(res.case3) == std::set<std::string>{"c3"});
  REQUIRE(ids_of(res.case2) == std::set<std::string>{"c2"});
  REQUIRE(res.train_candidates.size() == 1);
  REQUIRE(res.train_candidates[0].image_id == "tr");
  REQUIRE(res.certificate.passed);
  REQUIRE(audit_case23_independent(rs, part, res).ok());
}

TEST_CASE("zipf balancing", "[splits][zipf]") {
  // hand computation: C = 100, mean = 100 * (1 + 1/2 + 1/3) / 3, 2 * min = 20
  double mean = 0;
  REQUIRE(zipf_threshold({100, 50, 10}, &mean) == 61);
  REQUIRE(mean == Approx(100.0 * (1 + 0.5 + 1.0 / 3) / 3));
  REQUIRE(zipf_threshold({10, 9}) == 18);

  const auto part = partition_of({{"a"}, {"b"}, {"c"}}, {{}, {}, {}});
  std::vector<AnnotationRecord> rs;
  int id = 0;
  auto add = [&](const std::string& w, int n) {
    for (int i = 0; i < n; ++i) rs.push_back(rec("z" + std::to_string(id++), {phr("the " + w, {}, w)}));
  };
  add("a", 100), add("b", 50), add("c", 10);
  const auto bal = zipf_balance(rs, part, 4);
  REQUIRE(bal.threshold == 61);
  REQUIRE(bal.after.at(0) == 61);
  REQUIRE(bal.after.at(1) == 50);
  REQUIRE(bal.after.at(2) == 10);
  REQUIRE(bal.records.size() == 121);
  REQUIRE(audit_zipf(bal, part).passed);
  REQUIRE(audit_zipf_independent(rs, bal.records, part, bal.threshold).ok());
  const auto again = zipf_balance(rs, part, 4);
  for (std::size_t i = 0; i < bal.records.size(); ++i) REQUIRE(again.records[i].image_id == bal.records[i].image_id);

  std::vector<AnnotationRecord> flat;
  id = 0;
  auto addf = [&](const std::string& w, int n) {
    for (int i = 0; i < n; ++i) flat.push_back(rec("f" + std::to_string(id++), {phr("the " + w, {}, w)}));
  };
  addf("a", 12), addf("b", 10), addf("c", 8);
  const auto same = zipf_balance(flat, part, 4);
  REQUIRE(same.records.size() == flat.size());
}

TEST_CASE("semantic distance", "[splits][distance]") {
  EmbeddingTable t(3);
  t.add("car", {1, 0, 0});
  t.add("bus", {0, 1, 0});
  t.add("minivan", {1, 0, 0});
  t.add("chair", {0, 0, 1});
  t.add("stool", {0, 0.5, 1});
  const auto part = partition_of({{"car", "bus"}, {}}, {{"minivan"}, {"stool"}});
  const auto d = semantic_distance("minivan", part, t);
  REQUIRE(d.distance == 0.0);
  REQUIRE(d.closest == "car");
  REQUIRE_THROWS_AS(semantic_distance("stool", part, t), Error);
  REQUIRE_THROWS_AS(semantic_distance("car", part, t), Error);

  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    EmbeddingTable r(4);
    for (const char* w : {"s1", "s2", "u"}) {
      std::vector<double> v(4);
      for (auto& x : v) x = rng.normal();
      r.add(w, v);
    }
    const auto p = partition_of({{"s1", "s2"}}, {{"u"}});
    const double d1 = l2_distance(r.vector("u"), r.vector("s1")), d2 = l2_distance(r.vector("u"), r.vector("s2"));
    const auto got = semantic_distance("u", p, r);
    REQUIRE(got.distance == std::min(d1, d2));
    REQUIRE(got.closest == (d2 < d1 ? "s2" : "s1"));
  }
}

TEST_CASE("split certificates hold on fuzzed annotation dumps", "[splits][fuzz]") {
  std::size_t n2 = 0, n3 = 0, n_down = 0, n_unresolved = 0;
  for (std::uint64_t seed = 1; seed <= 25; ++seed) {
    const auto corpus = fuzz_corpus(seed);
    const auto s0 = case0_split(corpus.records, 5, 0.7, seed);
    INFO("seed " << seed << "\n" << certificate_text(s0.certificate));
    REQUIRE(s0.certificate.passed);
    REQUIRE(audit_case0_independent(corpus.records, s0).ok());

    const auto s1 = case1_split(corpus.records, seed);
    REQUIRE(s1.certificate.passed);
    REQUIRE(audit_case1_independent(corpus.records, s1).ok());

    const auto cleaned = clean_annotations(corpus.records);
    const auto part = seen_unseen_partition(cleaned.records, corpus.table, 1000, 4, seed);
    const auto c23 = assign_case23(cleaned.records, part);
    REQUIRE(c23.certificate.passed);
    const auto ind = audit_case23_independent(cleaned.records, part, c23);
    INFO((ind.ok() ? std::string() : ind.violations[0]));
    REQUIRE(ind.ok());

    const auto bal = zipf_balance(c23.train_candidates, part, seed);
    REQUIRE(audit_zipf(bal, part).passed);
    REQUIRE(audit_zipf_independent(c23.train_candidates, bal.records, part, bal.threshold).ok());
    n2 += c23.case2.size();
    n3 += c23.case3.size();
    n_unresolved += cleaned.unresolved;
    for (const auto& [k, n] : bal.before) n_down += n > bal.threshold;
  }
  // the fuzzer reaches every branch
  REQUIRE(n2 > 0);
  REQUIRE(n3 > 0);
  REQUIRE(n_down > 0);
  REQUIRE(n_unresolved > 0);
}

TEST_CASE("split certificates hold on the synthetic benchmark", "[splits][synthetic]") {
  const SplitSizes sizes{200, 40, 40, 40, 40, 40};
  const auto bm = generate_benchmark(default_vocab(), sizes, SynthOptions{});
  std::vector<GroundingSample> all;
  for (CaseLabel c : all_case_labels()) all.insert(all.end(), bm.splits.at(c).begin(), bm.splits.at(c).end());
  std::set<std::string> held;
  for (const auto& c : bm.vocab.clusters)
    if (c.holdout) held.insert(c.name);
  const auto recs = records_from_samples(all, held);
  const auto s0 = case0_split(recs, 3, 0.7, 1);
  REQUIRE(s0.certificate.passed);
  REQUIRE(audit_case0_independent(recs, s0).ok());
  const auto s1 = case1_split(recs, 1);
  REQUIRE(s1.certificate.passed);
  REQUIRE(audit_case1_independent(recs, s1).ok());
}

TEST_CASE("annotation dump round trip", "[splits][io]") {
  const auto corpus = fuzz_corpus(3, 20);
  const auto path = (std::filesystem::temp_directory_path() / "zsg_dump.jsonl").string();
  write_annotations(corpus.records, path);
  const auto back = read_annotations(path);
  REQUIRE(back.size() == corpus.records.size());
  for (std::size_t i = 0; i < back.size(); ++i) REQUIRE(to_json(back[i]) == to_json(corpus.records[i]));
  std::filesystem::remove(path);
}
