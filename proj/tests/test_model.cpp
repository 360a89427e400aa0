#include <catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "zsg/model.hpp"

using namespace zsg;
using Catch::Approx;
using TD = ad::Tensor<double>;

namespace {

EmbeddingTable toy_table(std::size_t dim, std::uint64_t seed = 3) {
  EmbeddingTable t(dim);
  Rng rng(seed);
  for (const char* w : {"red", "blue", "circle", "square", "on", "the", "left"}) {
    std::vector<double> v(dim);
    for (auto& x : v) x = rng.normal();
    t.add(w, v);
  }
  return t;
}

TD random_images(Rng& rng, std::size_t n, int h, int w) {
  std::vector<double> v(n * 3 * h * w);
  for (auto& x : v) x = rng.uniform(-0.5, 0.5);
  return TD(ad::Shape{n, 3, std::size_t(h), std::size_t(w)}, v);
}

void zero_all(ParameterStore<double>& p) {
  for (auto& [name, t] : p.entries())
    for (auto& v : t.data()) v = 0;
}

}  // namespace

TEST_CASE("default parameter count", "[model]") {
  ModelConfig c;
  ZsgNet<double> net(c, 1);
  const std::size_t ch = 32, conv = ch * 9, lstm = 32 * 128 + 32 * 128 + 128;
  // stems 3->32, 32->32; three level convs; two lstm directions; head 98->128->128->45
  const std::size_t expected = (3 * 9 * ch + ch) + (conv * ch + ch) + 3 * (conv * ch + ch) + 2 * lstm +
                               (98 * 9 * 128 + 128) + (128 * 9 * 128 + 128) + (128 * 9 * 45 + 45);
  REQUIRE(net.params().count() == expected);
  REQUIRE(expected == 367021);
  REQUIRE(c.fused_channels() == 98);
}

TEST_CASE("image encoder", "[model][encode_image]") {
  ModelConfig c;
  ZsgNet<double> net(c, 2);
  Rng rng(1);
  ad::Tape<double> tape(false);
  auto maps = net.encode_image(tape, random_images(rng, 2, 64, 64));
  REQUIRE(maps.size() == 3);
  const std::size_t sides[] = {8, 4, 2};
  for (std::size_t l = 0; l < 3; ++l) {
    REQUIRE(maps[l].shape() == ad::Shape{2, 32, sides[l], sides[l]});
    const std::size_t hw = sides[l] * sides[l];
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t s = 0; s < hw; ++s) {
        double sq = 0;
        for (std::size_t k = 0; k < 32; ++k) sq += maps[l][(b * 32 + k) * hw + s] * maps[l][(b * 32 + k) * hw + s];
        if (sq > 0) REQUIRE(std::sqrt(sq) == Approx(1.0).margin(1e-9));
      }
  }
  zero_all(net.params());
  for (const auto& m : net.encode_image(tape, random_images(rng, 1, 64, 64)))
    for (double v : m.data()) REQUIRE(v == 0.0);
  REQUIRE_THROWS_AS(net.encode_image(tape, random_images(rng, 1, 32, 64)), Error);
}

TEST_CASE("query encoder", "[model][encode_query]") {
  ModelConfig c;
  c.embed_dim = 6;
  c.hidden = 4;
  ZsgNet<double> net(c, 5);
  const auto table = toy_table(6);
  ad::Tape<double> tape(false);
  const std::vector<int> phrase = table.tokenize("red circle on the left");
  const std::vector<int> unk = table.tokenize("purple thing");
  REQUIRE(unk == std::vector<int>{0, 0});
  auto q = net.encode_query(tape, {phrase, unk}, table);
  REQUIRE(q.features.shape() == ad::Shape{2, 8});
  for (std::size_t n = 0; n < 2; ++n) {
    double sq = 0;
    for (std::size_t k = 0; k < 8; ++k) sq += q.features[n * 8 + k] * q.features[n * 8 + k];
    if (!q.degenerate[n]) REQUIRE(std::sqrt(sq) == Approx(1.0).margin(1e-5));
  }
  REQUIRE_THROWS_AS(net.encode_query(tape, {std::vector<int>{}}, table), Error);
  REQUIRE_THROWS_AS(net.encode_query(tape, {std::vector<int>{99}}, table), Error);

  // Swap the direction parameters and reverse the phrase: the halves swap.
  auto swapped = net.params().clone();
  for (const char* s : {".wx", ".wh", ".b"}) {
    auto a = swapped.get(std::string("lstm.fwd") + s).clone();
    auto b = swapped.get(std::string("lstm.bwd") + s).clone();
    for (std::size_t i = 0; i < a.size(); ++i) {
      swapped.get(std::string("lstm.fwd") + s)[i] = b[i];
      swapped.get(std::string("lstm.bwd") + s)[i] = a[i];
    }
  }
  ZsgNet<double> mirror(c, std::move(swapped));
  std::vector<int> reversed(phrase.rbegin(), phrase.rend());
  auto q1 = net.encode_query(tape, {phrase}, table);
  auto q2 = mirror.encode_query(tape, {reversed}, table);
  for (std::size_t k = 0; k < 4; ++k) {
    REQUIRE(q1.features[k] == Approx(q2.features[4 + k]).margin(1e-12));
    REQUIRE(q1.features[4 + k] == Approx(q2.features[k]).margin(1e-12));
  }

  zero_all(net.params());
  auto z = net.encode_query(tape, {phrase}, table);
  REQUIRE(z.degenerate[0]);
  for (double v : z.features.data()) REQUIRE(v == 0.0);
}

TEST_CASE("fusion layout", "[model][fuse]") {
  ModelConfig c;
  ZsgNet<double> net(c, 7);
  Rng rng(9);
  ad::Tape<double> tape(false);
  const auto maps = net.encode_image(tape, random_images(rng, 1, 64, 64));
  std::vector<double> qv(64);
  for (auto& x : qv) x = rng.normal();
  TD h(ad::Shape{1, 64}, qv);
  const auto specs = net.feature_specs();
  auto fused = net.fuse(tape, maps[0], h, specs[0]);
  REQUIRE(fused.shape() == ad::Shape{1, 98, 8, 8});
  const std::size_t hw = 64;
  for (std::size_t s = 0; s < hw; ++s) {
    for (std::size_t k = 0; k < 32; ++k) REQUIRE(fused[k * hw + s] == maps[0][k * hw + s]);
    for (std::size_t k = 0; k < 64; ++k) REQUIRE(fused[(32 + k) * hw + s] == qv[k]);
    const std::size_t y = s / 8, x = s % 8;
    REQUIRE(fused[96 * hw + s] == Approx((x + 0.5) * 8 / 64.0).margin(1e-15));
    REQUIRE(fused[97 * hw + s] == Approx((y + 0.5) * 8 / 64.0).margin(1e-15));
  }
  REQUIRE(fused[96 * hw] == Approx(4.0 / 64));
  REQUIRE(fused[97 * hw] == Approx(4.0 / 64));

  c.blind = BlindMode::LanguageBlind;
  ZsgNet<double> lb(c, 7);
  auto f_lb = lb.fuse(tape, maps[0], h, specs[0]);
  for (std::size_t k = 32; k < 96; ++k)
    for (std::size_t s = 0; s < hw; ++s) REQUIRE(f_lb[k * hw + s] == 0.0);
  c.blind = BlindMode::ImageBlind;
  ZsgNet<double> ib(c, 7);
  auto f_ib = ib.fuse(tape, maps[0], h, specs[0]);
  for (std::size_t k = 0; k < 32; ++k)
    for (std::size_t s = 0; s < hw; ++s) REQUIRE(f_ib[k * hw + s] == 0.0);
}

TEST_CASE("head outputs and slot alignment", "[model][head]") {
  ModelConfig c;
  c.image = {32, 32};
  c.levels = 2;
  ZsgNet<double> net(c, 3);
  const auto table = toy_table(32);
  Rng rng(4);
  ad::Tape<double> tape(false);
  const auto images = random_images(rng, 1, 32, 32);
  const std::vector<std::vector<int>> tokens{table.tokenize("blue square")};
  auto base = net.forward(tape, images, tokens, table);
  REQUIRE(base.anchors() == net.anchors().size());
  REQUIRE(base.anchors() == 9 * (16 + 4));

  // Perturb the output filters of slot 3 only.
  auto& w = net.params().get("head.out.w");
  const std::size_t per_out = w.size() / 45;
  for (std::size_t k = 0; k < 5; ++k)
    for (std::size_t i = 0; i < per_out; ++i) w[(3 * 5 + k) * per_out + i] += 0.3;
  auto moved = net.forward(tape, images, tokens, table);
  const auto anchors = net.anchors();
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    const bool slot3 = anchors.owner[a].slot == 3;
    if (slot3) {
      REQUIRE(moved.logits[a] != base.logits[a]);
    } else {
      REQUIRE(moved.logits[a] == base.logits[a]);
      for (int k = 0; k < 4; ++k) REQUIRE(moved.regression[a * 4 + k] == base.regression[a * 4 + k]);
    }
  }

  auto& hw = net.params().get("head.out.w");
  for (auto& v : hw.data()) v = 0;
  auto& hb = net.params().get("head.out.b");
  for (auto& v : hb.data()) v = 0;
  for (int s = 0; s < 9; ++s) hb[s * 5] = 1.25;
  auto flat = net.forward(tape, images, tokens, table);
  for (double z : flat.logits.data()) REQUIRE(z == 1.25);
}

TEST_CASE("forward responds to the query unless language-blind", "[model][forward]") {
  const auto table = toy_table(32);
  Rng rng(6);
  const auto images = random_images(rng, 1, 64, 64);
  ad::Tape<double> tape(false);
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    ModelConfig c;
    ZsgNet<double> net(c, seed);
    auto a = net.forward(tape, images, {table.tokenize("red circle")}, table);
    auto b = net.forward(tape, images, {table.tokenize("blue square on the left")}, table);
    REQUIRE(a.logits.size() == 756);
    bool differs = false;
    for (std::size_t i = 0; i < a.logits.size(); ++i) differs = differs || a.logits[i] != b.logits[i];
    REQUIRE(differs);

    c.blind = BlindMode::LanguageBlind;
    ZsgNet<double> lb(c, seed);
    auto la = lb.forward(tape, images, {table.tokenize("red circle")}, table);
    auto lbb = lb.forward(tape, images, {table.tokenize("blue square on the left")}, table);
    for (std::size_t i = 0; i < la.logits.size(); ++i) REQUIRE(la.logits[i] == lbb.logits[i]);
  }
}

TEST_CASE("checkpoint round trip", "[model][checkpoint]") {
  ModelConfig c;
  c.hidden = 8;
  c.blind = BlindMode::ImageBlind;
  ZsgNet<float> net(c, 12);
  const auto path = (std::filesystem::temp_directory_path() / "zsg_model_test.ckpt").string();
  save_checkpoint(net, path, {{"note", "test"}});
  CheckpointInfo info;
  auto back = load_checkpoint<float>(path, &info);
  REQUIRE(info.manifest.at("extra").at("note") == "test");
  REQUIRE(back.config().hidden == 8);
  REQUIRE(back.config().blind == BlindMode::ImageBlind);
  REQUIRE(back.params().count() == net.params().count());
  for (std::size_t e = 0; e < net.params().entries().size(); ++e) {
    const auto& [na, ta] = net.params().entries()[e];
    const auto& [nb, tb] = back.params().entries()[e];
    REQUIRE(na == nb);
    for (std::size_t i = 0; i < ta.size(); ++i) REQUIRE(ta[i] == tb[i]);
  }
  {
    std::ofstream out(path, std::ios::binary);
    out << "NOTACKPT";
  }
  try {
    load_checkpoint<float>(path);
    FAIL("expected an error");
  } catch (const Error& e) {
    REQUIRE(e.error_class() == ErrorClass::IoError);
  }
  std::filesystem::remove(path);
}

TEST_CASE("model config validation and json", "[model][config]") {
  ModelConfig c;
  c.levels = 0;
  REQUIRE_THROWS_AS(ZsgNet<double>(c, 1), Error);
  ModelConfig d;
  d.head_depth = 1;
  d.blind = BlindMode::LanguageBlind;
  const auto back = model_config_from_json(to_json(d));
  REQUIRE(back.head_depth == 1);
  REQUIRE(back.blind == BlindMode::LanguageBlind);
  REQUIRE_THROWS_AS(parse_blind_mode("deaf"), Error);
}
