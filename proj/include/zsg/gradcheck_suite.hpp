#pragma once

#include <functional>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "loss.hpp"
#include "model.hpp"
#include "ops.hpp"
#include "train.hpp"

namespace zsg {

struct SuiteResult {
  std::string name;
  ad::GradCheckReport report;
};

namespace detail {

using D = double;
using TensorD = ad::Tensor<D>;
using TapeD = ad::Tape<D>;

inline TensorD random_tensor(Rng& rng, ad::Shape shape, double scale = 1.0) {
  std::vector<D> v(ad::numel(shape));
  for (auto& x : v) x = scale * rng.normal();
  return TensorD(std::move(shape), std::move(v), true);
}

/// Fixed random projection to a scalar so every output element carries a
/// distinct upstream gradient.
inline TensorD project(TapeD& tape, const TensorD& y, const TensorD& weights) {
  return ad::sum(tape, ad::mul(tape, y, weights));
}

inline TensorD constant_like(Rng& rng, const ad::Shape& shape) {
  std::vector<D> v(ad::numel(shape));
  for (auto& x : v) x = rng.normal();
  return TensorD(shape, std::move(v), false);
}

inline std::size_t dim_in(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

}  // namespace detail

/// Finite-difference audit of every differentiable operation and of the
/// composed grounding loss through a small model, in double precision.
/// Shapes are drawn at random (spatial extents <= 32).
inline std::vector<SuiteResult> run_gradcheck_suite(std::uint64_t seed, const ad::GradCheckOptions& base = {}) {
  using namespace detail;
  Rng rng(derive_seed(seed, 0x6763));
  std::vector<SuiteResult> out;
  auto run = [&](const std::string& name, const std::function<TensorD(TapeD&)>& f,
                 std::vector<std::pair<std::string, TensorD>> inputs, std::size_t probes = 0) {
    auto opt = base;
    opt.seed = rng.next();
    if (probes) opt.max_probes_per_input = probes;
    out.push_back({name, ad::grad_check<D>(f, std::move(inputs), opt)});
  };

  {
    const ad::Shape s{dim_in(rng, 2, 5), dim_in(rng, 2, 6)};
    auto x = random_tensor(rng, s), y = random_tensor(rng, s), w = constant_like(rng, s);
    run("relu", [=](TapeD& t) { return project(t, ad::relu(t, x), w); }, {{"x", x}});
    run("sigmoid", [=](TapeD& t) { return project(t, ad::sigmoid(t, x), w); }, {{"x", x}});
    run("tanh", [=](TapeD& t) { return project(t, ad::tanh(t, x), w); }, {{"x", x}});
    run("add", [=](TapeD& t) { return project(t, ad::add(t, x, y), w); }, {{"a", x}, {"b", y}});
    run("sub", [=](TapeD& t) { return project(t, ad::sub(t, x, y), w); }, {{"a", x}, {"b", y}});
    run("mul", [=](TapeD& t) { return project(t, ad::mul(t, x, y), w); }, {{"a", x}, {"b", y}});
    auto sc = random_tensor(rng, {1});
    run("mul_scalar_broadcast", [=](TapeD& t) { return project(t, ad::mul(t, x, sc), w); }, {{"a", x}, {"b", sc}});
    run("scale", [=](TapeD& t) { return project(t, ad::scale(t, x, 1.7), w); }, {{"x", x}});
    run("sum", [=](TapeD& t) { return ad::sum(t, ad::mul(t, x, x)); }, {{"x", x}});
    run("mean", [=](TapeD& t) { return ad::mean(t, ad::mul(t, x, x)); }, {{"x", x}});
    run("add_scalars", [=](TapeD& t) {
      return ad::add_scalars(t, {project(t, x, w), ad::sum(t, ad::mul(t, y, y))});
    }, {{"a", x}, {"b", y}});
    run("reshape", [=](TapeD& t) {
      return project(t, ad::reshape(t, x, {s[0] * s[1]}), TensorD({s[0] * s[1]}, std::vector<D>(w.data().begin(), w.data().end()), false));
    }, {{"x", x}});
    const std::size_t r1 = s[0] / 2, c1 = s[1] / 2;
    run("slice_rows", [=](TapeD& t) { return ad::sum(t, ad::mul(t, ad::slice_rows(t, x, r1, s[0]), ad::slice_rows(t, y, r1, s[0]))); },
        {{"x", x}, {"y", y}});
    run("slice_columns", [=](TapeD& t) {
      return ad::sum(t, ad::mul(t, ad::slice_columns(t, x, c1, s[1]), ad::slice_columns(t, y, c1, s[1])));
    }, {{"x", x}, {"y", y}});
    auto z = random_tensor(rng, {dim_in(rng, 1, 3), s[1]});
    auto wz = constant_like(rng, {s[0] + z.dim(0), s[1]});
    run("concat_rows", [=](TapeD& t) { return project(t, ad::concat_rows(t, std::vector<TensorD>{x, z}), wz); },
        {{"a", x}, {"b", z}});
  }
  {
    const std::size_t n = dim_in(rng, 1, 2), h = dim_in(rng, 2, 5), w = dim_in(rng, 2, 5);
    auto a = random_tensor(rng, {n, dim_in(rng, 1, 3), h, w}), b = random_tensor(rng, {n, dim_in(rng, 1, 3), h, w});
    auto wc = constant_like(rng, {n, a.dim(1) + b.dim(1), h, w});
    run("concat_channels", [=](TapeD& t) { return project(t, ad::concat_channels(t, std::vector<TensorD>{a, b}), wc); },
        {{"a", a}, {"b", b}});
    auto v = random_tensor(rng, {n, dim_in(rng, 2, 4)});
    auto wt = constant_like(rng, {n, v.dim(1), h, w});
    run("tile_spatial", [=](TapeD& t) { return project(t, ad::tile_spatial(t, v, h, w), wt); }, {{"v", v}});
    auto wn = constant_like(rng, a.shape());
    run("channel_l2_normalize", [=](TapeD& t) { return project(t, ad::channel_l2_normalize(t, a, 1e-6), wn); },
        {{"x", a}});
    auto q = random_tensor(rng, {n, dim_in(rng, 2, 6)});
    auto wq = constant_like(rng, q.shape());
    run("l2_normalize_rows", [=](TapeD& t) { return project(t, ad::channel_l2_normalize(t, q, 1e-6), wq); },
        {{"x", q}});
  }
  {
    const std::size_t n = dim_in(rng, 1, 4), din = dim_in(rng, 2, 6), dout = dim_in(rng, 2, 5);
    auto x = random_tensor(rng, {n, din}), w = random_tensor(rng, {din, dout}), b = random_tensor(rng, {dout});
    auto wl = constant_like(rng, {n, dout});
    run("linear", [=](TapeD& t) { return project(t, ad::linear(t, x, w, b), wl); }, {{"x", x}, {"w", w}, {"b", b}});
  }
  for (auto [k, stride, pad] : {std::tuple{3, 1, 1}, std::tuple{3, 2, 1}, std::tuple{1, 1, 0}, std::tuple{3, 1, 0}}) {
    const std::size_t n = dim_in(rng, 1, 2), cin = dim_in(rng, 1, 3), cout = dim_in(rng, 1, 3);
    const std::size_t h = dim_in(rng, 4, 9), w = dim_in(rng, 4, 9);
    auto x = random_tensor(rng, {n, cin, h, w});
    auto wk = random_tensor(rng, {cout, cin, std::size_t(k), std::size_t(k)}, 0.5);
    auto b = random_tensor(rng, {cout});
    ad::Tape<D> probe(false);
    const auto y = ad::conv2d(probe, x, wk, b, stride, pad);
    auto wy = constant_like(rng, y.shape());
    run("conv2d_k" + std::to_string(k) + "_s" + std::to_string(stride) + "_p" + std::to_string(pad),
        [=](TapeD& t) { return project(t, ad::conv2d(t, x, wk, b, stride, pad), wy); },
        {{"x", x}, {"w", wk}, {"b", b}});
  }
  {
    const std::size_t n = dim_in(rng, 1, 3), din = dim_in(rng, 2, 5), d = dim_in(rng, 2, 4);
    ad::LstmParams<D> p{random_tensor(rng, {din, 4 * d}, 0.5), random_tensor(rng, {d, 4 * d}, 0.5),
                        random_tensor(rng, {4 * d}, 0.5)};
    auto x0 = random_tensor(rng, {n, din}), x1 = random_tensor(rng, {n, din});
    auto h0 = random_tensor(rng, {n, d}), c0 = random_tensor(rng, {n, d});
    auto wh = constant_like(rng, {n, d}), wc = constant_like(rng, {n, d});
    run("recurrent_step", [=](TapeD& t) {
      auto s1 = ad::recurrent_step(t, x0, ad::LstmState<D>{h0, c0}, p);
      auto s2 = ad::recurrent_step(t, x1, s1, p);
      return ad::add(t, project(t, s2.h, wh), project(t, s2.c, wc));
    }, {{"x0", x0}, {"x1", x1}, {"h0", h0}, {"c0", c0}, {"w_input", p.w_input}, {"w_hidden", p.w_hidden}, {"bias", p.bias}});
  }
  {
    const std::size_t a = dim_in(rng, 6, 30);
    auto logits = random_tensor(rng, {1, a}, 2.0);
    auto reg = random_tensor(rng, {1, a, 4}, 1.5);
    std::vector<unsigned char> fg(a, 0);
    MatchResult m;
    for (std::size_t j = 0; j < a; ++j)
      if (rng.uniform() < 0.3 || j == 0) {
        fg[j] = 1;
        m.members.push_back(j);
        m.targets.push_back({rng.normal(), rng.normal(), rng.normal(), rng.normal()});
      }
    m.foreground = fg;
    m.best_anchor = m.members.front();
    run("focal_sum", [=](TapeD& t) { return focal_sum<D>(t, logits, fg, 0.25, 2.0); }, {{"logits", logits}});
    run("bce_mean", [=](TapeD& t) { return bce_mean<D>(t, logits, fg); }, {{"logits", logits}});
    run("softmax_cross_entropy", [=](TapeD& t) { return softmax_cross_entropy<D>(t, logits, m.best_anchor); },
        {{"logits", logits}});
    run("smooth_l1_sum", [=](TapeD& t) { return smooth_l1_sum<D>(t, reg, m); }, {{"regression", reg}});
    for (LossVariant v : {LossVariant::Focal, LossVariant::Bce, LossVariant::Softmax}) {
      LossConfig lc;
      lc.variant = v;
      run("grounding_loss_" + to_string(v), [=](TapeD& t) { return grounding_loss<D>(t, logits, reg, m, lc).total; },
          {{"logits", logits}, {"regression", reg}});
    }
  }
  {
    // Composed model loss: encoder, bi-LSTM, fusion, head, focal + smooth-L1.
    ModelConfig mc;
    const int side = 16 * static_cast<int>(dim_in(rng, 1, 2));
    mc.image = {side, side};
    mc.levels = 2;
    mc.stem_convs = 1;
    mc.encoder_channels = 3;
    mc.embed_dim = 5;
    mc.hidden = 3;
    mc.head_channels = 4;
    mc.head_depth = 1;
    ZsgNet<D> model(mc, rng.next());
    EmbeddingTable table(5);
    for (int w = 0; w < 6; ++w) {
      std::vector<double> v(5);
      for (auto& x : v) x = rng.normal();
      table.add("w" + std::to_string(w), v);
    }
    std::vector<GroundingSample> samples(2);
    for (auto& s : samples) {
      s.image_size = mc.image;
      s.pixels.resize(3 * static_cast<std::size_t>(side * side));
      for (auto& p : s.pixels) p = static_cast<float>(rng.uniform());
      for (std::size_t k = 0, len = dim_in(rng, 1, 3); k < len; ++k) s.tokens.push_back(1 + static_cast<int>(rng.below(6)));
      const double w = rng.uniform(5, side / 2.0), h = rng.uniform(5, side / 2.0);
      const double x = rng.uniform(0, side - w), y = rng.uniform(0, side - h);
      s.gt = {x, y, x + w, y + h};
    }
    const auto anchors = model.anchors();
    std::vector<MatchResult> matches;
    for (const auto& s : samples) matches.push_back(match_anchors(anchors, s.gt));
    std::vector<std::pair<std::string, TensorD>> inputs;
    for (const auto& [name, t] : model.params().entries()) inputs.push_back({name, t});
    for (BlindMode blind : {BlindMode::None, BlindMode::LanguageBlind, BlindMode::ImageBlind}) {
      ModelConfig bc = mc;
      bc.blind = blind;
      ZsgNet<D> variant(bc, model.params());
      run(std::string("zsgnet_loss") + (blind == BlindMode::None ? "" : "_" + to_string(blind)),
          [&samples, &matches, &table, variant](TapeD& t) {
            std::vector<const GroundingSample*> batch{&samples[0], &samples[1]};
            std::vector<const MatchResult*> ms{&matches[0], &matches[1]};
            return batch_loss<D>(t, variant, batch, ms, table, LossConfig{});
          },
          inputs, blind == BlindMode::None ? 12 : 4);
    }
  }
  return out;
}

}  // namespace zsg
