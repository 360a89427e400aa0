#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "anchor.hpp"
#include "embedding.hpp"
#include "ops.hpp"
#include "rng.hpp"

namespace zsg {

enum class BlindMode { None, LanguageBlind, ImageBlind };

inline std::string to_string(BlindMode m) {
  switch (m) {
    case BlindMode::None: return "none";
    case BlindMode::LanguageBlind: return "lb";
    case BlindMode::ImageBlind: return "ib";
  }
  return "none";
}

inline BlindMode parse_blind_mode(const std::string& s) {
  if (s == "none") return BlindMode::None;
  if (s == "lb" || s == "language_blind") return BlindMode::LanguageBlind;
  if (s == "ib" || s == "image_blind") return BlindMode::ImageBlind;
  fail(ErrorClass::ConfigError, "unknown blind mode '" + s + "'");
}

struct ModelConfig {
  ImageSize image{64, 64};
  int levels = 3;              // K
  int encoder_channels = 32;
  int stem_convs = 2;          // stride-2 convolutions before the first pyramid level
  int embed_dim = 32;          // d_q
  int hidden = 32;             // d_l; query feature width is 2 * d_l
  int head_channels = 128;
  int head_depth = 2;          // hidden 3x3 conv layers before the output layer
  double logit_bias_init = -2.0;
  std::string weight_init = "glorot";  // glorot | he (convolutions only)
  double norm_eps = 1e-6;
  BlindMode blind = BlindMode::None;

  int first_stride() const { return 1 << (stem_convs + 1); }
  int fused_channels() const { return encoder_channels + 2 * hidden + 2; }

  void validate() const {
    require(levels >= 1 && embed_dim >= 1 && hidden >= 1 && encoder_channels >= 1 && head_channels >= 1 &&
                head_depth >= 0 && stem_convs >= 0,
            ErrorClass::ConfigError, "model config: dimensions must be positive");
    require(image.width > 0 && image.height > 0, ErrorClass::ConfigError, "model config: empty image size");
    require(weight_init == "glorot" || weight_init == "he", ErrorClass::ConfigError,
            "model config: weight_init must be glorot or he");
  }
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"image_width", c.image.width},   {"image_height", c.image.height},
          {"levels", c.levels},            {"encoder_channels", c.encoder_channels},
          {"stem_convs", c.stem_convs},    {"embed_dim", c.embed_dim},
          {"hidden", c.hidden},            {"head_channels", c.head_channels},
          {"head_depth", c.head_depth},    {"logit_bias_init", c.logit_bias_init},
          {"weight_init", c.weight_init},  {"norm_eps", c.norm_eps},        {"blind", to_string(c.blind)}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig c = {}) {
  c.image.width = j.value("image_width", c.image.width);
  c.image.height = j.value("image_height", c.image.height);
  c.levels = j.value("levels", c.levels);
  c.encoder_channels = j.value("encoder_channels", c.encoder_channels);
  c.stem_convs = j.value("stem_convs", c.stem_convs);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.hidden = j.value("hidden", c.hidden);
  c.head_channels = j.value("head_channels", c.head_channels);
  c.head_depth = j.value("head_depth", c.head_depth);
  c.logit_bias_init = j.value("logit_bias_init", c.logit_bias_init);
  c.weight_init = j.value("weight_init", c.weight_init);
  c.norm_eps = j.value("norm_eps", c.norm_eps);
  if (j.contains("blind")) c.blind = parse_blind_mode(j.at("blind").get<std::string>());
  return c;
}

/// Named parameters in a fixed order; the order is the optimizer's update
/// order and the checkpoint layout.
template <class T>
class ParameterStore {
 public:
  ad::Tensor<T>& add(const std::string& name, ad::Tensor<T> t) {
    require(!index_.contains(name), ErrorClass::InvalidInput, "duplicate parameter " + name);
    t.set_requires_grad(true);
    index_[name] = entries_.size();
    entries_.emplace_back(name, std::move(t));
    return entries_.back().second;
  }

  const ad::Tensor<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    require(it != index_.end(), ErrorClass::InvalidInput, "unknown parameter " + name);
    return entries_[it->second].second;
  }
  ad::Tensor<T>& get(const std::string& name) {
    return const_cast<ad::Tensor<T>&>(std::as_const(*this).get(name));
  }
  bool contains(const std::string& name) const { return index_.contains(name); }

  std::vector<std::pair<std::string, ad::Tensor<T>>>& entries() { return entries_; }
  const std::vector<std::pair<std::string, ad::Tensor<T>>>& entries() const { return entries_; }

  void zero_grad() {
    for (auto& [n, t] : entries_) t.zero_grad();
  }

  std::size_t count() const {
    std::size_t c = 0;
    for (const auto& [n, t] : entries_) c += t.size();
    return c;
  }

  template <class U>
  ParameterStore<U> cast() const {
    ParameterStore<U> out;
    for (const auto& [n, t] : entries_) {
      std::vector<U> v(t.data().begin(), t.data().end());
      out.add(n, ad::Tensor<U>(t.shape(), std::move(v)));
    }
    return out;
  }

  ParameterStore clone() const { return cast<T>(); }

 private:
  std::vector<std::pair<std::string, ad::Tensor<T>>> entries_;
  std::map<std::string, std::size_t> index_;
};

template <class T>
struct QueryEncoding {
  ad::Tensor<T> features;          // N x 2 d_l, unit rows
  std::vector<bool> degenerate;    // rows whose pre-normalization norm fell under eps
};

template <class T>
struct Predictions {
  ad::Tensor<T> logits;      // N x A, AnchorSet order
  ad::Tensor<T> regression;  // N x A x 4 (tx, ty, tw, th)

  std::size_t batch() const { return logits.dim(0); }
  std::size_t anchors() const { return logits.dim(1); }
  RegressionParams params(std::size_t n, std::size_t a) const {
    const std::size_t base = (n * anchors() + a) * 4;
    return {static_cast<double>(regression[base]), static_cast<double>(regression[base + 1]),
            static_cast<double>(regression[base + 2]), static_cast<double>(regression[base + 3])};
  }
};

inline constexpr int kHeadOutputsPerAnchor = 5;

/// Single-stage grounding network: strided conv encoder emitting K maps,
/// bidirectional LSTM query encoder, per-cell concatenation of
/// [visual ; query ; Cx ; Cy], and a conv head shared across levels that emits
/// one logit and four box offsets per anchor.
template <class T>
class ZsgNet {
 public:
  ZsgNet(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    init(seed);
  }

  ZsgNet(ModelConfig config, ParameterStore<T> params) : config_(std::move(config)), params_(std::move(params)) {
    config_.validate();
  }

  const ModelConfig& config() const { return config_; }
  ParameterStore<T>& params() { return params_; }
  const ParameterStore<T>& params() const { return params_; }

  std::vector<FeatureMapSpec> feature_specs() const {
    return pyramid_specs(config_.image, config_.levels, config_.first_stride());
  }

  AnchorSet anchors() const {
    std::vector<int> strides;
    for (const auto& s : feature_specs()) strides.push_back(s.stride);
    return generate_anchors(config_.image, feature_specs(), AnchorConfig::for_strides(strides));
  }

  /// K channel-normalized feature maps, finest first.
  std::vector<ad::Tensor<T>> encode_image(ad::Tape<T>& tape, const ad::Tensor<T>& images) const {
    if (!(images.rank() == 4 && images.dim(1) == 3 &&
          images.dim(2) == static_cast<std::size_t>(config_.image.height) &&
          images.dim(3) == static_cast<std::size_t>(config_.image.width)))
      fail(ErrorClass::InvalidInput,
            "encode_image: expected N x 3 x " + std::to_string(config_.image.height) + " x " +
                std::to_string(config_.image.width) + ", got " + ad::shape_string(images.shape()));
    ad::Tensor<T> x = images;
    for (int s = 0; s < config_.stem_convs; ++s) x = conv_relu(tape, x, "enc.stem" + std::to_string(s));
    std::vector<ad::Tensor<T>> maps;
    for (int l = 0; l < config_.levels; ++l) {
      x = conv_relu(tape, x, "enc.level" + std::to_string(l));
      maps.push_back(ad::channel_l2_normalize(tape, x, static_cast<T>(config_.norm_eps)));
    }
    return maps;
  }

  /// Forward and backward LSTM over the embedded tokens; the final hidden
  /// states of both directions are concatenated and L2-normalized.
  QueryEncoding<T> encode_query(ad::Tape<T>& tape, const std::vector<std::vector<int>>& tokens,
                                const EmbeddingTable& table) const {
    require(table.dim() == static_cast<std::size_t>(config_.embed_dim), ErrorClass::InvalidInput,
            "encode_query: embedding width does not match the model");
    const std::size_t d = static_cast<std::size_t>(config_.hidden);
    std::vector<ad::Tensor<T>> rows;
    for (const auto& phrase : tokens) {
      require(!phrase.empty(), ErrorClass::InvalidInput, "encode_query: empty phrase");
      std::vector<ad::Tensor<T>> steps;
      for (int id : phrase) {
        require(id >= 0 && static_cast<std::size_t>(id) < table.size(), ErrorClass::InvalidInput,
                "encode_query: token id outside the embedding table");
        const double* r = table.row(id);
        steps.emplace_back(ad::Shape{1, table.dim()}, std::vector<T>(r, r + table.dim()));
      }
      auto fwd = run_direction(tape, steps, lstm("lstm.fwd"), d, false);
      auto bwd = run_direction(tape, steps, lstm("lstm.bwd"), d, true);
      rows.push_back(ad::concat_channels(tape, std::vector<ad::Tensor<T>>{fwd, bwd}));
    }
    auto raw = ad::concat_rows(tape, rows);
    QueryEncoding<T> q;
    const T eps = static_cast<T>(config_.norm_eps);
    for (std::size_t n = 0; n < raw.dim(0); ++n) {
      T sq = 0;
      for (std::size_t k = 0; k < 2 * d; ++k) sq += raw[n * 2 * d + k] * raw[n * 2 * d + k];
      q.degenerate.push_back(!(std::sqrt(sq) > eps));
    }
    q.features = ad::channel_l2_normalize(tape, raw, eps);
    return q;
  }

  /// Per-cell [v_hat ; h_hat ; Cx ; Cy], with Cx, Cy the cell center over the
  /// image width and height. Blind modes zero the query or the visual block.
  ad::Tensor<T> fuse(ad::Tape<T>& tape, const ad::Tensor<T>& v_hat, const ad::Tensor<T>& h_hat,
                     const FeatureMapSpec& spec) const {
    const std::size_t n = v_hat.dim(0), h = v_hat.dim(2), w = v_hat.dim(3);
    require(h == static_cast<std::size_t>(spec.height) && w == static_cast<std::size_t>(spec.width),
            ErrorClass::InvalidInput, "fuse: feature map does not match its spec");
    require(h_hat.rank() == 2 && h_hat.dim(0) == n, ErrorClass::InvalidInput, "fuse: batch mismatch");
    ad::Tensor<T> coords(ad::Shape{n, 2, h, w});
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          coords[((b * 2 + 0) * h + y) * w + x] =
              static_cast<T>((x + 0.5) * spec.stride / static_cast<double>(config_.image.width));
          coords[((b * 2 + 1) * h + y) * w + x] =
              static_cast<T>((y + 0.5) * spec.stride / static_cast<double>(config_.image.height));
        }
    ad::Tensor<T> visual = config_.blind == BlindMode::ImageBlind ? ad::Tensor<T>(v_hat.shape()) : v_hat;
    ad::Tensor<T> query = config_.blind == BlindMode::LanguageBlind
                              ? ad::Tensor<T>(ad::Shape{n, h_hat.dim(1), h, w})
                              : ad::tile_spatial(tape, h_hat, h, w);
    return ad::concat_channels(tape, std::vector<ad::Tensor<T>>{visual, query, coords});
  }

  /// Conv stack mapping fused channels to 9 x 5 outputs per cell; channel
  /// slot * 5 holds the logit and slot * 5 + 1..4 the box offsets.
  ad::Tensor<T> head(ad::Tape<T>& tape, const ad::Tensor<T>& fused) const {
    ad::Tensor<T> x = fused;
    for (int i = 0; i < config_.head_depth; ++i) x = conv_relu(tape, x, "head.h" + std::to_string(i), 1);
    return ad::conv2d(tape, x, params_.get("head.out.w"), params_.get("head.out.b"), 1, 1);
  }

  Predictions<T> forward(ad::Tape<T>& tape, const ad::Tensor<T>& images, const std::vector<std::vector<int>>& tokens,
                         const EmbeddingTable& table) const {
    require(images.dim(0) == tokens.size(), ErrorClass::InvalidInput, "forward: batch size mismatch");
    const auto specs = feature_specs();
    const auto maps = encode_image(tape, images);
    const auto query = encode_query(tape, tokens, table);
    std::vector<ad::Tensor<T>> outs;
    for (std::size_t l = 0; l < maps.size(); ++l) outs.push_back(head(tape, fuse(tape, maps[l], query.features, specs[l])));
    return flatten_head(tape, outs);
  }

  template <class U>
  ZsgNet<U> cast() const {
    return ZsgNet<U>(config_, params_.template cast<U>());
  }

 private:
  void init(std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t c = static_cast<std::size_t>(config_.encoder_channels);
    std::size_t in = 3;
    for (int s = 0; s < config_.stem_convs; ++s, in = c) add_conv(rng, "enc.stem" + std::to_string(s), c, in, 3);
    for (int l = 0; l < config_.levels; ++l, in = c) add_conv(rng, "enc.level" + std::to_string(l), c, in, 3);
    for (const char* dir : {"lstm.fwd", "lstm.bwd"}) {
      const std::size_t d = static_cast<std::size_t>(config_.hidden), q = static_cast<std::size_t>(config_.embed_dim);
      params_.add(std::string(dir) + ".wx", glorot(rng, {q, 4 * d}, q, 4 * d));
      params_.add(std::string(dir) + ".wh", glorot(rng, {d, 4 * d}, d, 4 * d));
      params_.add(std::string(dir) + ".b", ad::Tensor<T>(ad::Shape{4 * d}));
    }
    in = static_cast<std::size_t>(config_.fused_channels());
    const std::size_t hc = static_cast<std::size_t>(config_.head_channels);
    for (int i = 0; i < config_.head_depth; ++i, in = hc) add_conv(rng, "head.h" + std::to_string(i), hc, in, 3);
    const std::size_t out = kAnchorsPerCell * kHeadOutputsPerAnchor;
    add_conv(rng, "head.out", out, in, 3);
    auto& b = params_.get("head.out.b");
    for (int slot = 0; slot < kAnchorsPerCell; ++slot)
      b[static_cast<std::size_t>(slot * kHeadOutputsPerAnchor)] = static_cast<T>(config_.logit_bias_init);
  }

  static ad::Tensor<T> glorot(Rng& rng, ad::Shape shape, std::size_t fan_in, std::size_t fan_out) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    ad::Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-limit, limit));
    return t;
  }

  void add_conv(Rng& rng, const std::string& name, std::size_t out, std::size_t in, std::size_t k) {
    if (config_.weight_init == "he") {
      const double sd = std::sqrt(2.0 / static_cast<double>(in * k * k));
      ad::Tensor<T> w(ad::Shape{out, in, k, k});
      for (auto& v : w.data()) v = static_cast<T>(rng.normal() * sd);
      params_.add(name + ".w", std::move(w));
    } else {
      params_.add(name + ".w", glorot(rng, {out, in, k, k}, in * k * k, out * k * k));
    }
    params_.add(name + ".b", ad::Tensor<T>(ad::Shape{out}));
  }

  ad::Tensor<T> conv_relu(ad::Tape<T>& tape, const ad::Tensor<T>& x, const std::string& name,
                          std::size_t stride = 2) const {
    return ad::relu(tape, ad::conv2d(tape, x, params_.get(name + ".w"), params_.get(name + ".b"), stride, 1));
  }

  ad::LstmParams<T> lstm(const std::string& prefix) const {
    return {params_.get(prefix + ".wx"), params_.get(prefix + ".wh"), params_.get(prefix + ".b")};
  }

  static ad::Tensor<T> run_direction(ad::Tape<T>& tape, const std::vector<ad::Tensor<T>>& steps,
                                     const ad::LstmParams<T>& p, std::size_t d, bool reverse) {
    ad::LstmState<T> s{ad::Tensor<T>(ad::Shape{1, d}), ad::Tensor<T>(ad::Shape{1, d})};
    for (std::size_t i = 0; i < steps.size(); ++i) {
      const auto& x = steps[reverse ? steps.size() - 1 - i : i];
      s = ad::recurrent_step(tape, x, s, p);
    }
    return s.h;
  }

  /// Gathers per-level head outputs into anchor order (level, y, x, slot).
  static Predictions<T> flatten_head(ad::Tape<T>& tape, const std::vector<ad::Tensor<T>>& outs) {
    const std::size_t n = outs[0].dim(0);
    std::size_t total = 0;
    for (const auto& o : outs) total += o.dim(2) * o.dim(3) * kAnchorsPerCell;
    const bool rg = tape.recording() && ad::any_requires_grad(outs);
    Predictions<T> p{ad::Tensor<T>(ad::Shape{n, total}, T(0), rg), ad::Tensor<T>(ad::Shape{n, total, 4}, T(0), rg)};
    // (level, source offset, anchor index) triples are implicit in the loops;
    // the same traversal is repeated in the backward closure.
    auto traverse = [n, total](const std::vector<std::shared_ptr<ad::TensorNode<T>>>& nodes, auto&& visit) {
      std::size_t base = 0;
      for (const auto& node : nodes) {
        const std::size_t c = node->shape[1], h = node->shape[2], w = node->shape[3], hw = h * w;
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x)
              for (std::size_t slot = 0; slot < kAnchorsPerCell; ++slot) {
                const std::size_t a = base + (y * w + x) * kAnchorsPerCell + slot;
                const std::size_t src = (b * c + slot * kHeadOutputsPerAnchor) * hw + y * w + x;
                visit(*node, src, hw, b * total + a);
              }
        base += hw * kAnchorsPerCell;
      }
    };
    std::vector<std::shared_ptr<ad::TensorNode<T>>> nodes;
    for (const auto& o : outs) nodes.push_back(o.shared_node());
    traverse(nodes, [&](const ad::TensorNode<T>& node, std::size_t src, std::size_t hw, std::size_t dst) {
      p.logits[dst] = node.value[src];
      for (std::size_t k = 0; k < 4; ++k) p.regression[dst * 4 + k] = node.value[src + (k + 1) * hw];
    });
    if (rg) {
      tape.record([nodes, ln = p.logits.shared_node(), rn = p.regression.shared_node(), traverse] {
        traverse(nodes, [&](ad::TensorNode<T>& node, std::size_t src, std::size_t hw, std::size_t dst) {
          if (!node.requires_grad) return;
          node.grad[src] += ln->grad[dst];
          for (std::size_t k = 0; k < 4; ++k) node.grad[src + (k + 1) * hw] += rn->grad[dst * 4 + k];
        });
      });
    }
    return p;
  }

  ModelConfig config_;
  ParameterStore<T> params_;
};

// ---------------------------------------------------------------- checkpoint
//
// Layout: 8-byte magic "ZSGCKPT\0", u32 format version, u64 manifest length,
// UTF-8 JSON manifest {version, dtype, config, tensors[{name, shape, offset,
// count}]}, then raw little-endian tensor buffers in manifest order.

inline constexpr char kCheckpointMagic[8] = {'Z', 'S', 'G', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class U>
void write_le(std::ostream& out, U v) {
  unsigned char bytes[sizeof(U)];
  std::memcpy(bytes, &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <class U>
U read_le(std::istream& in) {
  unsigned char bytes[sizeof(U)];
  in.read(reinterpret_cast<char*>(bytes), sizeof(U));
  require(static_cast<bool>(in), ErrorClass::IoError, "checkpoint: truncated file");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
  U v;
  std::memcpy(&v, bytes, sizeof(U));
  return v;
}

}  // namespace detail

template <class T>
void save_checkpoint(const ZsgNet<T>& model, const std::string& path, const nlohmann::json& extra = {}) {
  nlohmann::json manifest;
  manifest["version"] = kCheckpointVersion;
  manifest["dtype"] = sizeof(T) == 4 ? "f32" : "f64";
  manifest["config"] = to_json(model.config());
  if (!extra.is_null()) manifest["extra"] = extra;
  std::size_t offset = 0;
  for (const auto& [name, t] : model.params().entries()) {
    manifest["tensors"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"count", t.size()}});
    offset += t.size() * sizeof(T);
  }
  const std::string text = manifest.dump();
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorClass::IoError, "cannot write checkpoint " + path);
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::write_le<std::uint32_t>(out, kCheckpointVersion);
  detail::write_le<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : model.params().entries())
    for (T v : t.data()) detail::write_le<T>(out, v);
  require(static_cast<bool>(out), ErrorClass::IoError, "failed writing checkpoint " + path);
}

struct CheckpointInfo {
  nlohmann::json manifest;
};

template <class T>
ZsgNet<T> load_checkpoint(const std::string& path, CheckpointInfo* info = nullptr) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorClass::IoError, "cannot open checkpoint " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  require(in && std::memcmp(magic, kCheckpointMagic, sizeof(magic)) == 0, ErrorClass::IoError,
          "checkpoint: bad magic in " + path);
  const auto version = detail::read_le<std::uint32_t>(in);
  require(version == kCheckpointVersion, ErrorClass::IoError,
          "checkpoint: unsupported version " + std::to_string(version));
  const auto len = detail::read_le<std::uint64_t>(in);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  require(static_cast<bool>(in), ErrorClass::IoError, "checkpoint: truncated manifest");
  auto manifest = nlohmann::json::parse(text);
  const bool f32 = manifest.at("dtype") == "f32";
  ParameterStore<T> params;
  for (const auto& e : manifest.at("tensors")) {
    ad::Shape shape = e.at("shape").get<ad::Shape>();
    std::vector<T> values(e.at("count").get<std::size_t>());
    for (auto& v : values) v = f32 ? static_cast<T>(detail::read_le<float>(in)) : static_cast<T>(detail::read_le<double>(in));
    params.add(e.at("name").get<std::string>(), ad::Tensor<T>(shape, std::move(values)));
  }
  if (info) info->manifest = manifest;
  return ZsgNet<T>(model_config_from_json(manifest.at("config")), std::move(params));
}

}  // namespace zsg
