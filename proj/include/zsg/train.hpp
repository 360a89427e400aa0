#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "anchor.hpp"
#include "embedding.hpp"
#include "loss.hpp"
#include "model.hpp"
#include "rng.hpp"
#include "sample.hpp"

namespace zsg {

// ---------------------------------------------------------------- optimizer

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <class T>
struct AdamState {
  std::vector<std::vector<T>> m, v;
  std::uint64_t step = 0;
};

/// One bias-corrected Adam update over all parameters in store order.
/// Throws NumericError (naming the parameter) on a non-finite gradient,
/// before any parameter is modified.
template <class T>
void adam_step(ParameterStore<T>& params, AdamState<T>& state, const AdamConfig& config) {
  auto& entries = params.entries();
  for (const auto& [name, t] : entries) {
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (!std::isfinite(static_cast<double>(t.grad()[i]))) {
        std::ostringstream os;
        os << "adam_step: non-finite gradient in '" << name << "' at element " << i << " (value "
           << t.grad()[i] << ", step " << state.step + 1 << ")";
        fail(ErrorClass::NumericError, os.str());
      }
    }
  }
  if (state.m.size() != entries.size()) {
    state.m.clear();
    state.v.clear();
    for (const auto& [name, t] : entries) {
      state.m.emplace_back(t.size(), T(0));
      state.v.emplace_back(t.size(), T(0));
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(config.beta1), b2 = static_cast<T>(config.beta2);
  for (std::size_t e = 0; e < entries.size(); ++e) {
    auto& t = entries[e].second;
    auto& m = state.m[e];
    auto& v = state.v[e];
    for (std::size_t i = 0; i < t.size(); ++i) {
      const T g = t.grad()[i];
      m[i] = b1 * m[i] + (T(1) - b1) * g;
      v[i] = b2 * v[i] + (T(1) - b2) * g * g;
      const double mhat = static_cast<double>(m[i]) / c1;
      const double vhat = static_cast<double>(v[i]) / c2;
      t[i] -= static_cast<T>(config.learning_rate * mhat / (std::sqrt(vhat) + config.epsilon));
    }
  }
}

// ---------------------------------------------------------------- configuration

struct TrainConfig {
  AdamConfig adam;
  int epochs = 20;
  int batch_size = 16;
  std::uint64_t seed = 0;
  LossConfig loss;
  double match_iou = 0.5;
  int patience = 5;           // epochs without validation improvement before stopping
  int threads = 1;            // evaluation workers
  bool horizontal_flip = false;  // must stay off: queries carry left/right words

  void validate() const {
    require(adam.learning_rate >= 0, ErrorClass::ConfigError, "train: learning rate must be >= 0");
    require(epochs >= 1, ErrorClass::ConfigError, "train: epochs must be >= 1");
    require(batch_size >= 1, ErrorClass::ConfigError, "train: batch size must be >= 1");
    require(threads >= 1, ErrorClass::ConfigError, "train: threads must be >= 1");
    require(!horizontal_flip, ErrorClass::ConfigError,
            "train: flip augmentation is not allowed for grounding (location words would become false)");
    loss.validate();
  }
};

// ---------------------------------------------------------------- batching

/// Centered pixels (x - 0.5) of the given samples as an N x 3 x H x W tensor.
/// Pixels are copied verbatim: no flips or other augmentation.
template <class T>
ad::Tensor<T> make_image_batch(const std::vector<const GroundingSample*>& batch) {
  require(!batch.empty(), ErrorClass::InvalidInput, "empty batch");
  const ImageSize sz = batch[0]->image_size;
  const std::size_t per = 3 * static_cast<std::size_t>(sz.width * sz.height);
  ad::Tensor<T> images(ad::Shape{batch.size(), 3, static_cast<std::size_t>(sz.height), static_cast<std::size_t>(sz.width)});
  for (std::size_t n = 0; n < batch.size(); ++n) {
    require(batch[n]->image_size == sz && batch[n]->pixels.size() == per, ErrorClass::InvalidInput,
            "batch: all images must share one size");
    for (std::size_t i = 0; i < per; ++i) images[n * per + i] = static_cast<T>(batch[n]->pixels[i] - 0.5f);
  }
  return images;
}

struct LossValues {
  double l_pred = 0;
  double l_reg = 0;
  double total = 0;
  double mean_foreground = 0;
};

/// Builds the batch-mean grounding loss on `tape`; returns the scalar total.
template <class T>
ad::Tensor<T> batch_loss(ad::Tape<T>& tape, const ZsgNet<T>& model, const std::vector<const GroundingSample*>& batch,
                         const std::vector<const MatchResult*>& matches, const EmbeddingTable& table,
                         const LossConfig& loss, LossValues* values = nullptr) {
  auto images = make_image_batch<T>(batch);
  std::vector<std::vector<int>> tokens;
  for (const auto* s : batch) tokens.push_back(s->tokens);
  auto pred = model.forward(tape, images, tokens, table);
  std::vector<ad::Tensor<T>> totals;
  LossValues lv;
  for (std::size_t n = 0; n < batch.size(); ++n) {
    auto lb = grounding_loss(tape, ad::slice_rows(tape, pred.logits, n, n + 1),
                             ad::slice_rows(tape, pred.regression, n, n + 1), *matches[n], loss);
    lv.l_pred += static_cast<double>(lb.l_pred.item());
    lv.l_reg += static_cast<double>(lb.l_reg.item());
    lv.mean_foreground += static_cast<double>(lb.num_foreground);
    totals.push_back(lb.total);
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  auto total = ad::scale(tape, ad::add_scalars(tape, totals), static_cast<T>(inv));
  if (values) {
    lv.l_pred *= inv;
    lv.l_reg *= inv;
    lv.mean_foreground *= inv;
    lv.total = static_cast<double>(total.item());
    *values = lv;
  }
  return total;
}

/// forward -> per-sample loss averaged over the batch -> backward -> Adam.
template <class T>
LossValues train_step(ZsgNet<T>& model, AdamState<T>& optimizer, const std::vector<const GroundingSample*>& batch,
                      const std::vector<const MatchResult*>& matches, const EmbeddingTable& table,
                      const TrainConfig& config) {
  model.params().zero_grad();
  ad::Tape<T> tape;
  LossValues lv;
  auto total = batch_loss(tape, model, batch, matches, table, config.loss, &lv);
  tape.backward(total);
  adam_step(model.params(), optimizer, config.adam);
  return lv;
}

// ---------------------------------------------------------------- inference

struct GroundingPrediction {
  Box box;
  double score = 0;
  std::size_t anchor = 0;
};

/// Highest-logit anchor (lowest index on ties), decoded and clipped.
template <class T>
GroundingPrediction select_prediction(const Predictions<T>& pred, std::size_t n, const AnchorSet& anchors,
                                      ImageSize image) {
  const std::size_t a_count = pred.anchors();
  require(a_count == anchors.size(), ErrorClass::InvalidInput, "predict: prediction/anchor count mismatch");
  std::size_t best = 0;
  T best_logit = pred.logits[n * a_count];
  for (std::size_t a = 1; a < a_count; ++a) {
    const T z = pred.logits[n * a_count + a];
    if (z > best_logit) {
      best_logit = z;
      best = a;
    }
  }
  GroundingPrediction g;
  g.anchor = best;
  g.score = ad::detail::stable_sigmoid(static_cast<double>(best_logit));
  g.box = decode_regression(anchors.boxes[best], pred.params(n, best), image);
  return g;
}

template <class T>
std::vector<GroundingPrediction> predict_batch(const ZsgNet<T>& model, const AnchorSet& anchors,
                                               const std::vector<const GroundingSample*>& batch,
                                               const EmbeddingTable& table) {
  ad::Tape<T> tape(false);
  std::vector<std::vector<int>> tokens;
  for (const auto* s : batch) tokens.push_back(s->tokens);
  auto pred = model.forward(tape, make_image_batch<T>(batch), tokens, table);
  std::vector<GroundingPrediction> out;
  for (std::size_t n = 0; n < batch.size(); ++n)
    out.push_back(select_prediction(pred, n, anchors, model.config().image));
  return out;
}

template <class T>
GroundingPrediction predict(const ZsgNet<T>& model, const AnchorSet& anchors, const GroundingSample& sample,
                            const EmbeddingTable& table) {
  return predict_batch(model, anchors, {&sample}, table).front();
}

/// Predictions for every sample. Work is sharded over `threads` workers; each
/// result lands at its sample's index, so the output does not depend on the
/// thread count.
template <class T>
std::vector<GroundingPrediction> predict_all(const ZsgNet<T>& model, const std::vector<GroundingSample>& samples,
                                             const EmbeddingTable& table, int threads = 1, std::size_t chunk = 32) {
  const AnchorSet anchors = model.anchors();
  std::vector<GroundingPrediction> out(samples.size());
  const std::size_t chunks = (samples.size() + chunk - 1) / chunk;
  auto work = [&](std::size_t worker, std::size_t workers) {
    for (std::size_t c = worker; c < chunks; c += workers) {
      std::vector<const GroundingSample*> batch;
      for (std::size_t i = c * chunk; i < std::min(samples.size(), (c + 1) * chunk); ++i) batch.push_back(&samples[i]);
      auto preds = predict_batch(model, anchors, batch, table);
      for (std::size_t k = 0; k < preds.size(); ++k) out[c * chunk + k] = preds[k];
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(static_cast<std::size_t>(threads), chunks));
  if (workers == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w, workers);
    for (auto& t : pool) t.join();
  }
  return out;
}

/// Fraction of predictions whose IoU with the ground truth exceeds the
/// threshold (strict).
inline double grounding_accuracy(const std::vector<GroundingPrediction>& preds, const std::vector<GroundingSample>& samples,
                                 double threshold = 0.5) {
  require(!samples.empty() && preds.size() == samples.size(), ErrorClass::InvalidInput,
          "accuracy: empty or mismatched inputs");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) correct += iou(preds[i].box, samples[i].gt) > threshold;
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

// ---------------------------------------------------------------- training loop

struct EpochMetrics {
  int epoch = 0;
  double l_pred = 0;
  double l_reg = 0;
  double val_accuracy = 0;
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  double best_val_accuracy = -1;
  int best_epoch = 0;
  bool early_stopped = false;
};

inline std::string metrics_header() { return "epoch,l_pred,l_reg,val_accuracy"; }

inline std::string metrics_line(const EpochMetrics& m) {
  std::ostringstream os;
  os.precision(9);
  os << m.epoch << ',' << m.l_pred << ',' << m.l_reg << ',' << m.val_accuracy;
  return os.str();
}

/// Epoch loop with seeded shuffling, per-epoch validation, early stopping on
/// a validation plateau, and restoration of the best parameters.
template <class T>
TrainResult train(ZsgNet<T>& model, const std::vector<GroundingSample>& train_set,
                  const std::vector<GroundingSample>& val_set, const EmbeddingTable& table, const TrainConfig& config,
                  const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
  config.validate();
  require(!train_set.empty(), ErrorClass::InvalidInput, "train: empty training set");
  const AnchorSet anchors = model.anchors();
  std::vector<MatchResult> matches;
  matches.reserve(train_set.size());
  for (const auto& s : train_set) matches.push_back(match_anchors(anchors, s.gt, config.match_iou));

  Rng rng(derive_seed(config.seed, 0x7472));
  AdamState<T> opt;
  TrainResult result;
  ParameterStore<T> best = model.params().clone();
  int since_best = 0;
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    rng.shuffle(order);
    EpochMetrics m;
    m.epoch = epoch;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      std::vector<const GroundingSample*> batch;
      std::vector<const MatchResult*> batch_matches;
      for (std::size_t k = start; k < std::min(order.size(), start + config.batch_size); ++k) {
        batch.push_back(&train_set[order[k]]);
        batch_matches.push_back(&matches[order[k]]);
      }
      auto lv = train_step(model, opt, batch, batch_matches, table, config);
      m.l_pred += lv.l_pred;
      m.l_reg += lv.l_reg;
      ++steps;
    }
    m.l_pred /= static_cast<double>(steps);
    m.l_reg /= static_cast<double>(steps);
    m.val_accuracy = val_set.empty() ? 0.0
                                     : grounding_accuracy(predict_all(model, val_set, table, config.threads), val_set);
    result.history.push_back(m);
    if (on_epoch) on_epoch(m);
    if (m.val_accuracy > result.best_val_accuracy) {
      result.best_val_accuracy = m.val_accuracy;
      result.best_epoch = epoch;
      best = model.params().clone();
      since_best = 0;
    } else if (++since_best >= config.patience) {
      result.early_stopped = true;
      break;
    }
  }
  model.params() = std::move(best);
  return result;
}

}  // namespace zsg
