#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "error.hpp"
#include "eval.hpp"
#include "gradcheck_suite.hpp"
#include "image_io.hpp"
#include "model.hpp"
#include "splits.hpp"
#include "synthdata.hpp"
#include "train.hpp"

namespace zsg::cli {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------- configuration

/// Every key a config file may set, with its default. Unknown keys are
/// rejected so that typos cannot silently fall back to defaults.
inline json default_config() {
  json model = to_json(ModelConfig{});
  model.erase("image_width");
  model.erase("image_height");
  return {
      {"seed", 1},
      {"threads", 1},
      {"out", "out"},
      {"data", ""},
      {"checkpoint", ""},
      {"image_size", 64},
      {"model", model},
      {"train",
       {{"learning_rate", 1e-4},
        {"beta1", 0.9},
        {"beta2", 0.999},
        {"epsilon", 1e-8},
        {"epochs", 30},
        {"batch_size", 16},
        {"patience", 30},
        {"match_iou", 0.5},
        {"loss", "focal"},
        {"alpha", 0.25},
        {"gamma", 2.0},
        {"lambda", 1.0},
        {"train_limit", 0}}},
      {"eval",
       {{"iou_thresh", 0.5},
        {"bucket_edges", EvalConfig{}.bucket_edges},
        {"splits", {"val", "case0", "case1", "case2", "case3"}},
        {"overlays", 0}}},
      {"synth",
       {{"train", 5000},
        {"val", 500},
        {"case0", 500},
        {"case1", 500},
        {"case2", 500},
        {"case3", 500},
        {"min_objects", 1},
        {"max_objects", 4}}},
      {"split",
       {{"annotations", ""}, {"embeddings", ""}, {"top_i", 1000}, {"ratio", 0.7}, {"k", 20}, {"clean", true}}},
      {"predict", {{"image", ""}, {"query", ""}, {"embeddings", ""}}},
      {"ablate",
       {{"mode", "loss"},
        {"seeds", {1, 2, 3}},
        {"variants", {"softmax", "bce", "focal", "focal+resize"}},
        {"train", 5000},
        {"val", 300},
        {"test", 2000},
        {"epochs", 10},
        {"min_objects", 1},
        {"max_objects", 4},
        {"resize_image", 128},
        {"resize_extra_stem", 0}}},
  };
}

inline void check_known_keys(const json& given, const json& defaults, const std::string& where) {
  for (const auto& [k, v] : given.items()) {
    require(defaults.contains(k), ErrorClass::ConfigError, "unknown config key '" + where + k + "'");
    if (v.is_object() && defaults.at(k).is_object()) check_known_keys(v, defaults.at(k), where + k + ".");
  }
}

inline json load_config_file(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorClass::IoError, "cannot open config " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    fail(ErrorClass::ConfigError, "config " + path + ": " + e.what());
  }
}

/// Defaults, then the config file, then command-line overrides.
inline json resolve_config(const std::string& path, const json& overrides) {
  json cfg = default_config();
  if (!path.empty()) {
    const json file = load_config_file(path);
    require(file.is_object(), ErrorClass::ConfigError, "config " + path + " must hold an object");
    check_known_keys(file, cfg, "");
    cfg.merge_patch(file);
  }
  check_known_keys(overrides, cfg, "");
  cfg.merge_patch(overrides);
  return cfg;
}

template <class V>
V get(const json& j, const std::string& key) {
  try {
    return j.at(key).get<V>();
  } catch (const json::exception& e) {
    fail(ErrorClass::ConfigError, "config key '" + key + "': " + e.what());
  }
}

inline ImageSize image_size_of(const json& cfg) {
  const int s = get<int>(cfg, "image_size");
  require(s >= 16, ErrorClass::ConfigError, "image_size must be >= 16");
  return {s, s};
}

inline ModelConfig model_config_of(const json& cfg) {
  ModelConfig m = model_config_from_json(cfg.at("model"));
  m.image = image_size_of(cfg);
  m.validate();
  return m;
}

inline TrainConfig train_config_of(const json& cfg) {
  const json& t = cfg.at("train");
  TrainConfig c;
  c.adam.learning_rate = get<double>(t, "learning_rate");
  c.adam.beta1 = get<double>(t, "beta1");
  c.adam.beta2 = get<double>(t, "beta2");
  c.adam.epsilon = get<double>(t, "epsilon");
  c.epochs = get<int>(t, "epochs");
  c.batch_size = get<int>(t, "batch_size");
  c.patience = get<int>(t, "patience");
  c.match_iou = get<double>(t, "match_iou");
  c.loss.variant = parse_loss_variant(get<std::string>(t, "loss"));
  c.loss.alpha = get<double>(t, "alpha");
  c.loss.gamma = get<double>(t, "gamma");
  c.loss.lambda = get<double>(t, "lambda");
  c.seed = get<std::uint64_t>(cfg, "seed");
  c.threads = get<int>(cfg, "threads");
  c.validate();
  return c;
}

inline EvalConfig eval_config_of(const json& cfg) {
  EvalConfig e;
  e.iou_threshold = get<double>(cfg.at("eval"), "iou_thresh");
  e.bucket_edges = get<std::vector<double>>(cfg.at("eval"), "bucket_edges");
  e.validate();
  return e;
}

inline SynthOptions synth_options_of(const json& cfg, const json& section) {
  SynthOptions o;
  o.image = image_size_of(cfg);
  o.seed = get<std::uint64_t>(cfg, "seed");
  o.min_objects = get<int>(section, "min_objects");
  o.max_objects = get<int>(section, "max_objects");
  require(o.min_objects >= 1 && o.max_objects >= o.min_objects, ErrorClass::ConfigError,
          "object counts need 1 <= min_objects <= max_objects");
  return o;
}

// ---------------------------------------------------------------- output helpers

inline fs::path prepare_out(const json& cfg) {
  const fs::path out = get<std::string>(cfg, "out");
  require(!out.empty(), ErrorClass::ConfigError, "no output directory (--out)");
  std::error_code ec;
  fs::create_directories(out, ec);
  require(!ec, ErrorClass::IoError, "cannot create " + out.string());
  return out;
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  require(static_cast<bool>(f), ErrorClass::IoError, "cannot write " + path.string());
  f << text;
  require(static_cast<bool>(f), ErrorClass::IoError, "failed writing " + path.string());
}

/// The snapshot is itself a valid --config file reproducing the run.
inline void write_snapshot(const fs::path& out, const std::string& command, const json& cfg) {
  json snap = cfg;
  write_text(out / "resolved_config.json", snap.dump(2) + "\n");
  write_text(out / "command.txt", command + "\n");
}

inline std::string fixed(double v, int digits = 6) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

inline fs::path required_path(const json& j, const std::string& key, const std::string& flag) {
  const std::string p = get<std::string>(j, key);
  require(!p.empty(), ErrorClass::ConfigError, "missing " + key + " (" + flag + ")");
  return p;
}

// ---------------------------------------------------------------- commands

struct Context {
  std::ostream& out;
  std::ostream& log;
};

inline int cmd_synth_gen(const json& cfg, Context& ctx) {
  const fs::path out = prepare_out(cfg);
  const json& s = cfg.at("synth");
  const SplitSizes sizes{get<std::size_t>(s, "train"), get<std::size_t>(s, "val"),   get<std::size_t>(s, "case0"),
                         get<std::size_t>(s, "case1"), get<std::size_t>(s, "case2"), get<std::size_t>(s, "case3")};
  const Benchmark bm = generate_benchmark(default_vocab(), sizes, synth_options_of(cfg, s));
  const auto violations = audit_benchmark(bm, sizes);
  if (!violations.empty()) fail(ErrorClass::ContractViolation, "benchmark audit: " + violations.front());
  write_benchmark(bm, out.string());
  // the same scenes as an annotation dump for the split tools
  std::vector<GroundingSample> all;
  for (CaseLabel c : all_case_labels()) all.insert(all.end(), bm.splits.at(c).begin(), bm.splits.at(c).end());
  std::set<std::string> held;
  for (const auto& c : bm.vocab.clusters)
    if (c.holdout) held.insert(c.name);
  write_annotations(records_from_samples(all, held), (out / "annotations.jsonl").string());
  write_snapshot(out, "synth-gen", cfg);
  std::ostringstream report;
  for (CaseLabel c : all_case_labels()) report << to_string(c) << "," << bm.splits.at(c).size() << "\n";
  write_text(out / "split_sizes.csv", "split,count\n" + report.str());
  ctx.out << "synth-gen: wrote " << out.string() << " (audit clean)\n";
  return 0;
}

inline std::vector<GroundingSample> load_split(const fs::path& data, CaseLabel label, const EmbeddingTable& table,
                                               ImageSize expect) {
  auto s = read_split(data.string(), label, table);
  for (const auto& x : s)
    require(x.image_size == expect, ErrorClass::ConfigError,
            "split " + to_string(label) + " has images of another size than image_size");
  return s;
}

inline int cmd_train(const json& cfg, Context& ctx) {
  const fs::path out = prepare_out(cfg);
  const fs::path data = required_path(cfg, "data", "--data");
  const ModelConfig mc = model_config_of(cfg);
  const TrainConfig tc = train_config_of(cfg);
  const EmbeddingTable table = read_embedding_file((data / "embeddings.txt").string());
  auto train_set = load_split(data, CaseLabel::Train, table, mc.image);
  const auto limit = get<std::size_t>(cfg.at("train"), "train_limit");
  if (limit > 0 && limit < train_set.size()) train_set.resize(limit);
  const auto val_set = load_split(data, CaseLabel::Val, table, mc.image);
  write_snapshot(out, "train", cfg);

  ZsgNet<float> model(mc, get<std::uint64_t>(cfg, "seed"));
  std::ostringstream csv;
  csv << metrics_header() << "\n";
  const auto t0 = std::chrono::steady_clock::now();
  const auto result = train(model, train_set, val_set, table, tc, [&](const EpochMetrics& m) {
    csv << metrics_line(m) << "\n";
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    ctx.log << "epoch " << m.epoch << " l_pred " << fixed(m.l_pred) << " l_reg " << fixed(m.l_reg) << " val "
            << fixed(m.val_accuracy, 4) << " (" << fixed(secs, 1) << " s)\n";
  });
  write_text(out / "metrics.csv", csv.str());
  save_checkpoint(model, (out / "model.ckpt").string(),
                  {{"best_epoch", result.best_epoch}, {"best_val_accuracy", result.best_val_accuracy}});
  json summary{{"best_epoch", result.best_epoch},
               {"best_val_accuracy", result.best_val_accuracy},
               {"epochs_run", result.history.size()},
               {"early_stopped", result.early_stopped},
               {"parameters", model.params().count()}};
  write_text(out / "train_summary.json", summary.dump(2) + "\n");
  ctx.out << "train: best val accuracy " << fixed(result.best_val_accuracy, 4) << " at epoch " << result.best_epoch
          << "\n";
  return 0;
}

inline int cmd_eval(const json& cfg, Context& ctx) {
  const fs::path out = prepare_out(cfg);
  const fs::path data = required_path(cfg, "data", "--data");
  const fs::path ckpt = required_path(cfg, "checkpoint", "--model");
  const EvalConfig ec = eval_config_of(cfg);
  const auto model = load_checkpoint<float>(ckpt.string());
  const ImageSize img = model.config().image;
  const EmbeddingTable table = read_embedding_file((data / "embeddings.txt").string());
  const auto train_set = load_split(data, CaseLabel::Train, table, img);
  const ZsgNet<float> untrained(model.config(), get<std::uint64_t>(cfg, "seed"));
  const AnchorSet anchors = model.anchors();
  const int threads = get<int>(cfg, "threads");
  const int overlays = get<int>(cfg.at("eval"), "overlays");
  write_snapshot(out, "eval", cfg);

  std::ostringstream summary;
  summary << "split,count,accuracy,anchor_recall,center_baseline,untrained_baseline,random_anchor_baseline\n";
  for (const auto& name : get<std::vector<std::string>>(cfg.at("eval"), "splits")) {
    const CaseLabel label = parse_case_label(name);
    const auto samples = load_split(data, label, table, img);
    if (samples.empty()) {
      summary << name << ",0,,,,,\n";
      continue;
    }
    const auto preds = predict_all(model, samples, table, threads);
    const auto gts = gts_of(samples);
    EvalReport rep = make_report(boxes_of(preds), samples, ec);
    rep.anchor_recall = anchor_recall_flat(anchors, gts, ec.iou_threshold);
    rep.baselines["center_box"] = accuracy_at_iou(center_box_baseline(samples, train_set), gts, ec.iou_threshold);
    rep.baselines["untrained_model"] =
        accuracy_at_iou(boxes_of(predict_all(untrained, samples, table, threads)), gts, ec.iou_threshold);
    rep.baselines["random_anchor"] = accuracy_at_iou(
        random_anchor_baseline(samples, anchors, get<std::uint64_t>(cfg, "seed")), gts, ec.iou_threshold);
    write_text(out / ("eval_" + name + ".json"), to_json(rep).dump(2) + "\n");
    write_text(out / ("eval_" + name + ".csv"), to_csv(rep));
    summary << name << "," << rep.total << "," << fixed(rep.accuracy) << "," << fixed(*rep.anchor_recall) << ","
            << fixed(rep.baselines["center_box"]) << "," << fixed(rep.baselines["untrained_model"]) << ","
            << fixed(rep.baselines["random_anchor"]) << "\n";
    for (int i = 0; i < std::min<int>(overlays, static_cast<int>(samples.size())); ++i) {
      const fs::path dir = out / "overlays" / name;
      fs::create_directories(dir);
      write_overlay(samples[static_cast<std::size_t>(i)], preds[static_cast<std::size_t>(i)].box,
                    (dir / (samples[static_cast<std::size_t>(i)].id + ".ppm")).string());
    }
    ctx.out << "eval " << name << ": accuracy " << fixed(rep.accuracy, 4) << " (center "
            << fixed(rep.baselines["center_box"], 4) << ", untrained " << fixed(rep.baselines["untrained_model"], 4)
            << ", anchor recall " << fixed(*rep.anchor_recall, 4) << ")\n";
  }
  write_text(out / "eval_metrics.csv", summary.str());
  return 0;
}

inline int cmd_predict(const json& cfg, Context& ctx) {
  const json& p = cfg.at("predict");
  const fs::path ckpt = required_path(cfg, "checkpoint", "--model");
  const fs::path image = required_path(p, "image", "--image");
  const std::string query = get<std::string>(p, "query");
  require(!query.empty(), ErrorClass::ConfigError, "missing query (--query)");
  const auto model = load_checkpoint<float>(ckpt.string());
  fs::path emb = get<std::string>(p, "embeddings");
  if (emb.empty() && !get<std::string>(cfg, "data").empty()) emb = fs::path(get<std::string>(cfg, "data")) / "embeddings.txt";
  require(!emb.empty(), ErrorClass::ConfigError, "missing embeddings (--embeddings or --data)");
  const EmbeddingTable table = read_embedding_file(emb.string());
  GroundingSample s;
  s.id = image.stem().string();
  s.pixels = read_ppm(image.string(), &s.image_size);
  require(s.image_size == model.config().image, ErrorClass::InvalidInput,
          "image is " + std::to_string(s.image_size.width) + "x" + std::to_string(s.image_size.height) +
              " but the model expects " + std::to_string(model.config().image.width) + "x" +
              std::to_string(model.config().image.height));
  s.query = query;
  s.tokens = table.tokenize(query);
  const auto g = predict(model, model.anchors(), s, table);
  const json res{{"box", {g.box.x1, g.box.y1, g.box.x2, g.box.y2}}, {"score", g.score}, {"anchor", g.anchor}};
  ctx.out << res.dump() << "\n";
  const std::string out = get<std::string>(cfg, "out");
  if (!out.empty() && out != "out") {
    const fs::path dir = prepare_out(cfg);
    write_text(dir / "prediction.json", res.dump(2) + "\n");
    write_overlay(s, g.box, (dir / "prediction.ppm").string());
  }
  return 0;
}

inline int cmd_gradcheck(const json& cfg, Context& ctx) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto results = run_gradcheck_suite(get<std::uint64_t>(cfg, "seed"));
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::size_t failed = 0;
  double worst = 0;
  std::string first_failure;
  for (const auto& r : results) {
    const double e = r.report.max_rel_error();
    worst = std::max(worst, e);
    ctx.out << (r.report.passed ? "PASS " : "FAIL ") << r.name << " max_rel=" << e << "\n";
    if (!r.report.passed) {
      if (!failed) first_failure = r.name;
      ++failed;
      ctx.log << r.report.summary();
    }
  }
  ctx.out << "gradcheck: " << results.size() - failed << "/" << results.size() << " passed, max_rel=" << worst
          << ", " << fixed(secs, 1) << " s\n";
  if (failed) fail(ErrorClass::NumericError, std::to_string(failed) + " gradient checks failed, first: " + first_failure);
  return 0;
}

inline void write_items(const std::vector<SplitItem>& items, const std::string& label, const fs::path& path) {
  write_split_manifest(items, label, path.string());
}

inline int cmd_split(const std::string& which, const json& cfg, Context& ctx) {
  const fs::path out = prepare_out(cfg);
  const json& sc = cfg.at("split");
  const fs::path dump = required_path(sc, "annotations", "--input");
  auto records = read_annotations(dump.string());
  const auto seed = get<std::uint64_t>(cfg, "seed");
  write_snapshot(out, "split " + which, cfg);
  std::string report;
  if (which == "case0" || which == "case1") {
    const SplitResult s = which == "case0"
                              ? case0_split(records, get<std::size_t>(sc, "top_i"), get<double>(sc, "ratio"), seed)
                              : case1_split(records, seed);
    write_items(s.train, "train", out / "train.jsonl");
    write_items(s.val, "val", out / "val.jsonl");
    write_items(s.test, "test", out / "test.jsonl");
    if (which == "case0") {
      json v{{"always_seen", s.always_seen}, {"include", s.include}, {"exclude", s.exclude}};
      write_text(out / "vocabulary.json", v.dump(2) + "\n");
    }
    report = split_report(which, s);
    for (const auto& w : s.warnings) ctx.log << "warning: " << w << "\n";
    write_text(out / "report.txt", report);
    if (!s.certificate.passed) fail(ErrorClass::ContractViolation, which + " certificate failed: " + s.certificate.violations[0]);
    ctx.out << which << ": train " << s.train.size() << ", val " << s.val.size() << ", test " << s.test.size()
            << " (certificate passed)\n";
    return 0;
  }
  require(which == "case23", ErrorClass::ConfigError, "unknown split '" + which + "'");
  const fs::path emb = required_path(sc, "embeddings", "--embeddings");
  const EmbeddingTable table = read_embedding_file(emb.string());
  std::size_t unresolved = 0, collapsed = 0;
  if (get<bool>(sc, "clean")) {
    auto cleaned = clean_annotations(std::move(records));
    unresolved = cleaned.unresolved;
    collapsed = cleaned.collapsed;
    records = std::move(cleaned.records);
  }
  const auto part = seen_unseen_partition(records, table, get<std::size_t>(sc, "top_i"), get<std::size_t>(sc, "k"), seed);
  const auto res = assign_case23(records, part);
  const auto bal = zipf_balance(res.train_candidates, part, seed);
  const auto zc = audit_zipf(bal, part);
  write_items(res.case2, "case2", out / "case2.jsonl");
  write_items(res.case3, "case3", out / "case3.jsonl");
  write_annotations(bal.records, (out / "train.jsonl").string());
  json pj;
  for (std::size_t k = 0; k < part.members.size(); ++k) pj["clusters"].push_back({{"seen", part.seen[k]}, {"unseen", part.unseen[k]}});
  pj["skipped"] = part.skipped;
  pj["zipf"] = {{"threshold", bal.threshold}, {"mean", bal.zipf_mean}};
  for (const auto& [k, n] : bal.before) pj["zipf"]["before"][std::to_string(k)] = n;
  for (const auto& [k, n] : bal.after) pj["zipf"]["after"][std::to_string(k)] = n;
  write_text(out / "partition.json", pj.dump(2) + "\n");
  std::ostringstream rep;
  rep << "case23\n  unresolved phrases: " << unresolved << "\n  collapsed phrase boxes: " << collapsed
      << "\n  case2 items: " << res.case2.size() << "\n  case3 items: " << res.case3.size()
      << "\n  train candidates: " << res.train_candidates.size() << " images, balanced: " << bal.records.size()
      << " images\n  zipf threshold: " << bal.threshold << "\n"
      << certificate_text(res.certificate) << certificate_text(zc);
  write_text(out / "report.txt", rep.str());
  if (!res.certificate.passed)
    fail(ErrorClass::ContractViolation, "case23 certificate failed: " + res.certificate.violations[0]);
  if (!zc.passed) fail(ErrorClass::ContractViolation, "zipf certificate failed");
  ctx.out << "case23: case2 " << res.case2.size() << ", case3 " << res.case3.size() << ", train "
          << bal.records.size() << " images (certificates passed)\n";
  return 0;
}

// ---------------------------------------------------------------- ablation

struct AblationRun {
  std::string variant;
  std::uint64_t seed = 0;
  double val_accuracy = 0, test_accuracy = 0;
  int epochs_run = 0;
};

/// Trains one variant on freshly generated data and scores it on a held-out
/// seen-vocabulary test set. Data depend only on the config seed; the model
/// seed varies per run.
inline AblationRun ablation_run(const json& cfg, const std::string& variant, std::uint64_t model_seed, Context& ctx) {
  const json& a = cfg.at("ablate");
  json run_cfg = cfg;
  std::string loss = variant;
  int stem_extra = 0;
  if (variant == "focal+resize") {
    loss = "focal";
    run_cfg["image_size"] = get<int>(a, "resize_image");
    stem_extra = get<int>(a, "resize_extra_stem");
  } else if (variant == "lb" || variant == "ib" || variant == "full") {
    loss = "focal";
    run_cfg["model"]["blind"] = variant == "full" ? "none" : variant;
  }
  run_cfg["train"]["loss"] = loss;
  run_cfg["train"]["epochs"] = get<int>(a, "epochs");
  ModelConfig mc = model_config_of(run_cfg);
  mc.stem_convs += stem_extra;
  TrainConfig tc = train_config_of(run_cfg);
  tc.seed = model_seed;

  SynthOptions opt = synth_options_of(run_cfg, a);
  const VocabSpec vocab = default_vocab();
  const EmbeddingTable table = synth_embeddings(vocab);
  const auto train_set = generate_split(vocab, table, CaseLabel::Train, get<std::size_t>(a, "train"), opt);
  const auto val_set = generate_split(vocab, table, CaseLabel::Val, get<std::size_t>(a, "val"), opt);
  SynthOptions test_opt = opt;
  test_opt.seed = derive_seed(opt.seed, 0x7E57);
  const auto test_set = generate_split(vocab, table, CaseLabel::Val, get<std::size_t>(a, "test"), test_opt);

  ZsgNet<float> model(mc, model_seed);
  const auto res = train(model, train_set, val_set, table, tc);
  AblationRun r{variant, model_seed, res.best_val_accuracy, 0, static_cast<int>(res.history.size())};
  r.test_accuracy = grounding_accuracy(predict_all(model, test_set, table, tc.threads), test_set);
  ctx.log << "ablate " << variant << " seed " << model_seed << ": val " << fixed(r.val_accuracy, 4) << " test "
          << fixed(r.test_accuracy, 4) << "\n";
  return r;
}

inline int cmd_ablate(const json& cfg, Context& ctx) {
  const fs::path out = prepare_out(cfg);
  const json& a = cfg.at("ablate");
  const std::string mode = get<std::string>(a, "mode");
  require(mode == "loss" || mode == "blind", ErrorClass::ConfigError, "ablate.mode must be loss or blind");
  auto variants = get<std::vector<std::string>>(a, "variants");
  if (mode == "blind" && variants == get<std::vector<std::string>>(default_config().at("ablate"), "variants"))
    variants = {"lb", "ib", "full"};
  for (const auto& v : variants) {
    const bool ok = mode == "loss" ? (v == "softmax" || v == "bce" || v == "focal" || v == "focal+resize")
                                   : (v == "lb" || v == "ib" || v == "full");
    require(ok, ErrorClass::ConfigError, "unknown " + mode + " ablation variant '" + v + "'");
  }
  const auto seeds = get<std::vector<std::uint64_t>>(a, "seeds");
  require(!seeds.empty(), ErrorClass::ConfigError, "ablate.seeds is empty");
  write_snapshot(out, "ablate", cfg);

  std::ostringstream runs, summary;
  runs << "variant,seed,val_accuracy,test_accuracy,epochs_run\n";
  summary << "variant,mean_test_accuracy,min_test_accuracy,max_test_accuracy\n";
  for (const auto& v : variants) {
    std::vector<double> acc;
    for (auto s : seeds) {
      const auto r = ablation_run(cfg, v, s, ctx);
      runs << r.variant << "," << r.seed << "," << fixed(r.val_accuracy) << "," << fixed(r.test_accuracy) << ","
           << r.epochs_run << "\n";
      acc.push_back(r.test_accuracy);
    }
    const double mean = std::accumulate(acc.begin(), acc.end(), 0.0) / static_cast<double>(acc.size());
    summary << v << "," << fixed(mean) << "," << fixed(*std::min_element(acc.begin(), acc.end())) << ","
            << fixed(*std::max_element(acc.begin(), acc.end())) << "\n";
    ctx.out << "ablate " << v << ": mean test accuracy " << fixed(mean, 4) << "\n";
  }
  if (mode == "blind") {
    // random-anchor reference on the same test data
    json base = cfg;
    SynthOptions opt = synth_options_of(base, a);
    opt.seed = derive_seed(opt.seed, 0x7E57);
    const VocabSpec vocab = default_vocab();
    const auto test_set =
        generate_split(vocab, synth_embeddings(vocab), CaseLabel::Val, get<std::size_t>(a, "test"), opt);
    const ZsgNet<float> shape_only(model_config_of(cfg), 0);
    const double rnd = accuracy_at_iou(random_anchor_baseline(test_set, shape_only.anchors(), get<std::uint64_t>(cfg, "seed")),
                                       gts_of(test_set), 0.5);
    summary << "random_anchor," << fixed(rnd) << "," << fixed(rnd) << "," << fixed(rnd) << "\n";
    ctx.out << "ablate random_anchor: " << fixed(rnd, 4) << "\n";
  }
  write_text(out / "ablation_runs.csv", runs.str());
  write_text(out / "ablation_summary.csv", summary.str());
  return 0;
}

// ---------------------------------------------------------------- entry point

inline std::string usage_line() {
  return "usage: zsg {synth-gen|split|train|eval|predict|gradcheck|ablate} [options]; see zsg --help";
}

/// Parses arguments, runs one subcommand, and maps every failure to one
/// line "error: <class>: <message>" with a nonzero status (2 for usage
/// errors, 1 otherwise).
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& log = std::cerr) {
  CLI::App app{"Zero-shot grounding toolkit: synthetic benchmark, splits, training, evaluation"};
  app.set_help_all_flag("--help-all");
  app.require_subcommand(1);

  std::string config_path, out_dir, data_dir, checkpoint, loss, blind, split_which, input, embeddings, image, query;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads, image_size;
  std::optional<double> iou_thresh;

  auto common = [&](CLI::App* sc) {
    sc->add_option("--config", config_path, "JSON config file (flags override it)")->check(CLI::ExistingFile);
    sc->add_option("--seed", seed, "global seed");
    sc->add_option("--out", out_dir, "output directory");
    sc->add_option("--threads", threads, "worker threads")->check(CLI::Range(1, 256));
    sc->add_option("--image-size", image_size, "square image side in pixels");
  };
  auto* synth = app.add_subcommand("synth-gen", "generate the synthetic benchmark");
  common(synth);
  auto* split = app.add_subcommand("split", "build case0|case1|case23 splits from an annotation dump");
  common(split);
  split->add_option("which", split_which, "case0, case1 or case23")->required()->check(CLI::IsMember({"case0", "case1", "case23"}));
  split->add_option("--input", input, "annotation dump (JSON lines)");
  split->add_option("--embeddings", embeddings, "word embedding file (case23)");
  auto* trn = app.add_subcommand("train", "train a model on a benchmark directory");
  common(trn);
  trn->add_option("--data", data_dir, "benchmark directory");
  trn->add_option("--loss", loss, "focal, bce or softmax")->check(CLI::IsMember({"focal", "bce", "softmax"}));
  trn->add_option("--blind", blind, "none, lb or ib")->check(CLI::IsMember({"none", "lb", "ib"}));
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on benchmark splits");
  common(ev);
  ev->add_option("--data", data_dir, "benchmark directory");
  ev->add_option("--model", checkpoint, "checkpoint file");
  ev->add_option("--iou-thresh", iou_thresh, "accuracy IoU threshold")->check(CLI::Range(0.0, 1.0));
  auto* pr = app.add_subcommand("predict", "ground one query in one image");
  common(pr);
  pr->add_option("--model", checkpoint, "checkpoint file");
  pr->add_option("--image", image, "PPM image");
  pr->add_option("--query", query, "query phrase");
  pr->add_option("--embeddings", embeddings, "word embedding file");
  pr->add_option("--data", data_dir, "benchmark directory (for its embeddings)");
  auto* gc = app.add_subcommand("gradcheck", "finite-difference audit of every differentiable operation");
  common(gc);
  auto* ab = app.add_subcommand("ablate", "loss-variant or blind-model sweep on synthetic data");
  common(ab);
  ab->add_option("--loss", loss, "restrict the sweep to one loss variant")->check(CLI::IsMember({"focal", "bce", "softmax"}));
  ab->add_option("--blind", blind, "run the blind sweep (any value other than none)")->check(CLI::IsMember({"none", "lb", "ib"}));

  std::vector<std::string> argv_store{"zsg"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& s : argv_store) argv.push_back(s.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    log << "error: usage_error: " << e.what() << "\n" << usage_line() << "\n";
    return 2;
  }

  try {
    json over = json::object();
    if (seed) over["seed"] = *seed;
    if (threads) over["threads"] = *threads;
    if (image_size) over["image_size"] = *image_size;
    if (!out_dir.empty()) over["out"] = out_dir;
    if (!data_dir.empty()) over["data"] = data_dir;
    if (!checkpoint.empty()) over["checkpoint"] = checkpoint;
    if (iou_thresh) over["eval"]["iou_thresh"] = *iou_thresh;
    if (!input.empty()) over["split"]["annotations"] = input;
    if (!embeddings.empty()) {
      over["split"]["embeddings"] = embeddings;
      over["predict"]["embeddings"] = embeddings;
    }
    if (!image.empty()) over["predict"]["image"] = image;
    if (!query.empty()) over["predict"]["query"] = query;
    if (*ab) {
      if (!loss.empty()) over["ablate"]["variants"] = {loss};
      if (!blind.empty() && blind != "none") over["ablate"]["mode"] = "blind";
    } else {
      if (!loss.empty()) over["train"]["loss"] = loss;
      if (!blind.empty()) over["model"]["blind"] = blind;
    }
    const json cfg = resolve_config(config_path, over);
    Context ctx{out, log};
    if (*synth) return cmd_synth_gen(cfg, ctx);
    if (*split) return cmd_split(split_which, cfg, ctx);
    if (*trn) return cmd_train(cfg, ctx);
    if (*ev) return cmd_eval(cfg, ctx);
    if (*pr) return cmd_predict(cfg, ctx);
    if (*gc) return cmd_gradcheck(cfg, ctx);
    if (*ab) return cmd_ablate(cfg, ctx);
    fail(ErrorClass::ConfigError, "no subcommand");
  } catch (const Error& e) {
    log << "error: " << error_class_name(e.error_class()) << ": " << e.what() << "\n";
  } catch (const json::exception& e) {
    log << "error: " << error_class_name(ErrorClass::ConfigError) << ": " << e.what() << "\n";
  } catch (const std::filesystem::filesystem_error& e) {
    log << "error: " << error_class_name(ErrorClass::IoError) << ": " << e.what() << "\n";
  } catch (const std::exception& e) {
    log << "error: internal_error: " << e.what() << "\n";
  }
  return 1;
}

}  // namespace zsg::cli
