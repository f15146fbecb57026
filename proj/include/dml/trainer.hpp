#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "dml/checkpoint.hpp"
#include "dml/gt_gen.hpp"
#include "dml/hash.hpp"
#include "dml/losses.hpp"
#include "dml/metrics.hpp"
#include "dml/model.hpp"
#include "dml/synth.hpp"

namespace dml {

enum class Precision { train32, check64 };

struct TrainConfig {
  std::size_t batch_size = 8;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  double lr = 0.01;
  double lr_poly = 0.0;  // 0 keeps the rate constant
  std::size_t iterations = 1000;
  std::uint64_t seed = 1;
  std::size_t eval_every = 0;  // 0: checkpoint only at the end
  Precision precision = Precision::train32;
  bool serial = true;

  void validate() const {
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(lr >= 0.0)) throw ConfigError("lr must be non-negative");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
    if (!(lr_poly >= 0.0)) throw ConfigError("lr_poly must be non-negative");
  }

  KeyValues to_kv() const {
    KeyValues kv;
    kv.set("batch_size", std::to_string(batch_size));
    kv.set("momentum", format_real(momentum));
    kv.set("weight_decay", format_real(weight_decay));
    kv.set("lr", format_real(lr));
    kv.set("lr_poly", format_real(lr_poly));
    kv.set("iterations", std::to_string(iterations));
    kv.set("seed", std::to_string(seed));
    kv.set("eval_every", std::to_string(eval_every));
    kv.set("precision", precision == Precision::train32 ? "train32" : "check64");
    return kv;
  }

  void apply(const KeyValues& kv) {
    if (kv.has("batch_size")) batch_size = parse_number<std::size_t>(kv.get("batch_size"), "batch_size");
    if (kv.has("momentum")) momentum = parse_real(kv.get("momentum"), "momentum");
    if (kv.has("weight_decay")) weight_decay = parse_real(kv.get("weight_decay"), "weight_decay");
    if (kv.has("lr")) lr = parse_real(kv.get("lr"), "lr");
    if (kv.has("lr_poly")) lr_poly = parse_real(kv.get("lr_poly"), "lr_poly");
    if (kv.has("iterations")) iterations = parse_number<std::size_t>(kv.get("iterations"), "iterations");
    if (kv.has("seed")) seed = parse_number<std::uint64_t>(kv.get("seed"), "seed");
    if (kv.has("eval_every")) eval_every = parse_number<std::size_t>(kv.get("eval_every"), "eval_every");
    if (kv.has("precision")) {
      const auto& p = kv.get("precision");
      if (p == "train32") precision = Precision::train32;
      else if (p == "check64") precision = Precision::check64;
      else throw ConfigError("precision must be train32 or check64, got '" + p + "'");
    }
  }
};

/// One training/evaluation example with everything derived from its mask.
struct Sample {
  const Raster* image = nullptr;
  const LabelMask* full_mask = nullptr;
  LabelMask seg_mask;  // majority-downsampled to the segmentation grid
  std::vector<MultiLabelTarget> targets;
};

inline std::uint64_t mask_hash(const LabelMask& m) {
  Fnv1a h;
  h.update_value(static_cast<std::uint64_t>(m.h));
  h.update_value(static_cast<std::uint64_t>(m.w));
  h.update_bytes(m.values.data(), m.values.size());
  return h.value();
}

inline std::uint64_t gt_config_hash(const GtSpec& spec) {
  Fnv1a h;
  h.update_value(static_cast<std::uint64_t>(spec.num_classes));
  h.update_value(static_cast<std::uint64_t>(spec.mask_stride));
  h.update_value(static_cast<std::uint64_t>(spec.dml_stride));
  for (auto w : spec.windows) h.update_value(static_cast<std::uint64_t>(w));
  return h.value();
}

inline std::vector<Sample> prepare_samples(const std::vector<const CorpusEntry*>& entries, const ModelConfig& config) {
  std::vector<Sample> out;
  out.reserve(entries.size());
  const GtSpec spec = config.gt_spec();
  for (const auto* e : entries) {
    if (e->mask.h != config.input_h || e->mask.w != config.input_w)
      throw ConfigError(detail::concat("corpus scene ", e->mask.h, "x", e->mask.w, " does not match model input ",
                                       config.input_h, "x", config.input_w));
    Sample s;
    s.image = &e->image;
    s.full_mask = &e->mask;
    s.seg_mask = downsample_majority(e->mask, config.low_stride(), config.num_classes);
    s.targets = gen_multilabel_gt(e->mask, spec);
    out.push_back(std::move(s));
  }
  return out;
}

inline std::uint64_t gt_cache_key(const Corpus& corpus, const ModelConfig& config) {
  Fnv1a key;
  for (const auto& e : corpus.entries) key.update_value(mask_hash(e.mask));
  key.update_value(gt_config_hash(config.gt_spec()));
  return key.value();
}

/// Multi-label targets for a whole corpus in the container format, keyed by
/// every mask and the target geometry.
inline Container make_gt_cache(const Corpus& corpus, const ModelConfig& config) {
  const GtSpec spec = config.gt_spec();
  Container c;
  c.meta.set("kind", "gt-cache");
  c.meta.set("cache_key", hex64(gt_cache_key(corpus, config)));
  c.meta.set("entries", std::to_string(corpus.entries.size()));
  c.meta.set("levels", std::to_string(spec.windows.size()));
  for (std::size_t i = 0; i < corpus.entries.size(); ++i) {
    const auto targets = gen_multilabel_gt(corpus.entries[i].mask, spec);
    for (const auto& t : targets)
      c.add<std::uint8_t>(detail::concat("gt/", i, "/", t.level), Shape{1, t.k, t.h, t.w}, t.bits.data());
  }
  return c;
}

inline std::vector<std::vector<MultiLabelTarget>> read_gt_cache(const Container& c, const Corpus& corpus,
                                                                const ModelConfig& config) {
  if (c.meta.get_or("cache_key", "") != hex64(gt_cache_key(corpus, config)))
    throw DataError("gt cache key does not match corpus and configuration");
  std::vector<std::vector<MultiLabelTarget>> out(corpus.entries.size());
  for (std::size_t i = 0; i < corpus.entries.size(); ++i)
    for (std::size_t j = 0; j < config.levels; ++j) {
      const auto& e = c.get(detail::concat("gt/", i, "/", j + 1));
      MultiLabelTarget t;
      t.k = e.shape.c;
      t.h = e.shape.h;
      t.w = e.shape.w;
      t.bits = e.values<std::uint8_t>();
      t.level = j + 1;
      t.stride = config.dml_extra_stride;
      t.window = mask_grid_window(config.window_sizes[j], config.dml_extra_stride);
      out[i].push_back(std::move(t));
    }
  return out;
}

template <typename T>
Tensor<T> image_batch(const std::vector<const Sample*>& batch, const ModelConfig& config) {
  Tensor<T> x(Shape{batch.size(), config.input_channels, config.input_h, config.input_w});
  for (std::size_t n = 0; n < batch.size(); ++n) raster_to_tensor(*batch[n]->image, x, n);
  return x;
}

template <typename T>
struct StepResult {
  NetworkOutput<T> output;
  Tensor<T> total;
  LossReport report;
};

/// Forward pass plus the joint objective: softmax loss on the fused scores
/// and one logistic loss per multi-label level.
template <typename T>
StepResult<T> compute_objective(Graph<T>& graph, Model<T>& model, const std::vector<const Sample*>& batch) {
  const ModelConfig& cfg = model.config();
  StepResult<T> r;
  r.output = model.forward(graph, image_batch<T>(batch, cfg));
  std::vector<LabelMask> masks;
  for (const auto* s : batch) masks.push_back(s->seg_mask);
  SegLoss<T> seg = softmax_nll(graph, r.output.p, masks);
  std::vector<Tensor<T>> mul;
  std::vector<double> mul_values;
  for (std::size_t j = 0; j < cfg.levels; ++j) {
    std::vector<const MultiLabelTarget*> targets;
    for (const auto* s : batch) targets.push_back(&s->targets[j]);
    mul.push_back(multilabel_nll(graph, r.output.m[j], targets));
    mul_values.push_back(static_cast<double>(mul.back().item()));
  }
  r.total = objective(graph, seg.value, mul, cfg.lambda);
  r.report = total_objective(static_cast<double>(seg.value.item()), mul_values, cfg.lambda);
  r.report.valid_pixel_count = seg.valid_pixels;
  return r;
}

/// Seeded without-replacement sampling; a fresh permutation every epoch.
class BatchSampler {
 public:
  BatchSampler(std::size_t count, std::size_t batch_size, std::uint64_t seed)
      : order_(count), batch_(batch_size), rng_(seed ^ 0x9e3779b97f4a7c15ULL) {
    if (batch_size > count)
      throw ConfigError(detail::concat("batch_size ", batch_size, " exceeds corpus size ", count));
    reshuffle();
  }

  std::vector<std::size_t> next() {
    std::vector<std::size_t> out;
    while (out.size() < batch_) {
      if (pos_ == order_.size()) reshuffle();
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    // Fisher-Yates with an explicit draw so the order is library independent.
    for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng_() % i]);
    pos_ = 0;
  }

  std::vector<std::size_t> order_;
  std::size_t batch_;
  std::size_t pos_ = 0;
  std::mt19937_64 rng_;
};

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: no files written
  std::ostream* log = nullptr;
  std::size_t log_every = 50;
};

template <typename T>
struct TrainResult {
  Model<T> model;
  std::vector<LossReport> losses;
};

template <typename T>
TrainResult<T> train(const std::vector<Sample>& samples, const ModelConfig& model_config, const TrainConfig& cfg,
                     const TrainOptions& opts = {}) {
  cfg.validate();
  if (samples.empty()) throw DataError("training split is empty");
  TrainResult<T> result{Model<T>(model_config, cfg.seed), {}};
  Model<T>& model = result.model;
  BatchSampler sampler(samples.size(), cfg.batch_size, cfg.seed);

  std::ofstream csv;
  if (!opts.out_dir.empty()) {
    std::filesystem::create_directories(opts.out_dir);
    csv.open(opts.out_dir / "loss.csv");
    if (!csv) throw DataError("cannot write loss.csv in '" + opts.out_dir.string() + "'");
    csv << LossReport::csv_header(model_config.levels) << '\n';
  }
  auto checkpoint = [&](std::size_t iter) {
    if (opts.out_dir.empty()) return;
    KeyValues extra = cfg.to_kv();
    extra.set("iteration", std::to_string(iter));
    save_checkpoint((opts.out_dir / "checkpoint.dmls").string(), model, extra);
  };

  const auto start = std::chrono::steady_clock::now();
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    std::vector<const Sample*> batch;
    for (std::size_t idx : sampler.next()) batch.push_back(&samples[idx]);
    Graph<T> graph;
    StepResult<T> step;
    try {
      step = compute_objective(graph, model, batch);
      if (!std::isfinite(step.report.total)) throw NumericError("objective is not finite");
      backward(step.total, graph);
    } catch (const NumericError& e) {
      throw NumericError(detail::concat("training diverged at iteration ", it, " (", e.what(),
                                        "); last checkpoint left in place"));
    }
    SgdOptions sgd{cfg.lr, cfg.momentum, cfg.weight_decay};
    if (cfg.lr_poly > 0.0)
      sgd.lr = cfg.lr * std::pow(1.0 - static_cast<double>(it) / static_cast<double>(cfg.iterations), cfg.lr_poly);
    sgd_step(model.params(), sgd);
    result.losses.push_back(step.report);
    if (csv.is_open()) csv << step.report.csv_row(it) << '\n';
    if (opts.log && (it % opts.log_every == 0 || it + 1 == cfg.iterations)) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      *opts.log << "iter " << it << " total " << step.report.total << " l_seg " << step.report.l_seg << " ("
                << secs << " s)\n";
    }
    if (cfg.eval_every > 0 && (it + 1) % cfg.eval_every == 0) checkpoint(it + 1);
  }
  checkpoint(cfg.iterations);
  return result;
}

/// Runs predict_labels over the samples and accumulates metrics at full mask
/// resolution. Parameters are read only.
template <typename T>
EvalReport evaluate(Model<T>& model, const std::vector<Sample>& samples, std::size_t batch_size = 8) {
  const ModelConfig& cfg = model.config();
  EvalReport report(cfg.num_classes);
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    std::vector<const Sample*> batch;
    for (std::size_t i = start; i < std::min(samples.size(), start + batch_size); ++i) batch.push_back(&samples[i]);
    Graph<T> graph;
    graph.set_recording(false);
    const auto out = model.forward(graph, image_batch<T>(batch, cfg));
    const auto preds = predict_labels(out.p, cfg.input_h, cfg.input_w);
    for (std::size_t n = 0; n < batch.size(); ++n) accumulate(preds[n], *batch[n]->full_mask, report);
  }
  return finalize(report);
}

struct GradCheckLayer {
  std::string name;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // perturbation crossed a relu/max-pool branch
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckLayer> layers;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;

  std::string to_text() const {
    std::ostringstream os;
    os << "parameter,checked,skipped,max_rel_error,max_abs_error\n";
    os.precision(6);
    for (const auto& l : layers)
      os << l.name << ',' << l.checked << ',' << l.skipped << ',' << std::scientific << l.max_rel_error << ','
         << l.max_abs_error << std::defaultfloat << '\n';
    os << "max_rel_error " << std::scientific << max_rel_error << " tolerance " << tolerance << std::defaultfloat
       << (passed ? " PASS" : " FAIL") << '\n';
    return os.str();
  }
};

/// A small configuration suited to exhaustive finite-difference checks.
inline ModelConfig grad_check_config(std::size_t levels = 3) {
  ModelConfig c;
  c.num_classes = 4;
  c.input_h = 32;
  c.input_w = 32;
  c.low_level = {{4, 2}, {6, 1}};
  c.seg_channels = {6, 6};
  c.seg_dilations = {1, 2};
  c.dml_channels = 6;
  c.dml_extra_stride = 2;
  c.window_sizes = {7, 5, 3};
  c.levels = 3;
  return c.with_levels(levels);
}

/// Compares autodiff gradients of the joint objective against central
/// differences in 64-bit arithmetic on a seeded random 2-image batch.
/// Entries with |analytic| + |numeric| < abs_floor are compared absolutely.
inline GradCheckReport grad_check(const ModelConfig& config, double tolerance, std::uint64_t seed = 7,
                                  double step = 1e-5, std::size_t max_entries_per_param = 0,
                                  double abs_floor = 1e-8) {
  Model<double> model(config, seed);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  // Biases start at zero; randomize them so every branch of the graph is exercised.
  for (auto& p : model.params().all())
    if (p.name.ends_with(".bias"))
      for (auto& v : p.tensor.data()) v = 0.1 * (unit(rng) - 0.5);

  std::vector<Raster> images(2);
  std::vector<LabelMask> masks(2);
  for (std::size_t n = 0; n < 2; ++n) {
    images[n] = Raster{config.input_w, config.input_h, config.input_channels,
                       std::vector<std::uint8_t>(config.input_w * config.input_h * config.input_channels)};
    for (auto& px : images[n].pixels) px = static_cast<std::uint8_t>(unit(rng) * 255.0);
    masks[n] = LabelMask(config.input_h, config.input_w);
    // Blocky labels with a few ignore pixels.
    for (std::size_t y = 0; y < config.input_h; ++y)
      for (std::size_t x = 0; x < config.input_w; ++x) masks[n].at(y, x) = static_cast<std::uint8_t>((y / 8 + x / 8 + n) % config.num_classes);
    for (int i = 0; i < 20; ++i)
      masks[n].at(static_cast<std::size_t>(unit(rng) * config.input_h), static_cast<std::size_t>(unit(rng) * config.input_w)) =
          kIgnoreLabel;
  }
  std::vector<Sample> samples(2);
  for (std::size_t n = 0; n < 2; ++n) {
    samples[n].image = &images[n];
    samples[n].full_mask = &masks[n];
    samples[n].seg_mask = downsample_majority(masks[n], config.low_stride(), config.num_classes);
    samples[n].targets = gen_multilabel_gt(masks[n], config.gt_spec());
  }
  const std::vector<const Sample*> batch{&samples[0], &samples[1]};

  model.params().zero_grad();
  Graph<double> graph;
  const auto base = compute_objective(graph, model, batch);
  backward(base.total, graph);

  auto evaluate_at = [&](std::uint64_t& branch) {
    Graph<double> g;
    g.set_recording(false);
    g.track_branches(true);
    const double v = compute_objective(g, model, batch).total.item();
    branch = g.branch_hash();
    return v;
  };
  std::uint64_t base_branch = 0;
  evaluate_at(base_branch);

  GradCheckReport report;
  report.tolerance = tolerance;
  std::mt19937_64 pick(seed + 1);
  for (auto& p : model.params().all()) {
    GradCheckLayer layer{p.name};
    auto theta = p.tensor.data();
    const auto grad = p.tensor.grad();
    std::vector<std::size_t> indices(theta.size());
    std::iota(indices.begin(), indices.end(), std::size_t{0});
    if (max_entries_per_param > 0 && indices.size() > max_entries_per_param) {
      for (std::size_t i = 0; i < max_entries_per_param; ++i)
        std::swap(indices[i], indices[i + pick() % (indices.size() - i)]);
      indices.resize(max_entries_per_param);
    }
    for (std::size_t i : indices) {
      const double orig = theta[i];
      std::uint64_t up_branch = 0, down_branch = 0;
      theta[i] = orig + step;
      const double up = evaluate_at(up_branch);
      theta[i] = orig - step;
      const double down = evaluate_at(down_branch);
      theta[i] = orig;
      if (up_branch != base_branch || down_branch != base_branch) {
        ++layer.skipped;
        continue;
      }
      const double numeric = (up - down) / (2.0 * step);
      const double analytic = grad[i];
      const double abs_err = std::abs(analytic - numeric);
      const double mag = std::abs(analytic) + std::abs(numeric);
      double rel = 0.0;
      if (mag < abs_floor) rel = abs_err <= abs_floor ? 0.0 : abs_err / abs_floor;
      else rel = abs_err / std::max(std::abs(analytic), std::abs(numeric));
      layer.max_rel_error = std::max(layer.max_rel_error, rel);
      layer.max_abs_error = std::max(layer.max_abs_error, abs_err);
      ++layer.checked;
    }
    report.max_rel_error = std::max(report.max_rel_error, layer.max_rel_error);
    report.layers.push_back(layer);
  }
  bool all_checked = true;
  for (const auto& l : report.layers) all_checked = all_checked && l.checked > 0;
  report.passed = all_checked && report.max_rel_error <= tolerance && tolerance > 0.0;
  return report;
}

struct ExperimentRow {
  std::size_t levels = 0;
  std::uint64_t seed = 0;
  EvalReport report;
};

inline std::string experiment_csv(const std::vector<ExperimentRow>& rows) {
  std::ostringstream os;
  os.precision(9);
  os << "levels,mean_iou,mean_wrong_class,mean_wrong_label\n";
  for (const auto& r : rows)
    os << r.levels << ',' << r.report.mean_iou << ',' << r.report.mean_wrong_class << ',' << r.report.mean_wrong_label
       << '\n';
  return os.str();
}

/// Trains the J = 0..3 variants with the same seed, corpus and schedule and
/// evaluates each on the val split.
inline std::vector<ExperimentRow> run_experiment(const Corpus& corpus, const ModelConfig& base, const TrainConfig& cfg,
                                                 const std::filesystem::path& out_dir,
                                                 const std::vector<std::size_t>& level_set = {0, 1, 2, 3},
                                                 std::ostream* log = nullptr) {
  const auto train_entries = corpus.split("train");
  const auto val_entries = corpus.split("val");
  if (val_entries.empty()) throw DataError("corpus has no val split");
  std::vector<ExperimentRow> rows;
  for (std::size_t j : level_set) {
    const ModelConfig mc = base.with_levels(j);
    const auto train_samples = prepare_samples(train_entries, mc);
    const auto val_samples = prepare_samples(val_entries, mc);
    TrainOptions opts;
    if (!out_dir.empty()) opts.out_dir = out_dir / ("levels" + std::to_string(j));
    opts.log = log;
    if (log) *log << "== levels " << j << " ==\n";
    auto result = train<float>(train_samples, mc, cfg, opts);
    ExperimentRow row{j, cfg.seed, evaluate(result.model, val_samples)};
    if (log) *log << row.report.to_table("levels " + std::to_string(j));
    rows.push_back(std::move(row));
  }
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ofstream(out_dir / "experiment.csv") << experiment_csv(rows);
    KeyValues manifest = base.to_kv();
    manifest.merge(cfg.to_kv());
    manifest.set("corpus", corpus.dir.string());
    manifest.set("train_scenes", std::to_string(train_entries.size()));
    manifest.set("val_scenes", std::to_string(val_entries.size()));
    std::ofstream(out_dir / "experiment_manifest.txt") << manifest.to_text();
  }
  return rows;
}

}  // namespace dml
