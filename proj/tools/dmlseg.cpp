// Command-line driver: data generation, training, evaluation, prediction,
// gradient checking and the baseline-vs-multi-label experiment.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "dml/checkpoint.hpp"
#include "dml/synth.hpp"
#include "dml/trainer.hpp"

namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool serial = false;
  std::vector<std::string> set;  // extra key=value overrides
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "key = value configuration file");
  cmd->add_option("--seed", c.seed, "random seed");
  cmd->add_option("--out", c.out, "output path");
  cmd->add_flag("--serial", c.serial, "force fully serial execution");
  cmd->add_option("--set", c.set, "override a configuration key (key=value)");
}

dml::KeyValues load_settings(const Common& c) {
  dml::KeyValues kv;
  if (!c.config_path.empty()) kv = dml::KeyValues::load(c.config_path);
  for (const auto& item : c.set) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw dml::UsageError("--set expects key=value, got '" + item + "'");
    kv.set(std::string(dml::detail::trim(item.substr(0, eq))), std::string(dml::detail::trim(item.substr(eq + 1))));
  }
  if (c.seed) kv.set("seed", std::to_string(*c.seed));
  return kv;
}

// Model settings default to the corpus geometry when the file does not pin them.
dml::ModelConfig model_config(const dml::KeyValues& kv, const dml::Corpus* corpus) {
  dml::ModelConfig mc;
  if (corpus) {
    mc.num_classes = corpus->spec.num_classes;
    mc.input_h = corpus->spec.h;
    mc.input_w = corpus->spec.w;
  }
  mc.apply(kv);
  mc.validate();
  return mc;
}

dml::TrainConfig train_config(const dml::KeyValues& kv, bool serial) {
  dml::TrainConfig tc;
  tc.apply(kv);
  tc.serial = serial || tc.serial;
  tc.validate();
  return tc;
}

std::array<std::uint8_t, 3> palette(std::size_t k) {
  static constexpr std::array<std::array<std::uint8_t, 3>, 12> colors{{{0, 0, 0},
                                                                       {230, 25, 75},
                                                                       {60, 180, 75},
                                                                       {0, 130, 200},
                                                                       {255, 225, 25},
                                                                       {145, 30, 180},
                                                                       {70, 240, 240},
                                                                       {245, 130, 48},
                                                                       {240, 50, 230},
                                                                       {210, 245, 60},
                                                                       {250, 190, 212},
                                                                       {0, 128, 128}}};
  return colors[k % colors.size()];
}

int run(int argc, char** argv) {
  CLI::App app{"Dense multi-label semantic segmentation toolkit"};
  app.require_subcommand(1);

  Common gen_c;
  std::size_t n_train = 500, n_val = 100;
  auto* gen = app.add_subcommand("gen-data", "write a synthetic corpus");
  add_common(gen, gen_c);
  gen->add_option("--train", n_train, "number of training scenes");
  gen->add_option("--val", n_val, "number of validation scenes");

  Common gt_c;
  std::string gt_corpus;
  auto* gengt = app.add_subcommand("gen-gt", "cache multi-label targets for a corpus");
  add_common(gengt, gt_c);
  gengt->add_option("--corpus", gt_corpus, "corpus directory")->required();

  Common tr_c;
  std::string tr_corpus, tr_gt_cache;
  auto* trn = app.add_subcommand("train", "train a model");
  add_common(trn, tr_c);
  trn->add_option("--corpus", tr_corpus, "corpus directory")->required();
  trn->add_option("--gt-cache", tr_gt_cache, "target cache written by gen-gt");
  std::optional<double> lr_poly;
  trn->add_option("--lr-poly", lr_poly, "polynomial learning-rate decay power");

  Common ev_c;
  std::string ev_ckpt, ev_corpus, ev_split = "val";
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(ev, ev_c);
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint file")->required();
  ev->add_option("--corpus", ev_corpus, "corpus directory")->required();
  ev->add_option("--split", ev_split, "train or val");

  Common pr_c;
  std::string pr_ckpt, pr_image;
  auto* pr = app.add_subcommand("predict", "label one PPM image");
  add_common(pr, pr_c);
  pr->add_option("--checkpoint", pr_ckpt, "checkpoint file")->required();
  pr->add_option("--image", pr_image, "input PPM")->required();

  Common gc_c;
  double gc_tol = 1e-4;
  std::size_t gc_levels = 3, gc_max = 0;
  auto* gc = app.add_subcommand("grad-check", "finite-difference check of every parameter gradient");
  add_common(gc, gc_c);
  gc->add_option("--tolerance", gc_tol, "maximum relative error");
  gc->add_option("--levels", gc_levels, "multi-label levels (0-3)");
  gc->add_option("--max-entries", gc_max, "entries checked per parameter (0 = all)");

  Common ex_c;
  std::string ex_corpus;
  std::vector<std::size_t> ex_levels{0, 1, 2, 3};
  auto* ex = app.add_subcommand("experiment", "train and compare 0-3 level variants");
  add_common(ex, ex_c);
  ex->add_option("--corpus", ex_corpus, "corpus directory")->required();
  ex->add_option("--levels", ex_levels, "level variants to run");

  Common ds_c;
  auto* ds = app.add_subcommand("describe", "print the model architecture");
  add_common(ds, ds_c);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_exit_code() == 0 ? 0 : 1;
  }

  if (gen->parsed()) {
    const auto kv = load_settings(gen_c);
    dml::SceneSpec spec;
    if (kv.has("num_classes") && !kv.has("pools"))
      spec = dml::SceneSpec::with_classes(dml::parse_number<std::size_t>(kv.get("num_classes"), "num_classes"), 1);
    spec.apply(kv);
    spec.validate();
    if (n_train + n_val >= 500) dml::check_class_balance(spec, n_train + n_val);
    const fs::path dir = gen_c.out.empty() ? fs::path("corpus") : fs::path(gen_c.out);
    dml::write_corpus(spec, n_train, n_val, dir);
    std::cout << "wrote " << n_train << " train + " << n_val << " val scenes to " << dir << "\n";
    return 0;
  }

  if (gengt->parsed()) {
    const auto kv = load_settings(gt_c);
    const auto corpus = dml::read_corpus(gt_corpus);
    const auto mc = model_config(kv, &corpus);
    const std::string out = gt_c.out.empty() ? (fs::path(gt_corpus) / "gt_cache.dmls").string() : gt_c.out;
    dml::make_gt_cache(corpus, mc).save(out);
    std::cout << "wrote targets for " << corpus.entries.size() << " scenes to " << out << "\n";
    return 0;
  }

  if (trn->parsed()) {
    auto kv = load_settings(tr_c);
    if (lr_poly) kv.set("lr_poly", dml::format_real(*lr_poly));
    const auto corpus = dml::read_corpus(tr_corpus);
    const auto mc = model_config(kv, &corpus);
    const auto tc = train_config(kv, tr_c.serial);
    if (tc.precision != dml::Precision::train32) throw dml::ConfigError("training runs in train32 precision");
    auto samples = dml::prepare_samples(corpus.split("train"), mc);
    if (!tr_gt_cache.empty()) {
      // Cached targets replace the freshly generated ones; the key check
      // guards against stale caches.
      const auto cached = dml::read_gt_cache(dml::Container::load(tr_gt_cache), corpus, mc);
      std::size_t s = 0;
      for (std::size_t i = 0; i < corpus.entries.size(); ++i)
        if (corpus.entries[i].split == "train") samples[s++].targets = cached[i];
    }
    dml::TrainOptions opts;
    opts.out_dir = tr_c.out.empty() ? fs::path("run") : fs::path(tr_c.out);
    opts.log = &std::cerr;
    dml::train<float>(samples, mc, tc, opts);
    std::cout << "checkpoint " << (opts.out_dir / "checkpoint.dmls").string() << "\n";
    return 0;
  }

  if (ev->parsed()) {
    const auto container = dml::Container::load(ev_ckpt);
    auto model = dml::load_model<float>(container);
    const auto corpus = dml::read_corpus(ev_corpus);
    if (corpus.spec.num_classes != model.config().num_classes)
      throw dml::ConfigError("checkpoint and corpus disagree on the class count");
    const auto samples = dml::prepare_samples(corpus.split(ev_split), model.config());
    if (samples.empty()) throw dml::DataError("split '" + ev_split + "' is empty");
    const auto report = dml::evaluate(model, samples);
    std::cout << report.to_table("levels " + std::to_string(model.config().levels));
    if (!ev_c.out.empty()) std::ofstream(ev_c.out) << report.to_csv();
    return 0;
  }

  if (pr->parsed()) {
    auto model = dml::load_model<float>(dml::Container::load(pr_ckpt));
    const auto& mc = model.config();
    const auto img = dml::read_ppm(pr_image);
    dml::Tensor<float> x(dml::Shape{1, mc.input_channels, mc.input_h, mc.input_w});
    dml::raster_to_tensor(img, x, 0);
    dml::Graph<float> graph;
    graph.set_recording(false);
    const auto labels = dml::predict_labels(model.forward(graph, x).p, mc.input_h, mc.input_w).front();
    dml::Raster color{labels.w, labels.h, 3, std::vector<std::uint8_t>(labels.size() * 3)};
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const auto c = palette(labels.values[i]);
      for (std::size_t ch = 0; ch < 3; ++ch) color.pixels[i * 3 + ch] = c[ch];
    }
    const std::string prefix = pr_c.out.empty() ? "prediction" : pr_c.out;
    dml::write_ppm(prefix + ".ppm", color);
    dml::write_pgm(prefix + ".pgm", dml::Raster{labels.w, labels.h, 1, labels.values});
    std::cout << "wrote " << prefix << ".ppm and " << prefix << ".pgm\n";
    return 0;
  }

  if (gc->parsed()) {
    const auto kv = load_settings(gc_c);
    dml::ModelConfig mc = dml::grad_check_config(3);
    mc.apply(kv);
    if (!kv.has("levels") && !kv.has("window_sizes")) mc = mc.with_levels(gc_levels);
    mc.validate();
    const std::uint64_t seed = gc_c.seed.value_or(7);
    const auto report = dml::grad_check(mc, gc_tol, seed, 1e-5, gc_max);
    std::cout << report.to_text();
    if (!gc_c.out.empty()) std::ofstream(gc_c.out) << report.to_text();
    return report.passed ? 0 : 3;
  }

  if (ds->parsed()) {
    const auto text = dml::Model<float>(model_config(load_settings(ds_c), nullptr), 0).describe();
    std::cout << text;
    if (!ds_c.out.empty()) std::ofstream(ds_c.out) << text;
    return 0;
  }

  if (ex->parsed()) {
    const auto kv = load_settings(ex_c);
    const auto corpus = dml::read_corpus(ex_corpus);
    dml::ModelConfig mc = model_config(kv, &corpus);
    const auto tc = train_config(kv, ex_c.serial);
    const fs::path out = ex_c.out.empty() ? fs::path("experiment") : fs::path(ex_c.out);
    const auto rows = dml::run_experiment(corpus, mc, tc, out, ex_levels, &std::cerr);
    std::cout << dml::experiment_csv(rows);
    return 0;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const dml::Error& e) {
    std::cerr << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
