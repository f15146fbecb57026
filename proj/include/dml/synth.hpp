#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dml/hash.hpp"
#include "dml/keyvalue.hpp"
#include "dml/labels.hpp"
#include "dml/netpbm.hpp"
#include "dml/tensor.hpp"

namespace dml {

/// Scene generator parameters. Class 0 is background; the foreground classes
/// are partitioned into pools and every scene draws from exactly one pool.
/// The i-th class of each pool shares a base hue with the i-th class of the
/// other pools, offset in brightness by `pool_offset` and blurred by
/// per-instance jitter, so a single shape is ambiguous and the scene as a
/// whole is not.
struct SceneSpec {
  std::uint64_t seed = 1;
  std::size_t h = 96;
  std::size_t w = 96;
  std::size_t num_classes = 8;
  std::vector<std::vector<std::size_t>> pools{{1, 2, 3}, {4, 5, 6, 7}};
  std::size_t min_shapes = 3;
  std::size_t max_shapes = 6;
  std::size_t min_extent = 14;
  std::size_t max_extent = 36;
  double pool_offset = 0.08;
  double color_jitter = 0.10;
  double noise = 0.06;

  void validate() const {
    if (num_classes < 2 || num_classes >= kIgnoreLabel) throw ConfigError("scene needs 2..254 classes");
    if (h == 0 || w == 0) throw ConfigError("scene size must be positive");
    if (pools.empty()) throw ConfigError("scene needs at least one pool");
    std::vector<int> seen(num_classes, 0);
    for (const auto& pool : pools) {
      if (pool.empty()) throw ConfigError("scene pools must be non-empty");
      for (std::size_t k : pool) {
        if (k == 0 || k >= num_classes) throw ConfigError(detail::concat("pool class ", k, " outside 1..K-1"));
        if (seen[k]++) throw ConfigError(detail::concat("class ", k, " appears in more than one pool"));
      }
    }
    for (std::size_t k = 1; k < num_classes; ++k)
      if (!seen[k]) throw ConfigError(detail::concat("class ", k, " belongs to no pool"));
    if (min_shapes > max_shapes || min_extent == 0 || min_extent > max_extent)
      throw ConfigError("scene shape ranges are inverted");
  }

  KeyValues to_kv() const {
    KeyValues kv;
    kv.set("seed", std::to_string(seed));
    kv.set("size", detail::concat(h, "x", w));
    kv.set("num_classes", std::to_string(num_classes));
    std::vector<std::string> ps;
    for (const auto& p : pools) ps.push_back(join(p, " "));
    kv.set("pools", join(ps, ";"));
    kv.set("shapes", detail::concat(min_shapes, "-", max_shapes));
    kv.set("extent", detail::concat(min_extent, "-", max_extent));
    kv.set("pool_offset", format_real(pool_offset));
    kv.set("color_jitter", format_real(color_jitter));
    kv.set("noise", format_real(noise));
    return kv;
  }

  void apply(const KeyValues& kv) {
    auto range = [&](const std::string& key, std::size_t& lo, std::size_t& hi) {
      if (!kv.has(key)) return;
      const auto parts = detail::split(kv.get(key), '-');
      if (parts.size() != 2) throw ConfigError(key + " must look like lo-hi");
      lo = parse_number<std::size_t>(parts[0], key);
      hi = parse_number<std::size_t>(parts[1], key);
    };
    if (kv.has("seed")) seed = parse_number<std::uint64_t>(kv.get("seed"), "seed");
    if (kv.has("size")) {
      const auto parts = detail::split(kv.get("size"), 'x');
      if (parts.size() != 2) throw ConfigError("size must look like HxW");
      h = parse_number<std::size_t>(parts[0], "height");
      w = parse_number<std::size_t>(parts[1], "width");
    }
    if (kv.has("num_classes")) num_classes = parse_number<std::size_t>(kv.get("num_classes"), "num_classes");
    if (kv.has("pools")) {
      pools.clear();
      for (const auto& group : detail::split(kv.get("pools"), ';')) {
        std::vector<std::size_t> pool;
        for (const auto& item : detail::split(group, ' '))
          if (!item.empty()) pool.push_back(parse_number<std::size_t>(item, "pool class"));
        pools.push_back(pool);
      }
    }
    range("shapes", min_shapes, max_shapes);
    range("extent", min_extent, max_extent);
    if (kv.has("pool_offset")) pool_offset = parse_real(kv.get("pool_offset"), "pool_offset");
    if (kv.has("color_jitter")) color_jitter = parse_real(kv.get("color_jitter"), "color_jitter");
    if (kv.has("noise")) noise = parse_real(kv.get("noise"), "noise");
  }

  // Two pools of roughly equal size over classes 1..K-1.
  static SceneSpec with_classes(std::size_t k, std::uint64_t seed) {
    SceneSpec s;
    s.seed = seed;
    s.num_classes = k;
    s.pools.assign(2, {});
    const std::size_t half = (k - 1) / 2;
    for (std::size_t c = 1; c < k; ++c) s.pools[c <= half ? 0 : 1].push_back(c);
    if (s.pools[0].empty()) s.pools.erase(s.pools.begin());
    return s;
  }

  std::size_t pool_of(std::size_t k) const {
    for (std::size_t p = 0; p < pools.size(); ++p)
      if (std::find(pools[p].begin(), pools[p].end(), k) != pools[p].end()) return p;
    throw ConfigError(detail::concat("class ", k, " belongs to no pool"));
  }

  /// Base RGB color of class k in [0,1].
  std::array<double, 3> base_color(std::size_t k) const {
    if (k == 0) return {0.45, 0.45, 0.45};
    static constexpr std::array<std::array<double, 3>, 6> hues{{{0.80, 0.25, 0.20},
                                                                 {0.25, 0.70, 0.25},
                                                                 {0.25, 0.35, 0.85},
                                                                 {0.85, 0.80, 0.20},
                                                                 {0.75, 0.30, 0.80},
                                                                 {0.20, 0.80, 0.80}}};
    const std::size_t p = pool_of(k);
    const auto& pool = pools[p];
    const std::size_t slot = static_cast<std::size_t>(std::find(pool.begin(), pool.end(), k) - pool.begin());
    auto c = hues[slot % hues.size()];
    // Pools alternate lighter / darker around the shared hue.
    const double shift = (p % 2 == 0 ? 1.0 : -1.0) * pool_offset * static_cast<double>(p / 2 + 1);
    for (auto& v : c) v = std::clamp(v + shift, 0.0, 1.0);
    return c;
  }
};

struct Scene {
  Raster image;  // RGB, 8-bit
  LabelMask mask;
  std::size_t pool = 0;
};

namespace detail {

inline std::uint8_t quantize(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline std::uint64_t scene_seed(std::uint64_t seed, std::size_t index) {
  Fnv1a h;
  h.update_value(seed);
  h.update_value(static_cast<std::uint64_t>(index));
  return h.value();
}

}  // namespace detail

/// Deterministic function of (spec.seed, index). Shapes are painted back to
/// front; the mask is the exact rasterization.
inline Scene generate_scene(const SceneSpec& spec, std::size_t index) {
  spec.validate();
  std::mt19937_64 rng(detail::scene_seed(spec.seed, index));
  auto uniform = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  auto pick = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };

  Scene scene;
  scene.pool = pick(0, spec.pools.size() - 1);
  const auto& pool = spec.pools[scene.pool];
  const std::size_t h = spec.h, w = spec.w;
  std::vector<double> rgb(h * w * 3);
  scene.mask = LabelMask(h, w, 0);
  const auto bg = spec.base_color(0);
  for (std::size_t i = 0; i < h * w; ++i)
    for (std::size_t c = 0; c < 3; ++c) rgb[i * 3 + c] = bg[c];

  const std::size_t count = pick(spec.min_shapes, spec.max_shapes);
  for (std::size_t s = 0; s < count; ++s) {
    const std::size_t cls = pool[pick(0, pool.size() - 1)];
    const int kind = static_cast<int>(pick(0, 2));
    const double ext_y = uniform(static_cast<double>(spec.min_extent), static_cast<double>(spec.max_extent));
    const double ext_x = uniform(static_cast<double>(spec.min_extent), static_cast<double>(spec.max_extent));
    const double cy = uniform(0.0, static_cast<double>(h));
    const double cx = uniform(0.0, static_cast<double>(w));
    auto color = spec.base_color(cls);
    for (auto& v : color) v += uniform(-spec.color_jitter, spec.color_jitter);

    auto inside = [&](double py, double px) {
      const double dy = py - cy, dx = px - cx;
      switch (kind) {
        case 0:  // rectangle
          return std::abs(dy) <= ext_y / 2 && std::abs(dx) <= ext_x / 2;
        case 1: {  // ellipse
          const double ry = ext_y / 2, rx = ext_x / 2;
          return (dy * dy) / (ry * ry) + (dx * dx) / (rx * rx) <= 1.0;
        }
        default: {  // upward triangle with apex at the top
          const double t = (dy + ext_y / 2) / ext_y;
          return t >= 0.0 && t <= 1.0 && std::abs(dx) <= t * ext_x / 2;
        }
      }
    };
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        if (!inside(static_cast<double>(y) + 0.5, static_cast<double>(x) + 0.5)) continue;
        scene.mask.at(y, x) = static_cast<std::uint8_t>(cls);
        for (std::size_t c = 0; c < 3; ++c) rgb[(y * w + x) * 3 + c] = color[c];
      }
  }

  std::normal_distribution<double> gauss(0.0, spec.noise);
  scene.image = Raster{w, h, 3, std::vector<std::uint8_t>(h * w * 3)};
  for (std::size_t i = 0; i < rgb.size(); ++i)
    scene.image.pixels[i] = detail::quantize(rgb[i] + (spec.noise > 0 ? gauss(rng) : 0.0));
  return scene;
}

/// Throws DataError if, over `count` scenes, some foreground class shows up in
/// fewer than `min_fraction` of the scenes drawn from its pool.
inline void check_class_balance(const SceneSpec& spec, std::size_t count, double min_fraction = 0.05) {
  std::vector<std::size_t> pool_scenes(spec.pools.size(), 0);
  std::vector<std::size_t> class_scenes(spec.num_classes, 0);
  for (std::size_t i = 0; i < count; ++i) {
    const Scene s = generate_scene(spec, i);
    ++pool_scenes[s.pool];
    std::vector<bool> present(spec.num_classes, false);
    for (auto v : s.mask.values) present[v] = true;
    for (std::size_t k = 1; k < spec.num_classes; ++k) class_scenes[k] += present[k] ? 1 : 0;
  }
  for (std::size_t k = 1; k < spec.num_classes; ++k) {
    const std::size_t p = spec.pool_of(k);
    const double frac = pool_scenes[p] ? static_cast<double>(class_scenes[k]) / static_cast<double>(pool_scenes[p]) : 0.0;
    if (frac < min_fraction)
      throw DataError(detail::concat("class ", k, " appears in only ", frac * 100.0, "% of its pool's scenes"));
  }
}

/// RGB raster to a (1, 3, H, W) tensor with values in [0, 1].
template <typename T>
void raster_to_tensor(const Raster& img, Tensor<T>& batch, std::size_t n) {
  const Shape& s = batch.shape();
  if (img.channels != s.c || img.h != s.h || img.w != s.w)
    throw ConfigError(detail::concat("image ", img.channels, "x", img.h, "x", img.w, " does not fit batch ", s));
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t y = 0; y < img.h; ++y)
      for (std::size_t x = 0; x < img.w; ++x)
        batch.at(n, c, y, x) = static_cast<T>(img.pixels[(y * img.w + x) * img.channels + c]) / T(255);
}

struct CorpusEntry {
  std::string split;
  std::string image_path;  // relative to the corpus directory
  std::string mask_path;
  Raster image;
  LabelMask mask;
};

struct Corpus {
  std::filesystem::path dir;
  SceneSpec spec;
  std::vector<CorpusEntry> entries;

  std::vector<const CorpusEntry*> split(const std::string& name) const {
    std::vector<const CorpusEntry*> out;
    for (const auto& e : entries)
      if (e.split == name) out.push_back(&e);
    return out;
  }
};

namespace detail {

inline std::uint64_t hash_file(const std::filesystem::path& path, Fnv1a& h) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("missing corpus file '" + path.string() + "'");
  std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  h.update_bytes(buf.data(), buf.size());
  return h.value();
}

inline Raster mask_to_raster(const LabelMask& m) { return Raster{m.w, m.h, 1, m.values}; }

inline LabelMask raster_to_mask(const Raster& r) {
  LabelMask m(r.h, r.w);
  m.values = r.pixels;
  return m;
}

}  // namespace detail

inline constexpr const char* kManifestName = "manifest.txt";
inline constexpr const char* kCorpusFormat = "dmlseg-corpus-1";

/// Scenes 0..n_train-1 form the train split, the next n_val the val split.
inline Corpus write_corpus(const SceneSpec& spec, std::size_t n_train, std::size_t n_val,
                           const std::filesystem::path& dir) {
  spec.validate();
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "masks");
  Corpus corpus{dir, spec, {}};
  Fnv1a h;
  std::ostringstream lines;
  for (std::size_t i = 0; i < n_train + n_val; ++i) {
    Scene s = generate_scene(spec, i);
    char name[32];
    std::snprintf(name, sizeof(name), "%05zu", i);
    CorpusEntry e{i < n_train ? "train" : "val", std::string("images/") + name + ".ppm",
                  std::string("masks/") + name + ".pgm", std::move(s.image), std::move(s.mask)};
    write_ppm((dir / e.image_path).string(), e.image);
    write_pgm((dir / e.mask_path).string(), detail::mask_to_raster(e.mask));
    detail::hash_file(dir / e.image_path, h);
    detail::hash_file(dir / e.mask_path, h);
    lines << e.split << '\t' << e.image_path << '\t' << e.mask_path << '\n';
    corpus.entries.push_back(std::move(e));
  }
  KeyValues kv;
  kv.set("format", kCorpusFormat);
  kv.merge(spec.to_kv());
  kv.set("n_train", std::to_string(n_train));
  kv.set("n_val", std::to_string(n_val));
  kv.set("hash", hex64(h.value()));
  std::ofstream out(dir / kManifestName);
  if (!out) throw DataError("cannot write manifest in '" + dir.string() + "'");
  out << kv.to_text() << lines.str();
  return corpus;
}

inline Corpus read_corpus(const std::filesystem::path& dir) {
  std::ifstream in(dir / kManifestName);
  if (!in) throw DataError("cannot open manifest '" + (dir / kManifestName).string() + "'");
  std::string text, line;
  std::vector<std::array<std::string, 3>> files;
  while (std::getline(in, line)) {
    if (line.find('\t') != std::string::npos) {
      const auto parts = detail::split(line, '\t');
      if (parts.size() != 3) throw DataError("malformed manifest entry '" + line + "'");
      files.push_back({parts[0], parts[1], parts[2]});
    } else {
      text += line + "\n";
    }
  }
  KeyValues kv;
  try {
    kv = KeyValues::parse(text, (dir / kManifestName).string());
  } catch (const ConfigError& e) {
    throw DataError(std::string("corrupt manifest: ") + e.what());
  }
  if (kv.get_or("format", "") != kCorpusFormat) throw DataError("manifest format is not " + std::string(kCorpusFormat));
  Corpus corpus;
  corpus.dir = dir;
  try {
    corpus.spec.apply(kv);
    corpus.spec.validate();
  } catch (const ConfigError& e) {
    throw DataError(std::string("corrupt manifest: ") + e.what());
  }
  Fnv1a h;
  for (const auto& f : files) {
    if (f[0] != "train" && f[0] != "val") throw DataError("unknown split '" + f[0] + "' in manifest");
    detail::hash_file(dir / f[1], h);
    detail::hash_file(dir / f[2], h);
    CorpusEntry e{f[0], f[1], f[2], read_ppm((dir / f[1]).string()), detail::raster_to_mask(read_pgm((dir / f[2]).string()))};
    if (e.image.w != e.mask.w || e.image.h != e.mask.h)
      throw DataError("image and mask sizes differ for '" + f[1] + "'");
    try {
      validate_mask(e.mask, corpus.spec.num_classes);
    } catch (const DataError& err) {
      throw DataError(f[2] + ": " + err.what());
    }
    corpus.entries.push_back(std::move(e));
  }
  if (kv.get_or("hash", "") != hex64(h.value()))
    throw DataError("manifest hash " + kv.get_or("hash", "<none>") + " does not match files (" + hex64(h.value()) + ")");
  return corpus;
}

}  // namespace dml
