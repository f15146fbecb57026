#pragma once

#include <cstddef>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "dml/gt_gen.hpp"
#include "dml/keyvalue.hpp"
#include "dml/labels.hpp"
#include "dml/ops.hpp"
#include "dml/optim.hpp"

namespace dml {

struct StageSpec {
  std::size_t width = 0;
  std::size_t stride = 1;
  bool operator==(const StageSpec&) const = default;
};

/// Architecture description. The low-level block downsamples by S_low (the
/// product of its stage strides); the segmentation block keeps that
/// resolution; each multi-label block downsamples by a further
/// dml_extra_stride before its sliding-window max pool.
struct ModelConfig {
  std::size_t num_classes = 8;
  std::size_t input_channels = 3;
  std::size_t input_h = 96;
  std::size_t input_w = 96;
  std::vector<StageSpec> low_level{{32, 2}, {64, 2}};
  std::vector<std::size_t> seg_channels{96, 96};
  std::vector<std::size_t> seg_dilations{1, 2};
  std::size_t dml_channels = 64;
  std::size_t dml_extra_stride = 2;
  std::vector<std::size_t> window_sizes{11, 5, 3};
  double lambda = 1.0;
  std::size_t levels = 3;

  std::size_t low_stride() const {
    std::size_t s = 1;
    for (const auto& st : low_level) s *= st.stride;
    return s;
  }
  std::size_t dml_stride() const { return low_stride() * dml_extra_stride; }
  std::size_t low_channels() const { return low_level.empty() ? input_channels : low_level.back().width; }

  void validate() const {
    if (num_classes == 0 || num_classes >= kIgnoreLabel)
      throw ConfigError(detail::concat("num_classes must lie in [1, 254], got ", num_classes));
    if (input_channels == 0 || input_h == 0 || input_w == 0) throw ConfigError("input size must be positive");
    for (const auto& st : low_level)
      if (st.width == 0 || st.stride == 0) throw ConfigError("low-level stages need positive width and stride");
    if (seg_channels.size() != seg_dilations.size())
      throw ConfigError(detail::concat("seg_channels has ", seg_channels.size(), " entries but seg_dilations has ",
                                       seg_dilations.size()));
    for (std::size_t i = 0; i < seg_channels.size(); ++i)
      if (seg_channels[i] == 0 || seg_dilations[i] == 0)
        throw ConfigError("segmentation stages need positive width and dilation");
    if (dml_channels == 0 || dml_extra_stride == 0) throw ConfigError("dml_channels and dml_extra_stride must be positive");
    if (levels > 3) throw ConfigError(detail::concat("levels must be in {0,1,2,3}, got ", levels));
    if (window_sizes.size() != levels)
      throw ConfigError(detail::concat("levels = ", levels, " but ", window_sizes.size(), " window sizes given"));
    for (std::size_t j = 0; j < window_sizes.size(); ++j) {
      if (window_sizes[j] % 2 == 0) throw ConfigError(detail::concat("window size ", window_sizes[j], " is not odd"));
      if (j > 0 && window_sizes[j] >= window_sizes[j - 1])
        throw ConfigError("window sizes must be strictly decreasing");
    }
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be non-negative");
    const std::size_t s = dml_stride();
    if (input_h % s != 0 || input_w % s != 0)
      throw ConfigError(detail::concat("input ", input_h, "x", input_w, " is not divisible by S_dml=", s));
  }

  GtSpec gt_spec() const { return GtSpec{num_classes, low_stride(), dml_extra_stride, window_sizes}; }

  KeyValues to_kv() const {
    KeyValues kv;
    kv.set("num_classes", std::to_string(num_classes));
    kv.set("input_channels", std::to_string(input_channels));
    kv.set("input_size", detail::concat(input_h, "x", input_w));
    std::vector<std::string> stages;
    for (const auto& st : low_level) stages.push_back(detail::concat(st.width, ":", st.stride));
    kv.set("low_level", join(stages));
    kv.set("seg_channels", join(seg_channels));
    kv.set("seg_dilations", join(seg_dilations));
    kv.set("dml_channels", std::to_string(dml_channels));
    kv.set("dml_extra_stride", std::to_string(dml_extra_stride));
    kv.set("window_sizes", join(window_sizes));
    kv.set("lambda", format_real(lambda));
    kv.set("levels", std::to_string(levels));
    return kv;
  }

  // Keys absent from kv keep their current values. When only `levels` is
  // given, the window list is truncated to its first `levels` entries.
  void apply(const KeyValues& kv) {
    if (kv.has("num_classes")) num_classes = parse_number<std::size_t>(kv.get("num_classes"), "num_classes");
    if (kv.has("input_channels"))
      input_channels = parse_number<std::size_t>(kv.get("input_channels"), "input_channels");
    if (kv.has("input_size")) {
      const auto parts = detail::split(kv.get("input_size"), 'x');
      if (parts.size() != 2) throw ConfigError("input_size must look like HxW");
      input_h = parse_number<std::size_t>(parts[0], "input height");
      input_w = parse_number<std::size_t>(parts[1], "input width");
    }
    if (kv.has("low_level")) {
      low_level.clear();
      const auto& text = kv.get("low_level");
      if (!detail::trim(text).empty())
        for (const auto& item : detail::split(text, ',')) {
          const auto parts = detail::split(item, ':');
          if (parts.size() != 2) throw ConfigError("low_level entries must look like width:stride");
          low_level.push_back({parse_number<std::size_t>(parts[0], "stage width"),
                               parse_number<std::size_t>(parts[1], "stage stride")});
        }
    }
    if (kv.has("seg_channels")) seg_channels = parse_size_list(kv.get("seg_channels"), "seg_channels");
    if (kv.has("seg_dilations")) seg_dilations = parse_size_list(kv.get("seg_dilations"), "seg_dilations");
    if (kv.has("dml_channels")) dml_channels = parse_number<std::size_t>(kv.get("dml_channels"), "dml_channels");
    if (kv.has("dml_extra_stride"))
      dml_extra_stride = parse_number<std::size_t>(kv.get("dml_extra_stride"), "dml_extra_stride");
    if (kv.has("window_sizes")) window_sizes = parse_size_list(kv.get("window_sizes"), "window_sizes");
    if (kv.has("lambda")) lambda = parse_real(kv.get("lambda"), "lambda");
    if (kv.has("levels")) {
      levels = parse_number<std::size_t>(kv.get("levels"), "levels");
      if (!kv.has("window_sizes") && window_sizes.size() > levels) window_sizes.resize(levels);
    } else if (kv.has("window_sizes")) {
      levels = window_sizes.size();
    }
  }

  static ModelConfig from_kv(const KeyValues& kv) {
    ModelConfig c;
    c.apply(kv);
    c.validate();
    return c;
  }

  /// Same architecture restricted to the first `j` multi-label levels.
  ModelConfig with_levels(std::size_t j) const {
    if (j > window_sizes.size())
      throw ConfigError(detail::concat("cannot take ", j, " levels from ", window_sizes.size(), " windows"));
    ModelConfig c = *this;
    c.levels = j;
    c.window_sizes.resize(j);
    return c;
  }

  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct NetworkOutput {
  Tensor<T> s;                 // segmentation scores at 1/S_low
  std::vector<Tensor<T>> m;    // multi-label scores at 1/S_dml, one per level
  std::vector<Tensor<T>> m_up; // m upsampled to s's grid
  Tensor<T> p;                 // s + sum(m_up)
};

namespace detail {

struct ConvSpec {
  std::string name;
  std::size_t c_in, c_out, kernel;
  Conv2dParams params;
  bool relu;
};

}  // namespace detail

/// Shared low-level block, segmentation block and J multi-label blocks with
/// element-wise fusion of their scores.
template <typename T>
class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    build(seed);
  }

  const ModelConfig& config() const { return config_; }
  ParameterSet<T>& params() { return params_; }
  const ParameterSet<T>& params() const { return params_; }

  NetworkOutput<T> forward(Graph<T>& graph, const Tensor<T>& image) {
    const Shape& s = image.shape();
    if (s.c != config_.input_channels || s.h != config_.input_h || s.w != config_.input_w)
      throw ConfigError(detail::concat("image batch ", s, " does not match configured input (N,", config_.input_channels,
                                       ",", config_.input_h, ",", config_.input_w, ")"));
    Tensor<T> o = image;
    for (const auto& spec : low_) o = apply(graph, spec, o);

    NetworkOutput<T> out;
    Tensor<T> seg = o;
    for (const auto& spec : seg_) seg = apply(graph, spec, seg);
    out.s = seg;

    for (std::size_t j = 0; j < dml_.size(); ++j) {
      const auto& block = dml_[j];
      Tensor<T> x = apply(graph, block.conv, o);
      x = apply(graph, block.score, x);
      const std::size_t w = config_.window_sizes[j];
      x = maxpool2d(graph, x, w, 1, (w - 1) / 2);
      x = apply(graph, block.adapt, x);
      out.m.push_back(x);
      out.m_up.push_back(upsample_nearest(graph, x, config_.dml_extra_stride));
    }

    std::vector<Tensor<T>> terms{out.s};
    terms.insert(terms.end(), out.m_up.begin(), out.m_up.end());
    out.p = terms.size() == 1 ? out.s : elementwise_sum(graph, terms);
    return out;
  }

  /// Plain-text listing of every layer with its shapes and strides.
  std::string describe() const {
    std::ostringstream os;
    const std::size_t h = config_.input_h, w = config_.input_w;
    os << "input (N," << config_.input_channels << "," << h << "," << w << ")\n";
    os << "S_low=" << config_.low_stride() << " S_dml=" << config_.dml_stride() << " K=" << config_.num_classes
       << " levels=" << config_.levels << " lambda=" << config_.lambda << "\n";
    std::size_t ch = h, cw = w;
    auto line = [&](const detail::ConvSpec& c) {
      ch = detail::conv_out_size(ch, c.kernel, c.params);
      cw = detail::conv_out_size(cw, c.kernel, c.params);
      os << c.name << " conv" << c.kernel << "x" << c.kernel << " " << c.c_in << "->" << c.c_out
         << " stride=" << c.params.stride << " dilation=" << c.params.dilation << " pad=" << c.params.padding
         << (c.relu ? " relu" : "") << " out=(N," << c.c_out << "," << ch << "," << cw << ")\n";
    };
    for (const auto& c : low_) line(c);
    const std::size_t lh = ch, lw = cw;
    for (const auto& c : seg_) line(c);
    for (std::size_t j = 0; j < dml_.size(); ++j) {
      ch = lh;
      cw = lw;
      line(dml_[j].conv);
      line(dml_[j].score);
      const std::size_t win = config_.window_sizes[j];
      os << "dml" << j + 1 << ".pool maxpool" << win << "x" << win << " stride=1 pad=" << (win - 1) / 2 << " out=(N,"
         << config_.num_classes << "," << ch << "," << cw << ")\n";
      line(dml_[j].adapt);
      os << "dml" << j + 1 << ".up nearest x" << config_.dml_extra_stride << " out=(N," << config_.num_classes << ","
         << ch * config_.dml_extra_stride << "," << cw * config_.dml_extra_stride << ")\n";
    }
    os << "fuse p = s" << (dml_.empty() ? "" : " + sum(m_up)") << " out=(N," << config_.num_classes << "," << lh << ","
       << lw << ")\n";
    os << "parameters " << params_.scalar_count() << "\n";
    return os.str();
  }

 private:
  struct DmlBlock {
    detail::ConvSpec conv, score, adapt;
  };

  detail::ConvSpec add_conv(const std::string& name, std::size_t c_in, std::size_t c_out, std::size_t kernel,
                            Conv2dParams p, bool relu, std::uint64_t seed) {
    Tensor<T>& weight = params_.add(name + ".weight", Shape{c_out, c_in, kernel, kernel});
    init_he_normal(weight, seed, name + ".weight");
    params_.add(name + ".bias", Shape{1, c_out, 1, 1});
    return detail::ConvSpec{name, c_in, c_out, kernel, p, relu};
  }

  void build(std::uint64_t seed) {
    const ModelConfig& c = config_;
    std::size_t ch = c.input_channels;
    for (std::size_t i = 0; i < c.low_level.size(); ++i) {
      const auto& st = c.low_level[i];
      low_.push_back(add_conv("low." + std::to_string(i), ch, st.width, 3, {st.stride, 1, 1}, true, seed));
      ch = st.width;
    }
    const std::size_t low_ch = ch;
    for (std::size_t i = 0; i < c.seg_channels.size(); ++i) {
      const std::size_t d = c.seg_dilations[i];
      seg_.push_back(add_conv("seg." + std::to_string(i), ch, c.seg_channels[i], 3, {1, d, d}, true, seed));
      ch = c.seg_channels[i];
    }
    seg_.push_back(add_conv("seg.score", ch, c.num_classes, 1, {1, 1, 0}, false, seed));
    for (std::size_t j = 0; j < c.levels; ++j) {
      const std::string prefix = "dml" + std::to_string(j + 1);
      // A 3x3 kernel with padding 1 keeps the grid aligned when the stride
      // is 1; larger strides use a kernel of stride+1 to cover each cell.
      const std::size_t s = c.dml_extra_stride;
      const std::size_t k = s == 1 ? 3 : s + 1;
      DmlBlock b;
      b.conv = add_conv(prefix + ".conv", low_ch, c.dml_channels, k, {s, 1, (k - 1) / 2}, true, seed);
      b.score = add_conv(prefix + ".score", c.dml_channels, c.num_classes, 1, {1, 1, 0}, false, seed);
      b.adapt = add_conv(prefix + ".adapt", c.num_classes, c.num_classes, 1, {1, 1, 0}, false, seed);
      dml_.push_back(b);
    }
  }

  Tensor<T> apply(Graph<T>& graph, const detail::ConvSpec& spec, const Tensor<T>& x) {
    Tensor<T> y = conv2d(graph, x, params_.get(spec.name + ".weight").tensor, params_.get(spec.name + ".bias").tensor,
                         spec.params);
    return spec.relu ? relu(graph, y) : y;
  }

  ModelConfig config_;
  ParameterSet<T> params_;
  std::vector<detail::ConvSpec> low_;
  std::vector<detail::ConvSpec> seg_;
  std::vector<DmlBlock> dml_;
};

/// Per-pixel argmax over classes (ties to the lowest index), replicated by
/// the integer factor that maps the score grid onto (full_h, full_w).
template <typename T>
std::vector<LabelMask> predict_labels(const Tensor<T>& p, std::size_t full_h, std::size_t full_w) {
  const Shape& s = p.shape();
  if (full_h % s.h != 0 || full_w % s.w != 0 || full_h / s.h != full_w / s.w)
    throw ConfigError(detail::concat("score grid ", s.h, "x", s.w, " does not divide output size ", full_h, "x", full_w));
  const std::size_t factor = full_h / s.h;
  std::vector<LabelMask> out;
  out.reserve(s.n);
  for (std::size_t n = 0; n < s.n; ++n) {
    LabelMask mask(full_h, full_w);
    for (std::size_t y = 0; y < s.h; ++y)
      for (std::size_t x = 0; x < s.w; ++x) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < s.c; ++k)
          if (p.at(n, k, y, x) > p.at(n, best, y, x)) best = k;
        for (std::size_t dy = 0; dy < factor; ++dy)
          for (std::size_t dx = 0; dx < factor; ++dx)
            mask.at(y * factor + dy, x * factor + dx) = static_cast<std::uint8_t>(best);
      }
    out.push_back(std::move(mask));
  }
  return out;
}

}  // namespace dml
