#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <sstream>
#include <string>
#include <vector>

#include "dml/gt_gen.hpp"
#include "dml/keyvalue.hpp"
#include "dml/labels.hpp"
#include "dml/ops.hpp"

namespace dml {

/// Mean binary logistic loss over all N*h*w positions and K classes,
/// written in the overflow-free form max(m,0) - m*y + log(1 + exp(-|m|)).
/// `target` holds 0/1 values with m's shape.
template <typename T>
Tensor<T> multilabel_nll(Graph<T>& graph, const Tensor<T>& m, const Tensor<T>& target) {
  if (!(m.shape() == target.shape()))
    throw ConfigError(detail::concat("multilabel_nll: scores ", m.shape(), " vs targets ", target.shape()));
  const auto x = m.data();
  const auto y = target.data();
  const double norm = 1.0 / static_cast<double>(x.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    acc += std::max(v, 0.0) - v * static_cast<double>(y[i]) + std::log1p(std::exp(-std::abs(v)));
  }
  Tensor<T> out = detail::make_output<T>(Shape{}, m.requires_grad());
  out[0] = static_cast<T>(acc * norm);
  check_finite<T>(out.data(), "multilabel_nll");
  if (m.requires_grad()) {
    graph.record("multilabel_nll", out, [m = m, target = target, out, norm]() mutable {
      const double g = static_cast<double>(out.grad()[0]) * norm;
      auto x = m.data();
      auto y = target.data();
      auto gx = m.grad();
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double v = x[i];
        const double sig = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
        gx[i] += static_cast<T>(g * (sig - static_cast<double>(y[i])));
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> multilabel_nll(Graph<T>& graph, const Tensor<T>& m, const std::vector<const MultiLabelTarget*>& targets) {
  return multilabel_nll(graph, m, targets_to_tensor<T>(targets));
}

template <typename T>
struct SegLoss {
  Tensor<T> value;
  std::size_t valid_pixels = 0;
  bool no_valid_pixels = false;  // loss forced to 0 with zero gradient
};

/// Mean softmax cross-entropy over pixels whose label is not ignore. Each
/// mask must match p's spatial grid.
template <typename T>
SegLoss<T> softmax_nll(Graph<T>& graph, const Tensor<T>& p, const std::vector<LabelMask>& labels) {
  const Shape& s = p.shape();
  if (labels.size() != s.n)
    throw ConfigError(detail::concat("softmax_nll: ", labels.size(), " masks for batch of ", s.n));
  for (const auto& mask : labels) {
    if (mask.h != s.h || mask.w != s.w)
      throw ConfigError(detail::concat("softmax_nll: mask ", mask.h, "x", mask.w, " vs scores ", s.h, "x", s.w));
    validate_mask(mask, s.c);
  }
  std::size_t valid = 0;
  for (const auto& mask : labels)
    valid += static_cast<std::size_t>(std::count_if(mask.values.begin(), mask.values.end(),
                                                    [](std::uint8_t v) { return v != kIgnoreLabel; }));
  const std::size_t plane = s.plane();
  double acc = 0.0;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t i = 0; i < plane; ++i) {
      const auto label = labels[n].values[i];
      if (label == kIgnoreLabel) continue;
      double mx = p[(n * s.c) * plane + i];
      for (std::size_t k = 1; k < s.c; ++k) mx = std::max<double>(mx, p[(n * s.c + k) * plane + i]);
      double z = 0.0;
      for (std::size_t k = 0; k < s.c; ++k) z += std::exp(static_cast<double>(p[(n * s.c + k) * plane + i]) - mx);
      acc += std::log(z) + mx - static_cast<double>(p[(n * s.c + label) * plane + i]);
    }

  SegLoss<T> result;
  result.valid_pixels = valid;
  result.no_valid_pixels = valid == 0;
  const double norm = valid == 0 ? 0.0 : 1.0 / static_cast<double>(valid);
  result.value = detail::make_output<T>(Shape{}, p.requires_grad());
  result.value[0] = static_cast<T>(acc * norm);
  check_finite<T>(result.value.data(), "softmax_nll");
  if (p.requires_grad() && valid > 0) {
    graph.record("softmax_nll", result.value, [p = p, labels, out = result.value, norm]() mutable {
      const Shape& s = p.shape();
      const std::size_t plane = s.plane();
      const double g = static_cast<double>(out.grad()[0]) * norm;
      auto gp = p.grad();
      std::vector<double> prob(s.c);
      for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t i = 0; i < plane; ++i) {
          const auto label = labels[n].values[i];
          if (label == kIgnoreLabel) continue;
          double mx = p[(n * s.c) * plane + i];
          for (std::size_t k = 1; k < s.c; ++k) mx = std::max<double>(mx, p[(n * s.c + k) * plane + i]);
          double z = 0.0;
          for (std::size_t k = 0; k < s.c; ++k) {
            prob[k] = std::exp(static_cast<double>(p[(n * s.c + k) * plane + i]) - mx);
            z += prob[k];
          }
          for (std::size_t k = 0; k < s.c; ++k) {
            const double onehot = k == label ? 1.0 : 0.0;
            gp[(n * s.c + k) * plane + i] += static_cast<T>(g * (prob[k] / z - onehot));
          }
        }
    });
  }
  return result;
}

struct LossReport {
  double l_seg = 0.0;
  std::vector<double> l_mul;
  double total = 0.0;
  std::size_t valid_pixel_count = 0;

  // iter,l_seg,l_mul_1..J,total
  std::string csv_row(std::size_t iter) const {
    std::ostringstream os;
    os.precision(9);
    os << iter << ',' << l_seg;
    for (double v : l_mul) os << ',' << v;
    os << ',' << total;
    return os.str();
  }

  static std::string csv_header(std::size_t levels) {
    std::string h = "iter,l_seg";
    for (std::size_t j = 1; j <= levels; ++j) h += ",l_mul_" + std::to_string(j);
    return h + ",total";
  }
};

/// total = l_seg + lambda * sum(l_mul)
inline LossReport total_objective(double l_seg, const std::vector<double>& l_mul, double lambda) {
  LossReport r;
  r.l_seg = l_seg;
  r.l_mul = l_mul;
  double sum = 0.0;
  for (double v : l_mul) sum += v;
  r.total = l_seg + lambda * sum;
  return r;
}

/// Differentiable counterpart of total_objective on the graph.
template <typename T>
Tensor<T> objective(Graph<T>& graph, const Tensor<T>& l_seg, const std::vector<Tensor<T>>& l_mul, double lambda) {
  std::vector<Tensor<T>> terms{l_seg};
  std::vector<T> coeffs{T(1)};
  for (const auto& l : l_mul) {
    terms.push_back(l);
    coeffs.push_back(static_cast<T>(lambda));
  }
  return linear_combination(graph, terms, coeffs);
}

}  // namespace dml
