#pragma once

#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dml/labels.hpp"

namespace dml {

/// Confusion matrix plus the per-image region-consistency counts. Wrong
/// classes are predicted classes with no valid ground-truth pixel in the same
/// image; wrong labels are the valid pixels assigned to such classes.
struct EvalReport {
  std::size_t num_classes = 0;
  std::vector<std::uint64_t> confusion;  // [gt * K + pred]
  std::uint64_t wrong_class_sum = 0;
  std::uint64_t wrong_label_sum = 0;
  std::size_t image_count = 0;

  // Filled by finalize().
  std::vector<std::optional<double>> per_class_iou;
  double mean_iou = 0.0;
  double mean_wrong_class = 0.0;
  double mean_wrong_label = 0.0;
  double pixel_accuracy = 0.0;

  explicit EvalReport(std::size_t k = 0) : num_classes(k), confusion(k * k, 0) {}

  std::uint64_t at(std::size_t gt, std::size_t pred) const { return confusion[gt * num_classes + pred]; }

  std::uint64_t gt_pixels(std::size_t k) const {
    std::uint64_t s = 0;
    for (std::size_t p = 0; p < num_classes; ++p) s += at(k, p);
    return s;
  }
  std::uint64_t pred_pixels(std::size_t k) const {
    std::uint64_t s = 0;
    for (std::size_t g = 0; g < num_classes; ++g) s += at(g, k);
    return s;
  }

  // Commutative merge of partial reports; call finalize() afterwards.
  void merge(const EvalReport& other) {
    if (other.num_classes != num_classes) throw ConfigError("cannot merge reports with different K");
    for (std::size_t i = 0; i < confusion.size(); ++i) confusion[i] += other.confusion[i];
    wrong_class_sum += other.wrong_class_sum;
    wrong_label_sum += other.wrong_label_sum;
    image_count += other.image_count;
  }

  std::string to_csv() const;
  std::string to_table(const std::string& model_name) const;
};

/// Per-image wrong-class and wrong-label counts.
struct ImageConsistency {
  std::size_t wrong_class = 0;
  std::size_t wrong_label = 0;
};

inline ImageConsistency accumulate(const LabelMask& pred, const LabelMask& gt, EvalReport& report) {
  if (pred.h != gt.h || pred.w != gt.w)
    throw DataError(detail::concat("prediction ", pred.h, "x", pred.w, " vs ground truth ", gt.h, "x", gt.w));
  const std::size_t k = report.num_classes;
  validate_mask(gt, k);
  std::vector<bool> in_gt(k, false), in_pred(k, false);
  std::vector<std::uint64_t> pred_count(k, 0);
  for (std::size_t i = 0; i < gt.values.size(); ++i) {
    const auto g = gt.values[i];
    if (g == kIgnoreLabel) continue;
    const auto p = pred.values[i];
    if (p >= k) throw DataError(detail::concat("predicted class ", static_cast<int>(p), " at pixel ", i, " is not below K=", k));
    ++report.confusion[g * k + p];
    in_gt[g] = true;
    in_pred[p] = true;
    ++pred_count[p];
  }
  ImageConsistency ic;
  for (std::size_t c = 0; c < k; ++c)
    if (in_pred[c] && !in_gt[c]) {
      ++ic.wrong_class;
      ic.wrong_label += pred_count[c];
    }
  report.wrong_class_sum += ic.wrong_class;
  report.wrong_label_sum += ic.wrong_label;
  ++report.image_count;
  return ic;
}

inline EvalReport& finalize(EvalReport& report) {
  if (report.image_count == 0) throw UsageError("finalize() on a report with no images");
  const std::size_t k = report.num_classes;
  report.per_class_iou.assign(k, std::nullopt);
  double sum = 0.0;
  std::size_t defined = 0;
  std::uint64_t correct = 0, total = 0;
  for (std::size_t c = 0; c < k; ++c) {
    const std::uint64_t tp = report.at(c, c);
    const std::uint64_t denom = report.gt_pixels(c) + report.pred_pixels(c) - tp;
    correct += tp;
    total += report.gt_pixels(c);
    if (denom == 0) continue;
    report.per_class_iou[c] = static_cast<double>(tp) / static_cast<double>(denom);
    sum += *report.per_class_iou[c];
    ++defined;
  }
  report.mean_iou = defined ? sum / static_cast<double>(defined) : 0.0;
  report.pixel_accuracy = total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  report.mean_wrong_class = static_cast<double>(report.wrong_class_sum) / static_cast<double>(report.image_count);
  report.mean_wrong_label = static_cast<double>(report.wrong_label_sum) / static_cast<double>(report.image_count);
  return report;
}

inline std::string EvalReport::to_csv() const {
  std::ostringstream os;
  os.precision(9);
  os << "row,class,iou,gt_pixels,pred_pixels\n";
  for (std::size_t c = 0; c < num_classes; ++c) {
    os << "class," << c << ',';
    if (c < per_class_iou.size() && per_class_iou[c]) os << *per_class_iou[c];
    else os << "nan";
    os << ',' << gt_pixels(c) << ',' << pred_pixels(c) << '\n';
  }
  os << "summary_header,images,mean_iou,mean_wrong_class,mean_wrong_label,pixel_accuracy\n";
  os << "summary," << image_count << ',' << mean_iou << ',' << mean_wrong_class << ',' << mean_wrong_label << ','
     << pixel_accuracy << '\n';
  return os.str();
}

inline std::string EvalReport::to_table(const std::string& model_name) const {
  std::ostringstream os;
  os << std::left << std::setw(20) << "Model" << std::right << std::setw(8) << "IOU" << std::setw(16)
     << "#Wrong class" << std::setw(24) << "#Wrong label/image" << '\n';
  os << std::left << std::setw(20) << model_name << std::right << std::fixed << std::setprecision(2) << std::setw(8)
     << 100.0 * mean_iou << std::setprecision(3) << std::setw(16) << mean_wrong_class << std::setprecision(1)
     << std::setw(24) << mean_wrong_label << '\n';
  return os.str();
}

}  // namespace dml
