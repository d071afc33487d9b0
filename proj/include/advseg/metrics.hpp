// Tumor-class pixel metrics: confusion counts from argmax predictions,
// Dice / sensitivity / specificity, and mean +- std summaries.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "advseg/tensor.hpp"

namespace advseg {

constexpr int kTumorClass = 3;

struct ConfusionCounts {
  std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::int64_t total() const { return tp + fp + tn + fn; }
};

// Per-pixel argmax (ties resolve to the lowest class index), then
// one-vs-rest counts for the tumor class.
template <typename T>
ConfusionCounts confusion_counts(const TensorT<T>& pred_probs, const TensorT<T>& gt_onehot) {
  ADVSEG_CHECK(pred_probs.rank() == 3 && gt_onehot.rank() == 3 &&
                   pred_probs.shape() == gt_onehot.shape(),
               ShapeError, "confusion_counts: expected matching [C,H,W] maps, got ",
               shape_str(pred_probs.shape()), " vs ", shape_str(gt_onehot.shape()));
  const int C = pred_probs.dim(0), H = pred_probs.dim(1), W = pred_probs.dim(2);
  ADVSEG_CHECK(C > kTumorClass, ShapeError, "confusion_counts: needs at least ", kTumorClass + 1,
               " classes");
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  const T* pd = pred_probs.data();
  const T* gd = gt_onehot.data();
  ConfusionCounts counts;
  for (std::int64_t p = 0; p < plane; ++p) {
    int best = 0;
    T best_v = pd[p];
    for (int c = 1; c < C; ++c) {
      const T v = pd[c * plane + p];
      if (v > best_v) {  // strict: ties keep the lowest index
        best_v = v;
        best = c;
      }
    }
    const bool pred_tumor = best == kTumorClass;
    const bool gt_tumor = gd[kTumorClass * plane + p] == T(1);
    if (pred_tumor && gt_tumor)
      ++counts.tp;
    else if (pred_tumor && !gt_tumor)
      ++counts.fp;
    else if (!pred_tumor && gt_tumor)
      ++counts.fn;
    else
      ++counts.tn;
  }
  return counts;
}

// Both masks empty counts as perfect agreement.
inline double dice(std::int64_t tp, std::int64_t fp, std::int64_t fn) {
  if (tp + fp + fn == 0) return 1.0;
  return 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
}

inline std::optional<double> sensitivity(std::int64_t tp, std::int64_t fn) {
  if (tp + fn == 0) return std::nullopt;
  return static_cast<double>(tp) / static_cast<double>(tp + fn);
}

inline std::optional<double> specificity(std::int64_t tn, std::int64_t fp) {
  if (tn + fp == 0) return std::nullopt;
  return static_cast<double>(tn) / static_cast<double>(tn + fp);
}

struct SliceMetrics {
  int subject_id = -1;
  int slice_id = -1;
  ConfusionCounts counts;
  double dice_score = 0.0;
  std::optional<double> sens;
  std::optional<double> spec;
};

template <typename T>
SliceMetrics slice_metrics(const TensorT<T>& pred_probs, const TensorT<T>& gt_onehot,
                           int subject_id, int slice_id) {
  SliceMetrics m;
  m.subject_id = subject_id;
  m.slice_id = slice_id;
  m.counts = confusion_counts(pred_probs, gt_onehot);
  m.dice_score = dice(m.counts.tp, m.counts.fp, m.counts.fn);
  m.sens = sensitivity(m.counts.tp, m.counts.fn);
  m.spec = specificity(m.counts.tn, m.counts.fp);
  return m;
}

struct SummaryStats {
  double mean = 0.0;
  double std_dev = 0.0;  // population
  double median = 0.0;
  int n = 0;

  // "0.35 ± 0.29" rendering
  std::string formatted() const {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.2f ± %.2f", mean, std_dev);
    return buf;
  }
};

inline SummaryStats summarize(const std::vector<double>& values) {
  ADVSEG_CHECK(!values.empty(), ContractError, "summarize: empty value list");
  SummaryStats s;
  s.n = static_cast<int>(values.size());
  double acc = 0.0;
  for (double v : values) acc += v;
  s.mean = acc / s.n;
  double var = 0.0;
  for (double v : values) var += (v - s.mean) * (v - s.mean);
  s.std_dev = std::sqrt(var / s.n);
  std::vector<double> sorted = values;
  std::sort(sorted.begin(), sorted.end());
  s.median = s.n % 2 == 1 ? sorted[static_cast<std::size_t>(s.n / 2)]
                          : 0.5 * (sorted[static_cast<std::size_t>(s.n / 2 - 1)] +
                                   sorted[static_cast<std::size_t>(s.n / 2)]);
  return s;
}

}  // namespace advseg
