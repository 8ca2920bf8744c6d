#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "o3n/synth.hpp"
#include "o3n/tensor.hpp"

namespace o3n {

/// counts[gt][pred] over {empty} ∪ classes, ids 0..L.
struct ConfusionMatrix {
  std::size_t classes = 0;  // L, excluding empty
  std::vector<std::uint64_t> counts;

  explicit ConfusionMatrix(std::size_t L = 0) : classes(L), counts((L + 1) * (L + 1), 0) {}

  std::uint64_t& at(std::size_t gt, std::size_t pred) { return counts[gt * (classes + 1) + pred]; }
  std::uint64_t at(std::size_t gt, std::size_t pred) const { return counts[gt * (classes + 1) + pred]; }

  void add(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt) {
    if (pred.size() != gt.size()) throw ShapeError("confusion: prediction and ground truth differ in size");
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (gt[i] > classes || pred[i] > classes)
        throw DomainError("confusion: class id " + std::to_string(std::max(gt[i], pred[i])) + " out of range");
      ++at(gt[i], pred[i]);
    }
  }
  void merge(const ConfusionMatrix& o) {
    if (o.classes != classes) throw ShapeError("confusion: class count mismatch");
    for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += o.counts[i];
  }
  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts) t += c;
    return t;
  }
};

struct MetricReport {
  std::vector<double> iou;               // per class id 1..L at index id-1; NaN when excluded
  std::vector<std::uint64_t> gt_count;   // voxels per class in the ground truth
  double base_miou = std::numeric_limits<double>::quiet_NaN();
  double novel_miou = std::numeric_limits<double>::quiet_NaN();
  double miou = std::numeric_limits<double>::quiet_NaN();
  std::uint64_t voxels = 0;
};

/// IoU_l = TP/(TP+FP+FN); a class absent from both prediction and ground
/// truth is excluded from every mean. Empty never enters a mean.
inline MetricReport report_from_confusion(const ConfusionMatrix& cm, const ClassCatalog& cat) {
  if (cm.classes != cat.size()) throw ShapeError("report: catalog and confusion disagree on class count");
  MetricReport r;
  r.voxels = cm.total();
  const std::size_t L = cm.classes;
  r.iou.assign(L, std::numeric_limits<double>::quiet_NaN());
  r.gt_count.assign(L, 0);
  double sb = 0, sn = 0;
  std::size_t nb = 0, nn = 0;
  for (std::size_t l = 1; l <= L; ++l) {
    std::uint64_t tp = cm.at(l, l), fp = 0, fn = 0;
    for (std::size_t o = 0; o <= L; ++o) {
      if (o == l) continue;
      fp += cm.at(o, l);
      fn += cm.at(l, o);
    }
    r.gt_count[l - 1] = tp + fn;
    const std::uint64_t denom = tp + fp + fn;
    if (denom == 0) continue;
    const double v = static_cast<double>(tp) / static_cast<double>(denom);
    r.iou[l - 1] = v;
    if (cat.is_base(static_cast<std::uint8_t>(l))) {
      sb += v;
      ++nb;
    } else {
      sn += v;
      ++nn;
    }
  }
  if (nb) r.base_miou = sb / static_cast<double>(nb);
  if (nn) r.novel_miou = sn / static_cast<double>(nn);
  if (nb + nn) r.miou = (sb + sn) / static_cast<double>(nb + nn);
  return r;
}

inline MetricReport iou_report(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt,
                               const ClassCatalog& cat) {
  ConfusionMatrix cm(cat.size());
  cm.add(pred, gt);
  return report_from_confusion(cm, cat);
}

/// Forward-centred horizontal crop: keeps round(W·fov/360) centre columns,
/// zeroes the rest of the image and f_seg and marks them background.
inline SceneSample fov_crop(const SceneSample& s, double fov_degrees) {
  if (!(fov_degrees > 0.0 && fov_degrees <= 360.0)) throw PreconditionError("fov must lie in (0, 360]");
  const std::size_t W = s.camera.image_width, H = s.camera.image_height;
  const auto keep = static_cast<std::size_t>(std::lround(static_cast<double>(W) * fov_degrees / 360.0));
  const std::size_t lo = (W - keep) / 2, hi = lo + keep;
  SceneSample out = s;
  auto blank = [&](Tensor& t) {
    const std::size_t C = t.size() / (H * W);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
          if (x < lo || x >= hi) t[(c * H + y) * W + x] = 0.0;
  };
  blank(out.image);
  blank(out.f_seg);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      if (x < lo || x >= hi) out.erp_semantic[y * W + x] = kBackground;
  return out;
}

/// Most frequent occupied class predicted on every ground-truth-occupied
/// voxel (occupancy taken from the ground truth).
inline std::uint8_t majority_class(const std::vector<std::vector<std::uint8_t>>& grids, std::size_t classes) {
  std::vector<std::uint64_t> n(classes + 1, 0);
  for (const auto& g : grids)
    for (auto v : g)
      if (v != kEmpty && v <= classes) ++n[v];
  std::size_t best = 1;
  for (std::size_t l = 2; l <= classes; ++l)
    if (n[l] > n[best]) best = l;
  return static_cast<std::uint8_t>(best);
}

inline std::vector<std::uint8_t> majority_prediction(const std::vector<std::uint8_t>& gt, std::uint8_t cls) {
  std::vector<std::uint8_t> p(gt.size());
  for (std::size_t i = 0; i < gt.size(); ++i) p[i] = gt[i] == kEmpty ? kEmpty : cls;
  return p;
}

}  // namespace o3n
