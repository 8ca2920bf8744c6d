#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "o3n/metrics.hpp"

using namespace o3n;

namespace {

ClassCatalog two_classes() { return {{"a", "b"}, {true, false}}; }

// Independent per-class counting, no confusion matrix.
std::vector<double> brute_iou(const std::vector<std::uint8_t>& p, const std::vector<std::uint8_t>& g, std::size_t L) {
  std::vector<double> out(L, std::nan(""));
  for (std::size_t l = 1; l <= L; ++l) {
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const bool a = p[i] == l, b = g[i] == l;
      inter += a && b;
      uni += a || b;
    }
    if (uni) out[l - 1] = static_cast<double>(inter) / static_cast<double>(uni);
  }
  return out;
}

}  // namespace

TEST(Metrics, FourVoxelExample) {
  const auto r = iou_report({1, 1, 2, 2}, {1, 2, 2, 2}, two_classes());
  EXPECT_DOUBLE_EQ(r.iou[0], 0.5);
  EXPECT_DOUBLE_EQ(r.iou[1], 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(r.miou, 7.0 / 12.0);
  EXPECT_DOUBLE_EQ(r.base_miou, 0.5);
  EXPECT_DOUBLE_EQ(r.novel_miou, 2.0 / 3.0);
}

TEST(Metrics, PerfectAndDisjoint) {
  const auto cat = ClassCatalog::standard();
  const std::vector<std::uint8_t> g = {0, 1, 2, 3, 4, 5, 6, 6, 0};
  const auto same = iou_report(g, g, cat);
  for (double v : same.iou) EXPECT_EQ(v, 1.0);
  EXPECT_EQ(same.miou, 1.0);

  std::vector<std::uint8_t> p(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) p[i] = g[i] == 0 ? 0 : static_cast<std::uint8_t>(g[i] % 6 + 1);
  const auto dis = iou_report(p, g, cat);
  for (double v : dis.iou) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(dis.miou, 0.0);
}

TEST(Metrics, AbsentClassExcluded) {
  const auto r = iou_report({0, 1, 1}, {0, 1, 0}, two_classes());
  EXPECT_TRUE(std::isnan(r.iou[1]));
  EXPECT_TRUE(std::isnan(r.novel_miou));
  EXPECT_DOUBLE_EQ(r.miou, 0.5);
}

TEST(Metrics, MatchesBruteForceOnRandomGrids) {
  const auto cat = ClassCatalog::standard();
  const std::size_t L = cat.size();
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 16 * 16 * 16;
    // Varying class support so that some classes vanish in some trials.
    std::uniform_int_distribution<int> top(1, static_cast<int>(L));
    const int kmax = top(rng);
    std::uniform_int_distribution<int> cls(0, kmax);
    std::vector<std::uint8_t> p(n), g(n);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = static_cast<std::uint8_t>(cls(rng));
      g[i] = static_cast<std::uint8_t>(cls(rng));
    }
    const auto r = iou_report(p, g, cat);
    const auto b = brute_iou(p, g, L);
    double sum = 0, sb = 0, sn = 0;
    int cnt = 0, cb = 0, cn = 0;
    for (std::size_t l = 0; l < L; ++l) {
      if (std::isnan(b[l])) {
        EXPECT_TRUE(std::isnan(r.iou[l]));
        continue;
      }
      EXPECT_EQ(r.iou[l], b[l]) << "trial " << trial << " class " << l + 1;
      sum += b[l];
      ++cnt;
      (cat.base[l] ? sb : sn) += b[l];
      ++(cat.base[l] ? cb : cn);
    }
    EXPECT_DOUBLE_EQ(r.miou, sum / cnt);
    if (cb) EXPECT_DOUBLE_EQ(r.base_miou, sb / cb);
    if (cn) EXPECT_DOUBLE_EQ(r.novel_miou, sn / cn);
    EXPECT_EQ(r.voxels, n);
  }
}

TEST(Metrics, MergeEqualsJointCounting) {
  const auto cat = two_classes();
  ConfusionMatrix a(2), b(2), joint(2);
  a.add({1, 2}, {1, 1});
  b.add({0, 2}, {2, 2});
  joint.add({1, 2, 0, 2}, {1, 1, 2, 2});
  a.merge(b);
  EXPECT_EQ(a.counts, joint.counts);
  EXPECT_EQ(report_from_confusion(a, cat).miou, report_from_confusion(joint, cat).miou);
}

TEST(Metrics, RejectsBadInput) {
  ConfusionMatrix cm(2);
  EXPECT_THROW(cm.add({1}, {1, 2}), ShapeError);
  EXPECT_THROW(cm.add({3}, {1}), DomainError);
  EXPECT_THROW(report_from_confusion(cm, ClassCatalog::standard()), ShapeError);
}

TEST(Metrics, MajorityBaseline) {
  const std::uint8_t cls = majority_class({{0, 2, 2, 1}, {3, 2, 0, 0}}, 3);
  EXPECT_EQ(cls, 2);
  EXPECT_EQ(majority_prediction({0, 1, 3, 0}, cls), (std::vector<std::uint8_t>{0, 2, 2, 0}));
}

namespace {

SceneSample striped(std::size_t W, std::size_t H, std::size_t E) {
  SceneSample s;
  s.camera.image_width = W;
  s.camera.image_height = H;
  s.image = Tensor({3, H, W});
  s.f_seg = Tensor({E, H, W});
  s.erp_semantic.assign(H * W, 0);
  for (std::size_t i = 0; i < s.image.size(); ++i) s.image[i] = 1.0 + static_cast<double>(i % 7);
  for (std::size_t i = 0; i < s.f_seg.size(); ++i) s.f_seg[i] = 0.5 + static_cast<double>(i % 3);
  for (std::size_t i = 0; i < H * W; ++i) s.erp_semantic[i] = static_cast<std::uint8_t>(1 + i % 4);
  s.gt_grid = {1, 2, 3};
  return s;
}

}  // namespace

TEST(FovCrop, FullCircleIsIdentity) {
  const auto s = striped(64, 8, 2);
  const auto c = fov_crop(s, 360.0);
  EXPECT_EQ(c.image.buffer(), s.image.buffer());
  EXPECT_EQ(c.f_seg.buffer(), s.f_seg.buffer());
  EXPECT_EQ(c.erp_semantic, s.erp_semantic);
}

TEST(FovCrop, HalfCircleKeepsCentreColumns) {
  const std::size_t W = 512, H = 4;
  const auto s = striped(W, H, 2);
  const auto c = fov_crop(s, 180.0);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const bool kept = x >= 128 && x < 384;
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const std::size_t i = (ch * H + y) * W + x;
        EXPECT_EQ(c.image[i], kept ? s.image[i] : 0.0);
      }
      for (std::size_t e = 0; e < 2; ++e) {
        const std::size_t i = (e * H + y) * W + x;
        EXPECT_EQ(c.f_seg[i], kept ? s.f_seg[i] : 0.0);
      }
      EXPECT_EQ(c.erp_semantic[y * W + x], kept ? s.erp_semantic[y * W + x] : kBackground);
    }
  EXPECT_EQ(c.gt_grid, s.gt_grid);
}

TEST(FovCrop, RejectsInvalidFov) {
  const auto s = striped(16, 4, 1);
  EXPECT_THROW(fov_crop(s, 0.0), PreconditionError);
  EXPECT_THROW(fov_crop(s, 361.0), PreconditionError);
  EXPECT_THROW(fov_crop(s, std::nan("")), PreconditionError);
}
