#include "o3n/psm.hpp"

#include <gtest/gtest.h>

#include <chrono>
#include <limits>
#include <random>
#include <set>

namespace o3n {
namespace {

std::vector<std::size_t> cell_rp(std::size_t flat, std::size_t P) { return {flat / P, flat % P}; }

TEST(SpiralOrder, SingleRing) {
  EXPECT_EQ(spiral_order(1, 4).forward, (std::vector<std::size_t>{0, 1, 2, 3}));
}

TEST(SpiralOrder, TwoRingsContinueFromPreviousAzimuth) {
  EXPECT_EQ(spiral_order(2, 4).forward, (std::vector<std::size_t>{0, 1, 2, 3, 7, 4, 5, 6}));
}

TEST(SpiralOrder, RandomSizesAreBijectiveMonotoneAndContinuous) {
  std::mt19937 rng(11);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t R = 1 + rng() % 12, P = 1 + rng() % 20;
    const ScanOrder s = spiral_order(R, P);
    std::set<std::size_t> seen(s.forward.begin(), s.forward.end());
    ASSERT_EQ(seen.size(), R * P);
    ASSERT_EQ(*seen.rbegin(), R * P - 1);
    for (std::size_t t = 0; t < s.forward.size(); ++t) EXPECT_EQ(s.inverse[s.forward[t]], t);
    for (std::size_t t = 1; t < s.forward.size(); ++t) {
      const auto a = cell_rp(s.forward[t - 1], P), b = cell_rp(s.forward[t], P);
      ASSERT_LE(a[0], b[0]);
      const bool same_ring = a[0] == b[0] && (b[1] == (a[1] + 1) % P);
      const bool next_ring = b[0] == a[0] + 1 && a[1] == b[1];
      EXPECT_TRUE(same_ring || next_ring) << "R=" << R << " P=" << P << " t=" << t;
    }
  }
}

TEST(SpiralOrder, ReorderThenInverseIsIdentity) {
  const ScanOrder s = spiral_order(5, 7);
  Tensor x({35, 3});
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n;
  for (double& v : x.buffer()) v = n(rng);
  EXPECT_EQ(reorder_rows(reorder_rows(x, s.forward), s.inverse), x);
}

TEST(Bev, SingleChannelSingleSliceIsIdentity) {
  Tensor x({1, 3, 4, 1});
  std::iota(x.buffer().begin(), x.buffer().end(), 0.0);
  EXPECT_EQ(bev_compress(x).buffer(), x.buffer());
  EXPECT_EQ(bev_compress(x).shape(), (Shape{1, 3, 4}));
}

TEST(Bev, ChannelLayout) {
  Tensor x({2, 1, 1, 2}, std::vector<double>{10, 11, 20, 21});  // value = 10(c+1) + z
  const Tensor b = bev_compress(x);
  EXPECT_EQ(b.shape(), (Shape{4, 1, 1}));
  EXPECT_EQ(b.buffer(), (std::vector<double>{10, 11, 20, 21}));
  Tensor y({2, 2, 1, 2});
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t z = 0; z < 2; ++z) y.at(c, r, 0, z) = 100.0 * c + 10.0 * r + z;
  const Tensor by = bev_compress(y);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t z = 0; z < 2; ++z) EXPECT_EQ(by.at(c * 2 + z, r, 0), 100.0 * c + 10.0 * r + z);
}

TEST(Bev, RoundTripIsBitExact) {
  Tensor x({3, 4, 5, 2});
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n;
  for (double& v : x.buffer()) v = n(rng);
  EXPECT_EQ(bev_voxelize(bev_compress(x), 2), x);
  EXPECT_THROW(bev_voxelize(bev_compress(x), 4), ShapeError);
}

// Explicit convolution form: y_t = c Σ_{s<=t} (Π_{u=s+1..t} ā_u) b x_s + d x_t.
Tensor ssm_unrolled(const Tensor& x, const SsmParams& p) {
  const std::size_t T = x.dim(0), C = x.dim(1);
  Tensor y({T, C});
  for (std::size_t ch = 0; ch < C; ++ch) {
    std::vector<double> abar(T);
    const double s = 1.0 / (1.0 + std::exp(-p.a[ch]));
    for (std::size_t t = 0; t < T; ++t)
      abar[t] = s / (1.0 + std::exp(-(p.gate_w[ch] * x.at(t, ch) + p.gate_b[ch])));
    for (std::size_t t = 0; t < T; ++t) {
      double acc = 0.0;
      for (std::size_t s0 = 0; s0 <= t; ++s0) {
        double prod = 1.0;
        for (std::size_t u = s0 + 1; u <= t; ++u) prod *= abar[u];
        acc += prod * p.b[ch] * x.at(s0, ch);
      }
      y.at(t, ch) = p.c[ch] * acc + p.d[ch] * x.at(t, ch);
    }
  }
  return y;
}

SsmParams random_params(std::size_t C, std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  SsmParams p = SsmParams::uniform(C, 0, 0, 0, 0, 0, 0);
  for (Tensor* t : {&p.a, &p.b, &p.c, &p.d, &p.gate_w, &p.gate_b})
    for (double& v : t->buffer()) v = n(rng);
  return p;
}

TEST(SsmScan, MemorylessWhenDecayIsZero) {
  const double inf = std::numeric_limits<double>::infinity();
  const SsmParams p = SsmParams::uniform(1, -inf, 0.7, 2.0, 0.3, 1.0, 0.0);
  const Tensor x({4, 1}, std::vector<double>{1, -2, 3, 0.5});
  const Tensor y = ssm_scan(x, p);
  for (std::size_t t = 0; t < 4; ++t) EXPECT_DOUBLE_EQ(y[t], 2.0 * 0.7 * x[t] + 0.3 * x[t]);
}

TEST(SsmScan, ZeroInputGainAndUnitSkipIsIdentity) {
  std::mt19937_64 rng(5);
  SsmParams p = random_params(3, rng);
  p.b.fill(0.0);
  p.d.fill(1.0);
  Tensor x({6, 3});
  std::normal_distribution<double> n;
  for (double& v : x.buffer()) v = n(rng);
  EXPECT_EQ(ssm_scan(x, p), x);
}

TEST(SsmScan, HandUnrolledThreeSteps) {
  // σ(0) = 0.5 decay with the gate saturated open.
  const double inf = std::numeric_limits<double>::infinity();
  const SsmParams p = SsmParams::uniform(1, 0.0, 1.0, 1.0, 0.0, 0.0, inf);
  const Tensor y = ssm_scan(Tensor({3, 1}, 1.0), p);
  EXPECT_DOUBLE_EQ(y[0], 1.0);
  EXPECT_DOUBLE_EQ(y[1], 1.5);
  EXPECT_DOUBLE_EQ(y[2], 1.75);
}

TEST(SsmScan, MatchesQuadraticForm) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n;
  for (std::size_t T : {1u, 7u, 33u, 64u}) {
    const SsmParams p = random_params(4, rng);
    Tensor x({T, 4});
    for (double& v : x.buffer()) v = n(rng);
    const Tensor a = ssm_scan(x, p), b = ssm_unrolled(x, p);
    for (std::size_t i = 0; i < a.size(); ++i)
      EXPECT_LE(std::abs(a[i] - b[i]), 1e-6 * std::max(1.0, std::abs(b[i])));
  }
}

TEST(SsmScan, RejectsNonFiniteInput) {
  Tensor x({2, 1}, 1.0);
  x[1] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(ssm_scan(x, SsmParams::uniform(1, 0, 1, 1, 0, 0, 0)), DomainError);
}

TEST(SsmScan, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(13);
  std::normal_distribution<double> n;
  const SsmParams p = random_params(3, rng);
  Tensor x({9, 3});
  for (double& v : x.buffer()) v = n(rng);
  Tensor w({9, 3});
  for (double& v : w.buffer()) v = n(rng);
  const auto rep = ad::grad_check(
      [&](ad::Tape& t, std::span<const ad::Var> in) {
        const SsmVars s{in[1], in[2], in[3], in[4], in[5], in[6]};
        return ad::sum(ad::mul(ssm_scan(in[0], s), t.constant(w)));
      },
      {x, p.a, p.b, p.c, p.d, p.gate_w, p.gate_b});
  EXPECT_LT(rep.max_rel_error, 1e-6);
}

// --------------------------------------------------------------- fusion

CubicGridSpec small_cube() { return {Vec3(-1.6, -1.6, -1.2), 0.4, {8, 8, 4}}; }
CylindricalGridSpec small_cyl() {
  CylindricalGridSpec c;
  c.radial_bins = 4;
  c.azimuth_bins = 8;
  c.vertical_bins = 4;
  c.r_max = 1.6;
  c.z_min = -1.2;
  c.z_max = 0.4;
  return c;
}

Tensor randn(Shape s, std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  Tensor t(std::move(s));
  for (double& v : t.buffer()) v = n(rng);
  return t;
}

TEST(PsmFuse, ZeroPolarBranchIsIdentity) {
  std::mt19937_64 rng(1);
  const auto cub = small_cube();
  const auto cyl = small_cyl();
  const Tensor vc = randn({2, 8, 8, 4}, rng);
  const auto st = PsmLayerState::from_specs(2, 2, cub, cyl);
  EXPECT_EQ(psm_fuse(vc, Tensor({2, 4, 8, 4}), st, cyl, cub), vc);
}

TEST(PsmFuse, FirstLayerIgnoresPolarBranch) {
  std::mt19937_64 rng(2);
  const auto cub = small_cube();
  const auto cyl = small_cyl();
  const Tensor vc = randn({2, 8, 8, 4}, rng);
  const auto st = PsmLayerState::from_specs(1, 2, cub, cyl);
  EXPECT_EQ(psm_fuse(vc, randn({2, 4, 8, 4}, rng), st, cyl, cub), vc);
}

TEST(PsmFuse, ShapeMismatchIsRejected) {
  const auto cub = small_cube();
  const auto cyl = small_cyl();
  const auto st = PsmLayerState::from_specs(2, 2, cub, cyl);
  EXPECT_THROW(psm_fuse(Tensor({2, 8, 8, 4}), Tensor({2, 4, 7, 4}), st, cyl, cub), ShapeError);
}

// Direct per-voxel polar lookup written independently of the tap builder.
double polar_oracle(const Tensor& vp, std::size_t c, const Vec3& pt, const CylindricalGridSpec& cyl) {
  const double rad = std::hypot(pt.x(), pt.y());
  if (rad > cyl.r_max || pt.z() < cyl.z_min || pt.z() > cyl.z_max) return 0.0;
  double az = std::atan2(pt.y(), pt.x());
  if (az < 0) az += 2 * std::numbers::pi;
  const long R = static_cast<long>(cyl.radial_bins), P = static_cast<long>(cyl.azimuth_bins),
             Z = static_cast<long>(cyl.vertical_bins);
  const double fr = rad / cyl.r_max * R - 0.5;
  const double fp = az / (2 * std::numbers::pi) * P - 0.5;
  const double fz = (pt.z() - cyl.z_min) / (cyl.z_max - cyl.z_min) * Z - 0.5;
  double acc = 0.0;
  for (int dr = 0; dr < 2; ++dr)
    for (int dp = 0; dp < 2; ++dp)
      for (int dz = 0; dz < 2; ++dz) {
        const long r0 = static_cast<long>(std::floor(fr)) + dr;
        const long p0 = static_cast<long>(std::floor(fp)) + dp;
        const long z0 = static_cast<long>(std::floor(fz)) + dz;
        const double w = (dr ? fr - std::floor(fr) : 1 - (fr - std::floor(fr))) *
                         (dp ? fp - std::floor(fp) : 1 - (fp - std::floor(fp))) *
                         (dz ? fz - std::floor(fz) : 1 - (fz - std::floor(fz)));
        const long r = std::clamp(r0, 0L, R - 1), p = ((p0 % P) + P) % P, z = std::clamp(z0, 0L, Z - 1);
        acc += w * vp.at(c, r, p, z);
      }
  return acc;
}

TEST(PsmFuse, ConstantPolarBranchAddsConstantInsideRadius) {
  std::mt19937_64 rng(3);
  const auto cub = small_cube();
  const auto cyl = small_cyl();
  const Tensor vc = randn({1, 8, 8, 4}, rng);
  const double k = 2.5;
  const auto st = PsmLayerState::from_specs(3, 1, cub, cyl);
  const Tensor out = psm_fuse(vc, Tensor({1, 4, 8, 4}, k), st, cyl, cub);
  std::size_t inside = 0;
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j)
      for (std::size_t z = 0; z < 4; ++z) {
        const Vec3 c = cub.center(i, j, z);
        const bool in = std::hypot(c.x(), c.y()) <= cyl.r_max && c.z() >= cyl.z_min && c.z() <= cyl.z_max;
        inside += in;
        EXPECT_EQ(out.at(0, i, j, z), vc.at(0, i, j, z) + (in ? k : 0.0));
      }
  EXPECT_GT(inside, 0u);
  EXPECT_LT(inside, 8u * 8u * 4u);
}

TEST(PsmFuse, RandomPolarBranchMatchesDirectLookup) {
  std::mt19937_64 rng(4);
  const auto cub = small_cube();
  const auto cyl = small_cyl();
  const Tensor vc = randn({2, 8, 8, 4}, rng);
  const Tensor vp = randn({2, 4, 8, 4}, rng);
  const Tensor out = psm_fuse(vc, vp, PsmLayerState::from_specs(2, 2, cub, cyl), cyl, cub);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t j = 0; j < 8; ++j)
        for (std::size_t z = 0; z < 4; ++z)
          EXPECT_NEAR(out.at(c, i, j, z), vc.at(c, i, j, z) + polar_oracle(vp, c, cub.center(i, j, z), cyl), 1e-12);
}

// --------------------------------------------------------------- block

TEST(PsmBlock, IdentityScanOnFirstLayerReturnsInput) {
  std::mt19937_64 rng(5);
  const auto cub = small_cube();
  const auto cyl = small_cyl();
  const Tensor vc = randn({2, 8, 8, 4}, rng);
  const auto id = SsmParams::uniform(8, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0);
  EXPECT_EQ(psm_block(vc, PsmLayerState::from_specs(1, 2, cub, cyl), cub, cyl, {id}), vc);
}

TEST(PsmBlock, ShapePreservedForRandomConfigs) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 4; ++trial) {
    const std::size_t C = 1 + rng() % 3;
    CubicGridSpec cub{Vec3(-1.2, -1.6, -1.2), 0.4, {6 + rng() % 3, 8, 2 + rng() % 3}};
    CylindricalGridSpec cyl = small_cyl();
    cyl.radial_bins = 2 + rng() % 4;
    cyl.azimuth_bins = 3 + rng() % 9;
    cyl.vertical_bins = 1 + rng() % 4;
    const Tensor vc = randn({C, cub.dims[0], cub.dims[1], cub.dims[2]}, rng);
    std::vector<SsmParams> scans{random_params(C * cyl.vertical_bins, rng), random_params(C * cyl.vertical_bins, rng)};
    const Tensor out = psm_block(vc, PsmLayerState::from_specs(2, C, cub, cyl), cub, cyl, scans);
    EXPECT_EQ(out.shape(), vc.shape());
    EXPECT_TRUE(out.all_finite());
  }
}

TEST(PsmBlock, PoleImpulseOnlyReachesLaterScanPositions) {
  const auto cub = small_cube();
  const auto cyl = small_cyl();
  Tensor vc({1, 8, 8, 4});
  vc.at(0, 5, 3, 1) = 1.0;  // centre (0.6, -0.2, -0.6), second ring
  const PsmContext ctx(cub, cyl);
  const auto p = SsmParams::uniform(4, 1.0, 1.0, 1.0, 0.0, 0.5, 0.5);
  ad::Tape tape;
  const ad::Var x = tape.constant(vc);
  const SsmVars s{tape.constant(p.a), tape.constant(p.b),      tape.constant(p.c),
                  tape.constant(p.d), tape.constant(p.gate_w), tape.constant(p.gate_b)};
  const Tensor in = ctx.to_polar->apply(vc.reshaped({1, cub.count()})).reshaped({1, 4, 8, 4});
  const Tensor out = psm_polar_branch(x, ctx, {s}).value();
  const Tensor zero_out = psm_polar_branch(tape.constant(Tensor(vc.shape())), ctx, {s}).value();
  EXPECT_EQ(max_abs_diff(zero_out, Tensor(zero_out.shape())), 0.0);
  for (std::size_t z = 0; z < 4; ++z) {
    std::size_t first = ctx.order.forward.size();
    for (std::size_t t = 0; t < ctx.order.forward.size(); ++t) {
      const std::size_t cell = ctx.order.forward[t];
      if (in.at(0, cell / 8, cell % 8, z) != 0.0) {
        first = t;
        break;
      }
    }
    std::size_t later_nonzero = 0;
    for (std::size_t t = 0; t < ctx.order.forward.size(); ++t) {
      const std::size_t cell = ctx.order.forward[t];
      const double v = out.at(0, cell / 8, cell % 8, z);
      if (t < first) EXPECT_EQ(v, 0.0) << "z=" << z << " t=" << t;
      if (t > first + 8 && v != 0.0) ++later_nonzero;
    }
    if (first < ctx.order.forward.size()) {
      EXPECT_GE(first, 8u);  // the innermost ring never sees the impulse
      EXPECT_GT(later_nonzero, 0u);
    }
  }
}

TEST(PsmBlock, QuarterTurnRoundTripWithMemorylessScan) {
  // Four azimuth sectors: rotating the cube by 90° shifts every polar cell by one sector.
  const auto cub = small_cube();
  auto cyl = small_cyl();
  cyl.azimuth_bins = 4;
  std::mt19937_64 rng(7);
  const Tensor vc = randn({1, 8, 8, 4}, rng);
  auto rotate = [](const Tensor& v) {  // (x, y) -> (-y, x)
    Tensor r(v.shape());
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t j = 0; j < 8; ++j)
        for (std::size_t k = 0; k < 4; ++k) r.at(0, 7 - j, i, k) = v.at(0, i, j, k);
    return r;
  };
  auto unrotate = [](const Tensor& v) {
    Tensor r(v.shape());
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t j = 0; j < 8; ++j)
        for (std::size_t k = 0; k < 4; ++k) r.at(0, i, j, k) = v.at(0, 7 - j, i, k);
    return r;
  };
  const double inf = std::numeric_limits<double>::infinity();
  const auto p = SsmParams::uniform(4, -inf, 1.3, 0.7, 0.2, 0.4, 0.1);
  const auto st = PsmLayerState::from_specs(2, 1, cub, cyl);
  const Tensor direct = psm_block(vc, st, cub, cyl, {p});
  const Tensor turned = unrotate(psm_block(rotate(vc), st, cub, cyl, {p}));
  EXPECT_LT(max_abs_diff(direct, turned), 1e-12);
  EXPECT_GT(max_abs_diff(direct, vc), 1e-3);
}

TEST(PsmBlock, GradientsMatchFiniteDifferences) {
  const auto cub = small_cube();
  auto cyl = small_cyl();
  cyl.vertical_bins = 2;
  std::mt19937_64 rng(8);
  const Tensor vc = randn({1, 8, 8, 4}, rng);
  const SsmParams p = random_params(2, rng);
  const Tensor w = randn({1, 8, 8, 4}, rng);
  const PsmContext ctx(cub, cyl);
  const auto st = PsmLayerState::from_specs(2, 1, cub, cyl);
  const auto rep = ad::grad_check(
      [&](ad::Tape& t, std::span<const ad::Var> in) {
        const SsmVars s{in[1], in[2], in[3], in[4], in[5], in[6]};
        return ad::sum(ad::mul(psm_block(in[0], st, ctx, {s, s}), t.constant(w)));
      },
      {vc, p.a, p.b, p.c, p.d, p.gate_w, p.gate_b}, 1e-5, 40);
  EXPECT_LT(rep.max_rel_error, 1e-5);
}

TEST(SsmScan, RuntimeScalesLinearly) {
  std::mt19937_64 rng(10);
  const SsmParams p = random_params(16, rng);
  auto median_time = [&](std::size_t T) {
    const Tensor x = randn({T, 16}, rng);
    std::vector<double> times;
    for (int r = 0; r < 5; ++r) {
      // Several calls per sample so scheduler noise stays small against the work.
      const auto t0 = std::chrono::steady_clock::now();
      Tensor y;
      for (int k = 0; k < 4; ++k) y = ssm_scan(x, p);
      const auto t1 = std::chrono::steady_clock::now();
      EXPECT_TRUE(std::isfinite(y[T * 16 - 1]));
      times.push_back(std::chrono::duration<double>(t1 - t0).count());
    }
    std::sort(times.begin(), times.end());
    return times[2];
  };
  median_time(4096);  // warm-up
  const double t1 = median_time(8192), t2 = median_time(16384);
  EXPECT_LE(t2 / t1, 2.5);
}

}  // namespace
}  // namespace o3n
