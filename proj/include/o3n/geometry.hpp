#pragma once

#include <Eigen/Core>
#include <array>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <optional>
#include <vector>

#include "o3n/sparse_map.hpp"
#include "o3n/tensor.hpp"

namespace o3n {

using Vec3 = Eigen::Vector3d;

inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

/// Equirectangular panorama camera. Gravity aligned; only yaw is modelled.
/// Column u grows with azimuth, the image centre column looks along yaw,
/// row 0 is the zenith.
struct ErpCamera {
  std::size_t image_width = 512;
  std::size_t image_height = 256;
  Vec3 position = Vec3::Zero();
  double yaw = 0.0;

  void validate() const {
    if (image_width < 2 || image_height < 2) throw PreconditionError("ERP image must be at least 2x2");
    if (!position.allFinite() || !std::isfinite(yaw)) throw PreconditionError("ERP camera pose is not finite");
  }
};

struct PixelCoord {
  double u = 0.0;
  double v = 0.0;
};

/// Wraps x into [0, period).
inline double wrap_mod(double x, double period) {
  double r = std::fmod(x, period);
  if (r < 0.0) r += period;
  if (r >= period) r = 0.0;
  return r;
}

/// Signed shortest distance a - b on a circle of the given period.
inline double wrap_delta(double a, double b, double period) {
  double d = std::fmod(a - b, period);
  if (d > period / 2) d -= period;
  if (d < -period / 2) d += period;
  return d;
}

inline PixelCoord world_to_erp(const Vec3& point, const ErpCamera& cam) {
  const Vec3 d = point - cam.position;
  if (d.norm() == 0.0) throw DomainError("world_to_erp: point coincides with the camera centre");
  const double cy = std::cos(cam.yaw), sy = std::sin(cam.yaw);
  const double x = cy * d.x() + sy * d.y();
  const double y = -sy * d.x() + cy * d.y();
  const double z = d.z();
  const double theta = std::atan2(y, x);
  const double phi = std::atan2(z, std::hypot(x, y));
  const double w = static_cast<double>(cam.image_width);
  const double h = static_cast<double>(cam.image_height);
  return {wrap_mod((theta / kTwoPi + 0.5) * w, w), (0.5 - phi / std::numbers::pi) * h};
}

/// Unit world-frame direction of the ray through continuous pixel (u, v).
inline Vec3 erp_to_ray(double u, double v, const ErpCamera& cam) {
  const double theta = (u / static_cast<double>(cam.image_width) - 0.5) * kTwoPi;
  const double phi = (0.5 - v / static_cast<double>(cam.image_height)) * std::numbers::pi;
  const double x = std::cos(phi) * std::cos(theta);
  const double y = std::cos(phi) * std::sin(theta);
  const double z = std::sin(phi);
  const double cy = std::cos(cam.yaw), sy = std::sin(cam.yaw);
  return {cy * x - sy * y, sy * x + cy * y, z};
}

/// Axis-aligned metric voxel grid. Axis 0 (H) runs along x, axis 1 (W) along
/// y, axis 2 (D) along z; flat index is row-major over (H, W, D).
struct CubicGridSpec {
  Vec3 origin{-12.8, -12.8, -1.2};
  double voxel_size = 0.4;
  std::array<std::size_t, 3> dims{64, 64, 8};

  void validate() const {
    if (!(voxel_size > 0.0)) throw PreconditionError("voxel_size must be positive");
    for (auto n : dims)
      if (n < 1) throw PreconditionError("grid dims must be >= 1");
  }
  std::size_t count() const { return dims[0] * dims[1] * dims[2]; }
  std::size_t flat(std::size_t i, std::size_t j, std::size_t k) const { return (i * dims[1] + j) * dims[2] + k; }
  Vec3 center(std::size_t i, std::size_t j, std::size_t k) const {
    return origin + voxel_size * Vec3(i + 0.5, j + 0.5, k + 0.5);
  }
  Vec3 upper() const { return origin + voxel_size * Vec3(dims[0], dims[1], dims[2]); }
  bool contains(const Vec3& p) const {
    const Vec3 hi = upper();
    return (p.array() >= origin.array()).all() && (p.array() <= hi.array()).all();
  }
  /// Continuous cell coordinates; integer values hit cell centres.
  std::array<double, 3> cell_coords(const Vec3& p) const {
    const Vec3 c = (p - origin) / voxel_size;
    return {c.x() - 0.5, c.y() - 0.5, c.z() - 0.5};
  }
};

inline std::vector<Vec3> voxel_centers(const CubicGridSpec& spec) {
  spec.validate();
  std::vector<Vec3> out;
  out.reserve(spec.count());
  for (std::size_t i = 0; i < spec.dims[0]; ++i)
    for (std::size_t j = 0; j < spec.dims[1]; ++j)
      for (std::size_t k = 0; k < spec.dims[2]; ++k) out.push_back(spec.center(i, j, k));
  return out;
}

/// Camera-centric cylinder: R radial rings out to r_max, P equal azimuth
/// sectors covering [0, 2π), Z height slabs over [z_min, z_max].
/// Flat index is row-major over (R, P, Z).
struct CylindricalGridSpec {
  std::size_t radial_bins = 32;
  std::size_t azimuth_bins = 90;
  std::size_t vertical_bins = 8;
  double r_max = 12.8;
  double z_min = -1.2;
  double z_max = 2.0;
  double center_x = 0.0;
  double center_y = 0.0;

  void validate() const {
    if (radial_bins < 1 || azimuth_bins < 1 || vertical_bins < 1)
      throw PreconditionError("cylindrical bins must be >= 1");
    if (!(r_max > 0.0)) throw PreconditionError("r_max must be positive");
    if (!(z_max > z_min)) throw PreconditionError("z range is empty");
  }
  std::size_t count() const { return radial_bins * azimuth_bins * vertical_bins; }
  std::size_t flat(std::size_t r, std::size_t p, std::size_t z) const {
    return (r * azimuth_bins + p) * vertical_bins + z;
  }
  Vec3 cell_center(std::size_t r, std::size_t p, std::size_t z) const {
    const double rad = (r + 0.5) / radial_bins * r_max;
    const double az = (p + 0.5) / azimuth_bins * kTwoPi;
    const double h = z_min + (z + 0.5) / vertical_bins * (z_max - z_min);
    return {center_x + rad * std::cos(az), center_y + rad * std::sin(az), h};
  }
};

struct CylCoord {
  double r = 0.0;
  double p = 0.0;
  double z = 0.0;
  // Outside the cylinder: radius beyond r_max or height outside [z_min, z_max].
  bool out_of_range = false;
};

inline CylCoord cart_to_cyl(const Vec3& point, const CylindricalGridSpec& spec) {
  const double x = point.x() - spec.center_x;
  const double y = point.y() - spec.center_y;
  const double radius = std::hypot(x, y);
  const double az = wrap_mod(std::atan2(y, x), kTwoPi);
  const double P = static_cast<double>(spec.azimuth_bins);
  CylCoord c;
  c.r = radius / spec.r_max * static_cast<double>(spec.radial_bins) - 0.5;
  c.p = az / kTwoPi * P - 0.5;  // in [-0.5, P - 0.5)
  c.z = (point.z() - spec.z_min) / (spec.z_max - spec.z_min) * static_cast<double>(spec.vertical_bins) - 0.5;
  c.out_of_range = radius > spec.r_max || point.z() < spec.z_min || point.z() > spec.z_max;
  return c;
}

enum class Boundary { Zero, Wrap, Clamp };

struct Tap {
  std::size_t index = 0;
  double weight = 0.0;
};

struct Taps {
  std::array<Tap, 8> items{};
  std::size_t count = 0;
};

/// Trilinear interpolation stencil at continuous cell coordinates over a
/// row-major grid of the given dims. Zero-weight and zero-padded corners are
/// omitted.
inline Taps trilinear_taps(const std::array<double, 3>& coords, const std::array<std::size_t, 3>& dims,
                           const std::array<Boundary, 3>& modes) {
  std::array<std::array<long, 2>, 3> idx{};
  std::array<std::array<double, 2>, 3> w{};
  std::array<std::array<bool, 2>, 3> ok{};
  for (int a = 0; a < 3; ++a) {
    const double c = coords[a];
    const double f0 = std::floor(c);
    const double frac = c - f0;
    const long n = static_cast<long>(dims[a]);
    const long i0 = static_cast<long>(f0);
    for (int s = 0; s < 2; ++s) {
      long i = i0 + s;
      bool valid = true;
      switch (modes[a]) {
        case Boundary::Zero: valid = i >= 0 && i < n; break;
        case Boundary::Wrap: i = ((i % n) + n) % n; break;
        case Boundary::Clamp: i = std::clamp(i, 0L, n - 1); break;
      }
      idx[a][s] = i;
      ok[a][s] = valid;
    }
    w[a][0] = 1.0 - frac;
    w[a][1] = frac;
  }
  Taps t;
  for (int s0 = 0; s0 < 2; ++s0)
    for (int s1 = 0; s1 < 2; ++s1)
      for (int s2 = 0; s2 < 2; ++s2) {
        if (!(ok[0][s0] && ok[1][s1] && ok[2][s2])) continue;
        const double wt = w[0][s0] * w[1][s1] * w[2][s2];
        if (wt == 0.0) continue;
        const std::size_t flat =
            (static_cast<std::size_t>(idx[0][s0]) * dims[1] + static_cast<std::size_t>(idx[1][s1])) * dims[2] +
            static_cast<std::size_t>(idx[2][s2]);
        // Clamped/wrapped corners may coincide; merge them.
        bool merged = false;
        for (std::size_t e = 0; e < t.count; ++e)
          if (t.items[e].index == flat) {
            t.items[e].weight += wt;
            merged = true;
            break;
          }
        if (!merged) t.items[t.count++] = {flat, wt};
      }
  return t;
}

/// Samples a [C, S0, S1, S2] field at continuous cell coordinates.
/// Interpolates in lerp form a + f (b - a), so constant fields are
/// reproduced exactly.
inline std::vector<double> sample_trilinear(const FeatureField& field, const std::array<double, 3>& coords,
                                            const std::array<Boundary, 3>& modes) {
  if (field.rank() != 4) throw ShapeError("sample_trilinear expects a [C, S0, S1, S2] field");
  const std::array<std::size_t, 3> dims{field.dim(1), field.dim(2), field.dim(3)};
  const std::size_t cells = dims[0] * dims[1] * dims[2];
  std::array<std::array<long, 2>, 3> idx{};
  std::array<double, 3> frac{};
  for (int a = 0; a < 3; ++a) {
    const double f0 = std::floor(coords[a]);
    frac[a] = coords[a] - f0;
    const long n = static_cast<long>(dims[a]);
    for (int s = 0; s < 2; ++s) {
      long i = static_cast<long>(f0) + s;
      switch (modes[a]) {
        case Boundary::Zero: if (i < 0 || i >= n) i = -1; break;
        case Boundary::Wrap: i = ((i % n) + n) % n; break;
        case Boundary::Clamp: i = std::clamp(i, 0L, n - 1); break;
      }
      idx[a][s] = i;
    }
  }
  auto lerp = [](double a, double b, double f) { return a + f * (b - a); };
  std::vector<double> out(field.dim(0), 0.0);
  for (std::size_t c = 0; c < out.size(); ++c) {
    const double* base = field.data() + c * cells;
    auto at = [&](int s0, int s1, int s2) {
      if (idx[0][s0] < 0 || idx[1][s1] < 0 || idx[2][s2] < 0) return 0.0;
      return base[(static_cast<std::size_t>(idx[0][s0]) * dims[1] + static_cast<std::size_t>(idx[1][s1])) * dims[2] +
                  static_cast<std::size_t>(idx[2][s2])];
    };
    std::array<double, 4> e{};
    for (int s0 = 0; s0 < 2; ++s0)
      for (int s1 = 0; s1 < 2; ++s1) e[s0 * 2 + s1] = lerp(at(s0, s1, 0), at(s0, s1, 1), frac[2]);
    out[c] = lerp(lerp(e[0], e[1], frac[1]), lerp(e[2], e[3], frac[1]), frac[0]);
  }
  return out;
}

/// Periodic axes interpolate across the seam; all other axes zero-pad.
inline std::vector<double> sample_trilinear(const FeatureField& field, const std::array<double, 3>& coords,
                                            const std::array<bool, 3>& wrap_axes) {
  std::array<Boundary, 3> modes{};
  for (int a = 0; a < 3; ++a) modes[a] = wrap_axes[a] ? Boundary::Wrap : Boundary::Zero;
  return sample_trilinear(field, coords, modes);
}

/// Line-of-sight lifting map: each voxel centre reads the bilinear sample of
/// a [C, feat_h, feat_w] panorama feature map at its ERP projection.
/// Horizontal sampling wraps; vertical sampling clamps to the edge rows.
inline SparseMap flosp_map(const CubicGridSpec& spec, const ErpCamera& cam, std::size_t feat_h,
                           std::size_t feat_w) {
  spec.validate();
  cam.validate();
  const double su = static_cast<double>(feat_w) / static_cast<double>(cam.image_width);
  const double sv = static_cast<double>(feat_h) / static_cast<double>(cam.image_height);
  SparseMap m(feat_h * feat_w, spec.count());
  for (const Vec3& c : voxel_centers(spec)) {
    if ((c - cam.position).norm() > 0.0) {
      const PixelCoord px = world_to_erp(c, cam);
      const Taps taps = trilinear_taps({px.v * sv - 0.5, px.u * su - 0.5, 0.0}, {feat_h, feat_w, 1},
                                       {Boundary::Clamp, Boundary::Wrap, Boundary::Clamp});
      for (std::size_t e = 0; e < taps.count; ++e) m.push(taps.items[e].index, taps.items[e].weight);
    }
    m.end_row();
  }
  return m;
}

/// Line-of-sight lifting of a [C, Hf, Wf] panorama feature map into a
/// [C, H, W, D] voxel volume (same sampling rule as flosp_map).
inline FeatureField flosp_lift(const FeatureField& features2d, const CubicGridSpec& spec, const ErpCamera& cam) {
  if (features2d.rank() != 3) throw ShapeError("flosp_lift expects a [C, H, W] feature map");
  spec.validate();
  cam.validate();
  const std::size_t C = features2d.dim(0), fh = features2d.dim(1), fw = features2d.dim(2);
  const FeatureField as4 = features2d.reshaped({C, fh, fw, 1});
  const double su = static_cast<double>(fw) / static_cast<double>(cam.image_width);
  const double sv = static_cast<double>(fh) / static_cast<double>(cam.image_height);
  FeatureField out({C, spec.dims[0], spec.dims[1], spec.dims[2]});
  const std::size_t N = spec.count();
  std::size_t n = 0;
  for (const Vec3& c : voxel_centers(spec)) {
    if ((c - cam.position).norm() > 0.0) {
      const PixelCoord px = world_to_erp(c, cam);
      const auto v = sample_trilinear(as4, {px.v * sv - 0.5, px.u * su - 0.5, 0.0},
                                      std::array{Boundary::Clamp, Boundary::Wrap, Boundary::Clamp});
      for (std::size_t ch = 0; ch < C; ++ch) out[ch * N + n] = v[ch];
    }
    ++n;
  }
  return out;
}

/// Resampling of a [C, H, W, D] cubic field at every cylindrical cell
/// centre. Cells outside the cube's metric extent read zero; inside, the
/// stencil clamps to the edge cells.
inline SparseMap cylinder_from_cube_map(const CubicGridSpec& cub, const CylindricalGridSpec& cyl) {
  cub.validate();
  cyl.validate();
  SparseMap m(cub.count(), cyl.count());
  for (std::size_t r = 0; r < cyl.radial_bins; ++r)
    for (std::size_t p = 0; p < cyl.azimuth_bins; ++p)
      for (std::size_t z = 0; z < cyl.vertical_bins; ++z) {
        const Vec3 c = cyl.cell_center(r, p, z);
        if (cub.contains(c)) {
          const Taps taps =
              trilinear_taps(cub.cell_coords(c), cub.dims, {Boundary::Clamp, Boundary::Clamp, Boundary::Clamp});
          for (std::size_t e = 0; e < taps.count; ++e) m.push(taps.items[e].index, taps.items[e].weight);
        }
        m.end_row();
      }
  return m;
}

/// Resampling of a [C, R, P, Z] cylindrical field at every cubic voxel
/// centre (the ρ / Φ pair of the polar fusion). Azimuth wraps; voxels
/// outside the cylinder read zero; inside, radius and height clamp.
inline SparseMap cube_from_cylinder_map(const CylindricalGridSpec& cyl, const CubicGridSpec& cub) {
  cub.validate();
  cyl.validate();
  SparseMap m(cyl.count(), cub.count());
  const std::array<std::size_t, 3> dims{cyl.radial_bins, cyl.azimuth_bins, cyl.vertical_bins};
  for (const Vec3& c : voxel_centers(cub)) {
    const CylCoord cc = cart_to_cyl(c, cyl);
    if (!cc.out_of_range) {
      const Taps taps = trilinear_taps({cc.r, cc.p, cc.z}, dims, {Boundary::Clamp, Boundary::Wrap, Boundary::Clamp});
      for (std::size_t e = 0; e < taps.count; ++e) m.push(taps.items[e].index, taps.items[e].weight);
    }
    m.end_row();
  }
  return m;
}

struct RingDensity {
  double radius_min = 0.0;
  double radius_max = 0.0;
  double mean_spacing = 0.0;  // ERP pixels
  std::size_t pairs = 0;
};

/// Mean ERP pixel distance between the projections of horizontally adjacent
/// voxel centres, bucketed into rings of one voxel width by the ground
/// distance of the pair midpoint from the camera. Only rings lying entirely
/// inside the grid footprint are reported; the partial corner rings hold a
/// biased (diagonal-only) subset of pairs.
inline std::vector<RingDensity> projection_density(const CubicGridSpec& spec, const ErpCamera& cam) {
  spec.validate();
  cam.validate();
  if (!spec.contains(cam.position)) throw PreconditionError("projection_density: camera outside the grid");
  const double w = static_cast<double>(cam.image_width);
  std::vector<double> sum;
  std::vector<std::size_t> cnt;
  auto add_pair = [&](const Vec3& a, const Vec3& b) {
    if ((a - cam.position).norm() == 0.0 || (b - cam.position).norm() == 0.0) return;
    const PixelCoord pa = world_to_erp(a, cam);
    const PixelCoord pb = world_to_erp(b, cam);
    const double du = wrap_delta(pa.u, pb.u, w);
    const double dv = pa.v - pb.v;
    const Vec3 mid = 0.5 * (a + b) - cam.position;
    const auto ring = static_cast<std::size_t>(std::hypot(mid.x(), mid.y()) / spec.voxel_size);
    if (ring >= sum.size()) {
      sum.resize(ring + 1, 0.0);
      cnt.resize(ring + 1, 0);
    }
    sum[ring] += std::hypot(du, dv);
    ++cnt[ring];
  };
  for (std::size_t i = 0; i < spec.dims[0]; ++i)
    for (std::size_t j = 0; j < spec.dims[1]; ++j)
      for (std::size_t k = 0; k < spec.dims[2]; ++k) {
        if (i + 1 < spec.dims[0]) add_pair(spec.center(i, j, k), spec.center(i + 1, j, k));
        if (j + 1 < spec.dims[1]) add_pair(spec.center(i, j, k), spec.center(i, j + 1, k));
      }
  const Vec3 hi = spec.upper();
  const double inscribed = std::min({cam.position.x() - spec.origin.x(), hi.x() - cam.position.x(),
                                     cam.position.y() - spec.origin.y(), hi.y() - cam.position.y()});
  std::vector<RingDensity> out;
  for (std::size_t r = 0; r < sum.size(); ++r) {
    if (cnt[r] == 0 || (r + 1) * spec.voxel_size > inscribed + 1e-9) continue;
    out.push_back({r * spec.voxel_size, (r + 1) * spec.voxel_size, sum[r] / static_cast<double>(cnt[r]), cnt[r]});
  }
  return out;
}

}  // namespace o3n
