#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <numeric>
#include <vector>

#include "o3n/autodiff.hpp"
#include "o3n/geometry.hpp"
#include "o3n/sparse_map.hpp"
#include "o3n/tensor.hpp"

namespace o3n {

// ---------------------------------------------------------------- scan order

/// Bijection between scan positions and flat polar BEV cells (r * P + p).
struct ScanOrder {
  std::vector<std::size_t> forward;  // scan position -> cell
  std::vector<std::size_t> inverse;  // cell -> scan position
};

/// Ring-major outward spiral. Ring 0 starts at azimuth 0; each later ring
/// starts at the azimuth where the previous ring ended, so consecutive cells
/// are always polar neighbours.
inline ScanOrder spiral_order(std::size_t R, std::size_t P) {
  if (R < 1 || P < 1) throw PreconditionError("spiral_order: R and P must be >= 1");
  ScanOrder s;
  s.forward.reserve(R * P);
  std::size_t start = 0;
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t k = 0; k < P; ++k) s.forward.push_back(r * P + (start + k) % P);
    start = (start + P - 1) % P;
  }
  s.inverse.assign(R * P, 0);
  for (std::size_t t = 0; t < s.forward.size(); ++t) s.inverse[s.forward[t]] = t;
  return s;
}

/// Rows of a [T, ...] tensor reordered: out[t] = in[order[t]].
inline Tensor reorder_rows(const Tensor& x, const std::vector<std::size_t>& order) {
  if (x.rank() < 1 || x.dim(0) != order.size()) throw ShapeError("reorder_rows: leading extent mismatch");
  const std::size_t row = x.size() / order.size();
  Tensor y(x.shape());
  for (std::size_t t = 0; t < order.size(); ++t) std::copy_n(x.data() + order[t] * row, row, y.data() + t * row);
  return y;
}

// ---------------------------------------------------------------- BEV

/// [C, R, P, Z] -> [C*Z, R, P], channel index c*Z + z.
inline FeatureField bev_compress(const FeatureField& vp) {
  if (vp.rank() != 4) throw ShapeError("bev_compress expects [C, R, P, Z], got " + shape_str(vp.shape()));
  const std::size_t C = vp.dim(0), R = vp.dim(1), P = vp.dim(2), Z = vp.dim(3);
  return permute(vp, {0, 3, 1, 2}).reshaped({C * Z, R, P});
}

/// Exact inverse of bev_compress.
inline FeatureField bev_voxelize(const FeatureField& bev, std::size_t Z) {
  if (bev.rank() != 3) throw ShapeError("bev_voxelize expects [C*Z, R, P], got " + shape_str(bev.shape()));
  if (Z == 0 || bev.dim(0) % Z != 0) throw ShapeError("bev_voxelize: channel count not divisible by Z");
  const std::size_t C = bev.dim(0) / Z, R = bev.dim(1), P = bev.dim(2);
  return permute(bev.reshaped({C, Z, R, P}), {0, 2, 3, 1});
}

// ---------------------------------------------------------------- SSM

/// Diagonal gated selective scan parameters, one entry per channel.
/// Effective decay ā_t = σ(gate_w·x_t + gate_b)·σ(a).
struct SsmParams {
  Tensor a, b, c, d, gate_w, gate_b;

  static SsmParams uniform(std::size_t C, double a, double b, double c, double d, double gw, double gb) {
    return {Tensor({C}, a), Tensor({C}, b), Tensor({C}, c), Tensor({C}, d), Tensor({C}, gw), Tensor({C}, gb)};
  }
  std::size_t channels() const { return a.size(); }
};

struct SsmVars {
  ad::Var a, b, c, d, gate_w, gate_b;
};

namespace detail {

inline double squash(double a) { return ad::detail::sigmoid(a); }

struct ScanCache {
  std::vector<double> h;     // [T, C] states
  std::vector<double> gate;  // [T, C] σ(gate)
};

inline void check_ssm_shapes(const Shape& xs, std::size_t a, std::size_t b, std::size_t c, std::size_t d,
                             std::size_t gw, std::size_t gb) {
  if (xs.size() != 2 || xs[0] < 1) throw ShapeError("ssm_scan expects [T, C] with T >= 1");
  const std::size_t C = xs[1];
  if (a != C || b != C || c != C || d != C || gw != C || gb != C)
    throw ShapeError("ssm_scan: parameter extents must equal channel count " + std::to_string(C));
}

inline Tensor scan_forward(const Tensor& x, const double* a, const double* b, const double* c, const double* d,
                           const double* gw, const double* gb, ScanCache* cache) {
  if (!x.all_finite()) throw DomainError("ssm_scan: non-finite input");
  const std::size_t T = x.dim(0), C = x.dim(1);
  Tensor y({T, C});
  std::vector<double> h(C, 0.0), s(C);
  for (std::size_t ch = 0; ch < C; ++ch) s[ch] = squash(a[ch]);
  if (cache) {
    cache->h.resize(T * C);
    cache->gate.resize(T * C);
  }
  for (std::size_t t = 0; t < T; ++t) {
    const double* xt = x.data() + t * C;
    double* yt = y.data() + t * C;
    for (std::size_t ch = 0; ch < C; ++ch) {
      const double g = ad::detail::sigmoid(gw[ch] * xt[ch] + gb[ch]);
      h[ch] = g * s[ch] * h[ch] + b[ch] * xt[ch];
      yt[ch] = c[ch] * h[ch] + d[ch] * xt[ch];
      if (cache) {
        cache->h[t * C + ch] = h[ch];
        cache->gate[t * C + ch] = g;
      }
    }
  }
  return y;
}

}  // namespace detail

/// h_t = ā_t·h_{t-1} + b·x_t, y_t = c·h_t + d·x_t per channel, h_0 = 0.
/// x [T, C]. One sequential pass, O(T·C).
inline Tensor ssm_scan(const Tensor& x, const SsmParams& p) {
  detail::check_ssm_shapes(x.shape(), p.a.size(), p.b.size(), p.c.size(), p.d.size(), p.gate_w.size(),
                           p.gate_b.size());
  return detail::scan_forward(x, p.a.data(), p.b.data(), p.c.data(), p.d.data(), p.gate_w.data(), p.gate_b.data(),
                              nullptr);
}

/// Differentiable scan. The adjoint runs the recurrence in reverse:
/// dh_t = c·dy_t + ā_{t+1}·dh_{t+1}.
inline ad::Var ssm_scan(const ad::Var& x, const SsmVars& p) {
  detail::check_ssm_shapes(x.shape(), p.a.size(), p.b.size(), p.c.size(), p.d.size(), p.gate_w.size(),
                           p.gate_b.size());
  auto cache = std::make_shared<detail::ScanCache>();
  Tensor y = detail::scan_forward(x.value(), p.a.value().data(), p.b.value().data(), p.c.value().data(),
                                  p.d.value().data(), p.gate_w.value().data(), p.gate_b.value().data(), cache.get());
  const std::vector<ad::Var> inputs{x, p.a, p.b, p.c, p.d, p.gate_w, p.gate_b};
  return x.tape()->record(std::move(y), inputs, [x, p, cache](ad::Tape& t, std::size_t self) {
    const std::size_t T = x.shape()[0], C = x.shape()[1];
    const Tensor& g = t.grad_buffer(self);
    const double* xv = t.value(x.id()).data();
    const double* a = t.value(p.a.id()).data();
    const double* b = t.value(p.b.id()).data();
    const double* c = t.value(p.c.id()).data();
    const double* d = t.value(p.d.id()).data();
    const double* gw = t.value(p.gate_w.id()).data();
    double* dx = t.accum(x);
    double* da = t.accum(p.a);
    double* db = t.accum(p.b);
    double* dc = t.accum(p.c);
    double* dd = t.accum(p.d);
    double* dgw = t.accum(p.gate_w);
    double* dgb = t.accum(p.gate_b);
    for (std::size_t ch = 0; ch < C; ++ch) {
      const double s = detail::squash(a[ch]);
      double dh_next = 0.0, abar_next = 0.0;
      for (std::size_t t_ = T; t_-- > 0;) {
        const std::size_t i = t_ * C + ch;
        const double dy = g[i];
        const double dh = c[ch] * dy + abar_next * dh_next;
        const double hprev = t_ ? cache->h[i - C] : 0.0;
        const double gate = cache->gate[i];
        const double dabar = dh * hprev;
        const double dpre = dabar * s * gate * (1.0 - gate);
        if (dx) dx[i] += d[ch] * dy + b[ch] * dh + dpre * gw[ch];
        if (dc) dc[ch] += dy * cache->h[i];
        if (dd) dd[ch] += dy * xv[i];
        if (db) db[ch] += dh * xv[i];
        if (dgw) dgw[ch] += dpre * xv[i];
        if (dgb) dgb[ch] += dpre;
        if (da) da[ch] += dabar * gate * s * (1.0 - s);
        dh_next = dh;
        abar_next = gate * s;
      }
    }
  });
}

// ---------------------------------------------------------------- fusion

struct PsmLayerState {
  std::size_t layer_index = 1;
  std::array<std::size_t, 3> cubic_dims{};
  std::array<std::size_t, 3> polar_dims{};
  std::size_t channels = 0;

  static PsmLayerState from_specs(std::size_t i, std::size_t C, const CubicGridSpec& cub,
                                  const CylindricalGridSpec& cyl) {
    return {i, cub.dims, {cyl.radial_bins, cyl.azimuth_bins, cyl.vertical_bins}, C};
  }
};

/// Precomputed resampling maps and scan permutations for one pair of grids.
struct PsmContext {
  CubicGridSpec cub;
  CylindricalGridSpec cyl;
  ScanOrder order;
  std::shared_ptr<const SparseMap> to_polar;  // [C, HWD] -> [C, RPZ]
  std::shared_ptr<const SparseMap> to_cube;   // [C, RPZ] -> [C, HWD]

  PsmContext(const CubicGridSpec& cube, const CylindricalGridSpec& cylinder)
      : cub(cube),
        cyl(cylinder),
        order(spiral_order(cylinder.radial_bins, cylinder.azimuth_bins)),
        to_polar(std::make_shared<const SparseMap>(cylinder_from_cube_map(cube, cylinder))),
        to_cube(std::make_shared<const SparseMap>(cube_from_cylinder_map(cylinder, cube))) {}

  /// Flat gather index taking a [C, R, P, Z] field to the [T, C*Z] scan
  /// sequence (BEV compression followed by spiral reordering), and back.
  std::shared_ptr<const std::vector<std::size_t>> to_sequence(std::size_t C) const {
    const std::size_t R = cyl.radial_bins, P = cyl.azimuth_bins, Z = cyl.vertical_bins;
    Tensor id({C, R, P, Z});
    std::iota(id.buffer().begin(), id.buffer().end(), 0.0);
    const Tensor seq = reorder_rows(permute(bev_compress(id).reshaped({C * Z, R * P}), {1, 0}), order.forward);
    auto idx = std::make_shared<std::vector<std::size_t>>(seq.size());
    for (std::size_t i = 0; i < seq.size(); ++i) (*idx)[i] = static_cast<std::size_t>(seq[i]);
    return idx;
  }
  std::shared_ptr<const std::vector<std::size_t>> from_sequence(std::size_t C) const {
    const auto fwd = to_sequence(C);
    auto inv = std::make_shared<std::vector<std::size_t>>(fwd->size());
    for (std::size_t i = 0; i < fwd->size(); ++i) (*inv)[(*fwd)[i]] = i;
    return inv;
  }
};

namespace detail {
inline void check_fuse_shapes(const Shape& vc, const Shape& vp, const PsmLayerState& st) {
  if (st.layer_index < 1) throw PreconditionError("psm: layer index starts at 1");
  const Shape want_c{st.channels, st.cubic_dims[0], st.cubic_dims[1], st.cubic_dims[2]};
  const Shape want_p{st.channels, st.polar_dims[0], st.polar_dims[1], st.polar_dims[2]};
  if (vc != want_c || vp != want_p)
    throw ShapeError("psm_fuse: got " + shape_str(vc) + " / " + shape_str(vp) + ", layer expects " +
                     shape_str(want_c) + " / " + shape_str(want_p));
}
inline void check_specs(const PsmLayerState& st, const CubicGridSpec& cub, const CylindricalGridSpec& cyl) {
  if (st.cubic_dims != cub.dims || st.polar_dims[0] != cyl.radial_bins || st.polar_dims[1] != cyl.azimuth_bins ||
      st.polar_dims[2] != cyl.vertical_bins)
    throw ShapeError("psm: layer state disagrees with grid specs");
}
}  // namespace detail

/// V_c + Φ(V_p) for layer index > 1, V_c unchanged for the first layer.
inline FeatureField psm_fuse(const FeatureField& vc, const FeatureField& vp, const PsmLayerState& st,
                             const CylindricalGridSpec& cyl, const CubicGridSpec& cub) {
  detail::check_fuse_shapes(vc.shape(), vp.shape(), st);
  detail::check_specs(st, cub, cyl);
  if (st.layer_index == 1) return vc;
  // Direct lerp-form sampling keeps a constant polar branch exact.
  FeatureField out = vc;
  const std::size_t C = st.channels, N = cub.count();
  std::size_t n = 0;
  for (const Vec3& c : voxel_centers(cub)) {
    const CylCoord cc = cart_to_cyl(c, cyl);
    if (!cc.out_of_range) {
      const auto v = sample_trilinear(vp, {cc.r, cc.p, cc.z}, {Boundary::Clamp, Boundary::Wrap, Boundary::Clamp});
      for (std::size_t ch = 0; ch < C; ++ch) out[ch * N + n] += v[ch];
    }
    ++n;
  }
  return out;
}

inline ad::Var psm_fuse(const ad::Var& vc, const ad::Var& vp, const PsmLayerState& st, const PsmContext& ctx) {
  detail::check_fuse_shapes(vc.shape(), vp.shape(), st);
  detail::check_specs(st, ctx.cub, ctx.cyl);
  if (st.layer_index == 1) return vc;
  return ad::add(vc, ad::sparse_apply(vp, ctx.to_cube, vc.shape()));
}

/// Polar branch of a block: resample into the cylinder, compress to BEV,
/// scan along the spiral (stacked scans), and undo the layout.
/// Returns the [C, R, P, Z] field fed to the fusion.
inline ad::Var psm_polar_branch(const ad::Var& vc, const PsmContext& ctx, const std::vector<SsmVars>& scans) {
  const std::size_t C = vc.shape()[0];
  const std::size_t R = ctx.cyl.radial_bins, P = ctx.cyl.azimuth_bins, Z = ctx.cyl.vertical_bins;
  ad::Var vp = ad::sparse_apply(vc, ctx.to_polar, {C, R, P, Z});
  ad::Var seq = ad::gather(vp, ctx.to_sequence(C), {R * P, C * Z});
  for (const SsmVars& s : scans) seq = ssm_scan(seq, s);
  return ad::gather(seq, ctx.from_sequence(C), {C, R, P, Z});
}

inline ad::Var psm_block(const ad::Var& vc, const PsmLayerState& st, const PsmContext& ctx,
                         const std::vector<SsmVars>& scans) {
  if (vc.shape().size() != 4) throw ShapeError("psm_block expects [C, H, W, D]");
  if (st.layer_index == 1) return vc;
  return psm_fuse(vc, psm_polar_branch(vc, ctx, scans), st, ctx);
}

/// Plain-tensor convenience wrapper.
inline FeatureField psm_block(const FeatureField& vc, const PsmLayerState& st, const CubicGridSpec& cub,
                              const CylindricalGridSpec& cyl, const std::vector<SsmParams>& scans) {
  detail::check_specs(st, cub, cyl);
  ad::Tape tape;
  const ad::Var x = tape.constant(vc);
  std::vector<SsmVars> vars;
  for (const SsmParams& p : scans)
    vars.push_back({tape.constant(p.a), tape.constant(p.b), tape.constant(p.c), tape.constant(p.d),
                    tape.constant(p.gate_w), tape.constant(p.gate_b)});
  return psm_block(x, st, PsmContext(cub, cyl), vars).value();
}

}  // namespace o3n
