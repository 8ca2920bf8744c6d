#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "o3n/autodiff.hpp"
#include "o3n/geometry.hpp"
#include "o3n/nma.hpp"
#include "o3n/oca.hpp"
#include "o3n/psm.hpp"
#include "o3n/synth.hpp"

namespace o3n {

struct ModelConfig {
  CubicGridSpec grid;
  ErpCamera camera;
  CylindricalGridSpec cylinder;
  ClassCatalog catalog = ClassCatalog::standard();

  std::size_t enc_hidden = 16;
  std::size_t enc_channels = 16;
  std::size_t dec_channels = 16;
  std::vector<std::size_t> psm_depths{2, 4};  // stacked scans for decoder stages 2, 3, ...
  std::size_t distill_hidden = 64;
  std::size_t distill_dim = 512;
  std::size_t cost_dim = 128;
  std::size_t text_proj = 16;
  std::size_t guide_proj = 16;
  std::size_t key_dim = 16;
  std::size_t sectors = 8;

  double learning_rate = 0.01;
  double tau = 0.1;
  double ema_alpha = 0.9;
  nma::WalkConfig walk;
  bool use_psm = true;
  bool use_oca = true;
  bool use_nma = true;
  std::uint64_t seed = 0;

  std::size_t base_count() const { return catalog.ids(true).size(); }
  std::size_t novel_count() const { return catalog.ids(false).size(); }
  std::size_t head_classes() const { return base_count() + 2; }
  int unknown_label() const { return static_cast<int>(base_count()) + 1; }
  std::size_t stages() const { return psm_depths.size() + 1; }
  std::array<std::size_t, 2> feature_dims() const {
    auto half = [](std::size_t n) { return (n + 1) / 2; };
    return {half(half(camera.image_height)), half(half(camera.image_width))};
  }
  OcaDims oca_dims() const { return {distill_dim, cost_dim, text_proj, dec_channels, guide_proj, key_dim}; }

  void validate() const {
    grid.validate();
    camera.validate();
    cylinder.validate();
    catalog.validate();
    walk.validate();
    if (base_count() < 1 || novel_count() < 1) throw ConfigError("need at least one base and one novel class");
    for (std::size_t v : {enc_hidden, enc_channels, dec_channels, distill_hidden, distill_dim, cost_dim, text_proj,
                          guide_proj, key_dim, sectors})
      if (v < 1) throw ConfigError("model widths and sector count must be positive");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning rate must be >= 0");
    if (!(tau > 0.0)) throw ConfigError("tau must be positive");
    if (!(ema_alpha >= 0.0 && ema_alpha <= 1.0)) throw ConfigError("ema alpha must lie in [0, 1]");
    if (!grid.contains(camera.position)) throw ConfigError("camera must lie inside the grid");
  }
};

// ---------------------------------------------------------------- parameters

/// Named trainable tensors in a stable order.
class Parameters {
 public:
  void add(std::string name, Tensor t) {
    if (index_.count(name)) throw PreconditionError("duplicate parameter " + name);
    index_[name] = entries_.size();
    entries_.emplace_back(std::move(name), std::move(t));
  }
  Tensor& operator[](const std::string& n) { return entries_[lookup(n)].second; }
  const Tensor& operator[](const std::string& n) const { return entries_[lookup(n)].second; }
  bool contains(const std::string& n) const { return index_.count(n) > 0; }
  std::size_t size() const { return entries_.size(); }
  auto& entries() { return entries_; }
  const auto& entries() const { return entries_; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.second.size();
    return n;
  }
  bool all_finite() const {
    for (const auto& e : entries_)
      for (double v : e.second.buffer())
        if (!std::isfinite(v)) return false;
    return true;
  }
  bool operator==(const Parameters& o) const { return entries_ == o.entries_; }

 private:
  std::size_t lookup(const std::string& n) const {
    const auto it = index_.find(n);
    if (it == index_.end()) throw PreconditionError("unknown parameter " + n);
    return it->second;
  }
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::map<std::string, std::size_t> index_;
};

inline std::string psm_param(std::size_t stage, std::size_t scan, const char* field) {
  return "psm.s" + std::to_string(stage) + ".scan" + std::to_string(scan) + "." + field;
}

inline Parameters init_parameters(const ModelConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed ^ 0x5eedull);
  auto gauss = [&](Shape s, std::size_t fan_in, double gain = 1.0) {
    std::normal_distribution<double> n(0.0, gain / std::sqrt(static_cast<double>(fan_in)));
    Tensor t(std::move(s));
    for (double& v : t.buffer()) v = n(rng);
    return t;
  };
  const std::size_t eh = cfg.enc_hidden, ec = cfg.enc_channels, dc = cfg.dec_channels;
  const std::size_t dh = cfg.distill_hidden, E = cfg.distill_dim, K = cfg.head_classes();
  const std::size_t cz = dc * cfg.cylinder.vertical_bins;
  Parameters p;
  p.add("enc1.w", gauss({eh, 3, 3, 3}, 27));
  p.add("enc1.b", Tensor({eh}));
  p.add("enc2.w", gauss({ec, eh, 3, 3}, 9 * eh));
  p.add("enc2.b", Tensor({ec}));
  p.add("dec.in.w", gauss({dc, ec + 2, 3, 3, 3}, 27 * (ec + 2)));
  p.add("dec.in.b", Tensor({dc}));
  for (std::size_t s = 1; s <= cfg.stages(); ++s) {
    p.add("dec.s" + std::to_string(s) + ".w", gauss({dc, dc, 3, 3, 3}, 27 * dc, 0.5));
    p.add("dec.s" + std::to_string(s) + ".b", Tensor({dc}));
    if (s == 1) continue;
    for (std::size_t j = 0; j < cfg.psm_depths[s - 2]; ++j) {
      p.add(psm_param(s, j, "a"), Tensor({cz}, 0.0));
      p.add(psm_param(s, j, "b"), Tensor({cz}, 0.5));
      p.add(psm_param(s, j, "c"), gauss({cz}, 1, 0.1));
      p.add(psm_param(s, j, "d"), Tensor({cz}, j + 1 < cfg.psm_depths[s - 2] ? 1.0 : 0.0));
      p.add(psm_param(s, j, "gate_w"), Tensor({cz}, 0.0));
      p.add(psm_param(s, j, "gate_b"), Tensor({cz}, 2.0));
    }
  }
  p.add("occ.w", gauss({dc, K}, dc));
  p.add("occ.b", Tensor({K}));
  p.add("distill.1.w", gauss({dc, dh}, dc));
  p.add("distill.1.b", Tensor({dh}));
  p.add("distill.2.w", gauss({dh, dh}, dh));
  p.add("distill.2.b", Tensor({dh}));
  p.add("distill.3.w", gauss({dh, E}, dh));
  p.add("distill.3.b", Tensor({E}));
  p.add("distill.4.w", gauss({E, E}, E));
  p.add("distill.4.b", Tensor({E}));
  OcaParams oca = init_oca(cfg.oca_dims(), rng);
  oca.for_each([&](const std::string& n, Tensor& t) { p.add("oca." + n, std::move(t)); });
  for (auto& e : p.entries()) round_to_float(e.second);
  return p;
}

/// Parameters recorded on a tape, addressable by name.
struct BoundParams {
  std::vector<ad::Var> vars;
  const Parameters* source = nullptr;

  const ad::Var& operator[](const std::string& n) const {
    const auto& es = source->entries();
    for (std::size_t i = 0; i < es.size(); ++i)
      if (es[i].first == n) return vars[i];
    throw PreconditionError("unknown parameter " + n);
  }
  OcaVars oca() const {
    OcaVars v;
    v.for_each([&](const std::string& n, ad::Var& x) { x = (*this)["oca." + n]; });
    return v;
  }
  std::vector<SsmVars> scans(std::size_t stage, std::size_t depth) const {
    std::vector<SsmVars> out;
    for (std::size_t j = 0; j < depth; ++j)
      out.push_back({(*this)[psm_param(stage, j, "a")], (*this)[psm_param(stage, j, "b")],
                     (*this)[psm_param(stage, j, "c")], (*this)[psm_param(stage, j, "d")],
                     (*this)[psm_param(stage, j, "gate_w")], (*this)[psm_param(stage, j, "gate_b")]});
    return out;
  }
};

inline BoundParams bind(ad::Tape& t, const Parameters& p, bool trainable) {
  BoundParams b;
  b.source = &p;
  for (const auto& e : p.entries()) b.vars.push_back(trainable ? t.variable(e.second) : t.constant(e.second));
  return b;
}

// ---------------------------------------------------------------- context

/// Everything fixed by the configuration: resampling maps, positional
/// channels, azimuth sectors.
struct ModelContext {
  ModelConfig cfg;
  std::optional<PsmContext> psm;
  std::shared_ptr<const SparseMap> lift;   // [C, fh*fw] -> [C, N]
  std::shared_ptr<const SparseMap> pixel;  // [E, Himg*Wimg] -> [E, N]
  Tensor positional;                       // [2, N]: normalised height, normalised ground range
  std::vector<int> sector;                 // per voxel

  explicit ModelContext(const ModelConfig& c) : cfg(c) {
    cfg.validate();
    psm.emplace(cfg.grid, cfg.cylinder);
    const auto f = cfg.feature_dims();
    lift = std::make_shared<const SparseMap>(flosp_map(cfg.grid, cfg.camera, f[0], f[1]));
    pixel = std::make_shared<const SparseMap>(
        flosp_map(cfg.grid, cfg.camera, cfg.camera.image_height, cfg.camera.image_width));
    const std::size_t N = cfg.grid.count();
    positional = Tensor({2, N});
    sector.resize(N);
    const double zlo = cfg.grid.origin.z(), zspan = cfg.grid.upper().z() - zlo;
    const double range = 0.5 * std::min(cfg.grid.upper().x() - cfg.grid.origin.x(),
                                        cfg.grid.upper().y() - cfg.grid.origin.y());
    std::size_t n = 0;
    for (const Vec3& v : voxel_centers(cfg.grid)) {
      const Vec3 d = v - cfg.camera.position;
      positional[n] = (v.z() - zlo) / zspan;
      positional[N + n] = std::hypot(d.x(), d.y()) / range;
      const double az = wrap_mod(std::atan2(d.y(), d.x()), kTwoPi);
      sector[n] = std::min(static_cast<int>(az / kTwoPi * static_cast<double>(cfg.sectors)),
                           static_cast<int>(cfg.sectors) - 1);
      ++n;
    }
  }

  std::size_t voxels() const { return cfg.grid.count(); }
  void check_sample(const SceneSample& s) const {
    if (s.camera.image_width != cfg.camera.image_width || s.camera.image_height != cfg.camera.image_height ||
        s.camera.position != cfg.camera.position || s.camera.yaw != cfg.camera.yaw)
      throw PreconditionError("sample camera differs from the model camera");
    if (s.gt_grid.size() != voxels()) throw ShapeError("sample grid does not match the model grid");
    if (s.image.shape() != Shape{3, cfg.camera.image_height, cfg.camera.image_width})
      throw ShapeError("sample image shape " + shape_str(s.image.shape()));
    if (s.f_seg.shape() != Shape{cfg.distill_dim, cfg.camera.image_height, cfg.camera.image_width})
      throw ShapeError("sample f_seg shape " + shape_str(s.f_seg.shape()) + " vs distill dim");
  }
};

// ---------------------------------------------------------------- labels

/// Head labels: 0 empty, 1..L_b base classes in catalog order, L_b+1 unknown.
inline std::vector<int> process_labels(const std::vector<std::uint8_t>& gt, const ClassCatalog& cat) {
  std::vector<int> map(256, -2);
  map[kEmpty] = 0;
  const auto base = cat.ids(true), novel = cat.ids(false);
  for (std::size_t b = 0; b < base.size(); ++b) map[base[b]] = static_cast<int>(b) + 1;
  for (auto id : novel) map[id] = static_cast<int>(base.size()) + 1;
  std::vector<int> out(gt.size());
  for (std::size_t i = 0; i < gt.size(); ++i) {
    out[i] = map[gt[i]];
    if (out[i] < 0) throw DomainError("label " + std::to_string(gt[i]) + " is not in the class catalog");
  }
  return out;
}

/// Inverse on {empty} and the base classes.
inline std::uint8_t head_to_catalog(int label, const ClassCatalog& cat) {
  const auto base = cat.ids(true);
  if (label == 0) return kEmpty;
  if (label >= 1 && static_cast<std::size_t>(label) <= base.size()) return base[static_cast<std::size_t>(label) - 1];
  throw DomainError("head label " + std::to_string(label) + " has no single catalog class");
}

/// Base-class index (0..L_b-1) per entry, -1 elsewhere.
inline std::vector<int> base_indices(const std::vector<std::uint8_t>& ids, const ClassCatalog& cat) {
  std::vector<int> map(256, -1);
  const auto base = cat.ids(true);
  for (std::size_t b = 0; b < base.size(); ++b) map[base[b]] = static_cast<int>(b);
  std::vector<int> out(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) out[i] = map[ids[i]];
  return out;
}

// ---------------------------------------------------------------- network

inline ad::Var encode_image(const ad::Var& image, const BoundParams& p) {
  const ad::Var h = ad::elu(ad::add_channel_bias(ad::conv2d_panoramic(image, p["enc1.w"], 2), p["enc1.b"], 0));
  return ad::elu(ad::add_channel_bias(ad::conv2d_panoramic(h, p["enc2.w"], 2), p["enc2.b"], 0));
}

/// Line-of-sight lifting plus the two positional channels -> [C+2, H, W, D].
inline ad::Var lift_features(const ad::Var& feats, const ModelContext& ctx) {
  const std::size_t C = feats.shape()[0], N = ctx.voxels();
  const auto& d = ctx.cfg.grid.dims;
  const ad::Var v = ad::sparse_apply(feats, ctx.lift, {C, N});
  const ad::Var pos = feats.tape()->constant(ctx.positional);
  return ad::reshape(ad::concat({v, pos}, 0), {C + 2, d[0], d[1], d[2]});
}

inline ad::Var conv_block(const ad::Var& x, const BoundParams& p, const std::string& name) {
  const Shape s = x.shape();
  const ad::Var& w = p[name + ".w"];
  const ad::Var y = ad::add_channel_bias(ad::conv3d(ad::reshape(x, {1, s[0], s[1], s[2], s[3]}), w), p[name + ".b"], 1);
  return ad::reshape(y, {w.shape()[0], s[1], s[2], s[3]});
}

/// Residual 3D stages; stage s > 1 is followed by a polar-spiral block with
/// psm_depths[s-2] stacked scans.
inline ad::Var decode_3d(const ad::Var& lifted, const BoundParams& p, const ModelContext& ctx) {
  const auto& cfg = ctx.cfg;
  ad::Var x = ad::elu(conv_block(lifted, p, "dec.in"));
  for (std::size_t s = 1; s <= cfg.stages(); ++s) {
    x = ad::add(x, ad::elu(conv_block(x, p, "dec.s" + std::to_string(s))));
    if (cfg.use_psm && s > 1) {
      const auto st = PsmLayerState::from_specs(s, cfg.dec_channels, cfg.grid, cfg.cylinder);
      x = psm_block(x, st, *ctx.psm, p.scans(s, cfg.psm_depths[s - 2]));
    }
  }
  return x;
}

/// [C, H, W, D] -> [N, C] rows in grid flat order.
inline ad::Var voxel_rows(const ad::Var& v) {
  const Shape s = v.shape();
  return ad::reshape(ad::permute(v, {1, 2, 3, 0}), {s[1] * s[2] * s[3], s[0]});
}

/// Four 1x1x1 layers: three with ELU, then a linear map onto the embedding.
inline ad::Var distill(const ad::Var& rows, const BoundParams& p) {
  ad::Var h = rows;
  for (int l = 1; l <= 3; ++l) {
    const std::string n = "distill." + std::to_string(l);
    h = ad::elu(ad::add_channel_bias(ad::linear(h, p[n + ".w"]), p[n + ".b"], 1));
  }
  return ad::add_channel_bias(ad::linear(h, p["distill.4.w"]), p["distill.4.b"], 1);
}

inline ad::Var occupancy_head(const ad::Var& rows, const BoundParams& p) {
  return ad::add_channel_bias(ad::linear(rows, p["occ.w"]), p["occ.b"], 1);
}

struct ForwardOut {
  ad::Var volume;  // decoder output [C, H, W, D]
  ad::Var rows;    // [N, C]
  ad::Var logits;  // [N, L_b+2]
  ad::Var embed;   // [N, E]
};

inline ForwardOut forward(const SceneSample& s, const BoundParams& p, const ModelContext& ctx) {
  ctx.check_sample(s);
  ad::Tape& t = *p.vars.front().tape();
  ForwardOut o;
  o.volume = decode_3d(lift_features(encode_image(t.constant(s.image), p), ctx), p, ctx);
  o.rows = voxel_rows(o.volume);
  o.logits = occupancy_head(o.rows, p);
  o.embed = distill(o.rows, p);
  return o;
}

// ---------------------------------------------------------------- losses

struct LossParts {
  double ce = 0, sem_scal = 0, geo_scal = 0, fp = 0, occ = 0, voxpix = 0, oca = 0, total = 0;
  bool voxpix_empty = false, oca_empty = false;

  static std::vector<std::string> names() { return {"total", "occ", "ce", "sem_scal", "geo_scal", "fp", "voxpix", "oca"}; }
  std::vector<double> values() const { return {total, occ, ce, sem_scal, geo_scal, fp, voxpix, oca}; }
};

/// Cross-entropy + semantic and geometric scene-class affinity + sector
/// class-mass KL. labels over {empty, base..., unknown}.
inline ad::Var occ_loss(const ad::Var& logits, const std::vector<int>& labels, const std::vector<int>& sector,
                        std::size_t sectors, LossParts* parts = nullptr) {
  const std::size_t K = logits.shape().back(), N = logits.size() / K;
  if (labels.size() != N || sector.size() != N) throw ShapeError("occ_loss: label/sector count mismatch");
  for (int l : labels)
    if (l < 0 || static_cast<std::size_t>(l) >= K) throw DomainError("occ_loss: label out of range");
  ad::Tape& t = *logits.tape();
  const ad::Var probs = ad::softmax(logits);
  const std::vector<bool> all(N, true);
  Tensor to_binary({K, 2});
  to_binary.at(0, 0) = 1.0;
  for (std::size_t k = 1; k < K; ++k) to_binary.at(k, 1) = 1.0;
  std::vector<int> occupied(N);
  for (std::size_t i = 0; i < N; ++i) occupied[i] = labels[i] > 0;
  const ad::Var ce = ad::cross_entropy(logits, labels);
  const ad::Var sem = affinity_loss(probs, labels, all);
  const ad::Var geo = affinity_loss(ad::linear(probs, t.constant(to_binary)), occupied, all);
  const ad::Var fp = ad::sector_kl(probs, labels, sector, sectors);
  const std::vector<ad::Var> terms{ce, sem, geo, fp};
  const ad::Var total = ad::add_all(terms);
  if (parts) {
    parts->ce = ce.value()[0];
    parts->sem_scal = sem.value()[0];
    parts->geo_scal = geo.value()[0];
    parts->fp = fp.value()[0];
    parts->occ = total.value()[0];
  }
  return total;
}

/// Mean (1 - cos) between the selected voxel embeddings and pixel-embedding
/// targets [N, E]. An empty selection yields 0 and sets `empty`.
inline ad::Var voxpix_loss(const ad::Var& embed, const Tensor& targets, const std::vector<bool>& mask,
                           bool* empty = nullptr) {
  const std::size_t N = embed.shape()[0], E = embed.shape()[1];
  if (targets.shape() != Shape{N, E} || mask.size() != N) throw ShapeError("voxpix_loss: shape mismatch");
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < N; ++i)
    if (mask[i]) idx.push_back(i);
  if (empty) *empty = idx.empty();
  if (idx.empty()) return embed.tape()->constant(Tensor({1}, 0.0));
  Tensor tsel({idx.size(), E});
  for (std::size_t r = 0; r < idx.size(); ++r) std::copy_n(targets.data() + idx[r] * E, E, tsel.data() + r * E);
  const ad::Var cos = ad::cosine_pairs(ad::select_rows(embed, idx), embed.tape()->constant(tsel));
  return ad::add_scalar(ad::scale(ad::mean(cos), -1.0), 1.0);
}

/// Pixel embedding seen by each voxel centre: f_seg [E, Himg, Wimg] -> [N, E].
inline Tensor voxel_pixel_targets(const Tensor& f_seg, const SparseMap& pixel_map) {
  const std::size_t E = f_seg.dim(0);
  const Tensor cols = pixel_map.apply(f_seg.reshaped({E, f_seg.size() / E}));
  return permute(cols, {1, 0});
}

inline Tensor voxel_pixel_targets(const Tensor& f_seg, const ErpCamera& cam, const CubicGridSpec& spec) {
  return voxel_pixel_targets(f_seg, flosp_map(spec, cam, f_seg.dim(1), f_seg.dim(2)));
}

// ---------------------------------------------------------------- alignment

struct TrainState {
  Parameters params;
  nma::PrototypeBank prototypes;
};

/// Base prototypes start at their text embeddings.
inline nma::PrototypeBank init_prototypes(const TextBank& bank, double alpha) {
  nma::PrototypeBank b;
  b.prototypes = nma::to_matrix(bank.rows(bank.indices(true)));
  b.base_count = static_cast<std::size_t>(b.prototypes.rows());
  b.alpha = alpha;
  return b;
}

inline TrainState init_state(const ModelConfig& cfg, const TextBank& bank) {
  if (bank.dim() != cfg.distill_dim) throw ConfigError("text embedding width differs from the distill dim");
  if (bank.class_names != cfg.catalog.names) throw ConfigError("text bank classes differ from the catalog");
  return {init_parameters(cfg), init_prototypes(bank, cfg.ema_alpha)};
}

/// Text embeddings of every class after the gradient-free walk against the
/// base prototypes (or unchanged when alignment is off). [L, E].
inline Tensor aligned_texts(const TextBank& bank, const nma::PrototypeBank& protos, const ModelConfig& cfg) {
  if (!cfg.use_nma) return bank.embeddings;
  return nma::to_tensor(nma::align_closed_form(nma::to_matrix(bank.embeddings), protos.prototypes, cfg.walk));
}

inline void update_prototypes(nma::PrototypeBank& protos, const SceneSample& s, const ClassCatalog& cat) {
  const std::size_t E = s.f_seg.dim(0), M = s.f_seg.size() / E;
  const nma::Mat pixels = nma::to_matrix(s.f_seg.reshaped({E, M})).transpose();
  nma::ema_update(protos, pixels, base_indices(s.erp_semantic, cat));
  for (Eigen::Index i = 0; i < protos.prototypes.size(); ++i)
    protos.prototypes.data()[i] = static_cast<float>(protos.prototypes.data()[i]);
}

// ---------------------------------------------------------------- objective

struct LossGraph {
  ad::Var total;
  ad::Var texts;  // aligned base texts as fed to the cost (a constant)
  LossParts parts;
};

inline LossGraph total_loss(const SceneSample& s, const BoundParams& p, const ModelContext& ctx,
                            const Tensor& texts_all, const TextBank& bank) {
  const auto& cfg = ctx.cfg;
  ad::Tape& t = *p.vars.front().tape();
  const ForwardOut f = forward(s, p, ctx);
  LossGraph g;
  const std::vector<int> labels = process_labels(s.gt_grid, cfg.catalog);
  const ad::Var occ = occ_loss(f.logits, labels, ctx.sector, cfg.sectors, &g.parts);

  const std::vector<int> base = base_indices(s.gt_grid, cfg.catalog);
  std::vector<bool> base_mask(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) base_mask[i] = base[i] >= 0;
  const ad::Var vp = voxpix_loss(f.embed, voxel_pixel_targets(s.f_seg, *ctx.pixel), base_mask, &g.parts.voxpix_empty);
  g.parts.voxpix = vp.value()[0];

  std::vector<ad::Var> terms{occ, vp};
  {
    const auto idx = bank.indices(true);
    const std::size_t E = texts_all.dim(1);
    Tensor r({idx.size(), E});
    for (std::size_t i = 0; i < idx.size(); ++i) std::copy_n(texts_all.data() + idx[i] * E, E, r.data() + i * E);
    g.texts = t.constant(std::move(r));
  }
  if (cfg.use_oca) {
    const ad::Var prob = oca_forward(f.embed, g.texts, f.rows, cfg.grid.dims, p.oca());
    const ad::Var lo = affinity_loss(prob, base, base_mask, &g.parts.oca_empty);
    g.parts.oca = lo.value()[0];
    terms.push_back(lo);
  }
  g.total = ad::add_all(terms);
  g.parts.total = g.total.value()[0];
  return g;
}

inline LossParts evaluate_loss(const TrainState& st, const SceneSample& s, const TextBank& bank,
                               const ModelContext& ctx) {
  ad::Tape t;
  const BoundParams p = bind(t, st.params, false);
  return total_loss(s, p, ctx, aligned_texts(bank, st.prototypes, ctx.cfg), bank).parts;
}

/// One descent step on one scene: EMA, alignment, forward, backward, update.
inline LossParts train_step(TrainState& st, const SceneSample& s, const TextBank& bank, const ModelContext& ctx,
                            double lr, std::size_t step_index = 0) {
  update_prototypes(st.prototypes, s, ctx.cfg.catalog);
  const Tensor texts = aligned_texts(bank, st.prototypes, ctx.cfg);
  ad::Tape t;
  const BoundParams p = bind(t, st.params, true);
  const LossGraph g = total_loss(s, p, ctx, texts, bank);
  if (!std::isfinite(g.parts.total))
    throw NumericalError("training diverged at step " + std::to_string(step_index) + " (scene seed " +
                         std::to_string(s.seed) + "): ce=" + std::to_string(g.parts.ce) +
                         " voxpix=" + std::to_string(g.parts.voxpix) + " oca=" + std::to_string(g.parts.oca));
  t.backward(g.total);
  if (t.has_grad(g.texts)) throw Error("aligned text embeddings received a gradient");
  auto& es = st.params.entries();
  for (std::size_t i = 0; i < es.size(); ++i) {
    if (lr == 0.0) break;
    const Tensor& grad = t.grad(p.vars[i]);
    Tensor& w = es[i].second;
    for (std::size_t k = 0; k < w.size(); ++k) w[k] = static_cast<float>(w[k] - lr * grad[k]);
  }
  if (!st.params.all_finite())
    throw NumericalError("non-finite parameter after step " + std::to_string(step_index));
  return g.parts;
}

struct EpochRecord {
  std::size_t epoch = 0;  // 0 = before training
  std::size_t steps = 0;  // steps taken so far
  LossParts mean;
};

struct TrainResult {
  TrainState state;
  std::vector<EpochRecord> history;
};

using EpochHook = std::function<void(const EpochRecord&, const TrainState&)>;

namespace detail {
inline void accumulate(LossParts& acc, const LossParts& x, double w) {
  acc.ce += w * x.ce;
  acc.sem_scal += w * x.sem_scal;
  acc.geo_scal += w * x.geo_scal;
  acc.fp += w * x.fp;
  acc.occ += w * x.occ;
  acc.voxpix += w * x.voxpix;
  acc.oca += w * x.oca;
  acc.total += w * x.total;
}
}  // namespace detail

/// Plain SGD over the scenes in order, one scene per step. Epoch 0 records
/// the initial loss averaged over every training scene.
inline TrainResult train_loop(const std::vector<SceneSample>& data, const TextBank& bank, const ModelConfig& cfg,
                              std::size_t steps, const EpochHook& hook = {}) {
  if (data.empty()) throw PreconditionError("train_loop: empty dataset");
  const ModelContext ctx(cfg);
  TrainResult r{init_state(cfg, bank), {}};
  auto emit = [&](EpochRecord rec) {
    r.history.push_back(rec);
    if (hook) hook(r.history.back(), r.state);
  };
  EpochRecord e0;
  for (const auto& s : data) detail::accumulate(e0.mean, evaluate_loss(r.state, s, bank, ctx), 1.0 / data.size());
  emit(e0);
  EpochRecord cur;
  std::size_t in_epoch = 0;
  LossParts sum;
  for (std::size_t k = 0; k < steps; ++k) {
    detail::accumulate(sum, train_step(r.state, data[k % data.size()], bank, ctx, cfg.learning_rate, k), 1.0);
    ++in_epoch;
    if (in_epoch == data.size() || k + 1 == steps) {
      cur.epoch = r.history.size();
      cur.steps = k + 1;
      cur.mean = LossParts{};
      detail::accumulate(cur.mean, sum, 1.0 / static_cast<double>(in_epoch));
      emit(cur);
      sum = LossParts{};
      in_epoch = 0;
    }
  }
  return r;
}

// ---------------------------------------------------------------- inference

/// ½·softmax(cos/τ) + ½·p_oca over the novel columns; without OCA the
/// cosine term alone. cos, p_oca: [N, L_n].
inline Tensor blend_novel_scores(const Tensor& cos, const Tensor* p_oca, double tau) {
  const std::size_t L = cos.dim(1), N = cos.dim(0);
  if (p_oca && p_oca->shape() != cos.shape()) throw ShapeError("blend_novel_scores: shape mismatch");
  Tensor out({N, L});
  for (std::size_t i = 0; i < N; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t l = 0; l < L; ++l) mx = std::max(mx, cos[i * L + l] / tau);
    double z = 0.0;
    for (std::size_t l = 0; l < L; ++l) z += std::exp(cos[i * L + l] / tau - mx);
    for (std::size_t l = 0; l < L; ++l) {
      const double sm = std::exp(cos[i * L + l] / tau - mx) / z;
      out[i * L + l] = p_oca ? 0.5 * sm + 0.5 * (*p_oca)[i * L + l] : sm;
    }
  }
  return out;
}

/// Head labels plus novel scores -> catalog ids. Unknown voxels take the
/// best-scoring novel class (first on ties).
inline std::vector<std::uint8_t> assign_classes(const std::vector<int>& head, const Tensor& novel_scores,
                                                const ClassCatalog& cat) {
  const auto novel = cat.ids(false);
  const int unknown = static_cast<int>(cat.ids(true).size()) + 1;
  if (novel_scores.dim(1) != novel.size() || novel_scores.dim(0) != head.size())
    throw ShapeError("assign_classes: score shape mismatch");
  std::vector<std::uint8_t> out(head.size());
  for (std::size_t i = 0; i < head.size(); ++i) {
    if (head[i] != unknown) {
      out[i] = head_to_catalog(head[i], cat);
      continue;
    }
    std::size_t best = 0;
    for (std::size_t l = 1; l < novel.size(); ++l)
      if (novel_scores[i * novel.size() + l] > novel_scores[i * novel.size() + best]) best = l;
    out[i] = novel[best];
  }
  return out;
}

inline std::vector<int> argmax_rows(const Tensor& x) {
  const std::size_t K = x.shape().back(), N = x.size() / K;
  std::vector<int> out(N);
  for (std::size_t i = 0; i < N; ++i)
    out[i] = static_cast<int>(std::max_element(x.data() + i * K, x.data() + (i + 1) * K) - (x.data() + i * K));
  return out;
}

/// Predicted catalog-id grid over {empty} ∪ base ∪ novel.
inline std::vector<std::uint8_t> infer(const SceneSample& s, const TextBank& bank, const TrainState& st,
                                       const ModelContext& ctx) {
  const auto& cfg = ctx.cfg;
  ad::Tape t;
  const BoundParams p = bind(t, st.params, false);
  const ForwardOut f = forward(s, p, ctx);
  const std::vector<int> head = argmax_rows(f.logits.value());
  const Tensor texts = aligned_texts(bank, st.prototypes, cfg);
  const auto novel = bank.indices(false);
  const std::size_t N = head.size(), Ln = novel.size();
  const Tensor cos_all = ad::cosine_rows(f.embed, t.constant(texts)).value();
  auto novel_cols = [&](const Tensor& full) {
    Tensor r({N, Ln});
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t l = 0; l < Ln; ++l) r[i * Ln + l] = full[i * bank.size() + novel[l]];
    return r;
  };
  const Tensor cos = novel_cols(cos_all);
  std::optional<Tensor> poca;
  if (cfg.use_oca) poca = novel_cols(oca_forward(f.embed, t.constant(texts), f.rows, cfg.grid.dims, p.oca()).value());
  return assign_classes(head, blend_novel_scores(cos, poca ? &*poca : nullptr, cfg.tau), cfg.catalog);
}

// ---------------------------------------------------------------- checkpoints

struct Checkpoint {
  TrainState state;
  std::string config_text;
};

inline void save_checkpoint(const TrainState& st, const std::string& config_text, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json j;
  j["format"] = "o3n-checkpoint";
  j["version"] = kCheckpointVersion;
  j["config"] = config_text;
  j["prototype_alpha"] = st.prototypes.alpha;
  j["parameters"] = nlohmann::json::array();
  auto put = [&](const std::string& name, const Tensor& t) {
    std::string file = name + ".f32";
    io::write_file(dir / file, io::encode_f32(t));
    j["parameters"].push_back({{"name", name}, {"shape", t.shape()}, {"dtype", "float32"}, {"file", file}});
  };
  for (const auto& [name, t] : st.params.entries()) put(name, t);
  put("nma.prototypes", nma::to_tensor(st.prototypes.prototypes));
  std::ofstream(dir / "manifest.json") << j.dump(1) << '\n';
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto j = io::read_manifest(dir / "manifest.json", "o3n-checkpoint", kCheckpointVersion);
  Checkpoint c;
  c.config_text = io::field<std::string>(j, "config");
  c.state.prototypes.alpha = io::field<double>(j, "prototype_alpha");
  if (!j.contains("parameters") || !j["parameters"].is_array()) throw MalformedManifest("checkpoint lists no parameters");
  bool have_protos = false;
  for (const auto& e : j["parameters"]) {
    const auto name = io::field<std::string>(e, "name");
    const auto shape = io::field<std::vector<std::size_t>>(e, "shape");
    if (io::field<std::string>(e, "dtype") != "float32") throw MalformedManifest(name + ": unsupported dtype");
    Tensor t(shape, io::decode_f32(io::read_blob(dir / io::field<std::string>(e, "file"), shape_size(shape) * 4)));
    if (name == "nma.prototypes") {
      if (t.rank() != 2) throw ShapeMismatch("prototype matrix must be rank 2");
      c.state.prototypes.prototypes = nma::to_matrix(t);
      c.state.prototypes.base_count = t.dim(0);
      have_protos = true;
    } else {
      c.state.params.add(name, std::move(t));
    }
  }
  if (!have_protos) throw MalformedManifest("checkpoint has no prototype matrix");
  return c;
}

/// Checks a loaded parameter set against the shapes a config implies.
inline void check_parameters(const Parameters& p, const ModelConfig& cfg) {
  const Parameters ref = init_parameters(cfg);
  if (ref.size() != p.size()) throw ShapeMismatch("checkpoint parameter count differs from the config");
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const auto& [n, t] = ref.entries()[i];
    if (!p.contains(n)) throw ShapeMismatch("checkpoint lacks parameter " + n);
    if (p[n].shape() != t.shape())
      throw ShapeMismatch(n + ": checkpoint shape " + shape_str(p[n].shape()) + ", config implies " +
                          shape_str(t.shape()));
  }
}

}  // namespace o3n
