#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "o3n/model.hpp"

using namespace o3n;
namespace fs = std::filesystem;

namespace {

ClassCatalog micro_catalog() {
  return {{"person", "vegetation", "terrain", "vehicle", "road"}, {true, true, true, false, false}};
}

ModelConfig micro_config() {
  ModelConfig c;
  c.catalog = micro_catalog();
  c.grid.origin = Vec3(-1.6, -1.6, -0.8);
  c.grid.voxel_size = 0.4;
  c.grid.dims = {8, 8, 4};
  c.camera.image_width = 32;
  c.camera.image_height = 16;
  c.camera.position = Vec3(0.07, -0.05, 0.1);
  c.cylinder.radial_bins = 2;
  c.cylinder.azimuth_bins = 8;
  c.cylinder.vertical_bins = 4;
  c.cylinder.r_max = 1.6;
  c.cylinder.z_min = -0.8;
  c.cylinder.z_max = 0.8;
  c.cylinder.center_x = 0.07;
  c.cylinder.center_y = -0.05;
  c.enc_hidden = 3;
  c.enc_channels = 3;
  c.dec_channels = 2;
  c.psm_depths = {1, 2};
  c.distill_hidden = 4;
  c.distill_dim = 6;
  c.cost_dim = 2;
  c.text_proj = 2;
  c.guide_proj = 2;
  c.key_dim = 2;
  c.sectors = 4;
  c.learning_rate = 1e-3;
  return c;
}

GeneratorConfig generator(const ModelConfig& c) {
  GeneratorConfig g;
  g.grid = c.grid;
  g.camera = c.camera;
  g.catalog = c.catalog;
  g.embed_dim = c.distill_dim;
  return g;
}

struct Micro {
  ModelConfig cfg = micro_config();
  TextBank bank = synthetic_text_bank(cfg.catalog, cfg.distill_dim, 3);
  std::vector<SceneSample> scenes;
  Micro() {
    for (std::uint64_t s = 0; s < 3; ++s) scenes.push_back(generate_scene(11 + s, generator(cfg), bank));
  }
};

double elu_ref(double x) { return x > 0 ? x : std::expm1(x); }

Tensor forward_value(const SceneSample& s, const Parameters& p, const ModelContext& ctx, ad::Var ForwardOut::*field) {
  ad::Tape t;
  const BoundParams b = bind(t, p, false);
  return (forward(s, b, ctx).*field).value();
}

}  // namespace

// ---------------------------------------------------------------- labels

TEST(Labels, NovelMapsToUnknownAndBaseInverts) {
  const auto cat = micro_catalog();
  const std::vector<std::uint8_t> gt = {0, 1, 2, 3, 4, 5};
  const auto l = process_labels(gt, cat);
  EXPECT_EQ(l, (std::vector<int>{0, 1, 2, 3, 4, 4}));
  for (std::uint8_t id : {0, 1, 2, 3}) EXPECT_EQ(head_to_catalog(process_labels({id}, cat)[0], cat), id);
  EXPECT_THROW(head_to_catalog(4, cat), DomainError);
  EXPECT_THROW(process_labels({6}, cat), DomainError);
  EXPECT_EQ(base_indices({0, 1, 3, 4, 255}, cat), (std::vector<int>{-1, 0, 2, -1, -1}));
}

TEST(Labels, InterleavedBaseOrder) {
  const ClassCatalog cat{{"x", "y", "z"}, {false, true, true}};
  EXPECT_EQ(process_labels({1, 2, 3}, cat), (std::vector<int>{3, 1, 2}));
  EXPECT_EQ(head_to_catalog(1, cat), 2);
  EXPECT_EQ(head_to_catalog(2, cat), 3);
}

// ---------------------------------------------------------------- encoder

TEST(Encoder, ConstantImageGivesConstantFeatures) {
  const auto cfg = micro_config();
  const Parameters p = init_parameters(cfg);
  ad::Tape t;
  const BoundParams b = bind(t, p, false);
  const Tensor img({3, 16, 32}, 0.3);
  const Tensor f = encode_image(t.constant(img), b).value();
  ASSERT_EQ(f.shape(), (Shape{3, 4, 8}));
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 32; ++i) EXPECT_NEAR(f[c * 32 + i], f[c * 32], 1e-12);
}

TEST(Encoder, ShiftEquivariantAcrossSeam) {
  const auto cfg = micro_config();
  const Parameters p = init_parameters(cfg);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 1);
  Tensor img({3, 16, 32}), shifted({3, 16, 32});
  for (double& v : img.buffer()) v = u(rng);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 16; ++y)
      for (std::size_t x = 0; x < 32; ++x) shifted[(c * 16 + y) * 32 + (x + 4) % 32] = img[(c * 16 + y) * 32 + x];
  ad::Tape t;
  const BoundParams b = bind(t, p, false);
  const Tensor a = encode_image(t.constant(img), b).value(), s = encode_image(t.constant(shifted), b).value();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 4; ++y)
      for (std::size_t x = 0; x < 8; ++x) EXPECT_NEAR(s[(c * 4 + y) * 8 + (x + 1) % 8], a[(c * 4 + y) * 8 + x], 1e-12);
}

// ---------------------------------------------------------------- decoder

TEST(Decoder, ZeroWeightsGiveZero) {
  const auto cfg = micro_config();
  const ModelContext ctx(cfg);
  Parameters p = init_parameters(cfg);
  for (auto& [n, t] : p.entries())
    if (n.rfind("dec.", 0) == 0) t.buffer().assign(t.size(), 0.0);
  ad::Tape t;
  const BoundParams b = bind(t, p, false);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g;
  Tensor in({cfg.enc_channels + 2, 8, 8, 4});
  for (double& v : in.buffer()) v = g(rng);
  const Tensor out = decode_3d(t.constant(in), b, ctx).value();
  ASSERT_EQ(out.shape(), (Shape{2, 8, 8, 4}));
  for (double v : out.buffer()) EXPECT_EQ(v, 0.0);
}

TEST(Decoder, PolarBranchOnlyActsWhenEnabled) {
  auto on = micro_config(), off = micro_config();
  off.use_psm = false;
  Micro m;
  const Parameters p = init_parameters(on);
  Parameters q = p;
  for (auto& [n, t] : q.entries())
    if (n.rfind("psm.", 0) == 0)
      for (double& v : t.buffer()) v = v * 0.5 + 0.3;
  const ModelContext c_on(on), c_off(off);
  const auto& s = m.scenes[0];
  const Tensor a = forward_value(s, p, c_off, &ForwardOut::volume), b = forward_value(s, q, c_off, &ForwardOut::volume);
  EXPECT_EQ(a.buffer(), b.buffer());
  const Tensor c = forward_value(s, p, c_on, &ForwardOut::volume), d = forward_value(s, q, c_on, &ForwardOut::volume);
  double diff = 0;
  for (std::size_t i = 0; i < c.size(); ++i) diff = std::max(diff, std::abs(c[i] - d[i]));
  EXPECT_GT(diff, 1e-6);
}

TEST(Forward, Shapes) {
  Micro m;
  const ModelContext ctx(m.cfg);
  const Parameters p = init_parameters(m.cfg);
  ad::Tape t;
  const auto f = forward(m.scenes[0], bind(t, p, false), ctx);
  EXPECT_EQ(f.volume.shape(), (Shape{2, 8, 8, 4}));
  EXPECT_EQ(f.rows.shape(), (Shape{256, 2}));
  EXPECT_EQ(f.logits.shape(), (Shape{256, 5}));
  EXPECT_EQ(f.embed.shape(), (Shape{256, 6}));
}

TEST(Forward, RejectsMismatchedSample) {
  Micro m;
  const ModelContext ctx(m.cfg);
  const Parameters p = init_parameters(m.cfg);
  auto s = m.scenes[0];
  s.f_seg = Tensor({5, 16, 32});
  ad::Tape t;
  EXPECT_THROW(forward(s, bind(t, p, false), ctx), ShapeError);
  s = m.scenes[0];
  s.camera.position = Vec3(0, 0, 0);
  EXPECT_THROW(forward(s, bind(t, p, false), ctx), PreconditionError);
}

// ---------------------------------------------------------------- distill

TEST(Distill, MatchesDenseReference) {
  auto cfg = micro_config();
  cfg.distill_hidden = 6;  // square final layer
  const Parameters p = init_parameters(cfg);
  std::mt19937_64 rng(9);
  std::normal_distribution<double> g;
  const std::size_t N = 5, C = 2;
  Tensor x({N, C});
  for (double& v : x.buffer()) v = g(rng);
  ad::Tape t;
  const Tensor y = distill(t.constant(x), bind(t, p, false)).value();
  // Plain loops over row-major weights [in, out].
  auto layer = [&](const std::vector<double>& h, std::size_t in, const std::string& n, bool act) {
    const Tensor& w = p[n + ".w"];
    const Tensor& b = p[n + ".b"];
    const std::size_t out = b.size();
    std::vector<double> r(N * out);
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t o = 0; o < out; ++o) {
        double s = b[o];
        for (std::size_t k = 0; k < in; ++k) s += h[i * in + k] * w[k * out + o];
        r[i * out + o] = act ? elu_ref(s) : s;
      }
    return r;
  };
  auto h = layer(x.buffer(), C, "distill.1", true);
  h = layer(h, 6, "distill.2", true);
  h = layer(h, 6, "distill.3", true);
  h = layer(h, 6, "distill.4", false);
  for (std::size_t i = 0; i < h.size(); ++i) EXPECT_NEAR(y[i], h[i], 1e-12);
}

TEST(Distill, IdentityFinalLayerExposesPrefix) {
  auto cfg = micro_config();
  cfg.distill_hidden = 6;
  Parameters p = init_parameters(cfg);
  Tensor& w4 = p["distill.4.w"];
  w4.buffer().assign(w4.size(), 0.0);
  for (std::size_t i = 0; i < 6; ++i) w4[i * 6 + i] = 1.0;
  Tensor x({3, 2}, 0.4);
  ad::Tape t;
  const BoundParams b = bind(t, p, false);
  const Tensor full = distill(t.constant(x), b).value();
  ad::Var h = t.constant(x);
  for (int l = 1; l <= 3; ++l) {
    const std::string n = "distill." + std::to_string(l);
    h = ad::elu(ad::add_channel_bias(ad::linear(h, b[n + ".w"]), b[n + ".b"], 1));
  }
  EXPECT_EQ(full.buffer(), h.value().buffer());
}

TEST(Distill, ZeroWeightsGiveZero) {
  auto cfg = micro_config();
  Parameters p = init_parameters(cfg);
  for (auto& [n, t] : p.entries())
    if (n.rfind("distill.", 0) == 0) t.buffer().assign(t.size(), 0.0);
  ad::Tape t;
  const Tensor y = distill(t.constant(Tensor({4, 2}, 1.7)), bind(t, p, false)).value();
  for (double v : y.buffer()) EXPECT_EQ(v, 0.0);
}

// ---------------------------------------------------------------- losses

TEST(OccLoss, UniformLogitsGiveLogK) {
  for (std::size_t K : {2u, 5u}) {
    ad::Tape t;
    const std::vector<int> labels = {0, 1, 0, 1, 1, 0, 0, 1};
    LossParts parts;
    const ad::Var l = occ_loss(t.constant(Tensor({8, K})), labels, std::vector<int>(8, 0), 1, &parts);
    EXPECT_NEAR(parts.ce, std::log(static_cast<double>(K)), 1e-12);
    EXPECT_NEAR(l.value()[0], parts.ce + parts.sem_scal + parts.geo_scal + parts.fp, 1e-12);
    EXPECT_DOUBLE_EQ(parts.occ, l.value()[0]);
  }
}

TEST(OccLoss, ConfidentCorrectLogitsReachLimits) {
  const std::size_t K = 5;
  const std::vector<int> labels = {0, 1, 2, 3, 4, 0, 1, 2};
  Tensor logits({8, K});
  for (std::size_t i = 0; i < 8; ++i) logits[i * K + static_cast<std::size_t>(labels[i])] = 60.0;
  ad::Tape t;
  LossParts parts;
  occ_loss(t.constant(logits), labels, {0, 1, 0, 1, 0, 1, 0, 1}, 2, &parts);
  EXPECT_NEAR(parts.ce, 0.0, 1e-9);
  EXPECT_NEAR(parts.sem_scal, -3.0, 1e-9);
  EXPECT_NEAR(parts.geo_scal, -3.0, 1e-9);
  EXPECT_NEAR(parts.fp, 0.0, 1e-9);
}

TEST(OccLoss, EightVoxelCrossEntropyOracle) {
  const std::size_t K = 3;
  const std::vector<int> labels = {0, 1, 2, 2, 1, 0, 0, 2};
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g;
  Tensor logits({8, K});
  for (double& v : logits.buffer()) v = g(rng);
  double ce = 0;
  for (std::size_t i = 0; i < 8; ++i) {
    double z = 0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(logits[i * K + k]);
    ce += std::log(z) - logits[i * K + static_cast<std::size_t>(labels[i])];
  }
  ad::Tape t;
  LossParts parts;
  occ_loss(t.constant(logits), labels, std::vector<int>(8, 0), 1, &parts);
  EXPECT_NEAR(parts.ce, ce / 8.0, 1e-12);
  EXPECT_GE(parts.sem_scal, -3.0);
  EXPECT_LE(parts.sem_scal, 0.0);
  EXPECT_GE(parts.geo_scal, -3.0);
  EXPECT_LE(parts.geo_scal, 0.0);
  EXPECT_GE(parts.fp, 0.0);
}

TEST(OccLoss, RejectsBadLabels) {
  ad::Tape t;
  const ad::Var l = t.constant(Tensor({2, 3}));
  EXPECT_THROW(occ_loss(l, {0, 3}, {0, 0}, 1), DomainError);
  EXPECT_THROW(occ_loss(l, {0}, {0, 0}, 1), ShapeError);
}

TEST(VoxPix, Cases) {
  Tensor e({3, 2}), tg({3, 2});
  e.at(0, 0) = 2.0;
  e.at(1, 1) = 1.0;
  e.at(2, 0) = 1.0;
  tg.at(0, 0) = 1.0;   // aligned
  tg.at(1, 1) = -3.0;  // opposite
  tg.at(2, 1) = 1.0;   // orthogonal
  ad::Tape t;
  const ad::Var v = t.constant(e);
  bool empty = true;
  EXPECT_NEAR(voxpix_loss(v, tg, {true, false, false}, &empty).value()[0], 0.0, 1e-12);
  EXPECT_FALSE(empty);
  EXPECT_NEAR(voxpix_loss(v, tg, {false, true, false}).value()[0], 2.0, 1e-12);
  EXPECT_NEAR(voxpix_loss(v, tg, {true, true, true}).value()[0], 1.0, 1e-12);
  EXPECT_EQ(voxpix_loss(v, tg, {false, false, false}, &empty).value()[0], 0.0);
  EXPECT_TRUE(empty);
  EXPECT_THROW(voxpix_loss(v, tg, {true}), ShapeError);
}

TEST(VoxPix, TargetsSampleThePixelUnderEachVoxel) {
  const auto cfg = micro_config();
  const ErpCamera& cam = cfg.camera;
  const std::size_t E = 2, H = cam.image_height, W = cam.image_width;
  Tensor f({E, H, W});
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      f[y * W + x] = static_cast<double>(x);
      f[H * W + y * W + x] = static_cast<double>(y);
    }
  const Tensor tg = voxel_pixel_targets(f, cam, cfg.grid);
  // Bilinear reads of linear ramps reproduce the sample position; rows clamp.
  std::size_t n = 0, interior = 0;
  for (const Vec3& v : voxel_centers(cfg.grid)) {
    const auto px = world_to_erp(v, cam);
    EXPECT_NEAR(tg.at(n, 1), std::clamp(px.v - 0.5, 0.0, static_cast<double>(H - 1)), 1e-9);
    if (px.u - 0.5 >= 0.0 && px.u - 0.5 <= static_cast<double>(W - 1)) {
      EXPECT_NEAR(tg.at(n, 0), px.u - 0.5, 1e-9);
      ++interior;
    }
    ++n;
  }
  EXPECT_GT(interior, n / 2);
}

TEST(TotalLoss, Recomposes) {
  Micro m;
  const ModelContext ctx(m.cfg);
  const TrainState st = init_state(m.cfg, m.bank);
  for (const auto& s : m.scenes) {
    const LossParts p = evaluate_loss(st, s, m.bank, ctx);
    EXPECT_NEAR(p.total, p.occ + p.voxpix + p.oca, 1e-12);
    EXPECT_NEAR(p.occ, p.ce + p.sem_scal + p.geo_scal + p.fp, 1e-12);
  }
  auto off = m.cfg;
  off.use_oca = false;
  const ModelContext c2(off);
  const LossParts q = evaluate_loss(st, m.scenes[0], m.bank, c2);
  EXPECT_EQ(q.oca, 0.0);
  EXPECT_NEAR(q.total, q.occ + q.voxpix, 1e-12);
}

// ---------------------------------------------------------------- inference

TEST(Inference, BlendBruteForce) {
  const double tau = 0.1;
  // Cosine prefers column 0; OCA prefers column 1 strongly enough to win.
  Tensor cos({1, 2}), oca({1, 2});
  cos[0] = 0.1;
  cos[1] = 0.0;
  oca[0] = 0.2;
  oca[1] = 0.8;
  const double e = std::exp(1.0);
  const double s0 = 0.5 * e / (e + 1) + 0.1, s1 = 0.5 / (e + 1) + 0.4;
  const Tensor b = blend_novel_scores(cos, &oca, tau);
  EXPECT_NEAR(b[0], s0, 1e-12);
  EXPECT_NEAR(b[1], s1, 1e-12);
  const Tensor c = blend_novel_scores(cos, nullptr, tau);
  EXPECT_NEAR(c[0], e / (e + 1), 1e-12);

  const auto cat = micro_catalog();
  const auto cls = assign_classes({4}, b, cat);
  EXPECT_EQ(cls[0], 5);  // second novel class, "road"
  EXPECT_EQ(assign_classes({4}, c, cat)[0], 4);
}

TEST(Inference, AssignKeepsHeadForEmptyAndBase) {
  const auto cat = micro_catalog();
  Tensor sc({4, 2}, 0.5);
  EXPECT_EQ(assign_classes({0, 1, 2, 3}, sc, cat), (std::vector<std::uint8_t>{0, 1, 2, 3}));
  const ClassCatalog single{{"a", "b"}, {true, false}};
  Tensor one({3, 1}, 0.1);
  EXPECT_EQ(assign_classes({2, 2, 0}, one, single), (std::vector<std::uint8_t>{2, 2, 0}));
}

TEST(Inference, NoUnknownMeansHeadOutput) {
  Micro m;
  const ModelContext ctx(m.cfg);
  TrainState st = init_state(m.cfg, m.bank);
  Tensor& w = st.params["occ.w"];
  w.buffer().assign(w.size(), 0.0);
  Tensor& b = st.params["occ.b"];
  b.buffer().assign(b.size(), 0.0);
  b[2] = 5.0;  // head label 2 = vegetation
  for (auto v : infer(m.scenes[0], m.bank, st, ctx)) EXPECT_EQ(v, 2);
}

TEST(Inference, CoversOccupiedVoxelsWithValidIds) {
  Micro m;
  const ModelContext ctx(m.cfg);
  TrainState st = init_state(m.cfg, m.bank);
  Tensor& b = st.params["occ.b"];
  b[4] = 1.0;  // push some voxels to unknown
  const auto pred = infer(m.scenes[1], m.bank, st, ctx);
  ad::Tape t;
  const auto head = argmax_rows(forward(m.scenes[1], bind(t, st.params, false), ctx).logits.value());
  ASSERT_EQ(pred.size(), head.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    EXPECT_LE(pred[i], 5);
    EXPECT_EQ(pred[i] == kEmpty, head[i] == 0);
    if (head[i] == 4) EXPECT_TRUE(m.cfg.catalog.is_novel(pred[i]));
  }
}

// ---------------------------------------------------------------- gradients

TEST(Gradients, MicroModelEndToEnd) {
  Micro m;
  const ModelContext ctx(m.cfg);
  const TrainState st = init_state(m.cfg, m.bank);
  const Tensor texts = aligned_texts(m.bank, st.prototypes, m.cfg);
  std::vector<Tensor> inputs;
  for (const auto& e : st.params.entries()) inputs.push_back(e.second);
  const auto& scene = m.scenes[0];
  const auto rep = ad::grad_check(
      [&](ad::Tape&, std::span<const ad::Var> vs) {
        BoundParams b{{vs.begin(), vs.end()}, &st.params};
        return total_loss(scene, b, ctx, texts, m.bank).total;
      },
      inputs, 1e-6, 4);
  EXPECT_GT(rep.checked, 100u);
  EXPECT_LE(rep.max_rel_error, 1e-3);
}

TEST(Gradients, AlignedTextsCarryNoGradient) {
  Micro m;
  const ModelContext ctx(m.cfg);
  const TrainState st = init_state(m.cfg, m.bank);
  ad::Tape t;
  const BoundParams p = bind(t, st.params, true);
  const LossGraph g = total_loss(m.scenes[0], p, ctx, aligned_texts(m.bank, st.prototypes, m.cfg), m.bank);
  t.backward(g.total);
  EXPECT_FALSE(t.has_grad(g.texts));
  EXPECT_TRUE(t.has_grad(p["oca.text_w"]));
}

// ---------------------------------------------------------------- training

TEST(Training, ZeroLearningRateLeavesParameters) {
  Micro m;
  auto cfg = m.cfg;
  cfg.learning_rate = 0.0;
  const auto r = train_loop(m.scenes, m.bank, cfg, 2);
  EXPECT_TRUE(r.state.params == init_parameters(cfg));
}

TEST(Training, SmallStepDescends) {
  Micro m;
  auto cfg = m.cfg;
  cfg.use_nma = false;  // keep the texts fixed across the step
  const ModelContext ctx(cfg);
  TrainState st = init_state(cfg, m.bank);
  const auto& s = m.scenes[0];
  const double before = evaluate_loss(st, s, m.bank, ctx).total;
  train_step(st, s, m.bank, ctx, 1e-3);
  EXPECT_LT(evaluate_loss(st, s, m.bank, ctx).total, before);
}

TEST(Training, DeterministicHistory) {
  Micro m;
  const auto a = train_loop(m.scenes, m.bank, m.cfg, 4);
  const auto b = train_loop(m.scenes, m.bank, m.cfg, 4);
  ASSERT_EQ(a.history.size(), 3u);  // initial, full epoch, partial epoch
  EXPECT_EQ(a.history[1].steps, 3u);
  EXPECT_EQ(a.history[2].steps, 4u);
  for (std::size_t e = 0; e < a.history.size(); ++e) EXPECT_EQ(a.history[e].mean.values(), b.history[e].mean.values());
  EXPECT_TRUE(a.state.params == b.state.params);
  EXPECT_EQ(a.state.prototypes.prototypes, b.state.prototypes.prototypes);
  EXPECT_FALSE(a.state.params == init_parameters(m.cfg));
}

TEST(Training, InitialEpochIsMeanOverScenes) {
  Micro m;
  const ModelContext ctx(m.cfg);
  const auto r = train_loop(m.scenes, m.bank, m.cfg, 0);
  ASSERT_EQ(r.history.size(), 1u);
  const TrainState st = init_state(m.cfg, m.bank);
  double mean = 0;
  for (const auto& s : m.scenes) mean += evaluate_loss(st, s, m.bank, ctx).total / 3.0;
  EXPECT_NEAR(r.history[0].mean.total, mean, 1e-12);
}

TEST(Training, DivergenceIsReported) {
  Micro m;
  const ModelContext ctx(m.cfg);
  TrainState st = init_state(m.cfg, m.bank);
  st.params["occ.b"][0] = std::nan("");
  EXPECT_THROW(train_step(st, m.scenes[0], m.bank, ctx, 0.01), NumericalError);
}

TEST(Training, RejectsMismatchedBank) {
  Micro m;
  const auto wrong = synthetic_text_bank(m.cfg.catalog, 7);
  EXPECT_THROW(init_state(m.cfg, wrong), ConfigError);
  EXPECT_THROW(train_loop({}, m.bank, m.cfg, 1), PreconditionError);
}

// ---------------------------------------------------------------- checkpoints

class CheckpointIo : public ::testing::Test {
 protected:
  fs::path dir = fs::temp_directory_path() / ("o3n_ckpt_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                              "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
  Micro m;
  TrainState st;
  void SetUp() override {
    fs::remove_all(dir);
    st = train_loop(m.scenes, m.bank, m.cfg, 2).state;
    save_checkpoint(st, "seed = 0\n", dir);
  }
  void TearDown() override { fs::remove_all(dir); }
  nlohmann::json manifest() {
    std::ifstream f(dir / "manifest.json");
    return nlohmann::json::parse(f);
  }
  void write_manifest(const nlohmann::json& j) { std::ofstream(dir / "manifest.json") << j.dump(); }
};

TEST_F(CheckpointIo, RoundTripsBitExactly) {
  const Checkpoint c = load_checkpoint(dir);
  EXPECT_TRUE(c.state.params == st.params);
  EXPECT_EQ(c.state.prototypes.prototypes, st.prototypes.prototypes);
  EXPECT_EQ(c.state.prototypes.alpha, st.prototypes.alpha);
  EXPECT_EQ(c.config_text, "seed = 0\n");
  EXPECT_NO_THROW(check_parameters(c.state.params, m.cfg));
  const ModelContext ctx(m.cfg);
  EXPECT_EQ(infer(m.scenes[2], m.bank, c.state, ctx), infer(m.scenes[2], m.bank, st, ctx));
}

TEST_F(CheckpointIo, TruncatedBlob) {
  const auto f = dir / (manifest()["parameters"][0]["file"].get<std::string>());
  fs::resize_file(f, fs::file_size(f) - 4);
  EXPECT_THROW(load_checkpoint(dir), TruncatedBlob);
}

TEST_F(CheckpointIo, VersionBump) {
  auto j = manifest();
  j["version"] = kCheckpointVersion + 1;
  write_manifest(j);
  EXPECT_THROW(load_checkpoint(dir), UnsupportedVersion);
}

TEST_F(CheckpointIo, MalformedManifest) {
  std::ofstream(dir / "manifest.json") << "{ not json";
  EXPECT_THROW(load_checkpoint(dir), MalformedManifest);
  auto j = nlohmann::json{{"format", "o3n-dataset"}, {"version", kCheckpointVersion}};
  write_manifest(j);
  EXPECT_THROW(load_checkpoint(dir), MalformedManifest);
}

TEST_F(CheckpointIo, ShapeMismatchAgainstConfig) {
  auto j = manifest();
  for (auto& e : j["parameters"])
    if (e["name"] == "occ.b") e["shape"] = {2, 2};
  write_manifest(j);
  EXPECT_THROW(load_checkpoint(dir), ShapeMismatch);  // blob now too large
  auto wider = m.cfg;
  wider.dec_channels = 3;
  EXPECT_THROW(check_parameters(st.params, wider), ShapeMismatch);
}
