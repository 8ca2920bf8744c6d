#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "o3n/metrics.hpp"
#include "o3n/model.hpp"
#include "o3n/synth.hpp"

namespace o3n {

struct ExperimentConfig {
  ModelConfig model;
  std::size_t train_scenes = 64;
  std::size_t eval_scenes = 16;
  std::size_t steps = 500;
  std::uint64_t data_seed = 1000;
  std::uint64_t text_seed = 0;
  double embed_noise = 0.35;
  double image_noise = 0.05;
  bool ablation = false;
  std::vector<double> fov_sweep;

  // Derived cylinder settings unless given explicitly.
  bool cylinder_r_max_set = false, cylinder_z_set = false, cylinder_center_set = false;

  ExperimentConfig() { model.camera.position = Vec3(0.07, -0.05, 0.1); }

  void finalize() {
    auto& m = model;
    auto& c = m.cylinder;
    if (!cylinder_r_max_set)
      c.r_max = 0.5 * std::min(m.grid.upper().x() - m.grid.origin.x(), m.grid.upper().y() - m.grid.origin.y());
    if (!cylinder_z_set) {
      c.z_min = m.grid.origin.z();
      c.z_max = m.grid.upper().z();
    }
    if (!cylinder_center_set) {
      c.center_x = m.camera.position.x();
      c.center_y = m.camera.position.y();
    }
  }
  void validate() const {
    model.validate();
    if (train_scenes < 1 || eval_scenes < 1) throw ConfigError("need at least one train and one eval scene");
    if (!(embed_noise >= 0.0) || !(image_noise >= 0.0)) throw ConfigError("noise levels must be >= 0");
    for (double f : fov_sweep)
      if (!(f > 0.0 && f <= 360.0)) throw ConfigError("fov_sweep entries must lie in (0, 360]");
  }
  GeneratorConfig generator() const {
    GeneratorConfig g;
    g.grid = model.grid;
    g.camera = model.camera;
    g.catalog = model.catalog;
    g.embed_dim = model.distill_dim;
    g.embed_noise = embed_noise;
    g.image_noise = image_noise;
    return g;
  }
};

// ---------------------------------------------------------------- config text

namespace cfgparse {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(trim(item));
  return out;
}

inline double to_double(const std::string& v) {
  std::size_t used = 0;
  const double d = std::stod(v, &used);
  if (used != v.size()) throw std::invalid_argument("trailing characters");
  return d;
}

inline std::uint64_t to_uint(const std::string& v) {
  if (v.empty() || v[0] == '-') throw std::invalid_argument("expected a non-negative integer");
  std::size_t used = 0;
  const auto n = std::stoull(v, &used);
  if (used != v.size()) throw std::invalid_argument("trailing characters");
  return n;
}

inline bool to_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw std::invalid_argument("expected true/false");
}

inline std::vector<std::size_t> dims(const std::string& v, std::size_t n, char sep) {
  const auto parts = split(v, sep);
  if (parts.size() != n) throw std::invalid_argument("expected " + std::to_string(n) + " fields");
  std::vector<std::size_t> out;
  for (const auto& p : parts) out.push_back(static_cast<std::size_t>(to_uint(p)));
  return out;
}

inline std::vector<double> reals(const std::string& v, std::size_t n) {
  const auto parts = split(v, ',');
  if (n && parts.size() != n) throw std::invalid_argument("expected " + std::to_string(n) + " values");
  std::vector<double> out;
  for (const auto& p : parts) out.push_back(to_double(p));
  return out;
}

inline std::string fmt(double v) {
  char b[40];
  std::snprintf(b, sizeof b, "%.17g", v);
  return b;
}

}  // namespace cfgparse

using ConfigSetter = std::function<void(ExperimentConfig&, const std::string&)>;

inline const std::map<std::string, ConfigSetter>& config_keys() {
  using namespace cfgparse;
  static const std::map<std::string, ConfigSetter> keys = {
      {"seed", [](auto& c, const auto& v) { c.model.seed = to_uint(v); }},
      {"data_seed", [](auto& c, const auto& v) { c.data_seed = to_uint(v); }},
      {"text_seed", [](auto& c, const auto& v) { c.text_seed = to_uint(v); }},
      {"train_scenes", [](auto& c, const auto& v) { c.train_scenes = to_uint(v); }},
      {"eval_scenes", [](auto& c, const auto& v) { c.eval_scenes = to_uint(v); }},
      {"steps", [](auto& c, const auto& v) { c.steps = to_uint(v); }},
      {"grid",
       [](auto& c, const auto& v) {
         const auto d = dims(v, 3, 'x');
         c.model.grid.dims = {d[0], d[1], d[2]};
       }},
      {"voxel_size", [](auto& c, const auto& v) { c.model.grid.voxel_size = to_double(v); }},
      {"grid_origin",
       [](auto& c, const auto& v) {
         const auto r = reals(v, 3);
         c.model.grid.origin = Vec3(r[0], r[1], r[2]);
       }},
      {"image",
       [](auto& c, const auto& v) {
         const auto d = dims(v, 2, 'x');
         c.model.camera.image_width = d[0];
         c.model.camera.image_height = d[1];
       }},
      {"camera",
       [](auto& c, const auto& v) {
         const auto r = reals(v, 3);
         c.model.camera.position = Vec3(r[0], r[1], r[2]);
       }},
      {"camera_yaw", [](auto& c, const auto& v) { c.model.camera.yaw = to_double(v); }},
      {"cylinder",
       [](auto& c, const auto& v) {
         const auto d = dims(v, 3, 'x');
         c.model.cylinder.radial_bins = d[0];
         c.model.cylinder.azimuth_bins = d[1];
         c.model.cylinder.vertical_bins = d[2];
       }},
      {"cylinder_r_max",
       [](auto& c, const auto& v) {
         c.model.cylinder.r_max = to_double(v);
         c.cylinder_r_max_set = true;
       }},
      {"cylinder_z",
       [](auto& c, const auto& v) {
         const auto r = reals(v, 2);
         c.model.cylinder.z_min = r[0];
         c.model.cylinder.z_max = r[1];
         c.cylinder_z_set = true;
       }},
      {"cylinder_center",
       [](auto& c, const auto& v) {
         const auto r = reals(v, 2);
         c.model.cylinder.center_x = r[0];
         c.model.cylinder.center_y = r[1];
         c.cylinder_center_set = true;
       }},
      {"embed_dim", [](auto& c, const auto& v) { c.model.distill_dim = to_uint(v); }},
      {"cost_dim", [](auto& c, const auto& v) { c.model.cost_dim = to_uint(v); }},
      {"enc_hidden", [](auto& c, const auto& v) { c.model.enc_hidden = to_uint(v); }},
      {"enc_channels", [](auto& c, const auto& v) { c.model.enc_channels = to_uint(v); }},
      {"dec_channels", [](auto& c, const auto& v) { c.model.dec_channels = to_uint(v); }},
      {"distill_hidden", [](auto& c, const auto& v) { c.model.distill_hidden = to_uint(v); }},
      {"text_proj", [](auto& c, const auto& v) { c.model.text_proj = to_uint(v); }},
      {"guide_proj", [](auto& c, const auto& v) { c.model.guide_proj = to_uint(v); }},
      {"key_dim", [](auto& c, const auto& v) { c.model.key_dim = to_uint(v); }},
      {"psm_depths",
       [](auto& c, const auto& v) {
         c.model.psm_depths.clear();
         for (const auto& p : split(v, ',')) c.model.psm_depths.push_back(to_uint(p));
       }},
      {"sectors", [](auto& c, const auto& v) { c.model.sectors = to_uint(v); }},
      {"lr", [](auto& c, const auto& v) { c.model.learning_rate = to_double(v); }},
      {"tau", [](auto& c, const auto& v) { c.model.tau = to_double(v); }},
      {"ema_alpha", [](auto& c, const auto& v) { c.model.ema_alpha = to_double(v); }},
      {"nma_beta", [](auto& c, const auto& v) { c.model.walk.beta = to_double(v); }},
      {"nma_lambda", [](auto& c, const auto& v) { c.model.walk.lambda = to_double(v); }},
      {"use_psm", [](auto& c, const auto& v) { c.model.use_psm = to_bool(v); }},
      {"use_oca", [](auto& c, const auto& v) { c.model.use_oca = to_bool(v); }},
      {"use_nma", [](auto& c, const auto& v) { c.model.use_nma = to_bool(v); }},
      {"embed_noise", [](auto& c, const auto& v) { c.embed_noise = to_double(v); }},
      {"image_noise", [](auto& c, const auto& v) { c.image_noise = to_double(v); }},
      {"ablation", [](auto& c, const auto& v) { c.ablation = to_bool(v); }},
      {"fov_sweep", [](auto& c, const auto& v) { c.fov_sweep = reals(v, 0); }},
  };
  return keys;
}

/// Flat key=value text; '#' starts a comment. Errors carry line numbers.
inline ExperimentConfig parse_config(const std::string& text, const std::string& origin = "config") {
  ExperimentConfig cfg;
  std::map<std::string, std::size_t> seen;
  std::istringstream in(text);
  std::string line;
  std::size_t no = 0;
  while (std::getline(in, line)) {
    ++no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = cfgparse::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = origin + ":" + std::to_string(no) + ": ";
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    const std::string key = cfgparse::trim(line.substr(0, eq)), val = cfgparse::trim(line.substr(eq + 1));
    const auto it = config_keys().find(key);
    if (it == config_keys().end()) throw ConfigError(where + "unknown key '" + key + "'");
    if (seen.count(key))
      throw ConfigError(where + "duplicate key '" + key + "' (first set on line " + std::to_string(seen[key]) + ")");
    seen[key] = no;
    try {
      it->second(cfg, val);
    } catch (const std::exception& e) {
      throw ConfigError(where + "bad value '" + val + "' for " + key + ": " + e.what());
    }
  }
  cfg.finalize();
  try {
    cfg.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str(), path.string());
}

/// Canonical text form; parse_config(to_text(c)) reproduces c.
inline std::string to_text(const ExperimentConfig& c) {
  using cfgparse::fmt;
  const auto& m = c.model;
  std::ostringstream o;
  auto join = [](const auto& xs) {
    std::string s;
    for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + (std::ostringstream() << xs[i]).str();
    return s;
  };
  std::vector<std::string> fovs;
  for (double f : c.fov_sweep) fovs.push_back(fmt(f));
  o << "seed = " << m.seed << "\ndata_seed = " << c.data_seed << "\ntext_seed = " << c.text_seed
    << "\ntrain_scenes = " << c.train_scenes << "\neval_scenes = " << c.eval_scenes << "\nsteps = " << c.steps
    << "\ngrid = " << m.grid.dims[0] << "x" << m.grid.dims[1] << "x" << m.grid.dims[2]
    << "\nvoxel_size = " << fmt(m.grid.voxel_size) << "\ngrid_origin = " << fmt(m.grid.origin.x()) << ","
    << fmt(m.grid.origin.y()) << "," << fmt(m.grid.origin.z()) << "\nimage = " << m.camera.image_width << "x"
    << m.camera.image_height << "\ncamera = " << fmt(m.camera.position.x()) << "," << fmt(m.camera.position.y())
    << "," << fmt(m.camera.position.z()) << "\ncamera_yaw = " << fmt(m.camera.yaw) << "\ncylinder = "
    << m.cylinder.radial_bins << "x" << m.cylinder.azimuth_bins << "x" << m.cylinder.vertical_bins
    << "\ncylinder_r_max = " << fmt(m.cylinder.r_max) << "\ncylinder_z = " << fmt(m.cylinder.z_min) << ","
    << fmt(m.cylinder.z_max) << "\ncylinder_center = " << fmt(m.cylinder.center_x) << ","
    << fmt(m.cylinder.center_y) << "\nembed_dim = " << m.distill_dim << "\ncost_dim = " << m.cost_dim
    << "\nenc_hidden = " << m.enc_hidden << "\nenc_channels = " << m.enc_channels
    << "\ndec_channels = " << m.dec_channels << "\ndistill_hidden = " << m.distill_hidden
    << "\ntext_proj = " << m.text_proj << "\nguide_proj = " << m.guide_proj << "\nkey_dim = " << m.key_dim
    << "\npsm_depths = " << join(m.psm_depths) << "\nsectors = " << m.sectors << "\nlr = " << fmt(m.learning_rate)
    << "\ntau = " << fmt(m.tau) << "\nema_alpha = " << fmt(m.ema_alpha) << "\nnma_beta = " << fmt(m.walk.beta)
    << "\nnma_lambda = " << fmt(m.walk.lambda) << "\nuse_psm = " << (m.use_psm ? "true" : "false")
    << "\nuse_oca = " << (m.use_oca ? "true" : "false") << "\nuse_nma = " << (m.use_nma ? "true" : "false")
    << "\nembed_noise = " << fmt(c.embed_noise) << "\nimage_noise = " << fmt(c.image_noise)
    << "\nablation = " << (c.ablation ? "true" : "false") << "\n";
  if (!fovs.empty()) o << "fov_sweep = " << join(fovs) << "\n";
  return o.str();
}

// ---------------------------------------------------------------- data

struct ExperimentData {
  TextBank bank;
  std::vector<SceneSample> train, eval;
};

inline ExperimentData make_data(const ExperimentConfig& c) {
  ExperimentData d;
  const GeneratorConfig g = c.generator();
  d.bank = synthetic_text_bank(g.catalog, g.embed_dim, c.text_seed);
  for (std::size_t i = 0; i < c.train_scenes; ++i) d.train.push_back(generate_scene(c.data_seed + i, g, d.bank));
  for (std::size_t i = 0; i < c.eval_scenes; ++i)
    d.eval.push_back(generate_scene(c.data_seed + 1000000 + i, g, d.bank));
  return d;
}

inline MetricReport evaluate(const std::vector<SceneSample>& scenes, const TextBank& bank, const TrainState& st,
                             const ModelContext& ctx, double fov = 360.0) {
  ConfusionMatrix cm(ctx.cfg.catalog.size());
  for (const auto& s : scenes) cm.add(infer(fov < 360.0 ? fov_crop(s, fov) : s, bank, st, ctx), s.gt_grid);
  return report_from_confusion(cm, ctx.cfg.catalog);
}

inline MetricReport majority_baseline(const std::vector<SceneSample>& train, const std::vector<SceneSample>& eval,
                                      const ClassCatalog& cat) {
  std::vector<std::vector<std::uint8_t>> grids;
  for (const auto& s : train) grids.push_back(s.gt_grid);
  const std::uint8_t cls = majority_class(grids, cat.size());
  ConfusionMatrix cm(cat.size());
  for (const auto& s : eval) cm.add(majority_prediction(s.gt_grid, cls), s.gt_grid);
  return report_from_confusion(cm, cat);
}

// ---------------------------------------------------------------- reporting

inline std::string fmt_metric(double v) {
  if (std::isnan(v)) return "nan";
  char b[32];
  std::snprintf(b, sizeof b, "%.9g", v);
  return b;
}

struct HistoryRow {
  EpochRecord record;
  MetricReport report;
};

inline std::string csv_header(const ClassCatalog& cat) {
  std::string h = "epoch,steps";
  for (const auto& n : LossParts::names()) h += ",loss_" + n;
  for (const auto& n : cat.names) h += ",iou_" + n;
  return h + ",base_miou,novel_miou,miou";
}

inline std::string csv_row(const HistoryRow& r) {
  std::string s = std::to_string(r.record.epoch) + "," + std::to_string(r.record.steps);
  for (double v : r.record.mean.values()) s += "," + fmt_metric(v);
  for (double v : r.report.iou) s += "," + fmt_metric(v);
  return s + "," + fmt_metric(r.report.base_miou) + "," + fmt_metric(r.report.novel_miou) + "," +
         fmt_metric(r.report.miou);
}

/// Relative drop of the epoch-mean total loss from the initial epoch, plus
/// the same drop measured above the loss's lower bound (each affinity term
/// is bounded below by -3, every other term by 0).
struct LossDrop {
  double initial = 0, final = 0, relative = 0, lower_bound = 0, above_bound = 0;
};

inline LossDrop loss_drop(const std::vector<HistoryRow>& h, const ModelConfig& m) {
  LossDrop d;
  d.initial = h.front().record.mean.total;
  d.final = h.back().record.mean.total;
  d.relative = (d.initial - d.final) / std::abs(d.initial);
  d.lower_bound = -3.0 * (m.use_oca ? 3.0 : 2.0);
  d.above_bound = (d.initial - d.final) / (d.initial - d.lower_bound);
  return d;
}

struct AblationRow {
  std::string label;
  bool psm = false, oca = false, nma = false;
  MetricReport report;
  LossDrop drop;
};

struct FovRow {
  double fov = 360;
  MetricReport report;
};

struct RunResult {
  std::vector<HistoryRow> history;
  TrainState state;
  MetricReport final_report, baseline;
  LossDrop drop;
  double seconds = 0;
};

struct ExperimentResult {
  RunResult main;
  std::vector<AblationRow> ablation;
  std::vector<FovRow> fov;
};

inline RunResult train_and_evaluate(const ExperimentConfig& c, const ExperimentData& d, std::ostream* log) {
  const auto t0 = std::chrono::steady_clock::now();
  const ModelContext ctx(c.model);
  RunResult r;
  auto hook = [&](const EpochRecord& rec, const TrainState& st) {
    r.history.push_back({rec, evaluate(d.eval, d.bank, st, ctx)});
    if (log)
      *log << "  epoch " << rec.epoch << " step " << rec.steps << " loss " << fmt_metric(rec.mean.total)
           << " mIoU " << fmt_metric(r.history.back().report.miou) << std::endl;
  };
  TrainResult tr = train_loop(d.train, d.bank, c.model, c.steps, hook);
  r.state = std::move(tr.state);
  r.final_report = r.history.back().report;
  r.baseline = majority_baseline(d.train, d.eval, c.model.catalog);
  r.drop = loss_drop(r.history, c.model);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

/// Cumulative component ablation: baseline, +PsM, +OCA, +NMA.
inline std::vector<AblationRow> run_ablation(const ExperimentConfig& c, const ExperimentData& d,
                                             const RunResult* full, std::ostream* log) {
  const std::vector<std::tuple<std::string, bool, bool, bool>> rows = {
      {"baseline", false, false, false},
      {"+PsM", true, false, false},
      {"+PsM +OCA", true, true, false},
      {"+PsM +OCA +NMA", true, true, true}};
  std::vector<AblationRow> out;
  for (const auto& [label, psm, oca, nma] : rows) {
    ExperimentConfig v = c;
    v.model.use_psm = psm;
    v.model.use_oca = oca;
    v.model.use_nma = nma;
    AblationRow row{label, psm, oca, nma, {}, {}};
    if (full && psm == c.model.use_psm && oca == c.model.use_oca && nma == c.model.use_nma) {
      row.report = full->final_report;
      row.drop = full->drop;
    } else {
      if (log) *log << "ablation: " << label << std::endl;
      const RunResult r = train_and_evaluate(v, d, log);
      row.report = r.final_report;
      row.drop = r.drop;
    }
    out.push_back(std::move(row));
  }
  return out;
}

inline std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream o;
  o << "variant,psm,oca,nma,novel_miou,base_miou,miou\n";
  for (const auto& r : rows)
    o << r.label << "," << r.psm << "," << r.oca << "," << r.nma << "," << fmt_metric(r.report.novel_miou) << ","
      << fmt_metric(r.report.base_miou) << "," << fmt_metric(r.report.miou) << "\n";
  return o.str();
}

inline std::vector<FovRow> fov_sweep(const std::vector<double>& fovs, const std::vector<SceneSample>& eval,
                                     const TextBank& bank, const TrainState& st, const ModelContext& ctx) {
  std::vector<FovRow> out;
  for (double f : fovs) out.push_back({f, evaluate(eval, bank, st, ctx, f)});
  return out;
}

inline std::string fov_table(const std::vector<FovRow>& rows) {
  std::ostringstream o;
  o << "fov,novel_miou,base_miou,miou\n";
  for (const auto& r : rows)
    o << fmt_metric(r.fov) << "," << fmt_metric(r.report.novel_miou) << "," << fmt_metric(r.report.base_miou) << ","
      << fmt_metric(r.report.miou) << "\n";
  return o.str();
}

inline std::string summary_text(const ExperimentConfig& c, const ExperimentResult& e) {
  const auto& r = e.main;
  std::ostringstream o;
  o << "O3N synthetic experiment\n";
  o << "grid " << c.model.grid.dims[0] << "x" << c.model.grid.dims[1] << "x" << c.model.grid.dims[2] << ", image "
    << c.model.camera.image_width << "x" << c.model.camera.image_height << ", " << c.train_scenes << " train / "
    << c.eval_scenes << " eval scenes, " << c.steps << " steps, seed " << c.model.seed << "\n";
  o << "components: psm=" << c.model.use_psm << " oca=" << c.model.use_oca << " nma=" << c.model.use_nma << "\n\n";
  o << "loss: initial " << fmt_metric(r.drop.initial) << ", final epoch mean " << fmt_metric(r.drop.final)
    << ", relative drop " << fmt_metric(r.drop.relative) << ", drop above lower bound "
    << fmt_metric(r.drop.above_bound) << " (bound " << fmt_metric(r.drop.lower_bound) << ")\n\n";
  o << "class,split,iou,baseline_iou\n";
  for (std::size_t l = 0; l < c.model.catalog.size(); ++l)
    o << c.model.catalog.names[l] << "," << (c.model.catalog.base[l] ? "base" : "novel") << ","
      << fmt_metric(r.final_report.iou[l]) << "," << fmt_metric(r.baseline.iou[l]) << "\n";
  o << "\nmIoU " << fmt_metric(r.final_report.miou) << " (base " << fmt_metric(r.final_report.base_miou)
    << ", novel " << fmt_metric(r.final_report.novel_miou) << ")\n";
  o << "majority baseline mIoU " << fmt_metric(r.baseline.miou) << "\n";
  if (!e.ablation.empty()) o << "\nablation\n" << ablation_table(e.ablation);
  if (!e.fov.empty()) o << "\nfov sweep (trend only)\n" << fov_table(e.fov);
  return o.str();
}

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream f(p);
  if (!f) throw Error("cannot write " + p.string());
  f << s;
}

/// Generate, train, evaluate; writes metrics.csv, summary.txt, the
/// checkpoint and, when requested, ablation.csv and fov.csv.
inline ExperimentResult run_experiment(const ExperimentConfig& c, const std::filesystem::path& out,
                                       std::ostream* log = nullptr) {
  c.validate();
  std::filesystem::create_directories(out);
  const ExperimentData d = make_data(c);
  ExperimentResult e;
  if (log) *log << "training (" << c.steps << " steps)" << std::endl;
  e.main = train_and_evaluate(c, d, log);
  std::string csv = csv_header(c.model.catalog) + "\n";
  for (const auto& row : e.main.history) csv += csv_row(row) + "\n";
  write_text(out / "metrics.csv", csv);
  save_checkpoint(e.main.state, to_text(c), out / "checkpoint");
  if (!c.fov_sweep.empty()) {
    e.fov = fov_sweep(c.fov_sweep, d.eval, d.bank, e.main.state, ModelContext(c.model));
    write_text(out / "fov.csv", fov_table(e.fov));
  }
  if (c.ablation) {
    e.ablation = run_ablation(c, d, &e.main, log);
    write_text(out / "ablation.csv", ablation_table(e.ablation));
  }
  write_text(out / "summary.txt", summary_text(c, e));
  return e;
}

inline ExperimentResult run_experiment(const std::filesystem::path& config, const std::filesystem::path& out,
                                       std::ostream* log = nullptr) {
  return run_experiment(load_config(config), out, log);
}

}  // namespace o3n
