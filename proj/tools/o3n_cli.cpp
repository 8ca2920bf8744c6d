// o3n command-line front end. Exit codes: 0 ok, 2 config error, 3 runtime failure.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "o3n/o3n.hpp"

namespace fs = std::filesystem;
using namespace o3n;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

// Flag overrides go through the same parser as config files.
ExperimentConfig with_overrides(const std::string& path, const std::vector<std::pair<std::string, std::string>>& kv) {
  std::string text;
  if (!path.empty()) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot read config " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    text = ss.str();
  }
  std::string extra;
  for (const auto& [k, v] : kv) {
    if (v.empty()) continue;
    // Later keys replace earlier ones: strip matching lines from the file text.
    std::istringstream in(text);
    std::string line, kept;
    while (std::getline(in, line)) {
      const auto eq = line.find('=');
      if (eq != std::string::npos && cfgparse::trim(line.substr(0, eq)) == k) {
        kept += "\n";  // keep line numbering stable
        continue;
      }
      kept += line + "\n";
    }
    text = kept;
    extra += k + " = " + v + "\n";
  }
  return parse_config(text + extra, path.empty() ? "flags" : path);
}

TextBank bank_for(const ExperimentConfig& c, const std::string& texts_path) {
  if (texts_path.empty()) return synthetic_text_bank(c.model.catalog, c.model.distill_dim, c.text_seed);
  TextBank b;
  b.embeddings = load_matrix(texts_path);
  b.class_names = c.model.catalog.names;
  b.base_mask = c.model.catalog.base;
  if (b.embeddings.dim(0) != b.size() || b.embeddings.dim(1) != c.model.distill_dim)
    throw ConfigError("text matrix " + shape_str(b.embeddings.shape()) + " does not match " +
                      std::to_string(c.model.catalog.size()) + " classes x embed_dim " +
                      std::to_string(c.model.distill_dim));
  b.validate();
  return b;
}

void require_compatible(const GeneratorConfig& data, const ModelConfig& m) {
  const auto& a = data.grid;
  const auto& b = m.grid;
  if (a.dims != b.dims || a.voxel_size != b.voxel_size || a.origin != b.origin)
    throw ConfigError("dataset grid differs from the config grid");
  if (data.camera.image_width != m.camera.image_width || data.camera.image_height != m.camera.image_height ||
      data.camera.position != m.camera.position || data.camera.yaw != m.camera.yaw)
    throw ConfigError("dataset camera differs from the config camera");
  if (data.embed_dim != m.distill_dim) throw ConfigError("dataset embedding width differs from embed_dim");
  if (data.catalog.names != m.catalog.names) throw ConfigError("dataset classes differ from the config catalog");
}

std::ostream& open_out(const std::string& path, std::ofstream& f) {
  if (path.empty()) return std::cout;
  f.open(path);
  if (!f) throw Error("cannot write " + path);
  return f;
}

void print_report(std::ostream& o, const MetricReport& r, const ClassCatalog& cat) {
  o << "class,split,iou,gt_voxels\n";
  for (std::size_t l = 0; l < cat.size(); ++l)
    o << cat.names[l] << "," << (cat.base[l] ? "base" : "novel") << "," << fmt_metric(r.iou[l]) << ","
      << r.gt_count[l] << "\n";
  o << "base_miou,," << fmt_metric(r.base_miou) << ",\n";
  o << "novel_miou,," << fmt_metric(r.novel_miou) << ",\n";
  o << "miou,," << fmt_metric(r.miou) << "," << r.voxels << "\n";
}

struct Loaded {
  ExperimentConfig cfg;
  TrainState state;
};

Loaded load_model(const std::string& dir) {
  Checkpoint ck = load_checkpoint(dir);
  Loaded l{parse_config(ck.config_text, dir + "/manifest.json:config"), std::move(ck.state)};
  check_parameters(l.state.params, l.cfg.model);
  return l;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"O3N desk-scale omnidirectional open-vocabulary occupancy"};
  app.require_subcommand(1);

  // generate-data
  auto* gen = app.add_subcommand("generate-data", "Generate a synthetic scene dataset");
  std::string g_config, g_out, g_grid, g_image, g_embed, g_texts_out;
  std::size_t g_count = 8;
  std::uint64_t g_seed = 0;
  gen->add_option("--config", g_config, "key=value config supplying grid, camera and noise settings");
  gen->add_option("--out", g_out, "output directory")->required();
  gen->add_option("--count", g_count, "number of scenes")->check(CLI::PositiveNumber);
  gen->add_option("--seed", g_seed, "first scene seed");
  gen->add_option("--grid", g_grid, "grid dims HxWxD, e.g. 64x64x8");
  gen->add_option("--image", g_image, "ERP image size WxH, e.g. 512x256");
  gen->add_option("--embed-dim", g_embed, "pixel embedding width");
  gen->add_option("--texts-out", g_texts_out, "also write the class text embeddings as an O3NM matrix");

  // train
  auto* train = app.add_subcommand("train", "Train a model and write a checkpoint");
  std::string t_config, t_out, t_data, t_texts, t_steps;
  train->add_option("--config", t_config, "experiment config")->required();
  train->add_option("--out", t_out, "checkpoint directory")->required();
  train->add_option("--data", t_data, "dataset directory (generated from the config when omitted)");
  train->add_option("--texts", t_texts, "class text embeddings as an O3NM matrix");
  train->add_option("--steps", t_steps, "override the step count");

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  std::string e_ckpt, e_data, e_texts, e_out;
  double e_fov = 360.0;
  eval->add_option("--checkpoint", e_ckpt, "checkpoint directory")->required();
  eval->add_option("--data", e_data, "dataset directory")->required();
  eval->add_option("--texts", e_texts, "class text embeddings as an O3NM matrix");
  eval->add_option("--fov", e_fov, "horizontal field of view in degrees");
  eval->add_option("--out", e_out, "report CSV (stdout when omitted)");

  // align
  auto* align = app.add_subcommand("align", "Align text embeddings with prototypes");
  std::string a_texts, a_protos, a_out, a_method = "closed";
  nma::WalkConfig a_walk;
  align->add_option("--texts", a_texts, "text embeddings, O3NM matrix [L_t, d]")->required();
  align->add_option("--prototypes", a_protos, "prototypes, O3NM matrix [L_p, d]")->required();
  align->add_option("--out", a_out, "aligned text embeddings, O3NM matrix")->required();
  align->add_option("--beta", a_walk.beta, "walk restart weight");
  align->add_option("--lambda", a_walk.lambda, "affinity temperature");
  align->add_option("--tol", a_walk.tol, "iterative tolerance");
  align->add_option("--max-iters", a_walk.max_iters, "iterative step cap");
  align->add_option("--method", a_method, "closed or iterative")->check(CLI::IsMember({"closed", "iterative"}));

  // scan-viz
  auto* viz = app.add_subcommand("scan-viz", "Print the polar spiral scan order");
  std::size_t v_r = 4, v_p = 8;
  std::string v_out;
  viz->add_option("--radial", v_r, "radial bins")->check(CLI::PositiveNumber);
  viz->add_option("--azimuth", v_p, "azimuth bins")->check(CLI::PositiveNumber);
  viz->add_option("--out", v_out, "output file (stdout when omitted)");

  // run
  auto* run = app.add_subcommand("run", "Full experiment: generate, train, evaluate, report");
  std::string r_config, r_out;
  run->add_option("--config", r_config, "experiment config")->required();
  run->add_option("--out", r_out, "output directory")->required();

  // fov-sweep
  auto* sweep = app.add_subcommand("fov-sweep", "Evaluate a checkpoint across horizontal fields of view");
  std::string s_ckpt, s_data, s_texts, s_out;
  std::vector<double> s_fovs{90, 180, 270, 360};
  sweep->add_option("--checkpoint", s_ckpt, "checkpoint directory")->required();
  sweep->add_option("--data", s_data, "dataset directory")->required();
  sweep->add_option("--texts", s_texts, "class text embeddings as an O3NM matrix");
  sweep->add_option("--fovs", s_fovs, "fields of view in degrees")->delimiter(',');
  sweep->add_option("--out", s_out, "CSV output (stdout when omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*gen) {
      const auto cfg = with_overrides(g_config, {{"grid", g_grid}, {"image", g_image}, {"embed_dim", g_embed}});
      Dataset ds;
      ds.config = cfg.generator();
      const TextBank bank = bank_for(cfg, "");
      for (std::size_t i = 0; i < g_count; ++i) ds.samples.push_back(generate_scene(g_seed + i, ds.config, bank));
      save_dataset(ds, g_out);
      if (!g_texts_out.empty()) save_matrix(bank.embeddings, g_texts_out);
      std::cout << "wrote " << g_count << " scenes to " << g_out << "\n";
    } else if (*train) {
      const auto cfg = with_overrides(t_config, {{"steps", t_steps}});
      const TextBank bank = bank_for(cfg, t_texts);
      std::vector<SceneSample> data;
      if (t_data.empty()) {
        data = make_data(cfg).train;
      } else {
        Dataset ds = load_dataset(t_data);
        require_compatible(ds.config, cfg.model);
        data = std::move(ds.samples);
      }
      std::string csv = "epoch,steps";
      for (const auto& n : LossParts::names()) csv += ",loss_" + n;
      csv += "\n";
      auto hook = [&](const EpochRecord& r, const TrainState&) {
        csv += std::to_string(r.epoch) + "," + std::to_string(r.steps);
        for (double v : r.mean.values()) csv += "," + fmt_metric(v);
        csv += "\n";
        std::cerr << "epoch " << r.epoch << " step " << r.steps << " loss " << fmt_metric(r.mean.total) << "\n";
      };
      const TrainResult r = train_loop(data, bank, cfg.model, cfg.steps, hook);
      save_checkpoint(r.state, to_text(cfg), t_out);
      write_text(fs::path(t_out) / "train_history.csv", csv);
      std::cout << "checkpoint written to " << t_out << "\n";
    } else if (*eval || *sweep) {
      const bool is_sweep = static_cast<bool>(*sweep);
      const Loaded m = load_model(is_sweep ? s_ckpt : e_ckpt);
      const TextBank bank = bank_for(m.cfg, is_sweep ? s_texts : e_texts);
      const Dataset ds = load_dataset(is_sweep ? s_data : e_data);
      require_compatible(ds.config, m.cfg.model);
      const ModelContext ctx(m.cfg.model);
      std::ofstream f;
      if (is_sweep) {
        for (double v : s_fovs)
          if (!(v > 0.0 && v <= 360.0)) throw ConfigError("fov " + fmt_metric(v) + " outside (0, 360]");
        open_out(s_out, f) << fov_table(fov_sweep(s_fovs, ds.samples, bank, m.state, ctx));
      } else {
        if (!(e_fov > 0.0 && e_fov <= 360.0)) throw ConfigError("fov outside (0, 360]");
        print_report(open_out(e_out, f), evaluate(ds.samples, bank, m.state, ctx, e_fov), m.cfg.model.catalog);
      }
    } else if (*align) {
      a_walk.validate();
      const nma::Mat T0 = nma::to_matrix(load_matrix(a_texts)), P0 = nma::to_matrix(load_matrix(a_protos));
      if (T0.cols() != P0.cols()) throw ConfigError("texts and prototypes differ in embedding width");
      nma::Mat T;
      if (a_method == "closed") {
        T = nma::align_closed_form(T0, P0, a_walk);
      } else {
        const auto r = nma::align_iterative(T0, P0, a_walk);
        if (!r.converged) std::cerr << "warning: walk stopped after " << r.iterations << " steps without converging\n";
        T = r.T;
      }
      save_matrix(nma::to_tensor(T), a_out);
      std::cout << "aligned " << T.rows() << " text embeddings\n";
    } else if (*viz) {
      const ScanOrder s = spiral_order(v_r, v_p);
      std::ofstream f;
      std::ostream& o = open_out(v_out, f);
      const int w = static_cast<int>(std::to_string(v_r * v_p - 1).size()) + 1;
      o << "scan position per polar cell (rows: radius, columns: azimuth)\n";
      for (std::size_t r = 0; r < v_r; ++r) {
        for (std::size_t p = 0; p < v_p; ++p) o << std::setw(w) << s.inverse[r * v_p + p];
        o << "\n";
      }
    } else if (*run) {
      const auto cfg = load_config(r_config);
      const auto e = run_experiment(cfg, r_out, &std::cerr);
      std::cout << summary_text(cfg, e);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
