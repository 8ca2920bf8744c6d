#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "o3n/geometry.hpp"
#include "o3n/oca.hpp"
#include "o3n/tensor.hpp"

namespace o3n {

inline constexpr std::uint8_t kEmpty = 0;
inline constexpr std::uint8_t kBackground = 255;

/// Class ids are 1..L in catalog order; 0 is empty space.
struct ClassCatalog {
  std::vector<std::string> names;
  std::vector<bool> base;

  static ClassCatalog standard() {
    return {{"person", "vegetation", "terrain", "vehicle", "road", "building"},
            {true, true, true, false, false, false}};
  }

  std::size_t size() const { return names.size(); }
  void validate() const {
    if (names.empty() || names.size() != base.size()) throw ConfigError("class catalog names/base flags disagree");
    if (names.size() >= kBackground) throw ConfigError("class catalog too large");
  }
  std::uint8_t id(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return static_cast<std::uint8_t>(i + 1);
    return kEmpty;
  }
  bool is_base(std::uint8_t id) const { return id >= 1 && id <= names.size() && base[id - 1]; }
  bool is_novel(std::uint8_t id) const { return id >= 1 && id <= names.size() && !base[id - 1]; }
  std::vector<std::uint8_t> ids(bool base_set) const {
    std::vector<std::uint8_t> out;
    for (std::size_t i = 0; i < names.size(); ++i)
      if (base[i] == base_set) out.push_back(static_cast<std::uint8_t>(i + 1));
    return out;
  }
};

// ---------------------------------------------------------------- text embeddings

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline void normalize_row(double* v, std::size_t d) {
  double n2 = 0.0;
  for (std::size_t k = 0; k < d; ++k) n2 += v[k] * v[k];
  const double n = std::sqrt(n2);
  if (n > 0.0)
    for (std::size_t k = 0; k < d; ++k) v[k] /= n;
}

/// Synthetic stand-in for a language encoder: one seeded unit vector per
/// class name, rows in catalog order.
inline TextBank synthetic_text_bank(const ClassCatalog& cat, std::size_t dim, std::uint64_t seed = 0) {
  cat.validate();
  TextBank b;
  b.embeddings = Tensor({cat.size(), dim});
  for (std::size_t l = 0; l < cat.size(); ++l) {
    std::mt19937_64 rng(fnv1a(cat.names[l]) ^ seed);
    std::normal_distribution<double> n;
    double* row = b.embeddings.data() + l * dim;
    for (std::size_t k = 0; k < dim; ++k) row[k] = n(rng);
    normalize_row(row, dim);
  }
  b.class_names = cat.names;
  b.base_mask = cat.base;
  return b;
}

// ---------------------------------------------------------------- primitives

struct Box {
  Vec3 lo, hi;
  std::uint8_t cls = kEmpty;
  bool contains(const Vec3& p) const { return (p.array() >= lo.array()).all() && (p.array() < hi.array()).all(); }
};

/// Vertical cylinder standing on z0.
struct Cylinder {
  double x = 0, y = 0, z0 = 0, radius = 0, height = 0;
  std::uint8_t cls = kEmpty;
  bool contains(const Vec3& p) const {
    return std::hypot(p.x() - x, p.y() - y) < radius && p.z() >= z0 && p.z() < z0 + height;
  }
};

struct PlacementConfig {
  bool ground = true;
  double road_width_min = 2.0, road_width_max = 3.6;
  std::size_t buildings_min = 3, buildings_max = 5;
  std::size_t vehicles_min = 1, vehicles_max = 3;
  std::size_t persons_min = 1, persons_max = 4;
  std::size_t vegetation_min = 2, vegetation_max = 4;
  double keep_out = 1.2;  // free radius around the camera

  static PlacementConfig empty() {
    PlacementConfig c;
    c.ground = false;
    c.buildings_min = c.buildings_max = 0;
    c.vehicles_min = c.vehicles_max = 0;
    c.persons_min = c.persons_max = 0;
    c.vegetation_min = c.vegetation_max = 0;
    return c;
  }
};

struct Placement {
  bool ground = false;
  // crossroads: one strip along x (fixed y) and one along y (fixed x)
  double road_center_y = 0.0, road_half_width = 0.0;
  double road_center_x = 0.0, cross_half_width = 0.0;
  bool on_road(double x, double y) const {
    return ground && (std::abs(y - road_center_y) < road_half_width || std::abs(x - road_center_x) < cross_half_width);
  }
  std::vector<Box> boxes;
  std::vector<Cylinder> cylinders;
};

inline Placement sample_placement(std::uint64_t seed, const CubicGridSpec& grid, const ErpCamera& cam,
                                  const PlacementConfig& cfg, const ClassCatalog& cat) {
  std::mt19937_64 rng(seed);
  auto uni = [&](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };
  const Vec3 lo = grid.origin, hi = grid.upper();
  // counts are per 12.8 m x 12.8 m of floor so larger grids stay equally cluttered
  const double area = std::max(1.0, (hi.x() - lo.x()) * (hi.y() - lo.y()) / (12.8 * 12.8));
  auto count = [&](std::size_t lo_n, std::size_t hi_n) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(lo_n, std::max(lo_n, hi_n))(rng);
    return static_cast<std::size_t>(std::lround(static_cast<double>(n) * area));
  };
  const double ground_top = lo.z() + grid.voxel_size;
  Placement p;
  p.ground = cfg.ground;
  if (cfg.ground) {
    p.road_half_width = 0.5 * uni(cfg.road_width_min, cfg.road_width_max);
    p.road_center_y = cam.position.y() + uni(-1.5, 1.5);
    p.cross_half_width = 0.5 * uni(cfg.road_width_min, cfg.road_width_max);
    p.road_center_x = cam.position.x() + uni(-1.5, 1.5);
  }
  auto clear_of_camera = [&](double x0, double y0, double x1, double y1) {
    const double cx = std::clamp(cam.position.x(), x0, x1), cy = std::clamp(cam.position.y(), y0, y1);
    return std::hypot(cx - cam.position.x(), cy - cam.position.y()) > cfg.keep_out;
  };
  auto place_boxes = [&](std::size_t n, std::uint8_t cls, double smin, double smax, double hmin, double hmax,
                         bool want_road) {
    for (std::size_t i = 0, tries = 0; i < n && tries < 200; ++tries) {
      const double sx = uni(smin, smax), sy = want_road ? uni(smin * 0.5, smax * 0.5) : uni(smin, smax);
      const double x0 = uni(lo.x(), hi.x() - sx), y0 = uni(lo.y(), hi.y() - sy);
      if (!clear_of_camera(x0, y0, x0 + sx, y0 + sy)) continue;
      if (want_road != p.on_road(x0 + sx / 2, y0 + sy / 2)) continue;
      const double h = uni(hmin, hmax);
      p.boxes.push_back({Vec3(x0, y0, ground_top), Vec3(x0 + sx, y0 + sy, std::min(hi.z(), ground_top + h)), cls});
      ++i;
    }
  };
  auto place_cylinders = [&](std::size_t n, std::uint8_t cls, double rmin, double rmax, double hmin, double hmax) {
    for (std::size_t i = 0, tries = 0; i < n && tries < 200; ++tries) {
      const double r = uni(rmin, rmax);
      const double x = uni(lo.x() + r, hi.x() - r), y = uni(lo.y() + r, hi.y() - r);
      if (!clear_of_camera(x - r, y - r, x + r, y + r) || p.on_road(x, y)) continue;
      p.cylinders.push_back({x, y, ground_top, r, uni(hmin, hmax), cls});
      ++i;
    }
  };
  if (const auto id = cat.id("building"))
    place_boxes(count(cfg.buildings_min, cfg.buildings_max), id, 2.0, 4.4, 1.6, 3.2, false);
  if (const auto id = cat.id("vehicle"))
    place_boxes(count(cfg.vehicles_min, cfg.vehicles_max), id, 1.2, 2.4, 0.8, 1.2, cfg.ground);
  if (const auto id = cat.id("vegetation"))
    place_cylinders(count(cfg.vegetation_min, cfg.vegetation_max), id, 0.5, 1.0, 1.2, 2.8);
  if (const auto id = cat.id("person"))
    place_cylinders(count(cfg.persons_min, cfg.persons_max), id, 0.3, 0.5, 1.2, 1.8);
  return p;
}

/// Point-in-primitive labelling of voxel centres; later primitives win.
inline std::vector<std::uint8_t> voxelize(const Placement& p, const CubicGridSpec& grid, const ClassCatalog& cat) {
  std::vector<std::uint8_t> out(grid.count(), kEmpty);
  const std::uint8_t road = cat.id("road"), terrain = cat.id("terrain");
  for (std::size_t i = 0; i < grid.dims[0]; ++i)
    for (std::size_t j = 0; j < grid.dims[1]; ++j)
      for (std::size_t k = 0; k < grid.dims[2]; ++k) {
        const Vec3 c = grid.center(i, j, k);
        std::uint8_t v = kEmpty;
        if (p.ground && k == 0) v = p.on_road(c.x(), c.y()) ? road : terrain;
        for (const Box& b : p.boxes)
          if (b.contains(c)) v = b.cls;
        for (const Cylinder& cy : p.cylinders)
          if (cy.contains(c)) v = cy.cls;
        out[grid.flat(i, j, k)] = v;
      }
  return out;
}

// ---------------------------------------------------------------- rendering

/// Exact voxel traversal (Amanatides-Woo) from `origin` along `dir`.
/// Returns the first non-empty label, or kBackground on grid exit.
inline std::uint8_t cast_ray(const std::vector<std::uint8_t>& labels, const CubicGridSpec& grid, const Vec3& origin,
                             const Vec3& dir) {
  const Vec3 g = (origin - grid.origin) / grid.voxel_size;
  std::array<long, 3> cell{}, step{};
  std::array<double, 3> t_max{}, t_delta{};
  for (int a = 0; a < 3; ++a) {
    cell[a] = static_cast<long>(std::floor(g[a]));
    if (cell[a] < 0 || cell[a] >= static_cast<long>(grid.dims[a])) return kBackground;
    const double d = dir[a];
    if (d > 0) {
      step[a] = 1;
      t_max[a] = (static_cast<double>(cell[a] + 1) - g[a]) / d;
      t_delta[a] = 1.0 / d;
    } else if (d < 0) {
      step[a] = -1;
      t_max[a] = (g[a] - static_cast<double>(cell[a])) / -d;
      t_delta[a] = -1.0 / d;
    } else {
      step[a] = 0;
      t_max[a] = t_delta[a] = std::numeric_limits<double>::infinity();
    }
  }
  while (true) {
    const std::uint8_t v = labels[grid.flat(cell[0], cell[1], cell[2])];
    if (v != kEmpty) return v;
    int a = 0;
    if (t_max[1] < t_max[a]) a = 1;
    if (t_max[2] < t_max[a]) a = 2;
    cell[a] += step[a];
    if (cell[a] < 0 || cell[a] >= static_cast<long>(grid.dims[a])) return kBackground;
    t_max[a] += t_delta[a];
  }
}

/// Class-id panorama: one ray through each pixel centre.
inline std::vector<std::uint8_t> render_erp(const std::vector<std::uint8_t>& labels, const CubicGridSpec& grid,
                                            const ErpCamera& cam) {
  cam.validate();
  if (labels.size() != grid.count()) throw ShapeError("render_erp: label volume does not match grid");
  if (!grid.contains(cam.position)) throw PreconditionError("render_erp: camera outside grid");
  std::vector<std::uint8_t> img(cam.image_width * cam.image_height);
  for (std::size_t y = 0; y < cam.image_height; ++y)
    for (std::size_t x = 0; x < cam.image_width; ++x)
      img[y * cam.image_width + x] = cast_ray(labels, grid, cam.position, erp_to_ray(x + 0.5, y + 0.5, cam));
  return img;
}

// ---------------------------------------------------------------- scenes

struct SceneSample {
  ErpCamera camera;
  std::vector<std::uint8_t> erp_semantic;  // [Himg, Wimg]
  Tensor f_seg;                            // [E, Himg, Wimg], unit columns
  Tensor image;                            // [3, Himg, Wimg]
  std::vector<std::uint8_t> gt_grid;       // [H, W, D]
  std::uint64_t seed = 0;
};

struct GeneratorConfig {
  CubicGridSpec grid;
  ErpCamera camera;
  ClassCatalog catalog = ClassCatalog::standard();
  PlacementConfig placement;
  std::size_t embed_dim = 512;
  double embed_noise = 0.35;  // per-component std before renormalisation, times 1/sqrt(E)
  double image_noise = 0.05;
};

inline std::array<double, 3> palette(std::uint8_t id) {
  switch (id) {
    case kBackground: return {0.55, 0.75, 0.95};
    case 1: return {0.86, 0.08, 0.24};
    case 2: return {0.42, 0.56, 0.14};
    case 3: return {0.60, 0.50, 0.30};
    case 4: return {0.00, 0.00, 0.56};
    case 5: return {0.50, 0.25, 0.50};
    case 6: return {0.45, 0.45, 0.45};
    default: {
      const double h = static_cast<double>(id) * 0.618034;
      return {std::fmod(h, 1.0), std::fmod(h * 2, 1.0), std::fmod(h * 3, 1.0)};
    }
  }
}

/// Noisy class-prototype rendering emulating a 2D open-vocabulary
/// segmenter. Background pixels carry pure noise. Values are rounded to
/// float32 so persisted scenes reload bit-exactly.
inline Tensor pixel_embeddings(const std::vector<std::uint8_t>& sem, std::size_t h, std::size_t w,
                               const TextBank& bank, double noise, std::mt19937_64& rng) {
  const std::size_t E = bank.dim();
  std::normal_distribution<double> n(0.0, noise / std::sqrt(static_cast<double>(E)));
  std::normal_distribution<double> unit(0.0, 1.0);
  Tensor f({E, h, w});
  std::vector<double> v(E);
  for (std::size_t p = 0; p < h * w; ++p) {
    const std::uint8_t id = sem[p];
    for (std::size_t k = 0; k < E; ++k) {
      if (id == kBackground || id == kEmpty || id > bank.size())
        v[k] = unit(rng);
      else
        v[k] = bank.embeddings[(id - 1) * E + k] + n(rng);
    }
    normalize_row(v.data(), E);
    for (std::size_t k = 0; k < E; ++k) f[k * h * w + p] = v[k];
  }
  round_to_float(f);
  return f;
}

inline Tensor render_image(const std::vector<std::uint8_t>& sem, std::size_t h, std::size_t w, double noise,
                           std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, noise);
  Tensor img({3, h, w});
  for (std::size_t p = 0; p < h * w; ++p) {
    const auto c = palette(sem[p]);
    for (std::size_t ch = 0; ch < 3; ++ch) img[ch * h * w + p] = c[ch] + n(rng);
  }
  round_to_float(img);
  return img;
}

inline SceneSample generate_scene(std::uint64_t seed, const GeneratorConfig& cfg, const TextBank& bank) {
  cfg.grid.validate();
  cfg.camera.validate();
  if (!cfg.grid.contains(cfg.camera.position)) throw PreconditionError("generate_scene: camera outside grid");
  SceneSample s;
  s.seed = seed;
  s.camera = cfg.camera;
  const Placement p = sample_placement(seed, cfg.grid, cfg.camera, cfg.placement, cfg.catalog);
  s.gt_grid = voxelize(p, cfg.grid, cfg.catalog);
  s.erp_semantic = render_erp(s.gt_grid, cfg.grid, cfg.camera);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
  const std::size_t h = cfg.camera.image_height, w = cfg.camera.image_width;
  s.f_seg = pixel_embeddings(s.erp_semantic, h, w, bank, cfg.embed_noise, rng);
  s.image = render_image(s.erp_semantic, h, w, cfg.image_noise, rng);
  return s;
}

// ---------------------------------------------------------------- persistence

struct DatasetError : Error {
  using Error::Error;
};
struct MalformedManifest : DatasetError {
  using DatasetError::DatasetError;
};
struct ShapeMismatch : DatasetError {
  using DatasetError::DatasetError;
};
struct TruncatedBlob : DatasetError {
  using DatasetError::DatasetError;
};
struct UnsupportedVersion : DatasetError {
  using DatasetError::DatasetError;
};

inline constexpr int kDatasetVersion = 1;
inline constexpr int kCheckpointVersion = 1;

namespace io {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xffu));
}
inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

inline std::string encode_f32(const Tensor& t) {
  std::string out;
  out.reserve(t.size() * 4);
  for (double v : t.buffer()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  return out;
}

inline std::vector<double> decode_f32(const std::string& bytes) {
  std::vector<double> out(bytes.size() / 4);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::bit_cast<float>(get_u32(p + 4 * i));
  return out;
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open " + path.string() + " for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("failed writing " + path.string());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw TruncatedBlob("missing blob " + path.string());
  return std::string(std::istreambuf_iterator<char>(f), {});
}

/// Reads a blob that must hold exactly `expected` bytes.
inline std::string read_blob(const std::filesystem::path& path, std::size_t expected) {
  std::string b = read_file(path);
  if (b.size() < expected)
    throw TruncatedBlob(path.string() + ": " + std::to_string(b.size()) + " of " + std::to_string(expected) +
                        " bytes");
  if (b.size() > expected)
    throw ShapeMismatch(path.string() + ": " + std::to_string(b.size()) + " bytes, manifest implies " +
                        std::to_string(expected));
  return b;
}

inline nlohmann::json read_manifest(const std::filesystem::path& path, const std::string& format, int version) {
  std::ifstream f(path);
  if (!f) throw MalformedManifest("missing manifest " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw MalformedManifest(path.string() + ": " + e.what());
  }
  if (!j.is_object() || !j.contains("format") || !j.contains("version"))
    throw MalformedManifest(path.string() + ": missing format/version");
  if (j["format"] != format) throw MalformedManifest(path.string() + ": not a " + format + " manifest");
  if (!j["version"].is_number_integer() || j["version"].get<int>() != version)
    throw UnsupportedVersion(path.string() + ": version " + j["version"].dump() + ", this build reads " +
                             std::to_string(version));
  return j;
}

template <class T>
T field(const nlohmann::json& j, const char* key) {
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw MalformedManifest(std::string("manifest field '") + key + "': " + e.what());
  }
}

}  // namespace io

struct Dataset {
  GeneratorConfig config;
  std::vector<SceneSample> samples;
};

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto& g = ds.config.grid;
  nlohmann::json j;
  j["format"] = "o3n-dataset";
  j["version"] = kDatasetVersion;
  j["catalog"] = {{"names", ds.config.catalog.names}, {"base", ds.config.catalog.base}};
  j["grid"] = {{"origin", {g.origin.x(), g.origin.y(), g.origin.z()}},
               {"voxel_size", g.voxel_size},
               {"dims", {g.dims[0], g.dims[1], g.dims[2]}}};
  j["embed_dim"] = ds.config.embed_dim;
  j["samples"] = nlohmann::json::array();
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const SceneSample& s = ds.samples[i];
    char stem[32];
    std::snprintf(stem, sizeof stem, "sample_%05zu", i);
    const std::string st(stem);
    const std::size_t h = s.camera.image_height, w = s.camera.image_width;
    io::write_file(dir / (st + "_grid.u8"), std::string(s.gt_grid.begin(), s.gt_grid.end()));
    io::write_file(dir / (st + "_semantic.u8"), std::string(s.erp_semantic.begin(), s.erp_semantic.end()));
    io::write_file(dir / (st + "_fseg.f32"), io::encode_f32(s.f_seg));
    io::write_file(dir / (st + "_image.f32"), io::encode_f32(s.image));
    j["samples"].push_back({{"seed", s.seed},
                            {"camera",
                             {{"width", w},
                              {"height", h},
                              {"position", {s.camera.position.x(), s.camera.position.y(), s.camera.position.z()}},
                              {"yaw", s.camera.yaw}}},
                            {"grid", {{"file", st + "_grid.u8"}, {"dtype", "uint8"}, {"shape", g.dims}}},
                            {"semantic", {{"file", st + "_semantic.u8"}, {"dtype", "uint8"}, {"shape", {h, w}}}},
                            {"f_seg", {{"file", st + "_fseg.f32"}, {"dtype", "float32"}, {"shape", s.f_seg.shape()}}},
                            {"image", {{"file", st + "_image.f32"}, {"dtype", "float32"}, {"shape", s.image.shape()}}}});
  }
  std::ofstream(dir / "manifest.json") << j.dump(1) << '\n';
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  const nlohmann::json j = io::read_manifest(dir / "manifest.json", "o3n-dataset", kDatasetVersion);
  Dataset ds;
  try {
    ds.config.catalog.names = io::field<std::vector<std::string>>(j.at("catalog"), "names");
    ds.config.catalog.base = io::field<std::vector<bool>>(j.at("catalog"), "base");
    const auto& g = j.at("grid");
    const auto o = io::field<std::vector<double>>(g, "origin");
    const auto d = io::field<std::vector<std::size_t>>(g, "dims");
    if (o.size() != 3 || d.size() != 3) throw MalformedManifest("grid origin/dims must have three entries");
    ds.config.grid.origin = Vec3(o[0], o[1], o[2]);
    ds.config.grid.voxel_size = io::field<double>(g, "voxel_size");
    ds.config.grid.dims = {d[0], d[1], d[2]};
    ds.config.embed_dim = io::field<std::size_t>(j, "embed_dim");
  } catch (const nlohmann::json::exception& e) {
    throw MalformedManifest(std::string("dataset manifest: ") + e.what());
  }
  try {
    ds.config.catalog.validate();
    ds.config.grid.validate();
  } catch (const Error& e) {
    throw MalformedManifest(std::string("dataset manifest: ") + e.what());
  }
  const auto& g = ds.config.grid;
  const auto& items = j.contains("samples") && j["samples"].is_array() ? j["samples"]
                                                                       : throw MalformedManifest("no sample list");
  for (const auto& it : items) {
    SceneSample s;
    std::vector<std::size_t> gs, ss, fs, is;
    std::string gf, sf, ff, imf;
    try {
      s.seed = io::field<std::uint64_t>(it, "seed");
      const auto& cam = it.at("camera");
      s.camera.image_width = io::field<std::size_t>(cam, "width");
      s.camera.image_height = io::field<std::size_t>(cam, "height");
      const auto p = io::field<std::vector<double>>(cam, "position");
      if (p.size() != 3) throw MalformedManifest("camera position needs three entries");
      s.camera.position = Vec3(p[0], p[1], p[2]);
      s.camera.yaw = io::field<double>(cam, "yaw");
      gs = io::field<std::vector<std::size_t>>(it.at("grid"), "shape");
      ss = io::field<std::vector<std::size_t>>(it.at("semantic"), "shape");
      fs = io::field<std::vector<std::size_t>>(it.at("f_seg"), "shape");
      is = io::field<std::vector<std::size_t>>(it.at("image"), "shape");
      gf = io::field<std::string>(it.at("grid"), "file");
      sf = io::field<std::string>(it.at("semantic"), "file");
      ff = io::field<std::string>(it.at("f_seg"), "file");
      imf = io::field<std::string>(it.at("image"), "file");
    } catch (const nlohmann::json::exception& e) {
      throw MalformedManifest(std::string("sample entry: ") + e.what());
    }
    const std::size_t h = s.camera.image_height, w = s.camera.image_width;
    if (gs != std::vector<std::size_t>{g.dims[0], g.dims[1], g.dims[2]})
      throw ShapeMismatch("sample grid shape " + shape_str(gs) + " differs from dataset grid");
    if (ss != std::vector<std::size_t>{h, w}) throw ShapeMismatch("semantic shape disagrees with camera");
    if (fs != std::vector<std::size_t>{ds.config.embed_dim, h, w}) throw ShapeMismatch("f_seg shape disagrees");
    if (is != std::vector<std::size_t>{3, h, w}) throw ShapeMismatch("image shape disagrees with camera");
    const std::string gb = io::read_blob(dir / gf, g.count());
    const std::string sb = io::read_blob(dir / sf, h * w);
    s.gt_grid.assign(gb.begin(), gb.end());
    s.erp_semantic.assign(sb.begin(), sb.end());
    s.f_seg = Tensor(fs, io::decode_f32(io::read_blob(dir / ff, shape_size(fs) * 4)));
    s.image = Tensor(is, io::decode_f32(io::read_blob(dir / imf, shape_size(is) * 4)));
    ds.samples.push_back(std::move(s));
  }
  if (!ds.samples.empty()) ds.config.camera = ds.samples.front().camera;
  return ds;
}

// ---------------------------------------------------------------- matrices

/// "O3NM", uint32 rows, uint32 cols, row-major little-endian float32.
inline void save_matrix(const Tensor& m, const std::filesystem::path& path) {
  if (m.rank() != 2) throw ShapeError("save_matrix expects a rank-2 tensor");
  std::string out = "O3NM";
  io::put_u32(out, static_cast<std::uint32_t>(m.dim(0)));
  io::put_u32(out, static_cast<std::uint32_t>(m.dim(1)));
  out += io::encode_f32(m);
  io::write_file(path, out);
}

inline Tensor load_matrix(const std::filesystem::path& path) {
  const std::string b = io::read_file(path);
  if (b.size() < 12 || b.compare(0, 4, "O3NM") != 0) throw MalformedManifest(path.string() + ": not an O3NM matrix");
  const auto* p = reinterpret_cast<const unsigned char*>(b.data());
  const std::size_t rows = io::get_u32(p + 4), cols = io::get_u32(p + 8);
  if (b.size() - 12 < rows * cols * 4) throw TruncatedBlob(path.string() + ": matrix data truncated");
  if (b.size() - 12 > rows * cols * 4) throw ShapeMismatch(path.string() + ": trailing bytes after matrix data");
  return Tensor({rows, cols}, io::decode_f32(b.substr(12)));
}

}  // namespace o3n
