#include "epio/io.hpp"

#include <json.hpp>

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

namespace epio {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
void put_le(std::string& out, T value) {
  static_assert(sizeof(T) == 4);
  std::uint32_t bits;
  std::memcpy(&bits, &value, 4);
  for (int i = 0; i < 4; ++i) out.push_back(char((bits >> (8 * i)) & 0xffu));
}

template <typename T>
T get_le(const std::string& in, std::size_t offset) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= std::uint32_t(static_cast<unsigned char>(in[offset + std::size_t(i)])) << (8 * i);
  T value;
  std::memcpy(&value, &bits, 4);
  return value;
}

std::string read_bytes(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_bytes(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot write " + path.string());
  f.write(bytes.data(), std::streamsize(bytes.size()));
  if (!f) throw FormatError("write failed: " + path.string());
}

// Object reader that remembers which keys were consumed.
class Fields {
 public:
  Fields(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  const json* object(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(where_ + ": unknown key \"" + it.key() + "\"");
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

json to_json(const ModelConfig& c) {
  return json{{"arch", c.arch == Architecture::Equivariant ? "equivariant" : "conventional"},
              {"decoder", c.decoder == DecoderKind::Canonical ? "canonical" : "equivariant"},
              {"use_cameras", c.use_cameras},
              {"orders", c.orders},
              {"latent_channels", c.latent_channels},
              {"patch_channels", c.patch_channels},
              {"latents", c.latents},
              {"latent_scalars", c.latent_scalars},
              {"cross_heads", c.cross_heads},
              {"heads", c.heads},
              {"depth", c.depth},
              {"patch", c.patch},
              {"frequencies", c.frequencies},
              {"decoder_width", c.decoder_width},
              {"decoder_heads", c.decoder_heads},
              {"width", c.width},
              {"height", c.height},
              {"baseline_width", c.baseline_width}};
}

ModelConfig model_from_json(const json& j) {
  ModelConfig c;
  Fields f(j, "model");
  std::string arch = c.arch == Architecture::Equivariant ? "equivariant" : "conventional";
  std::string decoder = c.decoder == DecoderKind::Canonical ? "canonical" : "equivariant";
  f.get("arch", arch);
  f.get("decoder", decoder);
  if (arch != "equivariant" && arch != "conventional") throw ConfigError("model.arch: unknown value " + arch);
  if (decoder != "canonical" && decoder != "equivariant") throw ConfigError("model.decoder: unknown value " + decoder);
  c.arch = arch == "equivariant" ? Architecture::Equivariant : Architecture::Conventional;
  c.decoder = decoder == "canonical" ? DecoderKind::Canonical : DecoderKind::Equivariant;
  f.get("use_cameras", c.use_cameras);
  f.get("orders", c.orders);
  f.get("latent_channels", c.latent_channels);
  f.get("patch_channels", c.patch_channels);
  f.get("latents", c.latents);
  f.get("latent_scalars", c.latent_scalars);
  f.get("cross_heads", c.cross_heads);
  f.get("heads", c.heads);
  f.get("depth", c.depth);
  f.get("patch", c.patch);
  f.get("frequencies", c.frequencies);
  f.get("decoder_width", c.decoder_width);
  f.get("decoder_heads", c.decoder_heads);
  f.get("width", c.width);
  f.get("height", c.height);
  f.get("baseline_width", c.baseline_width);
  f.finish();
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

json to_json(const TrainConfig& c) {
  return json{{"epochs", c.epochs},   {"batch", c.batch},     {"lr", c.lr},
              {"lr_halve_at", c.lr_halve_at}, {"weight_decay", c.weight_decay}, {"queries", c.queries},
              {"seed", c.seed},       {"max_steps", c.max_steps}};
}

TrainConfig train_from_json(const json& j) {
  TrainConfig c;
  Fields f(j, "train");
  f.get("epochs", c.epochs);
  f.get("batch", c.batch);
  f.get("lr", c.lr);
  f.get("lr_halve_at", c.lr_halve_at);
  f.get("weight_decay", c.weight_decay);
  f.get("queries", c.queries);
  f.get("seed", c.seed);
  f.get("max_steps", c.max_steps);
  f.finish();
  if (c.epochs < 0 || c.batch <= 0 || c.queries <= 0 || !(c.lr > 0) || c.weight_decay < 0 || c.max_steps < 0) {
    throw ConfigError("train: epochs, batch, queries, lr, weight_decay or max_steps out of range");
  }
  return c;
}

json to_json(const DatasetSpec& d) {
  const SceneSpec& s = d.scene;
  return json{{"min_spheres", s.min_spheres},
              {"max_spheres", s.max_spheres},
              {"floor", s.floor},
              {"scale_min", s.scale_min},
              {"scale_max", s.scale_max},
              {"radius_min", s.radius_min},
              {"radius_max", s.radius_max},
              {"spread", s.spread},
              {"floor_extent", s.floor_extent},
              {"checker_min", s.checker_min},
              {"checker_max", s.checker_max},
              {"distance_min", s.distance_min},
              {"distance_max", s.distance_max},
              {"baseline_min", s.baseline_min},
              {"baseline_max", s.baseline_max},
              {"elevation_min", s.elevation_min},
              {"elevation_max", s.elevation_max},
              {"fov", s.fov},
              {"width", s.width},
              {"height", s.height},
              {"min_valid_fraction", s.min_valid_fraction},
              {"test_fraction", d.test_fraction}};
}

DatasetSpec dataset_from_json(const json& j) {
  DatasetSpec d;
  SceneSpec& s = d.scene;
  Fields f(j, "data");
  f.get("min_spheres", s.min_spheres);
  f.get("max_spheres", s.max_spheres);
  f.get("floor", s.floor);
  f.get("scale_min", s.scale_min);
  f.get("scale_max", s.scale_max);
  f.get("radius_min", s.radius_min);
  f.get("radius_max", s.radius_max);
  f.get("spread", s.spread);
  f.get("floor_extent", s.floor_extent);
  f.get("checker_min", s.checker_min);
  f.get("checker_max", s.checker_max);
  f.get("distance_min", s.distance_min);
  f.get("distance_max", s.distance_max);
  f.get("baseline_min", s.baseline_min);
  f.get("baseline_max", s.baseline_max);
  f.get("elevation_min", s.elevation_min);
  f.get("elevation_max", s.elevation_max);
  f.get("fov", s.fov);
  f.get("width", s.width);
  f.get("height", s.height);
  f.get("min_valid_fraction", s.min_valid_fraction);
  f.get("test_fraction", d.test_fraction);
  f.finish();
  if (!(d.test_fraction >= 0.0 && d.test_fraction <= 1.0)) throw ConfigError("data.test_fraction must lie in [0, 1]");
  if (s.width <= 0 || s.height <= 0) throw ConfigError("data: image size must be positive");
  if (!(s.scale_min > 0 && s.scale_max >= s.scale_min)) throw ConfigError("data: bad scale range");
  return d;
}

json to_json(const Camera& c) {
  const Matrix3d& r = c.r.matrix();
  return json{{"fx", c.k.fx},
              {"fy", c.k.fy},
              {"cx", c.k.cx},
              {"cy", c.k.cy},
              {"width", c.width},
              {"height", c.height},
              {"rotation", {r(0, 0), r(0, 1), r(0, 2), r(1, 0), r(1, 1), r(1, 2), r(2, 0), r(2, 1), r(2, 2)}},
              {"translation", {c.t.x(), c.t.y(), c.t.z()}}};
}

Camera camera_from_json(const json& j) {
  Camera c;
  Fields f(j, "camera");
  std::vector<double> rot, trans;
  f.get("fx", c.k.fx);
  f.get("fy", c.k.fy);
  f.get("cx", c.k.cx);
  f.get("cy", c.k.cy);
  f.get("width", c.width);
  f.get("height", c.height);
  f.get("rotation", rot);
  f.get("translation", trans);
  f.finish();
  if (rot.size() != 9 || trans.size() != 3) throw FormatError("camera: rotation needs 9 and translation 3 entries");
  Matrix3d m;
  m << rot[0], rot[1], rot[2], rot[3], rot[4], rot[5], rot[6], rot[7], rot[8];
  c.r = Rotation(m, 1e-9);
  c.t = Vector3d(trans[0], trans[1], trans[2]);
  c.validate();
  return c;
}

json vec_json(const Vector3d& v) { return json::array({v.x(), v.y(), v.z()}); }

json to_json(const Scene& s) {
  json spheres = json::array(), planes = json::array();
  for (const auto& sp : s.spheres) {
    spheres.push_back({{"center", vec_json(sp.center)}, {"radius", sp.radius}, {"albedo", vec_json(sp.albedo)}});
  }
  for (const auto& p : s.planes) {
    planes.push_back({{"point", vec_json(p.point)},
                      {"normal", vec_json(p.normal)},
                      {"tangent", vec_json(p.tangent)},
                      {"half_extent", p.half_extent},
                      {"period", p.period},
                      {"albedo", vec_json(p.albedo)},
                      {"albedo_alt", vec_json(p.albedo_alt)}});
  }
  return json{{"scale", s.scale},
              {"spheres", spheres},
              {"planes", planes},
              {"light", {{"position", vec_json(s.light.position)}, {"intensity", s.light.intensity}}}};
}

std::string scene_id(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04d", index);
  return buf;
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

json parse_json(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(what + ": " + e.what());
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Rasters

std::string encode_raster(const Raster& r) {
  if (r.data.size() != std::size_t(r.width) * r.height * r.channels) throw FormatError("raster: payload size mismatch");
  std::string out = "EPIO";
  out.reserve(16 + 4 * r.data.size());
  put_le(out, r.width);
  put_le(out, r.height);
  put_le(out, r.channels);
  for (float v : r.data) put_le(out, v);
  return out;
}

Raster decode_raster(const std::string& bytes) {
  if (bytes.size() < 16 || bytes.compare(0, 4, "EPIO") != 0) throw FormatError("raster: bad magic");
  Raster r;
  r.width = get_le<std::uint32_t>(bytes, 4);
  r.height = get_le<std::uint32_t>(bytes, 8);
  r.channels = get_le<std::uint32_t>(bytes, 12);
  const std::uint64_t n = std::uint64_t(r.width) * r.height * r.channels;
  if (bytes.size() != 16 + 4 * n) throw FormatError("raster: payload length does not match header");
  r.data.resize(std::size_t(n));
  for (std::size_t i = 0; i < r.data.size(); ++i) r.data[i] = get_le<float>(bytes, 16 + 4 * i);
  return r;
}

void write_raster(const fs::path& path, const Raster& r) { write_bytes(path, encode_raster(r)); }
Raster read_raster(const fs::path& path) { return decode_raster(read_bytes(path)); }

Raster to_raster(const Matrix<double>& pixels, int width, int height) {
  if (pixels.rows() != Eigen::Index(width) * height) throw ShapeError("to_raster: row count != width * height");
  Raster r;
  r.width = std::uint32_t(width);
  r.height = std::uint32_t(height);
  r.channels = std::uint32_t(pixels.cols());
  r.data.reserve(std::size_t(pixels.size()));
  for (Eigen::Index i = 0; i < pixels.rows(); ++i) {
    for (Eigen::Index c = 0; c < pixels.cols(); ++c) r.data.push_back(float(pixels(i, c)));
  }
  return r;
}

Matrix<double> from_raster(const Raster& r) {
  Matrix<double> m(Eigen::Index(r.width) * r.height, Eigen::Index(r.channels));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(i, c) = r.data[std::size_t(i * m.cols() + c)];
  }
  return m;
}

// ---------------------------------------------------------------------------
// Configuration

RunConfig parse_run_config(const std::string& text) {
  const json j = parse_json(text, "config");
  RunConfig c;
  Fields f(j, "config");
  if (const json* m = f.object("model")) c.model = model_from_json(*m);
  if (const json* t = f.object("train")) c.train = train_from_json(*t);
  if (const json* d = f.object("data")) c.data = dataset_from_json(*d);
  f.finish();
  if (c.model.width != c.data.scene.width || c.model.height != c.data.scene.height) {
    throw ConfigError("config: model and data image sizes differ");
  }
  return c;
}

std::string dump_run_config(const RunConfig& c) {
  return dump(json{{"model", to_json(c.model)}, {"train", to_json(c.train)}, {"data", to_json(c.data)}});
}

DatasetSpec parse_dataset_spec(const std::string& text) {
  const json j = parse_json(text, "dataset spec");
  if (j.is_object() && j.contains("data")) return parse_run_config(text).data;
  return dataset_from_json(j);
}

std::string read_text(const fs::path& path) { return read_bytes(path); }
void write_text(const fs::path& path, const std::string& text) { write_bytes(path, text); }

// ---------------------------------------------------------------------------
// Datasets

std::uint64_t scene_seed(std::uint64_t seed, int index) {
  // splitmix64 of (seed, index)
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (std::uint64_t(index) + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

void generate_dataset(const fs::path& dir, const DatasetSpec& spec, int count, std::uint64_t seed) {
  if (count <= 0) throw std::invalid_argument("generate_dataset: count must be positive");
  const int tests = int(std::floor(count * spec.test_fraction + 1e-9));
  json scenes = json::array();
  for (int i = 0; i < count; ++i) {
    const std::string id = scene_id(i);
    const std::uint64_t s = scene_seed(seed, i);
    const Scene scene = gen_scene(s, spec.scene);
    const StereoRig rig = gen_stereo_pair(scene, s, spec.scene);
    const fs::path sub = dir / "scenes" / id;
    fs::create_directories(sub);
    const int w = spec.scene.width, h = spec.scene.height;
    for (std::size_t v = 0; v < rig.inputs.size(); ++v) {
      const RenderedView view = render(scene, rig.inputs.cameras[v]);
      write_raster(sub / ("view" + std::to_string(v) + "_rgb.epio"), to_raster(view.rgb, w, h));
      write_raster(sub / ("view" + std::to_string(v) + "_depth.epio"), to_raster(view.depth, w, h));
    }
    const RenderedView q = render(scene, rig.query);
    write_raster(sub / "query_rgb.epio", to_raster(q.rgb, w, h));
    write_raster(sub / "query_depth.epio", to_raster(q.depth, w, h));

    json cams = json::array();
    for (const auto& c : rig.inputs.cameras) cams.push_back(to_json(c));
    json doc = {{"id", id},
                {"seed", s},
                {"scene", to_json(scene)},
                {"inputs", cams},
                {"query", to_json(rig.query)},
                {"baseline", rig.baseline}};
    write_text(dir / "scenes" / (id + ".json"), dump(doc));
    scenes.push_back({{"id", id}, {"split", i < count - tests ? "train" : "test"}});
  }
  json index = {{"format", "epio-dataset"}, {"count", count}, {"seed", seed}, {"spec", to_json(spec)}, {"scenes", scenes}};
  write_text(dir / "index.json", dump(index));
}

Dataset load_dataset(const fs::path& dir) {
  const json index = parse_json(read_text(dir / "index.json"), "index.json");
  if (index.value("format", "") != "epio-dataset") throw FormatError("index.json: not an epio dataset");
  Dataset ds;
  ds.spec = dataset_from_json(index.at("spec"));
  for (const auto& entry : index.at("scenes")) {
    const std::string id = entry.at("id").get<std::string>();
    const json doc = parse_json(read_text(dir / "scenes" / (id + ".json")), id + ".json");
    const fs::path sub = dir / "scenes" / id;
    Sample s;
    s.id = id;
    std::vector<Camera> cams;
    for (const auto& c : doc.at("inputs")) cams.push_back(camera_from_json(c));
    for (std::size_t v = 0; v < cams.size(); ++v) {
      const Raster r = read_raster(sub / ("view" + std::to_string(v) + "_rgb.epio"));
      if (int(r.width) != cams[v].width || int(r.height) != cams[v].height || r.channels != 3) {
        throw FormatError(id + ": view raster does not match its camera");
      }
      s.input.images.push_back(from_raster(r));
    }
    s.input.cameras = CameraSet(std::move(cams));
    s.input.query = camera_from_json(doc.at("query"));
    const Raster d = read_raster(sub / "query_depth.epio");
    if (int(d.width) != s.input.query.width || int(d.height) != s.input.query.height || d.channels != 1) {
      throw FormatError(id + ": query depth raster does not match its camera");
    }
    s.depth = from_raster(d).col(0);
    s.valid.resize(std::size_t(s.depth.size()));
    for (Eigen::Index i = 0; i < s.depth.size(); ++i) s.valid[std::size_t(i)] = s.depth(i) > 0 ? 1 : 0;
    const std::string split = entry.at("split").get<std::string>();
    if (split == "train") {
      ds.train.push_back(std::move(s));
    } else if (split == "test") {
      ds.test.push_back(std::move(s));
    } else {
      throw FormatError(id + ": unknown split " + split);
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const fs::path& dir, const Checkpoint& ckpt) {
  fs::create_directories(dir);
  std::string params, moments;
  json entries = json::array();
  std::size_t offset = 0;
  for (const auto& [name, value] : ckpt.state.params) {
    entries.push_back({{"name", name}, {"shape", {value.rows(), value.cols()}}, {"offset", offset}});
    offset += std::size_t(value.size());
    for (Eigen::Index c = 0; c < value.cols(); ++c) {
      for (Eigen::Index r = 0; r < value.rows(); ++r) put_le(params, value(r, c));
    }
  }
  for (const auto* moment : {&ckpt.state.opt.m, &ckpt.state.opt.v}) {
    for (const auto& [name, value] : ckpt.state.params) {
      auto it = moment->find(name);
      for (Eigen::Index c = 0; c < value.cols(); ++c) {
        for (Eigen::Index r = 0; r < value.rows(); ++r) {
          put_le(moments, it == moment->end() || it->second.size() == 0 ? 0.0f : it->second(r, c));
        }
      }
    }
  }
  json manifest = {{"format", "epio-checkpoint"},
                   {"version", 1},
                   {"model", to_json(ckpt.model)},
                   {"train", to_json(ckpt.train)},
                   {"epoch", ckpt.state.epoch},
                   {"step", ckpt.state.step},
                   {"optimizer_step", ckpt.state.opt.step},
                   {"degenerate_frames", ckpt.state.degenerate_frames},
                   {"parameters", entries},
                   {"parameter_file", "parameters.bin"},
                   {"optimizer_file", "optimizer.bin"}};
  write_bytes(dir / "parameters.bin", params);
  write_bytes(dir / "optimizer.bin", moments);
  write_text(dir / "checkpoint.json", dump(manifest));
}

Checkpoint load_checkpoint(const fs::path& path) {
  const fs::path manifest_path = fs::is_directory(path) ? path / "checkpoint.json" : path;
  const fs::path dir = manifest_path.parent_path();
  const json m = parse_json(read_text(manifest_path), manifest_path.string());
  if (m.value("format", "") != "epio-checkpoint") throw FormatError("not an epio checkpoint: " + manifest_path.string());
  Checkpoint ckpt;
  ckpt.model = model_from_json(m.at("model"));
  ckpt.train = train_from_json(m.at("train"));
  ckpt.state.epoch = m.at("epoch").get<int>();
  ckpt.state.step = m.at("step").get<long>();
  ckpt.state.opt.step = m.at("optimizer_step").get<long>();
  ckpt.state.degenerate_frames = m.at("degenerate_frames").get<long>();
  const std::string params = read_bytes(dir / m.at("parameter_file").get<std::string>());
  const std::string moments = read_bytes(dir / m.at("optimizer_file").get<std::string>());
  std::size_t total = 0;
  for (const auto& e : m.at("parameters")) {
    const auto shape = e.at("shape").get<std::vector<Eigen::Index>>();
    if (shape.size() != 2) throw FormatError("checkpoint: parameter shape must have two entries");
    total += std::size_t(shape[0] * shape[1]);
  }
  if (params.size() != 4 * total || moments.size() != 8 * total) throw FormatError("checkpoint: blob size mismatch");
  for (const auto& e : m.at("parameters")) {
    const std::string name = e.at("name").get<std::string>();
    const auto shape = e.at("shape").get<std::vector<Eigen::Index>>();
    const std::size_t offset = e.at("offset").get<std::size_t>();
    Matrix<float> p(shape[0], shape[1]), mm(shape[0], shape[1]), vv(shape[0], shape[1]);
    for (Eigen::Index k = 0; k < p.size(); ++k) {
      // column-major storage order matches the blob
      p.data()[k] = get_le<float>(params, 4 * (offset + std::size_t(k)));
      mm.data()[k] = get_le<float>(moments, 4 * (offset + std::size_t(k)));
      vv.data()[k] = get_le<float>(moments, 4 * (total + offset + std::size_t(k)));
    }
    ckpt.state.params[name] = std::move(p);
    if (ckpt.state.opt.step > 0) {
      ckpt.state.opt.m[name] = std::move(mm);
      ckpt.state.opt.v[name] = std::move(vv);
    }
  }
  // Parameter names must be exactly those the model creates.
  const Model model(ckpt.model);
  const auto reference = model.init<float>(0);
  if (reference.size() != ckpt.state.params.size()) throw FormatError("checkpoint: parameter set does not match model");
  for (const auto& [name, value] : reference) {
    auto it = ckpt.state.params.find(name);
    if (it == ckpt.state.params.end() || it->second.rows() != value.rows() || it->second.cols() != value.cols()) {
      throw FormatError("checkpoint: missing or misshaped parameter " + name);
    }
  }
  return ckpt;
}

// ---------------------------------------------------------------------------
// PLY and metrics

std::string encode_ply(const Matrix<double>& points, const Matrix<double>& colors) {
  if (points.cols() != 3 || colors.cols() != 3 || points.rows() != colors.rows()) throw ShapeError("ply: shapes");
  std::ostringstream out;
  out << "ply\nformat ascii 1.0\nelement vertex " << points.rows()
      << "\nproperty float x\nproperty float y\nproperty float z\n"
         "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n";
  char buf[128];
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    auto byte = [&](int c) { return int(std::lround(std::clamp(colors(i, c), 0.0, 1.0) * 255.0)); };
    std::snprintf(buf, sizeof buf, "%.7g %.7g %.7g %d %d %d\n", points(i, 0), points(i, 1), points(i, 2), byte(0),
                  byte(1), byte(2));
    out << buf;
  }
  return out.str();
}

void write_ply(const fs::path& path, const Matrix<double>& points, const Matrix<double>& colors) {
  write_bytes(path, encode_ply(points, colors));
}

std::string metrics_json(const Metrics& m) {
  json j;
  j["count"] = m.count;
  if (m.empty()) {
    j["abs_rel"] = nullptr;
    j["rmse"] = nullptr;
    j["delta_125"] = nullptr;
    j["empty"] = true;
  } else {
    j["abs_rel"] = m.abs_rel;
    j["rmse"] = m.rmse;
    j["delta_125"] = m.delta_125;
  }
  return j.dump();
}

}  // namespace epio
