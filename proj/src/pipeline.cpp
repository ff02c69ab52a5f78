// Command implementations behind the CLI: config file parsing with strict key
// checking, the scene worker pool, dataset generation, training, held-out
// evaluation, the stiffness-error sweep and the report writer. All outputs
// are formatted through deterministic printf-style conversions so a rerun
// with the same config and seed reproduces every file byte for byte.
#include "defgrasp/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "defgrasp/rng.hpp"
#include "defgrasp/sampler.hpp"
#include "json.hpp"

namespace defgrasp::pipeline {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

// The sampler's pre-close clearance; executed grasps are projected back to
// rectangles with the same margin so a rigid grasp round-trips to its
// sampled width.
constexpr double kGripClearance = 0.01;

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string percent(int hits, int total) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.1f%% (%d/%d)", total > 0 ? 100.0 * hits / total : 0.0,
                hits, total);
  return buf;
}

// ---------------------------------------------------------------------------
// config parsing

void check_keys(const json& j, const std::string& section,
                std::initializer_list<const char*> allowed) {
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* a : allowed)
      if (item.key() == a) {
        known = true;
        break;
      }
    if (!known)
      throw ConfigError("unknown key '" + item.key() + "' in " + section);
  }
}

const json* find(const json& j, const char* key) {
  auto it = j.find(key);
  return it == j.end() ? nullptr : &*it;
}

double get_num(const json& j, const char* key, double fallback, const std::string& section) {
  const json* v = find(j, key);
  if (!v) return fallback;
  if (!v->is_number()) throw ConfigError("'" + std::string(key) + "' in " + section + " must be a number");
  return v->get<double>();
}

int get_int(const json& j, const char* key, int fallback, const std::string& section) {
  const json* v = find(j, key);
  if (!v) return fallback;
  if (!v->is_number_integer())
    throw ConfigError("'" + std::string(key) + "' in " + section + " must be an integer");
  return v->get<int>();
}

bool get_bool(const json& j, const char* key, bool fallback, const std::string& section) {
  const json* v = find(j, key);
  if (!v) return fallback;
  if (!v->is_boolean())
    throw ConfigError("'" + std::string(key) + "' in " + section + " must be a boolean");
  return v->get<bool>();
}

std::string get_str(const json& j, const char* key, const std::string& fallback,
                    const std::string& section) {
  const json* v = find(j, key);
  if (!v) return fallback;
  if (!v->is_string())
    throw ConfigError("'" + std::string(key) + "' in " + section + " must be a string");
  return v->get<std::string>();
}

std::vector<double> get_num_array(const json& v, const std::string& what) {
  if (!v.is_array() || v.empty())
    throw ConfigError(what + " must be a non-empty array of numbers");
  std::vector<double> out;
  for (const json& e : v) {
    if (!e.is_number()) throw ConfigError(what + " must contain only numbers");
    out.push_back(e.get<double>());
  }
  return out;
}

bool safe_name(const std::string& s) {
  if (s.empty()) return false;
  for (char c : s)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '-') return false;
  return true;
}

ObjectSpec parse_object(const json& j, const std::string& section) {
  if (!j.is_object()) throw ConfigError("entries of " + section + " must be objects");
  check_keys(j, section, {"name", "kind", "dims", "resolution", "mesh"});
  ObjectSpec spec;
  spec.name = get_str(j, "name", "", section);
  if (!safe_name(spec.name))
    throw ConfigError(section + " entries need a 'name' of [A-Za-z0-9_-] characters");
  const std::string scope = section + " object '" + spec.name + "'";
  spec.mesh_path = get_str(j, "mesh", "", scope);
  if (!spec.mesh_path.empty()) {
    if (find(j, "kind") || find(j, "dims") || find(j, "resolution"))
      throw ConfigError(scope + " sets both 'mesh' and primitive fields");
    return spec;
  }
  geometry::PrimitiveSpec ps;
  const std::string kind = get_str(j, "kind", "", scope);
  if (kind.empty()) throw ConfigError(scope + " needs either 'mesh' or 'kind' + 'dims'");
  try {
    ps.kind = geometry::primitive_kind_from_string(kind);
  } catch (const std::exception& e) {
    throw ConfigError(scope + ": " + e.what());
  }
  const json* dims = find(j, "dims");
  if (!dims) throw ConfigError(scope + " needs 'dims'");
  ps.dims = get_num_array(*dims, "'dims' of " + scope);
  ps.resolution = get_int(j, "resolution", ps.resolution, scope);
  try {
    ps.validate();
  } catch (const std::exception& e) {
    throw ConfigError(scope + ": " + e.what());
  }
  spec.primitive = ps;
  return spec;
}

std::vector<ObjectSpec> parse_objects(const json& j, const std::string& section) {
  if (!j.is_array()) throw ConfigError(section + " must be an array");
  std::vector<ObjectSpec> out;
  for (const json& e : j) out.push_back(parse_object(e, section));
  for (size_t a = 0; a < out.size(); ++a)
    for (size_t b = a + 1; b < out.size(); ++b)
      if (out[a].name == out[b].name)
        throw ConfigError("duplicate object name '" + out[a].name + "' in " + section);
  return out;
}

uint64_t get_seed(const json& j, uint64_t fallback) {
  const json* v = find(j, "seed");
  if (!v) return fallback;
  if (v->is_number_unsigned()) return v->get<uint64_t>();
  if (v->is_number_integer() && v->get<int64_t>() >= 0)
    return static_cast<uint64_t>(v->get<int64_t>());
  throw ConfigError("'seed' must be a non-negative integer");
}

void parse_vec3(const json& j, const char* key, geometry::Vec3& out, const std::string& section) {
  const json* v = find(j, key);
  if (!v) return;
  std::vector<double> a = get_num_array(*v, "'" + std::string(key) + "' in " + section);
  if (a.size() != 3)
    throw ConfigError("'" + std::string(key) + "' in " + section + " must have 3 entries");
  out = geometry::Vec3(a[0], a[1], a[2]);
}

void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

void validate_config(const RunConfig& c) {
  require(!c.out.empty(), "'out' must not be empty");
  require(c.jobs >= 1, "'jobs' must be >= 1");
  require(!c.stiffness.empty(), "'stiffness' must not be empty");
  for (double e : c.stiffness) require(e > 0.0, "'stiffness' values must be > 0");
  try {
    fem::MaterialParams m = c.material;
    m.young_modulus = c.stiffness.front();
    m.validate();
    c.gripper.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  require(c.camera.width >= 8 && c.camera.height >= 8, "camera must be at least 8x8 px");
  require(c.camera.scale > 0.0, "'scale' in camera must be > 0");
  require(c.camera.camera_height > 0.0, "'camera_height' in camera must be > 0");
  require(c.sim.dt > 0.0, "'dt' in sim must be > 0");
  require(c.sim.contact_stiffness > 0.0 && c.sim.contact_tangent_stiffness > 0.0,
          "contact stiffnesses in sim must be > 0");
  require(c.sim.cg_tolerance > 0.0, "'cg_tolerance' in sim must be > 0");
  require(c.sim.cg_max_iterations >= 0, "'cg_max_iterations' in sim must be >= 0");
  require(c.sim.ground_friction >= 0.0, "'ground_friction' in sim must be >= 0");
  const fem::GraspProtocol& g = c.protocol.grasp;
  require(g.settle_time >= 0.0 && g.post_lift_settle >= 0.0, "protocol times must be >= 0");
  require(g.descend_speed > 0.0 && g.close_speed > 0.0 && g.lift_speed > 0.0,
          "protocol speeds must be > 0");
  require(g.close_timeout > 0.0 && g.lift_height > 0.0 && g.min_separation >= 0.0 &&
              g.descent_force_limit > 0.0,
          "protocol limits must be positive");
  require(c.protocol.shake_jerk > 0.0 && c.protocol.shake_cap > 0.0 &&
              c.protocol.shake_pass > 0.0 && c.protocol.twist_jerk > 0.0 &&
              c.protocol.twist_cap > 0.0,
          "shake/twist ramps must be positive");
  require(c.protocol.contact_loss_time > 0.0 && c.protocol.slip_limit > 0.0,
          "failure thresholds must be positive");
  require(c.sampler_candidates >= 1, "'candidates' in sampler must be >= 1");
  require(c.sampler_max_keep >= 1, "'max_keep' in sampler must be >= 1");
  require(c.augmentations >= 0, "'augmentations' must be >= 0");
  require(c.train.learning_rate >= 0.0, "'learning_rate' in train must be >= 0");
  require(c.train.epochs >= 1, "'epochs' in train must be >= 1");
  require(c.train.batch_size >= 1, "'batch_size' in train must be >= 1");
  require(c.train.weights.w_q >= 0.0 && c.train.weights.w_angle >= 0.0 &&
              c.train.weights.w_w >= 0.0,
          "loss weights in train must be >= 0");
  require(c.decode.top_k >= 1, "'top_k' in decode must be >= 1");
  require(c.decode.smooth_sigma >= 0.0 && c.decode.min_peak_distance >= 0.0,
          "decode smoothing/peak distance must be >= 0");
  require(!c.sensitivity_grid.empty(), "'grid' in sensitivity must not be empty");
  for (double e : c.sensitivity_grid)
    require(e > -1.0, "sensitivity errors must be > -1 (the imaged modulus must stay positive)");
}

}  // namespace

RunConfig parse_config(const std::string& text, const std::string& origin) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError(origin + ": top level must be a JSON object");
  check_keys(j, "config",
             {"seed", "out", "jobs", "objects", "eval_objects", "stiffness", "material",
              "camera", "gripper", "sim", "protocol", "sampler", "augmentations", "train",
              "decode", "sensitivity"});

  RunConfig c;
  c.seed = get_seed(j, c.seed);
  c.out = get_str(j, "out", c.out, "config");
  c.jobs = get_int(j, "jobs", c.jobs, "config");
  if (const json* v = find(j, "objects")) c.objects = parse_objects(*v, "objects");
  if (const json* v = find(j, "eval_objects"))
    c.eval_objects = parse_objects(*v, "eval_objects");
  if (const json* v = find(j, "stiffness")) c.stiffness = get_num_array(*v, "'stiffness'");

  if (const json* v = find(j, "material")) {
    check_keys(*v, "material", {"poisson_ratio", "density", "rayleigh_alpha", "rayleigh_beta"});
    c.material.poisson_ratio = get_num(*v, "poisson_ratio", c.material.poisson_ratio, "material");
    c.material.density = get_num(*v, "density", c.material.density, "material");
    c.material.rayleigh_alpha = get_num(*v, "rayleigh_alpha", c.material.rayleigh_alpha, "material");
    c.material.rayleigh_beta = get_num(*v, "rayleigh_beta", c.material.rayleigh_beta, "material");
  }
  if (const json* v = find(j, "camera")) {
    check_keys(*v, "camera", {"width", "height", "scale", "camera_height", "center"});
    c.camera.width = get_int(*v, "width", c.camera.width, "camera");
    c.camera.height = get_int(*v, "height", c.camera.height, "camera");
    c.camera.scale = get_num(*v, "scale", c.camera.scale, "camera");
    c.camera.camera_height = get_num(*v, "camera_height", c.camera.camera_height, "camera");
    if (const json* ctr = find(*v, "center")) {
      std::vector<double> a = get_num_array(*ctr, "'center' in camera");
      if (a.size() != 2) throw ConfigError("'center' in camera must have 2 entries");
      c.camera.center = Eigen::Vector2d(a[0], a[1]);
    }
  }
  if (const json* v = find(j, "gripper")) {
    check_keys(*v, "gripper",
               {"pad_width", "pad_height", "pad_thickness", "finger_length", "palm_thickness",
                "max_opening", "close_force", "friction"});
    c.gripper.pad_width = get_num(*v, "pad_width", c.gripper.pad_width, "gripper");
    c.gripper.pad_height = get_num(*v, "pad_height", c.gripper.pad_height, "gripper");
    c.gripper.pad_thickness = get_num(*v, "pad_thickness", c.gripper.pad_thickness, "gripper");
    c.gripper.finger_length = get_num(*v, "finger_length", c.gripper.finger_length, "gripper");
    c.gripper.palm_thickness = get_num(*v, "palm_thickness", c.gripper.palm_thickness, "gripper");
    c.gripper.max_opening = get_num(*v, "max_opening", c.gripper.max_opening, "gripper");
    c.gripper.close_force = get_num(*v, "close_force", c.gripper.close_force, "gripper");
    c.gripper.friction = get_num(*v, "friction", c.gripper.friction, "gripper");
  }
  if (const json* v = find(j, "sim")) {
    check_keys(*v, "sim",
               {"dt", "contact_stiffness", "contact_tangent_stiffness", "cg_tolerance",
                "cg_max_iterations", "gravity", "ground_friction"});
    c.sim.dt = get_num(*v, "dt", c.sim.dt, "sim");
    c.sim.contact_stiffness = get_num(*v, "contact_stiffness", c.sim.contact_stiffness, "sim");
    c.sim.contact_tangent_stiffness =
        get_num(*v, "contact_tangent_stiffness", c.sim.contact_tangent_stiffness, "sim");
    c.sim.cg_tolerance = get_num(*v, "cg_tolerance", c.sim.cg_tolerance, "sim");
    c.sim.cg_max_iterations = get_int(*v, "cg_max_iterations", c.sim.cg_max_iterations, "sim");
    parse_vec3(*v, "gravity", c.sim.gravity, "sim");
    c.sim.ground_friction = get_num(*v, "ground_friction", c.sim.ground_friction, "sim");
  }
  if (const json* v = find(j, "protocol")) {
    check_keys(*v, "protocol",
               {"settle_time", "descend_speed", "descent_force_limit", "close_speed",
                "close_timeout", "min_separation", "lift_height", "lift_speed",
                "post_lift_settle", "pretest_pose", "shake_jerk", "shake_cap", "shake_pass",
                "twist_jerk", "twist_cap", "contact_loss_time", "slip_limit"});
    fem::GraspProtocol& g = c.protocol.grasp;
    g.settle_time = get_num(*v, "settle_time", g.settle_time, "protocol");
    g.descend_speed = get_num(*v, "descend_speed", g.descend_speed, "protocol");
    g.descent_force_limit = get_num(*v, "descent_force_limit", g.descent_force_limit, "protocol");
    g.close_speed = get_num(*v, "close_speed", g.close_speed, "protocol");
    g.close_timeout = get_num(*v, "close_timeout", g.close_timeout, "protocol");
    g.min_separation = get_num(*v, "min_separation", g.min_separation, "protocol");
    g.lift_height = get_num(*v, "lift_height", g.lift_height, "protocol");
    g.lift_speed = get_num(*v, "lift_speed", g.lift_speed, "protocol");
    g.post_lift_settle = get_num(*v, "post_lift_settle", g.post_lift_settle, "protocol");
    g.pretest_pose = get_bool(*v, "pretest_pose", g.pretest_pose, "protocol");
    c.protocol.shake_jerk = get_num(*v, "shake_jerk", c.protocol.shake_jerk, "protocol");
    c.protocol.shake_cap = get_num(*v, "shake_cap", c.protocol.shake_cap, "protocol");
    c.protocol.shake_pass = get_num(*v, "shake_pass", c.protocol.shake_pass, "protocol");
    c.protocol.twist_jerk = get_num(*v, "twist_jerk", c.protocol.twist_jerk, "protocol");
    c.protocol.twist_cap = get_num(*v, "twist_cap", c.protocol.twist_cap, "protocol");
    c.protocol.contact_loss_time =
        get_num(*v, "contact_loss_time", c.protocol.contact_loss_time, "protocol");
    c.protocol.slip_limit = get_num(*v, "slip_limit", c.protocol.slip_limit, "protocol");
  }
  if (const json* v = find(j, "sampler")) {
    check_keys(*v, "sampler", {"candidates", "max_keep"});
    c.sampler_candidates = get_int(*v, "candidates", c.sampler_candidates, "sampler");
    c.sampler_max_keep = get_int(*v, "max_keep", c.sampler_max_keep, "sampler");
  }
  c.augmentations = get_int(j, "augmentations", c.augmentations, "config");
  if (const json* v = find(j, "train")) {
    check_keys(*v, "train", {"learning_rate", "epochs", "batch_size", "w_q", "w_angle", "w_w"});
    c.train.learning_rate = get_num(*v, "learning_rate", c.train.learning_rate, "train");
    c.train.epochs = get_int(*v, "epochs", c.train.epochs, "train");
    c.train.batch_size = get_int(*v, "batch_size", c.train.batch_size, "train");
    c.train.weights.w_q = get_num(*v, "w_q", c.train.weights.w_q, "train");
    c.train.weights.w_angle = get_num(*v, "w_angle", c.train.weights.w_angle, "train");
    c.train.weights.w_w = get_num(*v, "w_w", c.train.weights.w_w, "train");
  }
  if (const json* v = find(j, "decode")) {
    check_keys(*v, "decode", {"top_k", "smooth_sigma", "min_peak_distance", "center_offset"});
    c.decode.top_k = get_int(*v, "top_k", c.decode.top_k, "decode");
    c.decode.smooth_sigma = get_num(*v, "smooth_sigma", c.decode.smooth_sigma, "decode");
    c.decode.min_peak_distance =
        get_num(*v, "min_peak_distance", c.decode.min_peak_distance, "decode");
    c.decode.center_offset = get_num(*v, "center_offset", c.decode.center_offset, "decode");
  }
  if (const json* v = find(j, "sensitivity")) {
    check_keys(*v, "sensitivity", {"grid"});
    if (const json* g = find(*v, "grid"))
      c.sensitivity_grid = get_num_array(*g, "'grid' in sensitivity");
  }
  if (c.sensitivity_grid.empty())
    for (int i = -4; i <= 4; ++i) c.sensitivity_grid.push_back(0.15 * i);

  validate_config(c);
  return c;
}

RunConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), path.string());
}

void apply_overrides(RunConfig& config, const Overrides& overrides) {
  if (overrides.seed) config.seed = *overrides.seed;
  if (overrides.jobs) {
    if (*overrides.jobs < 1) throw ConfigError("'jobs' must be >= 1");
    config.jobs = *overrides.jobs;
  }
  if (overrides.out) {
    if (overrides.out->empty()) throw ConfigError("'out' must not be empty");
    config.out = *overrides.out;
  }
}

void parallel_for(int n, int jobs, const std::function<void(int)>& fn) {
  if (n <= 0) return;
  if (jobs <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (;;) {
      const int i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  const int count = std::min(jobs, n);
  pool.reserve(count);
  for (int t = 0; t < count; ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

// ---------------------------------------------------------------------------
// shared scene plumbing

namespace {

struct SceneRef {
  int object = 0;
  int stiffness = 0;
};

std::vector<SceneRef> scene_grid(size_t n_objects, size_t n_stiffness) {
  std::vector<SceneRef> grid;
  grid.reserve(n_objects * n_stiffness);
  for (size_t o = 0; o < n_objects; ++o)
    for (size_t s = 0; s < n_stiffness; ++s)
      grid.push_back({static_cast<int>(o), static_cast<int>(s)});
  return grid;
}

geometry::TetMesh build_mesh(const ObjectSpec& spec) {
  if (spec.primitive) return geometry::make_primitive(*spec.primitive);
  return geometry::load_tet_mesh(spec.mesh_path);
}

std::vector<fem::MaterialParams> materials_at(const RunConfig& c, double young) {
  fem::MaterialParams m = c.material;
  m.young_modulus = young;
  return {m};
}

// Renders the deformed (settled) boundary; the imaged modulus may differ from
// the simulated one (the sensitivity sweep exploits exactly that).
imaging::Views render_settled(const fem::SoftBodySim& sim, const RunConfig& c,
                              double young_imaged, const std::string& name) {
  geometry::SurfaceMesh surface = sim.rest_surface();
  surface.vertices = sim.surface_positions();
  return imaging::render_views(surface, materials_at(c, young_imaged), c.camera, name);
}

imaging::DecodeOptions decode_options(const RunConfig& c) {
  imaging::DecodeOptions o;
  o.smooth_sigma = c.decode.smooth_sigma;
  o.min_peak_distance = c.decode.min_peak_distance;
  o.center_offset = c.decode.center_offset;
  o.min_center_z = c.gripper.pad_height / 2.0;  // pad bottoms stay above the ground
  return o;
}

bool shake_success(const eval::ShakeResult& s, const eval::EvalProtocol& p) {
  if (!s.lift_succeeded) return false;
  for (double w : s.withstand)
    if (w < p.shake_pass) return false;
  return true;
}

bool twist_success(bool lifted, const eval::TwistResult& t, const eval::EvalProtocol& p) {
  return lifted && t.minimum >= p.twist_cap - 1e-9;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

// P5 binary graymap of v in [lo, hi], row 0 at the top.
void write_pgm(const fs::path& path, const imaging::Image& img, float lo, float hi) {
  std::string data = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) +
                     "\n255\n";
  data.reserve(data.size() + img.v.size());
  const float span = hi > lo ? hi - lo : 1.0f;
  for (float v : img.v) {
    const float t = std::clamp((v - lo) / span, 0.0f, 1.0f);
    data.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(t * 255.0f))));
  }
  write_text(path, data);
}

std::string scene_stem(const ObjectSpec& obj, int stiffness_index) {
  return obj.name + "_s" + std::to_string(stiffness_index);
}

}  // namespace

// ---------------------------------------------------------------------------
// gen-dataset

int gen_dataset(const RunConfig& c) {
  if (c.objects.empty()) throw ConfigError("gen-dataset needs a non-empty 'objects' list");
  const fs::path dir = fs::path(c.out) / "dataset";
  fs::create_directories(dir);

  struct ObjectData {
    geometry::TetMesh mesh;
    geometry::SurfaceMesh surface;
    std::vector<GraspCandidate> candidates;
    bool ok = false;
  };
  std::vector<ObjectData> objects(c.objects.size());
  int skipped = 0;
  for (size_t i = 0; i < c.objects.size(); ++i) {
    ObjectData& od = objects[i];
    od.mesh = build_mesh(c.objects[i]);
    od.surface = geometry::extract_surface(od.mesh);
    try {
      od.candidates =
          sampler::sample_antipodal(od.surface, c.gripper, c.sampler_candidates,
                                    hash_stream(c.seed, "sample", i), c.objects[i].name);
      od.candidates =
          sampler::filter_collisions(od.candidates, od.surface, c.gripper, c.sampler_max_keep);
      od.ok = true;
    } catch (const std::exception& e) {
      std::cerr << "warning: skipping object " << c.objects[i].name << ": " << e.what()
                << "\n";
      ++skipped;
    }
  }

  struct SceneOut {
    bool ok = false;
    int positives = 0;
    std::vector<std::string> tensors;
    std::string rows;
  };
  const std::vector<SceneRef> grid = scene_grid(c.objects.size(), c.stiffness.size());
  std::vector<SceneOut> outs(grid.size());

  parallel_for(static_cast<int>(grid.size()), c.jobs, [&](int idx) {
    const SceneRef ref = grid[idx];
    const ObjectData& od = objects[ref.object];
    if (!od.ok) return;
    const ObjectSpec& obj = c.objects[ref.object];
    const double young = c.stiffness[ref.stiffness];
    SceneOut& out = outs[idx];

    fem::SoftBodySim sim(od.mesh, materials_at(c, young), c.sim, c.gripper);
    const fem::SimSnapshot settled = fem::settle_object(sim, c.protocol.grasp.settle_time);
    const imaging::Views views = render_settled(sim, c, young, obj.name);

    std::vector<imaging::LabeledRect> rects;
    for (size_t g = 0; g < od.candidates.size(); ++g) {
      const GraspCandidate& cand = od.candidates[g];
      const fem::GraspTrialLog trial =
          fem::simulate_grasp(sim, settled, cand, c.protocol.grasp);
      const eval::ShakeResult shake = eval::shake_task(sim, trial, c.protocol);
      const eval::GraspLabel label = eval::label_grasp(shake);
      if (label.positive) {
        // ground truth carries the grasp as executed: a soft object that let
        // the fingers squeeze far past its silhouette is labeled with that
        // narrower (pinch) width, plus the sampler's pre-close clearance
        GraspCandidate executed = cand;
        executed.width =
            std::min(trial.close_separation + kGripClearance, c.gripper.max_opening);
        rects.push_back({imaging::project_grasp(executed, c.camera, c.gripper), label.quality});
        ++out.positives;
      }
      out.rows += obj.name + "," + fmt(young) + "," + std::to_string(g) + "," +
                  fmt(cand.center.x()) + "," + fmt(cand.center.y()) + "," +
                  fmt(cand.center.z()) + "," + fmt(cand.yaw()) + "," + fmt(cand.width) + "," +
                  std::to_string(int(trial.closed)) + "," + std::to_string(int(trial.lifted)) +
                  "," + fmt(trial.close_separation) + "," + fmt(shake.average) + "," +
                  std::to_string(int(label.positive)) + "," + fmt(label.quality) + "\n";
    }

    imaging::Sample base;
    base.depth = views.depth;
    base.stiffness = views.stiffness;
    base.map = imaging::rasterize_maps(rects, c.camera.height, c.camera.width);

    char suffix[16];
    std::snprintf(suffix, sizeof suffix, "_a%02d.gmap", 0);
    std::string name = scene_stem(obj, ref.stiffness) + suffix;
    imaging::write_tensor(dir / name, imaging::pack_sample(base));
    out.tensors.push_back(name);

    Rng rng(hash_stream(c.seed, "augment", static_cast<uint64_t>(idx)));
    for (int a = 1; a <= c.augmentations; ++a) {
      const imaging::Sample augmented = imaging::augment(base, c.camera, rng);
      std::snprintf(suffix, sizeof suffix, "_a%02d.gmap", a);
      name = scene_stem(obj, ref.stiffness) + suffix;
      imaging::write_tensor(dir / name, imaging::pack_sample(augmented));
      out.tensors.push_back(name);
    }
    out.ok = true;
  });

  std::string labels =
      "object,stiffness_pa,grasp_id,cx,cy,cz,yaw_rad,width_m,closed,lifted,close_sep_m,"
      "shake_avg,positive,quality\n";
  ordered_json manifest;
  manifest["seed"] = c.seed;
  manifest["stiffness"] = c.stiffness;
  manifest["augmentations"] = c.augmentations;
  manifest["image"] = {c.camera.height, c.camera.width};
  manifest["scenes"] = ordered_json::array();
  int tensor_count = 0;
  for (size_t i = 0; i < grid.size(); ++i) {
    const SceneOut& out = outs[i];
    if (!out.ok) continue;
    labels += out.rows;
    ordered_json scene;
    scene["object"] = c.objects[grid[i].object].name;
    scene["stiffness_pa"] = c.stiffness[grid[i].stiffness];
    scene["candidates"] = objects[grid[i].object].candidates.size();
    scene["positives"] = out.positives;
    scene["tensors"] = out.tensors;
    manifest["scenes"].push_back(scene);
    tensor_count += static_cast<int>(out.tensors.size());
  }
  manifest["tensor_count"] = tensor_count;

  write_text(dir / "labels.csv", labels);
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  std::cout << "wrote " << tensor_count << " tensors for " << manifest["scenes"].size()
            << " scenes to " << dir.string();
  if (skipped > 0) std::cout << " (" << skipped << " objects skipped)";
  std::cout << "\n";
  return tensor_count;
}

// ---------------------------------------------------------------------------
// train

void train_cmd(const RunConfig& c, bool with_stiffness) {
  const fs::path dir = fs::path(c.out) / "dataset";
  const fs::path manifest_path = dir / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in)
    throw std::runtime_error("no dataset manifest at " + manifest_path.string() +
                             "; run gen-dataset first");
  json manifest;
  try {
    in >> manifest;
  } catch (const json::parse_error& e) {
    throw std::runtime_error("corrupt manifest " + manifest_path.string() + ": " + e.what());
  }

  std::vector<imaging::Tensor> data;
  for (const json& scene : manifest.at("scenes"))
    for (const json& name : scene.at("tensors"))
      data.push_back(imaging::read_tensor(dir / name.get<std::string>()));
  if (data.empty()) throw std::runtime_error("dataset manifest lists no tensors");

  neural::TrainConfig tc;
  tc.learning_rate = c.train.learning_rate;
  tc.epochs = c.train.epochs;
  tc.batch_size = c.train.batch_size;
  tc.weights = c.train.weights;
  tc.seed = c.seed;
  tc.input_channels = with_stiffness ? 2 : 1;
  const neural::TrainResult result = neural::train(data, tc);

  const std::string tag = with_stiffness ? "2ch" : "1ch";
  neural::save_network(fs::path(c.out) / ("model_" + tag + ".gnet"), result.net);
  std::ostringstream history;
  neural::write_history_csv(history, result.history);
  write_text(fs::path(c.out) / ("history_" + tag + ".csv"), history.str());
  std::cout << "trained " << tag << " model on " << data.size() << " tensors; final loss "
            << fmt(result.history.back().loss_total) << "\n";
}

// ---------------------------------------------------------------------------
// eval

namespace {

struct ScenePrediction {
  imaging::Views views;
  imaging::GraspMap map;
  std::vector<imaging::DecodedGrasp> grasps;
};

ScenePrediction predict_scene(const RunConfig& c, const neural::NetworkParams& net,
                              const fem::SoftBodySim& sim, const std::string& name,
                              double young_imaged) {
  ScenePrediction p;
  p.views = render_settled(sim, c, young_imaged, name);
  const imaging::Tensor input =
      neural::make_input(p.views.depth, p.views.stiffness, net.arch.in_channels);
  p.map = neural::to_grasp_map(neural::forward(net, input));
  p.grasps = imaging::decode_grasps(p.map, p.views.depth, c.camera, c.decode.top_k,
                                    decode_options(c));
  return p;
}

imaging::Tensor prediction_tensor(const imaging::GraspMap& map) {
  imaging::Tensor t(map.q.height, map.q.width, 4);
  for (int r = 0; r < t.height; ++r)
    for (int col = 0; col < t.width; ++col) {
      t.at(r, col, 0) = map.q.at(r, col);
      t.at(r, col, 1) = map.sin2p.at(r, col);
      t.at(r, col, 2) = map.cos2p.at(r, col);
      t.at(r, col, 3) = map.wnorm.at(r, col);
    }
  return t;
}

std::string model_tag(const neural::NetworkParams& net) {
  return net.arch.in_channels == 1 ? "1ch" : "2ch";
}

// one CSV row of the trial table; a rank the decoder did not fill still
// produces a (failed) row so every scene contributes exactly top_k trials
std::string trial_row(const std::string& tag, const std::string& object, double young,
                      const char* task, int rank, const imaging::DecodedGrasp* g,
                      double score, bool success) {
  std::string row = tag + "," + object + "," + fmt(young) + "," + task + "," +
                    std::to_string(rank) + ",";
  if (g)
    row += "1," + fmt(g->px.x()) + "," + fmt(g->px.y()) + "," + fmt(g->grasp.yaw()) + "," +
           fmt(g->grasp.width) + "," + fmt(g->quality) + ",";
  else
    row += "0,0,0,0,0,0,";
  row += fmt(score) + "," + std::to_string(int(success)) + "\n";
  return row;
}

constexpr const char* kTrialHeader =
    "model,object,stiffness_pa,task,rank,decoded,px_col,px_row,yaw_rad,width_m,pred_quality,"
    "score,success\n";

std::string summary_table(const RunConfig& c, const std::vector<std::array<int, 2>>& shake,
                          const std::vector<std::array<int, 2>>& twist) {
  std::string md = "| Stiffness (Pa) | Shake success | Twist success |\n| --- | --- | --- |\n";
  int sh = 0, st = 0, th = 0, tt = 0;
  for (size_t k = 0; k < c.stiffness.size(); ++k) {
    md += "| " + fmt(c.stiffness[k]) + " | " + percent(shake[k][0], shake[k][1]) + " | " +
          percent(twist[k][0], twist[k][1]) + " |\n";
    sh += shake[k][0];
    st += shake[k][1];
    th += twist[k][0];
    tt += twist[k][1];
  }
  md += "| All stiffnesses | " + percent(sh, st) + " | " + percent(th, tt) + " |\n";
  return md;
}

}  // namespace

void eval_cmd(const RunConfig& c, const fs::path& checkpoint) {
  if (c.eval_objects.empty()) throw ConfigError("eval needs a non-empty 'eval_objects' list");
  const neural::NetworkParams net = neural::load_network(checkpoint);
  const std::string tag = model_tag(net);
  const fs::path dir = fs::path(c.out) / "eval";
  fs::create_directories(dir);

  std::vector<geometry::TetMesh> meshes(c.eval_objects.size());
  for (size_t i = 0; i < meshes.size(); ++i) meshes[i] = build_mesh(c.eval_objects[i]);

  struct SceneOut {
    std::string rows;
    int shake_hits = 0, twist_hits = 0;
  };
  const std::vector<SceneRef> grid = scene_grid(c.eval_objects.size(), c.stiffness.size());
  std::vector<SceneOut> outs(grid.size());

  parallel_for(static_cast<int>(grid.size()), c.jobs, [&](int idx) {
    const SceneRef ref = grid[idx];
    const ObjectSpec& obj = c.eval_objects[ref.object];
    const double young = c.stiffness[ref.stiffness];
    SceneOut& out = outs[idx];

    fem::SoftBodySim sim(meshes[ref.object], materials_at(c, young), c.sim, c.gripper);
    const fem::SimSnapshot settled = fem::settle_object(sim, c.protocol.grasp.settle_time);
    const ScenePrediction pred = predict_scene(c, net, sim, obj.name, young);
    imaging::write_tensor(dir / ("qmap_" + scene_stem(obj, ref.stiffness) + "_" + tag + ".gmap"),
                          prediction_tensor(pred.map));

    for (int rank = 0; rank < c.decode.top_k; ++rank) {
      if (rank < static_cast<int>(pred.grasps.size())) {
        const imaging::DecodedGrasp& g = pred.grasps[rank];
        const eval::GraspEvaluation ev =
            eval::evaluate_grasp(sim, settled, g.grasp, c.protocol);
        const bool sh = shake_success(ev.shake, c.protocol);
        const bool tw = twist_success(ev.trial.lifted, ev.twist, c.protocol);
        out.rows += trial_row(tag, obj.name, young, "shake", rank, &g, ev.shake.average, sh);
        out.rows += trial_row(tag, obj.name, young, "twist", rank, &g, ev.twist.minimum, tw);
        out.shake_hits += sh;
        out.twist_hits += tw;
      } else {
        out.rows += trial_row(tag, obj.name, young, "shake", rank, nullptr, 0.0, false);
        out.rows += trial_row(tag, obj.name, young, "twist", rank, nullptr, 0.0, false);
      }
    }
  });

  std::string csv = kTrialHeader;
  std::vector<std::array<int, 2>> shake(c.stiffness.size(), {0, 0});
  std::vector<std::array<int, 2>> twist(c.stiffness.size(), {0, 0});
  for (size_t i = 0; i < grid.size(); ++i) {
    csv += outs[i].rows;
    shake[grid[i].stiffness][0] += outs[i].shake_hits;
    shake[grid[i].stiffness][1] += c.decode.top_k;
    twist[grid[i].stiffness][0] += outs[i].twist_hits;
    twist[grid[i].stiffness][1] += c.decode.top_k;
  }
  write_text(dir / ("trials_" + tag + ".csv"), csv);
  const std::string summary = "# Held-out benchmark: " + tag + " model\n\n" +
                              summary_table(c, shake, twist);
  write_text(dir / ("summary_" + tag + ".md"), summary);
  std::cout << summary;
}

// ---------------------------------------------------------------------------
// sensitivity

void sensitivity_cmd(const RunConfig& c, const fs::path& checkpoint) {
  if (c.eval_objects.empty())
    throw ConfigError("sensitivity needs a non-empty 'eval_objects' list");
  const neural::NetworkParams net = neural::load_network(checkpoint);
  if (net.arch.in_channels != 2)
    throw ConfigError("sensitivity needs a 2-channel checkpoint (stiffness input)");
  const fs::path dir = fs::path(c.out) / "sensitivity";
  fs::create_directories(dir);

  std::vector<geometry::TetMesh> meshes(c.eval_objects.size());
  for (size_t i = 0; i < meshes.size(); ++i) meshes[i] = build_mesh(c.eval_objects[i]);

  const std::vector<double>& errors = c.sensitivity_grid;
  const std::vector<SceneRef> grid = scene_grid(c.eval_objects.size(), c.stiffness.size());
  // hits[scene][error]
  std::vector<std::vector<int>> hits(grid.size(), std::vector<int>(errors.size(), 0));

  parallel_for(static_cast<int>(grid.size()), c.jobs, [&](int idx) {
    const SceneRef ref = grid[idx];
    const ObjectSpec& obj = c.eval_objects[ref.object];
    const double young = c.stiffness[ref.stiffness];
    fem::SoftBodySim sim(meshes[ref.object], materials_at(c, young), c.sim, c.gripper);
    const fem::SimSnapshot settled = fem::settle_object(sim, c.protocol.grasp.settle_time);
    for (size_t e = 0; e < errors.size(); ++e) {
      // the camera reports a wrong modulus; the simulation keeps the true one
      const ScenePrediction pred =
          predict_scene(c, net, sim, obj.name, young * (1.0 + errors[e]));
      int ok = 0;
      for (int rank = 0; rank < c.decode.top_k && rank < static_cast<int>(pred.grasps.size());
           ++rank) {
        const fem::GraspTrialLog trial =
            fem::simulate_grasp(sim, settled, pred.grasps[rank].grasp, c.protocol.grasp);
        const eval::ShakeResult shake = eval::shake_task(sim, trial, c.protocol);
        ok += shake_success(shake, c.protocol);
      }
      hits[idx][e] = ok;
    }
  });

  std::string csv = "error,stiffness_pa,trials,successes,rate\n";
  std::vector<double> overall(errors.size(), 0.0);
  for (size_t e = 0; e < errors.size(); ++e) {
    int all_hits = 0, all_trials = 0;
    for (size_t k = 0; k < c.stiffness.size(); ++k) {
      int h = 0, t = 0;
      for (size_t i = 0; i < grid.size(); ++i)
        if (grid[i].stiffness == static_cast<int>(k)) {
          h += hits[i][e];
          t += c.decode.top_k;
        }
      csv += fmt(errors[e]) + "," + fmt(c.stiffness[k]) + "," + std::to_string(t) + "," +
             std::to_string(h) + "," + fmt(t > 0 ? double(h) / t : 0.0) + "\n";
      all_hits += h;
      all_trials += t;
    }
    overall[e] = all_trials > 0 ? double(all_hits) / all_trials : 0.0;
  }
  write_text(dir / "sweep.csv", csv);

  // bar chart: one column per grid error, height = overall shake success
  const int bar_w = 18, gap = 6, chart_h = 110, margin = 8;
  const int n = static_cast<int>(errors.size());
  imaging::Image chart(chart_h, margin * 2 + n * bar_w + (n - 1) * gap, 1.0f);
  for (int b = 0; b < n; ++b) {
    const int h = static_cast<int>(std::lround(overall[b] * (chart_h - 2 * margin)));
    const int c0 = margin + b * (bar_w + gap);
    for (int r = chart_h - margin - h; r < chart_h - margin; ++r)
      for (int col = c0; col < c0 + bar_w; ++col) chart.at(r, col) = 0.2f;
  }
  for (int col = 0; col < chart.width; ++col) chart.at(chart_h - margin, col) = 0.0f;
  write_pgm(dir / "sweep.pgm", chart, 0.0f, 1.0f);

  std::cout << "stiffness-error sweep:";
  for (size_t e = 0; e < errors.size(); ++e)
    std::cout << " " << fmt(100.0 * errors[e]) << "%:" << fmt(100.0 * overall[e]) << "%";
  std::cout << "\n";
}

// ---------------------------------------------------------------------------
// report

namespace {

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

std::vector<fs::path> sorted_files(const fs::path& dir, const std::string& prefix,
                                   const std::string& suffix) {
  std::vector<fs::path> files;
  if (fs::is_directory(dir))
    for (const auto& entry : fs::directory_iterator(dir)) {
      const std::string name = entry.path().filename().string();
      if (name.size() >= prefix.size() + suffix.size() && name.starts_with(prefix) &&
          name.ends_with(suffix))
        files.push_back(entry.path());
    }
  std::sort(files.begin(), files.end());
  return files;
}

struct TaskStats {
  int hits = 0, trials = 0;
};

}  // namespace

void report_cmd(const fs::path& out_dir) {
  std::vector<std::string> missing;
  const fs::path eval_dir = out_dir / "eval";
  const fs::path manifest_path = out_dir / "dataset" / "manifest.json";
  const fs::path sweep_path = out_dir / "sensitivity" / "sweep.csv";

  const std::vector<fs::path> trial_files = sorted_files(eval_dir, "trials_", ".csv");
  if (trial_files.empty()) missing.push_back((eval_dir / "trials_2ch.csv").string());
  if (!fs::exists(manifest_path)) missing.push_back(manifest_path.string());
  if (!fs::exists(sweep_path)) missing.push_back(sweep_path.string());
  for (const std::string& path : missing) std::cerr << "missing: " << path << "\n";
  if (trial_files.empty())
    throw std::runtime_error("no evaluation results under " + out_dir.string());

  // success per (model, task, stiffness); stiffness keys kept as the exact
  // CSV strings, ordered numerically
  std::vector<std::string> models;
  std::vector<std::string> stiffness_keys;
  std::map<std::string, TaskStats> stats;  // "model|task|stiffness"
  for (const fs::path& file : trial_files) {
    std::ifstream in(file);
    if (!in) throw std::runtime_error("cannot read " + file.string());
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const std::vector<std::string> col = split(line, ',');
      if (col.size() < 13) throw std::runtime_error("malformed trial row in " + file.string());
      const std::string& model = col[0];
      if (std::find(models.begin(), models.end(), model) == models.end())
        models.push_back(model);
      if (std::find(stiffness_keys.begin(), stiffness_keys.end(), col[2]) ==
          stiffness_keys.end())
        stiffness_keys.push_back(col[2]);
      TaskStats& s = stats[model + "|" + col[3] + "|" + col[2]];
      s.trials += 1;
      s.hits += col[12] == "1";
    }
  }
  std::sort(stiffness_keys.begin(), stiffness_keys.end(),
            [](const std::string& a, const std::string& b) {
              return std::stod(a) < std::stod(b);
            });
  std::sort(models.begin(), models.end());

  const fs::path report_dir = out_dir / "report";
  fs::create_directories(report_dir);

  std::string md = "# Grasp synthesis run report\n\n";

  md += "## Dataset\n\n";
  if (fs::exists(manifest_path)) {
    std::ifstream in(manifest_path);
    json manifest;
    in >> manifest;
    md += "- scenes: " + std::to_string(manifest.at("scenes").size()) + "\n";
    md += "- tensors: " + manifest.at("tensor_count").dump() + "\n";
    md += "- augmentations per scene: " + manifest.at("augmentations").dump() + "\n\n";
  } else {
    md += "dataset manifest not found\n\n";
  }

  md += "## Held-out success rates\n\n";
  md += "| Stiffness (Pa) |";
  for (const std::string& m : models) md += " " + m + " shake | " + m + " twist |";
  md += "\n| --- |";
  for (size_t i = 0; i < models.size(); ++i) md += " --- | --- |";
  md += "\n";
  for (const std::string& key : stiffness_keys) {
    md += "| " + key + " |";
    for (const std::string& m : models) {
      const TaskStats sh = stats["" + m + "|shake|" + key];
      const TaskStats tw = stats["" + m + "|twist|" + key];
      md += " " + percent(sh.hits, sh.trials) + " | " + percent(tw.hits, tw.trials) + " |";
    }
    md += "\n";
  }
  md += "| All stiffnesses |";
  for (const std::string& m : models) {
    TaskStats sh, tw;
    for (const std::string& key : stiffness_keys) {
      sh.hits += stats[m + "|shake|" + key].hits;
      sh.trials += stats[m + "|shake|" + key].trials;
      tw.hits += stats[m + "|twist|" + key].hits;
      tw.trials += stats[m + "|twist|" + key].trials;
    }
    md += " " + percent(sh.hits, sh.trials) + " | " + percent(tw.hits, tw.trials) + " |";
  }
  md += "\n\n";

  md += "## Stiffness-error sensitivity\n\n";
  if (fs::exists(sweep_path)) {
    std::ifstream in(sweep_path);
    std::string line;
    std::getline(in, line);
    std::map<std::string, TaskStats> by_error;  // key = error string
    std::vector<std::string> error_keys;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const std::vector<std::string> col = split(line, ',');
      if (col.size() < 5) throw std::runtime_error("malformed sweep row in " + sweep_path.string());
      if (std::find(error_keys.begin(), error_keys.end(), col[0]) == error_keys.end())
        error_keys.push_back(col[0]);
      by_error[col[0]].trials += std::stoi(col[2]);
      by_error[col[0]].hits += std::stoi(col[3]);
    }
    md += "| Stiffness error | Shake success |\n| --- | --- |\n";
    for (const std::string& key : error_keys) {
      const TaskStats s = by_error[key];
      md += "| " + fmt(std::stod(key) * 100.0) + "% | " + percent(s.hits, s.trials) + " |\n";
    }
    md += "\nBar chart: sensitivity/sweep.pgm\n\n";
  } else {
    md += "sweep not run\n\n";
  }

  md += "## Predicted quality maps\n\n";
  const std::vector<fs::path> qmaps = sorted_files(eval_dir, "qmap_", ".gmap");
  for (const fs::path& q : qmaps) {
    const imaging::Tensor t = imaging::read_tensor(q);
    imaging::Image img(t.height, t.width);
    for (int r = 0; r < t.height; ++r)
      for (int col = 0; col < t.width; ++col) img.at(r, col) = t.at(r, col, 0);
    const std::string name = q.stem().string() + ".pgm";
    write_pgm(report_dir / name, img, 0.0f, 1.0f);
    md += "- report/" + name + "\n";
  }
  if (qmaps.empty()) md += "none found\n";
  md += "\n";

  write_text(report_dir / "report.md", md);
  std::cout << "report written to " << (report_dir / "report.md").string() << "\n";
}

}  // namespace defgrasp::pipeline
