// Run orchestration: a structured config file drives dataset generation,
// training, held-out evaluation, the stiffness-error sensitivity sweep and
// report emission. Every command is bit-reproducible for a fixed config and
// seed, with optional scene-level fan-out to a worker pool.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "defgrasp/eval.hpp"
#include "defgrasp/fem.hpp"
#include "defgrasp/geometry.hpp"
#include "defgrasp/imaging.hpp"
#include "defgrasp/neural.hpp"

namespace defgrasp::pipeline {

// A run object is either a bundled primitive or a tet-mesh file on disk.
// Names key every output file and CSV row, so they must be unique and
// filename-safe ([A-Za-z0-9_-]).
struct ObjectSpec {
  std::string name;
  std::optional<geometry::PrimitiveSpec> primitive;
  std::string mesh_path;  // used when no primitive is set
};

// decode_grasps settings for evaluation; min_center_z is always derived as
// half the pad height (the pads may not reach below the ground plane).
struct DecodeSettings {
  int top_k = 5;
  double smooth_sigma = 2.0;
  double min_peak_distance = 10.0;
  double center_offset = -0.01;  // descend into the surface; soft pinches need it
};

struct TrainSettings {
  double learning_rate = 1e-3;
  int epochs = 100;
  int batch_size = 8;
  neural::LossWeights weights;
};

struct RunConfig {
  uint64_t seed = 0;
  std::string out = "run";
  int jobs = 1;
  std::vector<ObjectSpec> objects;       // training set
  std::vector<ObjectSpec> eval_objects;  // held-out set
  std::vector<double> stiffness{2e4, 2e5, 2e6, 2e9};  // Pa
  fem::MaterialParams material;          // young_modulus replaced per scene
  imaging::Camera camera;
  fem::GripperModel gripper;
  fem::SimConfig sim;
  eval::EvalProtocol protocol;
  int sampler_candidates = 200;
  int sampler_max_keep = 40;
  int augmentations = 45;                // extra tensors per scene
  TrainSettings train;
  DecodeSettings decode;
  std::vector<double> sensitivity_grid;  // stiffness error fractions; default ±0.6 step 0.15
};

// Configuration problems (unreadable file, unknown keys, invalid values) are
// distinguished from runtime failures so the CLI can exit 1 vs 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Parses the JSON config; unknown keys are errors, every key has a default.
// `origin` names the source in error messages.
RunConfig parse_config(const std::string& text, const std::string& origin = "config");
RunConfig load_config(const std::filesystem::path& path);

// Command-line values that take precedence over the file.
struct Overrides {
  std::optional<uint64_t> seed;
  std::optional<int> jobs;
  std::optional<std::string> out;
};
void apply_overrides(RunConfig& config, const Overrides& overrides);

// Runs fn(0..n-1) on `jobs` threads (inline when jobs <= 1). Work items must
// write disjoint state; the first exception is rethrown after the pool joins.
void parallel_for(int n, int jobs, const std::function<void(int)>& fn);

// For each (object, stiffness): settle, render, execute every sampled
// candidate, label by the shake average, rasterize the positives and write
// the scene tensor plus its augmentations under <out>/dataset. Objects the
// sampler cannot cover are skipped with a warning on stderr. Returns the
// number of tensors written.
int gen_dataset(const RunConfig& config);

// Trains on every tensor listed by the dataset manifest and writes
// model_<tag>.gnet + history_<tag>.csv, where tag is 2ch or 1ch.
void train_cmd(const RunConfig& config, bool with_stiffness);

// Renders each held-out (object, stiffness) scene, decodes the checkpoint's
// top-k grasps and runs the shake and twist benchmarks on each; writes
// per-trial rows, a per-stiffness summary table and the predicted grasp maps
// under <out>/eval.
void eval_cmd(const RunConfig& config, const std::filesystem::path& checkpoint);

// Same scenes and checkpoint, but the stiffness image is rendered from
// E·(1+e) for each grid error e while the simulation keeps the true E; writes
// shake success per (e, stiffness) and a bar-chart graymap under
// <out>/sensitivity.
void sensitivity_cmd(const RunConfig& config, const std::filesystem::path& checkpoint);

// Collects the dataset/eval/sensitivity outputs under `out_dir` into
// report/report.md plus per-scene quality-map graymaps. Missing inputs are
// listed per path; having no trial CSV at all is an error.
void report_cmd(const std::filesystem::path& out_dir);

}  // namespace defgrasp::pipeline
