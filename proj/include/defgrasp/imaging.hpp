// Top-down orthographic depth/stiffness rendering, grasp rectangles in image
// space, pixel-wise grasp-map ground truth, augmentation, decoding back to 3D
// candidates, and the tensor file format the dataset is stored in.
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "defgrasp/fem.hpp"
#include "defgrasp/geometry.hpp"
#include "defgrasp/grasp.hpp"
#include "defgrasp/rng.hpp"

namespace defgrasp::imaging {

// Young's modulus range mapped onto [0,1] stiffness pixels.
inline constexpr double kStiffnessMin = 2e4;   // Pa
inline constexpr double kStiffnessMax = 2e9;   // Pa
inline constexpr double kMaxWidthPx = 150.0;   // width channel cap / normalizer

struct Image {
  int height = 0, width = 0;
  std::vector<float> v;  // row-major

  Image() = default;
  Image(int h, int w, float fill = 0.0f) : height(h), width(w), v(size_t(h) * w, fill) {}
  float& at(int r, int c) { return v[size_t(r) * width + c]; }
  float at(int r, int c) const { return v[size_t(r) * width + c]; }
};

// Orthographic top-down camera looking along -z. Column c maps to world x and
// row r to world y through a pure scale + offset, so pixel and metric widths
// convert with the single constant `scale`.
struct Camera {
  int width = 96, height = 96;       // px
  double scale = 1000.0;             // px per metre
  double camera_height = 0.5;        // metres above the ground plane
  Eigen::Vector2d center{0.0, 0.0};  // world x,y seen at the image centre

  double px_x(double wx) const { return (wx - center.x()) * scale + (width - 1) / 2.0; }
  double px_y(double wy) const { return (wy - center.y()) * scale + (height - 1) / 2.0; }
  double world_x(double px) const { return center.x() + (px - (width - 1) / 2.0) / scale; }
  double world_y(double py) const { return center.y() + (py - (height - 1) / 2.0) / scale; }
};

struct Views {
  Image depth;      // metres from the camera plane; background = camera height
  Image stiffness;  // normalized [0,1]; background = 0
};

enum class StiffnessScale { Log, Linear };

// Clamps E to [2e4, 2e9] Pa and maps it to [0,1]; log10 by default so the
// five decades spread evenly instead of collapsing the soft end.
double normalize_stiffness(double young_modulus, StiffnessScale scale = StiffnessScale::Log);

// Straight-down raycast per pixel: depth = distance to the first hit (ground
// plane if none), stiffness = normalized modulus of the hit triangle's
// material. Throws when the object pokes outside the camera footprint.
Views render_views(const geometry::SurfaceMesh& surface,
                   const std::vector<fem::MaterialParams>& materials, const Camera& camera,
                   const std::string& object_name = "object");

// Oriented grasp rectangle in pixel coordinates.
struct GraspRect {
  double cx = 0.0, cy = 0.0;  // centre (col, row), px
  double phi = 0.0;           // closing-axis angle, wrapped to [-pi/2, pi/2)
  double width_px = 0.0;      // along the closing axis, <= 150
  double height_px = 0.0;     // finger extent perpendicular to it
};

// Wraps an angle to [-pi/2, pi/2); antipodal grasps are symmetric under a
// half turn, so this is the natural identification.
double wrap_angle(double a);

// Orthographic projection: centre by the camera mapping, phi = wrapped yaw,
// width = scale * metric width capped at 150 px, finger height = projected
// pad width. Throws on non-positive width.
GraspRect project_grasp(const GraspCandidate& grasp, const Camera& camera,
                        const fem::GripperModel& gripper);

struct GraspMap {
  Image q;             // grasp quality [0,1]
  Image sin2p, cos2p;  // orientation channels for 2*phi
  Image wnorm;         // width_px / 150
  Image mask;          // 1 where a rectangle supplies ground truth
};

struct LabeledRect {
  GraspRect rect;
  double quality = 0.0;
};

// Paints each rectangle's quality, angle channels and normalized width over
// the pixels it covers; overlaps resolved by the higher quality. Pixels no
// rectangle covers stay invalid with zero targets.
GraspMap rasterize_maps(const std::vector<LabeledRect>& rects, int height, int width);

// One training sample: the two input views plus their ground-truth map.
struct Sample {
  Image depth;
  Image stiffness;
  GraspMap map;
};

// Rotation about the image centre plus zoom, identically on every channel:
// depth/stiffness bilinear, labels nearest-neighbour with the angle channels
// rotated by theta and widths scaled by the zoom (re-capped at 150 px).
// Pixels pulled from outside the frame become background.
Sample transform_sample(const Sample& in, const Camera& camera, double theta, double zoom);

// Random rotation U(-pi, pi) and zoom U(0.8, 1.1). If a draw leaves no valid
// ground-truth pixel in frame it is retried (10 tries), then the sample
// passes through untouched.
Sample augment(const Sample& in, const Camera& camera, Rng& rng);

struct DecodeOptions {
  double smooth_sigma = 2.0;       // px of Gaussian applied to Q (0 = off)
  double min_peak_distance = 10.0; // px between retained maxima
  double center_offset = 0.01;     // grasp centre height above the depth surface (m)
  double min_center_z = 0.0;       // floor for the recovered grasp height (m)
};

struct DecodedGrasp {
  GraspCandidate grasp;
  double quality = 0.0;          // smoothed Q at the peak
  Eigen::Vector2d px{0.0, 0.0};  // sub-pixel peak location (col, row)
};

// Smooths Q, picks the top_k spatial maxima (plateau centroids, suppressing
// neighbours within min_peak_distance), and lifts each into a 3D candidate:
// angle from atan2 of the orientation channels, width from the width channel,
// height from the depth pixel plus the configured offset. Ordered by quality.
std::vector<DecodedGrasp> decode_grasps(const GraspMap& prediction, const Image& depth,
                                        const Camera& camera, int top_k,
                                        const DecodeOptions& options = {});

// H x W x C float32 tensor, row-major with the channel index fastest.
struct Tensor {
  int height = 0, width = 0, channels = 0;
  std::vector<float> v;

  Tensor() = default;
  Tensor(int h, int w, int c)
      : height(h), width(w), channels(c), v(size_t(h) * w * c, 0.0f) {}
  float& at(int r, int c, int ch) { return v[(size_t(r) * width + c) * channels + ch]; }
  float at(int r, int c, int ch) const { return v[(size_t(r) * width + c) * channels + ch]; }
};

// Ground-truth tensor layout: [depth, stiffness, Q, sin2phi, cos2phi, Wnorm,
// mask] along the channel axis.
inline constexpr int kSampleChannels = 7;
Tensor pack_sample(const Sample& sample);
Sample unpack_sample(const Tensor& tensor);

// GMAP container: magic "GMAP", then u32 little-endian version(=1), height,
// width, channels, then the float32 payload. Bit-exact round trip.
void write_tensor(const std::filesystem::path& path, const Tensor& tensor);
Tensor read_tensor(const std::filesystem::path& path);

}  // namespace defgrasp::imaging
