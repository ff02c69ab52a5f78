#include "defgrasp/sampler.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <ostream>
#include <stdexcept>

#include "defgrasp/rng.hpp"

namespace defgrasp::sampler {

using geometry::Vec3;

namespace {

constexpr double kClearance = 0.01;        // pre-close gap added around the contacts (m)
constexpr double kHeightSlack = 2e-6;      // max height difference between contacts (m)
constexpr int kMinCandidates = 5;
constexpr double kSweepClearance = 0.005;  // pads start this far above the object top (m)

struct Obb {
  Vec3 center;
  Eigen::Matrix3d axes;  // columns
  Vec3 half;
};

// The gripper at the candidate pose with pads opened to the pre-close width,
// each box stretched vertically to cover the straight-down approach from
// above the object. Same layout as the simulation's colliders.
std::array<Obb, 3> swept_gripper(const GraspCandidate& c, const fem::GripperModel& g,
                                 double top_z) {
  Eigen::Matrix3d frame;
  frame.col(0) = c.axis;
  frame.col(1) = Vec3(-c.axis.y(), c.axis.x(), 0.0);
  frame.col(2) = Vec3::UnitZ();
  const double start_z = std::max(top_z + g.pad_height / 2.0 + kSweepClearance, c.center.z());
  const double extra = (start_z - c.center.z()) / 2.0;
  Vec3 mid = c.center;
  mid.z() += extra;

  const double off = c.width / 2.0 + g.pad_thickness / 2.0;
  const Vec3 pad_half(g.pad_thickness / 2.0, g.pad_width / 2.0, g.pad_height / 2.0 + extra);
  const Vec3 palm_half(c.width / 2.0 + g.pad_thickness, g.pad_width / 2.0,
                       g.palm_thickness / 2.0 + extra);
  const Vec3 palm_center =
      mid + Vec3(0, 0, g.finger_length - g.pad_height / 2.0 + g.palm_thickness / 2.0);
  return {Obb{mid - off * c.axis, frame, pad_half}, Obb{mid + off * c.axis, frame, pad_half},
          Obb{palm_center, frame, palm_half}};
}

bool box_hits_mesh(const Obb& box, const geometry::Bvh& bvh, const geometry::SurfaceMesh& surface,
                   std::vector<int>& scratch) {
  Vec3 r = Vec3::Zero();
  for (int k = 0; k < 3; ++k) r += box.half[k] * box.axes.col(k).cwiseAbs();
  scratch.clear();
  bvh.query_box(Eigen::AlignedBox3d(box.center - r, box.center + r), scratch);
  for (int t : scratch) {
    if (geometry::triangle_intersects_obb(surface.triangle_vertex(t, 0),
                                          surface.triangle_vertex(t, 1),
                                          surface.triangle_vertex(t, 2), box.center, box.axes,
                                          box.half))
      return true;
  }
  return false;
}

}  // namespace

bool check_antipodal(const Vec3& p1, const Vec3& n1, const Vec3& p2, const Vec3& n2, double mu) {
  const Vec3 d = p2 - p1;
  const double len = d.norm();
  if (len < 1e-12) return false;
  const double cos_limit = std::cos(std::atan(mu));
  return std::abs(n1.dot(d)) / len >= cos_limit - 1e-12 &&
         std::abs(n2.dot(d)) / len >= cos_limit - 1e-12;
}

std::vector<GraspCandidate> sample_antipodal(const geometry::SurfaceMesh& surface,
                                             const fem::GripperModel& gripper, int n_target,
                                             uint64_t seed, const std::string& object_name) {
  if (n_target <= 0) throw std::invalid_argument("n_target must be positive");
  const int ntri = static_cast<int>(surface.triangles.size());
  if (ntri == 0) throw std::invalid_argument("empty surface mesh");

  std::vector<double> cum(ntri);
  double total = 0.0;
  for (int t = 0; t < ntri; ++t) {
    total += surface.triangle_area(t);
    cum[t] = total;
  }

  const geometry::Bvh bvh(surface);
  Rng rng(seed);
  std::vector<GraspCandidate> out;
  out.reserve(n_target);
  const long attempts = static_cast<long>(n_target) * 20;
  for (long att = 0; att < attempts && static_cast<int>(out.size()) < n_target; ++att) {
    // triangle by area, then a uniform point on it
    const double pick = rng.uniform(0.0, total);
    int tri = static_cast<int>(std::lower_bound(cum.begin(), cum.end(), pick) - cum.begin());
    tri = std::min(tri, ntri - 1);
    const double r1 = std::sqrt(rng.next_double());
    const double r2 = rng.next_double();
    const Vec3 p1 = (1.0 - r1) * surface.triangle_vertex(tri, 0) +
                    r1 * (1.0 - r2) * surface.triangle_vertex(tri, 1) +
                    r1 * r2 * surface.triangle_vertex(tri, 2);
    const Vec3 n1 = surface.normals[tri];

    const auto hit = bvh.raycast(p1, -n1, 1e-6);
    if (!hit) continue;
    const Vec3 p2 = hit->point;
    if (hit->distance > gripper.max_opening) continue;
    if (std::abs(p2.z() - p1.z()) > kHeightSlack) continue;
    if (!check_antipodal(p1, n1, p2, hit->normal, gripper.friction)) continue;

    Vec3 axis = p2 - p1;
    axis.z() = 0.0;
    const double len = axis.norm();
    if (len < 1e-9) continue;

    GraspCandidate cand;
    cand.center = (p1 + p2) / 2.0;
    cand.approach = Vec3(0, 0, -1);
    cand.axis = axis / len;
    cand.width = std::min(hit->distance + kClearance, gripper.max_opening);
    cand.contact1 = p1;
    cand.contact2 = p2;
    cand.normal1 = n1;
    cand.normal2 = hit->normal;
    out.push_back(cand);
  }

  if (static_cast<int>(out.size()) < kMinCandidates)
    throw std::runtime_error("antipodal sampling failed for '" + object_name + "': " +
                             std::to_string(out.size()) + " candidates after " +
                             std::to_string(attempts) + " attempts");
  return out;
}

std::vector<GraspCandidate> filter_collisions(const std::vector<GraspCandidate>& candidates,
                                              const geometry::SurfaceMesh& surface,
                                              const fem::GripperModel& gripper, int max_keep) {
  const geometry::Bvh bvh(surface);
  const double top_z = surface.bounds().max().z();
  std::vector<GraspCandidate> kept;
  std::vector<int> scratch;
  for (const auto& c : candidates) {
    if (c.center.z() - gripper.pad_height / 2.0 < 0.0) continue;  // pads below the ground
    const auto boxes = swept_gripper(c, gripper, top_z);
    const bool collides = std::any_of(boxes.begin(), boxes.end(), [&](const Obb& b) {
      return box_hits_mesh(b, bvh, surface, scratch);
    });
    if (!collides) kept.push_back(c);
  }
  if (static_cast<int>(kept.size()) <= max_keep || max_keep <= 0) return kept;

  // farthest-point subsampling on the centers; ties go to the lower index so
  // the selection is deterministic
  std::vector<double> min_d(kept.size(), std::numeric_limits<double>::infinity());
  std::vector<int> chosen{0};
  min_d[0] = -1.0;
  while (static_cast<int>(chosen.size()) < max_keep) {
    const Vec3 last = kept[chosen.back()].center;
    int next = -1;
    double far_d = -1.0;
    for (size_t i = 0; i < kept.size(); ++i) {
      if (min_d[i] < 0.0) continue;
      min_d[i] = std::min(min_d[i], (kept[i].center - last).squaredNorm());
      if (min_d[i] > far_d) {
        far_d = min_d[i];
        next = static_cast<int>(i);
      }
    }
    chosen.push_back(next);
    min_d[next] = -1.0;
  }
  std::sort(chosen.begin(), chosen.end());
  std::vector<GraspCandidate> out;
  out.reserve(chosen.size());
  for (int i : chosen) out.push_back(kept[i]);
  return out;
}

void write_candidates_csv(std::ostream& out, const std::string& object,
                          const std::vector<GraspCandidate>& candidates) {
  out << "object,grasp_id,cx,cy,cz,yaw_rad,width_m\n";
  const auto prec = out.precision(12);
  for (size_t i = 0; i < candidates.size(); ++i) {
    const auto& c = candidates[i];
    out << object << ',' << i << ',' << c.center.x() << ',' << c.center.y() << ','
        << c.center.z() << ',' << c.yaw() << ',' << c.width << '\n';
  }
  out.precision(prec);
}

}  // namespace defgrasp::sampler
