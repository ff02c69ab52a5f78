// Antipodal grasp candidates for a top-down parallel-jaw gripper. Contact
// pairs are found by casting rays through the object surface, kept when both
// contacts sit inside their friction cones, then pruned by sweeping the open
// gripper down onto the grasp pose and discarding anything that would hit the
// object or the ground.
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "defgrasp/fem.hpp"
#include "defgrasp/geometry.hpp"
#include "defgrasp/grasp.hpp"

namespace defgrasp::sampler {

// True iff the contact line p2-p1 lies inside both friction cones: the
// undirected angle between each unit normal and the line is at most atan(mu).
// (The closing force acts along the line in either sense, so only the line
// direction matters, not its sign.)
bool check_antipodal(const geometry::Vec3& p1, const geometry::Vec3& n1,
                     const geometry::Vec3& p2, const geometry::Vec3& n2, double mu);

// Samples up to n_target candidates: a surface point uniform by area, its
// opposing contact via a ray cast inward along the negated normal, kept when
// the pair is antipodal under the gripper's friction coefficient, fits inside
// the maximum opening, and shares a height (a top-down gripper closes
// horizontally, so contact pairs with different heights are unreachable).
// Pre-close width = contact distance + 0.01 m clearance, capped at the
// maximum opening. Deterministic given the seed.
//
// Throws std::runtime_error naming the object when fewer than 5 candidates
// are found after n_target * 20 attempts.
std::vector<GraspCandidate> sample_antipodal(const geometry::SurfaceMesh& surface,
                                             const fem::GripperModel& gripper, int n_target,
                                             uint64_t seed,
                                             const std::string& object_name = "object");

// Removes candidates whose finger pads or palm, swept straight down from
// above the object to the grasp pose at the pre-close separation, intersect
// the surface mesh, and candidates whose pads would end below the ground
// plane. When more than max_keep remain, farthest-point subsampling on the
// grasp centers keeps a spatially spread subset (input order preserved).
std::vector<GraspCandidate> filter_collisions(const std::vector<GraspCandidate>& candidates,
                                              const geometry::SurfaceMesh& surface,
                                              const fem::GripperModel& gripper,
                                              int max_keep = 40);

// Header plus one `object,grasp_id,cx,cy,cz,yaw_rad,width_m` row per
// candidate; grasp_id is the list index.
void write_candidates_csv(std::ostream& out, const std::string& object,
                          const std::vector<GraspCandidate>& candidates);

}  // namespace defgrasp::sampler
