// A 4-DoF parallel-jaw grasp: top-down approach, yawed closing axis.
#pragma once

#include <cmath>

#include "defgrasp/geometry.hpp"

namespace defgrasp {

struct GraspCandidate {
  geometry::Vec3 center = geometry::Vec3::Zero();  // gripper center at grasp depth
  geometry::Vec3 approach{0.0, 0.0, -1.0};         // unit, top-down in this pipeline
  geometry::Vec3 axis{1.0, 0.0, 0.0};              // unit closing direction, ⟂ approach
  double width = 0.0;                              // pre-close finger separation (m)

  // antipodal contact pair found by the sampler
  geometry::Vec3 contact1 = geometry::Vec3::Zero();
  geometry::Vec3 contact2 = geometry::Vec3::Zero();
  geometry::Vec3 normal1 = geometry::Vec3::Zero();
  geometry::Vec3 normal2 = geometry::Vec3::Zero();

  double yaw() const { return std::atan2(axis.y(), axis.x()); }
};

}  // namespace defgrasp
