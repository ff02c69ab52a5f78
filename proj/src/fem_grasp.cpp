// Grasp trial phases: settle → descend → force-servo close → lift. Mirrors
// the linear approach sequence of a real top-down pick: descent aborts on
// contact force (a pinch collision), closing servos the separation toward the
// per-finger force target, the lift carries the object on pad friction.
#include <algorithm>
#include <cmath>

#include "defgrasp/fem.hpp"

namespace defgrasp::fem {

SimSnapshot settle_object(SoftBodySim& sim, double settle_time) {
  sim.enable_gripper(false);
  sim.enable_ground(true);
  const int steps = static_cast<int>(std::lround(settle_time / sim.config().dt));
  for (int i = 0; i < steps; ++i) sim.step();
  return sim.save();
}

GraspTrialLog simulate_grasp(SoftBodySim& sim, const SimSnapshot& settled,
                             const GraspCandidate& grasp, const GraspProtocol& protocol) {
  GraspTrialLog log;
  sim.restore(settled);
  const GripperModel& gm = sim.gripper_model();
  const double dt = sim.config().dt;

  double top = 0.0;
  for (const Vec3& p : sim.surface_positions()) top = std::max(top, p.z());

  GripperPose pose;
  pose.center = Vec3(grasp.center.x(), grasp.center.y(),
                     std::max(top + gm.pad_height / 2.0 + 0.005, grasp.center.z()));
  pose.yaw = grasp.yaw();
  pose.separation = std::clamp(grasp.width, 0.0, gm.max_opening);

  // sampler contract: the pads must not interpenetrate the object at the
  // grasp pose; a violation marks the trial invalid, not failed
  if (protocol.pretest_pose) {
    GripperPose at_grasp = pose;
    at_grasp.center.z() = grasp.center.z();
    if (sim.gripper_intersects_surface(at_grasp)) {
      log.valid = false;
      log.post_lift = sim.save();
      return log;
    }
  }

  sim.set_gripper_pose(pose);  // teleport to the start pose, then enable
  sim.enable_gripper(true);

  // descend to the grasp depth; force buildup means the gripper hit the object
  while (pose.center.z() > grasp.center.z() + 1e-12) {
    pose.center.z() =
        std::max(grasp.center.z(), pose.center.z() - protocol.descend_speed * dt);
    sim.set_gripper_pose(pose);
    sim.step();
    const double contact = std::max({sim.pad_force(SoftBodySim::kLeftPad),
                                     sim.pad_force(SoftBodySim::kRightPad),
                                     sim.pad_force(SoftBodySim::kPalm)});
    if (contact > protocol.descent_force_limit) {
      log.collision_abort = true;
      log.inverted_elements = sim.inverted_elements() - settled.inverted_elements;
      log.post_lift = sim.save();
      return log;
    }
  }

  // bidirectional force servo: free closing until contact, then steps sized
  // from a running stiffness estimate so the per-finger force settles into a
  // band around the target instead of slamming through the penalty layer.
  // Soft materials can saturate below the target (squeezing harder stops
  // raising the pad force); the servo then stalls and holds rather than
  // crushing to the hard stop.
  const double target = gm.close_force;
  const double ds_max = protocol.close_speed * dt;
  double force_prev = 0.0, sep_prev = pose.separation, stiffness_est = 0.0;
  double best_force = 0.0, sep_at_best = pose.separation;
  for (double elapsed = 0.0; elapsed < protocol.close_timeout; elapsed += dt) {
    const double force = std::min(sim.pad_force(SoftBodySim::kLeftPad),
                                  sim.pad_force(SoftBodySim::kRightPad));
    if (std::abs(force - target) <= 0.05 * target) {
      log.closed = true;
      break;
    }
    if (force > 1.02 * best_force) {
      best_force = force;
      sep_at_best = pose.separation;
    }
    if (best_force > 0.3 * target &&
        ((force < 0.9 * best_force && pose.separation <= sep_at_best) ||
         pose.separation < 0.6 * sep_at_best))
      break;  // saturated: squeezing beyond the best grip no longer raises the force
    const double moved = sep_prev - pose.separation;
    if (std::abs(moved) > 1e-9) {
      const double est = (force - force_prev) / moved;
      if (est > 10.0) stiffness_est = est;
    }
    double ds;  // positive closes
    if (force < 1e-3)
      ds = ds_max;
    else if (stiffness_est > 10.0)
      ds = std::clamp(0.6 * (target - force) / stiffness_est, -ds_max, ds_max);
    else
      ds = 0.25 * ds_max;
    force_prev = force;
    sep_prev = pose.separation;
    pose.separation =
        std::clamp(pose.separation - ds, protocol.min_separation, gm.max_opening);
    if (pose.separation <= protocol.min_separation + 1e-12 && force < 0.02 * target)
      break;  // closed on nothing
    sim.set_gripper_pose(pose);
    sim.step();
  }
  log.close_separation = pose.separation;
  log.left_force = sim.pad_force(SoftBodySim::kLeftPad);
  log.right_force = sim.pad_force(SoftBodySim::kRightPad);

  const Vec3 com_before = sim.center_of_mass();
  const Vec3 grip_before = pose.center;
  double raised = 0.0;
  while (raised < protocol.lift_height - 1e-12) {
    const double dz = std::min(protocol.lift_speed * dt, protocol.lift_height - raised);
    pose.center.z() += dz;
    raised += dz;
    sim.set_gripper_pose(pose);
    sim.step();
  }
  const int settle_steps =
      static_cast<int>(std::lround(protocol.post_lift_settle / dt));
  for (int i = 0; i < settle_steps; ++i) sim.step();

  const Vec3 com_after = sim.center_of_mass();
  log.lifted = (com_after.z() - com_before.z()) >= 0.5 * protocol.lift_height;
  log.displacement_in_hand =
      ((com_after - pose.center) - (com_before - grip_before)).norm();
  log.inverted_elements = sim.inverted_elements() - settled.inverted_elements;
  log.post_lift = sim.save();
  return log;
}

}  // namespace defgrasp::fem
