// Shake- and twist-task grasp scoring: after a lift, ramp the acceleration of
// the gripper base until the object slips out of the hand or the task cap is
// reached, and label grasp quality from the 16-direction shake average.
#pragma once

#include <array>

#include "defgrasp/fem.hpp"

namespace defgrasp::eval {

using geometry::Vec3;

// Ramp schedules and failure thresholds. Defaults are the benchmark values:
// linear cap 50 m/s² (success needs 25 everywhere), angular cap 500 rad/s².
struct EvalProtocol {
  fem::GraspProtocol grasp;         // settle → descend → close → lift
  double shake_jerk = 50.0;         // m/s³
  double shake_cap = 50.0;          // m/s²
  double shake_pass = 25.0;         // per-direction success threshold (m/s²)
  double twist_jerk = 500.0;        // rad/s³
  double twist_cap = 500.0;         // rad/s² (success requires the full cap)
  double contact_loss_time = 0.05;  // s without any pad contact ⇒ dropped
  double slip_limit = 0.02;         // m of object motion in hand ⇒ lost
};

struct ShakeResult {
  std::array<double, 16> withstand{};  // m/s², ordered like shake_directions()
  double average = 0.0;
  bool lift_succeeded = false;
};

struct TwistResult {
  std::array<double, 6> withstand{};  // rad/s²: ±closing axis, ±side, ±vertical
  double minimum = 0.0;
};

struct GraspLabel {
  bool positive = false;  // shake average strictly above 25 m/s²
  double quality = 0.0;   // shake average / 50, clamped to [0,1]
};

// The 16 shake directions: spherical-Fibonacci unit vectors, world frame,
// tabulated in docs/shake_directions.md.
const std::array<Vec3, 16>& shake_directions();

// Runs the grasp through the lift, then for each direction ramps the base
// acceleration from zero at shake_jerk and records the value at which the
// grasp fails — the object moves slip_limit relative to the (held) gripper,
// or the pads carry no contact for contact_loss_time — or the cap if it never
// does. The base acceleration enters as the inertial force −m·a·dir on every
// node; each direction restarts from the post-lift state. A failed lift
// scores zero everywhere.
ShakeResult shake_task(fem::SoftBodySim& sim, const fem::SimSnapshot& settled,
                       const GraspCandidate& grasp, const EvalProtocol& protocol = {});

// Ramp phase only, for callers that already ran the grasp and hold its log;
// identical to the overload above given that trial. A failed lift scores
// zero everywhere.
ShakeResult shake_task(fem::SoftBodySim& sim, const fem::GraspTrialLog& trial,
                       const EvalProtocol& protocol = {});

// Same ramp for the angular acceleration of the base about the six signed
// gripper axes through the gripper center, at twist_jerk up to twist_cap.
// Only the angular-acceleration (Euler) force −m·α×r acts: the twist is a
// high-frequency dither, so the accumulated rate ω stays negligible and
// centrifugal/Coriolis terms are dropped.
TwistResult twist_task(fem::SoftBodySim& sim, const fem::SimSnapshot& settled,
                       const GraspCandidate& grasp, const EvalProtocol& protocol = {});

GraspLabel label_grasp(const ShakeResult& shake);

// Everything the benchmark records for one grasp, sharing a single lift.
struct GraspEvaluation {
  fem::GraspTrialLog trial;
  ShakeResult shake;
  TwistResult twist;
  GraspLabel label;
  bool success = false;  // lifted ∧ every shake ≥ shake_pass ∧ every twist at cap
};

GraspEvaluation evaluate_grasp(fem::SoftBodySim& sim, const fem::SimSnapshot& settled,
                               const GraspCandidate& grasp, const EvalProtocol& protocol = {});

// success field of evaluate_grasp, for callers that need nothing else
bool grasp_success(fem::SoftBodySim& sim, const fem::SimSnapshot& settled,
                   const GraspCandidate& grasp, const EvalProtocol& protocol = {});

}  // namespace defgrasp::eval
