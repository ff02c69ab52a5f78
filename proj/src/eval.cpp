#include "defgrasp/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

namespace defgrasp::eval {
namespace {

// Slip/drop detection for one ramp. Contact loss is debounced so a single
// chattering step does not end the trial.
struct FailureDetector {
  double zero_contact_time = 0.0;

  bool update(const fem::SoftBodySim& sim, const std::vector<Vec3>& x_ref,
              const EvalProtocol& p, double dt) {
    if (sim.pad_contact_count() == 0) {
      zero_contact_time += dt;
      if (zero_contact_time > p.contact_loss_time) return true;
    } else {
      zero_contact_time = 0.0;
    }
    const double lim2 = p.slip_limit * p.slip_limit;
    const auto& x = sim.positions();
    for (std::size_t i = 0; i < x.size(); ++i)
      if ((x[i] - x_ref[i]).squaredNorm() > lim2) return true;
    return false;
  }
};

// a(t) = jerk·t up to cap, applied as the uniform inertial field −m·a·dir via
// the gravity override. Returns the acceleration at failure, or the cap.
double linear_ramp(fem::SoftBodySim& sim, const fem::SimSnapshot& start, const Vec3& dir,
                   const EvalProtocol& p) {
  sim.restore(start);
  const double dt = sim.config().dt;
  const Vec3 g = sim.config().gravity;
  FailureDetector detector;
  double a = 0.0;
  for (int k = 1;; ++k) {
    a = std::min(p.shake_jerk * (k * dt), p.shake_cap);
    sim.set_gravity_override(g - a * dir);
    sim.step();
    if (detector.update(sim, start.x, p, dt)) break;
    if (a >= p.shake_cap) break;
  }
  sim.set_gravity_override(std::nullopt);
  return a;
}

// Angular version: per-node Euler force −m·α·(axis × r) about the given
// origin, recomputed from the current positions each step.
double angular_ramp(fem::SoftBodySim& sim, const fem::SimSnapshot& start, const Vec3& axis,
                    const Vec3& origin, const EvalProtocol& p) {
  sim.restore(start);
  const double dt = sim.config().dt;
  FailureDetector detector;
  std::vector<Vec3> fext(start.x.size());
  double alpha = 0.0;
  for (int k = 1;; ++k) {
    alpha = std::min(p.twist_jerk * (k * dt), p.twist_cap);
    const auto& x = sim.positions();
    for (std::size_t i = 0; i < x.size(); ++i)
      fext[i] = -sim.node_mass(static_cast<int>(i)) * alpha * axis.cross(x[i] - origin);
    sim.set_external_forces(fext);
    sim.step();
    if (detector.update(sim, start.x, p, dt)) break;
    if (alpha >= p.twist_cap) break;
  }
  sim.set_external_forces({});
  return alpha;
}

ShakeResult shake_from(fem::SoftBodySim& sim, const fem::GraspTrialLog& trial,
                       const EvalProtocol& p) {
  ShakeResult r;
  r.lift_succeeded = trial.lifted;
  if (!trial.lifted) return r;
  const auto& dirs = shake_directions();
  double sum = 0.0;
  for (std::size_t d = 0; d < dirs.size(); ++d) {
    r.withstand[d] = linear_ramp(sim, trial.post_lift, dirs[d], p);
    sum += r.withstand[d];
  }
  r.average = sum / static_cast<double>(dirs.size());
  return r;
}

TwistResult twist_from(fem::SoftBodySim& sim, const fem::GraspTrialLog& trial,
                       const EvalProtocol& p) {
  TwistResult r;
  if (!trial.lifted) return r;
  const double yaw = trial.post_lift.gripper.yaw;
  const Vec3 close_axis{std::cos(yaw), std::sin(yaw), 0.0};
  const Vec3 side{-std::sin(yaw), std::cos(yaw), 0.0};
  const Vec3 up{0.0, 0.0, 1.0};
  const std::array<Vec3, 6> axes{close_axis, -close_axis, side, -side, up, -up};
  const Vec3 origin = trial.post_lift.gripper.center;
  for (std::size_t i = 0; i < axes.size(); ++i)
    r.withstand[i] = angular_ramp(sim, trial.post_lift, axes[i], origin, p);
  r.minimum = *std::min_element(r.withstand.begin(), r.withstand.end());
  return r;
}

}  // namespace

const std::array<Vec3, 16>& shake_directions() {
  static const std::array<Vec3, 16> dirs = [] {
    std::array<Vec3, 16> d;
    const double golden_angle = std::numbers::pi * (3.0 - std::sqrt(5.0));
    for (int i = 0; i < 16; ++i) {
      const double z = 1.0 - 2.0 * (i + 0.5) / 16.0;
      const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
      const double phi = golden_angle * i;
      d[i] = Vec3{r * std::cos(phi), r * std::sin(phi), z};
    }
    return d;
  }();
  return dirs;
}

ShakeResult shake_task(fem::SoftBodySim& sim, const fem::SimSnapshot& settled,
                       const GraspCandidate& grasp, const EvalProtocol& protocol) {
  const auto trial = fem::simulate_grasp(sim, settled, grasp, protocol.grasp);
  return shake_from(sim, trial, protocol);
}

ShakeResult shake_task(fem::SoftBodySim& sim, const fem::GraspTrialLog& trial,
                       const EvalProtocol& protocol) {
  return shake_from(sim, trial, protocol);
}

TwistResult twist_task(fem::SoftBodySim& sim, const fem::SimSnapshot& settled,
                       const GraspCandidate& grasp, const EvalProtocol& protocol) {
  const auto trial = fem::simulate_grasp(sim, settled, grasp, protocol.grasp);
  return twist_from(sim, trial, protocol);
}

GraspLabel label_grasp(const ShakeResult& shake) {
  GraspLabel label;
  label.positive = shake.average > 25.0;
  label.quality = std::clamp(shake.average / 50.0, 0.0, 1.0);
  return label;
}

GraspEvaluation evaluate_grasp(fem::SoftBodySim& sim, const fem::SimSnapshot& settled,
                               const GraspCandidate& grasp, const EvalProtocol& protocol) {
  GraspEvaluation ev;
  ev.trial = fem::simulate_grasp(sim, settled, grasp, protocol.grasp);
  ev.shake = shake_from(sim, ev.trial, protocol);
  ev.twist = twist_from(sim, ev.trial, protocol);
  ev.label = label_grasp(ev.shake);
  const double shake_min =
      *std::min_element(ev.shake.withstand.begin(), ev.shake.withstand.end());
  ev.success = ev.trial.lifted && shake_min >= protocol.shake_pass &&
               ev.twist.minimum >= protocol.twist_cap;
  return ev;
}

bool grasp_success(fem::SoftBodySim& sim, const fem::SimSnapshot& settled,
                   const GraspCandidate& grasp, const EvalProtocol& protocol) {
  return evaluate_grasp(sim, settled, grasp, protocol).success;
}

}  // namespace defgrasp::eval
