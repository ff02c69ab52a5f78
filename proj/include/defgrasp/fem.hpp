// Corotational linear FEM soft-body dynamics with penalty contact (normal
// springs, Coulomb-capped implicit friction dampers) and a kinematic
// parallel-jaw gripper rig. One SoftBodySim instance is single-threaded and
// owns its state; run many instances in parallel for independent trials.
#pragma once

#include <Eigen/Dense>
#include <array>
#include <functional>
#include <optional>
#include <vector>

#include "defgrasp/geometry.hpp"
#include "defgrasp/grasp.hpp"

namespace defgrasp::fem {

using geometry::SurfaceMesh;
using geometry::TetMesh;
using geometry::Vec3;
using Mat3 = Eigen::Matrix3d;
using Mat6 = Eigen::Matrix<double, 6, 6>;
using Mat12 = Eigen::Matrix<double, 12, 12>;

struct MaterialParams {
  double young_modulus = 1e6;   // Pa
  double poisson_ratio = 0.3;
  double density = 1200.0;      // kg/m³
  double rayleigh_alpha = 0.0;  // mass-proportional damping (1/s)
  double rayleigh_beta = 2e-3;  // stiffness-proportional damping (s)

  void validate() const;  // throws on E<=0, ν outside [0,0.5), ρ<=0, negative damping
};

// Isotropic Hooke matrix, Voigt order [xx,yy,zz,xy,yz,zx] with engineering
// shear strain: normal block λ+2μ / λ, shear diagonal μ.
Mat6 isotropic_elasticity(double young_modulus, double poisson_ratio);

// Linear-tet stiffness Ke = V·Bᵀ·D·B for the rest tet (12x12, symmetric PSD,
// rigid modes in the nullspace). Throws on degenerate tets.
Mat12 element_stiffness(const std::array<Vec3, 4>& rest_vertices, const Mat6& D);

// Rotation factor of F by Higham iteration with an SVD fallback (det forced
// to +1). If inverted is given it is set when det F <= 0.
Mat3 polar_rotation(const Mat3& F, bool* inverted = nullptr);

// Corotational forces f = -R·Ke·(Rᵀx − X) summed per node, rotations taken
// from x itself. materials is indexed by the mesh's per-tet material id.
// Returns the number of inverted elements encountered.
int elastic_forces(const TetMesh& mesh, const std::vector<MaterialParams>& materials,
                   const std::vector<Vec3>& x, std::vector<Vec3>& f);

// ½·Σ (Rᵀx−X)ᵀKe(Rᵀx−X) with per-element rotations extracted at x_ref and
// held fixed; elastic_forces(x_ref) is exactly −∂/∂x of this at x = x_ref.
double corotational_energy(const TetMesh& mesh, const std::vector<MaterialParams>& materials,
                           const std::vector<Vec3>& x_ref, const std::vector<Vec3>& x);

struct SimConfig {
  double dt = 2e-3;                     // s
  double contact_stiffness = 1e5;       // k_n, N/m per contact node
  double contact_tangent_stiffness = 1e5;  // k_t
  double cg_tolerance = 1e-9;           // relative residual
  int cg_max_iterations = 0;            // 0 → 3·nodes + 60
  Vec3 gravity{0.0, 0.0, -9.81};
  double ground_friction = 0.7;
};

struct GripperModel {
  double pad_width = 0.02;      // horizontal extent ⟂ closing axis (m)
  double pad_height = 0.02;     // vertical extent (m)
  double pad_thickness = 0.008; // along closing axis (m)
  double finger_length = 0.05;  // pad bottom to palm underside (m)
  double palm_thickness = 0.01; // palm slab atop the fingers (m)
  double max_opening = 0.08;    // m
  double close_force = 20.0;    // F_close target per finger (N)
  double friction = 0.7;        // μ

  void validate() const;
};

struct GripperPose {
  Vec3 center = Vec3::Zero();  // midpoint between pad inner faces, pad mid-height
  double yaw = 0.0;            // closing axis = (cos yaw, sin yaw, 0)
  double separation = 0.0;     // inner-face distance (m)
};

struct Contact {
  int node = -1;
  int collider = -1;  // 0 ground, 1 left pad, 2 right pad, 3 palm
  Vec3 force = Vec3::Zero();  // on the object
  bool sliding = false;       // Coulomb clamp active this step
};

// Everything needed to restart a simulation mid-trial (the CG warm start is
// included so restarts are bit-reproducible).
struct SimSnapshot {
  std::vector<Vec3> x, v;
  GripperPose gripper;
  bool gripper_enabled = false;
  double time = 0.0;
  std::vector<Vec3> warm_dv;
  std::vector<Contact> contacts;
  int inverted_elements = 0;
};

class SoftBodySim {
 public:
  static constexpr int kGround = 0, kLeftPad = 1, kRightPad = 2, kPalm = 3, kNumColliders = 4;

  SoftBodySim(const TetMesh& mesh, const std::vector<MaterialParams>& materials,
              const SimConfig& config, const GripperModel& gripper = GripperModel{});

  int node_count() const { return static_cast<int>(x_.size()); }
  const std::vector<Vec3>& positions() const { return x_; }
  const std::vector<Vec3>& velocities() const { return v_; }
  void set_velocity(int node, const Vec3& v) { v_[node] = v; }
  double node_mass(int node) const { return mass_[node]; }
  double total_mass() const { return total_mass_; }
  Vec3 center_of_mass() const;
  double time() const { return time_; }
  const std::vector<Contact>& contacts() const { return contacts_; }
  int inverted_elements() const { return inverted_elements_; }
  const TetMesh& mesh() const { return mesh_; }
  const SimConfig& config() const { return config_; }
  const GripperModel& gripper_model() const { return gripper_model_; }

  // deformed boundary: fixed topology, positions follow the simulation nodes
  const SurfaceMesh& rest_surface() const { return surface_; }
  const std::vector<int>& surface_nodes() const { return surface_nodes_; }
  std::vector<Vec3> surface_positions() const;

  void enable_ground(bool on) { ground_enabled_ = on; }
  void enable_gripper(bool on) { gripper_enabled_ = on; }
  void set_gripper_pose(const GripperPose& pose);
  const GripperPose& gripper_pose() const { return gripper_pose_; }
  // finger pads at the given pose vs the current deformed surface (exact SAT)
  bool gripper_intersects_surface(const GripperPose& pose) const;

  // total contact force magnitude currently carried by a collider (N)
  double pad_force(int collider) const;
  // number of nodes touching either pad
  int pad_contact_count() const;
  // fraction of pad-contact nodes whose friction was Coulomb-capped last step
  double pad_slip_fraction() const;

  // extra per-node forces added to the next steps (e.g. the frame-acceleration
  // forces of the shake/twist protocols); cleared with an empty vector
  void set_external_forces(std::vector<Vec3> f) { external_ = std::move(f); }
  // gravity override for rotating-frame protocols (empty → config gravity)
  void set_gravity_override(const std::optional<Vec3>& g) { gravity_override_ = g; }

  // One implicit-Euler step of config.dt. If CG fails, the step is retried as
  // two half steps; if that also fails, throws.
  void step();

  SimSnapshot save() const;
  void restore(const SimSnapshot& snap);

 private:
  struct Element {
    std::array<int, 4> nodes;
    Mat3 dm_inv;
    Mat12 ke;
    double volume;
  };

  bool try_step(double dt);
  bool solve_cg(std::vector<Vec3>& dv);
  // contact forces, normal penalty stiffness and capped friction dampers
  void accumulate_contacts(double dt, std::vector<Vec3>& f, std::vector<Mat3>& k_contact,
                           std::vector<Mat3>& c_damper);

  TetMesh mesh_;
  SimConfig config_;
  GripperModel gripper_model_;
  SurfaceMesh surface_;
  std::vector<int> surface_nodes_;

  std::vector<Element> elements_;
  std::vector<double> beta_;  // per-element stiffness damping
  double alpha_ = 0.0;        // global mass damping
  std::vector<double> mass_;
  double total_mass_ = 0.0;

  // block-CSR sparsity over node pairs; per-element scatter slots
  std::vector<int> row_ptr_, col_, diag_slot_;
  std::vector<std::vector<int>> scatter_;  // [element][16]
  std::vector<Mat3> a_values_;             // system matrix of the current solve

  std::vector<Vec3> x_, v_, warm_dv_;
  GripperPose gripper_pose_;
  GripperPose gripper_pose_prev_;  // pose at the last committed step, for collider velocity
  bool gripper_enabled_ = false;
  bool ground_enabled_ = true;
  double time_ = 0.0;
  int inverted_elements_ = 0;
  int pending_inverted_ = 0;
  std::vector<Vec3> external_;
  std::optional<Vec3> gravity_override_;

  std::vector<Contact> contacts_;
  std::vector<Contact> pending_contacts_;  // staged during try_step, committed on acceptance

  // scratch buffers
  std::vector<Vec3> f_total_, rhs_, kv_;
  std::vector<Mat3> precond_, kc_diag_, cd_diag_;
};

struct GraspProtocol {
  double settle_time = 0.25;        // object alone under gravity (s)
  double descend_speed = 0.1;       // m/s
  double descent_force_limit = 3.0; // per-pad abort threshold while descending (N)
  double close_speed = 0.04;        // max servo closing speed (m/s)
  double close_timeout = 1.5;       // s
  double min_separation = 0.002;    // m
  double lift_height = 0.1;         // m
  double lift_speed = 0.1;          // m/s
  double post_lift_settle = 0.1;    // s
  // Geometric pre-check of the grasp pose against the settled surface.
  // Sampler candidates should never fail it (hence "invalid, not failed");
  // network-decoded grasps may legitimately command a pose inside the rest
  // silhouette (a pinch on a soft object), so evaluation runs disable the
  // pre-check and let the descent force limit arbitrate instead.
  bool pretest_pose = true;
};

struct GraspTrialLog {
  bool valid = true;            // false: pads interpenetrate the object at the grasp pose
  bool collision_abort = false; // descent force limit exceeded
  bool closed = false;          // per-finger force target reached
  bool lifted = false;
  double close_separation = 0.0;
  double left_force = 0.0, right_force = 0.0;  // at the end of closing (N)
  double displacement_in_hand = 0.0;           // object motion relative to gripper (m)
  int inverted_elements = 0;
  SimSnapshot post_lift;  // restart point for the shake/twist protocols
};

// Settle the object under gravity on the ground plane (gripper disabled).
SimSnapshot settle_object(SoftBodySim& sim, double settle_time);

// Runs descent → force-servo close → lift on a settled state. The sim is left
// at the post-lift state. Deterministic for identical inputs.
GraspTrialLog simulate_grasp(SoftBodySim& sim, const SimSnapshot& settled,
                             const GraspCandidate& grasp, const GraspProtocol& protocol);

}  // namespace defgrasp::fem
