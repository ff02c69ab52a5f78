// Implicit-Euler soft-body stepper: block-CSR tangent assembly, block-Jacobi
// preconditioned CG, penalty contact with Coulomb-capped implicit friction
// dampers against analytic colliders (ground half-space, finger pads, palm).
#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

#include "defgrasp/fem.hpp"

namespace defgrasp::fem {

namespace {

Mat3 edge_matrix(const Vec3& p0, const Vec3& p1, const Vec3& p2, const Vec3& p3) {
  Mat3 m;
  m.col(0) = p1 - p0;
  m.col(1) = p2 - p0;
  m.col(2) = p3 - p0;
  return m;
}

struct ColliderBox {
  int id;
  Vec3 center;
  Mat3 axes;  // columns = box axes in world
  Vec3 half;
  double friction;
  Vec3 velocity = Vec3::Zero();  // kinematic motion over the current step
};

std::vector<ColliderBox> collider_boxes_for(const GripperModel& g, const GripperPose& pose) {
  const Vec3 axis(std::cos(pose.yaw), std::sin(pose.yaw), 0.0);
  const Vec3 perp(-std::sin(pose.yaw), std::cos(pose.yaw), 0.0);
  Mat3 frame;
  frame.col(0) = axis;
  frame.col(1) = perp;
  frame.col(2) = Vec3::UnitZ();
  const double off = pose.separation / 2.0 + g.pad_thickness / 2.0;
  const Vec3 pad_half(g.pad_thickness / 2.0, g.pad_width / 2.0, g.pad_height / 2.0);
  std::vector<ColliderBox> boxes;
  boxes.push_back({SoftBodySim::kLeftPad, pose.center - off * axis, frame, pad_half, g.friction});
  boxes.push_back({SoftBodySim::kRightPad, pose.center + off * axis, frame, pad_half, g.friction});
  // the palm underside sits finger_length above the pad bottoms, matching a
  // hand whose fingers extend below the palm
  const Vec3 palm_half(pose.separation / 2.0 + g.pad_thickness, g.pad_width / 2.0,
                       g.palm_thickness / 2.0);
  const Vec3 palm_center =
      pose.center +
      Vec3(0, 0, g.finger_length - g.pad_height / 2.0 + g.palm_thickness / 2.0);
  boxes.push_back({SoftBodySim::kPalm, palm_center, frame, palm_half, g.friction});
  return boxes;
}

}  // namespace

SoftBodySim::SoftBodySim(const TetMesh& mesh, const std::vector<MaterialParams>& materials,
                         const SimConfig& config, const GripperModel& gripper)
    : mesh_(mesh), config_(config), gripper_model_(gripper) {
  mesh_.validate();
  gripper_model_.validate();
  if (materials.empty()) throw std::invalid_argument("no materials given");
  for (const auto& m : materials) m.validate();
  surface_ = geometry::extract_surface(mesh_, &surface_nodes_);

  const int n = static_cast<int>(mesh_.vertices.size());
  x_ = mesh_.vertices;
  v_.assign(n, Vec3::Zero());
  warm_dv_.assign(n, Vec3::Zero());
  mass_.assign(n, 0.0);

  // per-element precompute; the damping factor dt·β is folded in at assembly,
  // so keep β with the element
  std::vector<Mat6> d_by_material;
  for (const auto& m : materials)
    d_by_material.push_back(isotropic_elasticity(m.young_modulus, m.poisson_ratio));
  elements_.reserve(mesh_.tets.size());
  beta_.reserve(mesh_.tets.size());
  for (size_t t = 0; t < mesh_.tets.size(); ++t) {
    const auto& tet = mesh_.tets[t];
    const int mat = mesh_.tet_material.empty() ? 0 : mesh_.tet_material[t];
    if (mat < 0 || mat >= static_cast<int>(materials.size()))
      throw std::invalid_argument("tet material id out of range");
    const std::array<Vec3, 4> rest = {mesh_.vertices[tet[0]], mesh_.vertices[tet[1]],
                                      mesh_.vertices[tet[2]], mesh_.vertices[tet[3]]};
    Element e;
    e.nodes = tet;
    const Mat3 dm = edge_matrix(rest[0], rest[1], rest[2], rest[3]);
    e.volume = dm.determinant() / 6.0;
    e.dm_inv = dm.inverse();
    e.ke = element_stiffness(rest, d_by_material[mat]);
    elements_.push_back(e);
    beta_.push_back(materials[mat].rayleigh_beta);
    for (int a = 0; a < 4; ++a) mass_[tet[a]] += materials[mat].density * e.volume / 4.0;
  }
  alpha_ = materials.front().rayleigh_alpha;  // mass damping is global
  for (double m : mass_) total_mass_ += m;

  // block sparsity over node pairs; per-element scatter slots
  std::vector<std::set<int>> adjacency(n);
  for (const auto& e : elements_)
    for (int a : e.nodes)
      for (int b : e.nodes) adjacency[a].insert(b);
  row_ptr_.assign(n + 1, 0);
  for (int i = 0; i < n; ++i) row_ptr_[i + 1] = row_ptr_[i] + static_cast<int>(adjacency[i].size());
  col_.reserve(row_ptr_[n]);
  for (int i = 0; i < n; ++i) col_.insert(col_.end(), adjacency[i].begin(), adjacency[i].end());
  const auto slot = [&](int i, int j) {
    for (int k = row_ptr_[i]; k < row_ptr_[i + 1]; ++k)
      if (col_[k] == j) return k;
    throw std::logic_error("missing sparsity slot");
  };
  diag_slot_.resize(n);
  for (int i = 0; i < n; ++i) diag_slot_[i] = slot(i, i);
  scatter_.resize(elements_.size());
  for (size_t e = 0; e < elements_.size(); ++e) {
    scatter_[e].resize(16);
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j)
        scatter_[e][4 * i + j] = slot(elements_[e].nodes[i], elements_[e].nodes[j]);
  }
  a_values_.assign(col_.size(), Mat3::Zero());

  f_total_.assign(n, Vec3::Zero());
  rhs_.assign(n, Vec3::Zero());
  kv_.assign(n, Vec3::Zero());
  precond_.assign(n, Mat3::Identity());
  kc_diag_.assign(n, Mat3::Zero());
  cd_diag_.assign(n, Mat3::Zero());
}

Vec3 SoftBodySim::center_of_mass() const {
  Vec3 com = Vec3::Zero();
  for (int i = 0; i < node_count(); ++i) com += mass_[i] * x_[i];
  return com / total_mass_;
}

std::vector<Vec3> SoftBodySim::surface_positions() const {
  std::vector<Vec3> p(surface_nodes_.size());
  for (size_t i = 0; i < surface_nodes_.size(); ++i) p[i] = x_[surface_nodes_[i]];
  return p;
}

void SoftBodySim::set_gripper_pose(const GripperPose& pose) {
  if (!(pose.separation >= 0.0 && pose.separation <= gripper_model_.max_opening + 1e-12))
    throw std::invalid_argument("finger separation outside [0, max opening]");
  // a pose set while the rig is disabled is a teleport, not a motion
  if (!gripper_enabled_) gripper_pose_prev_ = pose;
  gripper_pose_ = pose;
}

void SoftBodySim::accumulate_contacts(double dt, std::vector<Vec3>& f, std::vector<Mat3>& kc,
                                      std::vector<Mat3>& cd) {
  const double k_n = config_.contact_stiffness;
  const double k_t = config_.contact_tangent_stiffness;
  pending_contacts_.clear();

  std::vector<ColliderBox> boxes;
  if (gripper_enabled_) {
    boxes = collider_boxes_for(gripper_model_, gripper_pose_);
    const auto prev = collider_boxes_for(gripper_model_, gripper_pose_prev_);
    for (size_t b = 0; b < boxes.size(); ++b)
      boxes[b].velocity = (boxes[b].center - prev[b].center) / dt;
  }

  // Friction is a tangential damper on the node–collider relative velocity,
  // capped so the force stays inside the Coulomb cone: D = min(k_t·dt,
  // μ‖f_n‖/‖v_rel‖). Sticking is then velocity tracking of the collider and
  // sliding applies exactly μ‖f_n‖ against the slip, both solved implicitly.
  const auto handle = [&](int node, int collider, double depth, const Vec3& normal,
                          const Vec3& w, double mu) {
    const Vec3 f_n = k_n * depth * normal;
    const Mat3 tangent = Mat3::Identity() - normal * normal.transpose();
    const Vec3 v_rel = tangent * (v_[node] - w);
    const double d_stick = k_t * dt;
    const double limit = mu * f_n.norm();
    double d = d_stick;
    bool sliding = false;
    if (d_stick * v_rel.norm() > limit) {
      d = limit / std::max(v_rel.norm(), 1e-12);
      sliding = true;
    }
    const Vec3 f_t = -d * v_rel;
    f[node] += f_n + f_t;
    kc[node] += k_n * normal * normal.transpose();
    cd[node] += d * tangent;
    pending_contacts_.push_back({node, collider, f_n + f_t, sliding});
  };

  const int n = node_count();
  for (int i = 0; i < n; ++i) {
    if (ground_enabled_ && x_[i].z() < 0.0)
      handle(i, kGround, -x_[i].z(), Vec3::UnitZ(), Vec3::Zero(), config_.ground_friction);
    for (const auto& box : boxes) {
      const Vec3 local = box.axes.transpose() * (x_[i] - box.center);
      if ((local.array().abs() >= box.half.array()).any()) continue;
      // shallowest face exit
      int k_min = 0;
      double depth = box.half[0] - std::abs(local[0]);
      for (int k = 1; k < 3; ++k) {
        const double d = box.half[k] - std::abs(local[k]);
        if (d < depth) {
          depth = d;
          k_min = k;
        }
      }
      const Vec3 normal = (local[k_min] >= 0.0 ? 1.0 : -1.0) * box.axes.col(k_min);
      handle(i, box.id, depth, normal, box.velocity, box.friction);
    }
  }
}

bool SoftBodySim::try_step(double dt) {
  const int n = node_count();

  // corotational forces and world-frame stiffness, scaled by (dt·β + dt²) so
  // Rayleigh damping and the implicit term share one assembled matrix
  std::fill(a_values_.begin(), a_values_.end(), Mat3::Zero());
  std::fill(f_total_.begin(), f_total_.end(), Vec3::Zero());
  std::fill(kc_diag_.begin(), kc_diag_.end(), Mat3::Zero());
  std::fill(cd_diag_.begin(), cd_diag_.end(), Mat3::Zero());
  std::fill(kv_.begin(), kv_.end(), Vec3::Zero());
  pending_inverted_ = 0;

  for (size_t e = 0; e < elements_.size(); ++e) {
    const Element& el = elements_[e];
    const Mat3 ds = edge_matrix(x_[el.nodes[0]], x_[el.nodes[1]], x_[el.nodes[2]],
                                x_[el.nodes[3]]);
    bool inverted = false;
    const Mat3 r = polar_rotation(ds * el.dm_inv, &inverted);
    if (inverted) ++pending_inverted_;

    Eigen::Matrix<double, 12, 1> u;
    for (int a = 0; a < 4; ++a)
      u.segment<3>(3 * a) = r.transpose() * x_[el.nodes[a]] - mesh_.vertices[el.nodes[a]];
    const Eigen::Matrix<double, 12, 1> fe = el.ke * u;
    for (int a = 0; a < 4; ++a) f_total_[el.nodes[a]] -= r * fe.segment<3>(3 * a);

    const double scale = dt * beta_[e] + dt * dt;
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j)
        a_values_[scatter_[e][4 * i + j]].noalias() +=
            scale * (r * el.ke.block<3, 3>(3 * i, 3 * j) * r.transpose());
  }

  accumulate_contacts(dt, f_total_, kc_diag_, cd_diag_);

  const Vec3 g = gravity_override_ ? *gravity_override_ : config_.gravity;
  for (int i = 0; i < n; ++i) f_total_[i] += mass_[i] * g;
  if (!external_.empty())
    for (int i = 0; i < n; ++i) f_total_[i] += external_[i];

  // rhs = dt·f − dt·α·M·v − (dt·β + dt²)·K·v − dt²·K_n·v
  // (f already holds the friction damper force at the current velocity)
  for (int i = 0; i < n; ++i)
    for (int k = row_ptr_[i]; k < row_ptr_[i + 1]; ++k)
      kv_[i].noalias() += a_values_[k] * v_[col_[k]];
  for (int i = 0; i < n; ++i)
    rhs_[i] = dt * f_total_[i] - dt * alpha_ * mass_[i] * v_[i] - kv_[i] -
              dt * dt * (kc_diag_[i] * v_[i]);

  // A = (1 + dt·α)·M + (dt·β + dt²)·K + dt²·K_n + dt·D_friction
  for (int i = 0; i < n; ++i)
    a_values_[diag_slot_[i]] += (1.0 + dt * alpha_) * mass_[i] * Mat3::Identity() +
                                dt * dt * kc_diag_[i] + dt * cd_diag_[i];

  std::vector<Vec3> dv = warm_dv_;
  if (!solve_cg(dv)) return false;

  warm_dv_ = dv;
  for (int i = 0; i < n; ++i) {
    v_[i] += dv[i];
    x_[i] += dt * v_[i];
  }
  contacts_ = pending_contacts_;
  inverted_elements_ += pending_inverted_;
  gripper_pose_prev_ = gripper_pose_;
  time_ += dt;
  return true;
}

bool SoftBodySim::solve_cg(std::vector<Vec3>& dv) {
  const int n = node_count();
  const int max_iters =
      config_.cg_max_iterations > 0 ? config_.cg_max_iterations : 3 * n + 60;

  for (int i = 0; i < n; ++i) precond_[i] = a_values_[diag_slot_[i]].inverse();

  const auto mat_vec = [&](const std::vector<Vec3>& in, std::vector<Vec3>& out) {
    for (int i = 0; i < n; ++i) {
      Vec3 acc = Vec3::Zero();
      for (int k = row_ptr_[i]; k < row_ptr_[i + 1]; ++k)
        acc.noalias() += a_values_[k] * in[col_[k]];
      out[i] = acc;
    }
  };
  const auto dot = [&](const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += a[i].dot(b[i]);
    return s;
  };

  std::vector<Vec3> r(n), z(n), p(n), ap(n);
  mat_vec(dv, ap);
  double b_norm2 = 0.0;
  for (int i = 0; i < n; ++i) {
    r[i] = rhs_[i] - ap[i];
    b_norm2 += rhs_[i].squaredNorm();
  }
  const double target2 =
      std::max(config_.cg_tolerance * config_.cg_tolerance * b_norm2, 1e-60);
  if (dot(r, r) <= target2) return true;

  for (int i = 0; i < n; ++i) z[i] = precond_[i] * r[i];
  p = z;
  double rz = dot(r, z);
  for (int iter = 0; iter < max_iters; ++iter) {
    mat_vec(p, ap);
    const double pap = dot(p, ap);
    if (!(pap > 0.0)) return false;  // lost positive definiteness / numerics
    const double step = rz / pap;
    for (int i = 0; i < n; ++i) {
      dv[i] += step * p[i];
      r[i] -= step * ap[i];
    }
    if (dot(r, r) <= target2) return true;
    for (int i = 0; i < n; ++i) z[i] = precond_[i] * r[i];
    const double rz_next = dot(r, z);
    for (int i = 0; i < n; ++i) p[i] = z[i] + (rz_next / rz) * p[i];
    rz = rz_next;
  }
  return false;
}

void SoftBodySim::step() {
  const double dt = config_.dt;
  if (try_step(dt)) return;
  // reject and retry at half the step; state was not touched on failure
  if (try_step(dt / 2.0) && try_step(dt / 2.0)) return;
  throw std::runtime_error("implicit step failed to converge even at half timestep");
}

bool SoftBodySim::gripper_intersects_surface(const GripperPose& pose) const {
  // pads only: a palm strike is a path problem, caught by the descent force
  // abort rather than by this static pose check
  const auto boxes = collider_boxes_for(gripper_model_, pose);
  const auto positions = surface_positions();
  for (const auto& tri : surface_.triangles)
    for (int b = 0; b < 2; ++b)
      if (geometry::triangle_intersects_obb(positions[tri[0]], positions[tri[1]],
                                            positions[tri[2]], boxes[b].center,
                                            boxes[b].axes, boxes[b].half))
        return true;
  return false;
}

double SoftBodySim::pad_force(int collider) const {
  double total = 0.0;
  for (const auto& c : contacts_)
    if (c.collider == collider) total += c.force.norm();
  return total;
}

int SoftBodySim::pad_contact_count() const {
  int count = 0;
  for (const auto& c : contacts_)
    if (c.collider == kLeftPad || c.collider == kRightPad) ++count;
  return count;
}

double SoftBodySim::pad_slip_fraction() const {
  int pads = 0, sliding = 0;
  for (const auto& c : contacts_) {
    if (c.collider != kLeftPad && c.collider != kRightPad) continue;
    ++pads;
    if (c.sliding) ++sliding;
  }
  return pads > 0 ? static_cast<double>(sliding) / pads : 0.0;
}

SimSnapshot SoftBodySim::save() const {
  SimSnapshot s;
  s.x = x_;
  s.v = v_;
  s.gripper = gripper_pose_;
  s.gripper_enabled = gripper_enabled_;
  s.time = time_;
  s.warm_dv = warm_dv_;
  s.contacts = contacts_;
  s.inverted_elements = inverted_elements_;
  return s;
}

void SoftBodySim::restore(const SimSnapshot& snap) {
  if (snap.x.size() != x_.size()) throw std::invalid_argument("snapshot node count mismatch");
  x_ = snap.x;
  v_ = snap.v;
  gripper_pose_ = snap.gripper;
  gripper_pose_prev_ = snap.gripper;
  gripper_enabled_ = snap.gripper_enabled;
  time_ = snap.time;
  warm_dv_ = snap.warm_dv;
  contacts_ = snap.contacts;
  inverted_elements_ = snap.inverted_elements;
  external_.clear();
  gravity_override_.reset();
}

}  // namespace defgrasp::fem
