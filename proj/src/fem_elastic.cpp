#include <Eigen/SVD>
#include <cmath>
#include <stdexcept>

#include "defgrasp/fem.hpp"

namespace defgrasp::fem {

void MaterialParams::validate() const {
  if (!(young_modulus > 0.0)) throw std::invalid_argument("young_modulus must be > 0");
  if (!(poisson_ratio >= 0.0 && poisson_ratio < 0.5))
    throw std::invalid_argument("poisson_ratio must lie in [0, 0.5)");
  if (!(density > 0.0)) throw std::invalid_argument("density must be > 0");
  if (rayleigh_alpha < 0.0 || rayleigh_beta < 0.0)
    throw std::invalid_argument("rayleigh damping must be >= 0");
}

void GripperModel::validate() const {
  if (!(max_opening > 0.0)) throw std::invalid_argument("max_opening must be > 0");
  if (!(close_force > 0.0)) throw std::invalid_argument("close_force must be > 0");
  if (friction < 0.0) throw std::invalid_argument("friction must be >= 0");
  if (!(pad_width > 0.0 && pad_height > 0.0 && pad_thickness > 0.0))
    throw std::invalid_argument("pad dimensions must be > 0");
  if (finger_length < pad_height)
    throw std::invalid_argument("finger_length must be >= pad_height");
}

Mat6 isotropic_elasticity(double young_modulus, double poisson_ratio) {
  if (!(young_modulus > 0.0)) throw std::invalid_argument("young_modulus must be > 0");
  if (!(poisson_ratio >= 0.0 && poisson_ratio < 0.5))
    throw std::invalid_argument("poisson_ratio must lie in [0, 0.5)");
  const double lambda = young_modulus * poisson_ratio /
                        ((1.0 + poisson_ratio) * (1.0 - 2.0 * poisson_ratio));
  const double mu = young_modulus / (2.0 * (1.0 + poisson_ratio));
  Mat6 d = Mat6::Zero();
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) d(i, j) = lambda;
    d(i, i) = lambda + 2.0 * mu;
    d(3 + i, 3 + i) = mu;  // engineering shear strain
  }
  return d;
}

namespace {

// 6x12 strain-displacement matrix from the four shape-function gradients
Eigen::Matrix<double, 6, 12> strain_matrix(const std::array<Vec3, 4>& grads) {
  Eigen::Matrix<double, 6, 12> b = Eigen::Matrix<double, 6, 12>::Zero();
  for (int a = 0; a < 4; ++a) {
    const double gx = grads[a].x(), gy = grads[a].y(), gz = grads[a].z();
    const int c = 3 * a;
    b(0, c) = gx;
    b(1, c + 1) = gy;
    b(2, c + 2) = gz;
    b(3, c) = gy;
    b(3, c + 1) = gx;
    b(4, c + 1) = gz;
    b(4, c + 2) = gy;
    b(5, c) = gz;
    b(5, c + 2) = gx;
  }
  return b;
}

std::array<Vec3, 4> shape_gradients(const Mat3& dm_inv) {
  std::array<Vec3, 4> g;
  for (int i = 0; i < 3; ++i) g[i + 1] = dm_inv.row(i);
  g[0] = -(g[1] + g[2] + g[3]);
  return g;
}

Mat3 edge_matrix(const Vec3& p0, const Vec3& p1, const Vec3& p2, const Vec3& p3) {
  Mat3 m;
  m.col(0) = p1 - p0;
  m.col(1) = p2 - p0;
  m.col(2) = p3 - p0;
  return m;
}

}  // namespace

Mat12 element_stiffness(const std::array<Vec3, 4>& rest_vertices, const Mat6& D) {
  const Mat3 dm =
      edge_matrix(rest_vertices[0], rest_vertices[1], rest_vertices[2], rest_vertices[3]);
  const double volume = dm.determinant() / 6.0;
  if (volume < 1e-12) throw std::invalid_argument("element_stiffness: degenerate tet");
  const auto b = strain_matrix(shape_gradients(dm.inverse()));
  return volume * b.transpose() * D * b;
}

Mat3 polar_rotation(const Mat3& F, bool* inverted) {
  const double det = F.determinant();
  if (inverted) *inverted = det <= 0.0;
  if (det > 1e-10) {
    // Higham iteration; quadratic convergence near the rotation group
    Mat3 r = F;
    for (int i = 0; i < 40; ++i) {
      const Mat3 next = 0.5 * (r + r.inverse().transpose());
      const double change = (next - r).cwiseAbs().maxCoeff();
      r = next;
      if (change < 1e-13) break;
    }
    if ((r * r.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-8) return r;
  }
  // inverted or ill-conditioned: nearest rotation with det +1
  Eigen::JacobiSVD<Mat3> svd(F, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 s = Mat3::Identity();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0) s(2, 2) = -1.0;
  return svd.matrixU() * s * svd.matrixV().transpose();
}

namespace {

struct ElementRef {
  std::array<int, 4> nodes;
  Mat3 dm_inv;
  Mat12 ke;
};

std::vector<ElementRef> build_elements(const TetMesh& mesh,
                                       const std::vector<MaterialParams>& materials) {
  if (materials.empty()) throw std::invalid_argument("no materials given");
  for (const auto& m : materials) m.validate();
  std::vector<Mat6> d_by_material;
  d_by_material.reserve(materials.size());
  for (const auto& m : materials)
    d_by_material.push_back(isotropic_elasticity(m.young_modulus, m.poisson_ratio));

  std::vector<ElementRef> elems;
  elems.reserve(mesh.tets.size());
  for (size_t t = 0; t < mesh.tets.size(); ++t) {
    const auto& tet = mesh.tets[t];
    const int mat = mesh.tet_material.empty() ? 0 : mesh.tet_material[t];
    if (mat < 0 || mat >= static_cast<int>(materials.size()))
      throw std::invalid_argument("tet material id out of range");
    const std::array<Vec3, 4> rest = {mesh.vertices[tet[0]], mesh.vertices[tet[1]],
                                      mesh.vertices[tet[2]], mesh.vertices[tet[3]]};
    ElementRef e;
    e.nodes = tet;
    e.dm_inv = edge_matrix(rest[0], rest[1], rest[2], rest[3]).inverse();
    e.ke = element_stiffness(rest, d_by_material[mat]);
    elems.push_back(e);
  }
  return elems;
}

}  // namespace

int elastic_forces(const TetMesh& mesh, const std::vector<MaterialParams>& materials,
                   const std::vector<Vec3>& x, std::vector<Vec3>& f) {
  const auto elems = build_elements(mesh, materials);
  f.assign(mesh.vertices.size(), Vec3::Zero());
  int inverted_count = 0;
  for (const auto& e : elems) {
    const Mat3 ds = edge_matrix(x[e.nodes[0]], x[e.nodes[1]], x[e.nodes[2]], x[e.nodes[3]]);
    bool inverted = false;
    const Mat3 r = polar_rotation(ds * e.dm_inv, &inverted);
    if (inverted) ++inverted_count;
    Eigen::Matrix<double, 12, 1> u;
    for (int a = 0; a < 4; ++a)
      u.segment<3>(3 * a) = r.transpose() * x[e.nodes[a]] - mesh.vertices[e.nodes[a]];
    const Eigen::Matrix<double, 12, 1> fe = e.ke * u;
    for (int a = 0; a < 4; ++a) f[e.nodes[a]] -= r * fe.segment<3>(3 * a);
  }
  return inverted_count;
}

double corotational_energy(const TetMesh& mesh, const std::vector<MaterialParams>& materials,
                           const std::vector<Vec3>& x_ref, const std::vector<Vec3>& x) {
  const auto elems = build_elements(mesh, materials);
  double energy = 0.0;
  for (const auto& e : elems) {
    const Mat3 ds_ref =
        edge_matrix(x_ref[e.nodes[0]], x_ref[e.nodes[1]], x_ref[e.nodes[2]], x_ref[e.nodes[3]]);
    const Mat3 r = polar_rotation(ds_ref * e.dm_inv);
    Eigen::Matrix<double, 12, 1> u;
    for (int a = 0; a < 4; ++a)
      u.segment<3>(3 * a) = r.transpose() * x[e.nodes[a]] - mesh.vertices[e.nodes[a]];
    energy += 0.5 * u.dot(e.ke * u);
  }
  return energy;
}

}  // namespace defgrasp::fem
