#include "defgrasp/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace defgrasp::geometry {

double signed_tet_volume(const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& d) {
  return (b - a).cross(c - a).dot(d - a) / 6.0;
}

double SurfaceMesh::triangle_area(int tri) const {
  const auto& t = triangles[tri];
  return 0.5 * (vertices[t[1]] - vertices[t[0]]).cross(vertices[t[2]] - vertices[t[0]]).norm();
}

double SurfaceMesh::total_area() const {
  double a = 0.0;
  for (int i = 0; i < static_cast<int>(triangles.size()); ++i) a += triangle_area(i);
  return a;
}

Eigen::AlignedBox3d SurfaceMesh::bounds() const {
  Eigen::AlignedBox3d box;
  for (const auto& v : vertices) box.extend(v);
  return box;
}

double TetMesh::tet_volume(int t) const {
  const auto& e = tets[t];
  return signed_tet_volume(vertices[e[0]], vertices[e[1]], vertices[e[2]], vertices[e[3]]);
}

double TetMesh::total_volume() const {
  double v = 0.0;
  for (int t = 0; t < static_cast<int>(tets.size()); ++t) v += tet_volume(t);
  return v;
}

Eigen::AlignedBox3d TetMesh::bounds() const {
  Eigen::AlignedBox3d box;
  for (const auto& v : vertices) box.extend(v);
  return box;
}

void TetMesh::validate() const {
  const int nv = static_cast<int>(vertices.size());
  std::vector<char> used(nv, 0);
  for (int t = 0; t < static_cast<int>(tets.size()); ++t) {
    for (int k = 0; k < 4; ++k) {
      const int idx = tets[t][k];
      if (idx < 0 || idx >= nv)
        throw std::runtime_error("tet mesh: vertex index " + std::to_string(idx) +
                                 " out of range (" + std::to_string(nv) + " vertices)");
      used[idx] = 1;
    }
    const double vol = tet_volume(t);
    if (vol < 1e-12)
      throw std::runtime_error("tet mesh: tet " + std::to_string(t) +
                               " has non-positive or degenerate volume " + std::to_string(vol));
  }
  for (int i = 0; i < nv; ++i)
    if (!used[i])
      throw std::runtime_error("tet mesh: vertex " + std::to_string(i) +
                               " not referenced by any tet");
  if (tet_material.size() != tets.size())
    throw std::runtime_error("tet mesh: material id count mismatch");
}

TetMesh load_tet_mesh(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open tet file: " + path);

  std::string magic;
  int version = 0;
  if (!(in >> magic >> version) || magic != "tet" || version != 1)
    throw std::runtime_error("tet file " + path + ": expected header 'tet 1'");

  size_t nv = 0, nt = 0;
  if (!(in >> nv >> nt)) throw std::runtime_error("tet file " + path + ": bad count line");

  TetMesh mesh;
  mesh.vertices.resize(nv);
  for (size_t i = 0; i < nv; ++i) {
    if (!(in >> mesh.vertices[i].x() >> mesh.vertices[i].y() >> mesh.vertices[i].z()))
      throw std::runtime_error("tet file " + path + ": bad vertex line " + std::to_string(i));
  }
  mesh.tets.resize(nt);
  for (size_t i = 0; i < nt; ++i) {
    auto& t = mesh.tets[i];
    if (!(in >> t[0] >> t[1] >> t[2] >> t[3]))
      throw std::runtime_error("tet file " + path + ": bad tet line " + std::to_string(i));
  }
  mesh.tet_material.assign(nt, 0);

  // fix orientation before validating so only true degeneracies fail
  for (size_t i = 0; i < nt; ++i) {
    if (mesh.tet_volume(static_cast<int>(i)) < 0.0) std::swap(mesh.tets[i][2], mesh.tets[i][3]);
  }
  mesh.validate();
  return mesh;
}

void save_tet_mesh(const TetMesh& mesh, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write tet file: " + path);
  out << "tet 1\n" << mesh.vertices.size() << " " << mesh.tets.size() << "\n";
  char buf[128];
  for (const auto& v : mesh.vertices) {
    std::snprintf(buf, sizeof(buf), "%.9g %.9g %.9g\n", v.x(), v.y(), v.z());
    out << buf;
  }
  for (const auto& t : mesh.tets) out << t[0] << " " << t[1] << " " << t[2] << " " << t[3] << "\n";
}

SurfaceMesh load_obj_surface(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open obj file: " + path);
  SurfaceMesh mesh;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag)) continue;
    if (tag == "v") {
      Vec3 v;
      if (!(ls >> v.x() >> v.y() >> v.z()))
        throw std::runtime_error("obj file " + path + ": bad vertex line");
      mesh.vertices.push_back(v);
    } else if (tag == "f") {
      std::array<int, 3> f;
      std::string tok;
      for (int k = 0; k < 3; ++k) {
        if (!(ls >> tok)) throw std::runtime_error("obj file " + path + ": bad face line");
        f[k] = std::stoi(tok.substr(0, tok.find('/'))) - 1;  // "a/b/c" refs allowed
      }
      std::string extra;
      if (ls >> extra) throw std::runtime_error("obj file " + path + ": only triangles supported");
      mesh.triangles.push_back(f);
    }
  }
  const int nv = static_cast<int>(mesh.vertices.size());
  for (const auto& t : mesh.triangles)
    for (int idx : t)
      if (idx < 0 || idx >= nv) throw std::runtime_error("obj file " + path + ": index out of range");
  mesh.normals.resize(mesh.triangles.size());
  for (size_t i = 0; i < mesh.triangles.size(); ++i) {
    const auto& t = mesh.triangles[i];
    Vec3 n = (mesh.vertices[t[1]] - mesh.vertices[t[0]])
                 .cross(mesh.vertices[t[2]] - mesh.vertices[t[0]]);
    const double len = n.norm();
    if (len < 1e-18) throw std::runtime_error("obj file " + path + ": degenerate triangle");
    mesh.normals[i] = n / len;
  }
  mesh.tri_material.assign(mesh.triangles.size(), 0);
  return mesh;
}

SurfaceMesh extract_surface(const TetMesh& mesh, std::vector<int>* node_of_vertex) {
  // faces of each tet, ordered so the normal points away from the 4th vertex
  static const int kFace[4][3] = {{1, 2, 3}, {0, 3, 2}, {0, 1, 3}, {0, 2, 1}};

  struct FaceRef {
    std::array<int, 3> verts;  // oriented
    int tet;
  };
  std::map<std::array<int, 3>, std::vector<FaceRef>> by_key;
  for (int t = 0; t < static_cast<int>(mesh.tets.size()); ++t) {
    for (const auto& f : kFace) {
      FaceRef ref{{mesh.tets[t][f[0]], mesh.tets[t][f[1]], mesh.tets[t][f[2]]}, t};
      std::array<int, 3> key = ref.verts;
      std::sort(key.begin(), key.end());
      by_key[key].push_back(ref);
    }
  }

  SurfaceMesh surf;
  surf.vertices = mesh.vertices;
  for (const auto& [key, refs] : by_key) {
    if (refs.size() != 1) continue;
    const FaceRef& ref = refs.front();
    const auto& tv = mesh.tets[ref.tet];
    const Vec3 tet_centroid =
        (mesh.vertices[tv[0]] + mesh.vertices[tv[1]] + mesh.vertices[tv[2]] + mesh.vertices[tv[3]]) /
        4.0;
    std::array<int, 3> tri = ref.verts;
    const Vec3 a = mesh.vertices[tri[0]], b = mesh.vertices[tri[1]], c = mesh.vertices[tri[2]];
    Vec3 n = (b - a).cross(c - a);
    const Vec3 face_centroid = (a + b + c) / 3.0;
    if (n.dot(face_centroid - tet_centroid) < 0.0) {
      std::swap(tri[1], tri[2]);
      n = -n;
    }
    surf.triangles.push_back(tri);
    surf.normals.push_back(n.normalized());
    surf.tri_material.push_back(mesh.tet_material[ref.tet]);
  }

  // drop unreferenced interior vertices, keeping stable order
  std::vector<int> remap(surf.vertices.size(), -1);
  std::vector<Vec3> kept;
  std::vector<int> source;
  for (auto& t : surf.triangles) {
    for (int& idx : t) {
      if (remap[idx] < 0) {
        remap[idx] = static_cast<int>(kept.size());
        kept.push_back(surf.vertices[idx]);
        source.push_back(idx);
      }
      idx = remap[idx];
    }
  }
  surf.vertices = std::move(kept);
  if (node_of_vertex) *node_of_vertex = std::move(source);
  return surf;
}

std::optional<double> ray_triangle(const Vec3& origin, const Vec3& dir, const Vec3& a,
                                   const Vec3& b, const Vec3& c, double* u_out, double* v_out) {
  constexpr double kEps = 1e-12;
  const Vec3 e1 = b - a, e2 = c - a;
  const Vec3 p = dir.cross(e2);
  const double det = e1.dot(p);
  if (std::abs(det) < 1e-16) return std::nullopt;
  const double inv_det = 1.0 / det;
  const Vec3 s = origin - a;
  const double u = s.dot(p) * inv_det;
  if (u < -kEps || u > 1.0 + kEps) return std::nullopt;
  const Vec3 q = s.cross(e1);
  const double v = dir.dot(q) * inv_det;
  if (v < -kEps || u + v > 1.0 + kEps) return std::nullopt;
  const double t = e2.dot(q) * inv_det;
  if (u_out) *u_out = u;
  if (v_out) *v_out = v;
  return t;
}

Bvh::Bvh(const SurfaceMesh& mesh) : mesh_(&mesh) {
  order_.resize(mesh.triangles.size());
  for (size_t i = 0; i < order_.size(); ++i) order_[i] = static_cast<int>(i);
  if (!order_.empty()) {
    nodes_.reserve(2 * order_.size());
    build(order_, 0, static_cast<int>(order_.size()));
  }
}

int Bvh::build(std::vector<int>& tris, int first, int count) {
  const int node_id = static_cast<int>(nodes_.size());
  nodes_.emplace_back();

  Eigen::AlignedBox3d box;
  for (int i = first; i < first + count; ++i) {
    const auto& t = mesh_->triangles[tris[i]];
    for (int k = 0; k < 3; ++k) box.extend(mesh_->vertices[t[k]]);
  }
  nodes_[node_id].box = box;

  if (count <= 4) {
    // keep leaf ranges sorted by id for reproducible traversal
    std::sort(tris.begin() + first, tris.begin() + first + count);
    nodes_[node_id].first = first;
    nodes_[node_id].count = count;
    return node_id;
  }

  const Vec3 extent = box.sizes();
  int axis = 0;
  if (extent.y() > extent.x()) axis = 1;
  if (extent.z() > extent[axis]) axis = 2;

  const int mid = first + count / 2;
  std::nth_element(tris.begin() + first, tris.begin() + mid, tris.begin() + first + count,
                   [&](int lhs, int rhs) {
                     const auto centroid = [&](int tri) {
                       const auto& t = mesh_->triangles[tri];
                       return (mesh_->vertices[t[0]][axis] + mesh_->vertices[t[1]][axis] +
                               mesh_->vertices[t[2]][axis]);
                     };
                     const double cl = centroid(lhs), cr = centroid(rhs);
                     return cl < cr || (cl == cr && lhs < rhs);
                   });

  const int left = build(tris, first, mid - first);
  const int right = build(tris, mid, first + count - mid);
  nodes_[node_id].left = left;
  nodes_[node_id].right = right;
  return node_id;
}

namespace {

bool ray_box(const Vec3& origin, const Vec3& dir, const Vec3& inv_dir,
             const Eigen::AlignedBox3d& box, double t_max) {
  double t0 = 0.0, t1 = t_max;
  for (int k = 0; k < 3; ++k) {
    if (std::abs(dir[k]) < 1e-15) {
      // parallel to the slab; 0 * inf would give NaN, so test containment
      if (origin[k] < box.min()[k] || origin[k] > box.max()[k]) return false;
      continue;
    }
    const double a = (box.min()[k] - origin[k]) * inv_dir[k];
    const double b = (box.max()[k] - origin[k]) * inv_dir[k];
    t0 = std::max(t0, std::min(a, b));
    t1 = std::min(t1, std::max(a, b));
  }
  return t0 <= t1;
}

}  // namespace

std::optional<Hit> Bvh::raycast(const Vec3& origin, const Vec3& direction, double min_t) const {
  if (nodes_.empty()) return std::nullopt;
  const double dir_norm = direction.norm();
  if (dir_norm < 1e-18) throw std::invalid_argument("raycast: zero direction");
  const Vec3 dir = direction / dir_norm;
  const Vec3 inv_dir(1.0 / dir.x(), 1.0 / dir.y(), 1.0 / dir.z());

  Hit best;
  best.distance = std::numeric_limits<double>::infinity();
  constexpr double kTieTol = 1e-12;

  int stack[64];
  int sp = 0;
  stack[sp++] = 0;
  while (sp > 0) {
    const Node& node = nodes_[stack[--sp]];
    const double limit =
        best.triangle >= 0 ? best.distance + kTieTol : std::numeric_limits<double>::infinity();
    if (!ray_box(origin, dir, inv_dir, node.box, limit)) continue;
    if (node.leaf()) {
      for (int i = node.first; i < node.first + node.count; ++i) {
        const int tri = order_[i];
        const auto& t = mesh_->triangles[tri];
        double u = 0.0, v = 0.0;
        const auto hit_t = ray_triangle(origin, dir, mesh_->vertices[t[0]], mesh_->vertices[t[1]],
                                        mesh_->vertices[t[2]], &u, &v);
        if (!hit_t || *hit_t < min_t) continue;
        const bool closer = best.triangle < 0 || *hit_t < best.distance - kTieTol;
        const bool tie = best.triangle >= 0 && std::abs(*hit_t - best.distance) <= kTieTol &&
                         tri < best.triangle;
        if (closer || tie) {
          if (closer) best.distance = *hit_t;
          best.triangle = tri;
          best.bary_u = u;
          best.bary_v = v;
        }
      }
    } else {
      stack[sp++] = node.left;
      stack[sp++] = node.right;
    }
  }

  if (best.triangle < 0) return std::nullopt;
  best.point = origin + dir * best.distance;
  best.normal = mesh_->normals[best.triangle];
  return best;
}

void Bvh::query_box(const Eigen::AlignedBox3d& box, std::vector<int>& out) const {
  out.clear();
  if (nodes_.empty()) return;
  int stack[64];
  int sp = 0;
  stack[sp++] = 0;
  while (sp > 0) {
    const Node& node = nodes_[stack[--sp]];
    if (!node.box.intersects(box)) continue;
    if (node.leaf()) {
      for (int i = node.first; i < node.first + node.count; ++i) {
        const int tri = order_[i];
        Eigen::AlignedBox3d tri_box;
        for (int c = 0; c < 3; ++c) tri_box.extend(mesh_->vertices[mesh_->triangles[tri][c]]);
        if (tri_box.intersects(box)) out.push_back(tri);
      }
    } else {
      stack[sp++] = node.left;
      stack[sp++] = node.right;
    }
  }
  std::sort(out.begin(), out.end());
}

bool triangle_intersects_obb(const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& center,
                             const Eigen::Matrix3d& axes, const Vec3& half) {
  // move triangle into box frame, then run the 13-axis SAT
  const Eigen::Matrix3d rt = axes.transpose();
  const Vec3 v0 = rt * (a - center);
  const Vec3 v1 = rt * (b - center);
  const Vec3 v2 = rt * (c - center);

  const auto axis_test = [&](const Vec3& axis) {
    if (axis.squaredNorm() < 1e-24) return true;  // degenerate axis, skip
    const double p0 = v0.dot(axis), p1 = v1.dot(axis), p2 = v2.dot(axis);
    const double r = half.x() * std::abs(axis.x()) + half.y() * std::abs(axis.y()) +
                     half.z() * std::abs(axis.z());
    const double lo = std::min({p0, p1, p2}), hi = std::max({p0, p1, p2});
    return !(lo > r || hi < -r);
  };

  // box face normals
  for (int k = 0; k < 3; ++k) {
    Vec3 axis = Vec3::Zero();
    axis[k] = 1.0;
    if (!axis_test(axis)) return false;
  }
  // triangle normal
  const Vec3 e0 = v1 - v0, e1 = v2 - v1, e2 = v0 - v2;
  if (!axis_test(e0.cross(e1))) return false;
  // cross products of edges with box axes
  const Vec3 edges[3] = {e0, e1, e2};
  for (const Vec3& e : edges) {
    for (int k = 0; k < 3; ++k) {
      Vec3 axis = Vec3::Zero();
      axis[k] = 1.0;
      if (!axis_test(e.cross(axis))) return false;
    }
  }
  return true;
}

}  // namespace defgrasp::geometry
