// Mesh data structures, primitive tet-mesh generators, surface extraction and
// BVH-accelerated ray casting. All geometry is in SI meters, right-handed,
// z up. Meshes are immutable after construction and safe to share across
// threads.
#pragma once

#include <Eigen/Dense>
#include <array>
#include <optional>
#include <string>
#include <vector>

namespace defgrasp::geometry {

using Vec3 = Eigen::Vector3d;

struct SurfaceMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> triangles;
  std::vector<Vec3> normals;        // per-triangle outward unit normals
  std::vector<int> tri_material;    // per-triangle material id (from source tet)

  Vec3 triangle_vertex(int tri, int corner) const { return vertices[triangles[tri][corner]]; }
  double triangle_area(int tri) const;
  double total_area() const;
  Eigen::AlignedBox3d bounds() const;
};

struct TetMesh {
  std::vector<Vec3> vertices;                 // rest positions
  std::vector<std::array<int, 4>> tets;
  std::vector<int> tet_material;              // per-tet material id

  double tet_volume(int t) const;
  double total_volume() const;
  Eigen::AlignedBox3d bounds() const;
  void validate() const;  // throws on bad indices / non-positive volumes
};

// signed volume of tet (a,b,c,d); positive for right-handed orientation
double signed_tet_volume(const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& d);

enum class PrimitiveKind { Box, Cylinder, Sphere, Wedge, Lbar, Tbar };

struct PrimitiveSpec {
  PrimitiveKind kind = PrimitiveKind::Box;
  // box:      [lx, ly, lz]
  // cylinder: [radius, height]
  // sphere:   [radius]
  // wedge:    [base_x, length_y, height]          (apex wedge, top collapses to a line)
  // lbar:     [lx, ly, arm_width, height]
  // tbar:     [lx, ly, arm_width, height]
  std::vector<double> dims;
  int resolution = 3;  // grid subdivisions per axis, >= 1

  void validate() const;
};

PrimitiveKind primitive_kind_from_string(const std::string& s);
std::string to_string(PrimitiveKind k);

// Generates a watertight tet mesh resting on the ground plane: z in [0, h],
// x/y centered on the origin. Box-like kinds split each grid cell into 6
// tets with grid-consistent diagonals.
TetMesh make_primitive(const PrimitiveSpec& spec);

// `.tet` ASCII: line 1 "tet 1"; line 2 "<nv> <nt>"; nv lines "x y z";
// nt lines "i j k l" (0-based). Tets with negative volume are reoriented.
TetMesh load_tet_mesh(const std::string& path);
void save_tet_mesh(const TetMesh& mesh, const std::string& path);

// OBJ subset: "v x y z" and "f a b c" (1-based, triangles only).
SurfaceMesh load_obj_surface(const std::string& path);

// Boundary faces (appearing in exactly one tet), oriented outward. If
// node_of_vertex is given, it receives the source tet-mesh node index of each
// surface vertex (surface vertices are compacted).
SurfaceMesh extract_surface(const TetMesh& mesh, std::vector<int>* node_of_vertex = nullptr);

struct Hit {
  double distance = 0.0;
  int triangle = -1;
  double bary_u = 0.0, bary_v = 0.0;  // barycentric coords of corners 1 and 2
  Vec3 point = Vec3::Zero();
  Vec3 normal = Vec3::Zero();
};

class Bvh {
 public:
  explicit Bvh(const SurfaceMesh& mesh);

  // Nearest intersection with distance >= min_t; ties broken by lowest
  // triangle id so results do not depend on traversal order.
  std::optional<Hit> raycast(const Vec3& origin, const Vec3& direction,
                             double min_t = 1e-9) const;

  // Triangle ids whose AABB overlaps the query box (exact test is up to the
  // caller).
  void query_box(const Eigen::AlignedBox3d& box, std::vector<int>& out) const;

  const SurfaceMesh& mesh() const { return *mesh_; }

 private:
  struct Node {
    Eigen::AlignedBox3d box;
    int left = -1, right = -1;   // internal children
    int first = 0, count = 0;    // leaf triangle range
    bool leaf() const { return count > 0; }
  };

  int build(std::vector<int>& tris, int first, int count);

  const SurfaceMesh* mesh_;
  std::vector<Node> nodes_;
  std::vector<int> order_;  // triangle ids, leaf ranges index into this
};

// Möller–Trumbore with inclusive edge bounds so rays through shared edges are
// seen by both adjacent triangles (the tie-break then picks one).
std::optional<double> ray_triangle(const Vec3& origin, const Vec3& dir, const Vec3& a,
                                   const Vec3& b, const Vec3& c, double* u = nullptr,
                                   double* v = nullptr);

// Exact triangle vs oriented-box overlap (separating axis test). The box is
// given by center, rotation (columns = box axes) and half extents.
bool triangle_intersects_obb(const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& center,
                             const Eigen::Matrix3d& axes, const Vec3& half);

}  // namespace defgrasp::geometry
