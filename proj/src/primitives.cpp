// Structured-grid tet mesh generators for the bundled primitives. All kinds
// start from an nx*ny*nz cell grid; each hex cell is split into 6 tets sharing
// the cell's main diagonal (Kuhn split), which keeps faces between neighboring
// cells matching and the boundary watertight. Curved kinds (cylinder, sphere)
// push grid nodes through a square-to-disk / cube-to-ball map; the wedge
// tapers to an apex line and welds the collapsed nodes.
#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <stdexcept>

#include "defgrasp/geometry.hpp"

namespace defgrasp::geometry {

namespace {

using NodeFn = std::function<Vec3(int, int, int)>;
using CellFn = std::function<bool(int, int)>;

struct GridMesher {
  int nx, ny, nz;
  std::vector<Vec3> nodes;
  std::vector<std::array<int, 4>> tets;

  GridMesher(int nx_, int ny_, int nz_) : nx(nx_), ny(ny_), nz(nz_) {
    nodes.resize(static_cast<size_t>(nx + 1) * (ny + 1) * (nz + 1));
  }

  int node_id(int i, int j, int k) const { return (k * (ny + 1) + j) * (nx + 1) + i; }

  void add_cell(int i, int j, int k) {
    const int v0 = node_id(i, j, k);
    const int v1 = node_id(i + 1, j, k);
    const int v2 = node_id(i + 1, j + 1, k);
    const int v3 = node_id(i, j + 1, k);
    const int v4 = node_id(i, j, k + 1);
    const int v5 = node_id(i + 1, j, k + 1);
    const int v6 = node_id(i + 1, j + 1, k + 1);
    const int v7 = node_id(i, j + 1, k + 1);
    // six tets around the v0-v6 diagonal
    const std::array<std::array<int, 4>, 6> split = {{{v0, v1, v2, v6},
                                                      {v0, v2, v3, v6},
                                                      {v0, v3, v7, v6},
                                                      {v0, v7, v4, v6},
                                                      {v0, v4, v5, v6},
                                                      {v0, v5, v1, v6}}};
    for (const auto& t : split) tets.push_back(t);
  }

  // Weld coincident nodes (apex collapse), drop degenerate tets, fix
  // orientation, compact to referenced vertices.
  TetMesh finish() {
    const auto quantize = [](double v) { return static_cast<long long>(std::llround(v * 1e9)); };
    std::map<std::array<long long, 3>, int> canon;
    std::vector<int> weld(nodes.size());
    std::vector<Vec3> welded;
    for (size_t n = 0; n < nodes.size(); ++n) {
      const std::array<long long, 3> key = {quantize(nodes[n].x()), quantize(nodes[n].y()),
                                            quantize(nodes[n].z())};
      auto [it, inserted] = canon.try_emplace(key, static_cast<int>(welded.size()));
      if (inserted) welded.push_back(nodes[n]);
      weld[n] = it->second;
    }

    TetMesh mesh;
    mesh.vertices = std::move(welded);
    for (const auto& t : tets) {
      std::array<int, 4> w = {weld[t[0]], weld[t[1]], weld[t[2]], weld[t[3]]};
      if (w[0] == w[1] || w[0] == w[2] || w[0] == w[3] || w[1] == w[2] || w[1] == w[3] ||
          w[2] == w[3])
        continue;
      const double vol = signed_tet_volume(mesh.vertices[w[0]], mesh.vertices[w[1]],
                                           mesh.vertices[w[2]], mesh.vertices[w[3]]);
      if (std::abs(vol) < 1e-12) continue;
      if (vol < 0.0) std::swap(w[2], w[3]);
      mesh.tets.push_back(w);
    }

    std::vector<int> remap(mesh.vertices.size(), -1);
    std::vector<Vec3> kept;
    for (auto& t : mesh.tets)
      for (int& idx : t) {
        if (remap[idx] < 0) {
          remap[idx] = static_cast<int>(kept.size());
          kept.push_back(mesh.vertices[idx]);
        }
        idx = remap[idx];
      }
    mesh.vertices = std::move(kept);
    mesh.tet_material.assign(mesh.tets.size(), 0);
    mesh.validate();
    return mesh;
  }
};

TetMesh mesh_grid(int nx, int ny, int nz, const NodeFn& node, const CellFn& cell_in_footprint) {
  GridMesher g(nx, ny, nz);
  for (int k = 0; k <= nz; ++k)
    for (int j = 0; j <= ny; ++j)
      for (int i = 0; i <= nx; ++i) g.nodes[g.node_id(i, j, k)] = node(i, j, k);
  for (int k = 0; k < nz; ++k)
    for (int j = 0; j < ny; ++j)
      for (int i = 0; i < nx; ++i)
        if (cell_in_footprint(i, j)) g.add_cell(i, j, k);
  return g.finish();
}

const CellFn kAllCells = [](int, int) { return true; };

// Evenly spaced coordinates per segment, with segment breaks landing exactly
// on grid lines (used for the bar footprints).
std::vector<double> segmented_axis(const std::vector<double>& breaks,
                                   const std::vector<int>& cells) {
  std::vector<double> coords{breaks.front()};
  for (size_t s = 0; s + 1 < breaks.size(); ++s)
    for (int c = 1; c <= cells[s]; ++c)
      coords.push_back(breaks[s] + (breaks[s + 1] - breaks[s]) * c / cells[s]);
  return coords;
}

// square [-1,1]^2 -> unit disk; concentric squares map to concentric circles
Eigen::Vector2d square_to_disk(double u, double v) {
  const double m = std::max(std::abs(u), std::abs(v));
  if (m < 1e-15) return {0.0, 0.0};
  return Eigen::Vector2d(u, v) * (m / std::hypot(u, v));
}

// cube [-1,1]^3 -> unit ball, same construction
Vec3 cube_to_ball(double u, double v, double w) {
  const double m = std::max({std::abs(u), std::abs(v), std::abs(w)});
  if (m < 1e-15) return Vec3::Zero();
  return Vec3(u, v, w) * (m / std::sqrt(u * u + v * v + w * w));
}

// keep cells roughly cubic when side lengths differ
int scaled_res(int res, double dim, double ref_dim) {
  return std::max(1, static_cast<int>(std::lround(res * dim / ref_dim)));
}

}  // namespace

void PrimitiveSpec::validate() const {
  const size_t want = [&]() -> size_t {
    switch (kind) {
      case PrimitiveKind::Box: return 3;
      case PrimitiveKind::Cylinder: return 2;
      case PrimitiveKind::Sphere: return 1;
      case PrimitiveKind::Wedge: return 3;
      case PrimitiveKind::Lbar: return 4;
      case PrimitiveKind::Tbar: return 4;
    }
    return 0;
  }();
  if (dims.size() != want)
    throw std::invalid_argument("primitive " + to_string(kind) + ": expected " +
                                std::to_string(want) + " dimensions, got " +
                                std::to_string(dims.size()));
  for (double d : dims)
    if (!(d > 0.0)) throw std::invalid_argument("primitive dimensions must be positive");
  if (resolution < 1) throw std::invalid_argument("primitive resolution must be >= 1");
  if ((kind == PrimitiveKind::Lbar || kind == PrimitiveKind::Tbar) &&
      (dims[2] >= dims[0] || dims[2] >= dims[1]))
    throw std::invalid_argument("bar arm width must be smaller than the footprint");
}

PrimitiveKind primitive_kind_from_string(const std::string& s) {
  if (s == "box") return PrimitiveKind::Box;
  if (s == "cylinder") return PrimitiveKind::Cylinder;
  if (s == "sphere") return PrimitiveKind::Sphere;
  if (s == "wedge") return PrimitiveKind::Wedge;
  if (s == "lbar") return PrimitiveKind::Lbar;
  if (s == "tbar") return PrimitiveKind::Tbar;
  throw std::invalid_argument("unknown primitive kind: " + s);
}

std::string to_string(PrimitiveKind k) {
  switch (k) {
    case PrimitiveKind::Box: return "box";
    case PrimitiveKind::Cylinder: return "cylinder";
    case PrimitiveKind::Sphere: return "sphere";
    case PrimitiveKind::Wedge: return "wedge";
    case PrimitiveKind::Lbar: return "lbar";
    case PrimitiveKind::Tbar: return "tbar";
  }
  throw std::logic_error("bad primitive kind");
}

TetMesh make_primitive(const PrimitiveSpec& spec) {
  spec.validate();
  const int res = spec.resolution;

  switch (spec.kind) {
    case PrimitiveKind::Box: {
      const double lx = spec.dims[0], ly = spec.dims[1], lz = spec.dims[2];
      const int ny = scaled_res(res, ly, lx), nz = scaled_res(res, lz, lx);
      return mesh_grid(res, ny, nz,
                       [&](int i, int j, int k) {
                         return Vec3((double(i) / res - 0.5) * lx, (double(j) / ny - 0.5) * ly,
                                     double(k) / nz * lz);
                       },
                       kAllCells);
    }
    case PrimitiveKind::Wedge: {
      // triangular prism: rectangular base, apex edge along y at the top; the
      // width tapers linearly so both slant faces are exact planes
      const double base = spec.dims[0], len = spec.dims[1], h = spec.dims[2];
      const int ny = scaled_res(res, len, base);
      return mesh_grid(res, ny, res,
                       [&](int i, int j, int k) {
                         const double taper = 1.0 - double(k) / res;
                         return Vec3((double(i) / res - 0.5) * base * taper,
                                     (double(j) / ny - 0.5) * len, double(k) / res * h);
                       },
                       kAllCells);
    }
    case PrimitiveKind::Cylinder: {
      const double r = spec.dims[0], h = spec.dims[1];
      const int nz = scaled_res(res, h, 2.0 * r);
      return mesh_grid(res, res, nz,
                       [&](int i, int j, int k) {
                         const Eigen::Vector2d d =
                             square_to_disk(2.0 * i / res - 1.0, 2.0 * j / res - 1.0) * r;
                         return Vec3(d.x(), d.y(), double(k) / nz * h);
                       },
                       kAllCells);
    }
    case PrimitiveKind::Sphere: {
      const double r = spec.dims[0];
      return mesh_grid(res, res, res,
                       [&](int i, int j, int k) {
                         const Vec3 p = cube_to_ball(2.0 * i / res - 1.0, 2.0 * j / res - 1.0,
                                                     2.0 * k / res - 1.0) *
                                        r;
                         return Vec3(p.x(), p.y(), p.z() + r);  // rest on the ground
                       },
                       kAllCells);
    }
    case PrimitiveKind::Lbar:
    case PrimitiveKind::Tbar: {
      // footprint = full-width bar along +y plus a stem; segment the axes so
      // the stem boundary lies exactly on grid lines
      const double lx = spec.dims[0], ly = spec.dims[1], arm = spec.dims[2], h = spec.dims[3];
      const bool is_l = spec.kind == PrimitiveKind::Lbar;
      const int na_x = scaled_res(res, arm, lx);

      std::vector<double> xs;
      int stem_lo = 0, stem_hi = 0;  // cell index range of the stem in x
      if (is_l) {
        // stem flush with the -x side
        const int nb = scaled_res(res, lx - arm, lx);
        xs = segmented_axis({-lx / 2, -lx / 2 + arm, lx / 2}, {na_x, nb});
        stem_lo = 0;
        stem_hi = na_x;
      } else {
        // stem centered
        const int side = scaled_res(res, (lx - arm) / 2, lx);
        xs = segmented_axis({-lx / 2, -arm / 2, arm / 2, lx / 2}, {side, na_x, side});
        stem_lo = side;
        stem_hi = side + na_x;
      }
      const int na_y = scaled_res(res, arm, lx);
      const int nstem_y = scaled_res(res, ly - arm, lx);
      const std::vector<double> ys =
          segmented_axis({-ly / 2, ly / 2 - arm, ly / 2}, {nstem_y, na_y});

      const int nx = static_cast<int>(xs.size()) - 1;
      const int ny = static_cast<int>(ys.size()) - 1;
      const int nz = scaled_res(res, h, lx);
      return mesh_grid(nx, ny, nz,
                       [&](int i, int j, int k) {
                         return Vec3(xs[i], ys[j], double(k) / nz * h);
                       },
                       [&](int i, int j) {
                         if (j >= nstem_y) return true;  // the bar
                         return i >= stem_lo && i < stem_hi;
                       });
    }
  }
  throw std::logic_error("bad primitive kind");
}

}  // namespace defgrasp::geometry
