#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "defgrasp/geometry.hpp"
#include "defgrasp/rng.hpp"
#include "doctest.h"

using namespace defgrasp;
using namespace defgrasp::geometry;

namespace {

std::string write_temp(const std::string& name, const std::string& content) {
  const auto path = std::filesystem::temp_directory_path() / name;
  std::ofstream out(path);
  out << content;
  return path.string();
}

// every edge shared by exactly two triangles
bool watertight(const SurfaceMesh& surf) {
  std::map<std::pair<int, int>, int> edges;
  for (const auto& t : surf.triangles)
    for (int e = 0; e < 3; ++e) {
      int a = t[e], b = t[(e + 1) % 3];
      if (a > b) std::swap(a, b);
      ++edges[{a, b}];
    }
  for (const auto& [edge, count] : edges)
    if (count != 2) return false;
  return !surf.triangles.empty();
}

std::vector<PrimitiveSpec> bundled_primitives() {
  return {
      {PrimitiveKind::Box, {0.08, 0.06, 0.05}, 3},
      {PrimitiveKind::Cylinder, {0.03, 0.08}, 4},
      {PrimitiveKind::Sphere, {0.035}, 4},
      {PrimitiveKind::Wedge, {0.06, 0.09, 0.05}, 3},
      {PrimitiveKind::Lbar, {0.08, 0.08, 0.03, 0.035}, 4},
      {PrimitiveKind::Tbar, {0.09, 0.08, 0.03, 0.035}, 4},
  };
}

std::optional<Hit> brute_raycast(const SurfaceMesh& surf, const Vec3& o, const Vec3& d,
                                 double min_t = 1e-9) {
  std::optional<Hit> best;
  for (size_t t = 0; t < surf.triangles.size(); ++t) {
    const auto hit = ray_triangle(o, d, surf.triangle_vertex(t, 0), surf.triangle_vertex(t, 1),
                                  surf.triangle_vertex(t, 2));
    if (!hit || *hit < min_t) continue;
    if (!best || *hit < best->distance - 1e-12 ||
        (std::abs(*hit - best->distance) <= 1e-12 && static_cast<int>(t) < best->triangle)) {
      best = Hit{};
      best->distance = *hit;
      best->triangle = static_cast<int>(t);
    }
  }
  return best;
}

}  // namespace

TEST_CASE("tet file loading") {
  SUBCASE("single tet has volume 1/6") {
    const auto path = write_temp("single.tet",
                                 "tet 1\n4 1\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n0 1 2 3\n");
    const TetMesh mesh = load_tet_mesh(path);
    CHECK(mesh.tets.size() == 1);
    CHECK(mesh.total_volume() == doctest::Approx(1.0 / 6.0).epsilon(1e-12));
  }
  SUBCASE("negative orientation is repaired") {
    const auto path = write_temp("flipped.tet",
                                 "tet 1\n4 1\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n0 2 1 3\n");
    const TetMesh mesh = load_tet_mesh(path);
    CHECK(mesh.tet_volume(0) == doctest::Approx(1.0 / 6.0).epsilon(1e-12));
  }
  SUBCASE("out-of-range index is rejected") {
    const auto path = write_temp("bad.tet",
                                 "tet 1\n4 1\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n0 1 2 9\n");
    CHECK_THROWS(load_tet_mesh(path));
  }
  SUBCASE("malformed header is rejected") {
    const auto path = write_temp("junk.tet", "hello\n");
    CHECK_THROWS(load_tet_mesh(path));
  }
  SUBCASE("save/load round trip") {
    const TetMesh mesh = make_primitive({PrimitiveKind::Box, {0.1, 0.1, 0.1}, 2});
    const auto path = write_temp("roundtrip.tet", "");
    save_tet_mesh(mesh, path);
    const TetMesh back = load_tet_mesh(path);
    REQUIRE(back.vertices.size() == mesh.vertices.size());
    REQUIRE(back.tets == mesh.tets);
    for (size_t v = 0; v < mesh.vertices.size(); ++v)
      CHECK((back.vertices[v] - mesh.vertices[v]).norm() < 1e-12);
  }
}

TEST_CASE("obj subset loading") {
  const auto path = write_temp("tri.obj",
                               "# comment\nv 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n");
  const SurfaceMesh surf = load_obj_surface(path);
  REQUIRE(surf.triangles.size() == 1);
  CHECK(surf.triangle_area(0) == doctest::Approx(0.5));
  CHECK((surf.normals[0] - Vec3(0, 0, 1)).norm() < 1e-12);
  CHECK_THROWS(load_obj_surface(write_temp("quad.obj", "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")));
}

TEST_CASE("primitive volumes") {
  SUBCASE("box tetrahedralizes exactly") {
    const TetMesh mesh = make_primitive({PrimitiveKind::Box, {0.1, 0.1, 0.1}, 2});
    CHECK(std::abs(mesh.total_volume() - 1e-3) < 1e-9);
  }
  SUBCASE("wedge is an exact triangular prism") {
    const TetMesh mesh = make_primitive({PrimitiveKind::Wedge, {0.1, 0.1, 0.05}, 3});
    CHECK(std::abs(mesh.total_volume() - 2.5e-4) < 1e-9);
  }
  SUBCASE("sphere volume converges") {
    const TetMesh mesh = make_primitive({PrimitiveKind::Sphere, {0.05}, 8});
    const double analytic = 4.0 / 3.0 * M_PI * std::pow(0.05, 3);
    CHECK(std::abs(mesh.total_volume() - analytic) / analytic < 0.05);
  }
  SUBCASE("cylinder volume converges") {
    const TetMesh mesh = make_primitive({PrimitiveKind::Cylinder, {0.03, 0.08}, 8});
    const double analytic = M_PI * 0.03 * 0.03 * 0.08;
    CHECK(std::abs(mesh.total_volume() - analytic) / analytic < 0.05);
  }
  SUBCASE("bar footprints are exact") {
    const double lx = 0.08, ly = 0.08, arm = 0.03, h = 0.035;
    const double analytic = (lx * arm + arm * (ly - arm)) * h;
    const TetMesh l = make_primitive({PrimitiveKind::Lbar, {lx, ly, arm, h}, 4});
    CHECK(std::abs(l.total_volume() - analytic) < 1e-9);
    const TetMesh t = make_primitive({PrimitiveKind::Tbar, {lx, ly, arm, h}, 4});
    CHECK(std::abs(t.total_volume() - analytic) < 1e-9);
  }
  SUBCASE("spec validation") {
    CHECK_THROWS(make_primitive({PrimitiveKind::Box, {0.1, 0.1}, 2}));
    CHECK_THROWS(make_primitive({PrimitiveKind::Box, {0.1, -0.1, 0.1}, 2}));
    CHECK_THROWS(make_primitive({PrimitiveKind::Box, {0.1, 0.1, 0.1}, 0}));
    CHECK_THROWS(make_primitive({PrimitiveKind::Lbar, {0.05, 0.05, 0.06, 0.03}, 3}));
  }
}

TEST_CASE("primitives rest on the ground, centered in x/y") {
  for (const auto& spec : bundled_primitives()) {
    const TetMesh mesh = make_primitive(spec);
    const auto box = mesh.bounds();
    CAPTURE(to_string(spec.kind));
    CHECK(std::abs(box.min().z()) < 1e-12);
    CHECK(std::abs(box.min().x() + box.max().x()) < 1e-12);
    CHECK(std::abs(box.min().y() + box.max().y()) < 1e-12);
  }
}

TEST_CASE("volume is rotation invariant") {
  TetMesh mesh = make_primitive({PrimitiveKind::Lbar, {0.08, 0.08, 0.03, 0.035}, 4});
  const double before = mesh.total_volume();
  const Eigen::Matrix3d rot(
      Eigen::AngleAxisd(0.7, Vec3(1, 2, 3).normalized()).toRotationMatrix());
  for (auto& v : mesh.vertices) v = rot * v + Vec3(0.3, -0.2, 0.1);
  CHECK(std::abs(mesh.total_volume() - before) / before < 1e-9);
}

TEST_CASE("surface extraction") {
  SUBCASE("single tet gives 4 boundary triangles") {
    TetMesh mesh;
    mesh.vertices = {Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0), Vec3(0, 0, 1)};
    mesh.tets = {{0, 1, 2, 3}};
    mesh.tet_material = {0};
    const SurfaceMesh surf = extract_surface(mesh);
    CHECK(surf.triangles.size() == 4);
    CHECK(watertight(surf));
  }
  SUBCASE("shared face is dropped") {
    TetMesh mesh;
    mesh.vertices = {Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0), Vec3(0, 0, 1),
                     Vec3(1, 1, 1)};
    mesh.tets = {{0, 1, 2, 3}, {1, 2, 3, 4}};
    mesh.tet_material = {0, 0};
    mesh.validate();
    const SurfaceMesh surf = extract_surface(mesh);
    CHECK(surf.triangles.size() == 6);
    std::set<std::set<int>> faces;
    for (const auto& t : surf.triangles) faces.insert({t[0], t[1], t[2]});
    CHECK(faces.count({1, 2, 3}) == 0);
  }
  SUBCASE("box surface is a topological sphere") {
    const SurfaceMesh surf =
        extract_surface(make_primitive({PrimitiveKind::Box, {0.1, 0.1, 0.1}, 2}));
    CHECK(watertight(surf));
    std::set<int> verts;
    std::set<std::pair<int, int>> edges;
    for (const auto& t : surf.triangles)
      for (int e = 0; e < 3; ++e) {
        verts.insert(t[e]);
        int a = t[e], b = t[(e + 1) % 3];
        if (a > b) std::swap(a, b);
        edges.insert({a, b});
      }
    const long euler = static_cast<long>(verts.size()) - static_cast<long>(edges.size()) +
                       static_cast<long>(surf.triangles.size());
    CHECK(euler == 2);
  }
  SUBCASE("all primitives extract watertight, outward-oriented surfaces") {
    for (const auto& spec : bundled_primitives()) {
      const TetMesh mesh = make_primitive(spec);
      const SurfaceMesh surf = extract_surface(mesh);
      CAPTURE(to_string(spec.kind));
      CHECK(watertight(surf));
      // outward orientation: flux of the identity field through a closed
      // outward surface equals 3x the enclosed volume
      double flux = 0.0;
      for (size_t t = 0; t < surf.triangles.size(); ++t) {
        const Vec3 a = surf.triangle_vertex(t, 0), b = surf.triangle_vertex(t, 1),
                   c = surf.triangle_vertex(t, 2);
        flux += (a + b + c).dot(surf.normals[t]) / 3.0 * surf.triangle_area(t);
      }
      CHECK(flux / 3.0 == doctest::Approx(mesh.total_volume()).epsilon(1e-9));
      for (const auto& n : surf.normals) CHECK(std::abs(n.norm() - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("raycast examples") {
  // box spanning [0,0.1]^3 as in the interface examples
  TetMesh mesh = make_primitive({PrimitiveKind::Box, {0.1, 0.1, 0.1}, 2});
  for (auto& v : mesh.vertices) v += Vec3(0.05, 0.05, 0.0);
  const SurfaceMesh surf = extract_surface(mesh);
  const Bvh bvh(surf);

  SUBCASE("vertical hit on the top face") {
    const auto hit = bvh.raycast(Vec3(0.05, 0.05, 1.0), Vec3(0, 0, -1));
    REQUIRE(hit.has_value());
    CHECK(hit->distance == doctest::Approx(0.9).epsilon(1e-12));
    CHECK(hit->point.z() == doctest::Approx(0.1));
    CHECK(hit->normal.z() == doctest::Approx(1.0));
  }
  SUBCASE("parallel ray outside misses") {
    CHECK(!bvh.raycast(Vec3(0.2, 0.05, 0.05), Vec3(0, 1, 0)).has_value());
  }
  SUBCASE("ray through a shared edge reports exactly one hit, lowest id") {
    // the grid line x=0.05 on the top face is shared by several triangles
    const auto hit = bvh.raycast(Vec3(0.05, 0.03, 1.0), Vec3(0, 0, -1));
    REQUIRE(hit.has_value());
    const auto brute = brute_raycast(surf, Vec3(0.05, 0.03, 1.0), Vec3(0, 0, -1));
    REQUIRE(brute.has_value());
    CHECK(hit->triangle == brute->triangle);
    CHECK(hit->distance == doctest::Approx(brute->distance).epsilon(1e-12));
  }
}

TEST_CASE("bvh matches brute force on random rays") {
  for (const auto& spec : bundled_primitives()) {
    const SurfaceMesh surf = extract_surface(make_primitive(spec));
    const Bvh bvh(surf);
    Rng rng(hash_stream(7, "bvh-rays", static_cast<uint64_t>(spec.kind)));
    const auto box = surf.bounds();
    const Vec3 center = box.center();
    const double radius = box.diagonal().norm();
    int hits = 0;
    for (int i = 0; i < 1000; ++i) {
      // aim from a sphere around the object at a jittered interior target
      Vec3 dir;
      do {
        dir = Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
      } while (dir.norm() < 1e-3);
      dir.normalize();
      const Vec3 origin = center - dir * radius +
                          Vec3(rng.uniform(-radius, radius), rng.uniform(-radius, radius),
                               rng.uniform(-radius, radius)) *
                              0.3;
      const auto a = bvh.raycast(origin, dir);
      const auto b = brute_raycast(surf, origin, dir);
      CAPTURE(to_string(spec.kind));
      REQUIRE(a.has_value() == b.has_value());
      if (a) {
        ++hits;
        CHECK(a->triangle == b->triangle);
        CHECK(std::abs(a->distance - b->distance) < 1e-9);
      }
    }
    CHECK(hits > 100);  // the aim heuristic must actually exercise hits
  }
}

TEST_CASE("query_box returns all overlapping triangle boxes") {
  const SurfaceMesh surf =
      extract_surface(make_primitive({PrimitiveKind::Cylinder, {0.03, 0.08}, 4}));
  const Bvh bvh(surf);
  Rng rng(hash_stream(11, "query-box"));
  for (int i = 0; i < 200; ++i) {
    const Vec3 lo(rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), rng.uniform(-0.02, 0.1));
    const Vec3 size(rng.uniform(0.001, 0.04), rng.uniform(0.001, 0.04),
                    rng.uniform(0.001, 0.04));
    const Eigen::AlignedBox3d box(lo, lo + size);
    std::vector<int> got;
    bvh.query_box(box, got);
    std::vector<int> want;
    for (size_t t = 0; t < surf.triangles.size(); ++t) {
      Eigen::AlignedBox3d tb;
      for (int c = 0; c < 3; ++c) tb.extend(surf.triangle_vertex(t, c));
      if (box.intersects(tb)) want.push_back(static_cast<int>(t));
    }
    CHECK(got == want);
  }
}

TEST_CASE("triangle vs oriented box") {
  const Eigen::Matrix3d id = Eigen::Matrix3d::Identity();
  SUBCASE("triangle inside") {
    CHECK(triangle_intersects_obb(Vec3(-0.1, 0, 0), Vec3(0.1, 0, 0), Vec3(0, 0.1, 0),
                                  Vec3::Zero(), id, Vec3(1, 1, 1)));
  }
  SUBCASE("clearly separated") {
    CHECK(!triangle_intersects_obb(Vec3(5, 0, 0), Vec3(6, 0, 0), Vec3(5, 1, 0), Vec3::Zero(),
                                   id, Vec3(1, 1, 1)));
  }
  SUBCASE("crossing a face") {
    CHECK(triangle_intersects_obb(Vec3(0.5, 0, -2), Vec3(0.5, 0, 2), Vec3(0.5, 2, 0),
                                  Vec3::Zero(), id, Vec3(1, 1, 1)));
  }
  SUBCASE("rotated box separates") {
    const Eigen::Matrix3d rot(
        Eigen::AngleAxisd(M_PI / 4, Vec3::UnitZ()).toRotationMatrix());
    // box corner points toward the triangle but does not reach it
    CHECK(!triangle_intersects_obb(Vec3(1.6, 0, 0), Vec3(2.6, 0, 0), Vec3(1.6, 1, 0),
                                   Vec3::Zero(), rot, Vec3(1, 1, 1)));
    CHECK(triangle_intersects_obb(Vec3(1.35, 0, 0), Vec3(2.6, 0, 0), Vec3(1.35, 1, 0),
                                  Vec3::Zero(), rot, Vec3(1, 1, 1)));
  }
  SUBCASE("agrees with sampling on random configurations") {
    Rng rng(hash_stream(3, "tri-obb"));
    int overlaps = 0;
    for (int i = 0; i < 300; ++i) {
      const Vec3 a(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
      const Vec3 b = a + Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
      const Vec3 c = a + Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
      const Vec3 center(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
      const Eigen::Matrix3d axes(
          Eigen::AngleAxisd(rng.uniform(0, M_PI),
                            Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1))
                                .normalized())
              .toRotationMatrix());
      const Vec3 half(rng.uniform(0.05, 0.5), rng.uniform(0.05, 0.5), rng.uniform(0.05, 0.5));
      const bool sat = triangle_intersects_obb(a, b, c, center, axes, half);
      // dense barycentric sampling: any sampled point inside the box proves
      // overlap (the converse cannot be sampled, so only check one direction)
      bool sampled_inside = false;
      for (int s = 0; s < 15 && !sampled_inside; ++s)
        for (int t = 0; s + t < 15 && !sampled_inside; ++t) {
          const double u = s / 14.0, v = t / 14.0;
          const Vec3 p = a + u * (b - a) + v * (c - a);
          const Vec3 local = axes.transpose() * (p - center);
          sampled_inside = (local.array().abs() <= half.array() + 1e-12).all();
        }
      if (sampled_inside) CHECK(sat);
      if (sat) ++overlaps;
    }
    CHECK(overlaps > 10);
    CHECK(overlaps < 290);
  }
}
