#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <vector>

#include "defgrasp/imaging.hpp"
#include "doctest.h"

using namespace defgrasp;
using namespace defgrasp::imaging;
using geometry::Vec3;

namespace {

geometry::TetMesh make_box(double lx, double ly, double lz, int res = 2) {
  geometry::PrimitiveSpec spec;
  spec.kind = geometry::PrimitiveKind::Box;
  spec.dims = {lx, ly, lz};
  spec.resolution = res;
  return geometry::make_primitive(spec);
}

fem::MaterialParams material(double young) {
  fem::MaterialParams m;
  m.young_modulus = young;
  return m;
}

double ang_dist(double a, double b) { return std::abs(wrap_angle(a - b)); }

bool any_valid(const Image& mask) {
  for (float m : mask.v)
    if (m != 0.0f) return true;
  return false;
}

bool same_image(const Image& a, const Image& b) {
  return a.height == b.height && a.width == b.width && a.v == b.v;
}

bool same_sample(const Sample& a, const Sample& b) {
  return same_image(a.depth, b.depth) && same_image(a.stiffness, b.stiffness) &&
         same_image(a.map.q, b.map.q) && same_image(a.map.sin2p, b.map.sin2p) &&
         same_image(a.map.cos2p, b.map.cos2p) && same_image(a.map.wnorm, b.map.wnorm) &&
         same_image(a.map.mask, b.map.mask);
}

}  // namespace

TEST_CASE("stiffness normalization is a clamped five-decade log scale") {
  CHECK(normalize_stiffness(2e4) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(normalize_stiffness(2e5) == doctest::Approx(0.2).epsilon(1e-12));
  CHECK(normalize_stiffness(2e6) == doctest::Approx(0.4).epsilon(1e-12));
  CHECK(normalize_stiffness(2e9) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(normalize_stiffness(1.0) == 0.0);     // clamped below
  CHECK(normalize_stiffness(1e12) == 1.0);    // clamped above
  double prev = -1.0;
  for (double e = 2e4; e <= 2e9; e *= 3.0) {  // monotone across the range
    const double s = normalize_stiffness(e);
    CHECK(s > prev);
    prev = s;
  }

  CHECK(normalize_stiffness(2e4, StiffnessScale::Linear) == 0.0);
  CHECK(normalize_stiffness(2e9, StiffnessScale::Linear) == 1.0);
  CHECK(normalize_stiffness(1e9, StiffnessScale::Linear) ==
        doctest::Approx((1e9 - 2e4) / (2e9 - 2e4)).epsilon(1e-12));
  // the linear map collapses the soft decades the log map spreads out
  CHECK(normalize_stiffness(2e6, StiffnessScale::Linear) < 0.001);
}

TEST_CASE("orthographic rendering measures depth to the first hit and looks up stiffness") {
  Camera cam;
  cam.width = cam.height = 128;
  cam.scale = 1000.0;
  cam.camera_height = 1.0;

  SUBCASE("empty scene is all background") {
    const auto views = render_views(geometry::SurfaceMesh{}, {}, cam);
    for (float d : views.depth.v) CHECK(d == doctest::Approx(1.0));
    for (float s : views.stiffness.v) CHECK(s == 0.0f);
  }

  SUBCASE("a 0.1 cube occupies a 100x100 px square at depth 0.9") {
    const auto surf = geometry::extract_surface(make_box(0.1, 0.1, 0.1));
    const auto views = render_views(surf, {material(2e6)}, cam);
    int object_pixels = 0;
    for (int r = 0; r < 128; ++r) {
      for (int c = 0; c < 128; ++c) {
        const bool inside = r >= 14 && r <= 113 && c >= 14 && c <= 113;
        if (inside) {
          CHECK(views.depth.at(r, c) == doctest::Approx(0.9).epsilon(1e-6));
          CHECK(views.stiffness.at(r, c) == doctest::Approx(0.4).epsilon(1e-6));
          ++object_pixels;
        } else {
          CHECK(views.depth.at(r, c) == doctest::Approx(1.0).epsilon(1e-6));
          CHECK(views.stiffness.at(r, c) == 0.0f);
        }
      }
    }
    CHECK(object_pixels == 100 * 100);
  }

  SUBCASE("per-triangle materials give per-pixel stiffness") {
    auto mesh = make_box(0.04, 0.04, 0.02);
    for (size_t t = 0; t < mesh.tets.size(); ++t) {
      Vec3 centroid = Vec3::Zero();
      for (int k = 0; k < 4; ++k) centroid += mesh.vertices[mesh.tets[t][k]];
      mesh.tet_material[t] = centroid.x() < 0.0 ? 0 : 1;
    }
    const auto surf = geometry::extract_surface(mesh);
    const auto views = render_views(surf, {material(2e4), material(2e9)}, cam);
    // both halves are object (depth < camera height) yet carry the endpoint
    // stiffness values 0 and 1
    const int r = 64;
    const int c_left = static_cast<int>(std::lround(cam.px_x(-0.01)));
    const int c_right = static_cast<int>(std::lround(cam.px_x(0.01)));
    CHECK(views.depth.at(r, c_left) == doctest::Approx(0.98).epsilon(1e-6));
    CHECK(views.depth.at(r, c_right) == doctest::Approx(0.98).epsilon(1e-6));
    CHECK(views.stiffness.at(r, c_left) == 0.0f);
    CHECK(views.stiffness.at(r, c_right) == 1.0f);
  }

  SUBCASE("an object wider than the footprint is rejected by name") {
    Camera tiny = cam;
    tiny.width = tiny.height = 32;  // 0.032 m footprint
    const auto surf = geometry::extract_surface(make_box(0.06, 0.06, 0.02));
    CHECK_THROWS_WITH_AS(render_views(surf, {material(2e6)}, tiny, "wide_box"),
                         doctest::Contains("wide_box"), std::runtime_error);
  }
}

TEST_CASE("grasp projection scales to pixels, wraps the yaw, and caps the width") {
  Camera cam;  // 96 px, 1000 px/m
  fem::GripperModel grip;

  GraspCandidate g;
  g.center = Vec3(0.01, -0.02, 0.015);
  g.axis = Vec3(1, 0, 0);
  g.width = 0.08;
  const auto r = project_grasp(g, cam, grip);
  CHECK(r.cx == doctest::Approx(57.5).epsilon(1e-12));
  CHECK(r.cy == doctest::Approx(27.5).epsilon(1e-12));
  CHECK(r.phi == 0.0);
  CHECK(r.width_px == doctest::Approx(80.0));
  CHECK(r.height_px == doctest::Approx(20.0));  // pad width 0.02 m

  const double yaw = std::numbers::pi / 2 + 0.1;
  g.axis = Vec3(std::cos(yaw), std::sin(yaw), 0.0);
  CHECK(project_grasp(g, cam, grip).phi ==
        doctest::Approx(-std::numbers::pi / 2 + 0.1).epsilon(1e-9));

  g.axis = Vec3(1, 0, 0);
  g.width = 0.2;
  CHECK(project_grasp(g, cam, grip).width_px == 150.0);

  g.width = 0.0;
  CHECK_THROWS_AS(project_grasp(g, cam, grip), std::invalid_argument);
}

TEST_CASE("rasterization paints exactly the oriented rectangles") {
  SUBCASE("axis-aligned rectangle covers the predicted pixel set") {
    const GraspRect rect{48.0, 48.0, 0.0, 20.0, 10.0};
    const auto m = rasterize_maps({{rect, 0.75}}, 96, 96);
    for (int r = 0; r < 96; ++r) {
      for (int c = 0; c < 96; ++c) {
        const bool inside = std::abs(c - 48) <= 10 && std::abs(r - 48) <= 5;
        CHECK(m.mask.at(r, c) == (inside ? 1.0f : 0.0f));
        CHECK(m.q.at(r, c) == (inside ? 0.75f : 0.0f));
        CHECK(m.sin2p.at(r, c) == 0.0f);
        CHECK(m.cos2p.at(r, c) == (inside ? 1.0f : 0.0f));
        CHECK(m.wnorm.at(r, c) == (inside ? doctest::Approx(20.0 / 150.0) : 0.0f));
      }
    }
  }

  SUBCASE("rotated rectangle: hand-checked membership and unit angle channels") {
    const GraspRect rect{48.0, 48.0, std::numbers::pi / 4, 20.0, 20.0};
    const auto m = rasterize_maps({{rect, 1.0}}, 96, 96);
    // (55,55) sits 7*sqrt(2) = 9.9 px along the diagonal: inside
    CHECK(m.mask.at(55, 55) == 1.0f);
    // (56,56) sits 11.3 px along it: outside
    CHECK(m.mask.at(56, 56) == 0.0f);
    int valid = 0;
    for (int r = 0; r < 96; ++r)
      for (int c = 0; c < 96; ++c)
        if (m.mask.at(r, c) != 0.0f) {
          ++valid;
          const double s = m.sin2p.at(r, c), co = m.cos2p.at(r, c);
          CHECK(s * s + co * co == doctest::Approx(1.0).epsilon(1e-6));
          CHECK(s == doctest::Approx(1.0).epsilon(1e-6));  // sin(pi/2)
        }
    // a 20x20 square has area 400; discretization keeps the count near that
    CHECK(valid > 380);
    CHECK(valid < 460);
  }

  SUBCASE("overlaps keep the higher quality and its channels") {
    const GraspRect a{30.0, 30.0, 0.0, 20.0, 10.0};
    const GraspRect b{36.0, 30.0, 0.5, 20.0, 10.0};
    const auto m = rasterize_maps({{a, 0.6}, {b, 1.0}}, 96, 96);
    // (r=30, c=32) lies in both: b wins
    CHECK(m.q.at(30, 32) == 1.0f);
    CHECK(m.sin2p.at(30, 32) == doctest::Approx(std::sin(1.0)));
    // (r=28, c=21) lies only in a
    CHECK(m.q.at(28, 21) == 0.6f);
    CHECK(m.cos2p.at(28, 21) == 1.0f);
    // order independence of the max rule
    const auto m2 = rasterize_maps({{b, 1.0}, {a, 0.6}}, 96, 96);
    CHECK(same_image(m.q, m2.q));
    CHECK(same_image(m.sin2p, m2.sin2p));
    CHECK(same_image(m.mask, m2.mask));
  }

  SUBCASE("no rectangles means an all-invalid map") {
    const auto m = rasterize_maps({}, 96, 96);
    CHECK_FALSE(any_valid(m.mask));
    for (float q : m.q.v) CHECK(q == 0.0f);
  }
}

TEST_CASE("decoding inverts rasterization and ranks peaks by quality") {
  Camera cam;
  const Image depth(96, 96, 0.47f);  // constant surface 0.03 m above ground

  SUBCASE("single rectangle round trip") {
    const GraspRect rect{52.5, 40.25, 0.4, 60.0, 20.0};
    const auto m = rasterize_maps({{rect, 0.8}}, 96, 96);
    const auto got = decode_grasps(m, depth, cam, 1);
    REQUIRE(got.size() == 1);
    CHECK((got[0].px - Eigen::Vector2d(52.5, 40.25)).norm() <= 1.0);
    CHECK(ang_dist(got[0].grasp.yaw(), 0.4) < 1e-6);
    CHECK(std::abs(got[0].grasp.width * cam.scale - 60.0) <= 0.5);
    CHECK(got[0].quality == doctest::Approx(0.8).epsilon(1e-6));
    CHECK(got[0].grasp.approach == Vec3(0, 0, -1));
    // default decode height: 0.01 m above the surface hit
    CHECK(got[0].grasp.center.z() == doctest::Approx(0.04).epsilon(1e-6));
    CHECK(got[0].grasp.center.x() == doctest::Approx(cam.world_x(52.5)).epsilon(1e-3));
  }

  SUBCASE("two rectangles come back ordered by quality") {
    const GraspRect hi{25.0, 48.0, 0.0, 24.0, 12.0};
    const GraspRect lo{70.0, 48.0, -0.7, 24.0, 12.0};
    const auto m = rasterize_maps({{hi, 1.0}, {lo, 0.5}}, 96, 96);
    const auto got = decode_grasps(m, depth, cam, 2);
    REQUIRE(got.size() == 2);
    CHECK(got[0].quality > got[1].quality);
    CHECK((got[0].px - Eigen::Vector2d(25.0, 48.0)).norm() <= 1.0);
    CHECK((got[1].px - Eigen::Vector2d(70.0, 48.0)).norm() <= 1.0);
    CHECK(ang_dist(got[1].grasp.yaw(), -0.7) < 1e-6);
  }

  SUBCASE("a diagonal grasp recovers phi = pi/4 from the angle channels") {
    const GraspRect rect{48.0, 48.0, std::numbers::pi / 4, 40.0, 16.0};
    const auto m = rasterize_maps({{rect, 1.0}}, 96, 96);
    const auto got = decode_grasps(m, depth, cam, 1);
    REQUIRE(got.size() == 1);
    CHECK(ang_dist(got[0].grasp.yaw(), std::numbers::pi / 4) < 1e-6);
  }

  SUBCASE("an all-zero quality map decodes to nothing") {
    const auto m = rasterize_maps({}, 96, 96);
    CHECK(decode_grasps(m, depth, cam, 5).empty());
  }

  SUBCASE("the height floor clips grasps that would dig into the ground") {
    const GraspRect rect{48.0, 48.0, 0.0, 40.0, 16.0};
    const auto m = rasterize_maps({{rect, 1.0}}, 96, 96);
    DecodeOptions opt;
    opt.center_offset = -0.1;  // far below the surface
    opt.min_center_z = 0.01;
    const auto got = decode_grasps(m, depth, cam, 1, opt);
    REQUIRE(got.size() == 1);
    CHECK(got[0].grasp.center.z() == doctest::Approx(0.01));
  }
}

TEST_CASE("round trip holds across randomized rectangles") {
  Camera cam;
  const Image depth(96, 96, 0.48f);
  Rng rng(2024);
  double worst_px = 0.0, worst_ang = 0.0, worst_w = 0.0;
  for (int i = 0; i < 100; ++i) {
    GraspRect rect;
    rect.cx = rng.uniform(34.0, 62.0);
    rect.cy = rng.uniform(34.0, 62.0);
    rect.phi = rng.uniform(-std::numbers::pi / 2, std::numbers::pi / 2);
    rect.width_px = rng.uniform(15.0, 60.0);
    rect.height_px = rng.uniform(10.0, 24.0);
    const double q = rng.uniform(0.5, 1.0);
    const auto m = rasterize_maps({{rect, q}}, 96, 96);
    const auto got = decode_grasps(m, depth, cam, 1);
    REQUIRE(got.size() == 1);
    worst_px = std::max(worst_px, (got[0].px - Eigen::Vector2d(rect.cx, rect.cy)).norm());
    worst_ang = std::max(worst_ang, ang_dist(got[0].grasp.yaw(), rect.phi));
    worst_w = std::max(worst_w, std::abs(got[0].grasp.width * cam.scale - rect.width_px));
  }
  CHECK(worst_px <= 1.0);
  CHECK(worst_ang <= 2.0 * std::numbers::pi / 180.0);
  CHECK(worst_w <= 1.0);
}

TEST_CASE("augmentation transforms every channel consistently") {
  Camera cam;
  const auto surf = geometry::extract_surface(make_box(0.05, 0.04, 0.03));
  const auto views = render_views(surf, {material(2e6)}, cam);
  const GraspRect rect{47.5, 47.5, 0.3, 30.0, 14.0};
  const Sample sample{views.depth, views.stiffness, rasterize_maps({{rect, 0.9}}, 96, 96)};

  SUBCASE("identity transform is bit-exact") {
    CHECK(same_sample(transform_sample(sample, cam, 0.0, 1.0), sample));
  }

  SUBCASE("quarter-turn rotates the angle channels") {
    const auto out = transform_sample(sample, cam, std::numbers::pi / 2, 1.0);
    const double want = wrap_angle(0.3 + std::numbers::pi / 2);
    CHECK(want == doctest::Approx(0.3 - std::numbers::pi / 2));
    int valid = 0;
    for (int r = 0; r < 96; ++r)
      for (int c = 0; c < 96; ++c)
        if (out.map.mask.at(r, c) != 0.0f) {
          ++valid;
          const double phi =
              0.5 * std::atan2(out.map.sin2p.at(r, c), out.map.cos2p.at(r, c));
          CHECK(ang_dist(phi, want) < 1e-6);
          CHECK(out.map.q.at(r, c) == 0.9f);
          CHECK(out.map.wnorm.at(r, c) == doctest::Approx(30.0 / 150.0));
        }
    // rotation about the centre preserves the rectangle's pixel count closely
    CHECK(valid > 380);
    CHECK(valid < 500);
  }

  SUBCASE("zoom scales the stored widths and re-caps them") {
    Sample wide = sample;
    for (auto& w : wide.map.wnorm.v)
      if (w != 0.0f) w = 100.0f / 150.0f;
    const auto out = transform_sample(wide, cam, 0.0, 0.5);
    CHECK(out.map.wnorm.at(47, 47) == doctest::Approx(50.0 / 150.0));

    const auto big = transform_sample(wide, cam, 0.0, 2.0);
    CHECK(big.map.wnorm.at(47, 47) == 1.0f);  // capped at 150 px
  }

  SUBCASE("background depth stays at the camera height") {
    const auto out = transform_sample(sample, cam, 0.6, 0.8);
    for (int corner_r : {0, 95})
      for (int corner_c : {0, 95})
        CHECK(out.depth.at(corner_r, corner_c) == doctest::Approx(0.5).epsilon(1e-6));
  }

  SUBCASE("decoding the augmented map matches transforming the decoded grasp") {
    const Image depth(96, 96, 0.48f);
    const double theta = 0.7, zoom = 0.95;
    const auto out = transform_sample(sample, cam, theta, zoom);
    const auto g0 = decode_grasps(sample.map, depth, cam, 1);
    const auto g1 = decode_grasps(out.map, depth, cam, 1);
    REQUIRE(g0.size() == 1);
    REQUIRE(g1.size() == 1);
    const Eigen::Vector2d ctr(47.5, 47.5);
    const Eigen::Rotation2Dd rot(theta);
    const Eigen::Vector2d expect = rot * (g0[0].px - ctr) * zoom + ctr;
    CHECK((g1[0].px - expect).norm() <= 1.5);
    CHECK(ang_dist(g1[0].grasp.yaw(), g0[0].grasp.yaw() + theta) <=
          2.0 * std::numbers::pi / 180.0);
    CHECK(std::abs(g1[0].grasp.width - g0[0].grasp.width * zoom) * cam.scale <= 1.5);
  }

  SUBCASE("random augmentation keeps labels in frame or passes through") {
    // a rectangle tucked into a corner can rotate fully out of frame
    Sample corner = sample;
    corner.map = rasterize_maps({{GraspRect{8.0, 8.0, 0.0, 10.0, 6.0}, 1.0}}, 96, 96);
    int passthrough = 0;
    for (uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(seed);
      const auto out = augment(corner, cam, rng);
      if (same_sample(out, corner))
        ++passthrough;
      else
        CHECK(any_valid(out.map.mask));
    }
    CHECK(passthrough < 20);  // most draws keep the labels visible
  }
}

TEST_CASE("tensor files round trip bit-exactly and reject malformed input") {
  const auto dir = std::filesystem::temp_directory_path();

  SUBCASE("write/read round trip") {
    Tensor t(5, 4, 3);
    Rng rng(9);
    for (auto& x : t.v) x = static_cast<float>(rng.uniform(-10.0, 10.0));
    const auto path = dir / "defgrasp_roundtrip.gmap";
    write_tensor(path, t);
    const auto back = read_tensor(path);
    CHECK(back.height == 5);
    CHECK(back.width == 4);
    CHECK(back.channels == 3);
    CHECK(back.v == t.v);
    std::filesystem::remove(path);
  }

  SUBCASE("truncated payload is a size mismatch") {
    Tensor t(4, 4, 2);
    const auto path = dir / "defgrasp_truncated.gmap";
    write_tensor(path, t);
    std::filesystem::resize_file(path, std::filesystem::file_size(path) - 8);
    CHECK_THROWS_WITH_AS(read_tensor(path), doctest::Contains("does not match"),
                         std::runtime_error);
    std::filesystem::remove(path);
  }

  SUBCASE("bad magic and bad version are format errors") {
    const auto path = dir / "defgrasp_badmagic.gmap";
    {
      std::ofstream f(path, std::ios::binary);
      const uint32_t header[4] = {1, 1, 1, 1};
      f.write("NOPE", 4);
      f.write(reinterpret_cast<const char*>(header), sizeof(header));
      const float x = 0.0f;
      f.write(reinterpret_cast<const char*>(&x), sizeof(x));
    }
    CHECK_THROWS_WITH_AS(read_tensor(path), doctest::Contains("not a GMAP"),
                         std::runtime_error);
    {
      std::ofstream f(path, std::ios::binary);
      const uint32_t header[4] = {2, 1, 1, 1};
      f.write("GMAP", 4);
      f.write(reinterpret_cast<const char*>(header), sizeof(header));
      const float x = 0.0f;
      f.write(reinterpret_cast<const char*>(&x), sizeof(x));
    }
    CHECK_THROWS_WITH_AS(read_tensor(path), doctest::Contains("version"), std::runtime_error);
    std::filesystem::remove(path);
  }

  SUBCASE("packed samples keep the documented channel order") {
    Sample s{Image(3, 2, 0.5f), Image(3, 2, 0.25f),
             GraspMap{Image(3, 2, 0.9f), Image(3, 2, 0.1f), Image(3, 2, -0.2f),
                      Image(3, 2, 0.3f), Image(3, 2, 1.0f)}};
    s.depth.at(1, 1) = 0.42f;
    const auto t = pack_sample(s);
    REQUIRE(t.channels == 7);
    CHECK(t.at(1, 1, 0) == 0.42f);   // depth
    CHECK(t.at(0, 0, 1) == 0.25f);   // stiffness
    CHECK(t.at(2, 1, 2) == 0.9f);    // Q
    CHECK(t.at(0, 1, 3) == 0.1f);    // sin 2phi
    CHECK(t.at(1, 0, 4) == -0.2f);   // cos 2phi
    CHECK(t.at(2, 0, 5) == 0.3f);    // normalized width
    CHECK(t.at(0, 0, 6) == 1.0f);    // validity mask
    const auto back = unpack_sample(t);
    CHECK(same_sample(back, s));

    CHECK_THROWS_AS(unpack_sample(Tensor(3, 2, 4)), std::invalid_argument);
  }
}
