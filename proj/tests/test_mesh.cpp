#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <sstream>

#include "graspgen/cloud.hpp"
#include "graspgen/mesh.hpp"
#include "graspgen/rng.hpp"

using namespace graspgen;
using geom::Vec3;
using mesh::TriMesh;

namespace {

// Closed orientable surface: every directed edge appears exactly once and
// its reverse exactly once.
bool is_watertight(const TriMesh& m) {
  std::map<std::pair<int, int>, int> count;
  for (const auto& t : m.triangles)
    for (int e = 0; e < 3; ++e) count[{t[e], t[(e + 1) % 3]}]++;
  for (const auto& [edge, c] : count) {
    if (c != 1) return false;
    const auto rev = count.find({edge.second, edge.first});
    if (rev == count.end() || rev->second != 1) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("box mesh has the closed-form size and volume", "[mesh]") {
  const TriMesh m = mesh::make_box(0.06, 0.06, 0.06);
  CHECK(m.vertices.size() == 8);
  CHECK(m.triangles.size() == 12);
  CHECK_THAT(signed_volume(m), Catch::Matchers::WithinAbs(2.16e-4, 1e-15));
  CHECK(is_watertight(m));
  CHECK(norm(volume_centroid(m)) < 1e-12);
  CHECK_THAT(surface_area(m), Catch::Matchers::WithinAbs(6 * 0.0036, 1e-12));
}

TEST_CASE("cylinder volume matches the closed form within 2 percent", "[mesh]") {
  const double r = 0.035, h = 0.12;
  const TriMesh m = mesh::make_cylinder(r, h);
  CHECK(is_watertight(m));
  const double v = signed_volume(m);
  const double closed = M_PI * r * r * h;
  CHECK(std::fabs(v - closed) / closed < 0.02);
  CHECK(norm(volume_centroid(m)) < 1e-12);
}

TEST_CASE("bowl is watertight, centered, and sized to its radius", "[mesh]") {
  const TriMesh m = mesh::make_bowl(0.07, 0.3);
  CHECK(is_watertight(m));
  CHECK(signed_volume(m) > 0.0);
  CHECK(norm(volume_centroid(m)) < 1e-9);
  // The arc discretization never lands a vertex exactly on the equator, so
  // the widest ring sits a hair inside the nominal radius.
  double max_r = 0.0;
  for (const Vec3& v : m.vertices) max_r = std::fmax(max_r, std::hypot(v.x, v.y));
  CHECK(max_r <= 0.07 + 1e-12);
  CHECK(max_r > 0.99 * 0.07);
}

TEST_CASE("primitive parameters are validated", "[mesh]") {
  CHECK_THROWS_AS(mesh::make_box(0.03, 0.06, 0.06), std::invalid_argument);
  CHECK_THROWS_AS(mesh::make_box(0.06, 0.13, 0.06), std::invalid_argument);
  CHECK_THROWS_AS(mesh::make_cylinder(0.01, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(mesh::make_cylinder(0.03, 0.2), std::invalid_argument);
  CHECK_THROWS_AS(mesh::make_bowl(0.2), std::invalid_argument);
}

TEST_CASE("same seed gives a bit-identical mesh", "[mesh]") {
  for (auto kind : {mesh::PrimitiveKind::box, mesh::PrimitiveKind::cylinder,
                    mesh::PrimitiveKind::bowl}) {
    Rng a(404), b(404);
    const TriMesh m1 = mesh::make_primitive(kind, a);
    const TriMesh m2 = mesh::make_primitive(kind, b);
    REQUIRE(m1.vertices.size() == m2.vertices.size());
    for (size_t i = 0; i < m1.vertices.size(); ++i) {
      CHECK(m1.vertices[i].x == m2.vertices[i].x);
      CHECK(m1.vertices[i].y == m2.vertices[i].y);
      CHECK(m1.vertices[i].z == m2.vertices[i].z);
    }
    CHECK(m1.triangles == m2.triangles);
    CHECK(m1.provenance == m2.provenance);
  }
}

TEST_CASE("random primitives stay inside the documented ranges", "[mesh]") {
  Rng rng(11);
  for (int i = 0; i < 20; ++i) {
    const TriMesh m = mesh::make_primitive(mesh::PrimitiveKind::box, rng);
    CHECK(is_watertight(m));
    for (const Vec3& v : m.vertices) {
      CHECK(std::fabs(v.x) <= 0.06 + 1e-12);
      CHECK(std::fabs(v.y) <= 0.06 + 1e-12);
      CHECK(std::fabs(v.z) <= 0.06 + 1e-12);
    }
  }
}

TEST_CASE("triangle box overlap handles crossing, touching, and misses", "[mesh]") {
  const Vec3 half{0.5, 0.5, 0.5};
  // Fully inside.
  CHECK(mesh::tri_box_overlap(half, {0, 0, 0}, {0.1, 0, 0}, {0, 0.1, 0}));
  // Crossing one face.
  CHECK(mesh::tri_box_overlap(half, {0.4, 0, 0}, {0.8, 0.1, 0}, {0.8, -0.1, 0}));
  // Touching a face plane exactly counts as overlap.
  CHECK(mesh::tri_box_overlap(half, {0.5, -0.2, -0.2}, {0.5, 0.4, -0.2}, {0.5, -0.2, 0.4}));
  // Touching at a single corner point.
  CHECK(mesh::tri_box_overlap(half, {0.5, 0.5, 0.5}, {1.0, 0.6, 0.5}, {0.6, 1.0, 0.5}));
  // Clearly separated along an axis.
  CHECK_FALSE(mesh::tri_box_overlap(half, {0.6, -0.2, -0.2}, {0.9, 0.4, -0.2}, {0.7, -0.2, 0.4}));
  // Separated only by a cross axis (big triangle slicing near a corner).
  CHECK_FALSE(mesh::tri_box_overlap(half, {1.2, 0, 0}, {0, 1.2, 0}, {1.2, 1.2, 2.0}));
  // Large triangle that swallows the whole box cross-section.
  CHECK(mesh::tri_box_overlap(half, {-5, -5, 0}, {5, -5, 0}, {0, 5, 0}));
}

TEST_CASE("point containment by crossing parity", "[mesh]") {
  const TriMesh box = mesh::make_box(0.06, 0.08, 0.1);
  CHECK(mesh::point_in_mesh(box, {0, 0, 0}));
  CHECK(mesh::point_in_mesh(box, {0.029, -0.039, 0.049}));
  CHECK_FALSE(mesh::point_in_mesh(box, {0.031, 0, 0}));
  CHECK_FALSE(mesh::point_in_mesh(box, {0, 0, 1}));

  const TriMesh bowl = mesh::make_bowl(0.07, 0.3);
  double zbot = 0.0;
  for (const Vec3& v : bowl.vertices) zbot = std::fmin(zbot, v.z);
  // In the shell wall just above the outer bottom pole.
  CHECK(mesh::point_in_mesh(bowl, {0, 0, zbot + 0.004}));
  // In the cavity above the inner bottom.
  CHECK_FALSE(mesh::point_in_mesh(bowl, {0, 0, zbot + 0.02}));
}

TEST_CASE("ray casting finds the nearest face", "[mesh]") {
  const TriMesh box = mesh::make_box(0.06, 0.06, 0.06);
  mesh::RayHit hit;
  REQUIRE(mesh::ray_mesh_nearest(box, {0, 0, 1}, {0, 0, -1}, hit));
  CHECK_THAT(hit.t, Catch::Matchers::WithinAbs(0.97, 1e-12));
  const Vec3 n = face_normal(box, hit.face);
  CHECK_THAT(n.z, Catch::Matchers::WithinAbs(1.0, 1e-12));
  CHECK_FALSE(mesh::ray_mesh_nearest(box, {0, 0, 1}, {0, 0, 1}, hit));
  CHECK_FALSE(mesh::ray_mesh_nearest(box, {1, 0, 0}, {0, 0, -1}, hit));
}

TEST_CASE("polygon clipping against half-spaces", "[mesh]") {
  const std::vector<Vec3> square{{-1, -1, 0}, {1, -1, 0}, {1, 1, 0}, {-1, 1, 0}};
  auto clipped = mesh::clip_polygon(square, {1, 0, 0}, 0.0);
  REQUIRE(clipped.size() == 4);
  for (const Vec3& p : clipped) CHECK(p.x <= 1e-15);

  clipped = mesh::clip_polygon(square, {1, 0, 0}, 2.0);
  CHECK(clipped.size() == 4);  // fully inside: unchanged
  clipped = mesh::clip_polygon(square, {1, 0, 0}, -2.0);
  CHECK(clipped.empty());
}

TEST_CASE("stl round trip is byte identical", "[mesh]") {
  Rng rng(2020);
  const TriMesh m = mesh::make_primitive(mesh::PrimitiveKind::cylinder, rng);
  std::stringstream first;
  mesh::write_stl(first, m);
  const TriMesh back = mesh::read_stl(first);
  CHECK(back.provenance == m.provenance);
  CHECK(back.triangles.size() == m.triangles.size());
  std::stringstream second;
  mesh::write_stl(second, back);
  CHECK(first.str() == second.str());
  CHECK_THAT(signed_volume(back), Catch::Matchers::WithinAbs(signed_volume(m), 1e-15));
}

TEST_CASE("knn returns the nearest indices", "[mesh]") {
  const std::vector<Vec3> pts{{0, 0, 0}, {1, 0, 0}, {0.1, 0, 0}, {0, 0.2, 0}, {5, 5, 5}};
  const auto nb = cloud::knn(pts, 0, 3);
  REQUIRE(nb.size() == 3);
  CHECK(nb[0] == 2);
  CHECK(nb[1] == 3);
  CHECK(nb[2] == 1);
}

TEST_CASE("radius neighbors include the center first and cap the count", "[mesh]") {
  std::vector<Vec3> pts;
  for (int i = 0; i < 10; ++i) pts.push_back({0.01 * i, 0, 0});
  auto nb = cloud::radius_neighbors(pts, 0, 0.035, 3);
  REQUIRE(nb.size() == 3);
  CHECK(nb[0] == 0);
  CHECK(nb[1] == 1);
  CHECK(nb[2] == 2);
  nb = cloud::radius_neighbors(pts, 9, 0.001, 8);
  REQUIRE(nb.size() == 1);  // isolated center still forms a group
  CHECK(nb[0] == 9);
}
