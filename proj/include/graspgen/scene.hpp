#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

#include "graspgen/cloud.hpp"
#include "graspgen/geom.hpp"
#include "graspgen/mesh.hpp"
#include "graspgen/rng.hpp"

namespace graspgen::scene {

using cloud::PointFeatureCloud;
using geom::ControlPointSet;
using geom::Grasp;
using geom::Mat3;
using geom::Quat;
using geom::Vec3;
using mesh::TriMesh;

// Origin-centered axis-aligned box in the gripper frame.
struct GripperBox {
  Vec3 center;
  Vec3 half;
};

// Parallel-jaw gripper in its canonical frame: z is the approach axis
// (fingers extend toward +z), y is the closing axis, x completes the frame.
// The origin sits at the base between the fingers.
struct GripperModel {
  double finger_length = 0.06;
  double max_width = 0.08;
  double finger_thickness = 0.008;
  double palm_depth = 0.015;
  double palm_halfspan = 0.048;

  ControlPointSet control_points() const {
    const double hw = max_width / 2.0, l = finger_length;
    return {{{0.0, 0.0, 0.0},
             {0.0, hw, l / 2.0},
             {0.0, -hw, l / 2.0},
             {0.0, hw, l},
             {0.0, -hw, l},
             {0.0, 0.0, -palm_depth}}};
  }

  // Fingers are thin bars of square cross-section; the palm spans the full
  // opening behind them.
  std::vector<GripperBox> collision_boxes() const {
    const double hw = max_width / 2.0, ht = finger_thickness / 2.0, l = finger_length;
    return {{{0.0, hw + ht, l / 2.0}, {ht, ht, l / 2.0}},
            {{0.0, -hw - ht, l / 2.0}, {ht, ht, l / 2.0}},
            {{0.0, 0.0, -palm_depth / 2.0}, {ht, palm_halfspan, palm_depth / 2.0}}};
  }

  // Volume swept between the finger inner faces.
  GripperBox closing_box() const {
    return {{0.0, 0.0, finger_length / 2.0},
            {finger_thickness / 2.0, max_width / 2.0, finger_length / 2.0}};
  }

  // 64 canonical surface points on the inner finger faces, palm front, and
  // fingertips; all lie on the collision boxes.
  std::vector<Vec3> sample_cloud() const {
    std::vector<Vec3> pts;
    const double hw = max_width / 2.0, l = finger_length, ht = finger_thickness / 2.0;
    const double xs[2] = {-ht / 2.0, ht / 2.0};
    for (int side = 0; side < 2; ++side) {
      const double y = side == 0 ? hw : -hw;
      for (double x : xs)
        for (int i = 0; i < 10; ++i) pts.push_back({x, y, l * (0.05 + 0.9 * i / 9.0)});
    }
    const double ps = 0.9 * palm_halfspan;
    for (double x : xs)
      for (int i = 0; i < 8; ++i)
        pts.push_back({x, -ps + 2.0 * ps * i / 7.0, 0.0});
    for (int side = 0; side < 2; ++side) {
      const double ysgn = side == 0 ? 1.0 : -1.0;
      for (double x : xs)
        for (int i = 0; i < 2; ++i)
          pts.push_back({x, ysgn * (hw + ht / 2.0 + ht * (i - 0.5)), l});
    }
    return pts;
  }
};

namespace detail {

inline Vec3 any_perpendicular(const Vec3& z) {
  const Vec3 probe = std::fabs(z.x) <= std::fabs(z.y) && std::fabs(z.x) <= std::fabs(z.z)
                         ? Vec3{1, 0, 0}
                         : (std::fabs(z.y) <= std::fabs(z.z) ? Vec3{0, 1, 0} : Vec3{0, 0, 1});
  return normalized(cross(z, probe));
}

inline Quat frame_to_quat(const Vec3& x, const Vec3& y, const Vec3& z) {
  Mat3 m;
  for (int r = 0; r < 3; ++r) {
    m(r, 0) = x[r];
    m(r, 1) = y[r];
    m(r, 2) = z[r];
  }
  return Quat::from_matrix(m);
}

// Cumulative face-area table for uniform surface sampling.
struct AreaTable {
  std::vector<double> cumulative;
  std::vector<int> faces;
  double total = 0.0;

  explicit AreaTable(const TriMesh& m) {
    for (int i = 0; i < static_cast<int>(m.triangles.size()); ++i) {
      const double a = face_area(m, i);
      if (a < 1e-16) continue;  // degenerate faces never sampled
      total += a;
      cumulative.push_back(total);
      faces.push_back(i);
    }
    if (faces.empty()) throw std::invalid_argument("AreaTable: mesh has no usable faces");
  }

  int pick(Rng& rng) const {
    const double u = rng.uniform01() * total;
    const auto it = std::lower_bound(cumulative.begin(), cumulative.end(), u);
    const size_t k = std::min<size_t>(it - cumulative.begin(), faces.size() - 1);
    return faces[k];
  }
};

inline Vec3 uniform_barycentric_point(const TriMesh& m, int face, Rng& rng) {
  const double su = std::sqrt(rng.uniform01());
  const double v = rng.uniform01();
  const double b0 = 1.0 - su, b1 = su * (1.0 - v), b2 = su * v;
  return m.v(face, 0) * b0 + m.v(face, 1) * b1 + m.v(face, 2) * b2;
}

}  // namespace detail

// Grasp pose whose z-axis approaches along -normal with the surface point a
// given standoff down the approach axis.
inline Grasp grasp_from_surface(const Vec3& surface_point, const Vec3& outward_normal,
                                double standoff, double roll) {
  const Vec3 z = -normalized(outward_normal);
  const Vec3 x0 = detail::any_perpendicular(z);
  const Vec3 y0 = cross(z, x0);
  const Vec3 x = x0 * std::cos(roll) + y0 * std::sin(roll);
  const Vec3 y = cross(z, x);
  Grasp g;
  g.rotation = detail::frame_to_quat(x, y, z);
  g.translation = surface_point + normalized(outward_normal) * standoff;
  return g;
}

struct CandidateDiag {
  Grasp grasp;
  int face = -1;
  Vec3 surface_point;
  double standoff = 0.0;
  double roll = 0.0;
};

inline std::vector<CandidateDiag> sample_candidates_diag(const TriMesh& m, int n,
                                                         const GripperModel& gripper, Rng& rng) {
  if (n < 1) throw std::invalid_argument("sample_candidate_grasps: n must be >= 1");
  detail::AreaTable table(m);
  std::vector<CandidateDiag> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    CandidateDiag d;
    d.face = table.pick(rng);
    d.surface_point = detail::uniform_barycentric_point(m, d.face, rng);
    d.standoff = rng.uniform(0.0, gripper.finger_length);
    d.roll = rng.uniform(0.0, 2.0 * M_PI);
    d.grasp = grasp_from_surface(d.surface_point, face_normal(m, d.face), d.standoff, d.roll);
    out.push_back(d);
  }
  return out;
}

inline std::vector<Grasp> sample_candidate_grasps(const TriMesh& m, int n,
                                                  const GripperModel& gripper, Rng& rng) {
  std::vector<Grasp> out;
  out.reserve(n);
  for (const CandidateDiag& d : sample_candidates_diag(m, n, gripper, rng)) out.push_back(d.grasp);
  return out;
}

namespace detail {

// Mesh vertices mapped into the gripper frame of g.
inline std::vector<Vec3> mesh_in_gripper_frame(const TriMesh& m, const Grasp& g) {
  const Mat3 rt = g.rotation.to_matrix().transposed();
  std::vector<Vec3> out;
  out.reserve(m.vertices.size());
  for (const Vec3& v : m.vertices) out.push_back(rt * (v - g.translation));
  return out;
}

inline bool any_triangle_hits_box(const TriMesh& m, const std::vector<Vec3>& verts,
                                  const GripperBox& box) {
  for (const auto& t : m.triangles)
    if (mesh::tri_box_overlap(box.half, verts[t[0]] - box.center, verts[t[1]] - box.center,
                              verts[t[2]] - box.center))
      return true;
  return false;
}

}  // namespace detail

// True iff the volume between the fingers meets the object: some triangle
// crosses the closing box, or the box sits wholly inside the solid.
inline bool closing_volume_test(const TriMesh& m, const Grasp& g, const GripperModel& gripper) {
  g.require_valid();
  const auto verts = detail::mesh_in_gripper_frame(m, g);
  const GripperBox box = gripper.closing_box();
  if (detail::any_triangle_hits_box(m, verts, box)) return true;
  // No surface crossing: inside-solid check via the box center in mesh frame.
  const Vec3 center_world = g.rotation.to_matrix() * box.center + g.translation;
  return mesh::point_in_mesh(m, center_world);
}

struct ContactInfo {
  bool valid = false;
  Vec3 point;    // gripper frame
  Vec3 normal;   // gripper frame, outward from the object
};

struct OracleReport {
  bool closing_volume = false;
  bool collision_free = false;
  ContactInfo upper;  // contact for the +y finger
  ContactInfo lower;  // contact for the -y finger
  bool cone_ok = false;
  bool success = false;
};

// Analytic antipodal oracle. A grasp succeeds when the closing volume meets
// the object, the gripper body does not, and closing the fingers along -y/+y
// produces first contacts whose outward normals lie inside the friction cone
// around the respective closing direction.
inline OracleReport oracle_report(const TriMesh& m, const Grasp& g, const GripperModel& gripper,
                                  double friction = 0.5) {
  OracleReport rep;
  g.require_valid();
  rep.closing_volume = closing_volume_test(m, g, gripper);
  if (!rep.closing_volume) return rep;

  const auto verts = detail::mesh_in_gripper_frame(m, g);
  for (const GripperBox& box : gripper.collision_boxes())
    if (detail::any_triangle_hits_box(m, verts, box)) return rep;
  // Gripper fully swallowed by the solid also counts as collision.
  {
    const GripperBox palm = gripper.collision_boxes()[2];
    const Vec3 palm_world = g.rotation.to_matrix() * palm.center + g.translation;
    if (mesh::point_in_mesh(m, palm_world)) return rep;
  }
  rep.collision_free = true;

  // First contacts: clip every face to the closing prism and track the
  // extreme y on each side. Where several faces meet the finger at the same
  // depth (a box rim puts a perpendicular face's edge at the exact extreme),
  // the finger pad rests on the face whose normal points back at it, so ties
  // within kContactTie prefer the better-aligned normal. That choice is also
  // stable under rigid motion, unlike face index order.
  constexpr double kContactTie = 1e-9;
  const GripperBox box = gripper.closing_box();
  const Mat3 rt = g.rotation.to_matrix().transposed();
  double best_hi = -std::numeric_limits<double>::infinity();
  double best_lo = std::numeric_limits<double>::infinity();
  for (size_t f = 0; f < m.triangles.size(); ++f) {
    const auto& t = m.triangles[f];
    std::vector<Vec3> poly{verts[t[0]], verts[t[1]], verts[t[2]]};
    poly = mesh::clip_polygon(poly, {1, 0, 0}, box.center.x + box.half.x);
    if (poly.empty()) continue;
    poly = mesh::clip_polygon(poly, {-1, 0, 0}, -(box.center.x - box.half.x));
    if (poly.empty()) continue;
    poly = mesh::clip_polygon(poly, {0, 0, 1}, box.center.z + box.half.z);
    if (poly.empty()) continue;
    poly = mesh::clip_polygon(poly, {0, 0, -1}, -(box.center.z - box.half.z));
    if (poly.empty()) continue;
    poly = mesh::clip_polygon(poly, {0, 1, 0}, box.center.y + box.half.y);
    if (poly.empty()) continue;
    poly = mesh::clip_polygon(poly, {0, -1, 0}, -(box.center.y - box.half.y));
    if (poly.empty()) continue;

    const Vec3 n = rt * face_normal(m, static_cast<int>(f));
    for (const Vec3& p : poly) {
      if (p.y > best_hi + kContactTie) {
        best_hi = p.y;
        rep.upper = {true, p, n};
      } else if (p.y > best_hi - kContactTie && n.y > rep.upper.normal.y) {
        best_hi = std::max(best_hi, p.y);
        rep.upper = {true, p, n};
      }
      if (p.y < best_lo - kContactTie) {
        best_lo = p.y;
        rep.lower = {true, p, n};
      } else if (p.y < best_lo + kContactTie && n.y < rep.lower.normal.y) {
        best_lo = std::min(best_lo, p.y);
        rep.lower = {true, p, n};
      }
    }
  }
  if (!rep.upper.valid || !rep.lower.valid) return rep;

  const double cos_cone = 1.0 / std::sqrt(1.0 + friction * friction);
  rep.cone_ok = rep.upper.normal.y >= cos_cone && -rep.lower.normal.y >= cos_cone;
  rep.success = rep.cone_ok;
  return rep;
}

inline bool oracle_label(const TriMesh& m, const Grasp& g, const GripperModel& gripper,
                         double friction = 0.5) {
  return oracle_report(m, g, gripper, friction).success;
}

// The dataset keep-filter: the closing volume meets the object and the open
// gripper stays collision free. Labels are then decided by the cone test.
inline bool candidate_filter(const TriMesh& m, const Grasp& g, const GripperModel& gripper) {
  const OracleReport rep = oracle_report(m, g, gripper);
  return rep.closing_volume && rep.collision_free;
}

// ---- partial-view rendering ----

struct CameraPose {
  Quat rotation;     // camera-to-world; camera looks along its +z
  Vec3 position;
};

// Camera at pos looking at the origin, roll pinned by the world up axis.
inline CameraPose look_at_origin(const Vec3& pos) {
  const Vec3 z = normalized(-pos);
  Vec3 up{0, 0, 1};
  if (std::fabs(dot(up, z)) > 0.999) up = {0, 1, 0};
  const Vec3 x = normalized(cross(up, z));
  const Vec3 y = cross(z, x);
  return {detail::frame_to_quat(x, y, z), pos};
}

// Uniform-area direction on the upper hemisphere, radius 0.5 m.
inline CameraPose sample_camera(Rng& rng, double radius = 0.5) {
  const double z = rng.uniform01();
  const double r = std::sqrt(std::fmax(0.0, 1.0 - z * z));
  const double phi = rng.uniform(0.0, 2.0 * M_PI);
  return look_at_origin(Vec3{r * std::cos(phi), r * std::sin(phi), z} * radius);
}

struct RenderResult {
  PointFeatureCloud cloud;   // re-centered to its own centroid
  Vec3 centroid_world;       // offset removed during re-centering
  int ray_hits = 0;
};

// Z-buffer ray cast over a square 60 degree field of view, Gaussian depth
// noise (sigma 1 mm) along each ray, re-centering, and FPS downsampling.
inline std::optional<RenderResult> render_partial_cloud(const TriMesh& m, const CameraPose& cam,
                                                        Rng& rng, int resolution = 128,
                                                        int max_points = 256,
                                                        double noise_sigma = 0.001) {
  if (norm(cam.position) <= mesh::bounding_radius(m))
    throw std::invalid_argument("render_partial_cloud: camera inside bounding sphere");
  const Mat3 r = cam.rotation.to_matrix();
  const double half_tan = std::tan(M_PI / 6.0);  // 60 degree full FOV
  std::vector<Vec3> hits;
  for (int j = 0; j < resolution; ++j) {
    for (int i = 0; i < resolution; ++i) {
      const double u = (2.0 * (i + 0.5) / resolution - 1.0) * half_tan;
      const double v = (2.0 * (j + 0.5) / resolution - 1.0) * half_tan;
      const Vec3 dir = r * normalized(Vec3{u, v, 1.0});
      mesh::RayHit hit;
      if (!ray_mesh_nearest(m, cam.position, dir, hit)) continue;
      const double t = hit.t + rng.normal(0.0, noise_sigma);
      hits.push_back(cam.position + dir * t);
    }
  }
  if (hits.empty()) return std::nullopt;

  RenderResult out;
  out.ray_hits = static_cast<int>(hits.size());
  out.centroid_world = cloud::centroid(hits);
  for (Vec3& p : hits) p -= out.centroid_world;
  const std::vector<int> keep = cloud::fps_select(hits, max_points);
  out.cloud.coordinates.reserve(keep.size());
  for (int idx : keep) out.cloud.coordinates.push_back(hits[idx]);
  // Re-center exactly after downsampling so the frame contract holds.
  const Vec3 c2 = cloud::centroid(out.cloud.coordinates);
  for (Vec3& p : out.cloud.coordinates) p -= c2;
  out.centroid_world += c2;
  return out;
}

// ---- Darboux-frame baseline sampler ----

// Classic geometric baseline: local PCA normal plus the in-plane direction
// of largest spread as the curvature axis.
inline std::vector<Grasp> darboux_baseline_sampler(const PointFeatureCloud& x, int n,
                                                   const GripperModel& gripper, Rng& rng) {
  if (x.size() < 16) throw std::invalid_argument("darboux_baseline_sampler: need >= 16 points");

  // Unoriented surface normal at idx from the position covariance of its own
  // 8-NN patch; nullopt when the patch does not span a tangent plane.
  auto patch_normal = [&x](int idx) -> std::optional<Vec3> {
    std::vector<Vec3> patch{x.coordinates[idx]};
    for (int i : cloud::knn(x.coordinates, idx, 8)) patch.push_back(x.coordinates[i]);
    const Vec3 mean = cloud::centroid(patch);
    Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
    for (const Vec3& p : patch) {
      const Vec3 d = p - mean;
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) cov(a, b) += d[a] * d[b];
    }
    cov /= static_cast<double>(patch.size());
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(cov);
    const auto& evals = es.eigenvalues();  // ascending
    if (evals(1) < 1e-12 * std::fmax(evals(2), 1e-300)) return std::nullopt;  // rank < 2
    return Vec3{es.eigenvectors()(0, 0), es.eigenvectors()(1, 0), es.eigenvectors()(2, 0)};
  };

  std::vector<Grasp> out;
  int attempts = 0;
  const int max_attempts = 200 * std::max(1, n);
  while (static_cast<int>(out.size()) < n) {
    if (++attempts > max_attempts)
      throw std::runtime_error("darboux_baseline_sampler: too many degenerate neighborhoods");
    const int pick = static_cast<int>(rng.uniform_index(x.size()));

    // Darboux frame from the normal covariance of the pick's neighborhood:
    // the dominant eigenvector is the consensus normal, and the weakest one
    // points where normals vary least, i.e. the minimum-curvature axis the
    // fingers should straddle. nn^T ignores normal signs, so the per-patch
    // normals need no consistent orientation.
    std::vector<int> members{pick};
    for (int i : cloud::knn(x.coordinates, pick, 8)) members.push_back(i);
    Eigen::Matrix3d nn = Eigen::Matrix3d::Zero();
    int valid = 0;
    for (int idx : members) {
      const auto nq = patch_normal(idx);
      if (!nq) continue;
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) nn(a, b) += (*nq)[a] * (*nq)[b];
      ++valid;
    }
    if (valid < 6) continue;
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(nn);
    Vec3 normal{es.eigenvectors()(0, 2), es.eigenvectors()(1, 2), es.eigenvectors()(2, 2)};
    // The cloud is centered on its centroid; orient away from the origin.
    if (dot(normal, x.coordinates[pick]) < 0.0) normal = -normal;
    const Vec3 curve_dir{es.eigenvectors()(0, 0), es.eigenvectors()(1, 0), es.eigenvectors()(2, 0)};

    const Vec3 z = -normalized(normal);
    Vec3 xaxis = curve_dir - z * dot(curve_dir, z);
    if (norm(xaxis) < 1e-9) continue;
    xaxis = normalized(xaxis);
    const Vec3 yaxis = cross(z, xaxis);
    Grasp g;
    g.rotation = detail::frame_to_quat(xaxis, yaxis, z);
    g.translation = x.coordinates[pick] + normalized(normal) * (gripper.finger_length / 2.0);
    out.push_back(g);
  }
  return out;
}

}  // namespace graspgen::scene
