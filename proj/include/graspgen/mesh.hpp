#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "graspgen/geom.hpp"
#include "graspgen/rng.hpp"

namespace graspgen::mesh {

using geom::Vec3;

struct TriMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> triangles;
  std::string provenance;

  const Vec3& v(int tri, int corner) const { return vertices[triangles[tri][corner]]; }
};

inline Vec3 face_normal(const TriMesh& m, int tri) {
  const Vec3 e1 = m.v(tri, 1) - m.v(tri, 0);
  const Vec3 e2 = m.v(tri, 2) - m.v(tri, 0);
  return normalized(cross(e1, e2));
}

inline double face_area(const TriMesh& m, int tri) {
  const Vec3 e1 = m.v(tri, 1) - m.v(tri, 0);
  const Vec3 e2 = m.v(tri, 2) - m.v(tri, 0);
  return 0.5 * norm(cross(e1, e2));
}

inline double surface_area(const TriMesh& m) {
  double a = 0.0;
  for (size_t i = 0; i < m.triangles.size(); ++i) a += face_area(m, static_cast<int>(i));
  return a;
}

// Signed volume by the divergence theorem; positive for outward winding.
inline double signed_volume(const TriMesh& m) {
  double v = 0.0;
  for (const auto& t : m.triangles)
    v += dot(m.vertices[t[0]], cross(m.vertices[t[1]], m.vertices[t[2]])) / 6.0;
  return v;
}

inline Vec3 volume_centroid(const TriMesh& m) {
  double v = 0.0;
  Vec3 c{0, 0, 0};
  for (const auto& t : m.triangles) {
    const Vec3 &a = m.vertices[t[0]], &b = m.vertices[t[1]], &d = m.vertices[t[2]];
    const double w = dot(a, cross(b, d)) / 6.0;
    v += w;
    c += (a + b + d) * (w / 4.0);
  }
  if (std::fabs(v) < 1e-15) throw std::runtime_error("volume_centroid: degenerate mesh");
  return c * (1.0 / v);
}

inline double bounding_radius(const TriMesh& m) {
  double r = 0.0;
  for (const Vec3& p : m.vertices) r = std::fmax(r, norm(p));
  return r;
}

// ---- predicates ----

// Watertight triangle vs. origin-centered axis-aligned box, separating axis
// test. Touching contact counts as overlap (separation must be strict).
inline bool tri_box_overlap(const Vec3& half, const Vec3& a, const Vec3& b, const Vec3& c) {
  for (int i = 0; i < 3; ++i) {
    const double lo = std::fmin(a[i], std::fmin(b[i], c[i]));
    const double hi = std::fmax(a[i], std::fmax(b[i], c[i]));
    if (lo > half[i] || hi < -half[i]) return false;
  }
  const Vec3 n = cross(b - a, c - a);
  const double d = dot(n, a);
  const double r = half.x * std::fabs(n.x) + half.y * std::fabs(n.y) + half.z * std::fabs(n.z);
  if (d > r || d < -r) return false;

  const Vec3 f[3] = {b - a, c - b, a - c};
  const Vec3 verts[3] = {a, b, c};
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      Vec3 axis{0, 0, 0};
      // e_i x f_j for the unit axes e_i.
      if (i == 0) axis = {0.0, -f[j].z, f[j].y};
      else if (i == 1) axis = {f[j].z, 0.0, -f[j].x};
      else axis = {-f[j].y, f[j].x, 0.0};
      const double rad = half.x * std::fabs(axis.x) + half.y * std::fabs(axis.y) +
                         half.z * std::fabs(axis.z);
      double lo = dot(axis, verts[0]), hi = lo;
      for (int k = 1; k < 3; ++k) {
        const double p = dot(axis, verts[k]);
        lo = std::fmin(lo, p);
        hi = std::fmax(hi, p);
      }
      if (lo > rad || hi < -rad) return false;
    }
  }
  return true;
}

struct RayHit {
  double t = 0.0;
  int face = -1;
};

inline bool ray_triangle(const Vec3& o, const Vec3& d, const Vec3& v0, const Vec3& v1,
                         const Vec3& v2, double& t_out) {
  const Vec3 e1 = v1 - v0, e2 = v2 - v0;
  const Vec3 p = cross(d, e2);
  const double det = dot(e1, p);
  if (std::fabs(det) < 1e-14) return false;
  const double inv = 1.0 / det;
  const Vec3 s = o - v0;
  const double u = dot(s, p) * inv;
  if (u < -1e-12 || u > 1.0 + 1e-12) return false;
  const Vec3 q = cross(s, e1);
  const double v = dot(d, q) * inv;
  if (v < -1e-12 || u + v > 1.0 + 1e-12) return false;
  const double t = dot(e2, q) * inv;
  if (t <= 1e-9) return false;
  t_out = t;
  return true;
}

inline bool ray_mesh_nearest(const TriMesh& m, const Vec3& o, const Vec3& d, RayHit& hit) {
  hit = {};
  hit.t = std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < m.triangles.size(); ++i) {
    double t;
    if (ray_triangle(o, d, m.v(static_cast<int>(i), 0), m.v(static_cast<int>(i), 1),
                     m.v(static_cast<int>(i), 2), t) &&
        t < hit.t) {
      hit.t = t;
      hit.face = static_cast<int>(i);
    }
  }
  return hit.face >= 0;
}

// Crossing-parity containment with a fixed skew ray direction that dodges
// the axis-aligned edges of procedural meshes.
inline bool point_in_mesh(const TriMesh& m, const Vec3& p) {
  const Vec3 d{0.57735026918962576, 0.53452248382484879, 0.61721339984836604};
  int crossings = 0;
  for (size_t i = 0; i < m.triangles.size(); ++i) {
    double t;
    if (ray_triangle(p, d, m.v(static_cast<int>(i), 0), m.v(static_cast<int>(i), 1),
                     m.v(static_cast<int>(i), 2), t))
      ++crossings;
  }
  return (crossings % 2) == 1;
}

// Sutherland-Hodgman against the half-space dot(x, n) <= d.
inline std::vector<Vec3> clip_polygon(const std::vector<Vec3>& poly, const Vec3& n, double d) {
  std::vector<Vec3> out;
  const size_t k = poly.size();
  for (size_t i = 0; i < k; ++i) {
    const Vec3& a = poly[i];
    const Vec3& b = poly[(i + 1) % k];
    const double da = dot(a, n) - d;
    const double db = dot(b, n) - d;
    const bool ina = da <= 0.0, inb = db <= 0.0;
    if (ina) out.push_back(a);
    if (ina != inb) {
      const double s = da / (da - db);
      out.push_back(a + (b - a) * s);
    }
  }
  return out;
}

// ---- primitive generators ----

namespace detail {

inline void require_range(const char* what, double v, double lo, double hi) {
  if (!(v >= lo && v <= hi))
    throw std::invalid_argument(std::string(what) + " out of range [" + std::to_string(lo) + "," +
                                std::to_string(hi) + "]");
}

inline void orient_outward(TriMesh& m) {
  if (signed_volume(m) < 0.0)
    for (auto& t : m.triangles) std::swap(t[1], t[2]);
}

inline void center_on_centroid(TriMesh& m) {
  const Vec3 c = volume_centroid(m);
  for (Vec3& v : m.vertices) v -= c;
}

// Revolves an (r, z) profile around z. First and last profile points must
// sit on the axis (r = 0); interior points must not.
inline TriMesh lathe(const std::vector<std::array<double, 2>>& profile, int segments) {
  const int np = static_cast<int>(profile.size());
  if (np < 3 || profile.front()[0] != 0.0 || profile.back()[0] != 0.0)
    throw std::invalid_argument("lathe: profile must start and end on the axis");
  TriMesh m;
  m.vertices.push_back({0, 0, profile.front()[1]});
  std::vector<int> ring_start(np, -1);
  for (int i = 1; i + 1 < np; ++i) {
    if (profile[i][0] <= 0.0) throw std::invalid_argument("lathe: interior point on axis");
    ring_start[i] = static_cast<int>(m.vertices.size());
    for (int s = 0; s < segments; ++s) {
      const double a = 2.0 * M_PI * s / segments;
      m.vertices.push_back({profile[i][0] * std::cos(a), profile[i][0] * std::sin(a),
                            profile[i][1]});
    }
  }
  const int last = static_cast<int>(m.vertices.size());
  m.vertices.push_back({0, 0, profile.back()[1]});

  auto ring = [&](int i, int s) { return ring_start[i] + (s % segments); };
  for (int s = 0; s < segments; ++s)
    m.triangles.push_back({0, ring(1, s), ring(1, s + 1)});
  for (int i = 1; i + 2 < np; ++i)
    for (int s = 0; s < segments; ++s) {
      m.triangles.push_back({ring(i, s), ring(i + 1, s), ring(i + 1, s + 1)});
      m.triangles.push_back({ring(i, s), ring(i + 1, s + 1), ring(i, s + 1)});
    }
  for (int s = 0; s < segments; ++s)
    m.triangles.push_back({last, ring(np - 2, s + 1), ring(np - 2, s)});

  orient_outward(m);
  return m;
}

}  // namespace detail

inline TriMesh make_box(double ex, double ey, double ez) {
  detail::require_range("box extent", ex, 0.04, 0.12);
  detail::require_range("box extent", ey, 0.04, 0.12);
  detail::require_range("box extent", ez, 0.04, 0.12);
  TriMesh m;
  const double hx = ex / 2.0, hy = ey / 2.0, hz = ez / 2.0;
  for (int i = 0; i < 8; ++i)
    m.vertices.push_back({(i & 1) ? hx : -hx, (i & 2) ? hy : -hy, (i & 4) ? hz : -hz});
  m.triangles = {{0, 2, 3}, {0, 3, 1}, {4, 5, 7}, {4, 7, 6}, {0, 1, 5}, {0, 5, 4},
                 {2, 6, 7}, {2, 7, 3}, {0, 4, 6}, {0, 6, 2}, {1, 3, 7}, {1, 7, 5}};
  detail::orient_outward(m);
  m.provenance = "box";
  return m;
}

inline TriMesh make_cylinder(double radius, double height, int segments = 64) {
  detail::require_range("cylinder radius", radius, 0.02, 0.05);
  detail::require_range("cylinder height", height, 0.06, 0.16);
  TriMesh m = detail::lathe(
      {{0.0, -height / 2.0}, {radius, -height / 2.0}, {radius, height / 2.0}, {0.0, height / 2.0}},
      segments);
  m.provenance = "cylinder";
  return m;
}

// Spherical shell section: outer arc of radius R up to the rim, a flat
// annular lip, and a concentric inner arc back to the axis.
inline TriMesh make_bowl(double outer_radius, double rim_frac = 0.3, double thickness = 0.01,
                         int segments = 48, int arc_steps = 12) {
  detail::require_range("bowl outer radius", outer_radius, 0.05, 0.09);
  detail::require_range("bowl rim fraction", rim_frac, 0.1, 0.5);
  const double ri = outer_radius - thickness;
  const double z_rim = outer_radius * rim_frac;
  if (z_rim >= ri) throw std::invalid_argument("bowl: rim higher than inner radius allows");
  std::vector<std::array<double, 2>> profile;
  const double t_out = std::asin(rim_frac);
  for (int i = 0; i <= arc_steps; ++i) {
    const double t = -M_PI / 2.0 + (t_out + M_PI / 2.0) * i / arc_steps;
    profile.push_back({outer_radius * std::cos(t), outer_radius * std::sin(t)});
  }
  const double t_in = std::asin(z_rim / ri);
  for (int i = 0; i <= arc_steps; ++i) {
    const double t = t_in - (t_in + M_PI / 2.0) * i / arc_steps;
    profile.push_back({ri * std::cos(t), ri * std::sin(t)});
  }
  // Endpoints land on the axis exactly.
  profile.front() = {0.0, -outer_radius};
  profile.back() = {0.0, -ri};
  TriMesh m = detail::lathe(profile, segments);
  detail::center_on_centroid(m);
  m.provenance = "bowl";
  return m;
}

enum class PrimitiveKind { box, cylinder, bowl };

inline const char* kind_name(PrimitiveKind k) {
  switch (k) {
    case PrimitiveKind::box: return "box";
    case PrimitiveKind::cylinder: return "cylinder";
    default: return "bowl";
  }
}

// Draws shape parameters uniformly from the supported ranges.
// Random instances are drawn from the graspable end of each legal parameter
// range: an 8 cm opening cannot span a 12 cm box, and a set dominated by
// unreachable bodies starves every downstream consumer of positive labels.
inline TriMesh make_primitive(PrimitiveKind kind, Rng& rng) {
  TriMesh m;
  switch (kind) {
    case PrimitiveKind::box:
      m = make_box(rng.uniform(0.04, 0.09), rng.uniform(0.04, 0.09), rng.uniform(0.04, 0.09));
      break;
    case PrimitiveKind::cylinder:
      m = make_cylinder(rng.uniform(0.02, 0.035), rng.uniform(0.06, 0.12));
      break;
    case PrimitiveKind::bowl:
      m = make_bowl(rng.uniform(0.05, 0.065), rng.uniform(0.15, 0.45));
      break;
  }
  m.provenance = std::string(kind_name(kind)) + ":" + std::to_string(rng.seed());
  return m;
}

// ---- ASCII STL io ----

inline void write_stl(std::ostream& os, const TriMesh& m) {
  char buf[256];
  os << "solid " << (m.provenance.empty() ? "mesh" : m.provenance) << "\n";
  for (size_t i = 0; i < m.triangles.size(); ++i) {
    const Vec3 n = face_normal(m, static_cast<int>(i));
    std::snprintf(buf, sizeof(buf), "facet normal %.17g %.17g %.17g\n", n.x, n.y, n.z);
    os << buf << "outer loop\n";
    for (int c = 0; c < 3; ++c) {
      const Vec3& v = m.v(static_cast<int>(i), c);
      std::snprintf(buf, sizeof(buf), "vertex %.17g %.17g %.17g\n", v.x, v.y, v.z);
      os << buf;
    }
    os << "endloop\nendfacet\n";
  }
  os << "endsolid\n";
}

inline void save_stl(const std::string& path, const TriMesh& m) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("save_stl: cannot open " + path);
  write_stl(os, m);
  if (!os) throw std::runtime_error("save_stl: write failed for " + path);
}

// Triangle-soup read: vertices are not re-indexed, so write(read(x))
// reproduces x byte for byte.
inline TriMesh read_stl(std::istream& is) {
  TriMesh m;
  std::string tok;
  if (!(is >> tok) || tok != "solid") throw std::runtime_error("read_stl: not an ascii solid");
  std::string line;
  std::getline(is, line);
  while (!line.empty() && (line.front() == ' ')) line.erase(line.begin());
  m.provenance = line;
  while (is >> tok) {
    if (tok == "endsolid") break;
    if (tok == "vertex") {
      Vec3 v;
      if (!(is >> v.x >> v.y >> v.z)) throw std::runtime_error("read_stl: bad vertex");
      m.vertices.push_back(v);
    }
  }
  if (m.vertices.size() % 3 != 0) throw std::runtime_error("read_stl: vertex count not triple");
  for (int i = 0; i < static_cast<int>(m.vertices.size()); i += 3)
    m.triangles.push_back({i, i + 1, i + 2});
  return m;
}

inline TriMesh load_stl(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("load_stl: cannot open " + path);
  return read_stl(is);
}

}  // namespace graspgen::mesh
