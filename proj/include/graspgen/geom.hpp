#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace graspgen::geom {

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  double& operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }
  double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  Vec3 operator-() const { return {-x, -y, -z}; }
  Vec3& operator+=(const Vec3& o) { x += o.x; y += o.y; z += o.z; return *this; }
  Vec3& operator-=(const Vec3& o) { x -= o.x; y -= o.y; z -= o.z; return *this; }
  Vec3& operator*=(double s) { x *= s; y *= s; z *= s; return *this; }
};

inline double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
inline double norm1(const Vec3& a) { return std::fabs(a.x) + std::fabs(a.y) + std::fabs(a.z); }
inline Vec3 normalized(const Vec3& a) {
  const double n = norm(a);
  if (n == 0.0) throw std::invalid_argument("normalized: zero vector");
  return a * (1.0 / n);
}
inline bool finite(const Vec3& a) {
  return std::isfinite(a.x) && std::isfinite(a.y) && std::isfinite(a.z);
}

// Row-major 3x3 matrix.
struct Mat3 {
  std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

  double& operator()(int r, int c) { return m[3 * r + c]; }
  double operator()(int r, int c) const { return m[3 * r + c]; }

  Vec3 operator*(const Vec3& v) const {
    return {m[0] * v.x + m[1] * v.y + m[2] * v.z,
            m[3] * v.x + m[4] * v.y + m[5] * v.z,
            m[6] * v.x + m[7] * v.y + m[8] * v.z};
  }
  Mat3 operator*(const Mat3& o) const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double s = 0.0;
        for (int k = 0; k < 3; ++k) s += (*this)(i, k) * o(k, j);
        r(i, j) = s;
      }
    return r;
  }
  Mat3 transposed() const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) r(i, j) = (*this)(j, i);
    return r;
  }
  Vec3 col(int c) const { return {m[c], m[3 + c], m[6 + c]}; }
};

// Unit quaternion, scalar-first.
struct Quat {
  double w = 1.0, x = 0.0, y = 0.0, z = 0.0;

  double norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }

  Quat normalized() const {
    const double n = norm();
    if (n == 0.0) throw std::invalid_argument("Quat: zero norm");
    return {w / n, x / n, y / n, z / n};
  }

  // Sign convention: w >= 0. Both signs describe the same rotation.
  Quat canonicalized() const {
    if (w < 0.0) return {-w, -x, -y, -z};
    return *this;
  }

  Quat operator*(const Quat& q) const {
    return {w * q.w - x * q.x - y * q.y - z * q.z,
            w * q.x + x * q.w + y * q.z - z * q.y,
            w * q.y - x * q.z + y * q.w + z * q.x,
            w * q.z + x * q.y - y * q.x + z * q.w};
  }

  Quat conjugate() const { return {w, -x, -y, -z}; }

  Mat3 to_matrix() const {
    Mat3 r;
    const double ww = w * w, xx = x * x, yy = y * y, zz = z * z;
    r(0, 0) = ww + xx - yy - zz;
    r(0, 1) = 2.0 * (x * y - w * z);
    r(0, 2) = 2.0 * (x * z + w * y);
    r(1, 0) = 2.0 * (x * y + w * z);
    r(1, 1) = ww - xx + yy - zz;
    r(1, 2) = 2.0 * (y * z - w * x);
    r(2, 0) = 2.0 * (x * z - w * y);
    r(2, 1) = 2.0 * (y * z + w * x);
    r(2, 2) = ww - xx - yy + zz;
    return r;
  }

  static Quat from_matrix(const Mat3& m) {
    // Shepperd's method: pick the largest diagonal pivot for stability.
    const double t = m(0, 0) + m(1, 1) + m(2, 2);
    Quat q;
    if (t > 0.0) {
      double s = std::sqrt(t + 1.0) * 2.0;
      q.w = 0.25 * s;
      q.x = (m(2, 1) - m(1, 2)) / s;
      q.y = (m(0, 2) - m(2, 0)) / s;
      q.z = (m(1, 0) - m(0, 1)) / s;
    } else if (m(0, 0) > m(1, 1) && m(0, 0) > m(2, 2)) {
      double s = std::sqrt(1.0 + m(0, 0) - m(1, 1) - m(2, 2)) * 2.0;
      q.w = (m(2, 1) - m(1, 2)) / s;
      q.x = 0.25 * s;
      q.y = (m(0, 1) + m(1, 0)) / s;
      q.z = (m(0, 2) + m(2, 0)) / s;
    } else if (m(1, 1) > m(2, 2)) {
      double s = std::sqrt(1.0 + m(1, 1) - m(0, 0) - m(2, 2)) * 2.0;
      q.w = (m(0, 2) - m(2, 0)) / s;
      q.x = (m(0, 1) + m(1, 0)) / s;
      q.y = 0.25 * s;
      q.z = (m(1, 2) + m(2, 1)) / s;
    } else {
      double s = std::sqrt(1.0 + m(2, 2) - m(0, 0) - m(1, 1)) * 2.0;
      q.w = (m(1, 0) - m(0, 1)) / s;
      q.x = (m(0, 2) + m(2, 0)) / s;
      q.y = (m(1, 2) + m(2, 1)) / s;
      q.z = 0.25 * s;
    }
    return q.normalized().canonicalized();
  }

  static Quat axis_angle(const Vec3& axis, double angle) {
    const Vec3 u = ::graspgen::geom::normalized(axis);
    const double h = 0.5 * angle;
    const double s = std::sin(h);
    return {std::cos(h), u.x * s, u.y * s, u.z * s};
  }

  Vec3 rotate(const Vec3& v) const {
    // q v q* expanded via the cross-product form.
    const Vec3 u{x, y, z};
    const Vec3 c = cross(u, v);
    const Vec3 cc = cross(u, c);
    return v + (c * w + cc) * 2.0;
  }
};

// Rigid gripper pose in the object centroid frame.
struct Grasp {
  Quat rotation;
  Vec3 translation;

  static constexpr double kUnitNormTol = 1e-6;
  static constexpr double kMaxTranslation = 10.0;

  bool valid() const {
    return std::fabs(rotation.norm() - 1.0) <= kUnitNormTol && finite(translation) &&
           norm(translation) < kMaxTranslation;
  }

  void require_valid() const {
    if (std::fabs(rotation.norm() - 1.0) > kUnitNormTol)
      throw std::invalid_argument("Grasp: quaternion is not unit norm");
    if (!finite(translation) || norm(translation) >= kMaxTranslation)
      throw std::invalid_argument("Grasp: translation not finite or out of range");
  }

  static Grasp identity() { return {}; }
};

// Frame of the observed cloud: origin at its centroid, axes equal to the camera's.
struct ObjectFrame {
  Vec3 centroid;
};

// Fixed points on the gripper used by the pose reconstruction metric.
struct ControlPointSet {
  std::vector<Vec3> points;

  void require_valid() const {
    if (points.size() < 4) throw std::invalid_argument("ControlPointSet: need K >= 4 points");
  }
};

// Intrinsic X-Y-Z Euler parametrization (roll, pitch, yaw) plus translation.
struct EulerPose {
  double alpha = 0.0, beta = 0.0, gamma = 0.0;
  Vec3 t;
};

inline Mat3 rot_x(double a) {
  Mat3 m;
  const double c = std::cos(a), s = std::sin(a);
  m(1, 1) = c; m(1, 2) = -s;
  m(2, 1) = s; m(2, 2) = c;
  return m;
}
inline Mat3 rot_y(double a) {
  Mat3 m;
  const double c = std::cos(a), s = std::sin(a);
  m(0, 0) = c; m(0, 2) = s;
  m(2, 0) = -s; m(2, 2) = c;
  return m;
}
inline Mat3 rot_z(double a) {
  Mat3 m;
  const double c = std::cos(a), s = std::sin(a);
  m(0, 0) = c; m(0, 1) = -s;
  m(1, 0) = s; m(1, 1) = c;
  return m;
}

inline Mat3 euler_to_matrix(double alpha, double beta, double gamma) {
  return rot_x(alpha) * rot_y(beta) * rot_z(gamma);
}

inline Grasp to_grasp(const EulerPose& e) {
  Grasp g;
  g.rotation = Quat::from_matrix(euler_to_matrix(e.alpha, e.beta, e.gamma));
  g.translation = e.t;
  return g;
}

inline EulerPose from_grasp(const Grasp& g) {
  // R = Rx(a) Ry(b) Rz(c); extract with the standard atan2 recipe.
  const Mat3 m = g.rotation.to_matrix();
  EulerPose e;
  e.t = g.translation;
  const double sb = std::fmin(1.0, std::fmax(-1.0, m(0, 2)));
  e.beta = std::asin(sb);
  if (std::fabs(sb) < 1.0 - 1e-12) {
    e.alpha = std::atan2(-m(1, 2), m(2, 2));
    e.gamma = std::atan2(-m(0, 1), m(0, 0));
  } else {
    // Gimbal lock: fold the free rotation into alpha.
    e.alpha = std::atan2(m(2, 1), m(1, 1));
    e.gamma = 0.0;
  }
  return e;
}

// T(g; p): transformed control points R p + T.
inline std::vector<Vec3> transform_points(const Grasp& g, const std::vector<Vec3>& points) {
  g.require_valid();
  const Mat3 r = g.rotation.to_matrix();
  std::vector<Vec3> out;
  out.reserve(points.size());
  for (const Vec3& p : points) out.push_back(r * p + g.translation);
  return out;
}

// Mean L1 distance between the two poses' transformed control points.
inline double recon_distance(const Grasp& g1, const Grasp& g2, const ControlPointSet& cp) {
  cp.require_valid();
  g1.require_valid();
  g2.require_valid();
  const Mat3 r1 = g1.rotation.to_matrix();
  const Mat3 r2 = g2.rotation.to_matrix();
  double sum = 0.0;
  for (const Vec3& p : cp.points) sum += norm1((r1 * p + g1.translation) - (r2 * p + g2.translation));
  return sum / static_cast<double>(cp.points.size());
}

// 3x6 Jacobian block per control point: d(R(a,b,c) p + t) / d(a,b,c,tx,ty,tz).
// Stored row-major, rows = output coordinate, cols = pose parameter.
using JacobianBlock = std::array<double, 18>;

inline std::vector<JacobianBlock> pose_jacobian(const EulerPose& e,
                                                const ControlPointSet& cp) {
  cp.require_valid();
  const Mat3 rx = rot_x(e.alpha), ry = rot_y(e.beta), rz = rot_z(e.gamma);

  auto drot = [](double a, int which) {
    Mat3 m;
    const double c = std::cos(a), s = std::sin(a);
    m.m.fill(0.0);
    if (which == 0) {        // dRx/da
      m(1, 1) = -s; m(1, 2) = -c;
      m(2, 1) = c;  m(2, 2) = -s;
    } else if (which == 1) { // dRy/db
      m(0, 0) = -s; m(0, 2) = c;
      m(2, 0) = -c; m(2, 2) = -s;
    } else {                 // dRz/dc
      m(0, 0) = -s; m(0, 1) = -c;
      m(1, 0) = c;  m(1, 1) = -s;
    }
    return m;
  };

  const Mat3 da = drot(e.alpha, 0) * ry * rz;
  const Mat3 db = rx * drot(e.beta, 1) * rz;
  const Mat3 dc = rx * ry * drot(e.gamma, 2);

  std::vector<JacobianBlock> out;
  out.reserve(cp.points.size());
  for (const Vec3& p : cp.points) {
    const Vec3 ca = da * p, cb = db * p, cc = dc * p;
    JacobianBlock j{};
    for (int r = 0; r < 3; ++r) {
      j[6 * r + 0] = ca[r];
      j[6 * r + 1] = cb[r];
      j[6 * r + 2] = cc[r];
      j[6 * r + 3] = (r == 0) ? 1.0 : 0.0;
      j[6 * r + 4] = (r == 1) ? 1.0 : 0.0;
      j[6 * r + 5] = (r == 2) ? 1.0 : 0.0;
    }
    out.push_back(j);
  }
  return out;
}

// --- Serialization: 7 numbers in order (qw,qx,qy,qz,tx,ty,tz). ---

inline std::array<double, 7> grasp_to_values(const Grasp& g) {
  return {g.rotation.w, g.rotation.x, g.rotation.y, g.rotation.z,
          g.translation.x, g.translation.y, g.translation.z};
}

inline Grasp grasp_from_values(const std::array<double, 7>& v) {
  Grasp g;
  g.rotation = {v[0], v[1], v[2], v[3]};
  g.translation = {v[4], v[5], v[6]};
  return g;
}

// Little-endian 64-bit float records.
inline void write_grasp_binary(std::ostream& os, const Grasp& g) {
  static_assert(sizeof(double) == 8);
  const auto v = grasp_to_values(g);
  os.write(reinterpret_cast<const char*>(v.data()), 7 * sizeof(double));
}

inline Grasp read_grasp_binary(std::istream& is) {
  std::array<double, 7> v{};
  is.read(reinterpret_cast<char*>(v.data()), 7 * sizeof(double));
  if (!is) throw std::runtime_error("read_grasp_binary: truncated stream");
  return grasp_from_values(v);
}

// Shortest-round-trip decimal text, comma separated.
inline std::string grasp_to_csv(const Grasp& g) {
  const auto v = grasp_to_values(g);
  char buf[512];
  std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g",
                v[0], v[1], v[2], v[3], v[4], v[5], v[6]);
  return buf;
}

inline Grasp grasp_from_csv(const std::string& line) {
  std::array<double, 7> v{};
  const char* p = line.c_str();
  char* end = nullptr;
  for (int i = 0; i < 7; ++i) {
    v[i] = std::strtod(p, &end);
    if (end == p) throw std::runtime_error("grasp_from_csv: expected 7 numbers");
    p = end;
    while (*p == ',' || *p == ' ') ++p;
  }
  return grasp_from_values(v);
}

}  // namespace graspgen::geom
