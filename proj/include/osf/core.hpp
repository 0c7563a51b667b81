#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace osf {

inline constexpr double kPi = 3.14159265358979323846;

// ---------------------------------------------------------------------------
// Small 3D math
// ---------------------------------------------------------------------------

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  Vec3() = default;
  Vec3(double x_, double y_, double z_) : x(x_), y(y_), z(z_) {}

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }
  Vec3& operator+=(const Vec3& o) { x += o.x; y += o.y; z += o.z; return *this; }
  Vec3 operator-() const { return {-x, -y, -z}; }

  double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
};

inline Vec3 operator*(double s, const Vec3& v) { return v * s; }

inline double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
inline double norm(const Vec3& v) { return std::sqrt(dot(v, v)); }
inline Vec3 normalized(const Vec3& v) {
  const double n = norm(v);
  if (n <= 0.0) throw std::invalid_argument("cannot normalize zero vector");
  return v / n;
}
inline Vec3 cwise_min(const Vec3& a, const Vec3& b) {
  return {std::min(a.x, b.x), std::min(a.y, b.y), std::min(a.z, b.z)};
}
inline Vec3 cwise_max(const Vec3& a, const Vec3& b) {
  return {std::max(a.x, b.x), std::max(a.y, b.y), std::max(a.z, b.z)};
}

// Unit quaternion, (w, x, y, z).
struct Quat {
  double w = 1.0, x = 0.0, y = 0.0, z = 0.0;

  double norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }

  Quat normalized() const {
    const double n = norm();
    if (n <= 0.0) throw std::invalid_argument("cannot normalize zero quaternion");
    return {w / n, x / n, y / n, z / n};
  }

  Vec3 rotate(const Vec3& v) const {
    // q v q*, expanded.
    const Vec3 u{x, y, z};
    const Vec3 t = 2.0 * cross(u, v);
    return v + w * t + cross(u, t);
  }
};

inline double quat_dot(const Quat& a, const Quat& b) {
  return a.w * b.w + a.x * b.x + a.y * b.y + a.z * b.z;
}

// Relative rotation angle in [0, pi].
inline double quat_angle(const Quat& a, const Quat& b) {
  const double d = std::clamp(std::abs(quat_dot(a, b)), 0.0, 1.0);
  return 2.0 * std::acos(d);
}

// Quaternion from an orthonormal basis given as matrix columns (Shepperd).
inline Quat quat_from_columns(const Vec3& c0, const Vec3& c1, const Vec3& c2) {
  const double m00 = c0.x, m01 = c1.x, m02 = c2.x;
  const double m10 = c0.y, m11 = c1.y, m12 = c2.y;
  const double m20 = c0.z, m21 = c1.z, m22 = c2.z;
  const double tr = m00 + m11 + m22;
  Quat q;
  if (tr > 0.0) {
    double s = std::sqrt(tr + 1.0) * 2.0;
    q.w = 0.25 * s;
    q.x = (m21 - m12) / s;
    q.y = (m02 - m20) / s;
    q.z = (m10 - m01) / s;
  } else if (m00 > m11 && m00 > m22) {
    double s = std::sqrt(1.0 + m00 - m11 - m22) * 2.0;
    q.w = (m21 - m12) / s;
    q.x = 0.25 * s;
    q.y = (m01 + m10) / s;
    q.z = (m02 + m20) / s;
  } else if (m11 > m22) {
    double s = std::sqrt(1.0 + m11 - m00 - m22) * 2.0;
    q.w = (m02 - m20) / s;
    q.x = (m01 + m10) / s;
    q.y = 0.25 * s;
    q.z = (m12 + m21) / s;
  } else {
    double s = std::sqrt(1.0 + m22 - m00 - m11) * 2.0;
    q.w = (m10 - m01) / s;
    q.x = (m02 + m20) / s;
    q.y = (m12 + m21) / s;
    q.z = 0.25 * s;
  }
  return q.normalized();
}

// Camera convention: +x right, +y down, +z forward (world dir = q * cam dir).
inline Quat look_at(const Vec3& from, const Vec3& to, const Vec3& up = {0, 0, 1}) {
  const Vec3 fwd = normalized(to - from);
  Vec3 right = cross(fwd, up);
  if (norm(right) < 1e-9) right = cross(fwd, Vec3{1, 0, 0});
  right = normalized(right);
  const Vec3 down = cross(fwd, right);
  return quat_from_columns(right, down, fwd);
}

struct Aabb {
  Vec3 lo{-1, -1, -1};
  Vec3 hi{1, 1, 1};

  Vec3 center() const { return (lo + hi) * 0.5; }
  Vec3 extent() const { return hi - lo; }
  double diag() const { return norm(hi - lo); }

  bool contains(const Vec3& p) const {
    return p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y &&
           p.z >= lo.z && p.z <= hi.z;
  }

  Vec3 clamp(const Vec3& p) const {
    return {std::clamp(p.x, lo.x, hi.x), std::clamp(p.y, lo.y, hi.y),
            std::clamp(p.z, lo.z, hi.z)};
  }
};

// Slab-test ray/box intersection; returns false if the ray misses.
inline bool intersect_aabb(const Vec3& origin, const Vec3& dir, const Aabb& box,
                           double& t0, double& t1) {
  t0 = -std::numeric_limits<double>::infinity();
  t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    const double o = origin[a], d = dir[a], lo = box.lo[a], hi = box.hi[a];
    if (std::abs(d) < 1e-15) {
      if (o < lo || o > hi) return false;
      continue;
    }
    double ta = (lo - o) / d, tb = (hi - o) / d;
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
    if (t0 > t1) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Dynamic-dimension vectors (embeddings, tokens)
// ---------------------------------------------------------------------------

using VecD = std::vector<double>;

inline double dot(const VecD& a, const VecD& b) {
  if (a.size() != b.size()) throw std::invalid_argument("dot: dimension mismatch");
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(const VecD& a) { return std::sqrt(dot(a, a)); }

// Overflow-safe Euclidean distance: accumulation is rescaled by the largest
// component magnitude instead of summing raw squares.
inline double stable_distance(const VecD& a, const VecD& b) {
  if (a.size() != b.size()) throw std::invalid_argument("stable_distance: dimension mismatch");
  double amax = 0.0;
  for (size_t i = 0; i < a.size(); ++i) amax = std::max(amax, std::abs(a[i] - b[i]));
  if (amax == 0.0) return 0.0;
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double d = (a[i] - b[i]) / amax;
    s += d * d;
  }
  return amax * std::sqrt(s);
}

inline double cosine(const VecD& a, const VecD& b) {
  const double na = norm(a), nb = norm(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

inline VecD operator+(const VecD& a, const VecD& b) {
  VecD r(a.size());
  for (size_t i = 0; i < a.size(); ++i) r[i] = a[i] + b[i];
  return r;
}

inline VecD operator-(const VecD& a, const VecD& b) {
  VecD r(a.size());
  for (size_t i = 0; i < a.size(); ++i) r[i] = a[i] - b[i];
  return r;
}

inline VecD operator*(double s, const VecD& a) {
  VecD r(a.size());
  for (size_t i = 0; i < a.size(); ++i) r[i] = s * a[i];
  return r;
}

// ---------------------------------------------------------------------------
// Deterministic RNG (PCG32): identical streams on every platform, cheap
// per-object substreams via the sequence selector.
// ---------------------------------------------------------------------------

class Pcg32 {
 public:
  explicit Pcg32(uint64_t seed = 0x853c49e6748fea9bULL, uint64_t seq = 1) {
    state_ = 0u;
    inc_ = (seq << 1u) | 1u;
    next();
    state_ += seed;
    next();
  }

  uint32_t next() {
    const uint64_t old = state_;
    state_ = old * 6364136223846793005ULL + inc_;
    const uint32_t xorshifted = static_cast<uint32_t>(((old >> 18u) ^ old) >> 27u);
    const uint32_t rot = static_cast<uint32_t>(old >> 59u);
    return (xorshifted >> rot) | (xorshifted << ((-rot) & 31u));
  }

  // [0, 1)
  double uniform() { return next() * (1.0 / 4294967296.0); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n), unbiased
  uint32_t uniform_int(uint32_t n) {
    if (n == 0) throw std::invalid_argument("uniform_int: n must be positive");
    const uint32_t threshold = (-n) % n;
    for (;;) {
      const uint32_t r = next();
      if (r >= threshold) return r % n;
    }
  }

  double normal() {
    // Box-Muller; one value per call keeps streams easy to reason about.
    double u1 = uniform();
    if (u1 <= 0.0) u1 = std::numeric_limits<double>::min();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }

  Vec3 unit_vector() {
    // Uniform on the sphere via z + azimuth.
    const double z = uniform(-1.0, 1.0);
    const double phi = uniform(0.0, 2.0 * kPi);
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    return {r * std::cos(phi), r * std::sin(phi), z};
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[uniform_int(static_cast<uint32_t>(i))]);
    }
  }

 private:
  uint64_t state_;
  uint64_t inc_;
};

// Raised when an optimization run produces non-finite or exploding losses.
class divergence_error : public std::runtime_error {
 public:
  explicit divergence_error(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace osf
