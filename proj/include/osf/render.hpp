#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "osf/core.hpp"

namespace osf {

struct Ray {
  Vec3 origin;
  Vec3 direction;  // unit
  int view = -1;
  double px = 0.0, py = 0.0;  // source pixel (continuous coords)
  double near = 0.0, far = 1.0;

  void validate() const {
    if (std::abs(norm(direction) - 1.0) > 1e-6)
      throw std::invalid_argument("ray direction must be unit length");
    if (!(near < far)) throw std::invalid_argument("ray requires near < far");
  }
};

// Per-ray sample set. positions are ordered along the ray, deltas positive.
struct RaySamples {
  std::vector<double> t;       // distance along ray, ascending
  std::vector<double> delta;   // spacing between consecutive samples
  std::vector<Vec3> position;  // origin + t * direction
};

// Stratified sampling over [near, far]: one sample per equal-width bin.
// Without an rng the bin midpoints are used, giving an exact partition
// (sum of deltas == far - near).
inline RaySamples sample_ray(const Ray& ray, int n, Pcg32* rng = nullptr) {
  if (n < 1) throw std::invalid_argument("sample_ray: n must be >= 1");
  ray.validate();
  const double width = (ray.far - ray.near) / n;
  RaySamples s;
  s.t.resize(n);
  s.delta.resize(n);
  s.position.resize(n);
  for (int i = 0; i < n; ++i) {
    const double u = rng ? rng->uniform() : 0.5;
    s.t[i] = ray.near + (i + u) * width;
  }
  for (int i = 0; i + 1 < n; ++i) s.delta[i] = s.t[i + 1] - s.t[i];
  s.delta[n - 1] = width;
  for (int i = 0; i < n; ++i) s.position[i] = ray.origin + s.t[i] * ray.direction;
  return s;
}

struct CompositeWeights {
  std::vector<double> w;  // w_i = T_i * (1 - exp(-sigma_i * delta_i))
  std::vector<double> T;  // T_i = exp(-sum_{j<i} sigma_j * delta_j), T_0 = 1
};

inline CompositeWeights composite_weights(const std::vector<double>& sigma,
                                          const std::vector<double>& delta) {
  if (sigma.size() != delta.size())
    throw std::invalid_argument("composite_weights: size mismatch");
  const size_t n = sigma.size();
  CompositeWeights out;
  out.w.resize(n);
  out.T.resize(n);
  double acc = 0.0;  // sum of sigma_j * delta_j over j < i
  for (size_t i = 0; i < n; ++i) {
    if (sigma[i] < 0.0) throw std::invalid_argument("composite_weights: negative density");
    if (delta[i] <= 0.0) throw std::invalid_argument("composite_weights: non-positive delta");
    const double Ti = std::exp(-acc);
    out.T[i] = Ti;
    out.w[i] = Ti * (1.0 - std::exp(-sigma[i] * delta[i]));
    acc += sigma[i] * delta[i];
  }
  return out;
}

struct Rendered {
  VecD value;          // sum_i w_i * c_i
  double opacity = 0;  // sum_i w_i
  double depth = 0;    // sum_i w_i * t_i (unnormalized expected depth)
};

// values: n x dim, row-major.
inline Rendered render_along_ray(const std::vector<double>& sigma,
                                 const std::vector<double>& delta,
                                 const std::vector<double>& t,
                                 const std::vector<double>& values, size_t dim) {
  const CompositeWeights cw = composite_weights(sigma, delta);
  const size_t n = sigma.size();
  if (values.size() != n * dim)
    throw std::invalid_argument("render_along_ray: value buffer size mismatch");
  if (t.size() != n) throw std::invalid_argument("render_along_ray: t size mismatch");
  Rendered r;
  r.value.assign(dim, 0.0);
  for (size_t i = 0; i < n; ++i) {
    const double w = cw.w[i];
    r.opacity += w;
    r.depth += w * t[i];
    for (size_t k = 0; k < dim; ++k) r.value[k] += w * values[i * dim + k];
  }
  return r;
}

inline Rendered render_along_ray(const RaySamples& s, const std::vector<double>& sigma,
                                 const std::vector<double>& values, size_t dim) {
  return render_along_ray(sigma, s.delta, s.t, values, dim);
}

// Expected surface point of a ray: depth normalized by opacity. Only
// meaningful when the ray actually hits something (opacity above threshold).
inline bool surface_point(const Ray& ray, const Rendered& r, double min_opacity,
                          Vec3& out) {
  if (r.opacity < min_opacity) return false;
  out = ray.origin + (r.depth / r.opacity) * ray.direction;
  return true;
}

// Pinhole camera ray through continuous pixel coordinates (px right, py down).
// Convention: camera +x right, +y down, +z forward.
struct PinholeIntrinsics {
  double fx, fy, cx, cy;
};

inline PinholeIntrinsics make_intrinsics(int height, int width, double vertical_fov) {
  const double fy = (height / 2.0) / std::tan(vertical_fov / 2.0);
  return {fy, fy, width / 2.0, height / 2.0};
}

}  // namespace osf
