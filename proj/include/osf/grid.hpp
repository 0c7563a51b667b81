#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "osf/core.hpp"
#include "osf/nn.hpp"

namespace osf {

// Multi-resolution dense voxel grid. A query trilinearly interpolates each
// level and concatenates the per-level features, so the result is continuous
// in position. Queries outside the domain are clamped (reported via flag).
class GridField {
 public:
  GridField() = default;

  GridField(const std::string& name, const Aabb& domain, const std::vector<int>& resolutions,
            int features_per_level, Pcg32& rng, double init_noise = 1e-2)
      : domain_(domain), resolutions_(resolutions), features_(features_per_level) {
    if (resolutions.empty()) throw std::invalid_argument("grid needs at least one level");
    for (int r : resolutions)
      if (r < 2) throw std::invalid_argument("grid level resolution must be >= 2");
    if (features_per_level < 1) throw std::invalid_argument("grid features must be >= 1");
    for (size_t l = 0; l < resolutions.size(); ++l) {
      Tensor t;
      t.name = name + ".level" + std::to_string(l);
      t.sparse = true;
      const int64_t r = resolutions[l];
      t.resize(static_cast<size_t>(r * r * r * features_));
      for (double& v : t.v) v = rng.uniform(-init_noise, init_noise);
      levels_.push_back(std::move(t));
    }
  }

  int output_dim() const { return static_cast<int>(levels_.size()) * features_; }
  int features_per_level() const { return features_; }
  const std::vector<int>& resolutions() const { return resolutions_; }
  const Aabb& domain() const { return domain_; }

  struct QueryCache {
    struct LevelHit {
      int64_t corner[8];  // base index (voxel * F) of each corner
      double w[8];
    };
    std::vector<LevelHit> hits;
    bool clamped = false;
  };

  // out must hold output_dim() values.
  void query(const Vec3& p, double* out, QueryCache* cache = nullptr) const {
    const Vec3 ext = domain_.extent();
    double u[3] = {(p.x - domain_.lo.x) / ext.x, (p.y - domain_.lo.y) / ext.y,
                   (p.z - domain_.lo.z) / ext.z};
    bool clamped = false;
    for (double& c : u) {
      if (c < 0.0) { c = 0.0; clamped = true; }
      if (c > 1.0) { c = 1.0; clamped = true; }
    }
    if (cache) {
      cache->hits.resize(levels_.size());
      cache->clamped = clamped;
    }
    for (size_t l = 0; l < levels_.size(); ++l) {
      const int r = resolutions_[l];
      int idx[3];
      double f[3];
      for (int a = 0; a < 3; ++a) {
        const double c = u[a] * (r - 1);
        int i = static_cast<int>(std::floor(c));
        if (i > r - 2) i = r - 2;
        if (i < 0) i = 0;
        idx[a] = i;
        f[a] = c - i;
      }
      const Tensor& level = levels_[l];
      double* dst = out + l * static_cast<size_t>(features_);
      for (int k = 0; k < features_; ++k) dst[k] = 0.0;
      int corner_n = 0;
      for (int dx = 0; dx < 2; ++dx) {
        for (int dy = 0; dy < 2; ++dy) {
          for (int dz = 0; dz < 2; ++dz) {
            const double w = (dx ? f[0] : 1.0 - f[0]) * (dy ? f[1] : 1.0 - f[1]) *
                             (dz ? f[2] : 1.0 - f[2]);
            const int64_t base =
                ((static_cast<int64_t>(idx[0] + dx) * r + (idx[1] + dy)) * r + (idx[2] + dz)) *
                features_;
            for (int k = 0; k < features_; ++k) dst[k] += w * level.v[static_cast<size_t>(base + k)];
            if (cache) {
              cache->hits[l].corner[corner_n] = base;
              cache->hits[l].w[corner_n] = w;
            }
            ++corner_n;
          }
        }
      }
    }
  }

  // Scatters d(loss)/d(output) into the level gradients recorded in cache.
  void backward(const QueryCache& cache, const double* dout) {
    for (size_t l = 0; l < levels_.size(); ++l) {
      Tensor& level = levels_[l];
      level.ensure_grad();
      const double* d = dout + l * static_cast<size_t>(features_);
      for (int c = 0; c < 8; ++c) {
        const double w = cache.hits[l].w[c];
        if (w == 0.0) continue;
        const int64_t base = cache.hits[l].corner[c];
        for (int k = 0; k < features_; ++k) level.accumulate(base + k, w * d[k]);
      }
    }
  }

  std::vector<Tensor*> params() {
    std::vector<Tensor*> out;
    for (Tensor& t : levels_) out.push_back(&t);
    return out;
  }

 private:
  Aabb domain_;
  std::vector<int> resolutions_;
  int features_ = 0;
  std::vector<Tensor> levels_;
};

}  // namespace osf
