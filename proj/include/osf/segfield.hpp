#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "osf/core.hpp"
#include "osf/fields.hpp"
#include "osf/grid.hpp"
#include "osf/nn.hpp"
#include "osf/render.hpp"
#include "osf/scenegen.hpp"
#include "osf/tensorio.hpp"

namespace osf {

struct SegConfig {
  int d_seg = 16;
  int d_lab = 16;
  double margin = 1.0;
  int steps = 1000;
  int rays_per_step = 96;   // drawn across images, then paired within each
  int samples_per_ray = 32;
  double lr_grid = 1e-2;
  double lr_decoder = 1e-3;
  double w_contrastive = 1.0;
  double w_label = 1.0;
  std::vector<int> grid_resolutions{16, 32, 64, 128};
  int grid_features = 4;
  int hidden = 16;
  uint64_t seed = 0;
  double divergence_threshold = 1e6;

  void validate() const {
    if (margin <= 0) throw std::invalid_argument("margin must be positive");
    if (d_seg < 1 || d_lab < 1) throw std::invalid_argument("embedding dims must be positive");
    if (steps < 1 || rays_per_step < 2 || samples_per_ray < 1)
      throw std::invalid_argument("seg train counts must be positive");
  }
};

// Pull embeddings of same-mask ray pairs together, push different-mask pairs
// apart up to the margin.
inline double contrastive_pair_loss(const VecD& ea, const VecD& eb, bool same, double m) {
  if (m <= 0) throw std::invalid_argument("contrastive margin must be positive");
  const double d = stable_distance(ea, eb);
  return same ? d : std::max(0.0, m - d);
}

// Three scale decoders and three label heads hanging off one shared grid.
class SegFieldSet {
 public:
  SegFieldSet() = default;

  SegFieldSet(const SegConfig& cfg, const Aabb& bounds) : cfg_(cfg), bounds_(bounds) {
    cfg_.validate();
    Pcg32 rng(cfg.seed, 23);
    grid_ = GridField("seg_grid", bounds, cfg.grid_resolutions, cfg.grid_features, rng);
    const int g = grid_.output_dim();
    for (int s = 0; s < kNumScales; ++s) {
      scale_dec_[s] = Mlp("seg_dec_" + std::string(scale_name(static_cast<Scale>(s))),
                          {g, cfg.hidden, cfg.d_seg}, Act::Relu, Act::None, rng);
      label_head_[s] = Mlp("label_head_" + std::string(scale_name(static_cast<Scale>(s))),
                           {cfg.d_seg, cfg.hidden, cfg.d_lab}, Act::Relu, Act::None, rng);
    }
  }

  const SegConfig& config() const { return cfg_; }
  const Aabb& bounds() const { return bounds_; }
  double margin() const { return cfg_.margin; }

  GridField& grid() { return grid_; }
  Mlp& scale_decoder(Scale s) { return scale_dec_[static_cast<int>(s)]; }
  Mlp& label_head(Scale s) { return label_head_[static_cast<int>(s)]; }

  std::vector<Tensor*> params() {
    std::vector<Tensor*> out = grid_.params();
    for (int s = 0; s < kNumScales; ++s) {
      for (Tensor* t : scale_dec_[s].params()) out.push_back(t);
      for (Tensor* t : label_head_[s].params()) out.push_back(t);
    }
    return out;
  }

  VecD embedding(const Vec3& p, Scale s) const {
    std::vector<double> latent(static_cast<size_t>(grid_.output_dim()));
    grid_.query(p, latent.data());
    MlpCache c;
    return scale_dec_[static_cast<int>(s)].forward(latent.data(), c);
  }

  VecD label_embedding(const VecD& seg_embedding, Scale s) const {
    MlpCache c;
    return label_head_[static_cast<int>(s)].forward(seg_embedding.data(), c);
  }

 private:
  SegConfig cfg_;
  Aabb bounds_;
  GridField grid_;
  Mlp scale_dec_[kNumScales];
  Mlp label_head_[kNumScales];
};

// ---------------------------------------------------------------------------
// Pair sampling from teacher masks
// ---------------------------------------------------------------------------

struct SegRay {
  Ray ray;
  int view = -1;
  int mask_id[kNumScales] = {-1, -1, -1};  // per-scale instance id at the pixel
};

struct RayPair {
  SegRay a, b;
  bool valid(Scale s) const {
    return a.mask_id[static_cast<int>(s)] >= 0 && b.mask_id[static_cast<int>(s)] >= 0;
  }
  bool same(Scale s) const {
    return valid(s) && a.mask_id[static_cast<int>(s)] == b.mask_id[static_cast<int>(s)];
  }
};

struct MaskPairBatch {
  std::vector<RayPair> pairs;
  uint64_t sample_seed = 0;
};

// Seeded random rays through the supervision images; per ray, the per-scale
// mask under the pixel; rays grouped by image and paired within it.
inline MaskPairBatch sample_training_pairs(const TeacherOutputs& teacher, const Aabb& bounds,
                                           int n_rays, uint64_t seed) {
  if (teacher.views.empty()) throw std::invalid_argument("no teacher views to sample from");
  Pcg32 rng(seed, 19);
  MaskPairBatch batch;
  batch.sample_seed = (static_cast<uint64_t>(rng.next()) << 32) | rng.next();
  std::vector<std::vector<SegRay>> by_view(teacher.views.size());
  for (int i = 0; i < n_rays; ++i) {
    const int v = static_cast<int>(rng.uniform_int(static_cast<uint32_t>(teacher.views.size())));
    const CameraPose& pose = teacher.poses[static_cast<size_t>(v)];
    const int x = static_cast<int>(rng.uniform_int(static_cast<uint32_t>(pose.width)));
    const int y = static_cast<int>(rng.uniform_int(static_cast<uint32_t>(pose.height)));
    SegRay r;
    r.ray = camera_ray(pose, x + 0.5, y + 0.5, bounds);
    r.ray.view = v;
    r.view = v;
    const size_t px = static_cast<size_t>(y) * pose.width + x;
    for (int s = 0; s < kNumScales; ++s)
      r.mask_id[s] = teacher.views[static_cast<size_t>(v)].ids[s][px];
    by_view[static_cast<size_t>(v)].push_back(std::move(r));
  }
  for (auto& rays : by_view) {
    rng.shuffle(rays);
    for (size_t i = 0; i + 1 < rays.size(); i += 2)
      batch.pairs.push_back({rays[i], rays[i + 1]});
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

using DensityFn = std::function<double(const Vec3&)>;

struct SegLossTerms {
  double total = 0;
  double pull[kNumScales] = {0, 0, 0};
  double push[kNumScales] = {0, 0, 0};
  double label[kNumScales] = {0, 0, 0};
};

namespace detail {

struct SegRayForward {
  RaySamples samples;
  CompositeWeights cw;
  std::vector<GridField::QueryCache> grid_q;
  std::vector<MlpCache> dec_c;
  VecD rendered;
};

// Forward one ray at one scale; weights come from the external density field.
// Samples sit at bin midpoints so the result is independent of processing
// order (pair losses must be permutation-invariant).
inline void seg_forward_ray(SegFieldSet& sf, const DensityFn& density, const SegRay& ray,
                            Scale scale, int n_samples, SegRayForward& f) {
  f.samples = sample_ray(ray.ray, n_samples);
  std::vector<double> sigma(static_cast<size_t>(n_samples));
  for (int i = 0; i < n_samples; ++i)
    sigma[static_cast<size_t>(i)] = std::max(0.0, density(f.samples.position[static_cast<size_t>(i)]));
  f.cw = composite_weights(sigma, f.samples.delta);
  f.grid_q.resize(static_cast<size_t>(n_samples));
  f.dec_c.resize(static_cast<size_t>(n_samples));
  const int g = sf.grid().output_dim();
  std::vector<double> latent(static_cast<size_t>(g));
  f.rendered.assign(static_cast<size_t>(sf.config().d_seg), 0.0);
  for (int i = 0; i < n_samples; ++i) {
    sf.grid().query(f.samples.position[static_cast<size_t>(i)], latent.data(),
                    &f.grid_q[static_cast<size_t>(i)]);
    const std::vector<double>& e =
        sf.scale_decoder(scale).forward(latent.data(), f.dec_c[static_cast<size_t>(i)]);
    for (int k = 0; k < sf.config().d_seg; ++k)
      f.rendered[static_cast<size_t>(k)] += f.cw.w[static_cast<size_t>(i)] * e[static_cast<size_t>(k)];
  }
}

// Routes d(loss)/d(rendered embedding) back into the decoder and grid.
inline void seg_backward_ray(SegFieldSet& sf, Scale scale, const SegRayForward& f,
                             const VecD& de) {
  const int n = static_cast<int>(f.grid_q.size());
  std::vector<double> dsample(de.size());
  std::vector<double> dlatent(static_cast<size_t>(sf.grid().output_dim()));
  for (int i = 0; i < n; ++i) {
    const double w = f.cw.w[static_cast<size_t>(i)];
    if (w == 0.0) continue;
    for (size_t k = 0; k < de.size(); ++k) dsample[k] = w * de[k];
    sf.scale_decoder(scale).backward(dsample.data(), f.dec_c[static_cast<size_t>(i)], dlatent.data());
    sf.grid().backward(f.grid_q[static_cast<size_t>(i)], dlatent.data());
  }
}

}  // namespace detail

// Per-step loss: contrastive pull/push per scale over the pair batch, plus
// label-head MSE against the label embedding of each ray's ground-truth
// instance. Embeddings are rendered along rays before any loss is taken.
inline SegLossTerms seg_forward_backward(SegFieldSet& sf, const DensityFn& density,
                                         const MaskPairBatch& batch,
                                         const std::map<int, VecD>& instance_labels,
                                         bool with_grad) {
  const SegConfig& cfg = sf.config();
  SegLossTerms loss;
  detail::SegRayForward fa, fb;
  const double m = cfg.margin;

  for (int si = 0; si < kNumScales; ++si) {
    const Scale scale = static_cast<Scale>(si);
    int n_pairs = 0, n_label = 0;
    for (const RayPair& p : batch.pairs) if (p.valid(scale)) ++n_pairs;
    for (const RayPair& p : batch.pairs) {
      for (const SegRay* r : {&p.a, &p.b})
        if (r->mask_id[si] >= 0 && instance_labels.count(r->mask_id[si])) ++n_label;
    }
    if (n_pairs == 0 && n_label == 0) continue;

    for (const RayPair& p : batch.pairs) {
      const bool valid = p.valid(scale);
      const bool la = p.a.mask_id[si] >= 0 && instance_labels.count(p.a.mask_id[si]) > 0;
      const bool lb = p.b.mask_id[si] >= 0 && instance_labels.count(p.b.mask_id[si]) > 0;
      if (!valid && !la && !lb) continue;
      detail::seg_forward_ray(sf, density, p.a, scale, cfg.samples_per_ray, fa);
      detail::seg_forward_ray(sf, density, p.b, scale, cfg.samples_per_ray, fb);

      VecD dea(fa.rendered.size(), 0.0), deb(fb.rendered.size(), 0.0);
      if (valid) {
        const bool same = p.same(scale);
        const double d = stable_distance(fa.rendered, fb.rendered);
        const double pair_scale = cfg.w_contrastive / n_pairs;
        if (same) {
          loss.pull[si] += d / n_pairs;
          if (d > 1e-12) {
            for (size_t k = 0; k < dea.size(); ++k) {
              const double gd = (fa.rendered[k] - fb.rendered[k]) / d * pair_scale;
              dea[k] += gd;
              deb[k] -= gd;
            }
          }
        } else {
          loss.push[si] += std::max(0.0, m - d) / n_pairs;
          if (d < m && d > 1e-12) {
            for (size_t k = 0; k < dea.size(); ++k) {
              const double gd = -(fa.rendered[k] - fb.rendered[k]) / d * pair_scale;
              dea[k] += gd;
              deb[k] -= gd;
            }
          }
        }
      }
      // label supervision per ray
      auto label_term = [&](const SegRay& r, detail::SegRayForward& f, VecD& de) {
        if (r.mask_id[si] < 0) return;
        auto it = instance_labels.find(r.mask_id[si]);
        if (it == instance_labels.end()) return;
        MlpCache hc;
        const std::vector<double>& pred = sf.label_head(scale).forward(f.rendered.data(), hc);
        const VecD& target = it->second;
        double l = 0.0;
        std::vector<double> dpred(pred.size());
        for (size_t k = 0; k < pred.size(); ++k) {
          const double e = pred[k] - target[k];
          l += e * e;
          dpred[k] = 2.0 * e * cfg.w_label / (pred.size() * n_label);
        }
        loss.label[si] += l / pred.size() / n_label;
        if (with_grad) {
          std::vector<double> dren(de.size());
          sf.label_head(scale).backward(dpred.data(), hc, dren.data());
          for (size_t k = 0; k < de.size(); ++k) de[k] += dren[k];
        }
      };
      label_term(p.a, fa, dea);
      label_term(p.b, fb, deb);

      if (with_grad) {
        detail::seg_backward_ray(sf, scale, fa, dea);
        detail::seg_backward_ray(sf, scale, fb, deb);
      }
    }
  }
  for (int s = 0; s < kNumScales; ++s)
    loss.total += cfg.w_contrastive * (loss.pull[s] + loss.push[s]) + cfg.w_label * loss.label[s];
  return loss;
}

inline std::string seg_parameter_diagnostics(SegFieldSet& sf) {
  std::ostringstream os;
  for (Tensor* t : sf.params()) os << t->name << "=" << t->value_norm() << " ";
  return os.str();
}

struct SegFitResult {
  std::vector<SegLossTerms> curve;
};

// Maps every instance id of the scene (all three scales) to the owning
// object's label embedding: the teacher stand-in for per-mask encodings.
inline std::map<int, VecD> make_label_dictionary(const SceneSpec& spec) {
  std::map<int, VecD> labels;
  for (const ObjectSpec& o : spec.objects) {
    labels[o.id] = o.label_embedding;
    for (const PartSpec& p : o.parts) {
      labels[p.id] = o.label_embedding;
      for (const SubPartSpec& s : p.sub_parts) labels[s.id] = o.label_embedding;
    }
  }
  return labels;
}

inline SegFitResult fit_seg_field(SegFieldSet& sf, const DensityFn& density,
                                  const TeacherOutputs& teacher,
                                  const std::map<int, VecD>& instance_labels,
                                  const SegConfig& cfg) {
  cfg.validate();
  Pcg32 rng(cfg.seed, 43);
  Adam opt(cfg.lr_grid);
  for (Tensor* t : sf.params()) t->lr_scale = cfg.lr_decoder / cfg.lr_grid;
  for (Tensor* t : sf.grid().params()) t->lr_scale = 1.0;
  opt.attach(sf.params());
  SegFitResult result;
  for (int step = 0; step < cfg.steps; ++step) {
    const MaskPairBatch batch = sample_training_pairs(teacher, sf.bounds(), cfg.rays_per_step,
                                                      (static_cast<uint64_t>(rng.next()) << 32) | rng.next());
    for (Tensor* t : sf.params()) t->zero_grad();
    const SegLossTerms loss = seg_forward_backward(sf, density, batch, instance_labels, true);
    if (!std::isfinite(loss.total) || loss.total > cfg.divergence_threshold)
      throw divergence_error("segment field training diverged at step " + std::to_string(step) +
                             " (loss=" + std::to_string(loss.total) + "); parameter norms: " +
                             seg_parameter_diagnostics(sf));
    opt.step();
    result.curve.push_back(loss);
  }
  return result;
}

// Rendered segment embedding of an arbitrary ray (inference path).
struct SegRayRender {
  VecD embedding[kNumScales];
  double opacity = 0, depth = 0;
};

inline SegRayRender render_seg_ray(SegFieldSet& sf, const DensityFn& density, const Ray& ray,
                                   int n_samples) {
  const RaySamples samples = sample_ray(ray, n_samples);
  std::vector<double> sigma(static_cast<size_t>(n_samples));
  for (int i = 0; i < n_samples; ++i)
    sigma[static_cast<size_t>(i)] = std::max(0.0, density(samples.position[static_cast<size_t>(i)]));
  const CompositeWeights cw = composite_weights(sigma, samples.delta);
  SegRayRender out;
  const int g = sf.grid().output_dim();
  std::vector<double> latent(static_cast<size_t>(g));
  MlpCache c;
  for (int s = 0; s < kNumScales; ++s)
    out.embedding[s].assign(static_cast<size_t>(sf.config().d_seg), 0.0);
  for (int i = 0; i < n_samples; ++i) {
    out.opacity += cw.w[static_cast<size_t>(i)];
    out.depth += cw.w[static_cast<size_t>(i)] * samples.t[static_cast<size_t>(i)];
    sf.grid().query(samples.position[static_cast<size_t>(i)], latent.data());
    for (int s = 0; s < kNumScales; ++s) {
      const std::vector<double>& e = sf.scale_decoder(static_cast<Scale>(s)).forward(latent.data(), c);
      for (int k = 0; k < sf.config().d_seg; ++k)
        out.embedding[s][static_cast<size_t>(k)] += cw.w[static_cast<size_t>(i)] * e[static_cast<size_t>(k)];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const SegConfig& c) {
  return {{"d_seg", c.d_seg},         {"d_lab", c.d_lab},
          {"margin", c.margin},       {"steps", c.steps},
          {"rays_per_step", c.rays_per_step},
          {"samples_per_ray", c.samples_per_ray},
          {"lr_grid", c.lr_grid},     {"lr_decoder", c.lr_decoder},
          {"w_contrastive", c.w_contrastive},
          {"w_label", c.w_label},     {"grid_resolutions", c.grid_resolutions},
          {"grid_features", c.grid_features},
          {"hidden", c.hidden},       {"seed", c.seed}};
}

inline SegConfig seg_config_from_json(const nlohmann::json& j) {
  SegConfig c;
  c.d_seg = j.value("d_seg", c.d_seg);
  c.d_lab = j.value("d_lab", c.d_lab);
  c.margin = j.value("margin", c.margin);
  c.steps = j.value("steps", c.steps);
  c.rays_per_step = j.value("rays_per_step", c.rays_per_step);
  c.samples_per_ray = j.value("samples_per_ray", c.samples_per_ray);
  c.lr_grid = j.value("lr_grid", c.lr_grid);
  c.lr_decoder = j.value("lr_decoder", c.lr_decoder);
  c.w_contrastive = j.value("w_contrastive", c.w_contrastive);
  c.w_label = j.value("w_label", c.w_label);
  c.grid_resolutions = j.value("grid_resolutions", c.grid_resolutions);
  c.grid_features = j.value("grid_features", c.grid_features);
  c.hidden = j.value("hidden", c.hidden);
  c.seed = j.value("seed", c.seed);
  return c;
}

inline void save_segfieldset(SegFieldSet& sf, const std::filesystem::path& dir) {
  TensorDirWriter w(dir);
  for (Tensor* t : sf.params()) w.add(t->name, {static_cast<int64_t>(t->size())}, t->v);
  w.finish();
  nlohmann::json j;
  j["config"] = to_json(sf.config());
  j["bounds"] = {{"lo", to_json(sf.bounds().lo)}, {"hi", to_json(sf.bounds().hi)}};
  std::ofstream out(dir / "segfieldset.json");
  out << j.dump(2) << "\n";
}

inline SegFieldSet load_segfieldset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "segfieldset.json");
  if (!in) throw std::runtime_error("missing segfieldset.json in " + dir.string());
  nlohmann::json j;
  in >> j;
  const SegConfig cfg = seg_config_from_json(j.at("config"));
  Aabb bounds;
  bounds.lo = vec3_from_json(j.at("bounds").at("lo"));
  bounds.hi = vec3_from_json(j.at("bounds").at("hi"));
  SegFieldSet sf(cfg, bounds);
  TensorDirReader r(dir);
  for (Tensor* t : sf.params()) {
    std::vector<double> v = r.read(t->name);
    if (v.size() != t->size())
      throw std::runtime_error("checkpoint tensor size mismatch for " + t->name);
    t->v = std::move(v);
  }
  return sf;
}

}  // namespace osf
