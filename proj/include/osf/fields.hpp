#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "osf/core.hpp"
#include "osf/grid.hpp"
#include "osf/nn.hpp"
#include "osf/render.hpp"
#include "osf/scenegen.hpp"
#include "osf/tensorio.hpp"

namespace osf {

// Direction encoding: raw unit vector plus the degree-2 real spherical
// harmonic basis (3 + 9 values).
inline constexpr int kDirEncodingDim = 12;

inline void dir_encoding(const Vec3& d, double* out) {
  const double x = d.x, y = d.y, z = d.z;
  out[0] = x;
  out[1] = y;
  out[2] = z;
  out[3] = 0.28209479177387814;
  out[4] = 0.4886025119029199 * y;
  out[5] = 0.4886025119029199 * z;
  out[6] = 0.4886025119029199 * x;
  out[7] = 1.0925484305920792 * x * y;
  out[8] = 1.0925484305920792 * y * z;
  out[9] = 0.31539156525252005 * (3.0 * z * z - 1.0);
  out[10] = 1.0925484305920792 * x * z;
  out[11] = 0.5462742152960396 * (x * x - y * y);
}

struct TrainConfig {
  int steps = 2000;
  int rays_per_batch = 128;        // rgb supervision rays
  int token_rays_per_batch = 64;   // feature-grid supervision rays
  int samples_per_ray = 32;
  double lr_grid = 1e-2;
  double lr_decoder = 1e-3;
  double w_rgb = 1.0;
  double w_token_vi = 1.0;
  double w_token_vd = 1.0;
  int latent_dim = 8;   // low-dim token feature f
  int d_tok = 32;       // full token dimensionality
  uint64_t seed = 0;

  std::vector<int> grid_resolutions{16, 32, 64, 128};
  int grid_features = 4;
  int hidden = 16;
  int dec_hidden = 32;
  bool sequential = true;          // geometry first, then token branch
  double geometry_fraction = 0.5;
  double divergence_threshold = 1e6;

  void validate() const {
    if (steps < 1 || rays_per_batch < 1 || token_rays_per_batch < 0 || samples_per_ray < 1)
      throw std::invalid_argument("train config counts must be positive");
    if (w_rgb < 0 || w_token_vi < 0 || w_token_vd < 0)
      throw std::invalid_argument("loss weights must be non-negative");
    if (latent_dim < 1 || d_tok < 1) throw std::invalid_argument("dims must be positive");
    if (lr_grid <= 0 || lr_decoder <= 0) throw std::invalid_argument("learning rates must be positive");
  }
};

// Radiance + token feature fields over one scene. The token branch decodes a
// grid latent into f_VI and a direction-conditioned deviation, with
// f_VD = f_VI + delta_VD by construction; one shared decoder maps the
// normalized low-dim feature to full token space.
class FieldSet {
 public:
  FieldSet() = default;

  FieldSet(const TrainConfig& cfg, const Aabb& bounds) : cfg_(cfg), bounds_(bounds) {
    cfg_.validate();
    Pcg32 rng(cfg.seed, 21);
    geo_grid_ = GridField("geo_grid", bounds, cfg.grid_resolutions, cfg.grid_features, rng);
    tok_grid_ = GridField("tok_grid", bounds, cfg.grid_resolutions, cfg.grid_features, rng);
    const int g = geo_grid_.output_dim();
    density_mlp_ = Mlp("density", {g, cfg.hidden, 1}, Act::Relu, Act::Softplus, rng);
    color_mlp_ = Mlp("color", {g + kDirEncodingDim, cfg.hidden, 3}, Act::Relu, Act::Sigmoid, rng);
    vi_mlp_ = Mlp("dec_vi", {g, cfg.hidden, cfg.latent_dim}, Act::Relu, Act::None, rng);
    vd_mlp_ = Mlp("dec_vd", {g + kDirEncodingDim, cfg.hidden, cfg.latent_dim}, Act::Relu,
                  Act::None, rng);
    vd_mlp_.zero_output_layer();  // start exactly view-independent
    dec_mlp_ = Mlp("dec_shared", {cfg.latent_dim, cfg.dec_hidden, cfg.d_tok}, Act::Relu,
                   Act::None, rng);
    dec_scale_.name = "dec_scale";
    dec_scale_.resize(1);
    dec_scale_.v[0] = 1.0;
  }

  const TrainConfig& config() const { return cfg_; }
  const Aabb& bounds() const { return bounds_; }
  int d_tok() const { return cfg_.d_tok; }

  GridField& geo_grid() { return geo_grid_; }
  GridField& tok_grid() { return tok_grid_; }
  Mlp& density_mlp() { return density_mlp_; }
  Mlp& color_mlp() { return color_mlp_; }
  Mlp& vi_mlp() { return vi_mlp_; }
  Mlp& vd_mlp() { return vd_mlp_; }
  Mlp& shared_decoder() { return dec_mlp_; }
  Tensor& dec_scale() { return dec_scale_; }

  std::vector<Tensor*> geometry_params() {
    std::vector<Tensor*> out = geo_grid_.params();
    for (Tensor* t : density_mlp_.params()) out.push_back(t);
    for (Tensor* t : color_mlp_.params()) out.push_back(t);
    return out;
  }

  std::vector<Tensor*> token_params() {
    std::vector<Tensor*> out = tok_grid_.params();
    for (Tensor* t : vi_mlp_.params()) out.push_back(t);
    for (Tensor* t : vd_mlp_.params()) out.push_back(t);
    for (Tensor* t : dec_mlp_.params()) out.push_back(t);
    out.push_back(&dec_scale_);
    return out;
  }

  std::vector<Tensor*> all_params() {
    std::vector<Tensor*> out = geometry_params();
    for (Tensor* t : token_params()) out.push_back(t);
    return out;
  }

  double density(const Vec3& p) const {
    std::vector<double> latent(static_cast<size_t>(geo_grid_.output_dim()));
    geo_grid_.query(p, latent.data());
    MlpCache c;
    return density_mlp_.forward(latent.data(), c)[0];
  }

  struct TokenQuery {
    VecD t_vi, t_vd;
    VecD f_vi, delta_vd;
    bool clamped = false;  // query fell outside bounds and was clamped
  };

  // t_VI = Dec(norm(f_VI)), t_VD = Dec(norm(f_VI + delta_VD(X, d))).
  TokenQuery forward_token(const Vec3& p, const Vec3& d) const {
    TokenQuery q;
    const int g = tok_grid_.output_dim();
    std::vector<double> latent(static_cast<size_t>(g + kDirEncodingDim));
    GridField::QueryCache cache;
    tok_grid_.query(p, latent.data(), &cache);
    q.clamped = cache.clamped;
    dir_encoding(d, latent.data() + g);
    MlpCache c1, c2, c3;
    q.f_vi = vi_mlp_.forward(latent.data(), c1);
    q.delta_vd = vd_mlp_.forward(latent.data(), c2);
    VecD f_vd = q.f_vi;
    for (size_t k = 0; k < f_vd.size(); ++k) f_vd[k] += q.delta_vd[k];
    VecD fn_vi = norm_scale(q.f_vi);
    VecD fn_vd = norm_scale(f_vd);
    q.t_vi = dec_mlp_.forward(fn_vi.data(), c3);
    q.t_vd = dec_mlp_.forward(fn_vd.data(), c3);
    return q;
  }

  VecD norm_scale(const VecD& f) const {
    const double r = std::max(norm(f), kNormEps);
    VecD out(f.size());
    const double s = dec_scale_.v[0] / r;
    for (size_t k = 0; k < f.size(); ++k) out[k] = s * f[k];
    return out;
  }

  static constexpr double kNormEps = 1e-8;

 private:
  TrainConfig cfg_;
  Aabb bounds_;
  GridField geo_grid_, tok_grid_;
  Mlp density_mlp_, color_mlp_, vi_mlp_, vd_mlp_, dec_mlp_;
  Tensor dec_scale_;
};

inline FieldSet init_fields(const TrainConfig& cfg, const Aabb& bounds) {
  return FieldSet(cfg, bounds);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct RayTarget {
  Ray ray;
  VecD target;
};

struct TrainBatch {
  std::vector<RayTarget> rgb_rays;
  std::vector<RayTarget> token_rays;
  uint64_t sample_seed = 0;  // seeds stratified jitter along rays
};

struct LossTerms {
  double total = 0, rgb = 0, token_vi = 0, token_vd = 0;
};

namespace detail {

// Per-sample forward caches for one ray; reused across rays.
struct RayScratch {
  std::vector<GridField::QueryCache> geo_q, tok_q;
  std::vector<MlpCache> density_c, color_c, vi_c, vd_c, dec_vi_c, dec_vd_c;
  std::vector<double> sigma, geo_latent, tok_latent;
  std::vector<double> f_vi, f_vd, fn_vi, fn_vd, r_vi, r_vd;
  std::vector<double> head_a, head_b;  // per-sample head outputs (rgb, or t_vi/t_vd)

  void resize(int n, int geo_dim, int tok_dim, int latent, int value_dim) {
    geo_q.resize(static_cast<size_t>(n));
    tok_q.resize(static_cast<size_t>(n));
    density_c.resize(static_cast<size_t>(n));
    color_c.resize(static_cast<size_t>(n));
    vi_c.resize(static_cast<size_t>(n));
    vd_c.resize(static_cast<size_t>(n));
    dec_vi_c.resize(static_cast<size_t>(n));
    dec_vd_c.resize(static_cast<size_t>(n));
    sigma.resize(static_cast<size_t>(n));
    geo_latent.resize(static_cast<size_t>(n) * (geo_dim + kDirEncodingDim));
    tok_latent.resize(static_cast<size_t>(n) * (tok_dim + kDirEncodingDim));
    f_vi.resize(static_cast<size_t>(n) * latent);
    f_vd.resize(static_cast<size_t>(n) * latent);
    fn_vi.resize(static_cast<size_t>(n) * latent);
    fn_vd.resize(static_cast<size_t>(n) * latent);
    r_vi.resize(static_cast<size_t>(n));
    r_vd.resize(static_cast<size_t>(n));
    head_a.resize(static_cast<size_t>(n) * value_dim);
    head_b.resize(static_cast<size_t>(n) * value_dim);
  }
};

// d(loss)/d(sigma_i) given d(loss)/d(w_i), for w from composite_weights.
inline void composite_sigma_grad(const std::vector<double>& sigma, const std::vector<double>& delta,
                                 const CompositeWeights& cw, const std::vector<double>& dw,
                                 std::vector<double>& dsigma) {
  const size_t n = sigma.size();
  dsigma.assign(n, 0.0);
  double suffix = 0.0;  // sum_{k>i} w_k * dw_k
  for (size_t i = n; i-- > 0;) {
    const double self = cw.T[i] * std::exp(-sigma[i] * delta[i]) * dw[i];
    dsigma[i] = delta[i] * (self - suffix);
    suffix += cw.w[i] * dw[i];
  }
}

}  // namespace detail

// One full forward pass over a batch; when with_grad is set, parameter
// gradients are accumulated (callers zero them first). Gradients flow through
// trilinear interpolation, the decoders, and compositing; geometry and token
// branches can be frozen independently. cfg carries the loss weights for this
// pass (its dimensions must match the field set).
inline LossTerms field_forward_backward(FieldSet& fs, const TrainBatch& batch,
                                        const TrainConfig& cfg, bool with_grad,
                                        bool train_geometry, bool train_token) {
  const int n = cfg.samples_per_ray;
  const int geo_dim = fs.geo_grid().output_dim();
  const int tok_dim = fs.tok_grid().output_dim();
  const int latent = cfg.latent_dim;
  const int d_tok = cfg.d_tok;
  Pcg32 jitter(batch.sample_seed, 31);

  detail::RayScratch sc;
  sc.resize(n, geo_dim, tok_dim, latent, std::max(3, d_tok));
  std::vector<double> dvalue(static_cast<size_t>(std::max(3, d_tok)));
  std::vector<double> dw(static_cast<size_t>(n)), dsigma;
  std::vector<double> dlatent(static_cast<size_t>(std::max(geo_dim, tok_dim) + kDirEncodingDim));
  std::vector<double> dlatent_acc(static_cast<size_t>(std::max(geo_dim, tok_dim)));
  std::vector<double> dfn(static_cast<size_t>(latent)), df(static_cast<size_t>(latent)),
      df_total(static_cast<size_t>(latent));

  LossTerms loss;
  const bool do_rgb = cfg.w_rgb > 0.0 && !batch.rgb_rays.empty();
  const bool do_vi = cfg.w_token_vi > 0.0 && !batch.token_rays.empty();
  const bool do_vd = cfg.w_token_vd > 0.0 && !batch.token_rays.empty();

  // --- rgb rays ---
  if (do_rgb) {
    for (const RayTarget& rt : batch.rgb_rays) {
      const RaySamples samples = sample_ray(rt.ray, n, &jitter);
      double enc[kDirEncodingDim];
      dir_encoding(rt.ray.direction, enc);
      for (int i = 0; i < n; ++i) {
        double* gl = sc.geo_latent.data() + static_cast<size_t>(i) * (geo_dim + kDirEncodingDim);
        fs.geo_grid().query(samples.position[static_cast<size_t>(i)], gl, &sc.geo_q[static_cast<size_t>(i)]);
        for (int k = 0; k < kDirEncodingDim; ++k) gl[geo_dim + k] = enc[k];
        sc.sigma[static_cast<size_t>(i)] = fs.density_mlp().forward(gl, sc.density_c[static_cast<size_t>(i)])[0];
        const std::vector<double>& c = fs.color_mlp().forward(gl, sc.color_c[static_cast<size_t>(i)]);
        for (int k = 0; k < 3; ++k) sc.head_a[static_cast<size_t>(i) * 3 + k] = c[static_cast<size_t>(k)];
      }
      const CompositeWeights cw = composite_weights(sc.sigma, samples.delta);
      double rendered[3] = {0, 0, 0};
      for (int i = 0; i < n; ++i)
        for (int k = 0; k < 3; ++k) rendered[k] += cw.w[static_cast<size_t>(i)] * sc.head_a[static_cast<size_t>(i) * 3 + k];
      double l = 0.0;
      for (int k = 0; k < 3; ++k) {
        const double e = rendered[k] - rt.target[static_cast<size_t>(k)];
        l += e * e;
      }
      loss.rgb += l / 3.0 / batch.rgb_rays.size();

      if (with_grad && train_geometry) {
        const double scale = cfg.w_rgb * 2.0 / 3.0 / batch.rgb_rays.size();
        for (int k = 0; k < 3; ++k) dvalue[static_cast<size_t>(k)] = scale * (rendered[k] - rt.target[static_cast<size_t>(k)]);
        for (int i = 0; i < n; ++i) {
          double s = 0.0;
          for (int k = 0; k < 3; ++k) s += sc.head_a[static_cast<size_t>(i) * 3 + k] * dvalue[static_cast<size_t>(k)];
          dw[static_cast<size_t>(i)] = s;
        }
        detail::composite_sigma_grad(sc.sigma, samples.delta, cw, dw, dsigma);
        for (int i = 0; i < n; ++i) {
          std::fill(dlatent_acc.begin(), dlatent_acc.begin() + geo_dim, 0.0);
          // color head
          double dcol[3];
          for (int k = 0; k < 3; ++k) dcol[k] = cw.w[static_cast<size_t>(i)] * dvalue[static_cast<size_t>(k)];
          fs.color_mlp().backward(dcol, sc.color_c[static_cast<size_t>(i)], dlatent.data());
          for (int k = 0; k < geo_dim; ++k) dlatent_acc[static_cast<size_t>(k)] += dlatent[static_cast<size_t>(k)];
          // density head
          const double ds = dsigma[static_cast<size_t>(i)];
          fs.density_mlp().backward(&ds, sc.density_c[static_cast<size_t>(i)], dlatent.data());
          for (int k = 0; k < geo_dim; ++k) dlatent_acc[static_cast<size_t>(k)] += dlatent[static_cast<size_t>(k)];
          fs.geo_grid().backward(sc.geo_q[static_cast<size_t>(i)], dlatent_acc.data());
        }
      }
    }
  }

  // --- token rays ---
  if (do_vi || do_vd) {
    Tensor& dsc = fs.dec_scale();
    const double s_val = dsc.v[0];
    for (const RayTarget& rt : batch.token_rays) {
      const RaySamples samples = sample_ray(rt.ray, n, &jitter);
      double enc[kDirEncodingDim];
      dir_encoding(rt.ray.direction, enc);
      for (int i = 0; i < n; ++i) {
        // geometry gives the weights; token branch gives the values
        double* gl = sc.geo_latent.data() + static_cast<size_t>(i) * (geo_dim + kDirEncodingDim);
        fs.geo_grid().query(samples.position[static_cast<size_t>(i)], gl, &sc.geo_q[static_cast<size_t>(i)]);
        sc.sigma[static_cast<size_t>(i)] = fs.density_mlp().forward(gl, sc.density_c[static_cast<size_t>(i)])[0];

        double* tl = sc.tok_latent.data() + static_cast<size_t>(i) * (tok_dim + kDirEncodingDim);
        fs.tok_grid().query(samples.position[static_cast<size_t>(i)], tl, &sc.tok_q[static_cast<size_t>(i)]);
        for (int k = 0; k < kDirEncodingDim; ++k) tl[tok_dim + k] = enc[k];
        const std::vector<double>& fvi = fs.vi_mlp().forward(tl, sc.vi_c[static_cast<size_t>(i)]);
        const std::vector<double>& dvd = fs.vd_mlp().forward(tl, sc.vd_c[static_cast<size_t>(i)]);
        double* f_vi = sc.f_vi.data() + static_cast<size_t>(i) * latent;
        double* f_vd = sc.f_vd.data() + static_cast<size_t>(i) * latent;
        for (int k = 0; k < latent; ++k) {
          f_vi[k] = fvi[static_cast<size_t>(k)];
          f_vd[k] = fvi[static_cast<size_t>(k)] + dvd[static_cast<size_t>(k)];
        }
        auto normalize = [&](const double* f, double* fn, double& r) {
          double nn = 0.0;
          for (int k = 0; k < latent; ++k) nn += f[k] * f[k];
          r = std::max(std::sqrt(nn), FieldSet::kNormEps);
          for (int k = 0; k < latent; ++k) fn[k] = s_val * f[k] / r;
        };
        double* fn_vi = sc.fn_vi.data() + static_cast<size_t>(i) * latent;
        double* fn_vd = sc.fn_vd.data() + static_cast<size_t>(i) * latent;
        normalize(f_vi, fn_vi, sc.r_vi[static_cast<size_t>(i)]);
        normalize(f_vd, fn_vd, sc.r_vd[static_cast<size_t>(i)]);
        if (do_vi) {
          const std::vector<double>& t = fs.shared_decoder().forward(fn_vi, sc.dec_vi_c[static_cast<size_t>(i)]);
          std::copy(t.begin(), t.end(), sc.head_a.begin() + static_cast<size_t>(i) * d_tok);
        }
        if (do_vd) {
          const std::vector<double>& t = fs.shared_decoder().forward(fn_vd, sc.dec_vd_c[static_cast<size_t>(i)]);
          std::copy(t.begin(), t.end(), sc.head_b.begin() + static_cast<size_t>(i) * d_tok);
        }
      }
      const CompositeWeights cw = composite_weights(sc.sigma, samples.delta);

      // losses and head-value gradients for both token heads
      for (int head = 0; head < 2; ++head) {
        if ((head == 0 && !do_vi) || (head == 1 && !do_vd)) continue;
        const std::vector<double>& values = head == 0 ? sc.head_a : sc.head_b;
        VecD rendered(static_cast<size_t>(d_tok), 0.0);
        for (int i = 0; i < n; ++i)
          for (int k = 0; k < d_tok; ++k)
            rendered[static_cast<size_t>(k)] += cw.w[static_cast<size_t>(i)] * values[static_cast<size_t>(i) * d_tok + k];
        double l = 0.0;
        for (int k = 0; k < d_tok; ++k) {
          const double e = rendered[static_cast<size_t>(k)] - rt.target[static_cast<size_t>(k)];
          l += e * e;
        }
        l /= d_tok * batch.token_rays.size();
        const double weight = head == 0 ? cfg.w_token_vi : cfg.w_token_vd;
        (head == 0 ? loss.token_vi : loss.token_vd) += l;
        if (!with_grad) continue;

        const double scale = weight * 2.0 / d_tok / batch.token_rays.size();
        for (int k = 0; k < d_tok; ++k)
          dvalue[static_cast<size_t>(k)] = scale * (rendered[static_cast<size_t>(k)] - rt.target[static_cast<size_t>(k)]);

        if (train_geometry) {
          for (int i = 0; i < n; ++i) {
            double s = 0.0;
            for (int k = 0; k < d_tok; ++k) s += values[static_cast<size_t>(i) * d_tok + k] * dvalue[static_cast<size_t>(k)];
            dw[static_cast<size_t>(i)] = s;
          }
          detail::composite_sigma_grad(sc.sigma, samples.delta, cw, dw, dsigma);
          for (int i = 0; i < n; ++i) {
            const double ds = dsigma[static_cast<size_t>(i)];
            fs.density_mlp().backward(&ds, sc.density_c[static_cast<size_t>(i)], dlatent.data());
            fs.geo_grid().backward(sc.geo_q[static_cast<size_t>(i)], dlatent.data());
          }
        }
        if (train_token) {
          for (int i = 0; i < n; ++i) {
            const double w = cw.w[static_cast<size_t>(i)];
            if (w == 0.0) continue;
            std::vector<double> dt(static_cast<size_t>(d_tok));
            for (int k = 0; k < d_tok; ++k) dt[static_cast<size_t>(k)] = w * dvalue[static_cast<size_t>(k)];
            MlpCache& dec_c = head == 0 ? sc.dec_vi_c[static_cast<size_t>(i)] : sc.dec_vd_c[static_cast<size_t>(i)];
            fs.shared_decoder().backward(dt.data(), dec_c, dfn.data());
            // norm-scale backward: fn = s * f / r
            const double* f = (head == 0 ? sc.f_vi : sc.f_vd).data() + static_cast<size_t>(i) * latent;
            const double r = head == 0 ? sc.r_vi[static_cast<size_t>(i)] : sc.r_vd[static_cast<size_t>(i)];
            double fg = 0.0;  // f . dfn
            for (int k = 0; k < latent; ++k) fg += f[k] * dfn[static_cast<size_t>(k)];
            dsc.ensure_grad();
            dsc.g[0] += fg / r;
            double fdot = 0.0;
            for (int k = 0; k < latent; ++k) fdot += f[k] * f[k];
            const bool clipped = std::sqrt(fdot) < FieldSet::kNormEps;
            for (int k = 0; k < latent; ++k) {
              df[static_cast<size_t>(k)] = clipped
                  ? s_val / r * dfn[static_cast<size_t>(k)]
                  : s_val / r * (dfn[static_cast<size_t>(k)] - fg * f[k] / (r * r));
            }
            // route into vi (and vd for the VD head)
            std::fill(dlatent_acc.begin(), dlatent_acc.begin() + tok_dim, 0.0);
            if (head == 1) {
              fs.vd_mlp().backward(df.data(), sc.vd_c[static_cast<size_t>(i)], dlatent.data());
              for (int k = 0; k < tok_dim; ++k) dlatent_acc[static_cast<size_t>(k)] += dlatent[static_cast<size_t>(k)];
            }
            fs.vi_mlp().backward(df.data(), sc.vi_c[static_cast<size_t>(i)], dlatent.data());
            for (int k = 0; k < tok_dim; ++k) dlatent_acc[static_cast<size_t>(k)] += dlatent[static_cast<size_t>(k)];
            fs.tok_grid().backward(sc.tok_q[static_cast<size_t>(i)], dlatent_acc.data());
          }
        }
      }
    }
  }

  loss.total = cfg.w_rgb * loss.rgb + cfg.w_token_vi * loss.token_vi + cfg.w_token_vd * loss.token_vd;
  return loss;
}

inline std::string parameter_norm_diagnostics(FieldSet& fs) {
  std::ostringstream os;
  for (Tensor* t : fs.all_params()) os << t->name << "=" << t->value_norm() << " ";
  return os.str();
}

// Zero grads, forward/backward, sanity-check, optimizer step.
inline LossTerms train_step(FieldSet& fs, Adam& opt, const TrainBatch& batch,
                            const TrainConfig& cfg, bool train_geometry = true,
                            bool train_token = true) {
  for (Tensor* t : fs.all_params()) t->zero_grad();
  const LossTerms loss = field_forward_backward(fs, batch, cfg, true, train_geometry, train_token);
  if (!std::isfinite(loss.total))
    throw divergence_error("non-finite loss in train_step; parameter norms: " +
                           parameter_norm_diagnostics(fs));
  opt.step();
  return loss;
}

// Seeded batch construction: rgb rays from all views, token rays through the
// feature-grid cell centers of the selected supervision frames.
inline TrainBatch make_training_batch(const TeacherOutputs& teacher,
                                      const std::vector<int>& token_frames, const Aabb& bounds,
                                      const TrainConfig& cfg, Pcg32& rng) {
  TrainBatch batch;
  batch.sample_seed = (static_cast<uint64_t>(rng.next()) << 32) | rng.next();
  const int n_views = static_cast<int>(teacher.views.size());
  for (int i = 0; i < cfg.rays_per_batch; ++i) {
    const int v = static_cast<int>(rng.uniform_int(static_cast<uint32_t>(n_views)));
    const CameraPose& pose = teacher.poses[static_cast<size_t>(v)];
    const int x = static_cast<int>(rng.uniform_int(static_cast<uint32_t>(pose.width)));
    const int y = static_cast<int>(rng.uniform_int(static_cast<uint32_t>(pose.height)));
    RayTarget rt;
    rt.ray = camera_ray(pose, x + 0.5, y + 0.5, bounds);
    rt.ray.view = v;
    const size_t px = (static_cast<size_t>(y) * pose.width + x) * 3;
    rt.target = {teacher.views[static_cast<size_t>(v)].rgb[px],
                 teacher.views[static_cast<size_t>(v)].rgb[px + 1],
                 teacher.views[static_cast<size_t>(v)].rgb[px + 2]};
    batch.rgb_rays.push_back(std::move(rt));
  }
  if (!token_frames.empty()) {
    const int fr = teacher.token_res;
    for (int i = 0; i < cfg.token_rays_per_batch; ++i) {
      const int v = token_frames[rng.uniform_int(static_cast<uint32_t>(token_frames.size()))];
      const CameraPose& pose = teacher.poses[static_cast<size_t>(v)];
      const int cell = static_cast<int>(rng.uniform_int(static_cast<uint32_t>(fr * fr)));
      const int ci = cell / fr, cj = cell % fr;
      RayTarget rt;
      rt.ray = camera_ray(pose, (cj + 0.5) / fr * pose.width, (ci + 0.5) / fr * pose.height, bounds);
      rt.ray.view = v;
      const double* tok = teacher.views[static_cast<size_t>(v)].token.data() +
                          static_cast<size_t>(cell) * teacher.d_tok;
      rt.target.assign(tok, tok + teacher.d_tok);
      batch.token_rays.push_back(std::move(rt));
    }
  }
  return batch;
}

struct FitResult {
  std::vector<LossTerms> curve;
};

// End-to-end fit: geometry first then token branch (default), or jointly.
inline FitResult fit_token_field(FieldSet& fs, const TeacherOutputs& teacher,
                                 const std::vector<int>& token_frames, const TrainConfig& cfg) {
  cfg.validate();
  if (teacher.d_tok != cfg.d_tok)
    throw std::invalid_argument("teacher token dimensionality does not match config");
  Pcg32 rng(cfg.seed, 41);
  FitResult result;
  Adam opt(cfg.lr_grid);
  {
    // grids train at the base rate, decoder stacks at lr_decoder
    std::vector<Tensor*> grid_params = fs.geo_grid().params();
    for (Tensor* t : fs.tok_grid().params()) grid_params.push_back(t);
    for (Tensor* t : fs.all_params()) t->lr_scale = cfg.lr_decoder / cfg.lr_grid;
    for (Tensor* t : grid_params) t->lr_scale = 1.0;
  }
  opt.attach(fs.all_params());

  const int geom_steps = cfg.sequential
      ? static_cast<int>(std::lround(cfg.steps * cfg.geometry_fraction)) : 0;
  for (int step = 0; step < cfg.steps; ++step) {
    TrainBatch batch = make_training_batch(teacher, token_frames, fs.bounds(), cfg, rng);
    bool train_geometry = true, train_token = true;
    TrainConfig step_cfg = cfg;
    if (cfg.sequential) {
      if (step < geom_steps) {
        train_token = false;
        step_cfg.w_token_vi = 0.0;
        step_cfg.w_token_vd = 0.0;
        batch.token_rays.clear();
      } else {
        train_geometry = false;
        step_cfg.w_rgb = 0.0;
        batch.rgb_rays.clear();
      }
    }
    for (Tensor* t : fs.all_params()) t->zero_grad();
    const LossTerms loss =
        field_forward_backward(fs, batch, step_cfg, true, train_geometry, train_token);
    if (!std::isfinite(loss.total) || loss.total > cfg.divergence_threshold)
      throw divergence_error("training diverged at step " + std::to_string(step) +
                             " (loss=" + std::to_string(loss.total) + "); parameter norms: " +
                             parameter_norm_diagnostics(fs));
    opt.step();
    result.curve.push_back(loss);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Inference helpers
// ---------------------------------------------------------------------------

struct FieldRayRender {
  VecD rgb, t_vi, t_vd;
  double opacity = 0, depth = 0;
};

inline FieldRayRender render_field_ray(FieldSet& fs, const Ray& ray, int n_samples,
                                       bool with_tokens = true, bool with_rgb = false) {
  const RaySamples samples = sample_ray(ray, n_samples);
  const int geo_dim = fs.geo_grid().output_dim();
  const int tok_dim = fs.tok_grid().output_dim();
  std::vector<double> latent(static_cast<size_t>(std::max(geo_dim, tok_dim) + kDirEncodingDim));
  double enc[kDirEncodingDim];
  dir_encoding(ray.direction, enc);
  std::vector<double> sigma(static_cast<size_t>(n_samples));
  const int d_tok = fs.d_tok();
  std::vector<double> vi_vals, vd_vals, rgb_vals;
  if (with_tokens) {
    vi_vals.resize(static_cast<size_t>(n_samples) * d_tok);
    vd_vals.resize(static_cast<size_t>(n_samples) * d_tok);
  }
  if (with_rgb) rgb_vals.resize(static_cast<size_t>(n_samples) * 3);
  MlpCache c;
  for (int i = 0; i < n_samples; ++i) {
    fs.geo_grid().query(samples.position[static_cast<size_t>(i)], latent.data());
    for (int k = 0; k < kDirEncodingDim; ++k) latent[static_cast<size_t>(geo_dim + k)] = enc[k];
    sigma[static_cast<size_t>(i)] = fs.density_mlp().forward(latent.data(), c)[0];
    if (with_rgb) {
      const std::vector<double>& col = fs.color_mlp().forward(latent.data(), c);
      for (int k = 0; k < 3; ++k) rgb_vals[static_cast<size_t>(i) * 3 + k] = col[static_cast<size_t>(k)];
    }
    if (with_tokens) {
      const FieldSet::TokenQuery q =
          fs.forward_token(samples.position[static_cast<size_t>(i)], ray.direction);
      std::copy(q.t_vi.begin(), q.t_vi.end(), vi_vals.begin() + static_cast<size_t>(i) * d_tok);
      std::copy(q.t_vd.begin(), q.t_vd.end(), vd_vals.begin() + static_cast<size_t>(i) * d_tok);
    }
  }
  FieldRayRender out;
  if (with_tokens) {
    const Rendered rvi = render_along_ray(sigma, samples.delta, samples.t, vi_vals, static_cast<size_t>(d_tok));
    const Rendered rvd = render_along_ray(sigma, samples.delta, samples.t, vd_vals, static_cast<size_t>(d_tok));
    out.t_vi = rvi.value;
    out.t_vd = rvd.value;
    out.opacity = rvi.opacity;
    out.depth = rvi.depth;
  }
  if (with_rgb) {
    const Rendered rr = render_along_ray(sigma, samples.delta, samples.t, rgb_vals, 3);
    out.rgb = rr.value;
    out.opacity = rr.opacity;
    out.depth = rr.depth;
  }
  if (!with_tokens && !with_rgb) {
    const Rendered rr = render_along_ray(sigma, samples.delta, samples.t,
                                         std::vector<double>(static_cast<size_t>(n_samples), 0.0), 1);
    out.opacity = rr.opacity;
    out.depth = rr.depth;
  }
  return out;
}

enum class TokenHead { VI, VD };

// Renders the low-resolution token map of a view from the fitted field.
inline std::vector<double> render_token_view(FieldSet& fs, const CameraPose& pose, int token_res,
                                             int n_samples, TokenHead head) {
  const int d_tok = fs.d_tok();
  std::vector<double> out(static_cast<size_t>(token_res) * token_res * d_tok, 0.0);
  for (int i = 0; i < token_res; ++i) {
    for (int j = 0; j < token_res; ++j) {
      const Ray ray = camera_ray(pose, (j + 0.5) / token_res * pose.width,
                                 (i + 0.5) / token_res * pose.height, fs.bounds());
      const FieldRayRender r = render_field_ray(fs, ray, n_samples, true, false);
      const VecD& t = head == TokenHead::VI ? r.t_vi : r.t_vd;
      std::copy(t.begin(), t.end(),
                out.begin() + (static_cast<size_t>(i) * token_res + j) * d_tok);
    }
  }
  return out;
}

// mean ||delta_VD|| / mean ||f_VI|| over seeded random position/direction pairs.
inline double vd_deviation_ratio(FieldSet& fs, int n, uint64_t seed) {
  Pcg32 rng(seed, 17);
  double sum_delta = 0.0, sum_fvi = 0.0;
  const Aabb& b = fs.bounds();
  for (int i = 0; i < n; ++i) {
    const Vec3 p{rng.uniform(b.lo.x, b.hi.x), rng.uniform(b.lo.y, b.hi.y),
                 rng.uniform(b.lo.z, b.hi.z)};
    const FieldSet::TokenQuery q = fs.forward_token(p, rng.unit_vector());
    sum_delta += norm(q.delta_vd);
    sum_fvi += norm(q.f_vi);
  }
  return sum_delta / std::max(sum_fvi, 1e-300);
}

// ---------------------------------------------------------------------------
// Checkpoints (tensor directory + fieldset.json descriptor)
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"steps", c.steps},
          {"rays_per_batch", c.rays_per_batch},
          {"token_rays_per_batch", c.token_rays_per_batch},
          {"samples_per_ray", c.samples_per_ray},
          {"lr_grid", c.lr_grid},
          {"lr_decoder", c.lr_decoder},
          {"w_rgb", c.w_rgb},
          {"w_token_vi", c.w_token_vi},
          {"w_token_vd", c.w_token_vd},
          {"latent_dim", c.latent_dim},
          {"d_tok", c.d_tok},
          {"seed", c.seed},
          {"grid_resolutions", c.grid_resolutions},
          {"grid_features", c.grid_features},
          {"hidden", c.hidden},
          {"dec_hidden", c.dec_hidden},
          {"sequential", c.sequential},
          {"geometry_fraction", c.geometry_fraction}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.steps = j.value("steps", c.steps);
  c.rays_per_batch = j.value("rays_per_batch", c.rays_per_batch);
  c.token_rays_per_batch = j.value("token_rays_per_batch", c.token_rays_per_batch);
  c.samples_per_ray = j.value("samples_per_ray", c.samples_per_ray);
  c.lr_grid = j.value("lr_grid", c.lr_grid);
  c.lr_decoder = j.value("lr_decoder", c.lr_decoder);
  c.w_rgb = j.value("w_rgb", c.w_rgb);
  c.w_token_vi = j.value("w_token_vi", c.w_token_vi);
  c.w_token_vd = j.value("w_token_vd", c.w_token_vd);
  c.latent_dim = j.value("latent_dim", c.latent_dim);
  c.d_tok = j.value("d_tok", c.d_tok);
  c.seed = j.value("seed", c.seed);
  c.grid_resolutions = j.value("grid_resolutions", c.grid_resolutions);
  c.grid_features = j.value("grid_features", c.grid_features);
  c.hidden = j.value("hidden", c.hidden);
  c.dec_hidden = j.value("dec_hidden", c.dec_hidden);
  c.sequential = j.value("sequential", c.sequential);
  c.geometry_fraction = j.value("geometry_fraction", c.geometry_fraction);
  return c;
}

inline void save_fieldset(FieldSet& fs, const std::filesystem::path& dir) {
  TensorDirWriter w(dir);
  for (Tensor* t : fs.all_params())
    w.add(t->name, {static_cast<int64_t>(t->size())}, t->v);
  w.finish();
  nlohmann::json j;
  j["config"] = to_json(fs.config());
  j["bounds"] = {{"lo", to_json(fs.bounds().lo)}, {"hi", to_json(fs.bounds().hi)}};
  std::ofstream out(dir / "fieldset.json");
  out << j.dump(2) << "\n";
}

inline FieldSet load_fieldset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "fieldset.json");
  if (!in) throw std::runtime_error("missing fieldset.json in " + dir.string());
  nlohmann::json j;
  in >> j;
  const TrainConfig cfg = train_config_from_json(j.at("config"));
  Aabb bounds;
  bounds.lo = vec3_from_json(j.at("bounds").at("lo"));
  bounds.hi = vec3_from_json(j.at("bounds").at("hi"));
  FieldSet fs(cfg, bounds);
  TensorDirReader r(dir);
  for (Tensor* t : fs.all_params()) {
    std::vector<double> v = r.read(t->name);
    if (v.size() != t->size())
      throw std::runtime_error("checkpoint tensor size mismatch for " + t->name);
    t->v = std::move(v);
  }
  return fs;
}

}  // namespace osf
