#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "osf/fields.hpp"
#include "osf/scenegen.hpp"
#include "oracles.hpp"

using namespace osf;

namespace {

TrainConfig small_config(uint64_t seed) {
  TrainConfig cfg;
  cfg.seed = seed;
  cfg.grid_resolutions = {4, 8};
  cfg.grid_features = 2;
  cfg.hidden = 8;
  cfg.dec_hidden = 12;
  cfg.latent_dim = 4;
  cfg.d_tok = 8;
  cfg.samples_per_ray = 8;
  cfg.rays_per_batch = 6;
  cfg.token_rays_per_batch = 6;
  return cfg;
}

struct SmallWorld {
  SceneSpec spec;
  TeacherOutputs teacher;
  Aabb bounds;
};

SmallWorld small_world(uint64_t seed, double vd_scale = 0.0, int views = 4) {
  RandomSceneOptions opt;
  opt.d_tok = 8;
  opt.d_lab = 4;
  opt.vd_scale = vd_scale;
  SmallWorld w;
  w.spec = make_random_scene(1, seed, opt);
  w.bounds = w.spec.bounds;
  TrajectoryOptions topt;
  topt.height = topt.width = 24;
  TeacherOptions teo;
  teo.token_res = 9;
  w.teacher = render_teacher_views(build_scene(w.spec), make_trajectory(w.spec, views, topt), teo);
  return w;
}

}  // namespace

TEST_CASE("init_fields determinism and shapes") {
  SECTION("same seed gives bit-identical parameters") {
    TrainConfig cfg = small_config(11);
    FieldSet a = init_fields(cfg, {{-1, -1, -1}, {1, 1, 1}});
    FieldSet b = init_fields(cfg, {{-1, -1, -1}, {1, 1, 1}});
    auto pa = a.all_params(), pb = b.all_params();
    REQUIRE(pa.size() == pb.size());
    for (size_t i = 0; i < pa.size(); ++i) REQUIRE(pa[i]->v == pb[i]->v);
  }
  SECTION("configured latent dim flows through the decoders") {
    TrainConfig cfg = small_config(3);
    cfg.latent_dim = 6;
    FieldSet fs = init_fields(cfg, {{-1, -1, -1}, {1, 1, 1}});
    const auto q = fs.forward_token({0.1, 0.2, -0.3}, {0, 0, 1});
    CHECK(q.f_vi.size() == 6);
    CHECK(q.delta_vd.size() == 6);
    CHECK(q.t_vi.size() == 8);
    CHECK(q.t_vd.size() == 8);
  }
  SECTION("default level resolutions") {
    const TrainConfig cfg;
    CHECK(cfg.grid_resolutions == std::vector<int>{16, 32, 64, 128});
  }
}

TEST_CASE("forward_token structure") {
  TrainConfig cfg = small_config(21);
  FieldSet fs = init_fields(cfg, {{-1, -1, -1}, {1, 1, 1}});

  SECTION("zero-initialized deviation decoder makes t_VD equal t_VI exactly") {
    Pcg32 rng(5);
    for (int i = 0; i < 20; ++i) {
      const Vec3 p{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
      const auto q = fs.forward_token(p, rng.unit_vector());
      for (size_t k = 0; k < q.t_vi.size(); ++k) REQUIRE(q.t_vd[k] == q.t_vi[k]);
      for (double d : q.delta_vd) REQUIRE(d == 0.0);
    }
  }
  SECTION("t_VI is bitwise invariant to the query direction") {
    // give the deviation decoder nonzero weights first
    Pcg32 noise(9);
    for (Tensor* t : fs.vd_mlp().params())
      for (double& v : t->v) v = noise.uniform(-0.3, 0.3);
    const Vec3 p{0.2, -0.1, 0.4};
    const auto a = fs.forward_token(p, {0, 0, 1});
    const auto b = fs.forward_token(p, normalized(Vec3{1, 1, 0}));
    REQUIRE(a.t_vi == b.t_vi);
    CHECK(a.t_vd != b.t_vd);
  }
  SECTION("token query is continuous in position") {
    const Vec3 p{0.13, 0.21, -0.34};
    const auto q0 = fs.forward_token(p, {0, 0, 1});
    double prev = 1e9;
    for (double eps : {1e-2, 1e-4, 1e-6}) {
      const auto q1 = fs.forward_token(p + Vec3{eps, eps, eps}, {0, 0, 1});
      double diff = 0;
      for (size_t k = 0; k < q0.t_vi.size(); ++k) diff += std::abs(q1.t_vi[k] - q0.t_vi[k]);
      CHECK(diff < prev);
      prev = diff;
    }
    CHECK(prev < 1e-4);
  }
  SECTION("out-of-bounds query clamps and flags") {
    const auto q = fs.forward_token({5, 5, 5}, {0, 0, 1});
    CHECK(q.clamped);
    const auto edge = fs.forward_token({1, 1, 1}, {0, 0, 1});
    REQUIRE(q.t_vi == edge.t_vi);
  }
  SECTION("shared decoder is one parameter set") {
    CHECK(&fs.shared_decoder() == &fs.shared_decoder());
    // both heads flow through the same tensors: nudging one changes both
    const Vec3 p{0.2, 0.0, 0.1};
    const auto before = fs.forward_token(p, {0, 0, 1});
    fs.shared_decoder().params()[0]->v[0] += 0.5;
    const auto after = fs.forward_token(p, {0, 0, 1});
    CHECK(after.t_vi[0] != before.t_vi[0]);
    CHECK(after.t_vd[0] != before.t_vd[0]);
  }
}

TEST_CASE("density is non-negative everywhere") {
  TrainConfig cfg = small_config(31);
  FieldSet fs = init_fields(cfg, {{-1, -1, -1}, {1, 1, 1}});
  Pcg32 noise(1);
  for (Tensor* t : fs.all_params())
    for (double& v : t->v) v += noise.uniform(-2.0, 2.0);
  Pcg32 rng(2);
  for (int i = 0; i < 200; ++i) {
    const Vec3 p{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    CHECK(fs.density(p) >= 0.0);
  }
}

TEST_CASE("analytic gradients match central finite differences") {
  for (uint64_t seed : {1u, 2u, 3u}) {
    SmallWorld w = small_world(seed, 0.6);
    TrainConfig cfg = small_config(seed);
    FieldSet fs = init_fields(cfg, w.bounds);
    // move off the zero-initialized deviation decoder so its path is live
    Pcg32 noise(seed);
    for (Tensor* t : fs.vd_mlp().params())
      for (double& v : t->v) v += noise.uniform(-0.2, 0.2);

    Pcg32 rng(seed, 2);
    const TrainBatch batch = make_training_batch(w.teacher, {0, 1}, w.bounds, cfg, rng);

    for (Tensor* t : fs.all_params()) t->zero_grad();
    field_forward_backward(fs, batch, cfg, true, true, true);

    auto loss_fn = [&]() {
      return field_forward_backward(fs, batch, cfg, false, true, true).total;
    };

    // probe the strongest-gradient entry of a representative parameter from
    // every trainable stage
    std::vector<Tensor*> probes = {
        fs.geo_grid().params()[0],  fs.tok_grid().params()[1], fs.density_mlp().params()[0],
        fs.color_mlp().params()[0], fs.vi_mlp().params()[0],   fs.vd_mlp().params()[0],
        fs.shared_decoder().params()[0], &fs.dec_scale()};
    int checked = 0;
    for (Tensor* t : probes) {
      t->ensure_grad();
      size_t best = 0;
      for (size_t i = 0; i < t->size(); ++i)
        if (std::abs(t->g[i]) > std::abs(t->g[best])) best = i;
      const double g = t->g[best];
      if (std::abs(g) < 1e-10) continue;  // path inactive in this batch
      const double h = 1e-5 * std::max(1.0, std::abs(t->v[best]));
      const double fd = oracles::central_difference(&t->v[best], h, loss_fn);
      const double rel = std::abs(fd - g) / std::max({std::abs(fd), std::abs(g), 1e-12});
      INFO(t->name << "[" << best << "] analytic=" << g << " fd=" << fd);
      CHECK(rel < 1e-4);
      ++checked;
    }
    CHECK(checked >= 5);
  }
}

TEST_CASE("zero token weights leave the token branch untouched") {
  SmallWorld w = small_world(4);
  TrainConfig cfg = small_config(4);
  cfg.w_token_vi = 0.0;
  cfg.w_token_vd = 0.0;
  FieldSet fs = init_fields(cfg, w.bounds);
  std::vector<std::vector<double>> before;
  for (Tensor* t : fs.token_params()) before.push_back(t->v);
  Adam opt(cfg.lr_grid);
  opt.attach(fs.all_params());
  Pcg32 rng(4, 2);
  for (int step = 0; step < 5; ++step) {
    const TrainBatch batch = make_training_batch(w.teacher, {0}, w.bounds, cfg, rng);
    train_step(fs, opt, batch, cfg);
  }
  size_t i = 0;
  for (Tensor* t : fs.token_params()) REQUIRE(t->v == before[i++]);
  // geometry did move
  CHECK(fs.geo_grid().params()[0]->v != std::vector<double>(fs.geo_grid().params()[0]->size(), 0.0));
}

TEST_CASE("loss decreases over 200 joint steps on a one-sphere scene") {
  SmallWorld w = small_world(7);
  TrainConfig cfg = small_config(7);
  cfg.steps = 200;
  cfg.rays_per_batch = 32;
  cfg.token_rays_per_batch = 16;
  cfg.sequential = false;
  FieldSet fs = init_fields(cfg, w.bounds);
  const FitResult fit = fit_token_field(fs, w.teacher, {0, 1, 2, 3}, cfg);
  REQUIRE(fit.curve.size() == 200);
  // moving average, window 20
  std::vector<double> smooth;
  for (size_t i = 0; i + 20 <= fit.curve.size(); ++i) {
    double s = 0;
    for (size_t j = i; j < i + 20; ++j) s += fit.curve[j].total;
    smooth.push_back(s / 20);
  }
  CHECK(smooth.back() < 0.5 * smooth.front());
  int increases = 0;
  for (size_t i = 1; i < smooth.size(); ++i)
    if (smooth[i] > smooth[i - 1] + 0.02 * smooth.front()) ++increases;
  CHECK(increases == 0);
}

TEST_CASE("divergent training aborts with diagnostics") {
  SmallWorld w = small_world(9);
  TrainConfig cfg = small_config(9);
  cfg.steps = 30;
  cfg.sequential = false;

  SECTION("non-finite loss") {
    FieldSet fs = init_fields(cfg, w.bounds);
    // output-layer bias: past the relus, so the NaN reaches the loss
    fs.density_mlp().params().back()->v[0] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(fit_token_field(fs, w.teacher, {0}, cfg), divergence_error);
  }
  SECTION("exploding loss") {
    FieldSet fs = init_fields(cfg, w.bounds);
    fs.dec_scale().v[0] = 1e12;  // token head outputs blow past the threshold
    CHECK_THROWS_AS(fit_token_field(fs, w.teacher, {0}, cfg), divergence_error);
  }
  SECTION("diagnostics carry parameter norms") {
    FieldSet fs = init_fields(cfg, w.bounds);
    fs.dec_scale().v[0] = 1e12;
    try {
      fit_token_field(fs, w.teacher, {0}, cfg);
      FAIL("expected divergence");
    } catch (const divergence_error& e) {
      CHECK(std::string(e.what()).find("dec_scale") != std::string::npos);
    }
  }
}

TEST_CASE("checkpoint round-trip preserves behaviour to storage precision") {
  namespace stdfs = std::filesystem;
  SmallWorld w = small_world(13);
  TrainConfig cfg = small_config(13);
  cfg.steps = 40;
  cfg.sequential = false;
  FieldSet fs = init_fields(cfg, w.bounds);
  fit_token_field(fs, w.teacher, {0, 1}, cfg);

  const stdfs::path dir = stdfs::temp_directory_path() / "osf_fieldset_ckpt";
  save_fieldset(fs, dir);
  FieldSet back = load_fieldset(dir);
  Pcg32 rng(1);
  for (int i = 0; i < 30; ++i) {
    const Vec3 p{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    const Vec3 d = rng.unit_vector();
    CHECK(std::abs(fs.density(p) - back.density(p)) < 1e-4);
    const auto qa = fs.forward_token(p, d);
    const auto qb = back.forward_token(p, d);
    for (size_t k = 0; k < qa.t_vi.size(); ++k) {
      CHECK(std::abs(qa.t_vi[k] - qb.t_vi[k]) < 1e-4);
      CHECK(std::abs(qa.t_vd[k] - qb.t_vd[k]) < 1e-4);
    }
  }
  stdfs::remove_all(dir);
}
