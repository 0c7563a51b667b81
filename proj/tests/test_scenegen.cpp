#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "osf/scenegen.hpp"
#include "oracles.hpp"

using namespace osf;

namespace {

// Two-object fixture with hand-picked teacher parameters (D_tok = 2).
SceneSpec two_sphere_spec() {
  SceneSpec spec;
  spec.seed = 5;
  spec.bounds = {{-1, -1, -1}, {1, 1, 1}};
  for (int o = 0; o < 2; ++o) {
    ObjectSpec obj;
    obj.id = o + 1;
    const double cx = o == 0 ? -0.5 : 0.5;
    obj.primitive = {Primitive::Kind::Sphere, {cx, 0, 0}, {0.3, 0.3, 0.3}};
    PartSpec part;
    part.id = obj.id * 100 + 1;
    part.primitive = {Primitive::Kind::Sphere, {cx, 0, 0}, {0.15, 0.15, 0.15}};
    SubPartSpec sub;
    sub.id = part.id * 100 + 1;
    sub.primitive = {Primitive::Kind::Sphere, {cx, 0, 0}, {0.07, 0.07, 0.07}};
    part.sub_parts.push_back(sub);
    obj.parts.push_back(part);
    obj.base_token = o == 0 ? VecD{1.0, 2.0} : VecD{-1.0, 0.5};
    obj.vd_amplitude = o == 0 ? VecD{0.5, -1.0} : VecD{0.0, 0.0};
    obj.vd_axis = {0, 0, 1};
    obj.label_embedding = o == 0 ? VecD{1, 0} : VecD{0, 1};
    obj.color = {1.0 * (1 - o), 0.2, 1.0 * o};
    spec.objects.push_back(obj);
  }
  return spec;
}

}  // namespace

TEST_CASE("oracle point queries") {
  const SceneOracle oracle = build_scene(two_sphere_spec());

  SECTION("empty space: zero density, zero token") {
    const Vec3 p{0, 0.9, 0};
    CHECK(oracle.density(p) == 0.0);
    const VecD t = oracle.token(p, {0, 0, 1});
    for (double v : t) CHECK(v == 0.0);
    CHECK(oracle.instance_id(p, Scale::Large) == -1);
  }
  SECTION("zero amplitude object returns base token for any direction") {
    const Vec3 p{0.5, 0, 0};
    for (const Vec3& d : {Vec3{0, 0, 1}, Vec3{1, 0, 0}, Vec3{0, -1, 0}}) {
      const VecD t = oracle.token(p, d);
      CHECK(t[0] == -1.0);
      CHECK(t[1] == 0.5);
    }
  }
  SECTION("direction along vd_axis adds the full amplitude") {
    // hand evaluation: base + amplitude = (1 + 0.5, 2 - 1) = (1.5, 1.0)
    const VecD t = oracle.token({-0.5, 0, 0}, {0, 0, 1});
    CHECK(t[0] == Catch::Approx(1.5));
    CHECK(t[1] == Catch::Approx(1.0));
  }
  SECTION("interior density is sigma_in") {
    CHECK(oracle.density({-0.5, 0, 0}) == 40.0);
  }
}

TEST_CASE("teacher token is affine in direction") {
  const SceneOracle oracle = build_scene(two_sphere_spec());
  Pcg32 rng(11);
  const Vec3 p{-0.5, 0.05, -0.1};
  for (int trial = 0; trial < 20; ++trial) {
    const Vec3 d1 = rng.unit_vector();
    const Vec3 d2 = rng.unit_vector();
    const VecD t1 = oracle.token(p, d1);
    const VecD t2 = oracle.token(p, d2);
    const ObjectSpec& obj = oracle.spec().objects[0];
    const double a = dot(d1 + d2, obj.vd_axis);
    for (size_t k = 0; k < t1.size(); ++k)
      CHECK(t1[k] + t2[k] == 2.0 * obj.base_token[k] + a * obj.vd_amplitude[k]);
    // antipodal average recovers the base token exactly
    const VecD tp = oracle.token(p, d1);
    const VecD tm = oracle.token(p, -d1);
    for (size_t k = 0; k < tp.size(); ++k)
      CHECK(0.5 * (tp[k] + tm[k]) == obj.base_token[k]);
  }
}

TEST_CASE("instance ids are hierarchy consistent") {
  const SceneSpec spec = make_random_scene(3, 77, [] {
    RandomSceneOptions o;
    o.max_parts = 3;
    o.max_sub_parts = 3;
    return o;
  }());
  const SceneOracle oracle = build_scene(spec);
  Pcg32 rng(4);
  std::map<int, int> part_to_object;
  std::map<int, int> sub_to_part;
  int interior = 0;
  while (interior < 500) {
    const Vec3 p{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    const PointInfo info = oracle.point_info(p);
    if (info.object_index < 0) continue;
    ++interior;
    const int obj = info.ids[static_cast<int>(Scale::Large)];
    const int part = info.ids[static_cast<int>(Scale::Medium)];
    const int sub = info.ids[static_cast<int>(Scale::Small)];
    REQUIRE(obj >= 0);
    REQUIRE(part >= 0);
    REQUIRE(sub >= 0);
    if (part_to_object.count(part)) CHECK(part_to_object[part] == obj);
    part_to_object[part] = obj;
    if (sub_to_part.count(sub)) CHECK(sub_to_part[sub] == part);
    sub_to_part[sub] = part;
    CHECK(oracle.parent_instance(part) == obj);
    CHECK(oracle.parent_instance(sub) == part);
  }
}

TEST_CASE("overlapping objects are rejected with a diagnostic") {
  SceneSpec spec = two_sphere_spec();
  // slide object 2 (with its nested parts) into object 1
  const Vec3 shift = Vec3{-0.45, 0, 0} - spec.objects[1].primitive.center;
  spec.objects[1].primitive.center += shift;
  spec.objects[1].parts[0].primitive.center += shift;
  spec.objects[1].parts[0].sub_parts[0].primitive.center += shift;
  CHECK_THROWS_AS(build_scene(spec), std::invalid_argument);
  try {
    build_scene(spec);
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("overlap") != std::string::npos);
  }
}

TEST_CASE("scene invariants are validated") {
  SECTION("duplicate object ids") {
    SceneSpec spec = two_sphere_spec();
    spec.objects[1].id = spec.objects[0].id;
    CHECK_THROWS_AS(build_scene(spec), std::invalid_argument);
  }
  SECTION("object escaping bounds") {
    SceneSpec spec = two_sphere_spec();
    spec.objects[0].primitive.center = {-0.95, 0, 0};
    CHECK_THROWS_AS(build_scene(spec), std::invalid_argument);
  }
  SECTION("non-unit vd axis") {
    SceneSpec spec = two_sphere_spec();
    spec.objects[0].vd_axis = {0, 0, 2};
    CHECK_THROWS_AS(build_scene(spec), std::invalid_argument);
  }
  SECTION("part outside its object") {
    SceneSpec spec = two_sphere_spec();
    spec.objects[0].parts[0].primitive.center = {0.5, 0, 0};
    CHECK_THROWS_AS(build_scene(spec), std::invalid_argument);
  }
}

TEST_CASE("make_trajectory") {
  const SceneSpec spec = two_sphere_spec();
  SECTION("n = 1 looks at the bounds center") {
    const auto poses = make_trajectory(spec, 1);
    REQUIRE(poses.size() == 1);
    const Vec3 fwd = poses[0].orientation.rotate({0, 0, 1});
    const Vec3 to_center = normalized(spec.bounds.center() - poses[0].position);
    CHECK(dot(fwd, to_center) == Catch::Approx(1.0).epsilon(1e-9));
  }
  SECTION("n = 8 gives 45-degree azimuth spacing") {
    const auto poses = make_trajectory(spec, 8);
    REQUIRE(poses.size() == 8);
    for (int k = 0; k < 8; ++k) {
      const Vec3 rel = poses[static_cast<size_t>(k)].position - spec.bounds.center();
      double azim = std::atan2(rel.y, rel.x);
      if (azim < 0) azim += 2 * kPi;
      CHECK(azim == Catch::Approx(2 * kPi * k / 8).margin(1e-9));
    }
  }
  SECTION("same seed twice gives identical pose lists") {
    const auto a = make_trajectory(spec, 12);
    const auto b = make_trajectory(spec, 12);
    for (size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].position.x == b[i].position.x);
      CHECK(a[i].position.z == b[i].position.z);
      CHECK(a[i].orientation.w == b[i].orientation.w);
    }
  }
  SECTION("n = 0 rejected") {
    CHECK_THROWS_AS(make_trajectory(spec, 0), std::invalid_argument);
  }
}

TEST_CASE("render_teacher_views") {
  const SceneOracle oracle = build_scene(two_sphere_spec());

  SECTION("view seeing nothing: zero token map and no masks") {
    CameraPose away;
    away.position = {0, 0.9, 0};
    away.orientation = look_at(away.position, {0, 5, 0});  // facing empty space
    away.height = away.width = 16;
    const TeacherOutputs t = render_teacher_views(oracle, {away});
    for (double v : t.views[0].token) CHECK(v == 0.0);
    CHECK(t.mask_ids(0, Scale::Large).empty());
    for (double d : t.views[0].depth) CHECK(d == 0.0);
  }

  SECTION("one sphere centered in view produces exactly one object-scale mask") {
    SceneSpec spec = two_sphere_spec();
    spec.objects.resize(1);
    spec.objects[0].primitive.center = {0, 0, 0};
    spec.objects[0].parts[0].primitive.center = {0, 0, 0};
    spec.objects[0].parts[0].sub_parts[0].primitive.center = {0, 0, 0};
    const SceneOracle one = build_scene(spec);
    CameraPose pose;
    pose.position = {-0.9, 0, 0};
    pose.orientation = look_at(pose.position, {0, 0, 0});
    pose.height = pose.width = 32;
    const TeacherOutputs t = render_teacher_views(one, {pose});
    const auto ids = t.mask_ids(0, Scale::Large);
    REQUIRE(ids.size() == 1);
    CHECK(ids[0] == 1);
  }

  SECTION("token map has the configured feature-grid resolution") {
    const auto poses = make_trajectory(two_sphere_spec(), 2);
    const TeacherOutputs t = render_teacher_views(oracle, poses);
    CHECK(t.token_res == 27);
    CHECK(t.views[0].token.size() == 27u * 27u * 2u);
  }

  SECTION("no poses rejected") {
    CHECK_THROWS_AS(render_teacher_views(oracle, {}), std::invalid_argument);
  }
}

TEST_CASE("teacher depth matches analytic sphere intersection") {
  SceneSpec spec = two_sphere_spec();
  const SceneOracle oracle = build_scene(spec);
  CameraPose pose;
  pose.position = {-0.5, 0, 0.9};
  pose.orientation = look_at(pose.position, {-0.5, 0, 0});
  pose.height = pose.width = 9;
  const TeacherOutputs t = render_teacher_views(oracle, {pose});
  // center pixel looks straight down at the sphere below: depth = 0.9 - 0.3
  const double d = t.views[0].depth[4 * 9 + 4];
  CHECK(d == Catch::Approx(0.6).margin(1e-6));
}

TEST_CASE("scene and teacher persistence round-trips") {
  namespace fs = std::filesystem;
  const fs::path tmp = fs::temp_directory_path() / "osf_scenegen_io";
  fs::create_directories(tmp);

  const SceneSpec spec = make_random_scene(3, 9);
  save_scene(spec, tmp / "scene.json");
  const SceneSpec loaded = load_scene(tmp / "scene.json");
  REQUIRE(loaded.objects.size() == spec.objects.size());
  CHECK(loaded.seed == spec.seed);
  CHECK(loaded.objects[2].base_token == spec.objects[2].base_token);
  CHECK(loaded.objects[1].parts[0].id == spec.objects[1].parts[0].id);

  const SceneOracle oracle = build_scene(spec);
  auto poses = make_trajectory(spec, 3);
  for (auto& p : poses) { p.height = 24; p.width = 24; }
  const TeacherOutputs t = render_teacher_views(oracle, poses);
  save_teacher_outputs(t, tmp / "teacher");
  const TeacherOutputs u = load_teacher_outputs(tmp / "teacher");
  REQUIRE(u.views.size() == t.views.size());
  CHECK(u.d_tok == t.d_tok);
  CHECK(u.views[1].ids[2] == t.views[1].ids[2]);
  for (size_t i = 0; i < t.views[0].depth.size(); ++i)
    CHECK(std::abs(u.views[0].depth[i] - t.views[0].depth[i]) < 1e-6);
  fs::remove_all(tmp);
}

TEST_CASE("mask erosion noise flag perturbs boundaries only") {
  const SceneOracle oracle = build_scene(two_sphere_spec());
  auto poses = make_trajectory(two_sphere_spec(), 1);
  TeacherOptions clean_opt;
  TeacherOptions noisy_opt;
  noisy_opt.erode_mask_noise = true;
  const TeacherOutputs clean = render_teacher_views(oracle, poses, clean_opt);
  const TeacherOutputs noisy = render_teacher_views(oracle, poses, noisy_opt);
  int flipped = 0;
  const auto& a = clean.views[0].ids[static_cast<int>(Scale::Large)];
  const auto& b = noisy.views[0].ids[static_cast<int>(Scale::Large)];
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i] != b[i]) {
      ++flipped;
      CHECK(b[i] == -1);  // erosion only removes, never relabels
    }
  }
  CHECK(flipped > 0);
}
