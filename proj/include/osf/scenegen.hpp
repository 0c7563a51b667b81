#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "osf/core.hpp"
#include "osf/render.hpp"
#include "osf/tensorio.hpp"

namespace osf {

// Semantic scales, finest to coarsest: sub-part, part, object.
enum class Scale : int { Small = 0, Medium = 1, Large = 2 };
inline constexpr int kNumScales = 3;
inline const char* scale_name(Scale s) {
  switch (s) {
    case Scale::Small: return "small";
    case Scale::Medium: return "medium";
    default: return "large";
  }
}

// ---------------------------------------------------------------------------
// Scene specification
// ---------------------------------------------------------------------------

struct Primitive {
  enum class Kind { Sphere, Box };
  Kind kind = Kind::Sphere;
  Vec3 center;
  Vec3 half_extent;  // sphere: half_extent.x is the radius

  double radius() const { return half_extent.x; }

  bool contains(const Vec3& p) const {
    if (kind == Kind::Sphere) {
      const Vec3 d = p - center;
      return dot(d, d) <= radius() * radius();
    }
    return std::abs(p.x - center.x) <= half_extent.x &&
           std::abs(p.y - center.y) <= half_extent.y &&
           std::abs(p.z - center.z) <= half_extent.z;
  }

  Aabb aabb() const {
    if (kind == Kind::Sphere) {
      const Vec3 r{radius(), radius(), radius()};
      return {center - r, center + r};
    }
    return {center - half_extent, center + half_extent};
  }
};

struct SubPartSpec {
  int id = 0;
  Primitive primitive;
};

struct PartSpec {
  int id = 0;
  Primitive primitive;
  std::vector<SubPartSpec> sub_parts;
};

struct ObjectSpec {
  int id = 0;
  Primitive primitive;
  std::vector<PartSpec> parts;
  VecD base_token;      // view-independent teacher token
  VecD vd_amplitude;    // view-dependent deviation amplitude
  Vec3 vd_axis{1, 0, 0};
  VecD label_embedding;
  std::array<double, 3> color{0.5, 0.5, 0.5};
};

struct SceneSpec {
  std::vector<ObjectSpec> objects;
  Aabb bounds;
  uint64_t seed = 0;

  int d_tok() const { return objects.empty() ? 0 : static_cast<int>(objects[0].base_token.size()); }
  int d_lab() const { return objects.empty() ? 0 : static_cast<int>(objects[0].label_embedding.size()); }
};

// --- geometric helpers -------------------------------------------------------

namespace detail {

inline bool primitive_inside(const Primitive& inner, const Primitive& outer) {
  constexpr double eps = 1e-9;
  if (outer.kind == Primitive::Kind::Sphere) {
    const double R = outer.radius();
    if (inner.kind == Primitive::Kind::Sphere)
      return norm(inner.center - outer.center) + inner.radius() <= R + eps;
    // All eight box corners inside the sphere iff the farthest corner is.
    const Vec3 d = inner.center - outer.center;
    const Vec3 far{std::abs(d.x) + inner.half_extent.x, std::abs(d.y) + inner.half_extent.y,
                   std::abs(d.z) + inner.half_extent.z};
    return norm(far) <= R + eps;
  }
  const Vec3 d = inner.center - outer.center;
  if (inner.kind == Primitive::Kind::Sphere) {
    const double r = inner.radius();
    return std::abs(d.x) + r <= outer.half_extent.x + eps &&
           std::abs(d.y) + r <= outer.half_extent.y + eps &&
           std::abs(d.z) + r <= outer.half_extent.z + eps;
  }
  return std::abs(d.x) + inner.half_extent.x <= outer.half_extent.x + eps &&
         std::abs(d.y) + inner.half_extent.y <= outer.half_extent.y + eps &&
         std::abs(d.z) + inner.half_extent.z <= outer.half_extent.z + eps;
}

inline bool primitives_overlap(const Primitive& a, const Primitive& b) {
  constexpr double eps = 1e-9;
  if (a.kind == Primitive::Kind::Sphere && b.kind == Primitive::Kind::Sphere)
    return norm(a.center - b.center) < a.radius() + b.radius() - eps;
  if (a.kind == Primitive::Kind::Box && b.kind == Primitive::Kind::Box) {
    return std::abs(a.center.x - b.center.x) < a.half_extent.x + b.half_extent.x - eps &&
           std::abs(a.center.y - b.center.y) < a.half_extent.y + b.half_extent.y - eps &&
           std::abs(a.center.z - b.center.z) < a.half_extent.z + b.half_extent.z - eps;
  }
  const Primitive& sph = (a.kind == Primitive::Kind::Sphere) ? a : b;
  const Primitive& box = (a.kind == Primitive::Kind::Sphere) ? b : a;
  const Vec3 closest = box.aabb().clamp(sph.center);
  return norm(closest - sph.center) < sph.radius() - eps;
}

// First positive ray parameter at which the primitive surface is crossed.
inline bool primitive_first_hit(const Primitive& prim, const Vec3& o, const Vec3& d,
                                double& t_hit) {
  if (prim.kind == Primitive::Kind::Sphere) {
    const Vec3 oc = o - prim.center;
    const double b = dot(oc, d);
    const double c = dot(oc, oc) - prim.radius() * prim.radius();
    const double disc = b * b - c;
    if (disc < 0.0) return false;
    const double sq = std::sqrt(disc);
    double t = -b - sq;
    if (t < 1e-9) t = -b + sq;  // origin inside: take exit crossing
    if (t < 1e-9) return false;
    t_hit = t;
    return true;
  }
  double t0, t1;
  if (!intersect_aabb(o, d, prim.aabb(), t0, t1)) return false;
  const double t = (t0 > 1e-9) ? t0 : t1;
  if (t < 1e-9) return false;
  t_hit = t;
  return true;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// SceneOracle: analytic ground truth over a validated SceneSpec. Immutable
// after construction; concurrent reads are safe.
// ---------------------------------------------------------------------------

struct OracleConfig {
  double sigma_in = 40.0;  // constant density inside object primitives
};

struct PointInfo {
  int object_index = -1;  // index into spec.objects, -1 in empty space
  int ids[kNumScales] = {-1, -1, -1};  // instance id per scale (-1 outside)
};

class SceneOracle {
 public:
  explicit SceneOracle(SceneSpec spec, OracleConfig cfg = {})
      : spec_(std::move(spec)), cfg_(cfg) {
    validate();
  }

  const SceneSpec& spec() const { return spec_; }
  double sigma_in() const { return cfg_.sigma_in; }

  double density(const Vec3& p) const {
    return object_index_at(p) >= 0 ? cfg_.sigma_in : 0.0;
  }

  int object_index_at(const Vec3& p) const {
    for (size_t i = 0; i < spec_.objects.size(); ++i)
      if (spec_.objects[i].primitive.contains(p)) return static_cast<int>(i);
    return -1;
  }

  // Teacher token: base + (d . axis) * amplitude inside the owning object,
  // zero in empty space.
  VecD token(const Vec3& p, const Vec3& d) const {
    const int oi = object_index_at(p);
    if (oi < 0) return VecD(spec_.d_tok(), 0.0);
    const ObjectSpec& obj = spec_.objects[static_cast<size_t>(oi)];
    const double a = dot(d, obj.vd_axis);
    VecD t = obj.base_token;
    for (size_t k = 0; k < t.size(); ++k) t[k] += a * obj.vd_amplitude[k];
    return t;
  }

  // Instance ids at the three scales. Points inside an object but outside all
  // of its part primitives are assigned to the nearest part (by primitive
  // center), and likewise for sub-parts, so assignment is total and
  // hierarchy-consistent.
  PointInfo point_info(const Vec3& p) const {
    PointInfo info;
    info.object_index = object_index_at(p);
    if (info.object_index < 0) return info;
    const ObjectSpec& obj = spec_.objects[static_cast<size_t>(info.object_index)];
    info.ids[static_cast<int>(Scale::Large)] = obj.id;

    const PartSpec* part = nullptr;
    double best = std::numeric_limits<double>::infinity();
    for (const PartSpec& ps : obj.parts) {
      if (ps.primitive.contains(p)) { part = &ps; break; }
      const double d = norm(p - ps.primitive.center);
      if (d < best) { best = d; part = &ps; }
    }
    info.ids[static_cast<int>(Scale::Medium)] = part->id;

    const SubPartSpec* sub = nullptr;
    best = std::numeric_limits<double>::infinity();
    for (const SubPartSpec& ss : part->sub_parts) {
      if (ss.primitive.contains(p)) { sub = &ss; break; }
      const double d = norm(p - ss.primitive.center);
      if (d < best) { best = d; sub = &ss; }
    }
    info.ids[static_cast<int>(Scale::Small)] = sub->id;
    return info;
  }

  int instance_id(const Vec3& p, Scale s) const {
    return point_info(p).ids[static_cast<int>(s)];
  }

  // Label of a point = label id of the owning object (-1 in empty space).
  int label_id(const Vec3& p) const {
    const int oi = object_index_at(p);
    return oi < 0 ? -1 : spec_.objects[static_cast<size_t>(oi)].id;
  }

  const VecD* label_embedding_of_object(int object_id) const {
    for (const ObjectSpec& o : spec_.objects)
      if (o.id == object_id) return &o.label_embedding;
    return nullptr;
  }

  // Owning object id for any instance id at any scale.
  int object_id_of_instance(int instance_id) const {
    auto it = instance_to_object_.find(instance_id);
    return it == instance_to_object_.end() ? -1 : it->second;
  }

  // Ground-truth parent instance id one scale coarser (-1 for object scale).
  int parent_instance(int instance_id) const {
    auto it = instance_parent_.find(instance_id);
    return it == instance_parent_.end() ? -1 : it->second;
  }

  // First sigma > 0 crossing along the ray; infinity when nothing is hit.
  double first_hit(const Vec3& origin, const Vec3& dir, int* object_index = nullptr) const {
    double best = std::numeric_limits<double>::infinity();
    int best_obj = -1;
    for (size_t i = 0; i < spec_.objects.size(); ++i) {
      double t;
      if (detail::primitive_first_hit(spec_.objects[i].primitive, origin, dir, t) && t < best) {
        best = t;
        best_obj = static_cast<int>(i);
      }
    }
    if (object_index) *object_index = best_obj;
    return best;
  }

 private:
  void validate() {
    if (spec_.objects.empty()) throw std::invalid_argument("scene has no objects");
    std::map<int, int> seen[kNumScales];
    const int d_tok = spec_.d_tok();
    const int d_lab = spec_.d_lab();
    for (const ObjectSpec& obj : spec_.objects) {
      if (seen[2].count(obj.id)) throw std::invalid_argument("duplicate object id");
      seen[2][obj.id] = 1;
      if (!detail::primitive_inside(obj.primitive, Primitive{Primitive::Kind::Box,
                                                             spec_.bounds.center(),
                                                             spec_.bounds.extent() * 0.5}))
        throw std::invalid_argument("object geometry escapes scene bounds");
      if (obj.parts.empty()) throw std::invalid_argument("object must have at least one part");
      if (static_cast<int>(obj.base_token.size()) != d_tok ||
          static_cast<int>(obj.vd_amplitude.size()) != d_tok)
        throw std::invalid_argument("token dimensionality inconsistent across objects");
      if (static_cast<int>(obj.label_embedding.size()) != d_lab)
        throw std::invalid_argument("label dimensionality inconsistent across objects");
      if (std::abs(norm(obj.vd_axis) - 1.0) > 1e-6)
        throw std::invalid_argument("vd_axis must be unit length");
      for (const PartSpec& part : obj.parts) {
        if (seen[1].count(part.id)) throw std::invalid_argument("duplicate part id");
        seen[1][part.id] = 1;
        if (!detail::primitive_inside(part.primitive, obj.primitive))
          throw std::invalid_argument("part primitive not nested inside its object");
        if (part.sub_parts.empty())
          throw std::invalid_argument("part must have at least one sub-part");
        for (const SubPartSpec& sub : part.sub_parts) {
          if (seen[0].count(sub.id)) throw std::invalid_argument("duplicate sub-part id");
          seen[0][sub.id] = 1;
          if (!detail::primitive_inside(sub.primitive, part.primitive))
            throw std::invalid_argument("sub-part primitive not nested inside its part");
          instance_parent_[sub.id] = part.id;
          instance_to_object_[sub.id] = obj.id;
        }
        instance_parent_[part.id] = obj.id;
        instance_to_object_[part.id] = obj.id;
      }
      instance_to_object_[obj.id] = obj.id;
    }
    for (size_t i = 0; i < spec_.objects.size(); ++i)
      for (size_t j = i + 1; j < spec_.objects.size(); ++j)
        if (detail::primitives_overlap(spec_.objects[i].primitive, spec_.objects[j].primitive))
          throw std::invalid_argument(
              "object primitives " + std::to_string(spec_.objects[i].id) + " and " +
              std::to_string(spec_.objects[j].id) +
              " overlap: instance ground truth would be ambiguous");
  }

  SceneSpec spec_;
  OracleConfig cfg_;
  std::map<int, int> instance_parent_;
  std::map<int, int> instance_to_object_;
};

inline SceneOracle build_scene(SceneSpec spec, OracleConfig cfg = {}) {
  return SceneOracle(std::move(spec), cfg);
}

// ---------------------------------------------------------------------------
// Cameras and trajectories
// ---------------------------------------------------------------------------

struct CameraPose {
  Vec3 position;
  Quat orientation;       // unit; camera +z looks forward
  double vertical_fov = kPi / 3.0;
  int height = 64, width = 64;

  void validate() const {
    if (std::abs(orientation.norm() - 1.0) > 1e-6)
      throw std::invalid_argument("camera orientation quaternion must be normalized");
    if (height < 1 || width < 1) throw std::invalid_argument("camera resolution must be >= 1");
  }
};

// Ray through continuous pixel coordinates (px right, py down), clipped to
// the scene bounds.
inline Ray camera_ray(const CameraPose& pose, double px, double py, const Aabb& bounds) {
  const PinholeIntrinsics K = make_intrinsics(pose.height, pose.width, pose.vertical_fov);
  const Vec3 dir_cam = normalized(Vec3{(px - K.cx) / K.fx, (py - K.cy) / K.fy, 1.0});
  Ray r;
  r.origin = pose.position;
  r.direction = pose.orientation.rotate(dir_cam);
  r.px = px;
  r.py = py;
  double t0, t1;
  if (intersect_aabb(r.origin, r.direction, bounds, t0, t1) && t1 > 1e-6) {
    r.near = std::max(t0, 1e-4);
    r.far = t1;
  } else {
    r.near = 1e-4;
    r.far = 2.0 * bounds.diag() + 1.0;
  }
  return r;
}

struct TrajectoryOptions {
  double radius_scale = 0.75;     // orbit radius as a fraction of bounds diagonal
  double base_elevation = 0.45;   // radians above the horizontal plane
  double elevation_jitter = 0.25; // seeded, +- radians
  double vertical_fov = kPi / 3.0;
  int height = 64, width = 64;
};

// Inward-facing orbit: azimuths exactly evenly spaced, elevation jittered by
// the scene seed. Deterministic.
inline std::vector<CameraPose> make_trajectory(const SceneSpec& spec, int n,
                                               TrajectoryOptions opt = {}) {
  if (n < 1) throw std::invalid_argument("make_trajectory: n must be >= 1");
  Pcg32 rng(spec.seed, 7);
  const Vec3 c = spec.bounds.center();
  const double radius = opt.radius_scale * spec.bounds.diag();
  std::vector<CameraPose> poses;
  poses.reserve(static_cast<size_t>(n));
  for (int k = 0; k < n; ++k) {
    const double azim = 2.0 * kPi * k / n;
    const double elev = opt.base_elevation + rng.uniform(-opt.elevation_jitter, opt.elevation_jitter);
    CameraPose p;
    p.position = c + radius * Vec3{std::cos(elev) * std::cos(azim),
                                   std::cos(elev) * std::sin(azim), std::sin(elev)};
    p.orientation = look_at(p.position, c);
    p.vertical_fov = opt.vertical_fov;
    p.height = opt.height;
    p.width = opt.width;
    poses.push_back(p);
  }
  return poses;
}

// ---------------------------------------------------------------------------
// Teacher outputs: what the pretrained encoders would have produced.
// ---------------------------------------------------------------------------

struct TeacherView {
  std::vector<double> rgb;    // H*W*3
  std::vector<double> depth;  // H*W, 0 where no surface is hit
  std::vector<double> token;  // token_res*token_res*d_tok
  std::vector<int> ids[kNumScales];  // H*W instance ids, -1 background
};

struct TeacherOptions {
  int token_res = 27;
  bool erode_mask_noise = false;  // seeded boundary erosion, exercises refinement
  uint64_t noise_seed = 1;
};

struct TeacherOutputs {
  std::vector<CameraPose> poses;
  std::vector<TeacherView> views;
  int token_res = 27;
  int d_tok = 0;

  int height() const { return poses.empty() ? 0 : poses[0].height; }
  int width() const { return poses.empty() ? 0 : poses[0].width; }

  // Distinct non-background ids present at one scale of one view.
  std::vector<int> mask_ids(int view, Scale s) const {
    std::vector<int> out;
    for (int id : views[static_cast<size_t>(view)].ids[static_cast<int>(s)])
      if (id >= 0 && std::find(out.begin(), out.end(), id) == out.end()) out.push_back(id);
    std::sort(out.begin(), out.end());
    return out;
  }

  std::vector<uint8_t> binary_mask(int view, Scale s, int id) const {
    const auto& img = views[static_cast<size_t>(view)].ids[static_cast<int>(s)];
    std::vector<uint8_t> m(img.size());
    for (size_t i = 0; i < img.size(); ++i) m[i] = (img[i] == id) ? 1 : 0;
    return m;
  }
};

namespace detail {

inline void erode_id_image(std::vector<int>& ids, int h, int w, Pcg32& rng) {
  std::vector<int> src = ids;
  auto at = [&](int y, int x) { return src[static_cast<size_t>(y) * w + x]; };
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int v = at(y, x);
      if (v < 0) continue;
      const bool boundary = (y > 0 && at(y - 1, x) != v) || (y + 1 < h && at(y + 1, x) != v) ||
                            (x > 0 && at(y, x - 1) != v) || (x + 1 < w && at(y, x + 1) != v);
      if (boundary && rng.uniform() < 0.5) ids[static_cast<size_t>(y) * w + x] = -1;
    }
  }
}

}  // namespace detail

// Exact ray casting against the oracle: first-surface rgb/depth/instance ids
// at full resolution, teacher tokens on the low-resolution feature grid.
inline TeacherOutputs render_teacher_views(const SceneOracle& oracle,
                                           const std::vector<CameraPose>& poses,
                                           TeacherOptions opt = {}) {
  if (poses.empty()) throw std::invalid_argument("render_teacher_views: no poses");
  TeacherOutputs out;
  out.poses = poses;
  out.token_res = opt.token_res;
  out.d_tok = oracle.spec().d_tok();
  Pcg32 noise_rng(opt.noise_seed, 11);
  const Aabb& bounds = oracle.spec().bounds;
  for (const CameraPose& pose : poses) {
    pose.validate();
    TeacherView view;
    const int h = pose.height, w = pose.width;
    view.rgb.assign(static_cast<size_t>(h) * w * 3, 0.0);
    view.depth.assign(static_cast<size_t>(h) * w, 0.0);
    for (int s = 0; s < kNumScales; ++s) view.ids[s].assign(static_cast<size_t>(h) * w, -1);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const Ray ray = camera_ray(pose, x + 0.5, y + 0.5, bounds);
        int obj;
        const double t = oracle.first_hit(ray.origin, ray.direction, &obj);
        if (!std::isfinite(t)) continue;
        const size_t px = static_cast<size_t>(y) * w + x;
        view.depth[px] = t;
        const auto& color = oracle.spec().objects[static_cast<size_t>(obj)].color;
        for (int k = 0; k < 3; ++k) view.rgb[px * 3 + k] = color[static_cast<size_t>(k)];
        // Nudge just past the surface so containment tests are unambiguous.
        const Vec3 p = ray.origin + (t + 1e-7) * ray.direction;
        const PointInfo info = oracle.point_info(p);
        for (int s = 0; s < kNumScales; ++s) view.ids[s][px] = info.ids[s];
      }
    }
    if (opt.erode_mask_noise)
      for (int s = 0; s < kNumScales; ++s) detail::erode_id_image(view.ids[s], h, w, noise_rng);

    const int fr = opt.token_res;
    view.token.assign(static_cast<size_t>(fr) * fr * out.d_tok, 0.0);
    for (int i = 0; i < fr; ++i) {
      for (int j = 0; j < fr; ++j) {
        const double px = (j + 0.5) / fr * w;
        const double py = (i + 0.5) / fr * h;
        const Ray ray = camera_ray(pose, px, py, bounds);
        const double t = oracle.first_hit(ray.origin, ray.direction);
        if (!std::isfinite(t)) continue;
        const Vec3 p = ray.origin + (t + 1e-7) * ray.direction;
        const VecD tok = oracle.token(p, ray.direction);
        double* dst = view.token.data() + (static_cast<size_t>(i) * fr + j) * out.d_tok;
        for (int k = 0; k < out.d_tok; ++k) dst[k] = tok[static_cast<size_t>(k)];
      }
    }
    out.views.push_back(std::move(view));
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON (scene spec, poses) and tensor-directory persistence
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const Vec3& v) { return nlohmann::json::array({v.x, v.y, v.z}); }
inline Vec3 vec3_from_json(const nlohmann::json& j) {
  return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()};
}

inline nlohmann::json to_json(const Primitive& p) {
  nlohmann::json j;
  j["center"] = to_json(p.center);
  if (p.kind == Primitive::Kind::Sphere) {
    j["kind"] = "sphere";
    j["radius"] = p.radius();
  } else {
    j["kind"] = "box";
    j["half_extent"] = to_json(p.half_extent);
  }
  return j;
}

inline Primitive primitive_from_json(const nlohmann::json& j) {
  Primitive p;
  p.center = vec3_from_json(j.at("center"));
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "sphere") {
    p.kind = Primitive::Kind::Sphere;
    const double r = j.at("radius").get<double>();
    p.half_extent = {r, r, r};
  } else if (kind == "box") {
    p.kind = Primitive::Kind::Box;
    p.half_extent = vec3_from_json(j.at("half_extent"));
  } else {
    throw std::invalid_argument("unknown primitive kind: " + kind);
  }
  return p;
}

inline nlohmann::json to_json(const SceneSpec& spec) {
  nlohmann::json j;
  j["seed"] = spec.seed;
  j["bounds"] = {{"lo", to_json(spec.bounds.lo)}, {"hi", to_json(spec.bounds.hi)}};
  j["objects"] = nlohmann::json::array();
  for (const ObjectSpec& o : spec.objects) {
    nlohmann::json jo;
    jo["id"] = o.id;
    jo["primitive"] = to_json(o.primitive);
    jo["base_token"] = o.base_token;
    jo["vd_amplitude"] = o.vd_amplitude;
    jo["vd_axis"] = to_json(o.vd_axis);
    jo["label_embedding"] = o.label_embedding;
    jo["color"] = o.color;
    jo["parts"] = nlohmann::json::array();
    for (const PartSpec& p : o.parts) {
      nlohmann::json jp;
      jp["id"] = p.id;
      jp["primitive"] = to_json(p.primitive);
      jp["sub_parts"] = nlohmann::json::array();
      for (const SubPartSpec& s : p.sub_parts)
        jp["sub_parts"].push_back({{"id", s.id}, {"primitive", to_json(s.primitive)}});
      jo["parts"].push_back(jp);
    }
    j["objects"].push_back(jo);
  }
  return j;
}

inline SceneSpec scene_from_json(const nlohmann::json& j) {
  SceneSpec spec;
  spec.seed = j.value("seed", uint64_t{0});
  spec.bounds.lo = vec3_from_json(j.at("bounds").at("lo"));
  spec.bounds.hi = vec3_from_json(j.at("bounds").at("hi"));
  for (const auto& jo : j.at("objects")) {
    ObjectSpec o;
    o.id = jo.at("id").get<int>();
    o.primitive = primitive_from_json(jo.at("primitive"));
    o.base_token = jo.at("base_token").get<VecD>();
    o.vd_amplitude = jo.at("vd_amplitude").get<VecD>();
    o.vd_axis = vec3_from_json(jo.at("vd_axis"));
    o.label_embedding = jo.at("label_embedding").get<VecD>();
    o.color = jo.at("color").get<std::array<double, 3>>();
    for (const auto& jp : jo.at("parts")) {
      PartSpec p;
      p.id = jp.at("id").get<int>();
      p.primitive = primitive_from_json(jp.at("primitive"));
      for (const auto& js : jp.at("sub_parts"))
        p.sub_parts.push_back({js.at("id").get<int>(), primitive_from_json(js.at("primitive"))});
      o.parts.push_back(std::move(p));
    }
    spec.objects.push_back(std::move(o));
  }
  return spec;
}

inline void save_scene(const SceneSpec& spec, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << to_json(spec).dump(2) << "\n";
}

inline SceneSpec load_scene(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  nlohmann::json j;
  in >> j;
  return scene_from_json(j);
}

inline nlohmann::json to_json(const CameraPose& p) {
  return {{"position", to_json(p.position)},
          {"orientation", {p.orientation.w, p.orientation.x, p.orientation.y, p.orientation.z}},
          {"vertical_fov", p.vertical_fov},
          {"resolution", {p.height, p.width}}};
}

inline CameraPose pose_from_json(const nlohmann::json& j) {
  CameraPose p;
  p.position = vec3_from_json(j.at("position"));
  const auto& q = j.at("orientation");
  p.orientation = {q.at(0).get<double>(), q.at(1).get<double>(), q.at(2).get<double>(),
                   q.at(3).get<double>()};
  p.vertical_fov = j.at("vertical_fov").get<double>();
  p.height = j.at("resolution").at(0).get<int>();
  p.width = j.at("resolution").at(1).get<int>();
  return p;
}

inline void save_poses(const std::vector<CameraPose>& poses, const std::filesystem::path& path) {
  nlohmann::json j = nlohmann::json::array();
  for (const CameraPose& p : poses) j.push_back(to_json(p));
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

inline std::vector<CameraPose> load_poses(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  nlohmann::json j;
  in >> j;
  std::vector<CameraPose> poses;
  for (const auto& e : j) poses.push_back(pose_from_json(e));
  return poses;
}

inline void save_teacher_outputs(const TeacherOutputs& t, const std::filesystem::path& dir) {
  TensorDirWriter w(dir);
  char name[64];
  for (size_t v = 0; v < t.views.size(); ++v) {
    const TeacherView& tv = t.views[v];
    const int h = t.poses[v].height, wd = t.poses[v].width;
    std::snprintf(name, sizeof(name), "rgb_%04zu", v);
    w.add(name, {h, wd, 3}, tv.rgb);
    std::snprintf(name, sizeof(name), "depth_%04zu", v);
    w.add(name, {h, wd}, tv.depth);
    std::snprintf(name, sizeof(name), "token_%04zu", v);
    w.add(name, {t.token_res, t.token_res, t.d_tok}, tv.token);
    for (int s = 0; s < kNumScales; ++s) {
      std::snprintf(name, sizeof(name), "ids_%s_%04zu", scale_name(static_cast<Scale>(s)), v);
      std::vector<double> ids(tv.ids[s].begin(), tv.ids[s].end());
      w.add(name, {h, wd}, ids);
    }
  }
  w.finish();
  save_poses(t.poses, dir / "poses.json");
  nlohmann::json meta = {{"n_views", t.views.size()},
                         {"token_res", t.token_res},
                         {"d_tok", t.d_tok}};
  std::ofstream out(dir / "teacher_meta.json");
  out << meta.dump(2) << "\n";
}

inline TeacherOutputs load_teacher_outputs(const std::filesystem::path& dir) {
  std::ifstream meta_in(dir / "teacher_meta.json");
  if (!meta_in) throw std::runtime_error("missing teacher_meta.json in " + dir.string());
  nlohmann::json meta;
  meta_in >> meta;
  TeacherOutputs t;
  t.token_res = meta.at("token_res").get<int>();
  t.d_tok = meta.at("d_tok").get<int>();
  t.poses = load_poses(dir / "poses.json");
  TensorDirReader r(dir);
  char name[64];
  const size_t n_views = meta.at("n_views").get<size_t>();
  for (size_t v = 0; v < n_views; ++v) {
    TeacherView tv;
    std::snprintf(name, sizeof(name), "rgb_%04zu", v);
    tv.rgb = r.read(name);
    std::snprintf(name, sizeof(name), "depth_%04zu", v);
    tv.depth = r.read(name);
    std::snprintf(name, sizeof(name), "token_%04zu", v);
    tv.token = r.read(name);
    for (int s = 0; s < kNumScales; ++s) {
      std::snprintf(name, sizeof(name), "ids_%s_%04zu", scale_name(static_cast<Scale>(s)), v);
      std::vector<double> ids = r.read(name);
      tv.ids[s].assign(ids.size(), -1);
      for (size_t i = 0; i < ids.size(); ++i) tv.ids[s][i] = static_cast<int>(std::lround(ids[i]));
    }
    t.views.push_back(std::move(tv));
  }
  return t;
}

// ---------------------------------------------------------------------------
// Seeded random scenes (test fixtures and the gen-scene CLI)
// ---------------------------------------------------------------------------

struct RandomSceneOptions {
  int d_tok = 32;
  int d_lab = 16;
  bool orthogonal_tokens = false;  // one-hot base tokens, distinct per object
  double vd_scale = 0.0;           // 0 = view-independent teacher
  Aabb bounds{{-1, -1, -1}, {1, 1, 1}};
  int max_parts = 2;
  int max_sub_parts = 2;
};

inline SceneSpec make_random_scene(int n_objects, uint64_t seed, RandomSceneOptions opt = {}) {
  if (n_objects < 1) throw std::invalid_argument("make_random_scene: need >= 1 object");
  if (opt.orthogonal_tokens && n_objects > opt.d_tok)
    throw std::invalid_argument("orthogonal tokens require d_tok >= n_objects");
  Pcg32 rng(seed, 3);
  SceneSpec spec;
  spec.seed = seed;
  spec.bounds = opt.bounds;
  const Vec3 c = opt.bounds.center();
  const double half = 0.5 * std::min({opt.bounds.extent().x, opt.bounds.extent().y,
                                      opt.bounds.extent().z});
  for (int o = 0; o < n_objects; ++o) {
    ObjectSpec obj;
    obj.id = o + 1;
    // Rejection-place a sphere that stays inside bounds and clear of others.
    for (int attempt = 0;; ++attempt) {
      if (attempt > 4000) throw std::runtime_error("could not place non-overlapping objects");
      const double r = half * rng.uniform(0.14, 0.22);
      const Vec3 center =
          c + Vec3{rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)} *
                  (half - r - 1e-3);
      Primitive prim{Primitive::Kind::Sphere, center, {r, r, r}};
      bool ok = true;
      for (const ObjectSpec& other : spec.objects)
        if (detail::primitives_overlap(prim, other.primitive)) { ok = false; break; }
      if (ok) { obj.primitive = prim; break; }
    }
    const double R = obj.primitive.radius();
    const int n_parts = 1 + static_cast<int>(rng.uniform_int(static_cast<uint32_t>(opt.max_parts)));
    for (int p = 0; p < n_parts; ++p) {
      PartSpec part;
      part.id = obj.id * 100 + p + 1;
      const double pr = R * rng.uniform(0.25, 0.4);
      const Vec3 off = rng.unit_vector() * rng.uniform(0.0, R - pr - 1e-6);
      part.primitive = {Primitive::Kind::Sphere, obj.primitive.center + off, {pr, pr, pr}};
      const int n_subs =
          1 + static_cast<int>(rng.uniform_int(static_cast<uint32_t>(opt.max_sub_parts)));
      for (int s = 0; s < n_subs; ++s) {
        SubPartSpec sub;
        sub.id = part.id * 100 + s + 1;
        const double sr = pr * rng.uniform(0.3, 0.5);
        const Vec3 soff = rng.unit_vector() * rng.uniform(0.0, pr - sr - 1e-6);
        sub.primitive = {Primitive::Kind::Sphere, part.primitive.center + soff, {sr, sr, sr}};
        part.sub_parts.push_back(sub);
      }
      obj.parts.push_back(std::move(part));
    }
    obj.base_token.assign(static_cast<size_t>(opt.d_tok), 0.0);
    if (opt.orthogonal_tokens) {
      obj.base_token[static_cast<size_t>(o)] = 1.0;
    } else {
      for (double& v : obj.base_token) v = rng.normal() / std::sqrt(opt.d_tok);
    }
    obj.vd_axis = rng.unit_vector();
    obj.vd_amplitude.assign(static_cast<size_t>(opt.d_tok), 0.0);
    if (opt.vd_scale > 0.0) {
      const double base_norm = norm(obj.base_token);
      VecD dir(static_cast<size_t>(opt.d_tok));
      for (double& v : dir) v = rng.normal();
      const double dn = norm(dir);
      for (size_t k = 0; k < dir.size(); ++k)
        obj.vd_amplitude[k] = opt.vd_scale * base_norm * dir[k] / dn;
    }
    obj.label_embedding.assign(static_cast<size_t>(opt.d_lab), 0.0);
    if (o < opt.d_lab) {
      obj.label_embedding[static_cast<size_t>(o)] = 1.0;
    } else {
      for (double& v : obj.label_embedding) v = rng.normal();
      const double ln = norm(obj.label_embedding);
      for (double& v : obj.label_embedding) v /= ln;
    }
    const double hue = 2.0 * kPi * o / n_objects;
    obj.color = {0.5 + 0.45 * std::cos(hue), 0.5 + 0.45 * std::cos(hue - 2.0 * kPi / 3.0),
                 0.5 + 0.45 * std::cos(hue + 2.0 * kPi / 3.0)};
    spec.objects.push_back(std::move(obj));
  }
  return spec;
}

}  // namespace osf
