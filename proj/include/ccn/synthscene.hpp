#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ccn/errors.hpp"
#include "ccn/geometry.hpp"
#include "ccn/rng.hpp"
#include "ccn/tensor.hpp"

namespace ccn {

// Axis-aligned unless orientation says otherwise; tracking uses the
// axis-aligned variant (orientation = identity).
struct Box3D {
    Vec3 center = Vec3::Zero();
    Vec3 half_extents = Vec3::Ones();
    Mat3 orientation = Mat3::Identity();
};

struct Primitive {
    enum class Kind { Sphere, Box };
    Kind kind = Kind::Sphere;
    RigidTransform pose;     // primitive -> world
    Vec3 half_extents = Vec3(0.5, 0.5, 0.5);  // sphere uses .x() as radius
    Vec3 albedo = Vec3(0.8, 0.8, 0.8);
    int id = 0;

    double bounding_radius() const {
        return kind == Kind::Sphere ? half_extents.x() : half_extents.norm();
    }
};

struct Scene {
    std::vector<Primitive> prims;

    const Primitive* find(int id) const {
        for (const auto& p : prims)
            if (p.id == id) return &p;
        return nullptr;
    }
};

inline double primitive_sdf(const Primitive& prim, const Vec3& world_p) {
    const Vec3 p = prim.pose.inverse()(world_p);
    if (prim.kind == Primitive::Kind::Sphere) return p.norm() - prim.half_extents.x();
    const Vec3 q = p.cwiseAbs() - prim.half_extents;
    const Vec3 qp = q.cwiseMax(0.0);
    return qp.norm() + std::min(q.maxCoeff(), 0.0);
}

inline bool scene_inside(const Scene& scene, const Vec3& p) {
    for (const auto& prim : scene.prims)
        if (primitive_sdf(prim, p) < 0) return true;
    return false;
}

// World-frame axis-aligned bounding box of a primitive.
inline Box3D primitive_aabb(const Primitive& prim) {
    Box3D b;
    b.center = prim.pose.translation;
    if (prim.kind == Primitive::Kind::Sphere) {
        b.half_extents = Vec3::Constant(prim.half_extents.x());
    } else {
        // AABB of the oriented box: |R| * half_extents.
        b.half_extents = prim.pose.rotation.cwiseAbs() * prim.half_extents;
    }
    return b;
}

struct ViewRecord {
    Tensor rgb;    // [h,w,3] in [0,1], quantized to the u8 grid
    Tensor depth;  // [h,w] Z-depth in world units, 0 = no hit, f32-exact
    Tensor prim_id;  // [h,w] hit primitive id, -1 = none (not serialized)
    CameraIntrinsics intrinsics;
    RigidTransform cam_pose;  // camera -> world
};

struct RayHit {
    double t = 0;  // Z-depth parameter
    Vec3 normal = Vec3::UnitZ();
    int prim = -1;
};

// Ray p(t) = origin + t*dir in world; returns smallest t > tmin.
inline std::optional<double> intersect_sphere(const Vec3& o, const Vec3& dir, const Vec3& c, double r) {
    const Vec3 oc = o - c;
    const double a = dir.squaredNorm();
    const double b = 2.0 * oc.dot(dir);
    const double cc = oc.squaredNorm() - r * r;
    const double disc = b * b - 4 * a * cc;
    if (disc < 0) return std::nullopt;
    const double sq = std::sqrt(disc);
    double t = (-b - sq) / (2 * a);
    if (t <= 1e-9) t = (-b + sq) / (2 * a);
    if (t <= 1e-9) return std::nullopt;
    return t;
}

inline std::optional<double> intersect_box(const Vec3& o, const Vec3& dir, const Vec3& he) {
    double t0 = -1e300, t1 = 1e300;
    for (int a = 0; a < 3; ++a) {
        if (std::abs(dir[a]) < 1e-15) {
            if (std::abs(o[a]) > he[a]) return std::nullopt;
            continue;
        }
        double ta = (-he[a] - o[a]) / dir[a];
        double tb = (he[a] - o[a]) / dir[a];
        if (ta > tb) std::swap(ta, tb);
        t0 = std::max(t0, ta);
        t1 = std::min(t1, tb);
    }
    if (t0 > t1) return std::nullopt;
    double t = t0 > 1e-9 ? t0 : t1;
    if (t <= 1e-9) return std::nullopt;
    return t;
}

inline std::optional<RayHit> cast_ray(const Scene& scene, const Vec3& origin, const Vec3& dir) {
    RayHit best;
    best.t = 1e300;
    for (const auto& prim : scene.prims) {
        std::optional<double> t;
        if (prim.kind == Primitive::Kind::Sphere) {
            t = intersect_sphere(origin, dir, prim.pose.translation, prim.half_extents.x());
        } else {
            const RigidTransform inv = prim.pose.inverse();
            t = intersect_box(inv(origin), inv.rotation * dir, prim.half_extents);
        }
        if (t && *t < best.t) {
            best.t = *t;
            best.prim = prim.id;
            const Vec3 hit = origin + *t * dir;
            if (prim.kind == Primitive::Kind::Sphere) {
                best.normal = (hit - prim.pose.translation).normalized();
            } else {
                const Vec3 lp = prim.pose.inverse()(hit);
                int axis = 0;
                double bestd = 1e300;
                for (int a = 0; a < 3; ++a) {
                    const double d = prim.half_extents[a] - std::abs(lp[a]);
                    if (d < bestd) {
                        bestd = d;
                        axis = a;
                    }
                }
                Vec3 ln = Vec3::Zero();
                ln[axis] = lp[axis] > 0 ? 1.0 : -1.0;
                best.normal = prim.pose.rotation * ln;
            }
        }
    }
    if (best.prim < 0) return std::nullopt;
    return best;
}

inline constexpr double kLambertFloor = 0.2;
inline const Vec3 kLightDir = Vec3(0.35, 0.25, 0.9).normalized();  // surface -> light, world frame

// Analytic ray cast through pixel centers. Z-depth (not ray length) is
// stored; rgb is Lambert-shaded albedo. Outputs are snapped to the dataset
// storage precision (u8 rgb, f32 depth) so disk round trips are bit-exact.
inline ViewRecord render_view(const Scene& scene, const RigidTransform& cam_pose,
                              const CameraIntrinsics& k) {
    ViewRecord view;
    view.intrinsics = k;
    view.cam_pose = cam_pose;
    view.rgb = Tensor({k.height, k.width, 3});
    view.depth = Tensor({k.height, k.width});
    view.prim_id = Tensor::full({k.height, k.width}, -1.0);
    for (int64_t v = 0; v < k.height; ++v)
        for (int64_t u = 0; u < k.width; ++u) {
            // Camera-frame direction with unit Z so t is Z-depth directly.
            const Vec3 dc((static_cast<double>(u) - k.cx) / k.fx, (static_cast<double>(v) - k.cy) / k.fy,
                          1.0);
            const Vec3 dir = cam_pose.rotation * dc;
            const auto hit = cast_ray(scene, cam_pose.translation, dir);
            if (!hit) continue;
            view.depth.data[static_cast<size_t>(v * k.width + u)] =
                static_cast<double>(static_cast<float>(hit->t));
            view.prim_id.data[static_cast<size_t>(v * k.width + u)] = static_cast<double>(hit->prim);
            const Primitive* prim = scene.find(hit->prim);
            const double lambert = std::max(hit->normal.dot(kLightDir), kLambertFloor);
            for (int64_t ch = 0; ch < 3; ++ch) {
                const double c = std::clamp(prim->albedo[ch] * lambert, 0.0, 1.0);
                const double q = std::round(c * 255.0) / 255.0;
                view.rgb.data[static_cast<size_t>((v * k.width + u) * 3 + ch)] = q;
            }
        }
    return view;
}

// World-frame surface points (and optionally their colors) from a depth map.
inline std::vector<Vec3> surface_points(const ViewRecord& view, std::vector<Vec3>* colors = nullptr) {
    std::vector<Vec3> pts;
    const auto& k = view.intrinsics;
    for (int64_t v = 0; v < k.height; ++v)
        for (int64_t u = 0; u < k.width; ++u) {
            const double z = view.depth.data[static_cast<size_t>(v * k.width + u)];
            if (z <= 0) continue;
            const Vec3 pc((static_cast<double>(u) - k.cx) / k.fx * z,
                          (static_cast<double>(v) - k.cy) / k.fy * z, z);
            pts.push_back(view.cam_pose(pc));
            if (colors) {
                const size_t off = static_cast<size_t>((v * k.width + u) * 3);
                colors->push_back(Vec3(view.rgb.data[off], view.rgb.data[off + 1], view.rgb.data[off + 2]));
            }
        }
    return pts;
}

struct SceneSampleConfig {
    double placement_extent = 2.2;  // centers drawn in [-e, e]^3
    double min_size = 0.5;
    double max_size = 1.0;
};

// Non-overlapping random primitives (rejection sampling on bounding spheres).
inline Scene sample_scene(int n_objects, uint64_t seed, const SceneSampleConfig& cfg = {}) {
    if (n_objects < 1) throw Error("sample_scene: n_objects must be >= 1");
    Rng rng(seed);
    Scene scene;
    int attempts = 0;
    while (static_cast<int>(scene.prims.size()) < n_objects) {
        if (++attempts > 10000) throw PlacementFailure("scene placement failed after 10^4 rejections");
        Primitive p;
        p.kind = rng.uniform() < 0.5 ? Primitive::Kind::Sphere : Primitive::Kind::Box;
        p.id = static_cast<int>(scene.prims.size());
        p.pose.translation = Vec3(rng.uniform(-cfg.placement_extent, cfg.placement_extent),
                                  rng.uniform(-cfg.placement_extent, cfg.placement_extent),
                                  rng.uniform(-cfg.placement_extent, cfg.placement_extent));
        if (p.kind == Primitive::Kind::Sphere) {
            p.half_extents = Vec3::Constant(rng.uniform(cfg.min_size, cfg.max_size) * 0.5 + 0.25);
        } else {
            p.half_extents = Vec3(rng.uniform(cfg.min_size, cfg.max_size) * 0.5,
                                  rng.uniform(cfg.min_size, cfg.max_size) * 0.5,
                                  rng.uniform(cfg.min_size, cfg.max_size) * 0.5);
            EulerAngles e;
            e.yaw = rng.uniform(-kPi, kPi);
            e.pitch = rng.uniform(-0.4, 0.4);
            e.roll = rng.uniform(-0.4, 0.4);
            p.pose.rotation = rotation_from_euler(e);
        }
        // Saturated distinct-ish colors help nothing at rendering level but
        // keep scenes visually separable in dumps.
        p.albedo = Vec3(rng.uniform(0.15, 1.0), rng.uniform(0.15, 1.0), rng.uniform(0.15, 1.0));
        p.albedo /= std::max(p.albedo.maxCoeff(), 0.3);
        bool ok = true;
        for (const auto& q : scene.prims)
            if ((q.pose.translation - p.pose.translation).norm() <
                q.bounding_radius() + p.bounding_radius())
                ok = false;
        if (ok) scene.prims.push_back(p);
    }
    return scene;
}

// Right-handed look-at pose: +Z forward toward the target, +Y image-down.
inline RigidTransform look_at(const Vec3& eye, const Vec3& target, const Vec3& up = Vec3::UnitZ()) {
    RigidTransform pose;
    const Vec3 z = (target - eye).normalized();
    Vec3 x = z.cross(up);
    if (x.norm() < 1e-9) x = z.cross(Vec3::UnitY());
    x.normalize();
    const Vec3 y = z.cross(x);
    pose.rotation.col(0) = x;
    pose.rotation.col(1) = y;
    pose.rotation.col(2) = z;
    pose.translation = eye;
    return pose;
}

enum class CameraSampleMode { Hemisphere, Random };

struct CameraSampleConfig {
    CameraSampleMode mode = CameraSampleMode::Random;
    Vec3 center = Vec3::Zero();
    double distance = 7.0;
    int count = 2;              // random mode
    double min_elevation = 10;  // degrees, random mode
    double max_elevation = 70;
};

// Hemisphere mode reproduces the 8 azimuths x 5 elevations protocol grid;
// random mode samples look-at poses toward the scene center.
inline std::vector<RigidTransform> sample_camera_poses(const CameraSampleConfig& cfg, uint64_t seed) {
    std::vector<RigidTransform> poses;
    auto eye_at = [&](double az_deg, double el_deg) -> Vec3 {
        const double az = deg2rad(az_deg), el = deg2rad(el_deg);
        return cfg.center + cfg.distance * Vec3(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az),
                                                std::sin(el));
    };
    if (cfg.mode == CameraSampleMode::Hemisphere) {
        for (int e = 0; e <= 80; e += 20)
            for (int a = 0; a < 360; a += 45) poses.push_back(look_at(eye_at(a, e), cfg.center));
        return poses;
    }
    Rng rng(seed);
    for (int i = 0; i < cfg.count; ++i) {
        const double az = rng.uniform(0, 360);
        const double el = rng.uniform(cfg.min_elevation, cfg.max_elevation);
        poses.push_back(look_at(eye_at(az, el), cfg.center));
    }
    return poses;
}

struct MotionSpec {
    Vec3 linear_velocity = Vec3::Zero();   // world units per frame
    Vec3 angular_axis = Vec3::UnitZ();
    double angular_rate = 0;               // radians per frame, about the object center
    double noise_sigma = 0;                // optional jitter on the per-frame delta
    double camera_orbit_rate = 0;          // degrees of azimuth per frame (egomotion, known)
};

struct TrackingSequence {
    std::vector<ViewRecord> frames;
    std::vector<RigidTransform> trajectory;  // world motion of the target: frame0 -> frame t
    std::vector<Box3D> boxes;                // ground-truth axis-aligned boxes
    std::vector<double> occlusion;           // fraction of target pixels hidden by other objects
    int target_id = 0;
};

// Fraction of the target's unoccluded silhouette hidden by the rest of the
// scene in this view.
inline double occlusion_fraction(const Scene& scene, int target_id, const RigidTransform& cam_pose,
                                 const CameraIntrinsics& k) {
    Scene solo;
    for (const auto& p : scene.prims)
        if (p.id == target_id) solo.prims.push_back(p);
    int64_t solo_px = 0, visible_px = 0;
    for (int64_t v = 0; v < k.height; ++v)
        for (int64_t u = 0; u < k.width; ++u) {
            const Vec3 dc((static_cast<double>(u) - k.cx) / k.fx, (static_cast<double>(v) - k.cy) / k.fy,
                          1.0);
            const Vec3 dir = cam_pose.rotation * dc;
            if (!cast_ray(solo, cam_pose.translation, dir)) continue;
            ++solo_px;
            const auto full = cast_ray(scene, cam_pose.translation, dir);
            if (full && full->prim == target_id) ++visible_px;
        }
    if (solo_px == 0) return 1.0;
    return 1.0 - static_cast<double>(visible_px) / static_cast<double>(solo_px);
}

// Smooth rigid trajectory for one primitive: constant linear velocity plus
// rotation in place about the object center, with optional noise on the
// per-frame increments.
inline TrackingSequence make_tracking_sequence(const Scene& scene, int target_id, const MotionSpec& motion,
                                               int t_steps, uint64_t seed,
                                               const CameraIntrinsics& k,
                                               const RigidTransform& cam0) {
    if (!scene.find(target_id)) throw Error("make_tracking_sequence: unknown target id");
    TrackingSequence seq;
    seq.target_id = target_id;
    Rng rng(seed);
    const Primitive base = *scene.find(target_id);
    Vec3 lin = Vec3::Zero();
    Mat3 rot = Mat3::Identity();
    const Vec3 axis = motion.angular_axis.normalized();
    for (int t = 0; t < t_steps; ++t) {
        if (t > 0) {
            Vec3 dl = motion.linear_velocity;
            double da = motion.angular_rate;
            if (motion.noise_sigma > 0) {
                dl += motion.noise_sigma * Vec3(rng.normal(), rng.normal(), rng.normal());
                da += motion.noise_sigma * rng.normal();
            }
            lin += dl;
            rot = Eigen::AngleAxisd(da, axis).toRotationMatrix() * rot;
        }
        Scene frame_scene = scene;
        Primitive& tgt = *const_cast<Primitive*>(frame_scene.find(target_id));
        tgt.pose.rotation = rot * base.pose.rotation;
        tgt.pose.translation = base.pose.translation + lin;
        // World motion from frame 0: rotate about the (moving) object center.
        RigidTransform motion_t;
        motion_t.rotation = rot;
        motion_t.translation = tgt.pose.translation - rot * base.pose.translation;
        RigidTransform cam = cam0;
        if (motion.camera_orbit_rate != 0) {
            const Mat3 orbit = rot_z(deg2rad(motion.camera_orbit_rate * t));
            cam.rotation = orbit * cam0.rotation;
            cam.translation = orbit * cam0.translation;
        }
        seq.frames.push_back(render_view(frame_scene, cam, k));
        seq.trajectory.push_back(motion_t);
        // Ground-truth box: the frame-0 box transported by the motion (the
        // same convention trackers report), not a re-fit axis-aligned hull.
        Box3D box = primitive_aabb(base);
        box.center = motion_t(box.center);
        box.orientation = motion_t.rotation * box.orientation;
        seq.boxes.push_back(box);
        seq.occlusion.push_back(occlusion_fraction(frame_scene, target_id, cam, k));
    }
    return seq;
}

// ---------------------------------------------------------------------------
// Dataset file: magic "CCD1", version u16, u64 record count; per record
// intrinsics (6 x f64), pose (12 x f64: rotation row-major then translation),
// dims (2 x u32: width, height), depth (f32), rgb (u8). Little-endian.
namespace detail {
inline void put_f64(std::ostream& f, double v) { f.write(reinterpret_cast<const char*>(&v), 8); }
inline void put_f32(std::ostream& f, float v) { f.write(reinterpret_cast<const char*>(&v), 4); }
inline void put_u64(std::ostream& f, uint64_t v) { f.write(reinterpret_cast<const char*>(&v), 8); }
inline void put_u32(std::ostream& f, uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); }
inline void put_u16(std::ostream& f, uint16_t v) { f.write(reinterpret_cast<const char*>(&v), 2); }
template <typename T>
inline T get(std::istream& f) {
    T v{};
    f.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!f) throw FormatError("truncated dataset file");
    return v;
}
}  // namespace detail

inline void write_dataset(const std::string& path, const std::vector<ViewRecord>& records) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open for write: " + path);
    f.write("CCD1", 4);
    detail::put_u16(f, 1);
    detail::put_u64(f, records.size());
    for (const auto& r : records) {
        const auto& k = r.intrinsics;
        detail::put_f64(f, k.fx);
        detail::put_f64(f, k.fy);
        detail::put_f64(f, k.cx);
        detail::put_f64(f, k.cy);
        detail::put_f64(f, static_cast<double>(k.width));
        detail::put_f64(f, static_cast<double>(k.height));
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) detail::put_f64(f, r.cam_pose.rotation(i, j));
        for (int i = 0; i < 3; ++i) detail::put_f64(f, r.cam_pose.translation[i]);
        detail::put_u32(f, static_cast<uint32_t>(k.width));
        detail::put_u32(f, static_cast<uint32_t>(k.height));
        for (double d : r.depth.data) detail::put_f32(f, static_cast<float>(d));
        for (double c : r.rgb.data)
            f.put(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0))));
    }
    if (!f) throw Error("write failed: " + path);
}

inline std::vector<ViewRecord> read_dataset(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open dataset: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "CCD1", 4) != 0) throw FormatError("bad dataset magic");
    const uint16_t version = detail::get<uint16_t>(f);
    if (version != 1) throw FormatError("unsupported dataset version");
    const uint64_t n = detail::get<uint64_t>(f);
    std::vector<ViewRecord> records;
    records.reserve(n);
    for (uint64_t i = 0; i < n; ++i) {
        ViewRecord r;
        r.intrinsics.fx = detail::get<double>(f);
        r.intrinsics.fy = detail::get<double>(f);
        r.intrinsics.cx = detail::get<double>(f);
        r.intrinsics.cy = detail::get<double>(f);
        detail::get<double>(f);  // width as f64, authoritative copy below
        detail::get<double>(f);
        for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b) r.cam_pose.rotation(a, b) = detail::get<double>(f);
        for (int a = 0; a < 3; ++a) r.cam_pose.translation[a] = detail::get<double>(f);
        const uint32_t w = detail::get<uint32_t>(f);
        const uint32_t h = detail::get<uint32_t>(f);
        if (w == 0 || h == 0 || w > 65536 || h > 65536) throw FormatError("implausible image dims");
        r.intrinsics.width = static_cast<int>(w);
        r.intrinsics.height = static_cast<int>(h);
        r.depth = Tensor({static_cast<int64_t>(h), static_cast<int64_t>(w)});
        for (double& d : r.depth.data) d = static_cast<double>(detail::get<float>(f));
        r.rgb = Tensor({static_cast<int64_t>(h), static_cast<int64_t>(w), 3});
        for (double& c : r.rgb.data) c = static_cast<double>(detail::get<unsigned char>(f)) / 255.0;
        r.prim_id = Tensor::full({static_cast<int64_t>(h), static_cast<int64_t>(w)}, -1.0);
        records.push_back(std::move(r));
    }
    return records;
}

// Human-readable scene description, one primitive per line.
inline std::string scene_to_text(const Scene& scene) {
    std::ostringstream os;
    os.precision(17);
    for (const auto& p : scene.prims) {
        os << (p.kind == Primitive::Kind::Sphere ? "sphere" : "box") << " " << p.id << " size "
           << p.half_extents.x() << " " << p.half_extents.y() << " " << p.half_extents.z() << " albedo "
           << p.albedo.x() << " " << p.albedo.y() << " " << p.albedo.z() << " pose";
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) os << " " << p.pose.rotation(i, j);
        for (int i = 0; i < 3; ++i) os << " " << p.pose.translation[i];
        os << "\n";
    }
    return os.str();
}

inline Scene scene_from_text(const std::string& text) {
    Scene scene;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string kind, tok;
        Primitive p;
        ls >> kind >> p.id >> tok;
        if (tok != "size") throw FormatError("scene text: expected 'size'");
        p.kind = kind == "sphere" ? Primitive::Kind::Sphere : Primitive::Kind::Box;
        ls >> p.half_extents.x() >> p.half_extents.y() >> p.half_extents.z() >> tok;
        if (tok != "albedo") throw FormatError("scene text: expected 'albedo'");
        ls >> p.albedo.x() >> p.albedo.y() >> p.albedo.z() >> tok;
        if (tok != "pose") throw FormatError("scene text: expected 'pose'");
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) ls >> p.pose.rotation(i, j);
        for (int i = 0; i < 3; ++i) ls >> p.pose.translation[i];
        if (!ls) throw FormatError("scene text: short line");
        scene.prims.push_back(p);
    }
    return scene;
}

}  // namespace ccn
