#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "ccn/coconet.hpp"
#include "ccn/errors.hpp"
#include "ccn/geometry.hpp"
#include "ccn/rng.hpp"
#include "ccn/synthscene.hpp"

namespace ccn {

struct MatchSet {
    std::vector<Vec3> source;
    std::vector<Vec3> target;
    std::vector<double> scores;  // inner products of the matched unit features

    int64_t size() const { return static_cast<int64_t>(source.size()); }
};

// For each source point, the target point with maximal feature inner
// product; pairs at or below the similarity floor are dropped.
inline MatchSet best_match(const FeatureCloud& a, const FeatureCloud& b, double similarity_floor = 0.0) {
    if (a.size() == 0 || b.size() == 0) throw NoMatches("best_match: empty cloud");
    const int64_t n = a.size(), m = b.size(), c = a.features.shape[1];
    if (b.features.shape[1] != c) throw ShapeMismatch("best_match: feature dims differ");
    MatchSet out;
    CMapMat fa(a.features.data.data(), n, c);
    CMapMat fb(b.features.data.data(), m, c);
    // Row blocks keep the similarity matrix small.
    const int64_t block = 256;
    RowMat sim;
    for (int64_t r0 = 0; r0 < n; r0 += block) {
        const int64_t rows = std::min(block, n - r0);
        sim.noalias() = fa.middleRows(r0, rows) * fb.transpose();
        for (int64_t r = 0; r < rows; ++r) {
            int64_t best = 0;
            double score = sim(r, 0);
            for (int64_t j = 1; j < m; ++j)
                if (sim(r, j) > score) {
                    score = sim(r, j);
                    best = j;
                }
            if (score <= similarity_floor) continue;
            out.source.push_back(a.points[static_cast<size_t>(r0 + r)]);
            out.target.push_back(b.points[static_cast<size_t>(best)]);
            out.scores.push_back(score);
        }
    }
    if (out.source.empty()) throw NoMatches("best_match: all scores at or below the floor");
    return out;
}

// Weighted orthogonal Procrustes (Kabsch): least-squares rigid transform
// mapping src onto dst, reflection-corrected so det(R) = +1.
inline RigidTransform procrustes(const std::vector<Vec3>& src, const std::vector<Vec3>& dst,
                                 const std::vector<double>* weights = nullptr) {
    const size_t n = src.size();
    if (n != dst.size() || n < 3) throw DegenerateConfiguration("procrustes: needs >= 3 pairs");
    double wsum = 0;
    Vec3 cs = Vec3::Zero(), cd = Vec3::Zero();
    for (size_t i = 0; i < n; ++i) {
        const double w = weights ? (*weights)[i] : 1.0;
        cs += w * src[i];
        cd += w * dst[i];
        wsum += w;
    }
    if (wsum <= 0) throw DegenerateConfiguration("procrustes: non-positive weight sum");
    cs /= wsum;
    cd /= wsum;
    Mat3 h = Mat3::Zero();
    double spread = 0;
    for (size_t i = 0; i < n; ++i) {
        const double w = weights ? (*weights)[i] : 1.0;
        h += w * (src[i] - cs) * (dst[i] - cd).transpose();
        spread += w * (src[i] - cs).squaredNorm();
    }
    Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Vec3 sv = svd.singularValues();
    // Coincident or collinear configurations leave the rotation
    // underdetermined (at most one meaningful singular value).
    if (spread < 1e-18 || sv(1) < 1e-12 * std::max(sv(0), 1e-300))
        throw DegenerateConfiguration("procrustes: collinear or coincident points");
    Mat3 d = Mat3::Identity();
    d(2, 2) = (svd.matrixV() * svd.matrixU().transpose()).determinant() < 0 ? -1.0 : 1.0;
    RigidTransform out;
    out.rotation = svd.matrixV() * d * svd.matrixU().transpose();
    out.translation = cd - out.rotation * cs;
    return out;
}

struct RansacConfig {
    int iterations = 1000;
    int sample_size = 3;  // minimum for a unique rigid transform
    double inlier_radius = 0.25;  // world units; default set to half a voxel by callers
    double similarity_floor = 0.0;
    uint64_t seed = 0;
};

struct RansacResult {
    RigidTransform transform;
    std::vector<char> inliers;
    int inlier_count = 0;
    double mean_residual = 0;
};

inline RansacResult ransac_align(const MatchSet& matches, const RansacConfig& cfg) {
    const int64_t n = matches.size();
    if (n < cfg.sample_size) throw InsufficientMatches("ransac_align: fewer matches than sample size");
    if (cfg.iterations < 1 || cfg.inlier_radius <= 0) throw Error("ransac_align: bad config");
    int best_count = -1;
    double best_residual = 0;
    std::vector<char> best_mask;
    RigidTransform best_t;
    std::vector<Vec3> s(static_cast<size_t>(cfg.sample_size)), d(static_cast<size_t>(cfg.sample_size));
    for (int it = 0; it < cfg.iterations; ++it) {
        Rng rng = Rng::derive(cfg.seed, static_cast<uint64_t>(it));
        // Distinct indices.
        std::vector<int64_t> idx;
        while (static_cast<int>(idx.size()) < cfg.sample_size) {
            const int64_t j = static_cast<int64_t>(rng.uniform_index(static_cast<uint64_t>(n)));
            if (std::find(idx.begin(), idx.end(), j) == idx.end()) idx.push_back(j);
        }
        for (int j = 0; j < cfg.sample_size; ++j) {
            s[static_cast<size_t>(j)] = matches.source[static_cast<size_t>(idx[static_cast<size_t>(j)])];
            d[static_cast<size_t>(j)] = matches.target[static_cast<size_t>(idx[static_cast<size_t>(j)])];
        }
        RigidTransform t;
        try {
            t = procrustes(s, d);
        } catch (const DegenerateConfiguration&) {
            continue;
        }
        int count = 0;
        double residual = 0;
        std::vector<char> mask(static_cast<size_t>(n), 0);
        for (int64_t j = 0; j < n; ++j) {
            const double r = (t(matches.source[static_cast<size_t>(j)]) -
                              matches.target[static_cast<size_t>(j)])
                                 .norm();
            if (r < cfg.inlier_radius) {
                mask[static_cast<size_t>(j)] = 1;
                ++count;
                residual += r;
            }
        }
        if (count == 0) continue;
        residual /= count;
        if (count > best_count || (count == best_count && residual < best_residual)) {
            best_count = count;
            best_residual = residual;
            best_mask = std::move(mask);
            best_t = t;
        }
    }
    if (best_count < 3) throw NoConsensus("ransac_align: best consensus below 3 inliers");
    // Refit on the full consensus set.
    std::vector<Vec3> src, dst;
    for (int64_t j = 0; j < n; ++j)
        if (best_mask[static_cast<size_t>(j)]) {
            src.push_back(matches.source[static_cast<size_t>(j)]);
            dst.push_back(matches.target[static_cast<size_t>(j)]);
        }
    RansacResult out;
    try {
        out.transform = procrustes(src, dst);
    } catch (const DegenerateConfiguration&) {
        out.transform = best_t;
    }
    out.inliers = std::move(best_mask);
    out.inlier_count = best_count;
    out.mean_residual = best_residual;
    return out;
}

// Correct iff yaw, pitch and roll of the relative rotation are each within
// tol_deg on the shortest arc.
inline bool rotation_accuracy(const RigidTransform& estimated, const RigidTransform& truth,
                              double tol_deg = 10.0) {
    const Mat3 rel = estimated.rotation * truth.rotation.transpose();
    const EulerAngles e = euler_from_rotation(rel);
    const double tol = deg2rad(tol_deg);
    return std::abs(wrap_angle(e.yaw)) <= tol && std::abs(wrap_angle(e.pitch)) <= tol &&
           std::abs(wrap_angle(e.roll)) <= tol;
}

// Axis-aligned bounding box of a possibly oriented box.
inline Box3D axis_aligned(const Box3D& b) {
    Box3D out;
    out.center = b.center;
    out.half_extents = b.orientation.cwiseAbs() * b.half_extents;
    return out;
}

inline double box_iou(const Box3D& a, const Box3D& b) {
    const Box3D aa = axis_aligned(a), bb = axis_aligned(b);
    double inter = 1.0;
    for (int ax = 0; ax < 3; ++ax) {
        const double lo = std::max(aa.center[ax] - aa.half_extents[ax], bb.center[ax] - bb.half_extents[ax]);
        const double hi = std::min(aa.center[ax] + aa.half_extents[ax], bb.center[ax] + bb.half_extents[ax]);
        if (hi <= lo) return 0.0;
        inter *= hi - lo;
    }
    const double va = 8 * aa.half_extents.prod();
    const double vb = 8 * bb.half_extents.prod();
    return inter / (va + vb - inter);
}

inline Box3D transform_box(const Box3D& b, const RigidTransform& t) {
    Box3D out = b;
    out.center = t(b.center);
    out.orientation = t.rotation * b.orientation;
    return out;
}

inline bool box_contains(const Box3D& b, const Vec3& p) {
    const Vec3 local = b.orientation.transpose() * (p - b.center);
    return (local.cwiseAbs() - b.half_extents).maxCoeff() <= 0;
}

// Radius-limited argmax-cosine matching (objects pre-aligned). Points of A
// with no B-neighbor inside the radius are skipped. A uniform spatial hash
// keeps the neighborhood search near-linear.
inline MatchSet dense_correspondence(const FeatureCloud& a, const FeatureCloud& b, double radius) {
    MatchSet out;
    if (a.size() == 0 || b.size() == 0 || radius <= 0) return out;
    const double cell = radius;
    auto key = [&](const Vec3& p) {
        const int64_t ix = static_cast<int64_t>(std::floor(p.x() / cell));
        const int64_t iy = static_cast<int64_t>(std::floor(p.y() / cell));
        const int64_t iz = static_cast<int64_t>(std::floor(p.z() / cell));
        return (ix * 73856093) ^ (iy * 19349663) ^ (iz * 83492791);
    };
    std::unordered_map<int64_t, std::vector<int64_t>> grid;
    for (int64_t j = 0; j < b.size(); ++j) grid[key(b.points[static_cast<size_t>(j)])].push_back(j);
    const int64_t c = a.features.shape[1];
    for (int64_t i = 0; i < a.size(); ++i) {
        const Vec3& p = a.points[static_cast<size_t>(i)];
        int64_t best = -1;
        double best_score = 0;
        for (int dx = -1; dx <= 1; ++dx)
            for (int dy = -1; dy <= 1; ++dy)
                for (int dz = -1; dz <= 1; ++dz) {
                    const auto it = grid.find(key(p + cell * Vec3(dx, dy, dz)));
                    if (it == grid.end()) continue;
                    for (int64_t j : it->second) {
                        if ((b.points[static_cast<size_t>(j)] - p).norm() > radius) continue;
                        double s = 0;
                        for (int64_t ch = 0; ch < c; ++ch) s += a.features.at2(i, ch) * b.features.at2(j, ch);
                        if (best < 0 || s > best_score) {
                            best = j;
                            best_score = s;
                        }
                    }
                }
        if (best < 0) continue;
        out.source.push_back(p);
        out.target.push_back(b.points[static_cast<size_t>(best)]);
        out.scores.push_back(best_score);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Tracking (Fig. 4 pipeline): object features from frame 0, amodal scene
// cloud per frame, best-match + RANSAC, whole-scene search.

struct TrackConfig {
    RansacConfig ransac;
    int64_t uniform_queries = 4096;
    int64_t max_object_points = 512;
    double similarity_floor = 0.0;
    double occupancy_keep = 0.5;  // amodal scene points kept where F^o > this
    bool visible_only = false;    // ablation: scene cloud from visible surface only
    uint64_t seed = 0;
};

struct TrackResult {
    std::vector<Box3D> boxes;
    std::vector<RigidTransform> motions;  // estimated frame0 -> frame t
    std::vector<char> lost;
};

// Amodal scene feature cloud for one view: visible surface points plus
// uniform in-grid queries kept where the occupancy head fires.
inline FeatureCloud amodal_scene_cloud(CoCoNet& model, const VoxelFeatureGrid& m, const ViewRecord& view,
                                       int64_t uniform_queries, double occupancy_keep, uint64_t seed) {
    std::vector<Vec3> pts = surface_points(view);
    if (uniform_queries > 0) {
        std::vector<Vec3> uni =
            sample_query_points(m.spec, uniform_queries, seed, QuerySampleMode::Uniform, m.grid_to_world);
        if (occupancy_keep > 0) {
            Tensor occ = model.query_batch(m, uni, Head::Occupancy);
            for (size_t i = 0; i < uni.size(); ++i)
                if (occ[static_cast<int64_t>(i)] > occupancy_keep) pts.push_back(uni[i]);
        } else {
            pts.insert(pts.end(), uni.begin(), uni.end());
        }
    }
    FeatureCloud cloud = model.amodal_feature_cloud(m, pts);
    cloud.source = FeatureCloud::Source::TopDown;
    return cloud;
}

inline TrackResult track_sequence(CoCoNet& model, const TrackingSequence& seq, const Box3D& box0,
                                  const TrackConfig& cfg) {
    if (seq.frames.empty()) throw Error("track_sequence: empty sequence");
    TrackResult result;
    // Object cloud from frame 0: visible surface points inside the box.
    const ViewRecord& f0 = seq.frames[0];
    VoxelFeatureGrid m0 = model.encode_scene(f0, f0.cam_pose);
    std::vector<Vec3> obj_pts;
    for (const Vec3& p : surface_points(f0))
        if (box_contains(box0, p)) obj_pts.push_back(p);
    if (obj_pts.size() > static_cast<size_t>(cfg.max_object_points)) {
        Rng rng(cfg.seed + 17);
        std::vector<Vec3> keep;
        for (int64_t i = 0; i < cfg.max_object_points; ++i)
            keep.push_back(obj_pts[rng.uniform_index(obj_pts.size())]);
        obj_pts = std::move(keep);
    }
    FeatureCloud obj = model.amodal_feature_cloud(m0, obj_pts);
    result.boxes.push_back(box0);
    result.motions.push_back(RigidTransform::identity());
    result.lost.push_back(0);
    Box3D prev_box = box0;
    RigidTransform prev_motion;
    for (size_t t = 1; t < seq.frames.size(); ++t) {
        const ViewRecord& frame = seq.frames[t];
        VoxelFeatureGrid mt = model.encode_scene(frame, frame.cam_pose);
        FeatureCloud scene;
        if (cfg.visible_only) {
            scene = model.amodal_feature_cloud(mt, surface_points(frame));
        } else {
            scene = amodal_scene_cloud(model, mt, frame, cfg.uniform_queries, cfg.occupancy_keep,
                                       cfg.seed + 31 * static_cast<uint64_t>(t));
        }
        bool lost = false;
        try {
            if (obj.size() == 0 || scene.size() == 0) throw NoMatches("empty cloud");
            MatchSet matches = best_match(obj, scene, cfg.similarity_floor);
            RansacConfig rc = cfg.ransac;
            rc.seed = cfg.seed + 101 * static_cast<uint64_t>(t);
            RansacResult fit = ransac_align(matches, rc);
            prev_motion = fit.transform;
            prev_box = transform_box(box0, fit.transform);
        } catch (const Error&) {
            lost = true;  // carry the previous box forward
        }
        result.boxes.push_back(prev_box);
        result.motions.push_back(prev_motion);
        result.lost.push_back(lost ? 1 : 0);
    }
    return result;
}

// Cross-view / cross-object 6DoF alignment: amodal clouds for both views,
// best-match, RANSAC.
inline RigidTransform align_objects(CoCoNet& model, const ViewRecord& view_a, const ViewRecord& view_b,
                                    const TrackConfig& cfg) {
    VoxelFeatureGrid ma = model.encode_scene(view_a, view_a.cam_pose);
    VoxelFeatureGrid mb = model.encode_scene(view_b, view_b.cam_pose);
    FeatureCloud ca =
        amodal_scene_cloud(model, ma, view_a, cfg.uniform_queries, cfg.occupancy_keep, cfg.seed + 7);
    FeatureCloud cb =
        amodal_scene_cloud(model, mb, view_b, cfg.uniform_queries, cfg.occupancy_keep, cfg.seed + 13);
    MatchSet matches = best_match(ca, cb, cfg.similarity_floor);
    RansacConfig rc = cfg.ransac;
    rc.seed = cfg.seed;
    return ransac_align(matches, rc).transform;
}

}  // namespace ccn
