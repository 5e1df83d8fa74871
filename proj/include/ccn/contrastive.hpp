#pragma once

#include <chrono>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "ccn/coconet.hpp"
#include "ccn/errors.hpp"
#include "ccn/featuregrid.hpp"
#include "ccn/geometry.hpp"
#include "ccn/optim.hpp"
#include "ccn/rng.hpp"
#include "ccn/synthscene.hpp"
#include "ccn/tape.hpp"

namespace ccn {

// Input/target views of one scene; relative_pose V maps input-camera
// coordinates to target-camera coordinates.
struct ViewPair {
    ViewRecord input_view;
    ViewRecord target_view;
    RigidTransform relative_pose;
};

inline ViewPair make_view_pair(ViewRecord input, ViewRecord target) {
    ViewPair pair;
    pair.relative_pose = compose(target.cam_pose.inverse(), input.cam_pose);
    pair.input_view = std::move(input);
    pair.target_view = std::move(target);
    return pair;
}

// FIFO ring of detached unit-norm key features.
class NegativeQueue {
  public:
    NegativeQueue(int64_t capacity, int64_t dim) : buf_({capacity, dim}), capacity_(capacity), dim_(dim) {}

    void push(const Tensor& batch) {
        if (batch.shape.back() != dim_) throw ShapeMismatch("NegativeQueue::push dim");
        const int64_t n = batch.numel() / dim_;
        for (int64_t r = 0; r < n; ++r) {
            std::copy_n(&batch.data[static_cast<size_t>(r * dim_)], dim_,
                        &buf_.data[static_cast<size_t>(cursor_ * dim_)]);
            cursor_ = (cursor_ + 1) % capacity_;
            size_ = std::min(size_ + 1, capacity_);
        }
    }

    int64_t size() const { return size_; }
    int64_t capacity() const { return capacity_; }

    // Most recent min(k, size) keys, newest first.
    Tensor negatives(int64_t k) const {
        const int64_t m = std::min(k, size_);
        Tensor out({m, dim_});
        for (int64_t r = 0; r < m; ++r) {
            const int64_t idx = ((cursor_ - 1 - r) % capacity_ + capacity_) % capacity_;
            std::copy_n(&buf_.data[static_cast<size_t>(idx * dim_)], dim_,
                        &out.data[static_cast<size_t>(r * dim_)]);
        }
        return out;
    }

    // Oldest-first snapshot, for inspection.
    Tensor snapshot() const {
        Tensor out({size_, dim_});
        for (int64_t r = 0; r < size_; ++r) {
            const int64_t idx = ((cursor_ - size_ + r) % capacity_ + capacity_) % capacity_;
            std::copy_n(&buf_.data[static_cast<size_t>(idx * dim_)], dim_,
                        &out.data[static_cast<size_t>(r * dim_)]);
        }
        return out;
    }

    // Checkpoint round trip through the parameter store ('_'-prefixed
    // records are bookkeeping, never optimized).
    void save_to(ParameterStore& store) const {
        auto set = [&](const std::string& n, Tensor t) {
            if (store.has(n))
                store.at(n).value = std::move(t);
            else
                store.add(n, std::move(t));
        };
        set("_queue_buf", buf_);
        set("_queue_state", Tensor({2}, {static_cast<double>(cursor_), static_cast<double>(size_)}));
    }

    static NegativeQueue load_from(ParameterStore& store, int64_t capacity, int64_t dim) {
        NegativeQueue q(capacity, dim);
        if (store.has("_queue_buf")) {
            const Tensor& buf = store.at("_queue_buf").value;
            if (buf.shape != std::vector<int64_t>{capacity, dim})
                throw FormatError("negative queue shape mismatch in checkpoint");
            q.buf_ = buf;
            const Tensor& st = store.at("_queue_state").value;
            q.cursor_ = static_cast<int64_t>(st[0]);
            q.size_ = static_cast<int64_t>(st[1]);
        }
        return q;
    }

  private:
    Tensor buf_;
    int64_t capacity_;
    int64_t dim_;
    int64_t cursor_ = 0;
    int64_t size_ = 0;
};

struct TrainConfig {
    double tau = 0.07;
    int64_t negatives_per_anchor = 1024;  // K
    int64_t queue_capacity = 4096;
    int64_t n_pos = 512;   // correspondence samples per step
    int64_t n_occ = 256;   // occupancy positives (and as many negatives)
    AdamConfig adam;       // lr 1e-4, beta 0.9/0.999
    int64_t batch_size = 1;
    int64_t steps = 2000;
    uint64_t seed = 0;
    double lambda_nce = 1.0;
    double lambda_occ = 1.0;
    double lambda_rgb = 1.0;
    int64_t checkpoint_every = 500;

    void validate() const {
        if (tau <= 0) throw Error("TrainConfig: tau must be > 0");
        if (negatives_per_anchor < 1) throw Error("TrainConfig: K must be >= 1");
        if (n_pos < 1) throw Error("TrainConfig: n_pos must be >= 1");
        if (batch_size < 1) throw Error("TrainConfig: batch_size must be >= 1");
    }
};

// Plain-tensor InfoNCE, for callers outside a training tape.
inline double info_nce_loss(const Tensor& q, const Tensor& k_pos, const Tensor& negatives, double tau) {
    Tape tape;
    Value vq = tape.input(q, false);
    Value vk = tape.input(k_pos, false);
    return tape.val(tape.info_nce(vq, vk, negatives, tau))[0];
}

// Random target-view surface points (world frame) with their colors,
// without replacement; if n exceeds the surface count, the remainder is
// drawn with replacement and counted.
struct CorrespondenceSample {
    std::vector<Vec3> points;
    std::vector<Vec3> colors;
    int64_t with_replacement = 0;
};

// True when the world point lies on a surface observed by the view: it
// projects inside the image and matches the recorded depth.
inline bool point_visible(const ViewRecord& view, const Vec3& p, double tol = 0.1) {
    const Vec3 pc = view.cam_pose.inverse()(p);
    if (pc.z() <= kDepthEps) return false;
    const Vec2 px = project(pc, view.intrinsics);
    const auto u = static_cast<int64_t>(std::lround(px.x()));
    const auto v = static_cast<int64_t>(std::lround(px.y()));
    if (u < 0 || v < 0 || u >= view.intrinsics.width || v >= view.intrinsics.height) return false;
    const double d = view.depth.at2(v, u);
    return d > 0 && std::abs(d - pc.z()) < tol;
}

inline CorrespondenceSample sample_target_surface(const ViewRecord& target, int64_t n, uint64_t seed) {
    std::vector<Vec3> colors;
    std::vector<Vec3> pts = surface_points(target, &colors);
    if (pts.empty()) throw EmptyTargetCloud("target view sees no surface");
    Rng rng(seed);
    CorrespondenceSample out;
    std::vector<size_t> order(pts.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    const int64_t uniq = std::min<int64_t>(n, static_cast<int64_t>(pts.size()));
    for (int64_t i = 0; i < uniq; ++i) {
        const size_t j = static_cast<size_t>(i) + rng.uniform_index(order.size() - static_cast<size_t>(i));
        std::swap(order[static_cast<size_t>(i)], order[j]);
        out.points.push_back(pts[order[static_cast<size_t>(i)]]);
        out.colors.push_back(colors[order[static_cast<size_t>(i)]]);
    }
    for (int64_t i = uniq; i < n; ++i) {
        const size_t j = rng.uniform_index(pts.size());
        out.points.push_back(pts[j]);
        out.colors.push_back(colors[j]);
        ++out.with_replacement;
    }
    return out;
}

// Occupancy supervision from one view: positives on the observed surface,
// negatives uniform along camera rays strictly in front of the hit, at
// least one voxel before it (free space by construction).
struct OccupancyLabels {
    std::vector<Vec3> positives;
    std::vector<Vec3> negatives;
};

inline OccupancyLabels sample_occupancy_labels(const ViewRecord& view, int64_t n, uint64_t seed,
                                               double voxel_size) {
    OccupancyLabels out;
    if (n == 0) return out;
    std::vector<Vec3> pts = surface_points(view);
    if (pts.empty()) throw EmptyTargetCloud("view sees no surface");
    // Matching depths for ray construction.
    std::vector<double> depths;
    const auto& k = view.intrinsics;
    std::vector<std::pair<int64_t, int64_t>> pix;
    std::vector<std::pair<int64_t, int64_t>> sky;  // rays that hit nothing: free along their whole extent
    double dmin = 1e300, dmax = 0;
    for (int64_t v = 0; v < k.height; ++v)
        for (int64_t u = 0; u < k.width; ++u) {
            const double d = view.depth.data[static_cast<size_t>(v * k.width + u)];
            if (d > 0) {
                depths.push_back(d);
                pix.push_back({u, v});
                dmin = std::min(dmin, d);
                dmax = std::max(dmax, d);
            } else {
                sky.push_back({u, v});
            }
        }
    Rng rng(seed);
    const RigidTransform& cam = view.cam_pose;
    for (int64_t i = 0; i < n; ++i) {
        const size_t j = rng.uniform_index(pts.size());
        out.positives.push_back(pts[j]);
        // Alternate free-space evidence: in front of an observed surface, or
        // anywhere along a ray that hit nothing (free through the scene's
        // whole observed depth band).
        if (!sky.empty() && i % 2 == 1) {
            const auto [u, v] = sky[rng.uniform_index(sky.size())];
            const double t = rng.uniform(0.5 * dmin, dmax);
            const Vec3 pc((static_cast<double>(u) - k.cx) / k.fx * t,
                          (static_cast<double>(v) - k.cy) / k.fy * t, t);
            out.negatives.push_back(cam(pc));
            continue;
        }
        const double depth = depths[j];
        if (depth - voxel_size <= 0) continue;
        const double lo = std::min(0.5 * depth, depth - voxel_size);
        const double t = rng.uniform(lo, depth - voxel_size);
        const auto [u, v] = pix[j];
        const Vec3 pc((static_cast<double>(u) - k.cx) / k.fx * t, (static_cast<double>(v) - k.cy) / k.fy * t,
                      t);
        out.negatives.push_back(cam(pc));
    }
    return out;
}

// Warp a latent map value to another viewpoint on the tape (inverse
// trilinear resampling, differentiable w.r.t. the grid values).
inline Value warp_grid_on_tape(Tape& tape, Value grid, const GridSpec& spec, const RigidTransform& v) {
    const RigidTransform vinv = v.inverse();
    const int64_t c = tape.val(grid).shape[3];
    std::vector<std::array<double, 3>> coords;
    coords.reserve(static_cast<size_t>(spec.res_x * spec.res_y * spec.res_z));
    for (int64_t i = 0; i < spec.res_x; ++i)
        for (int64_t j = 0; j < spec.res_y; ++j)
            for (int64_t l = 0; l < spec.res_z; ++l) {
                const Vec3 src = world_to_memory(
                    vinv(memory_to_world(Vec3(double(i), double(j), double(l)), spec)), spec);
                coords.push_back({src.x(), src.y(), src.z()});
            }
    Value rows = tape.trilinear_gather(grid, coords);
    return tape.reshape(rows, {spec.res_x, spec.res_y, spec.res_z, c});
}

struct TrainStats {
    double l_nce = 0;
    double l_occ = 0;
    double l_rgb = 0;
    double total = 0;
    int64_t with_replacement = 0;
};

// One optimization step over a batch of view pairs. Top-down features come
// from the input view's map warped by V into the target frame; bottom-up
// features from the target view's own map. The queue supplies negatives
// before the step's keys are pushed.
inline TrainStats train_step(CoCoNet& model, std::span<const ViewPair> batch, NegativeQueue& queue,
                             const TrainConfig& cfg, int64_t step) {
    cfg.validate();
    if (batch.empty()) throw Error("train_step: empty batch");
    Tape tape;
    const GridSpec& spec = model.cfg.grid;
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    TrainStats stats;
    Value total{};
    std::vector<Tensor> new_keys;
    for (size_t b = 0; b < batch.size(); ++b) {
        const ViewPair& pair = batch[b];
        const uint64_t sub = step * 8 + static_cast<uint64_t>(b);
        Value m_inp = model.encode_on_tape(tape, pair.input_view, pair.input_view.cam_pose);
        Value m_tgt = model.encode_on_tape(tape, pair.target_view, pair.target_view.cam_pose);
        Value m_warp = warp_grid_on_tape(tape, m_inp, spec, pair.relative_pose);
        const RigidTransform& tgt_pose = pair.target_view.cam_pose;

        CorrespondenceSample corr =
            sample_target_surface(pair.target_view, cfg.n_pos, Rng::derive(cfg.seed, sub).next_u64());
        stats.with_replacement += corr.with_replacement;
        // Keep only correspondences observed by both views: the input map has
        // no surface evidence at points occluded from the input camera, so
        // such positives are unlearnable.
        {
            size_t kept = 0;
            for (size_t i = 0; i < corr.points.size(); ++i) {
                if (!point_visible(pair.input_view, corr.points[i])) continue;
                corr.points[kept] = corr.points[i];
                corr.colors[kept] = corr.colors[i];
                ++kept;
            }
            if (kept > 0) {
                corr.points.resize(kept);
                corr.colors.resize(kept);
            }
        }
        // Eq.-style correspondence: the query comes from the input view's own
        // map at the input-frame location of the point, the key from the
        // target map at the target-frame location. The two maps see the same
        // world point under different grid coordinates, so the loss cannot be
        // satisfied by positional cues alone.
        Value q = model.query_on_tape(tape, m_inp, spec, pair.input_view.cam_pose, corr.points,
                                      Head::Feature);
        Value k = model.query_on_tape(tape, m_tgt, spec, tgt_pose, corr.points, Head::Feature);
        Tensor negatives = queue.size() > 0 ? queue.negatives(cfg.negatives_per_anchor) : tape.val(k);
        Value l_nce = tape.info_nce(q, k, std::move(negatives), cfg.tau);

        const double voxel = spec.voxel_size().maxCoeff();
        OccupancyLabels occ =
            sample_occupancy_labels(pair.target_view, cfg.n_occ, Rng::derive(cfg.seed, sub + 4).next_u64(),
                                    voxel);
        std::vector<Vec3> occ_pts = occ.positives;
        occ_pts.insert(occ_pts.end(), occ.negatives.begin(), occ.negatives.end());
        Tensor occ_labels({static_cast<int64_t>(occ_pts.size()), 1});
        for (size_t i = 0; i < occ.positives.size(); ++i) occ_labels[static_cast<int64_t>(i)] = 1.0;
        Value occ_logits = model.query_on_tape(tape, m_warp, spec, tgt_pose, occ_pts, Head::Occupancy, true);
        Value l_occ_warp = tape.bce_with_logits(occ_logits, std::move(occ_labels));

        // Self-map occupancy: at evaluation time occupancy is read from a
        // single view's own map, whose occlusion shadow the view-prediction
        // term never touches. Supervise the input view's self map with its
        // own single-view labels plus everything the pair certifies beyond
        // them: deep free space along no-hit rays, tight free space just in
        // front of surfaces, a thin occupied shell just behind smooth
        // surfaces, free points inside the input's shadow certified by the
        // target rays, and the target's surface points occluded from the
        // input (amodal back surfaces).
        std::vector<Vec3> self_pts;
        std::vector<double> self_lab;
        auto add = [&](const Vec3& p, double l) {
            self_pts.push_back(p);
            self_lab.push_back(l);
        };
        {
            OccupancyLabels own = sample_occupancy_labels(
                pair.input_view, cfg.n_occ, Rng::derive(cfg.seed, sub + 5).next_u64(), voxel);
            for (const Vec3& p : own.positives) add(p, 1.0);
            for (const Vec3& p : own.negatives) add(p, 0.0);
        }
        const CameraIntrinsics& ki = pair.input_view.intrinsics;
        auto depth_at = [&](const ViewRecord& vw, int64_t u, int64_t v) {
            return vw.depth.at2(v, u);
        };
        // No-hit rays are free across the grid's whole depth extent, not
        // just the observed band; bias half the draws towards rim pixels
        // (sky next to a silhouette), where smeared surface evidence
        // otherwise leaves a confident occupied halo.
        {
            std::vector<std::pair<int64_t, int64_t>> sky, rim;
            for (int64_t v = 0; v < ki.height; ++v)
                for (int64_t u = 0; u < ki.width; ++u) {
                    if (depth_at(pair.input_view, u, v) > 0) continue;
                    sky.push_back({u, v});
                    bool near_hit = false;
                    for (int64_t dv = -2; dv <= 2 && !near_hit; ++dv)
                        for (int64_t du = -2; du <= 2 && !near_hit; ++du) {
                            const int64_t uu = u + du, vv = v + dv;
                            if (uu >= 0 && vv >= 0 && uu < ki.width && vv < ki.height &&
                                depth_at(pair.input_view, uu, vv) > 0)
                                near_hit = true;
                        }
                    if (near_hit) rim.push_back({u, v});
                }
            if (!sky.empty()) {
                Rng r(Rng::derive(cfg.seed, sub + 7).next_u64());
                for (int64_t i = 0; i < cfg.n_occ; ++i) {
                    const auto& src = (!rim.empty() && i % 2 == 1) ? rim : sky;
                    const auto [u, v] = src[r.uniform_index(src.size())];
                    const double t = r.uniform(spec.grid_min.z(), spec.grid_max.z());
                    add(pair.input_view.cam_pose(Vec3((static_cast<double>(u) - ki.cx) / ki.fx * t,
                                                      (static_cast<double>(v) - ki.cy) / ki.fy * t, t)),
                        0.0);
                }
            }
        }
        // Depth is exact, so any ray point strictly in front of its surface
        // is free; sample the last voxel before the hit, which the generic
        // sampler's safety margin skips. Just behind a locally smooth
        // surface patch the solid continues for at least a thin shell, so
        // label that band occupied (skip silhouette-grazing pixels, where
        // the shell claim fails).
        {
            std::vector<std::pair<int64_t, int64_t>> hit;
            for (int64_t v = 1; v + 1 < ki.height; ++v)
                for (int64_t u = 1; u + 1 < ki.width; ++u)
                    if (depth_at(pair.input_view, u, v) > 0) hit.push_back({u, v});
            if (!hit.empty()) {
                Rng r(Rng::derive(cfg.seed, sub + 8).next_u64());
                auto ray_point = [&](int64_t u, int64_t v, double t) {
                    return pair.input_view.cam_pose(Vec3((static_cast<double>(u) - ki.cx) / ki.fx * t,
                                                         (static_cast<double>(v) - ki.cy) / ki.fy * t, t));
                };
                for (int64_t i = 0; i < cfg.n_occ / 2; ++i) {
                    const auto [u, v] = hit[r.uniform_index(hit.size())];
                    const double d = depth_at(pair.input_view, u, v);
                    add(ray_point(u, v, d - r.uniform(0.25, 1.0) * voxel), 0.0);
                }
                for (int64_t i = 0; i < cfg.n_occ / 2; ++i) {
                    const auto [u, v] = hit[r.uniform_index(hit.size())];
                    const double d = depth_at(pair.input_view, u, v);
                    bool smooth = true;
                    for (int64_t dv = -1; dv <= 1 && smooth; ++dv)
                        for (int64_t du = -1; du <= 1 && smooth; ++du) {
                            const double dn = depth_at(pair.input_view, u + du, v + dv);
                            if (dn <= 0 || std::abs(dn - d) > voxel) smooth = false;
                        }
                    if (!smooth) continue;
                    add(ray_point(u, v, d + r.uniform(0.25, 1.0) * voxel), 1.0);
                }
            }
        }
        {
            OccupancyLabels pool = sample_occupancy_labels(
                pair.target_view, 4 * cfg.n_occ, Rng::derive(cfg.seed, sub + 6).next_u64(), voxel);
            // Extend the pool with deep samples along the target's no-hit
            // rays: the far corner of the input's shadow usually lies beyond
            // the target's observed depth band and only these rays reach it.
            {
                const CameraIntrinsics& kt = pair.target_view.intrinsics;
                std::vector<std::pair<int64_t, int64_t>> tsky;
                for (int64_t v = 0; v < kt.height; ++v)
                    for (int64_t u = 0; u < kt.width; ++u)
                        if (depth_at(pair.target_view, u, v) <= 0) tsky.push_back({u, v});
                if (!tsky.empty()) {
                    Rng r(Rng::derive(cfg.seed, sub + 9).next_u64());
                    for (int64_t i = 0; i < 2 * cfg.n_occ; ++i) {
                        const auto [u, v] = tsky[r.uniform_index(tsky.size())];
                        const double t = r.uniform(spec.grid_min.z(), spec.grid_max.z());
                        pool.negatives.push_back(
                            pair.target_view.cam_pose(Vec3((static_cast<double>(u) - kt.cx) / kt.fx * t,
                                                           (static_cast<double>(v) - kt.cy) / kt.fy * t, t)));
                    }
                }
            }
            int64_t taken = 0;
            for (const Vec3& p : pool.negatives) {
                if (taken >= cfg.n_occ) break;
                const Vec3 pc = pair.input_view.cam_pose.inverse()(p);
                if (pc.z() <= kDepthEps) continue;
                const Vec2 px = project(pc, ki);
                const auto u = static_cast<int64_t>(std::lround(px.x()));
                const auto v = static_cast<int64_t>(std::lround(px.y()));
                if (u < 0 || v < 0 || u >= ki.width || v >= ki.height) continue;
                const double d = depth_at(pair.input_view, u, v);
                if (d <= 0 || pc.z() <= d + voxel) continue;  // not in the input shadow
                add(p, 0.0);
                ++taken;
            }
            int64_t amodal = 0;
            for (const Vec3& p : pool.positives) {
                if (amodal >= cfg.n_occ / 2) break;
                if (point_visible(pair.input_view, p)) continue;  // covered by own labels
                add(p, 1.0);
                ++amodal;
            }
        }
        Tensor self_labels({static_cast<int64_t>(self_pts.size()), 1});
        for (size_t i = 0; i < self_lab.size(); ++i) self_labels[static_cast<int64_t>(i)] = self_lab[i];
        Value self_logits = model.query_on_tape(tape, m_inp, spec, pair.input_view.cam_pose, self_pts,
                                                Head::Occupancy, true);
        Value l_occ = tape.scale(
            tape.add(l_occ_warp, tape.bce_with_logits(self_logits, std::move(self_labels))), 0.5);

        Tensor colors({static_cast<int64_t>(corr.colors.size()), 3});
        for (size_t i = 0; i < corr.colors.size(); ++i)
            for (int64_t ch = 0; ch < 3; ++ch) colors.at2(static_cast<int64_t>(i), ch) = corr.colors[i][ch];
        Value rgb_pred = model.query_on_tape(tape, m_warp, spec, tgt_pose, corr.points, Head::Rgb);
        Value l_rgb = tape.mse_to(rgb_pred, std::move(colors));

        stats.l_nce += tape.val(l_nce)[0] * inv_b;
        stats.l_occ += tape.val(l_occ)[0] * inv_b;
        stats.l_rgb += tape.val(l_rgb)[0] * inv_b;
        Value contrib = tape.add(tape.add(tape.scale(l_nce, cfg.lambda_nce * inv_b),
                                          tape.scale(l_occ, cfg.lambda_occ * inv_b)),
                                 tape.scale(l_rgb, cfg.lambda_rgb * inv_b));
        total = total.valid() ? tape.add(total, contrib) : contrib;
        new_keys.push_back(tape.val(k));
    }
    stats.total = tape.val(total)[0];
    model.store.zero_grad();
    tape.backward(total);
    model.store.adam_step(cfg.adam);
    for (const Tensor& k : new_keys) queue.push(k);
    return stats;
}

// Deterministic pair selection, CSV logging (step, L_nce, L_occ, L_rgb,
// wall_ms) and periodic checkpoints. Resumes from store.step_count.
inline void train_loop(CoCoNet& model, const std::vector<ViewPair>& pairs, NegativeQueue& queue,
                       const TrainConfig& cfg, const std::string& log_path,
                       const std::string& checkpoint_path) {
    cfg.validate();
    if (pairs.empty()) throw Error("train_loop: no training pairs");
    // Warm the queue with keys from the untrained encoder so every step,
    // including step 0, faces the full complement of K negatives.
    for (uint64_t w = 0; queue.size() < cfg.negatives_per_anchor; ++w) {
        Rng pick = Rng::derive(cfg.seed ^ 0x9a3f17ULL, w);
        const ViewPair& pair = pairs[pick.uniform_index(pairs.size())];
        CorrespondenceSample corr = sample_target_surface(pair.target_view, cfg.n_pos, pick.next_u64());
        VoxelFeatureGrid m = model.encode_scene(pair.target_view, pair.target_view.cam_pose);
        queue.push(model.query_batch(m, corr.points, Head::Feature));
    }
    std::ofstream log;
    if (!log_path.empty()) {
        const bool fresh = model.store.step_count == 0;
        log.open(log_path, fresh ? std::ios::trunc : std::ios::app);
        if (fresh) log << "step,l_nce,l_occ,l_rgb,wall_ms\n";
    }
    auto save = [&] {
        if (checkpoint_path.empty()) return;
        queue.save_to(model.store);
        model.store.save(checkpoint_path);
    };
    for (int64_t step = model.store.step_count; step < cfg.steps; ++step) {
        Rng pick = Rng::derive(cfg.seed ^ 0x70a1c5ULL, static_cast<uint64_t>(step));
        std::vector<ViewPair> batch;
        for (int64_t b = 0; b < cfg.batch_size; ++b)
            batch.push_back(pairs[pick.uniform_index(pairs.size())]);
        const auto t0 = std::chrono::steady_clock::now();
        TrainStats stats = train_step(model, batch, queue, cfg, step);
        const double ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        if (log.is_open()) {
            log.precision(12);
            log << step << "," << stats.l_nce << "," << stats.l_occ << "," << stats.l_rgb << "," << ms
                << "\n";
            log.flush();
        }
        if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) save();
    }
    save();
}

// Convenience evaluation wrappers over the heads.
inline double occupancy_bce_loss(CoCoNet& model, const VoxelFeatureGrid& m,
                                 const std::vector<Vec3>& positives, const std::vector<Vec3>& negatives) {
    Tape tape;
    Value g = tape.input(m.values, false);
    std::vector<Vec3> pts = positives;
    pts.insert(pts.end(), negatives.begin(), negatives.end());
    Tensor labels({static_cast<int64_t>(pts.size()), 1});
    for (size_t i = 0; i < positives.size(); ++i) labels[static_cast<int64_t>(i)] = 1.0;
    Value logits = model.query_on_tape(tape, g, m.spec, m.grid_to_world, pts, Head::Occupancy, true);
    return tape.val(tape.bce_with_logits(logits, std::move(labels)))[0];
}

inline double rgb_regression_loss(CoCoNet& model, const VoxelFeatureGrid& m, const std::vector<Vec3>& pts,
                                  const std::vector<Vec3>& colors) {
    Tape tape;
    Value g = tape.input(m.values, false);
    Tensor target({static_cast<int64_t>(colors.size()), 3});
    for (size_t i = 0; i < colors.size(); ++i)
        for (int64_t ch = 0; ch < 3; ++ch) target.at2(static_cast<int64_t>(i), ch) = colors[i][ch];
    Value pred = model.query_on_tape(tape, g, m.spec, m.grid_to_world, pts, Head::Rgb);
    return tape.val(tape.mse_to(pred, std::move(target)))[0];
}

}  // namespace ccn
