#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "ccn/errors.hpp"
#include "ccn/featuregrid.hpp"
#include "ccn/geometry.hpp"
#include "ccn/optim.hpp"
#include "ccn/rng.hpp"
#include "ccn/synthscene.hpp"
#include "ccn/tape.hpp"
#include "ccn/tensor.hpp"

namespace ccn {

struct ConvLayerSpec {
    int kernel = 4;
    int stride = 2;
    bool transposed = false;
    int channels = 16;
};

// Desk-scale default: symmetric down/up so the latent map keeps the grid's
// spatial resolution, which the skip connections and query heads rely on.
inline std::vector<ConvLayerSpec> desk_encoder_plan(int feature_dim) {
    return {{4, 2, false, 16}, {4, 2, false, 32}, {4, 2, true, 16}, {4, 2, true, 16},
            {1, 1, false, feature_dim}};
}

// 4-2-64, 4-2-128, 4-2-256, 4-0.5-128, 4-0.5-64, 1-1-F. Note the extra
// 4-0.5 stage needed to return to full resolution.
inline std::vector<ConvLayerSpec> full_encoder_plan(int feature_dim) {
    return {{4, 2, false, 64},  {4, 2, false, 128}, {4, 2, false, 256}, {4, 2, true, 128},
            {4, 2, true, 64},   {4, 2, true, 64},   {1, 1, false, feature_dim}};
}

inline std::vector<ConvLayerSpec> tiny_encoder_plan(int feature_dim) {
    return {{3, 2, false, 6}, {3, 2, true, 6}, {1, 1, false, feature_dim}};
}

struct ModelConfig {
    GridSpec grid;                       // cuboid in the grid (anchor) frame
    std::vector<ConvLayerSpec> encoder = desk_encoder_plan(32);
    int feature_dim = 32;                // channels of the latent map M
    int head_width = 32;                 // FC/RN width
    int residual_blocks = 5;
    int head_out_feature = 32;
    double leaky_slope = 0.1;
    uint64_t init_seed = 1;
};

inline ModelConfig tiny_model_config() {
    ModelConfig cfg;
    cfg.grid.res_x = cfg.grid.res_y = cfg.grid.res_z = 8;
    cfg.feature_dim = 8;
    cfg.encoder = tiny_encoder_plan(8);
    cfg.residual_blocks = 2;
    cfg.head_width = 8;
    cfg.head_out_feature = 8;
    return cfg;
}

struct FeatureCloud {
    enum class Source { TopDown, BottomUp };
    std::vector<Vec3> points;  // world coordinates
    Tensor features;           // [n, c]
    Source source = Source::BottomUp;

    int64_t size() const { return static_cast<int64_t>(points.size()); }
};

enum class Head { Feature, Occupancy, Rgb };

inline const char* head_tag(Head h) {
    switch (h) {
        case Head::Feature: return "feat";
        case Head::Occupancy: return "occ";
        default: return "rgb";
    }
}

// Projection of a feature cloud into an image plane with z-buffering.
struct SparseFeatureImage {
    Tensor features;  // [h,w,c]
    Tensor depth;     // [h,w], 0 where empty
};

// The model: a 3D convolutional encoder-decoder with skip connections over
// the unprojected RGB + occupancy + observed-free tensor, and three
// independent implicit heads (feature / occupancy / color) over trilinearly
// interpolated codes.
class CoCoNet {
  public:
    ModelConfig cfg;
    ParameterStore store;

    explicit CoCoNet(ModelConfig c) : cfg(std::move(c)) { init_params(); }

    // Loading replaces every parameter; shapes are rebuilt from the file.
    void load(const std::string& path) { store.load(path); }
    void save(const std::string& path) const { store.save(path); }

    // ---- encoder ---------------------------------------------------------
    // Lift one registered RGB-D view into the latent map. grid_to_world
    // anchors the grid cuboid (camera pose for camera-anchored maps,
    // identity for world-anchored ones). Output value: [w,h,d,F], every
    // cell L2-normalized.
    Value encode_on_tape(Tape& tape, const ViewRecord& view, const RigidTransform& grid_to_world) {
        Tensor u = unproject_rgb(view.rgb, view.depth, view.intrinsics, view.cam_pose, cfg.grid,
                                 grid_to_world);
        const RigidTransform world_to_grid = grid_to_world.inverse();
        std::vector<Vec3> pts = surface_points(view);
        for (Vec3& p : pts) p = world_to_grid(p);
        Tensor o = voxelize_occupancy(pts, cfg.grid).values;
        Tensor f = voxelize_free_space(view.depth, view.intrinsics, view.cam_pose, cfg.grid, grid_to_world);
        Value x = tape.concat_last(tape.concat_last(tape.constant(std::move(u)), tape.constant(std::move(o))),
                                   tape.constant(std::move(f)));
        return run_encoder(tape, x);
    }

    // Encoder stack over an already-lifted [w,h,d,5] input.
    Value run_encoder(Tape& tape, Value x) {
        // Skip features per spatial resolution; full resolution starts as
        // the raw lifted input.
        std::vector<std::pair<int64_t, Value>> skips{{tape.val(x).shape[0], x}};
        for (size_t li = 0; li < cfg.encoder.size(); ++li) {
            const ConvLayerSpec& layer = cfg.encoder[li];
            const std::string base = "enc/" + std::to_string(li);
            x = tape.conv3d(x, tape.param(store.at(base + "/k")), layer.stride, layer.transposed);
            x = tape.add_bias_rows(x, tape.param(store.at(base + "/b")));
            const int64_t res = tape.val(x).shape[0];
            if (layer.transposed) {
                // Concatenate the same-resolution encoder feature and restore
                // the stated channel count with a 1x1x1 convolution.
                Value skip{};
                for (auto& [r, v] : skips)
                    if (r == res) skip = v;
                if (skip.valid()) {
                    x = tape.concat_last(x, skip);
                    x = tape.conv3d(x, tape.param(store.at(base + "/skip_k")), 1, false);
                    x = tape.add_bias_rows(x, tape.param(store.at(base + "/skip_b")));
                }
            }
            const bool last = li + 1 == cfg.encoder.size();
            if (!last) x = tape.leaky_relu(x, cfg.leaky_slope);
            if (!layer.transposed && !last) skips.push_back({res, x});
        }
        return tape.l2_normalize(x);
    }

    VoxelFeatureGrid encode_scene(const ViewRecord& view,
                                  const RigidTransform& grid_to_world = RigidTransform::identity()) {
        Tape tape;
        Value m = encode_on_tape(tape, view, grid_to_world);
        VoxelFeatureGrid g;
        g.spec = cfg.grid;
        g.grid_to_world = grid_to_world;
        g.values = tape.val(m);
        return g;
    }

    // ---- implicit heads --------------------------------------------------
    // Query a head at world points. The interpolated code c and the point's
    // local offset within its interpolation cell feed the residual stack
    //   out = RN_i(RN_{i-1}(... RN_1(p + FC_1(c)) ...) + FC_i(c)),
    // followed by ReLU and a final linear layer. raw_logits skips the output
    // nonlinearity (used by the BCE loss).
    Value query_on_tape(Tape& tape, Value grid_values, const GridSpec& spec,
                        const RigidTransform& grid_to_world, const std::vector<Vec3>& world_points,
                        Head head, bool raw_logits = false) {
        const int64_t n = static_cast<int64_t>(world_points.size());
        const RigidTransform world_to_grid = grid_to_world.inverse();
        std::vector<std::array<double, 3>> mem(world_points.size());
        Tensor pnorm({n, 3});
        // The positional input is the sub-voxel offset inside the
        // interpolation cell, mapped to [-1, 1]. A global coordinate here
        // would hand the heads a where-in-the-grid shortcut (e.g. "the
        // middle of the volume is usually occupied") that dodges the
        // feature code entirely.
        for (int64_t i = 0; i < n; ++i) {
            const Vec3 m = world_to_memory(world_to_grid(world_points[static_cast<size_t>(i)]), spec);
            mem[static_cast<size_t>(i)] = {m.x(), m.y(), m.z()};
            pnorm.at2(i, 0) = 2.0 * (m.x() - std::floor(m.x())) - 1.0;
            pnorm.at2(i, 1) = 2.0 * (m.y() - std::floor(m.y())) - 1.0;
            pnorm.at2(i, 2) = 2.0 * (m.z() - std::floor(m.z())) - 1.0;
        }
        Value code = tape.trilinear_gather(grid_values, mem);
        const std::string base = std::string("head/") + head_tag(head);
        auto lin = [&](Value in, const std::string& nm) {
            return tape.linear(in, tape.param(store.at(base + nm + "_w")),
                               tape.param(store.at(base + nm + "_b")));
        };
        Value h = lin(tape.constant(std::move(pnorm)), "/pos");
        for (int i = 1; i <= cfg.residual_blocks; ++i) {
            const std::string fi = "/fc" + std::to_string(i);
            h = tape.add(h, lin(code, fi));
            const std::string ri = "/rn" + std::to_string(i);
            Value t = lin(tape.relu(h), ri + "_1");
            t = lin(tape.relu(t), ri + "_2");
            h = tape.add(h, t);
        }
        Value out = lin(tape.relu(h), "/out");
        if (raw_logits) return out;
        switch (head) {
            case Head::Feature: return tape.l2_normalize(out);
            case Head::Occupancy: return tape.sigmoid(out);
            default: return tape.sigmoid(out);
        }
    }

    Tensor query_batch(const VoxelFeatureGrid& m, const std::vector<Vec3>& pts, Head head) {
        Tape tape;
        Value g = tape.input(m.values, false);
        return tape.val(query_on_tape(tape, g, m.spec, m.grid_to_world, pts, head));
    }

    std::vector<double> query_feature(const VoxelFeatureGrid& m, const Vec3& p) {
        Tensor t = query_batch(m, {p}, Head::Feature);
        return t.data;
    }

    double query_occupancy(const VoxelFeatureGrid& m, const Vec3& p) {
        return query_batch(m, {p}, Head::Occupancy)[0];
    }

    Vec3 query_rgb(const VoxelFeatureGrid& m, const Vec3& p) {
        Tensor t = query_batch(m, {p}, Head::Rgb);
        return {t[0], t[1], t[2]};
    }

    FeatureCloud amodal_feature_cloud(const VoxelFeatureGrid& m, const std::vector<Vec3>& pts) {
        FeatureCloud cloud;
        cloud.points = pts;
        cloud.source = FeatureCloud::Source::TopDown;
        cloud.features = pts.empty() ? Tensor({0, static_cast<int64_t>(cfg.head_out_feature)})
                                     : query_batch(m, pts, Head::Feature);
        return cloud;
    }

  private:
    void init_params() {
        uint64_t stream = 0;
        auto xavier = [&](std::vector<int64_t> shape, int64_t fan_in, int64_t fan_out) {
            Rng rng = Rng::derive(cfg.init_seed, stream++);
            Tensor t(shape);
            const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
            for (double& v : t.data) v = rng.uniform(-bound, bound);
            return t;
        };
        int64_t ch = 5;  // unprojected RGB + occupancy + observed-free
        int depth = 0;
        std::vector<int64_t> down_channels{ch};
        for (size_t li = 0; li < cfg.encoder.size(); ++li) {
            const ConvLayerSpec& l = cfg.encoder[li];
            const std::string base = "enc/" + std::to_string(li);
            const int64_t k3 = static_cast<int64_t>(l.kernel) * l.kernel * l.kernel;
            store.add(base + "/k", xavier({l.kernel, l.kernel, l.kernel,
                                           l.transposed ? l.channels : ch,
                                           l.transposed ? ch : l.channels},
                                          k3 * ch, k3 * l.channels));
            store.add(base + "/b", Tensor({l.channels}));
            if (l.transposed) {
                --depth;
                if (depth >= 0 && depth < static_cast<int>(down_channels.size())) {
                    const int64_t sc = down_channels[static_cast<size_t>(depth)];
                    store.add(base + "/skip_k",
                              xavier({1, 1, 1, l.channels + sc, l.channels}, l.channels + sc, l.channels));
                    store.add(base + "/skip_b", Tensor({l.channels}));
                }
            } else if (l.stride > 1) {
                ++depth;
                if (static_cast<int>(down_channels.size()) <= depth) down_channels.resize(depth + 1);
                down_channels[static_cast<size_t>(depth)] = l.channels;
            }
            ch = l.channels;
        }
        // The three heads share no parameters.
        for (Head head : {Head::Feature, Head::Occupancy, Head::Rgb}) {
            const std::string base = std::string("head/") + head_tag(head);
            const int64_t w = cfg.head_width;
            const int64_t c = cfg.feature_dim;
            const int64_t out =
                head == Head::Feature ? cfg.head_out_feature : (head == Head::Occupancy ? 1 : 3);
            store.add(base + "/pos_w", xavier({3, w}, 3, w));
            store.add(base + "/pos_b", Tensor({w}));
            for (int i = 1; i <= cfg.residual_blocks; ++i) {
                store.add(base + "/fc" + std::to_string(i) + "_w", xavier({c, w}, c, w));
                store.add(base + "/fc" + std::to_string(i) + "_b", Tensor({w}));
                for (int j = 1; j <= 2; ++j) {
                    store.add(base + "/rn" + std::to_string(i) + "_" + std::to_string(j) + "_w",
                              xavier({w, w}, w, w));
                    store.add(base + "/rn" + std::to_string(i) + "_" + std::to_string(j) + "_b",
                              Tensor({w}));
                }
            }
            store.add(base + "/out_w", xavier({w, out}, w, out));
            store.add(base + "/out_b", Tensor({out}));
        }
    }
};

// Uniform or surface-biased query point sampling, in world coordinates.
enum class QuerySampleMode { Uniform, SurfaceBiased };

inline std::vector<Vec3> sample_query_points(const GridSpec& spec, int64_t n, uint64_t seed,
                                             QuerySampleMode mode = QuerySampleMode::Uniform,
                                             const RigidTransform& grid_to_world = RigidTransform::identity(),
                                             const std::vector<Vec3>* surface = nullptr) {
    Rng rng(seed);
    std::vector<Vec3> pts;
    pts.reserve(static_cast<size_t>(n));
    const Vec3 vs = spec.voxel_size();
    for (int64_t i = 0; i < n; ++i) {
        Vec3 p;
        if (mode == QuerySampleMode::SurfaceBiased && surface && !surface->empty() && rng.uniform() < 0.5) {
            // Gaussian jitter (sigma = 1 voxel) around a visible surface point.
            const Vec3 s = (*surface)[rng.uniform_index(surface->size())];
            const Vec3 local = grid_to_world.inverse()(s);
            Vec3 j(local.x() + vs.x() * rng.normal(), local.y() + vs.y() * rng.normal(),
                   local.z() + vs.z() * rng.normal());
            j = j.cwiseMax(spec.grid_min).cwiseMin(spec.grid_max);
            p = j;
        } else {
            p = Vec3(rng.uniform(spec.grid_min.x(), spec.grid_max.x()),
                     rng.uniform(spec.grid_min.y(), spec.grid_max.y()),
                     rng.uniform(spec.grid_min.z(), spec.grid_max.z()));
        }
        pts.push_back(grid_to_world(p));
    }
    return pts;
}

// Perspective-project each cloud point independently; the nearest point per
// pixel wins (z-buffer). Points behind the camera or out of frame are
// dropped.
inline SparseFeatureImage project_feature_cloud(const FeatureCloud& cloud, const RigidTransform& cam_pose,
                                                const CameraIntrinsics& k) {
    SparseFeatureImage img;
    const int64_t c = cloud.features.shape.size() == 2 ? cloud.features.shape[1] : 0;
    img.features = Tensor({k.height, k.width, c});
    img.depth = Tensor({k.height, k.width});
    const RigidTransform world_to_cam = cam_pose.inverse();
    for (int64_t i = 0; i < cloud.size(); ++i) {
        const Vec3 pc = world_to_cam(cloud.points[static_cast<size_t>(i)]);
        if (pc.z() <= kDepthEps) continue;
        const int64_t u = static_cast<int64_t>(std::lround(k.fx * pc.x() / pc.z() + k.cx));
        const int64_t v = static_cast<int64_t>(std::lround(k.fy * pc.y() / pc.z() + k.cy));
        if (u < 0 || u >= k.width || v < 0 || v >= k.height) continue;
        double& zbuf = img.depth.data[static_cast<size_t>(v * k.width + u)];
        if (zbuf > 0 && zbuf <= pc.z()) continue;
        zbuf = pc.z();
        for (int64_t j = 0; j < c; ++j)
            img.features.data[static_cast<size_t>((v * k.width + u) * c + j)] = cloud.features.at2(i, j);
    }
    return img;
}

}  // namespace ccn
