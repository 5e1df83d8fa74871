#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <vector>

#include "ccn/errors.hpp"
#include "ccn/geometry.hpp"
#include "ccn/tensor.hpp"

namespace ccn {

// Axis-aligned cuboid of grid-frame space divided into voxels. Voxel (i,j,k)
// center sits at grid_min + (i+0.5, j+0.5, k+0.5) * voxel_size, i.e. memory
// coordinate (i,j,k) exactly.
struct GridSpec {
    Vec3 grid_min = Vec3(-4, -4, -4);
    Vec3 grid_max = Vec3(4, 4, 4);
    int64_t res_x = 16, res_y = 16, res_z = 16;

    Vec3 voxel_size() const {
        return {(grid_max.x() - grid_min.x()) / static_cast<double>(res_x),
                (grid_max.y() - grid_min.y()) / static_cast<double>(res_y),
                (grid_max.z() - grid_min.z()) / static_cast<double>(res_z)};
    }

    bool valid() const {
        return (grid_max - grid_min).minCoeff() > 0 && res_x >= 2 && res_y >= 2 && res_z >= 2;
    }

    Vec3 center() const { return 0.5 * (grid_min + grid_max); }
};

// Continuous memory coordinate; in_bounds means all of [0, res-1] per axis
// (the region where trilinear interpolation has full corner support).
inline Vec3 world_to_memory(const Vec3& p, const GridSpec& spec, bool* in_bounds = nullptr) {
    const Vec3 vs = spec.voxel_size();
    Vec3 m((p.x() - spec.grid_min.x()) / vs.x() - 0.5, (p.y() - spec.grid_min.y()) / vs.y() - 0.5,
           (p.z() - spec.grid_min.z()) / vs.z() - 0.5);
    if (in_bounds) {
        *in_bounds = m.x() >= 0 && m.x() <= static_cast<double>(spec.res_x - 1) && m.y() >= 0 &&
                     m.y() <= static_cast<double>(spec.res_y - 1) && m.z() >= 0 &&
                     m.z() <= static_cast<double>(spec.res_z - 1);
    }
    return m;
}

inline Vec3 memory_to_world(const Vec3& m, const GridSpec& spec) {
    const Vec3 vs = spec.voxel_size();
    return {spec.grid_min.x() + (m.x() + 0.5) * vs.x(), spec.grid_min.y() + (m.y() + 0.5) * vs.y(),
            spec.grid_min.z() + (m.z() + 0.5) * vs.z()};
}

// Latent map: [res_x, res_y, res_z, c] features in the grid frame;
// grid_to_world locates that frame (identity for world-anchored grids,
// camera pose for camera-anchored ones).
struct VoxelFeatureGrid {
    GridSpec spec;
    RigidTransform grid_to_world;
    Tensor values;

    int64_t channels() const { return values.shape.empty() ? 0 : values.shape[3]; }
};

struct OccupancyGrid {
    GridSpec spec;
    Tensor values;  // [x,y,z,1], binary
};

// Standard 8-corner trilinear interpolation at a continuous memory
// coordinate. Out-of-range corners contribute zero; a fully out-of-bounds
// query returns the zero vector and clears *in_bounds.
inline std::vector<double> trilinear_sample(const Tensor& grid, const Vec3& m, bool* in_bounds = nullptr) {
    const int64_t w = grid.shape[0], h = grid.shape[1], d = grid.shape[2], c = grid.shape[3];
    std::vector<double> out(static_cast<size_t>(c), 0.0);
    const double mx = m.x(), my = m.y(), mz = m.z();
    if (in_bounds)
        *in_bounds = mx >= 0 && mx <= static_cast<double>(w - 1) && my >= 0 &&
                     my <= static_cast<double>(h - 1) && mz >= 0 && mz <= static_cast<double>(d - 1);
    const int64_t x0 = static_cast<int64_t>(std::floor(mx));
    const int64_t y0 = static_cast<int64_t>(std::floor(my));
    const int64_t z0 = static_cast<int64_t>(std::floor(mz));
    const double fx = mx - static_cast<double>(x0), fy = my - static_cast<double>(y0),
                 fz = mz - static_cast<double>(z0);
    for (int dx = 0; dx < 2; ++dx)
        for (int dy = 0; dy < 2; ++dy)
            for (int dz = 0; dz < 2; ++dz) {
                const double wgt = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) * (dz ? fz : 1 - fz);
                if (wgt == 0.0) continue;
                const int64_t ix = x0 + dx, iy = y0 + dy, iz = z0 + dz;
                if (ix < 0 || ix >= w || iy < 0 || iy >= h || iz < 0 || iz >= d) continue;
                const double* gp = &grid.data[static_cast<size_t>(((ix * h + iy) * d + iz) * c)];
                for (int64_t j = 0; j < c; ++j) out[static_cast<size_t>(j)] += wgt * gp[j];
            }
    return out;
}

inline std::vector<double> trilinear_sample(const VoxelFeatureGrid& g, const Vec3& m,
                                            bool* in_bounds = nullptr) {
    return trilinear_sample(g.values, m, in_bounds);
}

// Fill a [res_x,res_y,res_z,3] tensor with the bilinearly interpolated RGB of
// each voxel center's projection into the image. cam_pose is camera->world;
// voxel centers are taken in the grid frame located by grid_to_world.
// Voxels behind the camera or projecting outside the image stay zero.
inline Tensor unproject_rgb(const Tensor& image, const Tensor& depth_map, const CameraIntrinsics& k,
                            const RigidTransform& cam_pose, const GridSpec& spec,
                            const RigidTransform& grid_to_world = RigidTransform::identity()) {
    require_shape(image, {k.height, k.width, 3}, "unproject_rgb: image");
    require_shape(depth_map, {k.height, k.width}, "unproject_rgb: depth");
    const RigidTransform grid_to_cam = compose(cam_pose.inverse(), grid_to_world);
    Tensor out({spec.res_x, spec.res_y, spec.res_z, 3});
    for (int64_t i = 0; i < spec.res_x; ++i)
        for (int64_t j = 0; j < spec.res_y; ++j)
            for (int64_t l = 0; l < spec.res_z; ++l) {
                const Vec3 pc = grid_to_cam(memory_to_world(Vec3(double(i), double(j), double(l)), spec));
                if (pc.z() <= kDepthEps) continue;
                const double u = k.fx * pc.x() / pc.z() + k.cx;
                const double v = k.fy * pc.y() / pc.z() + k.cy;
                if (u < 0 || u > k.width - 1 || v < 0 || v > k.height - 1) continue;
                const int64_t u0 = std::min(static_cast<int64_t>(std::floor(u)), int64_t(k.width) - 2 >= 0
                                                                                     ? int64_t(k.width) - 2
                                                                                     : 0);
                const int64_t v0 = std::min(static_cast<int64_t>(std::floor(v)), int64_t(k.height) - 2 >= 0
                                                                                     ? int64_t(k.height) - 2
                                                                                     : 0);
                const double fu = u - static_cast<double>(u0), fv = v - static_cast<double>(v0);
                for (int64_t ch = 0; ch < 3; ++ch) {
                    const double c00 = image.data[static_cast<size_t>((v0 * k.width + u0) * 3 + ch)];
                    const double c01 = image.data[static_cast<size_t>((v0 * k.width + u0 + 1) * 3 + ch)];
                    const double c10 = image.data[static_cast<size_t>(((v0 + 1) * k.width + u0) * 3 + ch)];
                    const double c11 = image.data[static_cast<size_t>(((v0 + 1) * k.width + u0 + 1) * 3 + ch)];
                    out.at4(i, j, l, ch) =
                        (1 - fv) * ((1 - fu) * c00 + fu * c01) + fv * ((1 - fu) * c10 + fu * c11);
                }
            }
    return out;
}

// Binary occupancy: voxel = 1 iff at least one point (grid frame) lands in
// its cuboid. Points outside the grid bounds are counted and ignored.
inline OccupancyGrid voxelize_occupancy(const std::vector<Vec3>& points, const GridSpec& spec,
                                        int64_t* out_of_bounds_count = nullptr) {
    OccupancyGrid og;
    og.spec = spec;
    og.values = Tensor({spec.res_x, spec.res_y, spec.res_z, 1});
    const Vec3 vs = spec.voxel_size();
    int64_t dropped = 0;
    for (const Vec3& p : points) {
        const int64_t i = static_cast<int64_t>(std::floor((p.x() - spec.grid_min.x()) / vs.x()));
        const int64_t j = static_cast<int64_t>(std::floor((p.y() - spec.grid_min.y()) / vs.y()));
        const int64_t l = static_cast<int64_t>(std::floor((p.z() - spec.grid_min.z()) / vs.z()));
        if (i < 0 || i >= spec.res_x || j < 0 || j >= spec.res_y || l < 0 || l >= spec.res_z) {
            ++dropped;
            continue;
        }
        og.values.at4(i, j, l, 0) = 1.0;
    }
    if (out_of_bounds_count) *out_of_bounds_count = dropped;
    return og;
}

// Observed free space: voxel = 1 iff its center projects into the image and
// the depth map certifies it empty — it lies strictly in front of the
// observed surface along its pixel ray, or the ray hit nothing at all.
// Occluded or out-of-frustum voxels stay 0 (unknown, not free).
inline Tensor voxelize_free_space(const Tensor& depth_map, const CameraIntrinsics& k,
                                  const RigidTransform& cam_pose, const GridSpec& spec,
                                  const RigidTransform& grid_to_world = RigidTransform::identity()) {
    require_shape(depth_map, {k.height, k.width}, "voxelize_free_space: depth");
    const RigidTransform grid_to_cam = compose(cam_pose.inverse(), grid_to_world);
    const double margin = spec.voxel_size().maxCoeff();
    Tensor out({spec.res_x, spec.res_y, spec.res_z, 1});
    for (int64_t i = 0; i < spec.res_x; ++i)
        for (int64_t j = 0; j < spec.res_y; ++j)
            for (int64_t l = 0; l < spec.res_z; ++l) {
                const Vec3 pc = grid_to_cam(memory_to_world(Vec3(double(i), double(j), double(l)), spec));
                if (pc.z() <= kDepthEps) continue;
                const double u = k.fx * pc.x() / pc.z() + k.cx;
                const double v = k.fy * pc.y() / pc.z() + k.cy;
                const auto ui = static_cast<int64_t>(std::lround(u));
                const auto vi = static_cast<int64_t>(std::lround(v));
                if (ui < 0 || vi < 0 || ui >= k.width || vi >= k.height) continue;
                const double d = depth_map.data[static_cast<size_t>(vi * k.width + ui)];
                if (d <= 0 || pc.z() < d - margin) out.at4(i, j, l, 0) = 1.0;
            }
    return out;
}

// Inverse warp: output voxel (i,j,k) samples the input grid at
// world_to_memory(v^{-1}(memory_to_world(i,j,k))). Exposed regions fill with
// zeros (out-of-bounds sampling convention).
inline VoxelFeatureGrid warp_grid(const VoxelFeatureGrid& grid, const RigidTransform& v) {
    VoxelFeatureGrid out;
    out.spec = grid.spec;
    out.grid_to_world = grid.grid_to_world;
    const int64_t c = grid.channels();
    out.values = Tensor({grid.spec.res_x, grid.spec.res_y, grid.spec.res_z, c});
    const RigidTransform vinv = v.inverse();
    for (int64_t i = 0; i < grid.spec.res_x; ++i)
        for (int64_t j = 0; j < grid.spec.res_y; ++j)
            for (int64_t l = 0; l < grid.spec.res_z; ++l) {
                const Vec3 src = world_to_memory(
                    vinv(memory_to_world(Vec3(double(i), double(j), double(l)), grid.spec)), grid.spec);
                const std::vector<double> f = trilinear_sample(grid.values, src);
                double* dst = &out.values.data[static_cast<size_t>(
                    ((i * grid.spec.res_y + j) * grid.spec.res_z + l) * c)];
                for (int64_t ch = 0; ch < c; ++ch) dst[ch] = f[static_cast<size_t>(ch)];
            }
    return out;
}

// Debug dump: spec as f64 (min, max, resolutions) then channel count, then
// values row-major, all 64-bit little-endian.
inline void dump_grid(const VoxelFeatureGrid& g, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open for write: " + path);
    auto wd = [&](double v) { f.write(reinterpret_cast<const char*>(&v), 8); };
    for (int a = 0; a < 3; ++a) wd(g.spec.grid_min[a]);
    for (int a = 0; a < 3; ++a) wd(g.spec.grid_max[a]);
    wd(static_cast<double>(g.spec.res_x));
    wd(static_cast<double>(g.spec.res_y));
    wd(static_cast<double>(g.spec.res_z));
    wd(static_cast<double>(g.channels()));
    f.write(reinterpret_cast<const char*>(g.values.data.data()),
            static_cast<std::streamsize>(g.values.data.size() * 8));
}

}  // namespace ccn
