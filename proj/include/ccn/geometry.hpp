#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <numbers>

#include "ccn/errors.hpp"

namespace ccn {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

inline constexpr double kDepthEps = 1e-6;
inline constexpr double kPi = std::numbers::pi;

inline double deg2rad(double d) { return d * kPi / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / kPi; }

// Shortest-arc angular difference in radians, result in [-pi, pi].
inline double wrap_angle(double a) {
    a = std::fmod(a + kPi, 2.0 * kPi);
    if (a < 0) a += 2.0 * kPi;
    return a - kPi;
}

// SE(3): p -> rotation * p + translation.
struct RigidTransform {
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();

    static RigidTransform identity() { return {}; }

    Vec3 operator()(const Vec3& p) const { return rotation * p + translation; }

    RigidTransform inverse() const {
        RigidTransform inv;
        inv.rotation = rotation.transpose();
        inv.translation = -(inv.rotation * translation);
        return inv;
    }

    bool valid(double tol = 1e-9) const {
        return (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol &&
               std::abs(rotation.determinant() - 1.0) <= tol;
    }
};

// Applies b first, then a.
inline RigidTransform compose(const RigidTransform& a, const RigidTransform& b) {
    RigidTransform out;
    out.rotation = a.rotation * b.rotation;
    out.translation = a.rotation * b.translation + a.translation;
    return out;
}

struct CameraIntrinsics {
    double fx = 1, fy = 1, cx = 0, cy = 0;
    int width = 1, height = 1;

    bool valid() const { return fx > 0 && fy > 0 && width >= 1 && height >= 1; }
};

// Pinhole projection of a camera-frame point.
inline Vec2 project(const Vec3& p, const CameraIntrinsics& k) {
    if (p.z() <= kDepthEps) throw DegenerateDepth("projection of point with Z <= eps");
    return {k.fx * p.x() / p.z() + k.cx, k.fy * p.y() / p.z() + k.cy};
}

inline Vec3 unproject(const Vec2& pixel, double depth, const CameraIntrinsics& k) {
    if (depth <= 0) throw DegenerateDepth("unprojection with non-positive depth");
    return {(pixel.x() - k.cx) / k.fx * depth, (pixel.y() - k.cy) / k.fy * depth, depth};
}

// Intrinsic Z-Y-X (yaw-pitch-roll) convention: R = Rz(yaw) * Ry(pitch) * Rx(roll).
struct EulerAngles {
    double yaw = 0, pitch = 0, roll = 0;
    bool gimbal_lock = false;
};

inline Mat3 rotation_from_euler(const EulerAngles& e) {
    Mat3 rz = Eigen::AngleAxisd(e.yaw, Vec3::UnitZ()).toRotationMatrix();
    Mat3 ry = Eigen::AngleAxisd(e.pitch, Vec3::UnitY()).toRotationMatrix();
    Mat3 rx = Eigen::AngleAxisd(e.roll, Vec3::UnitX()).toRotationMatrix();
    return rz * ry * rx;
}

inline EulerAngles euler_from_rotation(const Mat3& r) {
    EulerAngles e;
    double sp = -r(2, 0);
    sp = std::clamp(sp, -1.0, 1.0);
    e.pitch = std::asin(sp);
    if (std::abs(std::abs(e.pitch) - kPi / 2) < 1e-6) {
        // Gimbal lock: yaw/roll split is not unique, canonicalize roll := 0.
        e.gimbal_lock = true;
        e.roll = 0;
        e.yaw = std::atan2(-r(0, 1), r(1, 1));
    } else {
        e.roll = std::atan2(r(2, 1), r(2, 2));
        e.yaw = std::atan2(r(1, 0), r(0, 0));
    }
    return e;
}

inline Mat3 rot_x(double a) { return Eigen::AngleAxisd(a, Vec3::UnitX()).toRotationMatrix(); }
inline Mat3 rot_y(double a) { return Eigen::AngleAxisd(a, Vec3::UnitY()).toRotationMatrix(); }
inline Mat3 rot_z(double a) { return Eigen::AngleAxisd(a, Vec3::UnitZ()).toRotationMatrix(); }

// Rotation angle of R in radians.
inline double rotation_angle(const Mat3& r) {
    double c = (r.trace() - 1.0) / 2.0;
    return std::acos(std::clamp(c, -1.0, 1.0));
}

}  // namespace ccn
