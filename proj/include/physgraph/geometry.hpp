#pragma once
// Minimal 3D vector / unit-quaternion math for the kinematic toy stack.
// Quaternions are (w, x, y, z), kept unit-norm by the callers that integrate them.

#include <array>
#include <cmath>
#include <cstddef>

namespace physgraph {

struct Vec3 {
    double x = 0.0, y = 0.0, z = 0.0;

    Vec3() = default;
    Vec3(double x_, double y_, double z_) : x(x_), y(y_), z(z_) {}

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }
    Vec3& operator+=(const Vec3& o) { x += o.x; y += o.y; z += o.z; return *this; }
    Vec3& operator-=(const Vec3& o) { x -= o.x; y -= o.y; z -= o.z; return *this; }
    Vec3 operator-() const { return {-x, -y, -z}; }

    double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
    Vec3 cross(const Vec3& o) const {
        return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
    }
    double norm2() const { return dot(*this); }
    double norm() const { return std::sqrt(norm2()); }

    double operator[](std::size_t i) const { return i == 0 ? x : (i == 1 ? y : z); }
};

inline Vec3 operator*(double s, const Vec3& v) { return v * s; }

struct Quat {
    double w = 1.0, x = 0.0, y = 0.0, z = 0.0;

    Quat() = default;
    Quat(double w_, double x_, double y_, double z_) : w(w_), x(x_), y(y_), z(z_) {}

    static Quat identity() { return {1.0, 0.0, 0.0, 0.0}; }

    // Rotation of `angle` radians about a unit axis.
    static Quat from_axis_angle(const Vec3& axis, double angle) {
        double h = 0.5 * angle;
        double s = std::sin(h);
        return {std::cos(h), axis.x * s, axis.y * s, axis.z * s};
    }

    // Rotation vector (axis * angle); safe at zero.
    static Quat from_rotvec(const Vec3& r) {
        double a = r.norm();
        if (a < 1e-12) {
            return Quat{1.0, 0.5 * r.x, 0.5 * r.y, 0.5 * r.z}.normalized();
        }
        return from_axis_angle(r / a, a);
    }

    Quat operator*(const Quat& o) const {
        return {w * o.w - x * o.x - y * o.y - z * o.z,
                w * o.x + x * o.w + y * o.z - z * o.y,
                w * o.y - x * o.z + y * o.w + z * o.x,
                w * o.z + x * o.y - y * o.x + z * o.w};
    }

    Quat conjugate() const { return {w, -x, -y, -z}; }

    double norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }

    Quat normalized() const {
        double n = norm();
        return {w / n, x / n, y / n, z / n};
    }

    Vec3 rotate(const Vec3& v) const {
        // v' = v + 2 q_vec x (q_vec x v + w v)
        Vec3 qv{x, y, z};
        Vec3 t = qv.cross(v) * 2.0;
        return v + t * w + qv.cross(t);
    }

    // Rotation vector of this quaternion (inverse of from_rotvec).
    Vec3 to_rotvec() const {
        Quat q = w < 0.0 ? Quat{-w, -x, -y, -z} : *this;
        double vn = std::sqrt(q.x * q.x + q.y * q.y + q.z * q.z);
        if (vn < 1e-12) return {2.0 * q.x, 2.0 * q.y, 2.0 * q.z};
        double angle = 2.0 * std::atan2(vn, q.w);
        return Vec3{q.x, q.y, q.z} * (angle / vn);
    }
};

// Relative rotation taking `a` to `b`, i.e. b = delta * a.
inline Quat quat_delta(const Quat& b, const Quat& a) { return b * a.conjugate(); }

// Geodesic angle between two unit quaternions, radians.
inline double quat_angle(const Quat& a, const Quat& b) {
    double d = std::abs(a.w * b.w + a.x * b.x + a.y * b.y + a.z * b.z);
    if (d > 1.0) d = 1.0;
    return 2.0 * std::acos(d);
}

// Rigid transform (rotation + translation).
struct Pose {
    Vec3 p;
    Quat q = Quat::identity();

    static Pose identity() { return {}; }

    Vec3 apply(const Vec3& v) const { return q.rotate(v) + p; }

    Pose compose(const Pose& o) const { return {q.rotate(o.p) + p, (q * o.q).normalized()}; }

    Pose inverse() const {
        Quat qi = q.conjugate();
        return {qi.rotate(-p), qi};
    }
};

}  // namespace physgraph
