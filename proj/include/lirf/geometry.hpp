#pragma once

#include <cstdint>
#include <vector>

#include "lirf/common.hpp"

namespace lirf {

struct Vec3 {
  double x = 0, y = 0, z = 0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }
  Vec3 operator-() const { return {-x, -y, -z}; }
};

inline double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
double norm(const Vec3& v);
Vec3 normalized(const Vec3& v);

// Column-major basis: columns are the camera axes expressed in world space.
struct Mat3 {
  // m[r][c]
  double m[3][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};

  Vec3 col(int c) const { return {m[0][c], m[1][c], m[2][c]}; }
  Vec3 operator*(const Vec3& v) const {
    return {m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z};
  }
  Mat3 operator*(const Mat3& o) const;
  Mat3 transposed() const;
  // R^T v: world direction into the camera frame.
  Vec3 apply_transposed(const Vec3& v) const {
    return {m[0][0] * v.x + m[1][0] * v.y + m[2][0] * v.z,
            m[0][1] * v.x + m[1][1] * v.y + m[2][1] * v.z,
            m[0][2] * v.x + m[1][2] * v.y + m[2][2] * v.z};
  }
};

// Pinhole camera, camera-to-world pose. Conventions fixed for file and
// checkpoint portability: +z forward, image origin top-left, pixel centers
// at half-integer coordinates.
struct Camera {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  std::int64_t width = 0, height = 0;
  Mat3 rotation;   // camera-to-world
  Vec3 center;     // camera position in world space
  double near = 0, far = 0;

  void validate() const;  // orthonormal rotation, 0 < near < far
  Vec3 optical_axis() const { return rotation.col(2); }

  // World-space unit direction through image point (u,v) in pixels.
  Vec3 ray_direction(double u, double v) const;

  // Resolution scaled by s (rounded); intrinsics follow exactly.
  Camera scaled(double s) const;
};

Camera make_lookat_camera(const Vec3& eye, const Vec3& target, const Vec3& up,
                          double fov_x_deg, std::int64_t width, std::int64_t height,
                          double near, double far);

struct Projection {
  double u = 0, v = 0;
  double depth = 0;
  bool in_front = false;
};

Projection project(const Vec3& point, const Camera& cam);

// Inverse of project for a given depth plane (used by round-trip oracles).
Vec3 unproject(double u, double v, double depth, const Camera& cam);

inline bool uv_in_image(double u, double v, const Camera& cam) {
  return u >= 0.0 && u <= static_cast<double>(cam.width) && v >= 0.0 &&
         v <= static_cast<double>(cam.height);
}

// Per-target-pixel cone: a central ray plus four corner rays through the
// diagonal points (+-r/sqrt2, +-r/sqrt2) on the radius-r_m circle.
struct ConeBundle {
  double u = 0, v = 0;        // target pixel center, pixels
  double r_m = 0;             // cone radius at the image plane, pixels
  double scale = 1.0;         // scale latent of the target image
  Vec3 origin;                // shared ray origin (camera center)
  Vec3 central_dir;           // unit
  Vec3 corner_dirs[4];        // unit; order (-,-), (+,-), (-,+), (+,+)
  Vec3 axis;                  // camera optical axis (unit, world space)
  double central_dz = 0;      // dot(central_dir, axis)
  double corner_dz[4] = {0, 0, 0, 0};
};

ConeBundle make_cone_bundle(const Camera& cam, double u, double v, double r_m, double scale);

// Conical-frustum vertex sets along the cone. Depth planes are perpendicular
// to the optical axis; vertices sit exactly on their corner rays at plane
// depths. The target sample x[i] rides the central ray at the interval
// midpoint, or at a stratified depth when jittered (vertices stay on the
// unjittered planes so adjacent frustums share them).
struct FrustumSamples {
  std::int64_t intervals = 0;     // N
  std::int64_t vertices = 8;      // M per frustum (4, 8, or 10)
  std::vector<double> plane_depth;   // N+1 interval boundaries
  std::vector<double> sample_depth;  // N sample depths along the axis
  std::vector<Vec3> x;               // N sample positions (central ray)
  std::vector<Vec3> q;               // N*M vertex positions
  std::vector<Vec3> dx;              // N*M relative offsets x[i] - q[i][j]

  const Vec3& vertex(std::int64_t i, std::int64_t j) const { return q[i * vertices + j]; }
  const Vec3& offset(std::int64_t i, std::int64_t j) const { return dx[i * vertices + j]; }
};

enum class DepthSampling { uniform, inverse_depth };

FrustumSamples sample_frustums(const ConeBundle& cone, double near, double far,
                               std::int64_t n, std::int64_t m, bool jitter, Rng& rng,
                               DepthSampling mode = DepthSampling::uniform);

// Direction from the source camera center to x, expressed in the target
// camera frame (unit length).
Vec3 source_dir_in_target(const Vec3& x, const Camera& source, const Camera& target);

// The V candidates closest to the target by normalized center distance plus
// 0.5 x optical-axis angle; deterministic ties by index.
std::vector<std::size_t> select_source_views(const Camera& target,
                                             const std::vector<Camera>& candidates,
                                             std::size_t v);

}  // namespace lirf
