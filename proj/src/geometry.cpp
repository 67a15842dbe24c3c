#include "lirf/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace lirf {

double norm(const Vec3& v) { return std::sqrt(dot(v, v)); }

Vec3 normalized(const Vec3& v) {
  double n = norm(v);
  if (n < 1e-300) throw std::runtime_error("geometry: cannot normalize a zero vector");
  return v / n;
}

Mat3 Mat3::operator*(const Mat3& o) const {
  Mat3 r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      r.m[i][j] = 0;
      for (int k = 0; k < 3; ++k) r.m[i][j] += m[i][k] * o.m[k][j];
    }
  return r;
}

Mat3 Mat3::transposed() const {
  Mat3 r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r.m[i][j] = m[j][i];
  return r;
}

void Camera::validate() const {
  if (!(near > 0 && far > near))
    throw UserError("camera: requires 0 < near < far, got near=" + std::to_string(near) +
                    " far=" + std::to_string(far));
  if (width <= 0 || height <= 0 || fx <= 0 || fy <= 0)
    throw UserError("camera: non-positive intrinsics or resolution");
  Mat3 rtr = rotation.transposed() * rotation;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double expect = i == j ? 1.0 : 0.0;
      if (std::abs(rtr.m[i][j] - expect) > 1e-6)
        throw UserError("camera: rotation is not orthonormal within 1e-6");
    }
}

Vec3 Camera::ray_direction(double u, double v) const {
  Vec3 dir_cam{(u - cx) / fx, (v - cy) / fy, 1.0};
  return normalized(rotation * dir_cam);
}

Camera Camera::scaled(double s) const {
  Camera c = *this;
  c.width = static_cast<std::int64_t>(std::llround(static_cast<double>(width) * s));
  c.height = static_cast<std::int64_t>(std::llround(static_cast<double>(height) * s));
  double sx = static_cast<double>(c.width) / static_cast<double>(width);
  double sy = static_cast<double>(c.height) / static_cast<double>(height);
  c.fx = fx * sx;
  c.fy = fy * sy;
  c.cx = cx * sx;
  c.cy = cy * sy;
  return c;
}

Camera make_lookat_camera(const Vec3& eye, const Vec3& target, const Vec3& up,
                          double fov_x_deg, std::int64_t width, std::int64_t height,
                          double near, double far) {
  Camera cam;
  Vec3 forward = normalized(target - eye);
  Vec3 down = -normalized(up);
  Vec3 right = cross(down, forward);
  if (norm(right) < 1e-9)
    throw UserError("camera: view direction parallel to the up vector");
  right = normalized(right);
  Vec3 ydown = cross(forward, right);
  cam.rotation.m[0][0] = right.x;
  cam.rotation.m[1][0] = right.y;
  cam.rotation.m[2][0] = right.z;
  cam.rotation.m[0][1] = ydown.x;
  cam.rotation.m[1][1] = ydown.y;
  cam.rotation.m[2][1] = ydown.z;
  cam.rotation.m[0][2] = forward.x;
  cam.rotation.m[1][2] = forward.y;
  cam.rotation.m[2][2] = forward.z;
  cam.center = eye;
  cam.width = width;
  cam.height = height;
  double half = 0.5 * fov_x_deg * 3.14159265358979323846 / 180.0;
  cam.fx = 0.5 * static_cast<double>(width) / std::tan(half);
  cam.fy = cam.fx;
  cam.cx = 0.5 * static_cast<double>(width);
  cam.cy = 0.5 * static_cast<double>(height);
  cam.near = near;
  cam.far = far;
  cam.validate();
  return cam;
}

Projection project(const Vec3& point, const Camera& cam) {
  Vec3 pc = cam.rotation.apply_transposed(point - cam.center);
  Projection p;
  p.depth = pc.z;
  p.in_front = pc.z > 0;
  if (pc.z != 0) {
    p.u = cam.fx * pc.x / pc.z + cam.cx;
    p.v = cam.fy * pc.y / pc.z + cam.cy;
  }
  return p;
}

Vec3 unproject(double u, double v, double depth, const Camera& cam) {
  Vec3 pc{(u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth};
  return cam.rotation * pc + cam.center;
}

ConeBundle make_cone_bundle(const Camera& cam, double u, double v, double r_m, double scale) {
  if (!uv_in_image(u, v, cam))
    throw std::runtime_error("make_cone_bundle: pixel (" + std::to_string(u) + "," +
                             std::to_string(v) + ") outside image");
  if (!(r_m > 0)) throw std::runtime_error("make_cone_bundle: cone radius must be positive");
  ConeBundle cone;
  cone.u = u;
  cone.v = v;
  cone.r_m = r_m;
  cone.scale = scale;
  cone.origin = cam.center;
  cone.axis = cam.optical_axis();
  cone.central_dir = cam.ray_direction(u, v);
  cone.central_dz = dot(cone.central_dir, cone.axis);
  const double a = r_m / std::sqrt(2.0);
  const double offs[4][2] = {{-a, -a}, {a, -a}, {-a, a}, {a, a}};
  for (int j = 0; j < 4; ++j) {
    cone.corner_dirs[j] = cam.ray_direction(u + offs[j][0], v + offs[j][1]);
    cone.corner_dz[j] = dot(cone.corner_dirs[j], cone.axis);
  }
  return cone;
}

FrustumSamples sample_frustums(const ConeBundle& cone, double near, double far,
                               std::int64_t n, std::int64_t m, bool jitter, Rng& rng,
                               DepthSampling mode) {
  if (!(near < far)) throw std::runtime_error("sample_frustums: requires near < far");
  if (n < 1) throw std::runtime_error("sample_frustums: requires at least one interval");
  if (m != 4 && m != 8 && m != 10)
    throw std::runtime_error("sample_frustums: vertex count must be 4, 8 or 10");

  FrustumSamples fs;
  fs.intervals = n;
  fs.vertices = m;
  fs.plane_depth.resize(static_cast<std::size_t>(n) + 1);
  for (std::int64_t i = 0; i <= n; ++i) {
    double t = static_cast<double>(i) / static_cast<double>(n);
    if (mode == DepthSampling::uniform)
      fs.plane_depth[i] = near + (far - near) * t;
    else
      fs.plane_depth[i] = 1.0 / (1.0 / near + (1.0 / far - 1.0 / near) * t);
  }

  fs.sample_depth.resize(static_cast<std::size_t>(n));
  fs.x.resize(static_cast<std::size_t>(n));
  fs.q.resize(static_cast<std::size_t>(n * m));
  fs.dx.resize(static_cast<std::size_t>(n * m));

  auto on_ray = [&](const Vec3& dir, double dz, double depth) {
    return cone.origin + dir * (depth / dz);
  };

  for (std::int64_t i = 0; i < n; ++i) {
    double t0 = fs.plane_depth[i], t1 = fs.plane_depth[i + 1];
    double td = jitter ? t0 + (t1 - t0) * rng.uniform() : 0.5 * (t0 + t1);
    fs.sample_depth[i] = td;
    fs.x[i] = on_ray(cone.central_dir, cone.central_dz, td);

    if (m == 4) {
      double tm = 0.5 * (t0 + t1);
      for (int j = 0; j < 4; ++j)
        fs.q[i * m + j] = on_ray(cone.corner_dirs[j], cone.corner_dz[j], tm);
    } else {
      for (int j = 0; j < 4; ++j) {
        fs.q[i * m + j] = on_ray(cone.corner_dirs[j], cone.corner_dz[j], t0);
        fs.q[i * m + 4 + j] = on_ray(cone.corner_dirs[j], cone.corner_dz[j], t1);
      }
      if (m == 10) {
        fs.q[i * m + 8] = on_ray(cone.central_dir, cone.central_dz, t0);
        fs.q[i * m + 9] = on_ray(cone.central_dir, cone.central_dz, t1);
      }
    }
    for (std::int64_t j = 0; j < m; ++j) fs.dx[i * m + j] = fs.x[i] - fs.q[i * m + j];
  }
  return fs;
}

Vec3 source_dir_in_target(const Vec3& x, const Camera& source, const Camera& target) {
  Vec3 d = x - source.center;
  if (norm(d) < 1e-12)
    throw std::runtime_error("source_dir_in_target: sample coincides with the camera center");
  return target.rotation.apply_transposed(normalized(d));
}

std::vector<std::size_t> select_source_views(const Camera& target,
                                             const std::vector<Camera>& candidates,
                                             std::size_t v) {
  if (candidates.size() < v)
    throw UserError("select_source_views: need at least " + std::to_string(v) +
                    " candidates, got " + std::to_string(candidates.size()));
  std::vector<double> dist(candidates.size());
  double max_dist = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    dist[i] = norm(candidates[i].center - target.center);
    max_dist = std::max(max_dist, dist[i]);
  }
  Vec3 axis_t = target.optical_axis();
  std::vector<double> score(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    double cosang = std::clamp(dot(axis_t, candidates[i].optical_axis()), -1.0, 1.0);
    double angle = std::acos(cosang);
    double nd = max_dist > 0 ? dist[i] / max_dist : 0.0;
    score[i] = nd + 0.5 * angle;
  }
  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return score[a] < score[b]; });
  order.resize(v);
  return order;
}

}  // namespace lirf
