#include "epio/geometry.hpp"

#include <cmath>

namespace epio {

Matrix3d Intrinsics::matrix() const {
  Matrix3d m;
  m << fx, 0, cx, 0, fy, cy, 0, 0, 1;
  return m;
}

Intrinsics Intrinsics::from_fov(int width, int height, double fov_x) {
  Intrinsics k;
  k.fx = k.fy = 0.5 * width / std::tan(0.5 * fov_x);
  k.cx = 0.5 * width;
  k.cy = 0.5 * height;
  return k;
}

void Camera::validate() const {
  if (width <= 0 || height <= 0) throw std::invalid_argument("camera: image size must be positive");
  if (!(k.fx > 0 && k.fy > 0)) throw std::invalid_argument("camera: focal lengths must be positive");
  if (!(k.cx > 0 && k.cx < width && k.cy > 0 && k.cy < height)) {
    throw std::invalid_argument("camera: principal point outside the image");
  }
  if (!t.allFinite()) throw NonFiniteError("camera: non-finite translation");
}

Vector3d Camera::direction_at(double x, double y) const {
  const Vector3d local((x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0);
  return (r.matrix() * local).normalized();
}

CameraSet::CameraSet(std::vector<Camera> cams) : cameras(std::move(cams)) {
  if (cameras.empty()) throw std::invalid_argument("CameraSet needs at least one camera");
  center.setZero();
  for (const auto& c : cameras) center += c.t;
  center /= double(cameras.size());
  double s = 0.0;
  for (std::size_t i = 0; i < cameras.size(); ++i) {
    for (std::size_t j = i + 1; j < cameras.size(); ++j) s = std::max(s, (cameras[i].t - cameras[j].t).norm());
  }
  scale = std::max(s, kScaleFloor);
}

RayBundle pixel_rays(const Camera& cam) {
  cam.validate();
  if (std::abs(cam.k.matrix().determinant()) < 1e-300) throw std::invalid_argument("pixel_rays: singular intrinsics");
  RayBundle rays;
  rays.width = cam.width;
  rays.height = cam.height;
  const Eigen::Index n = Eigen::Index(cam.width) * cam.height;
  rays.origins = cam.t.transpose().replicate(n, 1);
  rays.directions.resize(n, 3);
  for (int v = 0; v < cam.height; ++v) {
    for (int u = 0; u < cam.width; ++u) rays.directions.row(v * cam.width + u) = cam.pixel_direction(u, v).transpose();
  }
  return rays;
}

Camera apply_se3(const Camera& cam, const Rotation& rot, const Vector3d& trans) {
  Camera out = cam;
  out.r = rot * cam.r;
  out.t = rot * cam.t + trans;
  return out;
}

CameraSet apply_se3(const CameraSet& cs, const Rotation& rot, const Vector3d& trans) {
  std::vector<Camera> cams;
  cams.reserve(cs.size());
  for (const auto& c : cs.cameras) cams.push_back(apply_se3(c, rot, trans));
  return CameraSet(std::move(cams));
}

std::vector<Vector3d> normalized_offsets(const CameraSet& cs) {
  std::vector<Vector3d> out;
  out.reserve(cs.size());
  for (const auto& c : cs.cameras) out.push_back(normalized_offset(cs, c.t));
  return out;
}

Vector3d normalized_offset(const CameraSet& cs, const Vector3d& p) { return (p - cs.center) / cs.scale; }

Camera look_at(const Vector3d& eye, const Vector3d& target, const Intrinsics& k, int width, int height) {
  const Vector3d f = (target - eye).normalized();
  Vector3d right = f.cross(Vector3d::UnitZ());
  if (right.norm() < 1e-9) throw std::invalid_argument("look_at: view direction parallel to world up");
  right.normalize();
  const Vector3d down = f.cross(right);
  Matrix3d m;
  m.col(0) = right;
  m.col(1) = down;
  m.col(2) = f;
  Camera cam;
  cam.k = k;
  cam.r = Rotation(m, 1e-9);
  cam.t = eye;
  cam.width = width;
  cam.height = height;
  cam.validate();
  return cam;
}

}  // namespace epio
