#pragma once

// Pinhole cameras, per-pixel rays, rigid motions of camera sets.
//
// Camera frame: x right, y down, z forward. R maps camera to world, t is the
// camera center in world coordinates.

#include "epio/harmonics.hpp"

#include <vector>

namespace epio {

struct Intrinsics {
  double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;

  Matrix3d matrix() const;
  /// Square-pixel intrinsics for a horizontal field of view in radians.
  static Intrinsics from_fov(int width, int height, double fov_x);
};

struct Camera {
  Intrinsics k;
  Rotation r;
  Vector3d t = Vector3d::Zero();
  int width = 0, height = 0;

  /// Throws std::invalid_argument when the invariants do not hold.
  void validate() const;
  /// Unit world-frame direction through image point (x, y) in pixel units.
  Vector3d direction_at(double x, double y) const;
  /// Direction through the center of pixel (u, v).
  Vector3d pixel_direction(int u, int v) const { return direction_at(u + 0.5, v + 0.5); }
};

struct CameraSet {
  std::vector<Camera> cameras;
  Vector3d center = Vector3d::Zero();
  double scale = 1.0;

  CameraSet() = default;
  /// Computes center (mean translation) and scale (max pairwise distance, floored).
  explicit CameraSet(std::vector<Camera> cams);
  std::size_t size() const { return cameras.size(); }
};

inline constexpr double kScaleFloor = 1e-6;

/// Per-pixel rays, pixel (u, v) at row v * width + u.
struct RayBundle {
  int width = 0, height = 0;
  Matrix<double> origins;     // (W H) x 3
  Matrix<double> directions;  // (W H) x 3, unit rows
};

RayBundle pixel_rays(const Camera& cam);

/// Left-multiplies a pose by the rigid motion (rot, trans).
Camera apply_se3(const Camera& cam, const Rotation& rot, const Vector3d& trans);
CameraSet apply_se3(const CameraSet& cs, const Rotation& rot, const Vector3d& trans);

/// (t_i - center) / scale for every camera.
std::vector<Vector3d> normalized_offsets(const CameraSet& cs);
/// (p - center) / scale for an arbitrary point, using the set's statistics.
Vector3d normalized_offset(const CameraSet& cs, const Vector3d& p);

/// Camera at `eye` looking at `target`, zero roll about world +z.
Camera look_at(const Vector3d& eye, const Vector3d& target, const Intrinsics& k, int width, int height);

}  // namespace epio
