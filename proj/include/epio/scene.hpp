#pragma once

// Synthetic scenes (checkered floor, spheres, one point light), stereo rigs
// and an analytic ray tracer producing RGB and ray-distance depth.

#include "epio/geometry.hpp"

#include <cstdint>
#include <vector>

namespace epio {

struct Sphere {
  Vector3d center = Vector3d::Zero();
  double radius = 1.0;
  Vector3d albedo = Vector3d::Constant(0.8);
};

/// Square patch of a plane with a two-color checker pattern laid out along
/// `tangent` and normal x tangent.
struct Plane {
  Vector3d point = Vector3d::Zero();
  Vector3d normal = Vector3d::UnitZ();
  Vector3d tangent = Vector3d::UnitX();
  double half_extent = 10.0;
  double period = 1.0;
  Vector3d albedo = Vector3d::Constant(0.8);
  Vector3d albedo_alt = Vector3d::Constant(0.3);
};

struct Light {
  Vector3d position = Vector3d(0, 0, 10);
  double intensity = 1.0;
};

struct Scene {
  std::vector<Sphere> spheres;
  std::vector<Plane> planes;
  Light light;
  Vector3d bounds_min = Vector3d::Zero(), bounds_max = Vector3d::Zero();
  /// Global size factor the scene was generated with.
  double scale = 1.0;

  void validate() const;
  /// Mean of sphere centers, or the first plane's point when there are none.
  Vector3d centroid() const;
  void update_bounds();
};

struct SceneSpec {
  int min_spheres = 1, max_spheres = 3;
  bool floor = true;
  double scale_min = 0.5, scale_max = 2.0;          // log-uniform global scale
  double radius_min = 0.3, radius_max = 0.8;        // x scale
  double spread = 1.5;                              // sphere centers within this radius, x scale
  double floor_extent = 6.0;                        // x scale
  double checker_min = 0.4, checker_max = 0.8;      // x scale
  double distance_min = 3.5, distance_max = 4.5;    // camera distance to centroid, x scale
  double baseline_min = 0.9, baseline_max = 1.1;    // x scale
  double elevation_min = 20.0, elevation_max = 40.0;  // degrees
  double fov = 60.0;                                // horizontal, degrees
  int width = 32, height = 32;
  double min_valid_fraction = 0.5;
};

Scene gen_scene(std::uint64_t seed, const SceneSpec& spec);

struct StereoRig {
  CameraSet inputs;  // two cameras
  Camera query;      // equal to inputs.cameras[0]
  double baseline = 0.0;
};

/// Two verging cameras looking at the scene centroid, the second displaced
/// along the first one's right axis. Resamples until every camera sees at
/// least spec.min_valid_fraction valid pixels (throws after many failures).
StereoRig gen_stereo_pair(const Scene& scene, std::uint64_t seed, const SceneSpec& spec);

struct RenderedView {
  int width = 0, height = 0;
  Matrix<double> rgb;                 // (W H) x 3 in [0, 1]
  Eigen::VectorXd depth;              // (W H), distance along the unit ray; 0 where invalid
  std::vector<std::uint8_t> valid;    // (W H)

  double valid_fraction() const;
};

RenderedView render(const Scene& scene, const Camera& cam);

/// Distance along a unit ray to the nearest hit, or a negative value on a miss.
double trace_depth(const Scene& scene, const Vector3d& origin, const Vector3d& dir);

Scene transform(const Scene& scene, const Rotation& rot, const Vector3d& trans);

}  // namespace epio
