#include "epio/scene.hpp"

#include <cmath>
#include <limits>
#include <random>

namespace epio {

void Scene::validate() const {
  if (spheres.empty() && planes.empty()) throw std::invalid_argument("scene needs at least one primitive");
  for (const auto& s : spheres) {
    if (!(s.radius > 0)) throw std::invalid_argument("sphere radius must be positive");
  }
  for (const auto& p : planes) {
    if (std::abs(p.normal.norm() - 1.0) > 1e-9) throw std::invalid_argument("plane normal must be unit");
    if (std::abs(p.tangent.norm() - 1.0) > 1e-9 || std::abs(p.tangent.dot(p.normal)) > 1e-9) {
      throw std::invalid_argument("plane tangent must be unit and orthogonal to the normal");
    }
    if (!(p.period > 0 && p.half_extent > 0)) throw std::invalid_argument("plane period and extent must be positive");
  }
}

Vector3d Scene::centroid() const {
  if (spheres.empty()) return planes.front().point;
  Vector3d c = Vector3d::Zero();
  for (const auto& s : spheres) c += s.center;
  return c / double(spheres.size());
}

void Scene::update_bounds() {
  const double inf = std::numeric_limits<double>::infinity();
  bounds_min = Vector3d::Constant(inf);
  bounds_max = Vector3d::Constant(-inf);
  for (const auto& s : spheres) {
    bounds_min = bounds_min.cwiseMin(s.center - Vector3d::Constant(s.radius));
    bounds_max = bounds_max.cwiseMax(s.center + Vector3d::Constant(s.radius));
  }
  for (const auto& p : planes) {
    const Vector3d b = p.normal.cross(p.tangent);
    for (int i : {-1, 1}) {
      for (int j : {-1, 1}) {
        const Vector3d c = p.point + p.half_extent * (i * p.tangent + j * b);
        bounds_min = bounds_min.cwiseMin(c);
        bounds_max = bounds_max.cwiseMax(c);
      }
    }
  }
}

Scene gen_scene(std::uint64_t seed, const SceneSpec& spec) {
  if (spec.min_spheres < 0 || spec.max_spheres < spec.min_spheres) throw std::invalid_argument("bad sphere count range");
  if (!spec.floor && spec.max_spheres == 0) throw std::invalid_argument("scene spec produces no primitives");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double a, double b) { return a + (b - a) * unit(rng); };

  Scene scene;
  scene.scale = std::exp(uniform(std::log(spec.scale_min), std::log(spec.scale_max)));
  const double s = scene.scale;

  if (spec.floor) {
    Plane floor;
    const double angle = uniform(0.0, 2.0 * kPi);
    floor.tangent = Vector3d(std::cos(angle), std::sin(angle), 0.0);
    floor.half_extent = spec.floor_extent * s;
    floor.period = uniform(spec.checker_min, spec.checker_max) * s;
    floor.albedo = Vector3d(uniform(0.6, 1.0), uniform(0.6, 1.0), uniform(0.6, 1.0));
    floor.albedo_alt = Vector3d(uniform(0.05, 0.35), uniform(0.05, 0.35), uniform(0.05, 0.35));
    scene.planes.push_back(floor);
  }
  const int count = std::uniform_int_distribution<int>(spec.min_spheres, spec.max_spheres)(rng);
  for (int i = 0; i < count; ++i) {
    Sphere sp;
    sp.radius = uniform(spec.radius_min, spec.radius_max) * s;
    const double rho = spec.spread * s * std::sqrt(unit(rng));
    const double phi = uniform(0.0, 2.0 * kPi);
    sp.center = Vector3d(rho * std::cos(phi), rho * std::sin(phi), sp.radius + uniform(0.0, 0.5) * s);
    sp.albedo = Vector3d(uniform(0.2, 1.0), uniform(0.2, 1.0), uniform(0.2, 1.0));
    scene.spheres.push_back(sp);
  }
  const double lphi = uniform(0.0, 2.0 * kPi);
  scene.light.position = Vector3d(2.0 * s * std::cos(lphi), 2.0 * s * std::sin(lphi), uniform(3.0, 5.0) * s);
  scene.light.intensity = 1.0;
  scene.update_bounds();
  scene.validate();
  return scene;
}

double RenderedView::valid_fraction() const {
  if (valid.empty()) return 0.0;
  std::size_t n = 0;
  for (auto v : valid) n += v;
  return double(n) / double(valid.size());
}

namespace {

struct Hit {
  double t = -1.0;
  Vector3d normal;
  Vector3d albedo;
};

void intersect_sphere(const Sphere& s, const Vector3d& o, const Vector3d& d, Hit& best) {
  const Vector3d oc = o - s.center;
  const double b = oc.dot(d);
  const double c = oc.squaredNorm() - s.radius * s.radius;
  const double disc = b * b - c;
  if (disc < 0) return;
  const double sq = std::sqrt(disc);
  double t = -b - sq;
  if (t <= 1e-9) t = -b + sq;
  if (t <= 1e-9) return;
  if (best.t < 0 || t < best.t) {
    best.t = t;
    best.normal = (o + t * d - s.center) / s.radius;
    best.albedo = s.albedo;
  }
}

void intersect_plane(const Plane& p, const Vector3d& o, const Vector3d& d, Hit& best) {
  const double denom = p.normal.dot(d);
  if (std::abs(denom) < 1e-12) return;
  const double t = p.normal.dot(p.point - o) / denom;
  if (t <= 1e-9 || (best.t >= 0 && t >= best.t)) return;
  const Vector3d local = o + t * d - p.point;
  const Vector3d bitangent = p.normal.cross(p.tangent);
  const double a = local.dot(p.tangent), b = local.dot(bitangent);
  if (std::abs(a) > p.half_extent || std::abs(b) > p.half_extent) return;
  const long ia = static_cast<long>(std::floor(a / p.period));
  const long ib = static_cast<long>(std::floor(b / p.period));
  best.t = t;
  best.normal = denom < 0 ? p.normal : Vector3d(-p.normal);
  best.albedo = ((ia + ib) & 1) ? p.albedo_alt : p.albedo;
}

Hit trace(const Scene& scene, const Vector3d& o, const Vector3d& d) {
  Hit best;
  for (const auto& s : scene.spheres) intersect_sphere(s, o, d, best);
  for (const auto& p : scene.planes) intersect_plane(p, o, d, best);
  return best;
}

}  // namespace

double trace_depth(const Scene& scene, const Vector3d& origin, const Vector3d& dir) {
  return trace(scene, origin, dir).t;
}

RenderedView render(const Scene& scene, const Camera& cam) {
  const RayBundle rays = pixel_rays(cam);
  const Eigen::Index n = rays.directions.rows();
  RenderedView view;
  view.width = cam.width;
  view.height = cam.height;
  view.rgb = Matrix<double>::Zero(n, 3);
  view.depth = Eigen::VectorXd::Zero(n);
  view.valid.assign(n, 0);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vector3d d = rays.directions.row(i).transpose();
    const Hit h = trace(scene, cam.t, d);
    if (h.t < 0) continue;
    const Vector3d p = cam.t + h.t * d;
    const Vector3d l = (scene.light.position - p).normalized();
    const double shade = std::max(0.0, h.normal.dot(l)) * scene.light.intensity;
    view.rgb.row(i) = (h.albedo * shade).cwiseMin(1.0).cwiseMax(0.0).transpose();
    view.depth(i) = h.t;
    view.valid[i] = 1;
  }
  return view;
}

StereoRig gen_stereo_pair(const Scene& scene, std::uint64_t seed, const SceneSpec& spec) {
  std::mt19937_64 rng(seed ^ 0x5bd1e995u);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double a, double b) { return a + (b - a) * unit(rng); };
  const Vector3d target = scene.centroid();
  const Intrinsics k = Intrinsics::from_fov(spec.width, spec.height, spec.fov * kPi / 180.0);
  const double s = scene.scale;
  for (int attempt = 0; attempt < 200; ++attempt) {
    const double dist = uniform(spec.distance_min, spec.distance_max) * s;
    const double elev = uniform(spec.elevation_min, spec.elevation_max) * kPi / 180.0;
    const double azim = uniform(0.0, 2.0 * kPi);
    const Vector3d eye0 =
        target + dist * Vector3d(std::cos(elev) * std::cos(azim), std::cos(elev) * std::sin(azim), std::sin(elev));
    const Camera c0 = look_at(eye0, target, k, spec.width, spec.height);
    const double baseline = uniform(spec.baseline_min, spec.baseline_max) * s;
    const Vector3d eye1 = eye0 + baseline * c0.r.matrix().col(0);
    const Camera c1 = look_at(eye1, target, k, spec.width, spec.height);
    if (render(scene, c0).valid_fraction() < spec.min_valid_fraction) continue;
    if (render(scene, c1).valid_fraction() < spec.min_valid_fraction) continue;
    StereoRig rig;
    rig.inputs = CameraSet({c0, c1});
    rig.query = c0;
    rig.baseline = baseline;
    return rig;
  }
  throw std::runtime_error("gen_stereo_pair: could not find a rig with enough valid pixels");
}

Scene transform(const Scene& scene, const Rotation& rot, const Vector3d& trans) {
  Scene out = scene;
  for (auto& s : out.spheres) s.center = rot * s.center + trans;
  for (auto& p : out.planes) {
    p.point = rot * p.point + trans;
    p.normal = rot * p.normal;
    p.tangent = rot * p.tangent;
  }
  out.light.position = rot * out.light.position + trans;
  out.update_bounds();
  return out;
}

}  // namespace epio
