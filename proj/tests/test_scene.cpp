#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "epio/scene.hpp"

using namespace epio;

TEST_CASE("sphere depth along the optical axis") {
  Scene scene;
  scene.spheres.push_back({Vector3d::Zero(), 1.0, Vector3d::Constant(0.5)});
  scene.light.position = Vector3d(0, 0, -10);
  Camera cam;
  cam.k = {20, 20, 16.5, 16.5};
  cam.width = cam.height = 33;
  cam.t = Vector3d(0, 0, -3);
  const RenderedView view = render(scene, cam);
  const int center = 16 * 33 + 16;
  REQUIRE(view.valid[center] == 1);
  CHECK(view.depth(center) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(view.valid[0] == 0);
  CHECK(view.depth(0) == 0.0);
  // facing the light head-on: rgb = albedo * 1
  CHECK(view.rgb(center, 0) == doctest::Approx(0.5));
}

TEST_CASE("plane checker and bounds") {
  Scene scene;
  Plane floor;
  floor.half_extent = 1.0;
  scene.planes.push_back(floor);
  CHECK(trace_depth(scene, Vector3d(0.2, 0.3, 2.0), Vector3d(0, 0, -1)) == doctest::Approx(2.0));
  CHECK(trace_depth(scene, Vector3d(3.0, 0.0, 2.0), Vector3d(0, 0, -1)) < 0);
  CHECK(trace_depth(scene, Vector3d(0.0, 0.0, 2.0), Vector3d(1, 0, 0)) < 0);
}

TEST_CASE("gen_scene is deterministic and valid") {
  SceneSpec spec;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Scene s = gen_scene(seed, spec);
    CHECK_NOTHROW(s.validate());
    CHECK(s.spheres.size() >= 1);
    CHECK(s.spheres.size() <= 3);
    CHECK(s.scale >= spec.scale_min);
    CHECK(s.scale <= spec.scale_max);
  }
  const Scene a = gen_scene(7, spec), b = gen_scene(7, spec);
  CHECK(a.spheres.size() == b.spheres.size());
  CHECK(a.spheres[0].center == b.spheres[0].center);
  CHECK(a.planes[0].period == b.planes[0].period);

  SceneSpec plane_only = spec;
  plane_only.min_spheres = plane_only.max_spheres = 0;
  const Scene p = gen_scene(3, plane_only);
  CHECK(p.spheres.empty());
  CHECK(p.planes.size() == 1);

  SceneSpec empty = plane_only;
  empty.floor = false;
  CHECK_THROWS(gen_scene(3, empty));
}

TEST_CASE("stereo rigs") {
  SceneSpec spec;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Scene scene = gen_scene(seed, spec);
    const StereoRig rig = gen_stereo_pair(scene, seed, spec);
    REQUIRE(rig.inputs.size() == 2);
    const double b = (rig.inputs.cameras[0].t - rig.inputs.cameras[1].t).norm();
    CHECK(b == doctest::Approx(rig.baseline));
    CHECK(b >= spec.baseline_min * scene.scale - 1e-12);
    CHECK(b <= spec.baseline_max * scene.scale + 1e-12);
    CHECK(rig.query.t == rig.inputs.cameras[0].t);
    for (const auto& c : rig.inputs.cameras) CHECK(render(scene, c).valid_fraction() >= 0.5);
  }
  const Scene scene = gen_scene(1, spec);
  const StereoRig a = gen_stereo_pair(scene, 5, spec), b = gen_stereo_pair(scene, 5, spec);
  CHECK(a.inputs.cameras[1].t == b.inputs.cameras[1].t);
}

TEST_CASE("rendering is covariant under rigid motion") {
  SceneSpec spec;
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0.0, 3.0);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Scene scene = gen_scene(seed, spec);
    const StereoRig rig = gen_stereo_pair(scene, seed, spec);
    const Rotation r = random_rotation(rng);
    const Vector3d t(n(rng), n(rng), n(rng));
    const RenderedView a = render(scene, rig.query);
    const RenderedView b = render(transform(scene, r, t), apply_se3(rig.query, r, t));
    CHECK(a.valid == b.valid);
    CHECK((a.depth - b.depth).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((a.rgb - b.rgb).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("depths are positive and finite where valid") {
  SceneSpec spec;
  const Scene scene = gen_scene(11, spec);
  const StereoRig rig = gen_stereo_pair(scene, 11, spec);
  const RenderedView v = render(scene, rig.query);
  for (std::size_t i = 0; i < v.valid.size(); ++i) {
    if (v.valid[i]) {
      CHECK(v.depth(i) > 0);
      CHECK(std::isfinite(v.depth(i)));
    }
  }
  CHECK(v.rgb.allFinite());
  CHECK(v.rgb.minCoeff() >= 0.0);
  CHECK(v.rgb.maxCoeff() <= 1.0);
}
