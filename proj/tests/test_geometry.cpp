#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "epio/geometry.hpp"

using namespace epio;

namespace {

Camera make_camera(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  Camera c;
  c.k = Intrinsics::from_fov(16, 12, 1.0);
  c.r = random_rotation(rng);
  c.t = Vector3d(u(rng), u(rng), u(rng));
  c.width = 16;
  c.height = 12;
  return c;
}

CameraSet make_set(std::mt19937_64& rng, int n) {
  std::vector<Camera> cams;
  for (int i = 0; i < n; ++i) cams.push_back(make_camera(rng));
  return CameraSet(cams);
}

}  // namespace

TEST_CASE("pixel rays through the principal point and corners") {
  Camera c;
  c.k = {100, 100, 8, 8};
  c.width = c.height = 16;
  CHECK((c.direction_at(8, 8) - Vector3d(0, 0, 1)).norm() < 1e-15);
  const RayBundle rays = pixel_rays(c);
  const Vector3d expected = Vector3d(-7.5 / 100, -7.5 / 100, 1).normalized();
  CHECK((rays.directions.row(0).transpose() - expected).norm() < 1e-15);
  for (Eigen::Index i = 0; i < rays.directions.rows(); ++i) CHECK(std::abs(rays.directions.row(i).norm() - 1.0) < 1e-10);
  CHECK(rays.origins.rows() == 256);
}

TEST_CASE("camera validation") {
  Camera c;
  c.k = {10, 10, 8, 8};
  c.width = c.height = 16;
  CHECK_NOTHROW(c.validate());
  c.k.fx = 0;
  CHECK_THROWS(c.validate());
  c.k = {10, 10, 20, 8};
  CHECK_THROWS(c.validate());
  CHECK_THROWS(CameraSet(std::vector<Camera>{}));
}

TEST_CASE("camera set statistics") {
  Camera a, b;
  a.t = Vector3d(1, 0, 0);
  b.t = Vector3d(-1, 0, 0);
  const CameraSet cs({a, b});
  CHECK(cs.center.norm() == 0.0);
  CHECK(cs.scale == doctest::Approx(2.0));
  for (const auto& o : normalized_offsets(cs)) CHECK(o.norm() == doctest::Approx(0.5));
  const CameraSet single({a});
  CHECK(normalized_offsets(single)[0].norm() == 0.0);
  CHECK(single.scale == kScaleFloor);
}

TEST_CASE("offset norms never exceed one") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const CameraSet cs = make_set(rng, 2 + trial % 4);
    for (const auto& o : normalized_offsets(cs)) CHECK(o.norm() <= 1.0 + 1e-12);
  }
}

TEST_CASE("apply_se3 properties") {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0.0, 2.0);
  for (int trial = 0; trial < 20; ++trial) {
    const CameraSet cs = make_set(rng, 3);
    const Rotation r1 = random_rotation(rng), r2 = random_rotation(rng);
    const Vector3d t1(n(rng), n(rng), n(rng)), t2(n(rng), n(rng), n(rng));

    const CameraSet id = apply_se3(cs, Rotation::identity(), Vector3d::Zero());
    for (std::size_t i = 0; i < cs.size(); ++i) CHECK((id.cameras[i].t - cs.cameras[i].t).norm() == 0.0);

    const CameraSet moved = apply_se3(cs, r1, t1);
    CHECK(std::abs(moved.scale - cs.scale) < 1e-10);

    const CameraSet shifted = apply_se3(cs, Rotation::identity(), t1);
    CHECK((shifted.center - cs.center - t1).norm() < 1e-12);
    CHECK((pixel_rays(shifted.cameras[0]).directions - pixel_rays(cs.cameras[0]).directions).cwiseAbs().maxCoeff() < 1e-15);

    const auto o0 = normalized_offsets(cs), o1 = normalized_offsets(moved);
    for (std::size_t i = 0; i < o0.size(); ++i) CHECK((o1[i] - r1 * o0[i]).cwiseAbs().maxCoeff() < 1e-12);

    const CameraSet twice = apply_se3(moved, r2, t2);
    const CameraSet once = apply_se3(cs, r2 * r1, r2 * t1 + t2);
    for (std::size_t i = 0; i < cs.size(); ++i) {
      CHECK((twice.cameras[i].t - once.cameras[i].t).norm() < 1e-10);
      CHECK((twice.cameras[i].r.matrix() - once.cameras[i].r.matrix()).cwiseAbs().maxCoeff() < 1e-10);
    }

    const RayBundle a = pixel_rays(cs.cameras[1]), b = pixel_rays(moved.cameras[1]);
    CHECK((b.directions - a.directions * r1.matrix().transpose()).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("look_at builds a right-handed camera frame") {
  const Camera c = look_at(Vector3d(0, -5, 2), Vector3d::Zero(), Intrinsics::from_fov(32, 32, kPi / 3), 32, 32);
  const Matrix3d m = c.r.matrix();
  CHECK((m.col(2) - Vector3d(0, 5, -2).normalized()).norm() < 1e-12);
  CHECK(m.col(0).z() == doctest::Approx(0.0));
  CHECK(m.col(1).z() < 0);  // image down points toward the ground
  CHECK((c.direction_at(16, 16) - m.col(2)).norm() < 1e-12);
  CHECK(c.k.fx == doctest::Approx(16.0 / std::tan(kPi / 6)));
}
