#pragma once

// Real solid spherical harmonics and the matching Wigner-D representation.
//
// Convention: orthonormal real harmonics on the unit sphere, components
// ordered m = -l..l, no Condon-Shortley phase. Order 1 is
// sqrt(3/4pi) * (y, z, x).

#include "epio/types.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace epio {

inline constexpr int kMaxSphOrder = 12;

/// Proper rotation matrix. Construction validates orthogonality and det = +1.
class Rotation {
 public:
  Rotation() : m_(Matrix3d::Identity()) {}
  explicit Rotation(const Matrix3d& m, double tol = 1e-10);

  static Rotation identity() { return Rotation(); }
  /// Rotation by `angle` radians about `axis` (normalized internally).
  static Rotation axis_angle(const Vector3d& axis, double angle);

  const Matrix3d& matrix() const { return m_; }
  Rotation inverse() const;
  Rotation operator*(const Rotation& other) const;
  Vector3d operator*(const Vector3d& v) const { return m_ * v; }

 private:
  struct Unchecked {};
  Rotation(const Matrix3d& m, Unchecked) : m_(m) {}
  Matrix3d m_;
};

namespace detail {

/// Normalization constant for the real harmonic (l, m).
double sph_norm(int l, int m);

}  // namespace detail

/// Solid harmonic of order l evaluated at r, with no input validation.
/// Generic over the scalar so that dual numbers can be passed through.
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> eval_sph_unchecked(int l, const Scalar& x, const Scalar& y,
                                                            const Scalar& z) {
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> out(2 * l + 1);
  if (l == 0) {
    out(0) = Scalar(detail::sph_norm(0, 0));
    return out;
  }
  const Scalar r2 = x * x + y * y + z * z;
  // cos/sin parts: Re/Im of (x + iy)^m
  std::vector<Scalar> cm(l + 1), sm(l + 1);
  cm[0] = Scalar(1.0);
  sm[0] = Scalar(0.0);
  for (int m = 1; m <= l; ++m) {
    cm[m] = x * cm[m - 1] - y * sm[m - 1];
    sm[m] = x * sm[m - 1] + y * cm[m - 1];
  }
  // Homogeneous Legendre part S_k^m = r^(k-m) * d^m P_k / dz^m (z / r).
  for (int m = 0; m <= l; ++m) {
    double dfact = 1.0;
    for (int k = 2 * m - 1; k > 1; k -= 2) dfact *= k;
    Scalar s_prev2 = Scalar(0.0);
    Scalar s_prev = Scalar(dfact);
    Scalar s_cur = s_prev;
    for (int k = m + 1; k <= l; ++k) {
      s_cur = (Scalar(2.0 * k - 1.0) * z * s_prev - Scalar(double(k + m - 1)) * r2 * s_prev2) /
              Scalar(double(k - m));
      s_prev2 = s_prev;
      s_prev = s_cur;
    }
    const Scalar legendre = s_prev;
    const Scalar norm = Scalar(detail::sph_norm(l, m));
    if (m == 0) {
      out(l) = norm * legendre;
    } else {
      out(l + m) = norm * legendre * cm[m];
      out(l - m) = norm * legendre * sm[m];
    }
  }
  return out;
}

/// ||r||^l * Y^l(r / ||r||). Throws NonFiniteError on non-finite input.
Eigen::VectorXd eval_sph(int l, const Vector3d& r);

/// Row-wise evaluation: points (N x 3) -> N x (2l+1).
template <typename Scalar>
Matrix<Scalar> eval_sph_rows(int l, const Matrix<Scalar>& points);

/// d Y^l / d r, shape (2l+1) x 3.
Eigen::MatrixXd sph_jacobian(int l, const Vector3d& r);

/// Wigner-D block with Y^l(R r) = D Y^l(r).
Eigen::MatrixXd wigner_d(int l, const Rotation& rot);
/// Same, for an arbitrary 3x3 matrix (no validation); used by differentiable paths.
Eigen::MatrixXd wigner_d_raw(int l, const Matrix3d& m);
/// Gradient of <G, wigner_d_raw(l, m)> with respect to m.
Matrix3d wigner_d_raw_backward(int l, const Matrix3d& m, const Eigen::MatrixXd& grad_d);

/// Wigner-D blocks for a set of orders.
struct WignerD {
  std::vector<int> orders;
  std::vector<Eigen::MatrixXd> blocks;

  static WignerD of(const Rotation& rot, const std::vector<int>& orders);
  const Eigen::MatrixXd& block(int l) const;
};

/// Haar-uniform rotation, deterministic in the seed.
Rotation random_rotation(std::uint64_t seed);
Rotation random_rotation(std::mt19937_64& rng);

/// Fibonacci lattice with equal quadrature weights 4pi/n.
struct SphereGrid {
  std::vector<Vector3d> points;
  std::vector<double> weights;
};

SphereGrid sphere_grid(int n);

}  // namespace epio
