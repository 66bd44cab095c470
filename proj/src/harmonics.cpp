#include "epio/harmonics.hpp"

#include <unsupported/Eigen/AutoDiff>

#include <array>
#include <mutex>
#include <sstream>

namespace epio {

Rotation::Rotation(const Matrix3d& m, double tol) : m_(m) {
  if (!m.allFinite()) throw NonFiniteError("rotation matrix has non-finite entries");
  const double orth = (m * m.transpose() - Matrix3d::Identity()).cwiseAbs().maxCoeff();
  const double det = m.determinant();
  if (orth > tol || std::abs(det - 1.0) > tol) {
    std::ostringstream os;
    os << "not a proper rotation (orthogonality error " << orth << ", det " << det << ")";
    throw std::invalid_argument(os.str());
  }
}

Rotation Rotation::axis_angle(const Vector3d& axis, double angle) {
  return Rotation(Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix(), Unchecked{});
}

Rotation Rotation::inverse() const { return Rotation(m_.transpose(), Unchecked{}); }

Rotation Rotation::operator*(const Rotation& other) const {
  return Rotation(m_ * other.m_, Unchecked{});
}

namespace detail {

double sph_norm(int l, int m) {
  const int am = std::abs(m);
  // (l-|m|)! / (l+|m|)!
  double ratio = 1.0;
  for (int k = l - am + 1; k <= l + am; ++k) ratio /= k;
  double n = std::sqrt((2.0 * l + 1.0) / (4.0 * kPi) * ratio);
  if (am != 0) n *= std::sqrt(2.0);
  return n;
}

}  // namespace detail

namespace {

void check_order(int l) {
  if (l < 0 || l > kMaxSphOrder) {
    throw std::invalid_argument("spherical harmonic order out of range: " + std::to_string(l));
  }
}

// Sample points and right pseudo-inverse of Y^l on them, per order.
struct WignerFit {
  Eigen::Matrix3Xd points;
  Eigen::MatrixXd pinv;  // n x (2l+1)
};

const WignerFit& wigner_fit(int l) {
  static std::array<WignerFit, kMaxSphOrder + 1> fits;
  static std::once_flag once;
  std::call_once(once, [] {
    for (int order = 0; order <= kMaxSphOrder; ++order) {
      const int g = 2 * order + 1;
      const int n = 3 * g + 16;
      const SphereGrid grid = sphere_grid(n);
      WignerFit fit;
      fit.points.resize(3, n);
      Eigen::MatrixXd y(g, n);
      for (int k = 0; k < n; ++k) {
        fit.points.col(k) = grid.points[k];
        y.col(k) = eval_sph(order, grid.points[k]);
      }
      fit.pinv = y.completeOrthogonalDecomposition().pseudoInverse();
      fits[order] = std::move(fit);
    }
  });
  return fits[l];
}

}  // namespace

Eigen::VectorXd eval_sph(int l, const Vector3d& r) {
  check_order(l);
  if (!r.allFinite()) throw NonFiniteError("eval_sph: non-finite input");
  return eval_sph_unchecked<double>(l, r.x(), r.y(), r.z());
}

template <typename Scalar>
Matrix<Scalar> eval_sph_rows(int l, const Matrix<Scalar>& points) {
  check_order(l);
  if (points.cols() != 3) throw ShapeError("eval_sph_rows expects N x 3 points");
  if (!points.allFinite()) throw NonFiniteError("eval_sph_rows: non-finite input");
  Matrix<Scalar> out(points.rows(), 2 * l + 1);
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    const Eigen::VectorXd y = eval_sph_unchecked<double>(l, double(points(i, 0)),
                                                         double(points(i, 1)), double(points(i, 2)));
    out.row(i) = y.transpose().cast<Scalar>();
  }
  return out;
}

template Matrix<float> eval_sph_rows<float>(int, const Matrix<float>&);
template Matrix<double> eval_sph_rows<double>(int, const Matrix<double>&);

Eigen::MatrixXd sph_jacobian(int l, const Vector3d& r) {
  check_order(l);
  using Dual = Eigen::AutoDiffScalar<Eigen::Vector3d>;
  const Dual x(r.x(), 3, 0), y(r.y(), 3, 1), z(r.z(), 3, 2);
  const auto y_dual = eval_sph_unchecked<Dual>(l, x, y, z);
  Eigen::MatrixXd jac(2 * l + 1, 3);
  for (int i = 0; i < 2 * l + 1; ++i) {
    if (y_dual(i).derivatives().size() == 3) {
      jac.row(i) = y_dual(i).derivatives().transpose();
    } else {
      jac.row(i).setZero();
    }
  }
  return jac;
}

Eigen::MatrixXd wigner_d_raw(int l, const Matrix3d& m) {
  check_order(l);
  const WignerFit& fit = wigner_fit(l);
  const Eigen::Index n = fit.points.cols();
  Eigen::MatrixXd y(2 * l + 1, n);
  for (Eigen::Index k = 0; k < n; ++k) {
    const Vector3d p = m * fit.points.col(k);
    y.col(k) = eval_sph_unchecked<double>(l, p.x(), p.y(), p.z());
  }
  return y * fit.pinv;
}

Matrix3d wigner_d_raw_backward(int l, const Matrix3d& m, const Eigen::MatrixXd& grad_d) {
  check_order(l);
  const WignerFit& fit = wigner_fit(l);
  const Eigen::MatrixXd grad_y = grad_d * fit.pinv.transpose();  // (2l+1) x n
  Matrix3d grad_m = Matrix3d::Zero();
  for (Eigen::Index k = 0; k < fit.points.cols(); ++k) {
    const Vector3d p = m * fit.points.col(k);
    const Vector3d grad_p = sph_jacobian(l, p).transpose() * grad_y.col(k);
    grad_m += grad_p * fit.points.col(k).transpose();
  }
  return grad_m;
}

Eigen::MatrixXd wigner_d(int l, const Rotation& rot) {
  if (l == 0) return Eigen::MatrixXd::Identity(1, 1);
  return wigner_d_raw(l, rot.matrix());
}

WignerD WignerD::of(const Rotation& rot, const std::vector<int>& orders) {
  WignerD d;
  d.orders = orders;
  d.blocks.reserve(orders.size());
  for (int l : orders) d.blocks.push_back(wigner_d(l, rot));
  return d;
}

const Eigen::MatrixXd& WignerD::block(int l) const {
  for (std::size_t i = 0; i < orders.size(); ++i) {
    if (orders[i] == l) return blocks[i];
  }
  throw std::out_of_range("WignerD has no block for order " + std::to_string(l));
}

Rotation random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::Quaterniond q;
  double norm = 0.0;
  do {
    q = Eigen::Quaterniond(normal(rng), normal(rng), normal(rng), normal(rng));
    norm = q.norm();
  } while (norm < 1e-8);
  q.coeffs() /= norm;
  return Rotation(q.toRotationMatrix(), 1e-12);
}

Rotation random_rotation(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return random_rotation(rng);
}

SphereGrid sphere_grid(int n) {
  if (n < 16) throw std::invalid_argument("sphere_grid needs n >= 16");
  SphereGrid grid;
  grid.points.reserve(n);
  grid.weights.assign(n, 4.0 * kPi / n);
  const double golden = kPi * (3.0 - std::sqrt(5.0));
  for (int i = 0; i < n; ++i) {
    const double z = 1.0 - (2.0 * i + 1.0) / n;
    const double rho = std::sqrt(std::max(0.0, 1.0 - z * z));
    const double phi = golden * i;
    Vector3d p(rho * std::cos(phi), rho * std::sin(phi), z);
    grid.points.push_back(p.normalized());
  }
  return grid;
}

}  // namespace epio
