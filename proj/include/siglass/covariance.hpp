#pragma once

// Noise covariance in scalar, diagonal or dense form, and the line
// parametrization x(z) = a + b*z along a test direction.

#include <cmath>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "siglass/error.hpp"

namespace siglass {

class Covariance {
 public:
  static Covariance scalar(double variance) {
    if (!(variance > 0.0) || !std::isfinite(variance))
      throw Error(ErrorKind::SingularCovariance, "variance must be positive and finite");
    Covariance c;
    c.form_ = Scalar{variance};
    return c;
  }

  static Covariance diagonal(std::vector<double> d) {
    if (d.empty()) throw Error(ErrorKind::SingularCovariance, "empty diagonal covariance");
    for (std::size_t i = 0; i < d.size(); ++i)
      if (!(d[i] > 0.0) || !std::isfinite(d[i]))
        throw Error(ErrorKind::SingularCovariance, "diagonal entry " + std::to_string(i) + " is not positive");
    Covariance c;
    c.form_ = Diagonal{std::move(d)};
    return c;
  }

  static Covariance full(Eigen::MatrixXd m) {
    if (m.rows() == 0 || m.rows() != m.cols())
      throw Error(ErrorKind::SingularCovariance, "covariance matrix must be square and nonempty");
    if (!m.allFinite()) throw Error(ErrorKind::SingularCovariance, "covariance matrix has non-finite entries");
    const double scale = m.cwiseAbs().maxCoeff();
    if (!((m - m.transpose()).cwiseAbs().maxCoeff() <= 1e-12 * scale))
      throw Error(ErrorKind::SingularCovariance, "covariance matrix is not symmetric");
    Eigen::LLT<Eigen::MatrixXd> llt(m);
    if (llt.info() != Eigen::Success)
      throw Error(ErrorKind::SingularCovariance, "covariance matrix is not positive definite");
    Covariance c;
    c.form_ = Full{std::move(m)};
    return c;
  }

  /// Dimension, or 0 for the scalar form (which fits any dimension).
  std::size_t dim() const {
    if (auto* d = std::get_if<Diagonal>(&form_)) return d->d.size();
    if (auto* f = std::get_if<Full>(&form_)) return static_cast<std::size_t>(f->m.rows());
    return 0;
  }

  bool is_scalar() const { return std::holds_alternative<Scalar>(form_); }
  const char* form_name() const {
    return std::visit([](const auto& f) { return f.name; }, form_);
  }

  /// Sigma * v.
  std::vector<double> apply(const std::vector<double>& v) const {
    check_dim(v.size());
    std::vector<double> out(v.size());
    if (auto* s = std::get_if<Scalar>(&form_)) {
      for (std::size_t i = 0; i < v.size(); ++i) out[i] = s->var * v[i];
    } else if (auto* d = std::get_if<Diagonal>(&form_)) {
      for (std::size_t i = 0; i < v.size(); ++i) out[i] = d->d[i] * v[i];
    } else {
      const auto& m = std::get<Full>(form_).m;
      Eigen::Map<const Eigen::VectorXd> x(v.data(), static_cast<Eigen::Index>(v.size()));
      Eigen::Map<Eigen::VectorXd>(out.data(), static_cast<Eigen::Index>(out.size())) = m * x;
    }
    return out;
  }

  /// Dense copy of the matrix for dimension n.
  Eigen::MatrixXd dense(std::size_t n) const {
    check_dim(n);
    const auto N = static_cast<Eigen::Index>(n);
    if (auto* s = std::get_if<Scalar>(&form_)) return Eigen::MatrixXd::Identity(N, N) * s->var;
    if (auto* d = std::get_if<Diagonal>(&form_))
      return Eigen::Map<const Eigen::VectorXd>(d->d.data(), N).asDiagonal();
    return std::get<Full>(form_).m;
  }

  /// Block-diagonal diag(test, ref) over 2n coordinates.
  static Covariance block_diagonal(const Covariance& test, const Covariance& ref, std::size_t n) {
    test.check_dim(n);
    ref.check_dim(n);
    auto* st = std::get_if<Scalar>(&test.form_);
    auto* sr = std::get_if<Scalar>(&ref.form_);
    if (st && sr && st->var == sr->var) return scalar(st->var);
    if (!std::holds_alternative<Full>(test.form_) && !std::holds_alternative<Full>(ref.form_)) {
      std::vector<double> d(2 * n);
      for (std::size_t i = 0; i < n; ++i) {
        d[i] = test.diag_at(i);
        d[n + i] = ref.diag_at(i);
      }
      return diagonal(std::move(d));
    }
    const auto N = static_cast<Eigen::Index>(n);
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(2 * N, 2 * N);
    m.topLeftCorner(N, N) = test.dense(n);
    m.bottomRightCorner(N, N) = ref.dense(n);
    return full(std::move(m));
  }

 private:
  struct Scalar {
    double var;
    static constexpr const char* name = "scalar";
  };
  struct Diagonal {
    std::vector<double> d;
    static constexpr const char* name = "diagonal";
  };
  struct Full {
    Eigen::MatrixXd m;
    static constexpr const char* name = "full";
  };

  double diag_at(std::size_t i) const {
    if (auto* s = std::get_if<Scalar>(&form_)) return s->var;
    return std::get<Diagonal>(form_).d[i];
  }

  void check_dim(std::size_t n) const {
    const auto d = dim();
    if (d != 0 && d != n)
      throw Error(ErrorKind::ShapeMismatch,
                  "covariance has dimension " + std::to_string(d) + ", data has " + std::to_string(n));
  }

  std::variant<Scalar, Diagonal, Full> form_ = Scalar{1.0};
};

struct LineParams {
  std::vector<double> a;
  std::vector<double> b;
  double z_obs = 0.0;
  double sigma_eta = 0.0;
};

/// z_obs = eta.x, b = Sigma eta / (eta' Sigma eta), a = x - b z_obs.
inline LineParams line_params(const std::vector<double>& x, const std::vector<double>& eta, const Covariance& cov) {
  if (x.size() != eta.size())
    throw Error(ErrorKind::ShapeMismatch,
                "x has " + std::to_string(x.size()) + " entries, eta has " + std::to_string(eta.size()));
  const auto s_eta = cov.apply(eta);
  double var = 0.0, z = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    var += eta[i] * s_eta[i];
    z += eta[i] * x[i];
  }
  if (!(var > 0.0)) throw Error(ErrorKind::SingularCovariance, "eta' Sigma eta is not positive");
  LineParams p;
  p.z_obs = z;
  p.sigma_eta = std::sqrt(var);
  p.b.resize(x.size());
  p.a.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    p.b[i] = s_eta[i] / var;
    p.a[i] = x[i] - p.b[i] * z;
  }
  return p;
}

}  // namespace siglass
