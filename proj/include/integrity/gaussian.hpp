#pragma once

// Gaussian fits to feature batches, the closed-form KL divergence between two
// multivariate normals, and the relative-KL feedback built on it.

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "integrity/error.hpp"
#include "integrity/feature_matrix.hpp"

namespace integrity {

enum class CovarianceMode { FullRidge, Diagonal, Shrinkage };

constexpr std::string_view to_string(CovarianceMode mode) {
  switch (mode) {
    case CovarianceMode::FullRidge: return "full_ridge";
    case CovarianceMode::Diagonal: return "diagonal";
    case CovarianceMode::Shrinkage: return "shrinkage";
  }
  return "?";
}

inline CovarianceMode parse_covariance_mode(std::string_view text) {
  if (text == "full_ridge" || text == "full") return CovarianceMode::FullRidge;
  if (text == "diagonal" || text == "diag") return CovarianceMode::Diagonal;
  if (text == "shrinkage") return CovarianceMode::Shrinkage;
  throw Error(ErrorCode::InvalidArgument, "unknown covariance mode '" + std::string(text) + "'");
}

constexpr double kDefaultRidge = 1e-6;
constexpr double kAbsoluteCovarianceFloor = 1e-12;
constexpr double kKlClampTolerance = 1e-9;
constexpr double kDefaultDenominatorFloor = 1e-8;

/// Too few samples for a full covariance: fall back to the diagonal fit.
constexpr CovarianceMode effective_mode(CovarianceMode requested, std::size_t samples, std::size_t dim) {
  return samples < dim + 2 ? CovarianceMode::Diagonal : requested;
}

/// Mean and covariance of a multivariate normal. Diagonal estimates keep only
/// the variances so that 2048-D fits stay cheap.
class GaussianEstimate {
 public:
  /// Known parameters rather than a fit; sample_count is 0.
  static GaussianEstimate from_moments(Eigen::VectorXd mean, Eigen::MatrixXd covariance) {
    if (mean.size() == 0 || covariance.rows() != mean.size() || covariance.cols() != mean.size())
      throw Error(ErrorCode::DimensionMismatch, "mean and covariance shapes disagree");
    if (!mean.allFinite() || !covariance.allFinite())
      throw Error(ErrorCode::NonFiniteInput, "non-finite Gaussian parameters");
    if (((covariance - covariance.transpose()).array().abs() > 1e-12).any())
      throw Error(ErrorCode::InvalidArgument, "covariance is not symmetric");
    GaussianEstimate g;
    g.mean_ = std::move(mean);
    g.full_ = std::move(covariance);
    g.mode_ = CovarianceMode::FullRidge;
    g.factorize();
    return g;
  }

  static GaussianEstimate from_diagonal(Eigen::VectorXd mean, Eigen::VectorXd variances) {
    if (mean.size() == 0 || variances.size() != mean.size())
      throw Error(ErrorCode::DimensionMismatch, "mean and variance shapes disagree");
    if (!mean.allFinite() || !variances.allFinite())
      throw Error(ErrorCode::NonFiniteInput, "non-finite Gaussian parameters");
    GaussianEstimate g;
    g.mean_ = std::move(mean);
    g.diag_ = std::move(variances);
    g.mode_ = CovarianceMode::Diagonal;
    g.factorize();
    return g;
  }

  std::size_t dim() const { return static_cast<std::size_t>(mean_.size()); }
  const Eigen::VectorXd& mean() const { return mean_; }
  std::size_t sample_count() const { return sample_count_; }
  CovarianceMode covariance_mode() const { return mode_; }
  double ridge() const { return ridge_; }
  bool is_diagonal() const { return mode_ == CovarianceMode::Diagonal; }

  /// Dense covariance; materialized on demand for diagonal estimates.
  Eigen::MatrixXd covariance() const {
    if (is_diagonal()) return diag_.asDiagonal();
    return full_;
  }

  const Eigen::VectorXd& variances() const { return diag_; }
  const Eigen::LLT<Eigen::MatrixXd>& cholesky() const { return llt_; }
  double log_det() const { return log_det_; }

 private:
  friend GaussianEstimate fit_gaussian(const FeatureMatrix&, CovarianceMode, double);

  GaussianEstimate() = default;

  void factorize() {
    if (is_diagonal()) {
      if ((diag_.array() <= 0.0).any())
        throw Error(ErrorCode::SingularCovariance, "diagonal covariance has a non-positive entry");
      log_det_ = diag_.array().log().sum();
      return;
    }
    llt_.compute(full_);
    if (llt_.info() != Eigen::Success)
      throw Error(ErrorCode::SingularCovariance, "covariance is not positive definite");
    const auto& l = llt_.matrixLLT();
    log_det_ = 2.0 * l.diagonal().array().log().sum();
    if (!std::isfinite(log_det_))
      throw Error(ErrorCode::SingularCovariance, "covariance determinant underflows");
  }

  Eigen::VectorXd mean_;
  Eigen::MatrixXd full_;
  Eigen::VectorXd diag_;
  Eigen::LLT<Eigen::MatrixXd> llt_;
  double log_det_ = 0.0;
  std::size_t sample_count_ = 0;
  CovarianceMode mode_ = CovarianceMode::FullRidge;
  double ridge_ = 0.0;
};

namespace detail {

// Ledoit-Wolf intensity for shrinking toward (tr(S)/d) I, computed on the
// biased covariance as in the original estimator.
inline double ledoit_wolf_intensity(const Eigen::MatrixXd& centered) {
  const double n = static_cast<double>(centered.rows());
  const double d = static_cast<double>(centered.cols());
  const Eigen::MatrixXd s = centered.transpose() * centered / n;
  const double mu = s.trace() / d;
  Eigen::MatrixXd target_gap = s;
  target_gap.diagonal().array() -= mu;
  const double dispersion = target_gap.squaredNorm() / d;
  if (dispersion <= 0.0) return 1.0;
  double spread = 0.0;
  for (Eigen::Index k = 0; k < centered.rows(); ++k) {
    const Eigen::VectorXd x = centered.row(k).transpose();
    spread += (x * x.transpose() - s).squaredNorm() / d;
  }
  spread /= n * n;
  return std::min(spread, dispersion) / dispersion;
}

}  // namespace detail

/// Sample mean and unbiased covariance under `mode`, plus ridge * tr(S)/d * I
/// (or an absolute 1e-12 floor when S vanishes).
inline GaussianEstimate fit_gaussian(const FeatureMatrix& samples, CovarianceMode mode,
                                     double ridge = kDefaultRidge) {
  if (samples.rows() < 2)
    throw Error(ErrorCode::TooFewSamples, "fit needs at least 2 samples, got " + std::to_string(samples.rows()));
  if (!(ridge >= 0.0) || !std::isfinite(ridge))
    throw Error(ErrorCode::InvalidArgument, "ridge must be a finite non-negative number");
  const RowMatrix& x = samples.data();
  if (!x.allFinite()) throw Error(ErrorCode::NonFiniteInput, "samples hold NaN or Inf");

  const double n = static_cast<double>(x.rows());
  const double d = static_cast<double>(x.cols());

  GaussianEstimate g;
  g.mean_ = x.colwise().mean().transpose();
  const Eigen::MatrixXd centered = x.rowwise() - g.mean_.transpose();
  g.sample_count_ = samples.rows();
  g.mode_ = mode;
  g.ridge_ = ridge;

  if (mode == CovarianceMode::Diagonal) {
    g.diag_ = centered.array().square().colwise().sum().transpose() / (n - 1.0);
    const double trace = g.diag_.sum();
    g.diag_.array() += trace > 0.0 ? ridge * trace / d : kAbsoluteCovarianceFloor;
  } else {
    Eigen::MatrixXd s = centered.transpose() * centered / (n - 1.0);
    if (mode == CovarianceMode::Shrinkage) {
      const double lambda = detail::ledoit_wolf_intensity(centered);
      const double mu = s.trace() / d;
      s *= (1.0 - lambda);
      s.diagonal().array() += lambda * mu;
    }
    const double trace = s.trace();
    s.diagonal().array() += trace > 0.0 ? ridge * trace / d : kAbsoluteCovarianceFloor;
    g.full_ = 0.5 * (s + s.transpose());
  }
  g.factorize();
  return g;
}

/// Closed-form D_KL(p || q) between two multivariate normals.
inline double kl_divergence(const GaussianEstimate& p, const GaussianEstimate& q) {
  if (p.dim() != q.dim())
    throw Error(ErrorCode::DimensionMismatch,
                "KL between dims " + std::to_string(p.dim()) + " and " + std::to_string(q.dim()));
  const double d = static_cast<double>(p.dim());
  const Eigen::VectorXd gap = q.mean() - p.mean();
  double value = 0.0;

  if (p.is_diagonal() && q.is_diagonal()) {
    // sum over coordinates of (r - 1 - ln r) + gap^2 / var_q, with r = var_p / var_q
    const Eigen::ArrayXd ratio = p.variances().array() / q.variances().array();
    value = 0.5 * ((ratio - 1.0 - ratio.log()).sum() + (gap.array().square() / q.variances().array()).sum());
  } else {
    double trace_term = 0.0;
    double mahalanobis = 0.0;
    if (q.is_diagonal()) {
      const Eigen::MatrixXd sp = p.covariance();
      trace_term = (sp.diagonal().array() / q.variances().array()).sum();
      mahalanobis = (gap.array().square() / q.variances().array()).sum();
    } else {
      const auto lq = q.cholesky().matrixL();
      Eigen::MatrixXd whitened;
      if (p.is_diagonal()) {
        whitened = lq.solve(Eigen::MatrixXd(p.variances().array().sqrt().matrix().asDiagonal()));
      } else {
        whitened = lq.solve(Eigen::MatrixXd(p.cholesky().matrixL()));
      }
      trace_term = whitened.squaredNorm();
      mahalanobis = lq.solve(gap).squaredNorm();
    }
    value = 0.5 * (trace_term + mahalanobis - d + q.log_det() - p.log_det());
  }

  if (!std::isfinite(value)) throw Error(ErrorCode::SingularCovariance, "KL divergence is not finite");
  if (value < 0.0) {
    if (value < -kKlClampTolerance)
      throw Error(ErrorCode::SingularCovariance, "KL divergence came out negative (" + std::to_string(value) + ")");
    value = 0.0;
  }
  return value;
}

struct RelativeKl {
  double beta = 0.0;
  double numerator = 0.0;
  double denominator = 0.0;
};

/// beta = divergence / max(self_divergence, floor) - 1.
inline RelativeKl relative_kl_from(double divergence, double self_divergence,
                                   double denom_floor = kDefaultDenominatorFloor) {
  if (!(denom_floor > 0.0)) throw Error(ErrorCode::InvalidArgument, "denominator floor must be positive");
  RelativeKl out;
  out.numerator = divergence;
  out.denominator = std::max(self_divergence, denom_floor);
  out.beta = out.numerator / out.denominator - 1.0;
  return out;
}

/// Relative KL of the suspect fit q against two independent reference fits p, p_prime.
inline RelativeKl relative_kl(const GaussianEstimate& p, const GaussianEstimate& p_prime, const GaussianEstimate& q,
                              double denom_floor = kDefaultDenominatorFloor) {
  if (p.dim() != p_prime.dim() || p.dim() != q.dim())
    throw Error(ErrorCode::DimensionMismatch, "relative KL over estimates of different dimension");
  return relative_kl_from(kl_divergence(p, q), kl_divergence(p, p_prime), denom_floor);
}

}  // namespace integrity
