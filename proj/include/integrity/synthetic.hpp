#pragma once

// Synthetic environment: per prompt, the reference and suspect models emit
// features from known Gaussians. Ground truth (true KL per prompt) is
// available, which makes the whole pipeline testable without real models.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "json.hpp"

#include "integrity/environment.hpp"
#include "integrity/error.hpp"
#include "integrity/feature_matrix.hpp"
#include "integrity/gaussian.hpp"
#include "integrity/random.hpp"

namespace integrity {

struct SyntheticPrompt {
  ActionId id;
  std::string text;
  Eigen::VectorXd reference_mean;
  Eigen::MatrixXd reference_cov;
  Eigen::VectorXd suspect_mean;
  Eigen::MatrixXd suspect_cov;
};

enum class SyntheticRole { Reference, Suspect };

class SyntheticSpec {
 public:
  static constexpr int kSchemaVersion = 1;

  SyntheticSpec() = default;

  SyntheticSpec(std::size_t dim, std::vector<SyntheticPrompt> prompts, double suspect_noise_sigma = 0.0)
      : dim_(dim), noise_sigma_(suspect_noise_sigma), prompts_(std::move(prompts)) {
    validate();
  }

  std::size_t dim() const { return dim_; }
  double suspect_noise_sigma() const { return noise_sigma_; }
  const std::vector<SyntheticPrompt>& prompts() const { return prompts_; }

  const SyntheticPrompt& prompt(ActionId id) const { return prompts_[index_of(id)]; }

  bool contains(ActionId id) const { return index_.contains(id); }

  const Eigen::MatrixXd& factor(ActionId id, SyntheticRole role) const {
    const auto i = index_of(id);
    return role == SyntheticRole::Reference ? reference_factors_[i] : suspect_factors_[i];
  }

  /// Copy with every suspect mean moved to reference + magnitude * (suspect - reference).
  SyntheticSpec with_scaled_shift(double magnitude) const {
    auto prompts = prompts_;
    for (auto& p : prompts) p.suspect_mean = p.reference_mean + magnitude * (p.suspect_mean - p.reference_mean);
    return SyntheticSpec(dim_, std::move(prompts), noise_sigma_);
  }

  /// Copy whose suspect model is identical to the reference (no violation, no noise).
  SyntheticSpec intact() const {
    auto prompts = prompts_;
    for (auto& p : prompts) {
      p.suspect_mean = p.reference_mean;
      p.suspect_cov = p.reference_cov;
    }
    return SyntheticSpec(dim_, std::move(prompts), 0.0);
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["schema_version"] = kSchemaVersion;
    j["dim"] = dim_;
    j["suspect_noise_sigma"] = noise_sigma_;
    auto& arr = j["prompts"] = nlohmann::ordered_json::array();
    for (const auto& p : prompts_) {
      nlohmann::ordered_json e;
      e["id"] = p.id.value;
      e["text"] = p.text;
      e["reference_mean"] = vector_to_json(p.reference_mean);
      e["reference_cov"] = matrix_to_json(p.reference_cov);
      e["suspect_mean"] = vector_to_json(p.suspect_mean);
      e["suspect_cov"] = matrix_to_json(p.suspect_cov);
      arr.push_back(std::move(e));
    }
    return j;
  }

  static SyntheticSpec from_json(const nlohmann::json& j) {
    try {
      if (j.at("schema_version").get<int>() != kSchemaVersion)
        throw Error(ErrorCode::VersionUnsupported, "synthetic spec schema_version must be 1");
      const auto dim = j.at("dim").get<std::size_t>();
      std::vector<SyntheticPrompt> prompts;
      for (const auto& e : j.at("prompts")) {
        SyntheticPrompt p;
        p.id = ActionId{e.at("id").get<std::uint64_t>()};
        p.text = e.value("text", std::string{});
        p.reference_mean = vector_from_json(e.at("reference_mean"));
        p.reference_cov = matrix_from_json(e.at("reference_cov"));
        p.suspect_mean = vector_from_json(e.at("suspect_mean"));
        p.suspect_cov = matrix_from_json(e.at("suspect_cov"));
        prompts.push_back(std::move(p));
      }
      return SyntheticSpec(dim, std::move(prompts), j.value("suspect_noise_sigma", 0.0));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::InvalidArgument, std::string("malformed synthetic spec: ") + e.what());
    }
  }

  static SyntheticSpec load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::Io, "cannot open synthetic spec " + path.string());
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::InvalidArgument, path.string() + ": " + e.what());
    }
    return from_json(j);
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
    out << to_json().dump(2) << '\n';
  }

 private:
  static nlohmann::ordered_json vector_to_json(const Eigen::VectorXd& v) {
    return std::vector<double>(v.data(), v.data() + v.size());
  }
  static nlohmann::ordered_json matrix_to_json(const Eigen::MatrixXd& m) {
    auto out = nlohmann::ordered_json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      const Eigen::VectorXd row = m.row(i).transpose();
      out.push_back(vector_to_json(row));
    }
    return out;
  }
  static Eigen::VectorXd vector_from_json(const nlohmann::json& j) {
    const auto v = j.get<std::vector<double>>();
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
  }
  static Eigen::MatrixXd matrix_from_json(const nlohmann::json& j) {
    const auto rows = j.get<std::vector<std::vector<double>>>();
    Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), rows.empty() ? 0 : static_cast<Eigen::Index>(rows[0].size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].size() != static_cast<std::size_t>(m.cols()))
        throw Error(ErrorCode::DimensionMismatch, "ragged covariance matrix");
      for (std::size_t k = 0; k < rows[i].size(); ++k)
        m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = rows[i][k];
    }
    return m;
  }

  std::size_t index_of(ActionId id) const {
    const auto it = index_.find(id);
    if (it == index_.end()) throw Error(ErrorCode::UnknownPrompt, "prompt " + to_string(id) + " not in synthetic spec");
    return it->second;
  }

  static Eigen::MatrixXd spd_factor(const Eigen::MatrixXd& cov, const std::string& what) {
    if (((cov - cov.transpose()).array().abs() > 1e-12).any())
      throw Error(ErrorCode::InvalidArgument, what + " is not symmetric");
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    if (llt.info() != Eigen::Success) throw Error(ErrorCode::InvalidArgument, what + " is not positive definite");
    return llt.matrixL();
  }

  void validate() {
    if (dim_ == 0) throw Error(ErrorCode::InvalidArgument, "synthetic spec needs dim >= 1");
    if (!(noise_sigma_ >= 0.0) || !std::isfinite(noise_sigma_))
      throw Error(ErrorCode::InvalidArgument, "suspect_noise_sigma must be finite and >= 0");
    const auto d = static_cast<Eigen::Index>(dim_);
    for (std::size_t i = 0; i < prompts_.size(); ++i) {
      const auto& p = prompts_[i];
      const std::string tag = "prompt " + to_string(p.id);
      if (!index_.emplace(p.id, i).second) throw Error(ErrorCode::InvalidArgument, "duplicate " + tag);
      if (p.reference_mean.size() != d || p.suspect_mean.size() != d || p.reference_cov.rows() != d ||
          p.reference_cov.cols() != d || p.suspect_cov.rows() != d || p.suspect_cov.cols() != d)
        throw Error(ErrorCode::DimensionMismatch, tag + " parameters do not match dim " + std::to_string(dim_));
      if (!p.reference_mean.allFinite() || !p.suspect_mean.allFinite() || !p.reference_cov.allFinite() ||
          !p.suspect_cov.allFinite())
        throw Error(ErrorCode::NonFiniteInput, tag + " has non-finite parameters");
      reference_factors_.push_back(spd_factor(p.reference_cov, tag + " reference_cov"));
      suspect_factors_.push_back(spd_factor(p.suspect_cov, tag + " suspect_cov"));
    }
  }

  std::size_t dim_ = 0;
  double noise_sigma_ = 0.0;
  std::vector<SyntheticPrompt> prompts_;
  std::map<ActionId, std::size_t> index_;
  std::vector<Eigen::MatrixXd> reference_factors_;
  std::vector<Eigen::MatrixXd> suspect_factors_;
};

/// `count` i.i.d. draws from the role's Gaussian for one prompt.
inline FeatureMatrix synthetic_sample(const SyntheticSpec& spec, SyntheticRole role, ActionId id, std::size_t count,
                                      std::uint64_t stream_seed) {
  if (count == 0) throw Error(ErrorCode::InvalidArgument, "sample count must be >= 1");
  const auto& p = spec.prompt(id);
  const auto& factor = spec.factor(id, role);
  const Eigen::VectorXd& mean = role == SyntheticRole::Reference ? p.reference_mean : p.suspect_mean;
  const auto d = static_cast<Eigen::Index>(spec.dim());
  const double noise = role == SyntheticRole::Suspect ? spec.suspect_noise_sigma() : 0.0;

  Rng rng(stream_seed);
  RowMatrix out(static_cast<Eigen::Index>(count), d);
  Eigen::VectorXd z(d);
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    for (Eigen::Index k = 0; k < d; ++k) z[k] = rng.normal();
    Eigen::VectorXd x = mean + factor.triangularView<Eigen::Lower>() * z;
    if (noise > 0.0)
      for (Eigen::Index k = 0; k < d; ++k) x[k] += noise * rng.normal();
    out.row(i) = x.transpose();
  }
  return FeatureMatrix(std::move(out));
}

/// Ground-truth D_KL(reference || suspect) for one prompt. Additive suspect
/// noise is folded into the suspect covariance.
inline double true_kl(const SyntheticSpec& spec, ActionId id) {
  const auto& p = spec.prompt(id);
  Eigen::MatrixXd suspect_cov = p.suspect_cov;
  const double noise = spec.suspect_noise_sigma();
  suspect_cov.diagonal().array() += noise * noise;
  return kl_divergence(GaussianEstimate::from_moments(p.reference_mean, p.reference_cov),
                       GaussianEstimate::from_moments(p.suspect_mean, suspect_cov));
}

class SyntheticSource final : public FeatureSource {
 public:
  SyntheticSource(std::shared_ptr<const SyntheticSpec> spec, SyntheticRole role)
      : spec_(std::move(spec)), role_(role) {}

  FeatureMatrix sample(const Action& action, std::size_t count, std::uint64_t stream_seed) override {
    return synthetic_sample(*spec_, role_, action.id, count, stream_seed);
  }

 private:
  std::shared_ptr<const SyntheticSpec> spec_;
  SyntheticRole role_;
};

inline Environment make_synthetic_environment(std::shared_ptr<const SyntheticSpec> spec) {
  auto reference = std::make_shared<SyntheticSource>(spec, SyntheticRole::Reference);
  return Environment{reference, reference, std::make_shared<SyntheticSource>(spec, SyntheticRole::Suspect)};
}

/// Parameters for generating a synthetic spec: one prompt per shift.
struct SyntheticParams {
  std::size_t dim = 8;
  /// Per-prompt suspect mean shift, in reference standard deviations along every
  /// coordinate (uncorrelated case: true KL = dim * shift^2 / 2).
  std::vector<double> shifts{1.0, 0.3, 0.3, 0.3, 0.3};
  /// Per-coordinate variances; one value broadcasts.
  std::vector<double> variances{1.0};
  /// Equicorrelation coefficient of the reference covariance.
  double correlation = 0.0;
  double suspect_noise_sigma = 0.0;
  std::uint64_t seed = 1;
};

inline SyntheticSpec make_synthetic_spec(const SyntheticParams& params) {
  const auto d = static_cast<Eigen::Index>(params.dim);
  if (d == 0) throw Error(ErrorCode::InvalidArgument, "dim must be >= 1");
  if (params.shifts.empty()) throw Error(ErrorCode::InvalidArgument, "need at least one prompt shift");
  Eigen::VectorXd variances(d);
  if (params.variances.size() == 1) {
    variances.setConstant(params.variances[0]);
  } else if (params.variances.size() == params.dim) {
    for (Eigen::Index k = 0; k < d; ++k) variances[k] = params.variances[static_cast<std::size_t>(k)];
  } else {
    throw Error(ErrorCode::DimensionMismatch, "variances must have 1 or dim entries");
  }
  if ((variances.array() <= 0.0).any() || !variances.allFinite())
    throw Error(ErrorCode::InvalidArgument, "covariance is not positive definite: variances must be > 0");

  Eigen::MatrixXd corr = Eigen::MatrixXd::Constant(d, d, params.correlation);
  corr.diagonal().setOnes();
  const Eigen::VectorXd sd = variances.array().sqrt();
  const Eigen::MatrixXd cov = sd.asDiagonal() * corr * sd.asDiagonal();
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success)
    throw Error(ErrorCode::InvalidArgument, "covariance is not positive definite (correlation " +
                                                std::to_string(params.correlation) + ")");

  Rng rng(params.seed);
  std::vector<SyntheticPrompt> prompts;
  for (std::size_t i = 0; i < params.shifts.size(); ++i) {
    SyntheticPrompt p;
    p.id = ActionId{i + 1};
    p.text = "synthetic prompt " + std::to_string(i + 1);
    p.reference_mean.resize(d);
    for (Eigen::Index k = 0; k < d; ++k) p.reference_mean[k] = rng.normal();
    p.reference_cov = cov;
    p.suspect_mean = p.reference_mean + params.shifts[i] * sd;
    p.suspect_cov = cov;
    prompts.push_back(std::move(p));
  }
  return SyntheticSpec(params.dim, std::move(prompts), params.suspect_noise_sigma);
}

}  // namespace integrity
