#pragma once

// Shared fixtures: scratch directories, desk-scale synthetic specs and
// independent numerical oracles.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <string>

#include <unistd.h>

#include <Eigen/Dense>

#include "integrity/synthetic.hpp"

namespace testing_support {

namespace fs = std::filesystem;

class ScratchDir {
 public:
  explicit ScratchDir(const std::string& tag) {
    static int counter = 0;
    path_ = fs::temp_directory_path() /
            ("integrity-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

inline std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Dimension at which the relative score separates intact from modified
// models with the default n = 5 schedule.
inline constexpr std::size_t kDeskDim = 128;

inline integrity::SyntheticSpec desk_spec(std::vector<double> shifts, std::uint64_t seed = 1,
                                          std::size_t dim = kDeskDim) {
  integrity::SyntheticParams p;
  p.dim = dim;
  p.shifts = std::move(shifts);
  p.seed = seed;
  return integrity::make_synthetic_spec(p);
}

// Ten prompts, one of them (id 4) modified by `shift` standard deviations.
inline integrity::SyntheticSpec one_hot_spec(double shift, std::uint64_t seed = 1) {
  std::vector<double> shifts(10, 0.0);
  shifts[3] = shift;
  return desk_spec(shifts, seed);
}

// Log density of N(mean, cov) via LU, independent of the Cholesky path under test.
inline double log_density(const Eigen::VectorXd& x, const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov) {
  const Eigen::FullPivLU<Eigen::MatrixXd> lu(cov);
  const Eigen::VectorXd gap = x - mean;
  const double quad = gap.dot(lu.solve(gap));
  const double d = static_cast<double>(x.size());
  return -0.5 * (quad + std::log(lu.determinant()) + d * std::log(2.0 * M_PI));
}

// Monte Carlo estimate of E_p[log p(x) - log q(x)] with std::mt19937_64 draws.
inline double monte_carlo_kl(const Eigen::VectorXd& mp, const Eigen::MatrixXd& cp, const Eigen::VectorXd& mq,
                             const Eigen::MatrixXd& cq, std::size_t samples, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> z;
  const Eigen::MatrixXd l = cp.llt().matrixL();
  Eigen::VectorXd e(mp.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < samples; ++i) {
    for (Eigen::Index k = 0; k < e.size(); ++k) e[k] = z(gen);
    const Eigen::VectorXd x = mp + l * e;
    sum += log_density(x, mp, cp) - log_density(x, mq, cq);
  }
  return sum / static_cast<double>(samples);
}

// Composite Simpson rule on [a, b] with an even number of panels.
inline double simpson(const std::function<double(double)>& f, double a, double b, int panels = 20000) {
  if (panels % 2) ++panels;
  const double h = (b - a) / panels;
  double s = f(a) + f(b);
  for (int i = 1; i < panels; ++i) s += f(a + i * h) * (i % 2 ? 4.0 : 2.0);
  return s * h / 3.0;
}

inline double normal_density(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI); }

inline double t_density(double t, double df) {
  const double c = std::lgamma(0.5 * (df + 1.0)) - std::lgamma(0.5 * df) - 0.5 * std::log(df * M_PI);
  return std::exp(c - 0.5 * (df + 1.0) * std::log1p(t * t / df));
}

// Upper tail of Student's t by quadrature over [t, t + width].
inline double t_tail_oracle(double t, double df, double width = 400.0) {
  return simpson([df](double x) { return t_density(x, df); }, t, t + width, 400000);
}

inline double normal_cdf_oracle(double x) {
  // Φ(x) = 0.5 + ∫_0^x φ
  return 0.5 + simpson(normal_density, 0.0, x, 20000);
}

// Random SPD matrix with eigenvalues in [0.2, 2.2].
template <typename Gen>
Eigen::MatrixXd random_spd(Eigen::Index d, Gen& gen) {
  std::normal_distribution<double> z;
  std::uniform_real_distribution<double> u(0.2, 2.2);
  Eigen::MatrixXd a(d, d);
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = 0; j < d; ++j) a(i, j) = z(gen);
  const Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  const Eigen::MatrixXd q = qr.householderQ();
  Eigen::VectorXd ev(d);
  for (Eigen::Index i = 0; i < d; ++i) ev[i] = u(gen);
  Eigen::MatrixXd s = q * ev.asDiagonal() * q.transpose();
  return 0.5 * (s + s.transpose());
}

}  // namespace testing_support
