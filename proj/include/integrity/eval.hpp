#pragma once

// Repeated-trial evaluation on synthetic environments: AUC over intact vs.
// modified runs, false-positive rate, mean cost and magnitude sweeps.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numeric>
#include <sstream>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "integrity/error.hpp"
#include "integrity/random.hpp"
#include "integrity/synthetic.hpp"
#include "integrity/verifier.hpp"

namespace integrity {

/// Mann-Whitney AUC: share of (positive, negative) pairs ranked correctly, ties count half.
inline double compute_auc(std::span<const double> positives, std::span<const double> negatives) {
  if (positives.empty() || negatives.empty())
    throw Error(ErrorCode::EmptyScoreSet, "AUC needs at least one positive and one negative score");
  double wins = 0.0;
  for (double p : positives)
    for (double n : negatives) wins += p > n ? 1.0 : p == n ? 0.5 : 0.0;
  return wins / (static_cast<double>(positives.size()) * static_cast<double>(negatives.size()));
}

/// Spearman rank correlation with average ranks for ties.
inline double spearman_rho(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw Error(ErrorCode::InvalidArgument, "spearman needs paired samples");
  auto ranks = [](std::span<const double> v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(x);
  const auto ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

enum class TrialLabel { Positive, Negative };

struct TrialOutcome {
  TrialLabel label = TrialLabel::Positive;
  double score = 0.0;
  Verdict verdict = Verdict::Intact;
  QueryCost cost;
  std::uint64_t reported_cost = 0;
  std::uint64_t seed = 0;
  std::size_t index = 0;
};

struct TrialSummary {
  double auc = 0.5;
  /// Share of intact (negative) trials reported as violations.
  double fpr = 0.0;
  /// Share of modified (positive) trials reported as violations.
  double tpr = 0.0;
  double mean_cost_positive = 0.0;
  double mean_cost_negative = 0.0;
  std::vector<TrialOutcome> outcomes;
  std::optional<std::string> failure;
};

struct TrialOptions {
  std::size_t trials = 20;
  Method method = Method::PromptAutomaton;
  std::size_t threads = 1;
};

inline constexpr std::uint64_t kTrialTag = hash_label("trial");

/// Master seed of trial t; identical for both labels so runs are paired.
inline std::uint64_t trial_seed(std::uint64_t master, std::size_t t) { return derive_seed({master, kTrialTag, t}); }

inline PromptLibrary library_of(const SyntheticSpec& spec) {
  PromptLibrary lib;
  lib.source_note = "synthetic spec";
  for (const auto& p : spec.prompts()) lib.prompts.push_back({p.id, p.text});
  return lib;
}

/// `trials` seeded verifications against the modified spec (positives) and the
/// intact spec (negatives). Scores are the best d-hat of each report.
inline TrialSummary run_trials(const SyntheticSpec& intact, const SyntheticSpec& modified, const PromptLibrary& library,
                               const VerifierConfig& config, const TrialOptions& options) {
  if (options.trials < 2) throw Error(ErrorCode::InvalidArgument, "run_trials needs at least 2 trials");
  const auto intact_env = make_synthetic_environment(std::make_shared<const SyntheticSpec>(intact));
  const auto modified_env = make_synthetic_environment(std::make_shared<const SyntheticSpec>(modified));

  const std::size_t jobs = 2 * options.trials;
  std::vector<TrialOutcome> outcomes(jobs);
  std::vector<std::optional<std::string>> errors(jobs);
  auto run_one = [&](std::size_t job) {
    const std::size_t t = job / 2;
    const bool positive = job % 2 == 0;
    VerifierConfig c = config;
    c.automaton.master_seed = trial_seed(config.automaton.master_seed, t);
    c.automaton.threads = 1;
    TrialOutcome& o = outcomes[job];
    o.label = positive ? TrialLabel::Positive : TrialLabel::Negative;
    o.seed = c.automaton.master_seed;
    o.index = t;
    try {
      const auto report = run_verification(options.method, library, positive ? modified_env : intact_env, c);
      o.score = report.best_score;
      o.verdict = report.verdict;
      o.cost = report.total_cost;
      o.reported_cost = report.reported_cost();
    } catch (const Error& e) {
      if (e.code() != ErrorCode::EnvironmentFailure) throw;
      errors[job] = e.what();
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(options.threads, jobs));
  if (workers == 1) {
    for (std::size_t j = 0; j < jobs; ++j) run_one(j);
  } else {
    std::vector<std::exception_ptr> crashes(workers);
    {
      std::vector<std::jthread> pool;
      for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
          try {
            for (std::size_t j = w; j < jobs; j += workers) run_one(j);
          } catch (...) {
            crashes[w] = std::current_exception();
          }
        });
    }
    for (auto& c : crashes)
      if (c) std::rethrow_exception(c);
  }

  TrialSummary summary;
  std::vector<double> pos, neg;
  double cost_pos = 0.0, cost_neg = 0.0;
  std::size_t fp = 0, tp = 0;
  for (std::size_t j = 0; j < jobs; ++j) {
    if (errors[j]) {
      if (!summary.failure) summary.failure = *errors[j];
      continue;
    }
    const auto& o = outcomes[j];
    if (o.label == TrialLabel::Positive) {
      pos.push_back(o.score);
      cost_pos += static_cast<double>(o.reported_cost);
      tp += o.verdict == Verdict::Violation;
    } else {
      neg.push_back(o.score);
      cost_neg += static_cast<double>(o.reported_cost);
      fp += o.verdict == Verdict::Violation;
    }
    summary.outcomes.push_back(o);
  }
  if (pos.empty() || neg.empty()) {
    if (!summary.failure) summary.failure = "no completed trials";
    return summary;
  }
  summary.auc = compute_auc(pos, neg);
  summary.fpr = static_cast<double>(fp) / static_cast<double>(neg.size());
  summary.tpr = static_cast<double>(tp) / static_cast<double>(pos.size());
  summary.mean_cost_positive = cost_pos / static_cast<double>(pos.size());
  summary.mean_cost_negative = cost_neg / static_cast<double>(neg.size());
  return summary;
}

struct SweepPoint {
  double magnitude = 0.0;
  double auc = 0.5;
  double fpr = 0.0;
  double mean_cost = 0.0;
  TrialSummary summary;
};

/// One run_trials per magnitude, with the base spec's suspect mean shift scaled
/// by that magnitude. The intact side and the trial seeds are shared by all points.
inline std::vector<SweepPoint> magnitude_sweep(const SyntheticSpec& base, std::span<const double> magnitudes,
                                               const PromptLibrary& library, const VerifierConfig& config,
                                               const TrialOptions& options) {
  if (magnitudes.size() < 3) throw Error(ErrorCode::InvalidArgument, "magnitude sweep needs at least 3 points");
  for (std::size_t i = 1; i < magnitudes.size(); ++i)
    if (!(magnitudes[i] > magnitudes[i - 1]))
      throw Error(ErrorCode::InvalidArgument, "magnitudes must be strictly increasing");
  const SyntheticSpec intact = base.intact();
  std::vector<SweepPoint> out;
  for (double m : magnitudes) {
    SweepPoint p;
    p.magnitude = m;
    p.summary = run_trials(intact, base.with_scaled_shift(m), library, config, options);
    p.auc = p.summary.auc;
    p.fpr = p.summary.fpr;
    p.mean_cost = p.summary.mean_cost_positive;
    out.push_back(std::move(p));
  }
  return out;
}

// ---- output ----

struct MetricsRow {
  std::string name;
  double auc = 0.0;
  double fpr = 0.0;
  double tpr = 0.0;
  double mean_cost = 0.0;
  std::size_t trials = 0;
};

inline std::string format_number(double v) {
  std::ostringstream ss;
  ss.precision(6);
  ss << std::fixed << v;
  return ss.str();
}

inline void write_metrics_csv(const std::filesystem::path& path, std::string_view key_column,
                              std::span<const MetricsRow> rows) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << key_column << ",auc,fpr,tpr,mean_cost,trials\n";
  for (const auto& r : rows)
    out << r.name << ',' << format_number(r.auc) << ',' << format_number(r.fpr) << ',' << format_number(r.tpr) << ','
        << format_number(r.mean_cost) << ',' << r.trials << '\n';
}

inline void append_trials_jsonl(std::ostream& out, std::string_view group, const TrialSummary& summary) {
  for (const auto& o : summary.outcomes) {
    nlohmann::ordered_json j;
    j["group"] = group;
    j["trial"] = o.index;
    j["label"] = o.label == TrialLabel::Positive ? "positive" : "negative";
    j["seed"] = o.seed;
    j["score"] = detail::number_or_null(o.score);
    j["verdict"] = std::string(to_string(o.verdict));
    j["cost"] = o.reported_cost;
    j["suspect_queries"] = o.cost.suspect_queries;
    j["reference_queries"] = o.cost.reference_queries;
    out << j.dump() << '\n';
  }
}

}  // namespace integrity
