#pragma once

// Command implementations behind the integrity_cli binary. Each returns a
// process exit code: 0 = success / INTACT, 10 = VIOLATION, 1 = error.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "integrity/config.hpp"
#include "integrity/eval.hpp"
#include "integrity/feature_file.hpp"
#include "integrity/gaussian.hpp"
#include "integrity/synthetic.hpp"
#include "integrity/verifier.hpp"

namespace integrity::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitIntact = 0;
inline constexpr int kExitViolation = 10;
inline constexpr int kExitError = 1;

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorCode::Io, "write failed for " + path.string());
}

inline int fail(std::ostream& err, const std::exception& e) {
  err << "error: " << e.what() << '\n';
  return kExitError;
}

}  // namespace detail

struct VerifyOptions {
  std::filesystem::path config;
  /// Optional for synthetic environments: defaults to the spec's prompts.
  std::optional<std::filesystem::path> library;
  std::filesystem::path output;
  std::optional<std::uint64_t> seed;
  Method method = Method::PromptAutomaton;
};

inline int cmd_verify(const VerifyOptions& opt, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  try {
    RunConfig rc = load_run_config(opt.config);
    if (!rc.env) throw Error(ErrorCode::ConfigInvalid, "key 'env' is required for verify");
    if (opt.seed) rc.verifier.automaton.master_seed = *opt.seed;

    PromptLibrary library;
    if (opt.library) {
      library = PromptLibrary::load(*opt.library);
    } else if (const auto* s = std::get_if<SyntheticEnvConfig>(&*rc.env)) {
      library = library_of(SyntheticSpec::load(s->spec));
    } else {
      throw Error(ErrorCode::InvalidArgument, "a prompt library is required for file and http environments");
    }
    const Environment env = make_environment(*rc.env);

    VerificationReport report;
    int code = kExitError;
    try {
      report = run_verification(opt.method, library, env, rc.verifier);
      code = report.verdict == Verdict::Violation ? kExitViolation : kExitIntact;
    } catch (const VerificationAborted& e) {
      report = e.partial();
      err << "error: " << e.what() << '\n';
    }
    detail::write_text(opt.output, to_json(report).dump(2) + "\n");
    out << to_string(report.verdict) << " best_score=" << format_number(report.best_score)
        << " prompt=" << report.best_prompt.id.value << " cost=" << report.reported_cost() << '\n';
    return code;
  } catch (const std::exception& e) {
    return detail::fail(err, e);
  }
}

struct EvalOptions {
  std::filesystem::path config;
  std::filesystem::path manifest;
  std::filesystem::path out_dir;
  std::optional<std::uint64_t> seed;
};

/// Manifest (JSON, paths relative to the manifest):
///   {"trials": 20, "method": "prompt_automaton", "threads": 1,
///    "sweep": {"base_spec": "spec.json", "magnitudes": [0.1, 0.2, 0.3]}}
/// or
///   {"violations": [{"name": "db1", "spec": "db1.json"}, ...]}
/// Violations are scored against the intact version of their own spec.
struct EvalManifest {
  std::size_t trials = 20;
  Method method = Method::PromptAutomaton;
  std::size_t threads = 1;
  std::optional<std::filesystem::path> library;
  std::optional<std::filesystem::path> sweep_spec;
  std::vector<double> magnitudes;
  std::vector<std::pair<std::string, std::filesystem::path>> violations;

  static EvalManifest parse(const nlohmann::json& j, const std::filesystem::path& base_dir) {
    using integrity::detail::config_error;
    using integrity::detail::get_count;
    using integrity::detail::get_key;
    using integrity::detail::resolve;
    if (!j.is_object()) config_error("manifest must be a JSON object");
    integrity::detail::reject_unknown(
        j, {"schema_version", "trials", "method", "threads", "library", "sweep", "violations"}, "manifest");
    EvalManifest m;
    if (j.contains("trials")) m.trials = get_count(j, "trials");
    if (j.contains("threads")) m.threads = get_count(j, "threads");
    if (j.contains("method")) {
      const auto name = get_key<std::string>(j, "method");
      if (name == to_string(Method::PromptAutomaton)) m.method = Method::PromptAutomaton;
      else if (name == to_string(Method::RandomBaseline)) m.method = Method::RandomBaseline;
      else config_error("key 'method' must be prompt_automaton or random_baseline");
    }
    if (j.contains("library")) m.library = resolve(base_dir, get_key<std::string>(j, "library"));
    if (j.contains("sweep")) {
      const auto& s = j["sweep"];
      integrity::detail::reject_unknown(s, {"base_spec", "magnitudes"}, "sweep");
      m.sweep_spec = resolve(base_dir, get_key<std::string>(s, "base_spec"));
      m.magnitudes = get_key<std::vector<double>>(s, "magnitudes");
    }
    if (j.contains("violations")) {
      if (!j["violations"].is_array()) config_error("key 'violations' must be a list");
      for (const auto& v : j["violations"]) {
        integrity::detail::reject_unknown(v, {"name", "spec"}, "violations");
        m.violations.emplace_back(get_key<std::string>(v, "name"), resolve(base_dir, get_key<std::string>(v, "spec")));
      }
    }
    if (m.sweep_spec && !m.violations.empty()) config_error("manifest has both 'sweep' and 'violations'");
    if (!m.sweep_spec && m.violations.empty()) config_error("manifest is empty: no sweep and no violations");
    if (m.sweep_spec && m.magnitudes.empty()) config_error("manifest is empty: sweep has no magnitudes");
    return m;
  }

  static EvalManifest load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::Io, "cannot open manifest " + path.string());
    try {
      return parse(nlohmann::json::parse(in), path.parent_path());
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::ConfigInvalid, path.string() + ": " + e.what());
    }
  }
};

inline int cmd_eval(const EvalOptions& opt, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  try {
    RunConfig rc = load_run_config(opt.config);
    if (opt.seed) rc.verifier.automaton.master_seed = *opt.seed;
    const EvalManifest m = EvalManifest::load(opt.manifest);
    const TrialOptions topt{m.trials, m.method, m.threads};

    std::filesystem::create_directories(opt.out_dir);
    std::ofstream jsonl(opt.out_dir / "trials.jsonl", std::ios::binary);
    if (!jsonl) throw Error(ErrorCode::Io, "cannot write " + (opt.out_dir / "trials.jsonl").string());

    std::vector<MetricsRow> rows;
    std::optional<std::string> failure;
    auto record = [&](const std::string& name, const TrialSummary& s, double mean_cost) {
      rows.push_back({name, s.auc, s.fpr, s.tpr, mean_cost, m.trials});
      append_trials_jsonl(jsonl, name, s);
      if (s.failure && !failure) failure = name + ": " + *s.failure;
      out << name << " auc=" << format_number(s.auc) << " fpr=" << format_number(s.fpr)
          << " mean_cost=" << format_number(mean_cost) << '\n';
    };

    std::string key_column;
    if (m.sweep_spec) {
      key_column = "magnitude";
      const auto base = SyntheticSpec::load(*m.sweep_spec);
      const auto library = m.library ? PromptLibrary::load(*m.library) : library_of(base);
      for (const auto& p : magnitude_sweep(base, m.magnitudes, library, rc.verifier, topt))
        record(format_number(p.magnitude), p.summary, p.mean_cost);
    } else {
      key_column = "violation";
      for (const auto& [name, path] : m.violations) {
        const auto spec = SyntheticSpec::load(path);
        const auto library = m.library ? PromptLibrary::load(*m.library) : library_of(spec);
        const auto s = run_trials(spec.intact(), spec, library, rc.verifier, topt);
        record(name, s, s.mean_cost_positive);
      }
    }
    write_metrics_csv(opt.out_dir / "metrics.csv", key_column, rows);
    if (failure) {
      err << "error: " << *failure << '\n';
      return kExitError;
    }
    return kExitOk;
  } catch (const std::exception& e) {
    return detail::fail(err, e);
  }
}

struct KlOptions {
  std::filesystem::path p;
  std::filesystem::path q;
  /// Second reference sample; when present the relative score is printed too.
  std::optional<std::filesystem::path> p_prime;
  /// Empty means full_ridge with the automatic diagonal fallback.
  std::string mode;
  double ridge = kDefaultRidge;
  double denom_floor = kDefaultDenominatorFloor;
  std::optional<std::uint64_t> seed;  // accepted for uniformity; the computation is deterministic
};

inline int cmd_kl(const KlOptions& opt, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  try {
    const CovarianceMode requested = opt.mode.empty() ? CovarianceMode::FullRidge : parse_covariance_mode(opt.mode);
    std::vector<FeatureMatrix> mats{read_feature_file(opt.p), read_feature_file(opt.q)};
    if (opt.p_prime) mats.push_back(read_feature_file(*opt.p_prime));
    std::size_t min_rows = mats[0].rows();
    for (const auto& m : mats) {
      if (m.dim() != mats[0].dim())
        throw Error(ErrorCode::DimensionMismatch,
                    "feature files have dims " + std::to_string(mats[0].dim()) + " and " + std::to_string(m.dim()));
      min_rows = std::min(min_rows, m.rows());
    }
    const auto mode = effective_mode(requested, min_rows, mats[0].dim());
    const auto p = fit_gaussian(mats[0], mode, opt.ridge);
    const auto q = fit_gaussian(mats[1], mode, opt.ridge);
    out.precision(10);
    out << "mode " << to_string(mode) << '\n';
    out << "kl " << kl_divergence(p, q) << '\n';
    if (opt.p_prime) {
      const auto pp = fit_gaussian(mats[2], mode, opt.ridge);
      const auto r = relative_kl(p, pp, q, opt.denom_floor);
      out << "kl_reference " << r.denominator << '\n';
      out << "relative_kl " << r.beta << '\n';
    }
    return kExitOk;
  } catch (const std::exception& e) {
    return detail::fail(err, e);
  }
}

inline int cmd_synth_gen(const SyntheticParams& params, const std::filesystem::path& output,
                         const std::optional<std::filesystem::path>& library_out = std::nullopt,
                         std::ostream& err = std::cerr) {
  try {
    const auto spec = make_synthetic_spec(params);
    spec.save(output);
    if (library_out) {
      std::string text;
      for (const auto& p : spec.prompts()) text += p.text + '\n';
      detail::write_text(*library_out, text);
    }
    return kExitOk;
  } catch (const std::exception& e) {
    return detail::fail(err, e);
  }
}

inline int cmd_csv_import(const std::filesystem::path& csv, const std::filesystem::path& output,
                          std::ostream& err = std::cerr) {
  try {
    write_feature_file(output, read_feature_csv(csv));
    return kExitOk;
  } catch (const std::exception& e) {
    return detail::fail(err, e);
  }
}

}  // namespace integrity::cli
