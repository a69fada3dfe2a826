#pragma once

// Run configuration files (JSON). Example:
//
//   {
//     "schema_version": 1,
//     "profile": "v1",
//     "n": 5, "r_start": 5, "r_end": 10, "q": 5,
//     "master_seed": 42,
//     "env": {"synthetic": {"spec": "spec.json"}}
//   }
//
// Profiles v1 and v2 fix (alpha, theta) to (0.01, 0.25) and (0.05, 0.3);
// "custom" requires both keys. Unknown keys are rejected.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <variant>

#include "json.hpp"

#include "integrity/error.hpp"
#include "integrity/file_source.hpp"
#include "integrity/http_source.hpp"
#include "integrity/synthetic.hpp"
#include "integrity/verifier.hpp"

namespace integrity {

struct Profile {
  std::string_view name;
  double alpha;
  double theta;
};

inline constexpr Profile kProfileV1{"v1", 0.01, 0.25};
inline constexpr Profile kProfileV2{"v2", 0.05, 0.3};

struct SyntheticEnvConfig {
  std::filesystem::path spec;
};
struct FileEnvConfig {
  std::filesystem::path root;
};
struct HttpEnvConfig {
  std::string endpoint;
  std::string reference_model;
  std::string suspect_model;
  std::chrono::milliseconds timeout{60000};
};

using EnvConfig = std::variant<SyntheticEnvConfig, FileEnvConfig, HttpEnvConfig>;

struct RunConfig {
  static constexpr int kSchemaVersion = 1;

  std::string profile = "v1";
  VerifierConfig verifier;
  /// Required by verify; evaluation manifests bring their own specs.
  std::optional<EnvConfig> env;
};

namespace detail {

[[noreturn]] inline void config_error(const std::string& what) { throw Error(ErrorCode::ConfigInvalid, what); }

inline void reject_unknown(const nlohmann::json& obj, const std::set<std::string>& allowed, const std::string& where) {
  for (const auto& [key, _] : obj.items())
    if (!allowed.contains(key)) config_error("unknown key '" + key + "'" + (where.empty() ? "" : " in " + where));
}

template <typename T>
T get_key(const nlohmann::json& obj, const std::string& key) {
  try {
    return obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    config_error("key '" + key + "' has the wrong type or is missing");
  }
}

inline std::size_t get_count(const nlohmann::json& obj, const std::string& key) {
  if (!obj.at(key).is_number_unsigned()) config_error("key '" + key + "' must be a non-negative integer");
  return obj.at(key).get<std::size_t>();
}

inline std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  return path.is_absolute() ? path : base / path;
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  using detail::config_error;
  if (!j.is_object()) config_error("config must be a JSON object");
  detail::reject_unknown(j,
                         {"schema_version", "profile", "alpha", "theta", "n", "r_start", "r_end", "q",
                          "covariance_mode", "ridge", "denom_floor", "master_seed", "cost_counts_reference", "threads",
                          "baseline_images", "env"},
                         "");
  if (j.contains("schema_version") && detail::get_key<int>(j, "schema_version") != RunConfig::kSchemaVersion)
    config_error("key 'schema_version' must be 1");

  RunConfig rc;
  auto& a = rc.verifier.automaton;
  rc.profile = j.contains("profile") ? detail::get_key<std::string>(j, "profile") : "v1";
  if (rc.profile == kProfileV1.name || rc.profile == kProfileV2.name) {
    const Profile& p = rc.profile == kProfileV1.name ? kProfileV1 : kProfileV2;
    for (const char* key : {"alpha", "theta"})
      if (j.contains(key))
        config_error("key '" + std::string(key) + "' is fixed by profile " + rc.profile + "; use profile 'custom'");
    a.alpha = p.alpha;
    rc.verifier.theta = p.theta;
  } else if (rc.profile == "custom") {
    if (!j.contains("alpha") || !j.contains("theta")) config_error("profile 'custom' requires keys 'alpha' and 'theta'");
    a.alpha = detail::get_key<double>(j, "alpha");
    rc.verifier.theta = detail::get_key<double>(j, "theta");
  } else {
    config_error("key 'profile' must be v1, v2 or custom");
  }

  if (j.contains("n")) a.n_per_round = detail::get_count(j, "n");
  if (j.contains("r_start")) a.r_start = detail::get_count(j, "r_start");
  if (j.contains("r_end")) a.r_end = detail::get_count(j, "r_end");
  if (j.contains("q")) a.q = detail::get_count(j, "q");
  if (j.contains("threads")) a.threads = detail::get_count(j, "threads");
  if (j.contains("covariance_mode")) {
    try {
      a.covariance_mode = parse_covariance_mode(detail::get_key<std::string>(j, "covariance_mode"));
    } catch (const Error&) {
      config_error("key 'covariance_mode' must be full_ridge, diagonal or shrinkage");
    }
  }
  if (j.contains("ridge")) a.ridge = detail::get_key<double>(j, "ridge");
  if (j.contains("denom_floor")) a.denom_floor = detail::get_key<double>(j, "denom_floor");
  if (j.contains("master_seed")) {
    if (!j["master_seed"].is_number_unsigned()) config_error("key 'master_seed' must be a non-negative integer");
    a.master_seed = j["master_seed"].get<std::uint64_t>();
  }
  if (j.contains("cost_counts_reference"))
    rc.verifier.cost_counts_reference = detail::get_key<bool>(j, "cost_counts_reference");
  if (j.contains("baseline_images")) rc.verifier.baseline_images = detail::get_count(j, "baseline_images");

  try {
    a.validate();
  } catch (const Error& e) {
    config_error(e.what());
  }
  if (!std::isfinite(rc.verifier.theta)) config_error("key 'theta' must be finite");

  if (!j.contains("env")) return rc;
  const auto& env = j["env"];
  if (!env.is_object() || env.size() != 1) config_error("key 'env' must hold exactly one of synthetic, files, http");
  if (env.contains("synthetic")) {
    const auto& s = env["synthetic"];
    detail::reject_unknown(s, {"spec"}, "env.synthetic");
    rc.env = SyntheticEnvConfig{detail::resolve(base_dir, detail::get_key<std::string>(s, "spec"))};
  } else if (env.contains("files")) {
    const auto& f = env["files"];
    detail::reject_unknown(f, {"root"}, "env.files");
    rc.env = FileEnvConfig{detail::resolve(base_dir, detail::get_key<std::string>(f, "root"))};
  } else if (env.contains("http")) {
    const auto& h = env["http"];
    detail::reject_unknown(h, {"endpoint", "reference_model", "suspect_model", "timeout_ms"}, "env.http");
    HttpEnvConfig http;
    http.endpoint = detail::get_key<std::string>(h, "endpoint");
    http.reference_model = detail::get_key<std::string>(h, "reference_model");
    http.suspect_model = detail::get_key<std::string>(h, "suspect_model");
    if (h.contains("timeout_ms")) http.timeout = std::chrono::milliseconds(detail::get_count(h, "timeout_ms"));
    rc.env = http;
  } else {
    config_error("unknown key '" + env.begin().key() + "' in env");
  }
  return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ConfigInvalid, path.string() + ": " + e.what());
  }
  return parse_run_config(j, path.parent_path());
}

inline Environment make_environment(const EnvConfig& env) {
  if (const auto* s = std::get_if<SyntheticEnvConfig>(&env))
    return make_synthetic_environment(std::make_shared<const SyntheticSpec>(SyntheticSpec::load(s->spec)));
  if (const auto* f = std::get_if<FileEnvConfig>(&env)) return make_file_environment(f->root);
  const auto& h = std::get<HttpEnvConfig>(env);
  return make_http_environment(HttpEndpoint{h.endpoint, h.timeout}, h.reference_model, h.suspect_model);
}

}  // namespace integrity
