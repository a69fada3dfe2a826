#pragma once

// Client side of the feature service protocol:
//   POST /v1/features  {"model": str, "prompt": str, "n": int, "seed": int?}
//   200 -> {"dim": int, "features": [[float, ...], ...]}
//   non-2xx -> {"error": str}

#include <chrono>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

// Eigen goes first: httplib pulls in <resolv.h>, whose `_res` macro breaks Eigen's headers.
#include "integrity/environment.hpp"
#include "integrity/error.hpp"
#include "integrity/feature_matrix.hpp"

#include "httplib.h"
#include "json.hpp"

namespace integrity {

inline constexpr const char* kFeaturesPath = "/v1/features";

/// Validates a response body against the protocol and returns its features.
inline FeatureMatrix parse_features_response(const std::string& body, std::size_t expected_rows,
                                             std::optional<std::size_t> expected_dim = std::nullopt) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ProtocolViolation, std::string("response is not JSON: ") + e.what());
  }
  if (!j.is_object() || !j.contains("dim") || !j["dim"].is_number_unsigned() || !j.contains("features") ||
      !j["features"].is_array())
    throw Error(ErrorCode::ProtocolViolation, "response must be {\"dim\": int, \"features\": [[...]]}");
  const auto dim = j["dim"].get<std::size_t>();
  if (dim == 0) throw Error(ErrorCode::ProtocolViolation, "response dim is 0");
  if (expected_dim && *expected_dim != dim)
    throw Error(ErrorCode::ProtocolViolation,
                "response dim " + std::to_string(dim) + " differs from earlier dim " + std::to_string(*expected_dim));
  const auto& rows = j["features"];
  if (rows.size() != expected_rows)
    throw Error(ErrorCode::ProtocolViolation,
                "response has " + std::to_string(rows.size()) + " rows, requested " + std::to_string(expected_rows));
  RowMatrix data(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& row = rows[i];
    if (!row.is_array() || row.size() != dim)
      throw Error(ErrorCode::ProtocolViolation, "row " + std::to_string(i) + " does not have " + std::to_string(dim) + " values");
    for (std::size_t k = 0; k < dim; ++k) {
      if (!row[k].is_number()) throw Error(ErrorCode::ProtocolViolation, "non-numeric feature value");
      const double v = row[k].get<double>();
      if (!std::isfinite(v)) throw Error(ErrorCode::ProtocolViolation, "non-finite feature value");
      data(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = v;
    }
  }
  if (rows.empty()) return FeatureMatrix(dim);
  return FeatureMatrix(std::move(data));
}

struct HttpEndpoint {
  std::string base_url;  // e.g. http://127.0.0.1:8000
  std::chrono::milliseconds timeout{60000};
};

/// One request against the feature service. Adds `count` to the ledger on success.
inline FeatureMatrix http_source_sample(const HttpEndpoint& endpoint, const std::string& model_id,
                                        const std::string& prompt_text, std::size_t count,
                                        std::optional<std::uint64_t> seed = std::nullopt,
                                        std::optional<std::size_t> expected_dim = std::nullopt,
                                        CostLedger* ledger = nullptr, Role role = Role::Suspect, ActionId id = {}) {
  httplib::Client client(endpoint.base_url);
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(endpoint.timeout);
  const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(endpoint.timeout - secs);
  client.set_connection_timeout(secs.count(), usecs.count());
  client.set_read_timeout(secs.count(), usecs.count());
  client.set_write_timeout(secs.count(), usecs.count());

  nlohmann::json request{{"model", model_id}, {"prompt", prompt_text}, {"n", count}};
  if (seed) request["seed"] = *seed;

  const auto started = std::chrono::steady_clock::now();
  auto res = client.Post(kFeaturesPath, request.dump(), "application/json");
  const auto elapsed = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - started);
  if (!res)
    throw Error(ErrorCode::Transport, endpoint.base_url + kFeaturesPath + ": " + httplib::to_string(res.error()) +
                                          " after " + std::to_string(elapsed.count()) + " ms");
  if (res->status < 200 || res->status >= 300) {
    std::string message = res->body;
    try {
      const auto body = nlohmann::json::parse(res->body);
      if (body.is_object() && body.contains("error") && body["error"].is_string()) message = body["error"];
    } catch (const nlohmann::json::exception&) {
    }
    throw Error(ErrorCode::RemoteError, "HTTP " + std::to_string(res->status) + ": " + message);
  }
  FeatureMatrix out = parse_features_response(res->body, count, expected_dim);
  if (ledger) ledger->record(role, id, count);
  return out;
}

/// Remote model behind the feature service. Not reproducible: the service
/// may or may not honour the seed.
class HttpSource final : public FeatureSource {
 public:
  HttpSource(HttpEndpoint endpoint, std::string model_id)
      : endpoint_(std::move(endpoint)), model_id_(std::move(model_id)) {}

  FeatureMatrix sample(const Action& action, std::size_t count, std::uint64_t stream_seed) override {
    std::lock_guard lock(mutex_);
    // seeds travel as JSON integers; keep them within the signed 63-bit range
    auto out = http_source_sample(endpoint_, model_id_, action.prompt_text, count, stream_seed >> 1, dim_);
    dim_ = out.dim();
    return out;
  }

  bool reproducible() const override { return false; }

 private:
  HttpEndpoint endpoint_;
  std::string model_id_;
  std::mutex mutex_;
  std::optional<std::size_t> dim_;
};

inline Environment make_http_environment(const HttpEndpoint& endpoint, const std::string& reference_model,
                                         const std::string& suspect_model) {
  auto reference = std::make_shared<HttpSource>(endpoint, reference_model);
  return Environment{reference, reference, std::make_shared<HttpSource>(endpoint, suspect_model)};
}

}  // namespace integrity
