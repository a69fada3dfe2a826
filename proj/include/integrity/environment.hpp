#pragma once

// The environment the automaton interacts with: a reference model (sampled as
// two independent pools) and a suspect model, each behind a FeatureSource.

#include <atomic>
#include <compare>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>

#include "integrity/error.hpp"
#include "integrity/feature_matrix.hpp"

namespace integrity {

struct ActionId {
  std::uint64_t value = 0;
  auto operator<=>(const ActionId&) const = default;
};

inline std::string to_string(ActionId id) { return std::to_string(id.value); }

/// A candidate prompt.
struct Action {
  ActionId id;
  std::string prompt_text;
  bool operator==(const Action&) const = default;
};

enum class Role { ReferenceA, ReferenceB, Suspect };

constexpr std::string_view to_string(Role role) {
  switch (role) {
    case Role::ReferenceA: return "reference_a";
    case Role::ReferenceB: return "reference_b";
    case Role::Suspect: return "suspect";
  }
  return "?";
}

constexpr bool is_reference(Role role) { return role != Role::Suspect; }

/// One generative model seen through its feature extractor.
class FeatureSource {
 public:
  virtual ~FeatureSource() = default;

  /// `count` feature vectors for the prompt. Reproducible sources return the
  /// same matrix for the same (action, count, stream_seed).
  virtual FeatureMatrix sample(const Action& action, std::size_t count, std::uint64_t stream_seed) = 0;

  virtual bool reproducible() const { return true; }
};

struct Environment {
  std::shared_ptr<FeatureSource> reference_a;
  std::shared_ptr<FeatureSource> reference_b;
  std::shared_ptr<FeatureSource> suspect;

  FeatureSource& source(Role role) const {
    const auto& ptr = role == Role::ReferenceA ? reference_a : role == Role::ReferenceB ? reference_b : suspect;
    if (!ptr) throw Error(ErrorCode::EnvironmentFailure, "no feature source bound for " + std::string(to_string(role)));
    return *ptr;
  }
};

struct PromptCost {
  std::uint64_t suspect_queries = 0;
  std::uint64_t reference_queries = 0;
  bool operator==(const PromptCost&) const = default;
};

/// Number of generated samples consumed, per model and per prompt.
struct QueryCost {
  std::uint64_t suspect_queries = 0;
  std::uint64_t reference_queries = 0;
  std::map<ActionId, PromptCost> per_prompt;

  std::uint64_t reported(bool count_reference) const {
    return suspect_queries + (count_reference ? reference_queries : 0);
  }

  QueryCost& operator+=(const QueryCost& other) {
    suspect_queries += other.suspect_queries;
    reference_queries += other.reference_queries;
    for (const auto& [id, c] : other.per_prompt) {
      auto& mine = per_prompt[id];
      mine.suspect_queries += c.suspect_queries;
      mine.reference_queries += c.reference_queries;
    }
    return *this;
  }

  bool operator==(const QueryCost&) const = default;
};

/// Thread-safe accumulator behind QueryCost.
class CostLedger {
 public:
  void record(Role role, ActionId id, std::uint64_t count) {
    (is_reference(role) ? reference_ : suspect_).fetch_add(count, std::memory_order_relaxed);
    std::lock_guard lock(mutex_);
    auto& c = per_prompt_[id];
    (is_reference(role) ? c.reference_queries : c.suspect_queries) += count;
  }

  QueryCost snapshot() const {
    QueryCost out;
    out.suspect_queries = suspect_.load();
    out.reference_queries = reference_.load();
    std::lock_guard lock(mutex_);
    out.per_prompt = per_prompt_;
    return out;
  }

 private:
  std::atomic<std::uint64_t> suspect_{0};
  std::atomic<std::uint64_t> reference_{0};
  mutable std::mutex mutex_;
  std::map<ActionId, PromptCost> per_prompt_;
};

}  // namespace integrity
