#pragma once

// Library-level verification: walk the prompt library in random batches of q,
// run the automaton on each batch and report a violation as soon as a batch's
// best estimated reward reaches theta. Also the one-shot random-selection
// baseline used for ablation.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "integrity/automaton.hpp"
#include "integrity/environment.hpp"
#include "integrity/error.hpp"
#include "integrity/gaussian.hpp"
#include "integrity/random.hpp"

namespace integrity {

struct PromptLibrary {
  std::vector<Action> prompts;
  std::string source_note;

  void validate() const {
    std::set<ActionId> seen;
    for (const auto& a : prompts)
      if (!seen.insert(a.id).second) throw Error(ErrorCode::InvalidArgument, "duplicate prompt id " + to_string(a.id));
  }

  /// One prompt per line; the 1-based line number is the id. Blank lines are skipped.
  static PromptLibrary from_text(std::istream& in, std::string note = {}) {
    PromptLibrary lib;
    lib.source_note = std::move(note);
    std::string line;
    std::uint64_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.find_first_not_of(" \t") == std::string::npos) continue;
      lib.prompts.push_back({ActionId{line_no}, line});
    }
    return lib;
  }

  /// Either ["text", ...] (ids 1..N) or [{"id": int, "text": str}, ...].
  static PromptLibrary from_json(const nlohmann::json& j, std::string note = {}) {
    if (!j.is_array()) throw Error(ErrorCode::InvalidArgument, "prompt library JSON must be a list");
    PromptLibrary lib;
    lib.source_note = std::move(note);
    std::uint64_t pos = 0;
    for (const auto& e : j) {
      ++pos;
      if (e.is_string()) {
        lib.prompts.push_back({ActionId{pos}, e.get<std::string>()});
      } else if (e.is_object() && e.contains("id") && e["id"].is_number_unsigned() && e.contains("text") &&
                 e["text"].is_string()) {
        lib.prompts.push_back({ActionId{e["id"].get<std::uint64_t>()}, e["text"].get<std::string>()});
      } else {
        throw Error(ErrorCode::InvalidArgument, "library entry " + std::to_string(pos) + " is neither a string nor {id, text}");
      }
    }
    lib.validate();
    return lib;
  }

  static PromptLibrary load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::Io, "cannot open prompt library " + path.string());
    if (path.extension() == ".json") {
      try {
        return from_json(nlohmann::json::parse(in), path.filename().string());
      } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::InvalidArgument, path.string() + ": " + e.what());
      }
    }
    return from_text(in, path.filename().string());
  }
};

enum class Verdict { Violation, Intact };

constexpr std::string_view to_string(Verdict v) { return v == Verdict::Violation ? "VIOLATION" : "INTACT"; }

enum class Method { PromptAutomaton, RandomBaseline };

constexpr std::string_view to_string(Method m) {
  return m == Method::PromptAutomaton ? "prompt_automaton" : "random_baseline";
}

struct VerifierConfig {
  AutomatonConfig automaton;
  double theta = 0.25;
  /// Whether reported cost includes reference-model generations.
  bool cost_counts_reference = false;
  /// Samples per source for the random baseline.
  std::size_t baseline_images = 50;
};

struct VerificationReport {
  static constexpr int kSchemaVersion = 1;

  Method method = Method::PromptAutomaton;
  Verdict verdict = Verdict::Intact;
  Action best_prompt;
  double best_score = 0.0;
  double theta = 0.0;
  std::vector<AutomatonResult> batches;
  QueryCost total_cost;
  VerifierConfig config;
  std::uint64_t master_seed = 0;
  std::optional<std::string> failure;

  std::uint64_t reported_cost() const { return total_cost.reported(config.cost_counts_reference); }
};

class VerificationAborted : public Error {
 public:
  VerificationAborted(const std::string& what, VerificationReport partial)
      : Error(ErrorCode::EnvironmentFailure, what), partial_(std::move(partial)) {}
  const VerificationReport& partial() const { return partial_; }

 private:
  VerificationReport partial_;
};

namespace detail {

inline constexpr std::uint64_t kOrderTag = hash_label("library-order");
inline constexpr std::uint64_t kBatchTag = hash_label("batch");
inline constexpr std::uint64_t kBaselineTag = hash_label("baseline");

inline std::vector<Action> shuffled(const PromptLibrary& library, std::uint64_t master_seed) {
  if (library.prompts.empty()) throw Error(ErrorCode::EmptyLibrary, "prompt library is empty");
  library.validate();
  std::vector<Action> order = library.prompts;
  Rng rng(derive_seed({master_seed, kOrderTag}));
  rng.shuffle(order);
  return order;
}

inline void absorb(VerificationReport& report, AutomatonResult batch) {
  report.total_cost += batch.cost;
  if (report.batches.empty() || batch.estimated_reward > report.best_score) {
    report.best_score = batch.estimated_reward;
    report.best_prompt = batch.chosen_action;
  }
  if (batch.estimated_reward >= report.theta) report.verdict = Verdict::Violation;
  report.batches.push_back(std::move(batch));
}

}  // namespace detail

/// Batches of q unexamined prompts drawn in seeded random order; stops at the
/// first batch whose d-hat reaches theta.
inline VerificationReport verify(const PromptLibrary& library, const Environment& env, const VerifierConfig& config) {
  config.automaton.validate();
  VerificationReport report;
  report.method = Method::PromptAutomaton;
  report.theta = config.theta;
  report.config = config;
  report.master_seed = config.automaton.master_seed;

  const auto order = detail::shuffled(library, config.automaton.master_seed);
  const std::size_t q = config.automaton.q;
  for (std::size_t begin = 0, batch = 0; begin < order.size(); begin += q, ++batch) {
    std::vector<Action> actions(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                order.begin() + static_cast<std::ptrdiff_t>(std::min(begin + q, order.size())));
    AutomatonConfig batch_config = config.automaton;
    batch_config.master_seed = derive_seed({config.automaton.master_seed, detail::kBatchTag, batch});
    try {
      detail::absorb(report, run_prompt_automaton(env, std::move(actions), batch_config));
    } catch (const AutomatonAborted& e) {
      report.failure = e.what();
      if (!e.partial().trace.empty()) detail::absorb(report, e.partial());
      throw VerificationAborted(e.what(), std::move(report));
    }
    if (report.verdict == Verdict::Violation) break;
  }
  return report;
}

/// One-shot relative KL on `n_images` samples per source for one prompt.
inline AutomatonResult baseline_probe(const Environment& env, const Action& action, std::size_t n_images,
                                      const AutomatonConfig& config, std::uint64_t seed) {
  CostLedger ledger;
  FeatureMatrix pools[3];
  for (Role role : kAllRoles) {
    const auto slot = static_cast<std::size_t>(role);
    pools[slot] = env.source(role).sample(action, n_images, derive_seed({seed, action.id.value, slot}));
    if (pools[slot].rows() != n_images)
      throw Error(ErrorCode::ProtocolViolation, "source returned the wrong number of vectors");
    ledger.record(role, action.id, n_images);
  }
  const auto mode = effective_mode(config.covariance_mode, n_images, pools[0].dim());
  const auto p = fit_gaussian(pools[0], mode, config.ridge);
  const auto p_prime = fit_gaussian(pools[1], mode, config.ridge);
  const auto q = fit_gaussian(pools[2], mode, config.ridge);

  AutomatonResult out;
  out.chosen_action = action;
  out.estimated_reward = relative_kl(p, p_prime, q, config.denom_floor).beta;
  out.rounds_run = 1;
  out.surviving_actions = {action};
  out.cost = ledger.snapshot();
  return out;
}

/// Ablation baseline: prompts in seeded random order, each scored once on
/// n_images samples per source; violation on the first score >= theta.
inline VerificationReport random_baseline_verify(const PromptLibrary& library, const Environment& env,
                                                 const VerifierConfig& config) {
  if (config.baseline_images < 2)
    throw Error(ErrorCode::TooFewSamples, "random baseline needs at least 2 images per source");
  VerificationReport report;
  report.method = Method::RandomBaseline;
  report.theta = config.theta;
  report.config = config;
  report.master_seed = config.automaton.master_seed;

  const auto order = detail::shuffled(library, config.automaton.master_seed);
  const std::uint64_t seed = derive_seed({config.automaton.master_seed, detail::kBaselineTag});
  for (const auto& action : order) {
    try {
      detail::absorb(report, baseline_probe(env, action, config.baseline_images, config.automaton, seed));
    } catch (const Error& e) {
      if (!is_environment_error(e.code()) && e.code() != ErrorCode::DimensionMismatch) throw;
      report.failure = e.what();
      throw VerificationAborted(e.what(), std::move(report));
    }
    if (report.verdict == Verdict::Violation) break;
  }
  return report;
}

inline VerificationReport run_verification(Method method, const PromptLibrary& library, const Environment& env,
                                           const VerifierConfig& config) {
  return method == Method::PromptAutomaton ? verify(library, env, config)
                                           : random_baseline_verify(library, env, config);
}

// ---- JSON ----

namespace detail {

inline nlohmann::ordered_json action_json(const Action& a) {
  return nlohmann::ordered_json{{"id", a.id.value}, {"text", a.prompt_text}};
}

inline nlohmann::ordered_json number_or_null(double v) {
  if (std::isfinite(v)) return v;
  return nullptr;
}

}  // namespace detail

inline nlohmann::ordered_json to_json(const QueryCost& cost, bool count_reference) {
  nlohmann::ordered_json j;
  j["suspect_queries"] = cost.suspect_queries;
  j["reference_queries"] = cost.reference_queries;
  j["reported"] = cost.reported(count_reference);
  auto per = nlohmann::ordered_json::array();
  for (const auto& [id, c] : cost.per_prompt)
    per.push_back({{"id", id.value}, {"suspect_queries", c.suspect_queries}, {"reference_queries", c.reference_queries}});
  j["per_prompt"] = std::move(per);
  return j;
}

inline nlohmann::ordered_json to_json(const AutomatonResult& r, bool count_reference) {
  nlohmann::ordered_json j;
  j["chosen"] = detail::action_json(r.chosen_action);
  j["estimated_reward"] = detail::number_or_null(r.estimated_reward);
  j["rounds_run"] = r.rounds_run;
  auto surviving = nlohmann::ordered_json::array();
  for (const auto& a : r.surviving_actions) surviving.push_back(a.id.value);
  j["surviving"] = std::move(surviving);
  j["cost"] = to_json(r.cost, count_reference);
  auto trace = nlohmann::ordered_json::array();
  for (const auto& round : r.trace) {
    nlohmann::ordered_json t;
    t["round"] = round.round;
    auto set = nlohmann::ordered_json::array();
    for (auto id : round.action_set) set.push_back(id.value);
    t["action_set"] = std::move(set);
    auto rewards = nlohmann::ordered_json::array();
    for (const auto& e : round.rewards)
      rewards.push_back({{"id", e.action_id.value}, {"reward", detail::number_or_null(e.reward)},
                         {"feedback_count", e.feedback_count}});
    t["rewards"] = std::move(rewards);
    t["best"] = round.best.value;
    auto tests = nlohmann::ordered_json::array();
    for (const auto& e : round.tests)
      tests.push_back({{"id", e.action_id.value},
                       {"test", std::string(to_string(e.test.kind))},
                       {"statistic", detail::number_or_null(e.test.statistic)},
                       {"df", detail::number_or_null(e.test.degrees_of_freedom)},
                       {"p_value", e.test.p_value},
                       {"reject", e.test.reject}});
    t["tests"] = std::move(tests);
    auto eliminated = nlohmann::ordered_json::array();
    for (auto id : round.eliminated) eliminated.push_back(id.value);
    t["eliminated"] = std::move(eliminated);
    trace.push_back(std::move(t));
  }
  j["trace"] = std::move(trace);
  return j;
}

inline nlohmann::ordered_json to_json(const VerifierConfig& c) {
  const auto& a = c.automaton;
  return nlohmann::ordered_json{{"alpha", a.alpha},
                                {"theta", c.theta},
                                {"n", a.n_per_round},
                                {"r_start", a.r_start},
                                {"r_end", a.r_end},
                                {"q", a.q},
                                {"covariance_mode", std::string(to_string(a.covariance_mode))},
                                {"ridge", a.ridge},
                                {"denom_floor", a.denom_floor},
                                {"cost_counts_reference", c.cost_counts_reference},
                                {"baseline_images", c.baseline_images}};
}

inline nlohmann::ordered_json to_json(const VerificationReport& r) {
  const bool count_ref = r.config.cost_counts_reference;
  nlohmann::ordered_json j;
  j["schema_version"] = VerificationReport::kSchemaVersion;
  j["method"] = std::string(to_string(r.method));
  j["verdict"] = std::string(to_string(r.verdict));
  j["best_prompt"] = detail::action_json(r.best_prompt);
  j["best_score"] = detail::number_or_null(r.best_score);
  j["theta"] = r.theta;
  j["master_seed"] = r.master_seed;
  j["config"] = to_json(r.config);
  j["total_cost"] = to_json(r.total_cost, count_ref);
  auto batches = nlohmann::ordered_json::array();
  for (const auto& b : r.batches) batches.push_back(to_json(b, count_ref));
  j["batches"] = std::move(batches);
  if (r.failure) j["failure"] = *r.failure;
  return j;
}

}  // namespace integrity
