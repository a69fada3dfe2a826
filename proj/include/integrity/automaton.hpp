#pragma once

// Prompt-selection learning automaton. Each round every surviving prompt is
// queried n more times per source; relative-KL feedbacks are cross-validated
// over all history (r new feedbacks in round r); the running mean of the
// feedbacks estimates each prompt's reward; after r_start rounds, prompts
// whose mean is significantly below the current best are eliminated.

#include <algorithm>
#include <cstdint>
#include <exception>
#include <limits>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "integrity/environment.hpp"
#include "integrity/error.hpp"
#include "integrity/feature_matrix.hpp"
#include "integrity/gaussian.hpp"
#include "integrity/hypothesis_tests.hpp"
#include "integrity/random.hpp"

namespace integrity {

struct AutomatonConfig {
  double alpha = 0.01;
  std::size_t r_start = 5;
  std::size_t r_end = 10;
  std::size_t n_per_round = 5;
  std::size_t q = 5;
  /// Requested mode; fits on fewer than dim + 2 samples always use Diagonal.
  CovarianceMode covariance_mode = CovarianceMode::FullRidge;
  double ridge = kDefaultRidge;
  double denom_floor = kDefaultDenominatorFloor;
  std::uint64_t master_seed = 0;
  /// Worker threads for per-action feedback; results do not depend on it.
  std::size_t threads = 1;

  void validate() const {
    auto bad = [](const std::string& what) { throw Error(ErrorCode::InvalidArgument, what); };
    if (!(alpha > 0.0 && alpha < 1.0)) bad("alpha must lie in (0, 1)");
    if (r_start < 1) bad("r_start must be >= 1");
    if (r_end < r_start) bad("r_end must be >= r_start");
    if (n_per_round < 2) bad("n must be >= 2");
    if (q < 1) bad("q must be >= 1");
    if (!(ridge >= 0.0)) bad("ridge must be >= 0");
    if (!(denom_floor > 0.0)) bad("denom_floor must be > 0");
    if (threads < 1) bad("threads must be >= 1");
  }
};

/// All feedbacks collected so far for one action.
struct FeedbackSequence {
  ActionId action_id;
  std::vector<double> values;
  std::size_t rounds_recorded = 0;

  void append_round(std::span<const double> feedbacks) {
    values.insert(values.end(), feedbacks.begin(), feedbacks.end());
    ++rounds_recorded;
  }
};

/// Mean of every feedback in the sequence.
inline double estimated_reward(const FeedbackSequence& seq) {
  if (seq.values.empty())
    throw Error(ErrorCode::EmptySequence, "no feedback recorded for action " + to_string(seq.action_id));
  double sum = 0.0;
  for (double v : seq.values) sum += v;
  return sum / static_cast<double>(seq.values.size());
}

/// Highest estimated reward; ties go to the lowest id.
inline ActionId select_optimal(std::span<const FeedbackSequence> sequences) {
  if (sequences.empty()) throw Error(ErrorCode::EmptyActionSet, "no surviving actions to choose from");
  const FeedbackSequence* best = nullptr;
  double best_reward = -std::numeric_limits<double>::infinity();
  for (const auto& seq : sequences) {
    const double reward = estimated_reward(seq);
    if (best == nullptr || reward > best_reward || (reward == best_reward && seq.action_id < best->action_id)) {
      best = &seq;
      best_reward = reward;
    }
  }
  return best->action_id;
}

struct EliminationRecord {
  ActionId action_id;
  TestResult test;
};

/// Samples at or below this size use the t-test, above it the Z-test.
constexpr std::size_t kSmallSampleLimit = 30;

/// Tests every non-best action against the same snapshot of the best action's
/// feedbacks. Returns all tests performed; empty before r_start.
inline std::vector<EliminationRecord> elimination_tests(std::span<const FeedbackSequence> sequences, ActionId best_id,
                                                        double alpha, std::size_t round, std::size_t r_start) {
  std::vector<EliminationRecord> out;
  if (round < r_start) return out;
  const auto best = std::find_if(sequences.begin(), sequences.end(),
                                 [&](const FeedbackSequence& s) { return s.action_id == best_id; });
  if (best == sequences.end()) throw Error(ErrorCode::InvalidArgument, "best action is not in the action set");
  // a single feedback per action (r_start = 1) cannot be tested yet
  if (best->values.size() < 2) return out;
  for (const auto& seq : sequences) {
    if (seq.action_id == best_id) continue;
    if (seq.values.size() != best->values.size())
      throw Error(ErrorCode::InvalidArgument, "feedback sequences of unequal length");
    const bool small = seq.values.size() <= kSmallSampleLimit;
    out.push_back({seq.action_id, small ? welch_t_test(best->values, seq.values, alpha)
                                        : z_test(best->values, seq.values, alpha)});
  }
  return out;
}

/// The subset of elimination_tests that rejected H0.
inline std::vector<EliminationRecord> elimination_step(std::span<const FeedbackSequence> sequences, ActionId best_id,
                                                       double alpha, std::size_t round, std::size_t r_start) {
  auto tests = elimination_tests(sequences, best_id, alpha, round, r_start);
  std::erase_if(tests, [](const EliminationRecord& e) { return !e.test.reject; });
  return tests;
}

/// Accumulated features for one action: two disjoint reference pools and the suspect pool.
struct ActionPools {
  FeatureMatrix reference_a;
  FeatureMatrix reference_b;
  FeatureMatrix suspect;

  FeatureMatrix& operator[](Role role) {
    return role == Role::ReferenceA ? reference_a : role == Role::ReferenceB ? reference_b : suspect;
  }
  const FeatureMatrix& operator[](Role role) const {
    return role == Role::ReferenceA ? reference_a : role == Role::ReferenceB ? reference_b : suspect;
  }
};

inline constexpr Role kAllRoles[] = {Role::ReferenceA, Role::ReferenceB, Role::Suspect};

namespace seed_tag {
inline constexpr std::uint64_t kQuery = hash_label("query");
inline constexpr std::uint64_t kSubsample = hash_label("subsample");
}  // namespace seed_tag

inline std::uint64_t query_seed(std::uint64_t master, ActionId id, std::size_t round, Role role) {
  return derive_seed({master, seed_tag::kQuery, id.value, round, static_cast<std::uint64_t>(role)});
}

inline std::uint64_t subsample_seed(std::uint64_t master, ActionId id, std::size_t round, std::size_t k, Role role) {
  return derive_seed({master, seed_tag::kSubsample, id.value, round, k, static_cast<std::uint64_t>(role)});
}

/// The r feedbacks of round r: feedback k is the relative KL over fits on n*k
/// vectors per source, a seeded subsample for k < r and the full pool for k = r.
inline std::vector<double> round_feedback(const Action& action, const ActionPools& pools, std::size_t round,
                                          const AutomatonConfig& config) {
  if (round < 1) throw Error(ErrorCode::InvalidArgument, "rounds are numbered from 1");
  const std::size_t n = config.n_per_round;
  for (Role role : kAllRoles) {
    if (pools[role].rows() < n * round)
      throw Error(ErrorCode::InsufficientPool, std::string(to_string(role)) + " pool of action " +
                                                   to_string(action.id) + " holds " +
                                                   std::to_string(pools[role].rows()) + " vectors, need " +
                                                   std::to_string(n * round));
  }
  const std::size_t dim = pools.suspect.dim();
  std::vector<double> out;
  out.reserve(round);
  for (std::size_t k = 1; k <= round; ++k) {
    const std::size_t size = n * k;
    const CovarianceMode mode = effective_mode(config.covariance_mode, size, dim);
    auto fit = [&](Role role) {
      const FeatureMatrix& pool = pools[role];
      if (k == round) return fit_gaussian(pool, mode, config.ridge);
      Rng rng(subsample_seed(config.master_seed, action.id, round, k, role));
      const auto idx = rng.sample_without_replacement(pool.rows(), size);
      return fit_gaussian(pool.select_rows(idx), mode, config.ridge);
    };
    const GaussianEstimate p = fit(Role::ReferenceA);
    const GaussianEstimate p_prime = fit(Role::ReferenceB);
    const GaussianEstimate q = fit(Role::Suspect);
    out.push_back(relative_kl(p, p_prime, q, config.denom_floor).beta);
  }
  return out;
}

struct RewardEntry {
  ActionId action_id;
  double reward = 0.0;
  std::size_t feedback_count = 0;
};

struct RoundRecord {
  std::size_t round = 0;
  std::vector<ActionId> action_set;
  std::vector<RewardEntry> rewards;
  ActionId best;
  std::vector<EliminationRecord> tests;
  std::vector<ActionId> eliminated;
};

struct AutomatonResult {
  Action chosen_action;
  double estimated_reward = 0.0;
  std::size_t rounds_run = 0;
  std::vector<Action> surviving_actions;
  std::vector<RoundRecord> trace;
  QueryCost cost;
};

/// A feature source failed mid-run; carries everything computed so far.
class AutomatonAborted : public Error {
 public:
  AutomatonAborted(const std::string& what, AutomatonResult partial)
      : Error(ErrorCode::EnvironmentFailure, what), partial_(std::move(partial)) {}
  const AutomatonResult& partial() const { return partial_; }

 private:
  AutomatonResult partial_;
};

/// Single-owner state of one automaton run over a fixed initial action set.
class PromptAutomaton {
 public:
  PromptAutomaton(const Environment& env, std::vector<Action> actions, AutomatonConfig config)
      : env_(env), config_(std::move(config)), actions_(std::move(actions)) {
    config_.validate();
    if (actions_.empty()) throw Error(ErrorCode::EmptyActionSet, "automaton needs at least one action");
    for (std::size_t i = 0; i < actions_.size(); ++i)
      for (std::size_t j = i + 1; j < actions_.size(); ++j)
        if (actions_[i].id == actions_[j].id)
          throw Error(ErrorCode::InvalidArgument, "duplicate action id " + to_string(actions_[i].id));
    for (const auto& a : actions_) {
      states_.push_back(ActionState{a, {}, FeedbackSequence{a.id, {}, 0}});
      alive_.push_back(states_.size() - 1);
    }
  }

  /// Round loop guard; a single-action set still gets one forced round.
  bool done() const {
    if (round_ > config_.r_end) return true;
    if (alive_.size() > 1) return false;
    return round_ > 1;
  }

  std::size_t round() const { return round_; }

  /// Runs one full round: queries, feedbacks, reward update, elimination.
  void step() {
    if (done()) return;
    const std::size_t r = round_;
    run_action_work(r);

    std::vector<FeedbackSequence> snapshot;
    RoundRecord record;
    record.round = r;
    for (std::size_t idx : alive_) {
      const auto& st = states_[idx];
      snapshot.push_back(st.feedback);
      record.action_set.push_back(st.action.id);
      record.rewards.push_back({st.action.id, estimated_reward(st.feedback), st.feedback.values.size()});
    }
    record.best = select_optimal(snapshot);
    record.tests = elimination_tests(snapshot, record.best, config_.alpha, r, config_.r_start);
    for (const auto& t : record.tests)
      if (t.test.reject) record.eliminated.push_back(t.action_id);

    std::erase_if(alive_, [&](std::size_t idx) {
      return std::find(record.eliminated.begin(), record.eliminated.end(), states_[idx].action.id) !=
             record.eliminated.end();
    });
    best_ = record.best;
    for (const auto& e : record.rewards)
      if (e.action_id == record.best) best_reward_ = e.reward;
    trace_.push_back(std::move(record));
    ++round_;
  }

  AutomatonResult result() const {
    AutomatonResult out;
    out.rounds_run = trace_.size();
    out.trace = trace_;
    out.cost = ledger_.snapshot();
    for (std::size_t idx : alive_) out.surviving_actions.push_back(states_[idx].action);
    if (trace_.empty()) {
      out.chosen_action = actions_.front();
      return out;
    }
    for (const auto& st : states_)
      if (st.action.id == best_) out.chosen_action = st.action;
    out.estimated_reward = best_reward_;
    return out;
  }

  AutomatonResult run() {
    while (!done()) {
      try {
        step();
      } catch (const AutomatonAborted&) {
        throw;
      } catch (const Error& e) {
        if (!is_environment_error(e.code()) && e.code() != ErrorCode::DimensionMismatch) throw;
        throw AutomatonAborted(e.what(), result());
      }
    }
    return result();
  }

 private:
  struct ActionState {
    Action action;
    ActionPools pools;
    FeedbackSequence feedback;
  };

  void query_and_score(ActionState& st, std::size_t r) {
    for (Role role : kAllRoles) {
      FeatureMatrix batch =
          env_.source(role).sample(st.action, config_.n_per_round, query_seed(config_.master_seed, st.action.id, r, role));
      if (batch.rows() != config_.n_per_round)
        throw Error(ErrorCode::ProtocolViolation, "source returned " + std::to_string(batch.rows()) +
                                                      " vectors, asked for " + std::to_string(config_.n_per_round));
      ledger_.record(role, st.action.id, batch.rows());
      st.pools[role].append(batch);
    }
    const auto dim = st.pools.reference_a.dim();
    if (st.pools.reference_b.dim() != dim || st.pools.suspect.dim() != dim)
      throw Error(ErrorCode::DimensionMismatch, "sources disagree on feature dimension");
    const auto feedbacks = round_feedback(st.action, st.pools, r, config_);
    st.feedback.append_round(feedbacks);
  }

  void run_action_work(std::size_t r) {
    std::vector<std::exception_ptr> errors(alive_.size());
    auto work = [&](std::size_t slot) {
      try {
        query_and_score(states_[alive_[slot]], r);
      } catch (...) {
        errors[slot] = std::current_exception();
      }
    };
    const std::size_t workers = std::min(config_.threads, alive_.size());
    if (workers <= 1) {
      for (std::size_t s = 0; s < alive_.size(); ++s) work(s);
    } else {
      std::vector<std::jthread> pool;
      for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
          for (std::size_t s = w; s < alive_.size(); s += workers) work(s);
        });
    }
    // first failure in action order, regardless of scheduling
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  const Environment& env_;
  AutomatonConfig config_;
  std::vector<Action> actions_;
  std::vector<ActionState> states_;
  std::vector<std::size_t> alive_;
  std::vector<RoundRecord> trace_;
  CostLedger ledger_;
  std::size_t round_ = 1;
  ActionId best_;
  double best_reward_ = 0.0;
};

inline AutomatonResult run_prompt_automaton(const Environment& env, std::vector<Action> actions,
                                            const AutomatonConfig& config) {
  PromptAutomaton automaton(env, std::move(actions), config);
  return automaton.run();
}

}  // namespace integrity
