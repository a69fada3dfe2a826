#pragma once

// Pre-extracted features laid out as <root>/<role>/<prompt_id>.plaf. Rows are
// served as a stream: each call consumes the next `count` unread rows, so a
// file-backed run pays the same query cost a live model would.

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <string>

#include "integrity/environment.hpp"
#include "integrity/error.hpp"
#include "integrity/feature_file.hpp"

namespace integrity {

inline std::filesystem::path feature_file_path(const std::filesystem::path& root, Role role, ActionId id) {
  return root / std::string(to_string(role)) / (to_string(id) + ".plaf");
}

/// Next `count` rows of the (role, prompt) file starting at `cursor`; advances the cursor.
inline FeatureMatrix file_source_sample(const std::filesystem::path& root, Role role, ActionId id, std::size_t count,
                                        std::size_t& cursor) {
  const auto path = feature_file_path(root, role, id);
  if (!std::filesystem::exists(path)) throw Error(ErrorCode::UnknownPrompt, "missing feature file " + path.string());
  const FeatureMatrix all = read_feature_file(path);
  if (cursor + count > all.rows())
    throw Error(ErrorCode::PoolExhausted, path.string() + " has " + std::to_string(all.rows() - std::min(cursor, all.rows())) +
                                              " unread rows, " + std::to_string(count) + " requested");
  FeatureMatrix out = all.slice_rows(cursor, count);
  cursor += count;
  return out;
}

class FileSource final : public FeatureSource {
 public:
  FileSource(std::filesystem::path root, Role role) : root_(std::move(root)), role_(role) {}

  /// The stream seed is ignored: rows are consumed in file order.
  FeatureMatrix sample(const Action& action, std::size_t count, std::uint64_t /*stream_seed*/) override {
    std::lock_guard lock(mutex_);
    auto it = pools_.find(action.id);
    if (it == pools_.end()) {
      const auto path = feature_file_path(root_, role_, action.id);
      if (!std::filesystem::exists(path))
        throw Error(ErrorCode::UnknownPrompt, "missing feature file " + path.string());
      it = pools_.emplace(action.id, Pool{read_feature_file(path), 0}).first;
    }
    Pool& pool = it->second;
    if (pool.cursor + count > pool.rows.rows())
      throw Error(ErrorCode::PoolExhausted, feature_file_path(root_, role_, action.id).string() + " has " +
                                                std::to_string(pool.rows.rows() - pool.cursor) + " unread rows, " +
                                                std::to_string(count) + " requested");
    FeatureMatrix out = pool.rows.slice_rows(pool.cursor, count);
    pool.cursor += count;
    return out;
  }

  std::size_t cursor(ActionId id) const {
    std::lock_guard lock(mutex_);
    const auto it = pools_.find(id);
    return it == pools_.end() ? 0 : it->second.cursor;
  }

 private:
  struct Pool {
    FeatureMatrix rows;
    std::size_t cursor = 0;
  };

  std::filesystem::path root_;
  Role role_;
  mutable std::mutex mutex_;
  std::map<ActionId, Pool> pools_;
};

inline Environment make_file_environment(const std::filesystem::path& root) {
  return Environment{std::make_shared<FileSource>(root, Role::ReferenceA),
                     std::make_shared<FileSource>(root, Role::ReferenceB),
                     std::make_shared<FileSource>(root, Role::Suspect)};
}

}  // namespace integrity
