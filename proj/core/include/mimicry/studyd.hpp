#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <shared_mutex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mimicry/evalkit.hpp"

namespace mimicry::studyd {

struct Viewport {
  int width = 0;
  int height = 0;
};

struct Options {
  Viewport min_viewport{1280, 800};
  bool fsync = true;
  /// Milliseconds since the epoch; replaceable for tests.
  std::function<std::int64_t()> clock;
  /// Called after a record batch is durable and before the ack is built.
  /// Tests use it to simulate a crash in that window.
  std::function<void(std::size_t appended_batches)> after_append;
};

struct Session {
  std::string annotator_id;
  std::string plan_id;
  std::size_t cursor = 0;
  bool training_passed = false;
  std::uint64_t shuffle_seed = 0;
  Viewport viewport;
};

/// Append-only JSON-lines file. Appends are serialized by the caller; a
/// trailing partial line left by a crash is cut off when the file is opened.
class AppendLog {
 public:
  AppendLog(const std::filesystem::path& path, bool fsync);
  ~AppendLog();
  AppendLog(const AppendLog&) = delete;
  AppendLog& operator=(const AppendLog&) = delete;

  /// Complete lines present when the log was opened.
  const std::vector<std::string>& replayed() const noexcept { return replayed_; }
  /// Writes all lines with one write call, then fsyncs.
  void append(const std::vector<std::string>& lines);
  const std::filesystem::path& path() const noexcept { return path_; }

 private:
  std::filesystem::path path_;
  int fd_ = -1;
  bool fsync_ = true;
  std::vector<std::string> replayed_;
};

/// The study service: sessions, serving order, answer validation and the
/// durable record log, independent of the HTTP layer.
class Service {
 public:
  Service(std::vector<evalkit::StudyPlan> plans, const std::filesystem::path& data_dir, Options options = {});

  /// Idempotent for an existing annotator. `plan_id` may be empty when the
  /// service hosts a single plan.
  Session start_session(const std::string& annotator_id, Viewport viewport, const std::string& plan_id = "");

  Session session(const std::string& annotator_id) const;  ///< throws AuthError

  /// Task payload for the cursor pair, or {"done": true}. Never contains the
  /// ground truth.
  nlohmann::json next_task(const std::string& annotator_id) const;

  /// `answers` maps each of the six question names to "left" or "right".
  /// Returns the ack {cursor, training_passed, done}.
  nlohmann::json submit_answer(const std::string& annotator_id, const std::string& pair_id,
                               const nlohmann::json& answers);

  /// Snapshot of the plan's records in append order, one JSON line each.
  std::vector<std::string> export_lines(const std::string& plan_id) const;
  std::vector<evalkit::AnnotationRecord> export_records(const std::string& plan_id) const;

  const evalkit::StudyPlan& plan(const std::string& plan_id) const;  ///< throws NotFoundError
  std::vector<std::string> plan_ids() const;

 private:
  struct PlanState {
    evalkit::StudyPlan plan;
    std::unique_ptr<AppendLog> records_log;
    std::unique_ptr<AppendLog> sessions_log;
    std::vector<std::string> lines;  ///< mirrors the records log
    std::size_t training_pairs = 0;
  };
  struct SessionState {
    Session info;
    std::vector<std::size_t> order;
    std::map<std::string, std::set<evalkit::Question>> answered;  ///< stored target questions per pair
  };

  PlanState& state(const std::string& plan_id);
  const PlanState& state(const std::string& plan_id) const;
  void replay(PlanState& ps);
  SessionState make_session(const PlanState& ps, const std::string& annotator, Viewport vp) const;
  void advance(SessionState& s, const PlanState& ps) const;

  Options options_;
  std::map<std::string, PlanState> plans_;
  std::map<std::string, SessionState> sessions_;
  mutable std::shared_mutex mutex_;
  std::mutex write_mutex_;
  std::size_t batches_ = 0;
};

}  // namespace mimicry::studyd
