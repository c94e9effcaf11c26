#include "mimicry/studyd.hpp"

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>
#include <fstream>
#include <set>

#include "mimicry/error.hpp"
#include "mimicry/rng.hpp"

namespace mimicry::studyd {

using evalkit::AnnotationRecord;
using evalkit::ComparisonPair;
using evalkit::PairKind;
using evalkit::Question;
using evalkit::Side;
using evalkit::StudyPlan;

// ---------------------------------------------------------------------------
// AppendLog

AppendLog::AppendLog(const std::filesystem::path& path, bool fsync) : path_(path), fsync_(fsync) {
  std::string content;
  {
    std::ifstream is(path, std::ios::binary);
    if (is) content.assign(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
  }
  std::size_t complete = content.rfind('\n');
  complete = complete == std::string::npos ? 0 : complete + 1;
  std::size_t start = 0;
  while (start < complete) {
    const std::size_t end = content.find('\n', start);
    if (end > start) replayed_.push_back(content.substr(start, end - start));
    start = end + 1;
  }
  fd_ = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (fd_ < 0) throw IoError("cannot open log " + path.string() + ": " + std::strerror(errno));
  if (complete < content.size() && ::ftruncate(fd_, static_cast<off_t>(complete)) != 0) {
    throw IoError("cannot truncate torn tail of " + path.string());
  }
}

AppendLog::~AppendLog() {
  if (fd_ >= 0) ::close(fd_);
}

void AppendLog::append(const std::vector<std::string>& lines) {
  std::string buf;
  for (const auto& l : lines) {
    if (l.find('\n') != std::string::npos) throw ArgumentError("log lines must not contain newlines");
    buf += l;
    buf += '\n';
  }
  const char* p = buf.data();
  std::size_t left = buf.size();
  while (left > 0) {
    const ssize_t n = ::write(fd_, p, left);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw IoError("append to " + path_.string() + " failed: " + std::strerror(errno));
    }
    p += n;
    left -= static_cast<std::size_t>(n);
  }
  if (fsync_ && ::fsync(fd_) != 0) throw IoError("fsync of " + path_.string() + " failed");
}

// ---------------------------------------------------------------------------
// Service

namespace {

std::int64_t wall_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch())
      .count();
}

}  // namespace

Service::Service(std::vector<StudyPlan> plans, const std::filesystem::path& data_dir, Options options)
    : options_(std::move(options)) {
  if (plans.empty()) throw ArgumentError("studyd needs at least one plan");
  if (!options_.clock) options_.clock = wall_ms;
  std::filesystem::create_directories(data_dir);
  for (auto& plan : plans) {
    if (plan.plan_id.empty()) throw ArgumentError("plan without an id");
    const std::string id = plan.plan_id;
    if (plans_.count(id)) throw ArgumentError("duplicate plan id " + id);
    PlanState& ps = plans_[id];
    ps.plan = std::move(plan);
    for (const auto& p : ps.plan.pairs) ps.training_pairs += p.kind == PairKind::training;
    ps.records_log = std::make_unique<AppendLog>(data_dir / (id + ".records.jsonl"), options_.fsync);
    ps.sessions_log = std::make_unique<AppendLog>(data_dir / (id + ".sessions.jsonl"), options_.fsync);
    replay(ps);
  }
}

Service::PlanState& Service::state(const std::string& plan_id) {
  auto it = plans_.find(plan_id);
  if (it == plans_.end()) throw NotFoundError("unknown plan " + plan_id);
  return it->second;
}

const Service::PlanState& Service::state(const std::string& plan_id) const {
  auto it = plans_.find(plan_id);
  if (it == plans_.end()) throw NotFoundError("unknown plan " + plan_id);
  return it->second;
}

const StudyPlan& Service::plan(const std::string& plan_id) const { return state(plan_id).plan; }

std::vector<std::string> Service::plan_ids() const {
  std::vector<std::string> out;
  for (const auto& [id, ps] : plans_) out.push_back(id);
  return out;
}

Service::SessionState Service::make_session(const PlanState& ps, const std::string& annotator, Viewport vp) const {
  SessionState s;
  s.info.annotator_id = annotator;
  s.info.plan_id = ps.plan.plan_id;
  s.info.viewport = vp;
  s.info.shuffle_seed = derive_seed(ps.plan.seed, "annotator:" + annotator);
  s.order = ps.plan.order_for(annotator);
  return s;
}

void Service::advance(SessionState& s, const PlanState& ps) const {
  // A pair is done once both target questions are stored.
  while (s.info.cursor < s.order.size()) {
    const auto& p = ps.plan.pairs[s.order[s.info.cursor]];
    auto it = s.answered.find(p.pair_id);
    if (it == s.answered.end() || it->second.size() < 2) break;
    ++s.info.cursor;
  }
  s.info.training_passed = s.info.cursor >= ps.training_pairs;
}

void Service::replay(PlanState& ps) {
  for (const auto& line : ps.sessions_log->replayed()) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
      throw DataError("corrupt session log line in " + ps.sessions_log->path().string());
    }
    const std::string annotator = j.at("annotator_id").get<std::string>();
    if (sessions_.count(annotator)) continue;
    const Viewport vp{j.value("viewport_width", 0), j.value("viewport_height", 0)};
    sessions_.emplace(annotator, make_session(ps, annotator, vp));
  }
  std::set<std::tuple<std::string, std::string, Question>> seen;
  for (const auto& line : ps.records_log->replayed()) {
    const AnnotationRecord r = evalkit::record_from_line(line);
    if (!seen.insert({r.annotator_id, r.pair_id, r.question}).second) continue;  // exactly once after replay
    ps.lines.push_back(evalkit::record_to_line(r));
    auto it = sessions_.find(r.annotator_id);
    if (it == sessions_.end()) {
      it = sessions_.emplace(r.annotator_id, make_session(ps, r.annotator_id, {})).first;
    }
    it->second.answered[r.pair_id].insert(r.question);
  }
  for (auto& [id, s] : sessions_) {
    if (s.info.plan_id == ps.plan.plan_id) advance(s, ps);
  }
}

Session Service::start_session(const std::string& annotator_id, Viewport viewport, const std::string& plan_id) {
  if (annotator_id.empty() || annotator_id.size() > 128) throw ValidationError("annotator id must be 1-128 characters");
  for (unsigned char c : annotator_id) {
    if (c < 0x21 || c == 0x7f) throw ValidationError("annotator id contains whitespace or control characters");
  }
  if (viewport.width < options_.min_viewport.width || viewport.height < options_.min_viewport.height) {
    throw ValidationError("viewport " + std::to_string(viewport.width) + "x" + std::to_string(viewport.height) +
                          " is below the desktop minimum " + std::to_string(options_.min_viewport.width) + "x" +
                          std::to_string(options_.min_viewport.height));
  }
  std::lock_guard write(write_mutex_);
  std::string pid = plan_id;
  if (pid.empty()) {
    if (plans_.size() != 1) throw ValidationError("plan_id is required when several plans are served");
    pid = plans_.begin()->first;
  }
  PlanState& ps = state(pid);
  {
    std::shared_lock read(mutex_);
    auto it = sessions_.find(annotator_id);
    if (it != sessions_.end()) {
      if (it->second.info.plan_id != pid) throw ValidationError("annotator already belongs to another plan");
      return it->second.info;
    }
  }
  const nlohmann::json entry{{"annotator_id", annotator_id},
                             {"viewport_width", viewport.width},
                             {"viewport_height", viewport.height},
                             {"timestamp_ms", options_.clock()}};
  ps.sessions_log->append({entry.dump()});
  std::unique_lock lock(mutex_);
  SessionState s = make_session(ps, annotator_id, viewport);
  advance(s, ps);
  return sessions_.emplace(annotator_id, std::move(s)).first->second.info;
}

Session Service::session(const std::string& annotator_id) const {
  std::shared_lock lock(mutex_);
  auto it = sessions_.find(annotator_id);
  if (it == sessions_.end()) throw AuthError("unknown annotator " + annotator_id);
  return it->second.info;
}

nlohmann::json Service::next_task(const std::string& annotator_id) const {
  std::shared_lock lock(mutex_);
  auto it = sessions_.find(annotator_id);
  if (it == sessions_.end()) throw AuthError("unknown annotator " + annotator_id);
  const SessionState& s = it->second;
  const PlanState& ps = state(s.info.plan_id);
  nlohmann::json task{{"plan_id", ps.plan.plan_id},
                      {"cursor", s.info.cursor},
                      {"total", s.order.size()},
                      {"training_passed", s.info.training_passed}};
  if (s.info.cursor >= s.order.size()) {
    task["done"] = true;
    return task;
  }
  const ComparisonPair& p = ps.plan.pairs[s.order[s.info.cursor]];
  task["done"] = false;
  task["pair_id"] = p.pair_id;
  task["left"] = "/files/" + p.left;
  task["right"] = "/files/" + p.right;
  task["gallery"] = "/gallery/" + p.artist_id;
  task["prompt"] = p.prompt;
  task["training"] = p.kind == PairKind::training;
  if (p.kind == PairKind::training) task["training_question"] = evalkit::kQuestionOrder.at(p.training_question);
  task["questions"] = evalkit::kQuestionOrder;
  return task;
}

nlohmann::json Service::submit_answer(const std::string& annotator_id, const std::string& pair_id,
                                      const nlohmann::json& answers) {
  std::lock_guard write(write_mutex_);
  SessionState* s = nullptr;
  {
    std::shared_lock lock(mutex_);
    auto it = sessions_.find(annotator_id);
    if (it == sessions_.end()) throw AuthError("unknown annotator " + annotator_id);
    s = &it->second;
  }
  PlanState& ps = state(s->info.plan_id);
  if (s->answered.count(pair_id) && s->answered.at(pair_id).size() >= 2) {
    throw SequenceError("pair " + pair_id + " was already answered");
  }
  if (s->info.cursor >= s->order.size()) throw SequenceError("study already completed");
  const ComparisonPair& p = ps.plan.pairs[s->order[s->info.cursor]];
  if (p.pair_id != pair_id) throw SequenceError("expected pair " + p.pair_id + ", got " + pair_id);

  if (!answers.is_object()) throw ValidationError("answers must be an object");
  std::array<Side, evalkit::kQuestionOrder.size()> choice{};
  for (std::size_t i = 0; i < evalkit::kQuestionOrder.size(); ++i) {
    const char* q = evalkit::kQuestionOrder[i];
    if (!answers.contains(q) || !answers.at(q).is_string()) throw ValidationError(std::string("missing answer for ") + q);
    try {
      choice[i] = evalkit::parse_side(answers.at(q).get<std::string>());
    } catch (const ArgumentError&) {
      throw ValidationError(std::string("answer for ") + q + " must be left or right");
    }
  }
  if (answers.size() != evalkit::kQuestionOrder.size()) throw ValidationError("unexpected answer fields");
  if (p.kind == PairKind::training && choice[static_cast<std::size_t>(p.training_question)] != p.ground_truth) {
    throw ValidationError(std::string("training answer for ") + evalkit::kQuestionOrder.at(p.training_question) +
                          " is not correct; look again");
  }

  const std::int64_t now = options_.clock();
  std::vector<std::string> lines;
  const auto stored = s->answered.count(pair_id) ? s->answered.at(pair_id) : std::set<Question>{};
  for (Question q : {Question::quality, Question::style}) {
    if (stored.count(q)) continue;  // half of a torn earlier write survived
    AnnotationRecord r;
    r.annotator_id = annotator_id;
    r.plan_id = ps.plan.plan_id;
    r.pair_id = pair_id;
    r.question = q;
    r.choice = choice[q == Question::quality ? 4 : 5];
    r.dummies = {choice[0], choice[1], choice[2], choice[3]};
    r.timestamp_ms = now;
    lines.push_back(evalkit::record_to_line(r));
  }
  ps.records_log->append(lines);
  ++batches_;
  if (options_.after_append) options_.after_append(batches_);

  std::unique_lock lock(mutex_);
  for (auto& l : lines) ps.lines.push_back(std::move(l));
  s->answered[pair_id] = {Question::quality, Question::style};
  advance(*s, ps);
  return {{"ok", true},
          {"cursor", s->info.cursor},
          {"training_passed", s->info.training_passed},
          {"done", s->info.cursor >= s->order.size()}};
}

std::vector<std::string> Service::export_lines(const std::string& plan_id) const {
  std::shared_lock lock(mutex_);
  return state(plan_id).lines;
}

std::vector<AnnotationRecord> Service::export_records(const std::string& plan_id) const {
  std::vector<AnnotationRecord> out;
  for (const auto& l : export_lines(plan_id)) out.push_back(evalkit::record_from_line(l));
  return out;
}

}  // namespace mimicry::studyd
