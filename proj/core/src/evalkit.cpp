#include "mimicry/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

#include "mimicry/error.hpp"
#include "mimicry/guidance.hpp"
#include "mimicry/rng.hpp"

namespace mimicry::evalkit {

namespace {

template <typename E, std::size_t N>
E parse_enum(const std::string& s, const std::array<const char*, N>& names, const char* what) {
  for (std::size_t i = 0; i < N; ++i) {
    if (s == names[i]) return static_cast<E>(i);
  }
  throw ArgumentError(std::string("unknown ") + what + ": " + s);
}

constexpr std::array<const char*, 2> kSideNames = {"left", "right"};
constexpr std::array<const char*, 2> kQuestionNames = {"quality", "style"};
constexpr std::array<const char*, 3> kModeNames = {"quality", "style", "avg"};
constexpr std::array<const char*, 4> kKindNames = {"scenario", "quality-control", "style-control", "training"};

constexpr std::array<const char*, 5> kMethodOrder = {"naive", "gaussian", "impress++", "diffpure", "noisy-upscale"};

std::string two_digits(std::size_t i) {
  std::string s = std::to_string(i);
  return s.size() < 2 ? "0" + s : s;
}

}  // namespace

std::string to_string(Side s) { return kSideNames[static_cast<int>(s)]; }
std::string to_string(Question q) { return kQuestionNames[static_cast<int>(q)]; }
std::string to_string(QuestionMode m) { return kModeNames[static_cast<int>(m)]; }
std::string to_string(PairKind k) { return kKindNames[static_cast<int>(k)]; }
Side parse_side(const std::string& s) { return parse_enum<Side>(s, kSideNames, "side"); }
Question parse_question(const std::string& s) { return parse_enum<Question>(s, kQuestionNames, "question"); }
QuestionMode parse_question_mode(const std::string& s) {
  return parse_enum<QuestionMode>(s, kModeNames, "question mode");
}
PairKind parse_pair_kind(const std::string& s) { return parse_enum<PairKind>(s, kKindNames, "pair kind"); }

// ---------------------------------------------------------------------------
// Plan

std::string scenario_image_ref(const std::string& artist, const std::string& scenario, std::size_t prompt_index) {
  return "images/" + artist + "/" + scenario + "/p" + two_digits(prompt_index) + ".png";
}

std::string baseline_image_ref(const std::string& artist, std::size_t prompt_index) {
  return "images/" + artist + "/baseline/p" + two_digits(prompt_index) + ".png";
}

std::string control_image_ref(const std::string& artist, PairKind kind, int index, bool original) {
  const std::string tag = kind == PairKind::quality_control ? "quality" : "style";
  return "controls/" + artist + "/" + tag + "_" + two_digits(index) + (original ? "_original" : "_variant") + ".png";
}

std::string training_image_ref(int index, bool correct) {
  return "training/t" + two_digits(index) + (correct ? "_correct" : "_wrong") + ".png";
}

StudyPlan build_study(const StudyRequest& req) {
  if (req.prompts.empty()) throw ArgumentError("study needs at least one prompt");
  if (req.scenarios.empty()) throw ArgumentError("study needs at least one scenario");
  if (req.quality_controls < 0 || req.style_controls < 0 || req.training_pairs < 0) {
    throw ArgumentError("control and training counts must be non-negative");
  }
  if (req.annotators_per_pair < 1) throw ArgumentError("annotators_per_pair must be positive");
  {
    std::set<std::string> seen;
    for (const auto& s : req.scenarios) {
      if (s.empty()) throw ArgumentError("empty scenario id");
      if (!seen.insert(s).second) throw ArgumentError("duplicate scenario id: " + s);
    }
  }

  StudyPlan plan;
  plan.artist_id = req.artist_id;
  plan.seed = req.seed;
  plan.annotators_per_pair = req.annotators_per_pair;
  plan.prompts = req.prompts;
  plan.scenarios = req.scenarios;
  plan.counts = {static_cast<int>(req.prompts.size() * req.scenarios.size()), req.quality_controls,
                 req.style_controls, req.training_pairs};

  Rng rng(derive_seed(req.seed, "study:" + req.artist_id));
  std::bernoulli_distribution coin(0.5);
  auto place = [&](ComparisonPair& p, const std::string& good, const std::string& bad) {
    p.ground_truth = coin(rng) ? Side::left : Side::right;
    p.left = p.ground_truth == Side::left ? good : bad;
    p.right = p.ground_truth == Side::left ? bad : good;
  };

  std::vector<ComparisonPair> body;
  for (const auto& scenario : req.scenarios) {
    for (std::size_t i = 0; i < req.prompts.size(); ++i) {
      ComparisonPair p;
      p.pair_id = "s:" + scenario + ":p" + two_digits(i);
      p.kind = PairKind::scenario;
      p.artist_id = req.artist_id;
      p.prompt = req.prompts[i];
      p.scenario = scenario;
      place(p, scenario_image_ref(req.artist_id, scenario, i), baseline_image_ref(req.artist_id, i));
      body.push_back(std::move(p));
    }
  }
  for (PairKind kind : {PairKind::quality_control, PairKind::style_control}) {
    const int n = kind == PairKind::quality_control ? req.quality_controls : req.style_controls;
    for (int i = 0; i < n; ++i) {
      ComparisonPair p;
      p.pair_id = std::string(kind == PairKind::quality_control ? "qc:" : "sc:") + two_digits(i);
      p.kind = kind;
      p.artist_id = req.artist_id;
      p.scenario = to_string(kind);
      place(p, control_image_ref(req.artist_id, kind, i, true), control_image_ref(req.artist_id, kind, i, false));
      body.push_back(std::move(p));
    }
  }
  std::shuffle(body.begin(), body.end(), rng);

  for (int i = 0; i < req.training_pairs; ++i) {
    ComparisonPair p;
    p.pair_id = "t:" + two_digits(i);
    p.kind = PairKind::training;
    p.artist_id = req.artist_id;
    p.scenario = "training";
    p.training_question = i % static_cast<int>(kQuestionOrder.size());
    place(p, training_image_ref(i, true), training_image_ref(i, false));
    plan.pairs.push_back(std::move(p));
  }
  for (auto& p : body) plan.pairs.push_back(std::move(p));

  std::uint64_t h = fnv1a64(req.artist_id);
  h = fnv1a64(std::to_string(req.seed), h);
  for (const auto& p : plan.pairs) h = fnv1a64(p.pair_id + p.left, h);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  plan.plan_id = "plan-" + std::string(buf, 12);
  return plan;
}

std::vector<std::size_t> StudyPlan::order_for(const std::string& annotator_id) const {
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  const auto first = std::find_if(order.begin(), order.end(),
                                   [&](std::size_t i) { return pairs[i].kind != PairKind::training; });
  Rng rng(derive_seed(seed, "annotator:" + annotator_id));
  std::shuffle(first, order.end(), rng);
  return order;
}

const ComparisonPair* StudyPlan::find(const std::string& pair_id) const noexcept {
  for (const auto& p : pairs) {
    if (p.pair_id == pair_id) return &p;
  }
  return nullptr;
}

const ComparisonPair& StudyPlan::pair(const std::string& pair_id) const {
  const ComparisonPair* p = find(pair_id);
  if (!p) throw DataError("record references unknown pair " + pair_id);
  return *p;
}

// ---------------------------------------------------------------------------
// Controls

ControlImages make_quality_control(const Image& image, double sigma, std::uint64_t seed) {
  if (!(sigma > 0.0)) throw ArgumentError("quality control noise must be positive");
  validate(image);
  Rng rng(derive_seed(seed, "quality-control"));
  std::normal_distribution<double> normal(0.0, sigma);
  Image noisy = image;
  for (double& v : noisy.data) v += normal(rng);
  return {quantize8(image), quantize8(clamped01(std::move(noisy)))};
}

ControlImages make_style_control(const DiffusionBackend& backend, const Image& image, std::uint64_t seed,
                                 double strength, double guidance) {
  if (!(strength > 0.0 && strength <= 1.0)) throw ArgumentError("style control strength must be in (0, 1]");
  validate(image);
  GuidanceOptions opts;
  opts.scale = guidance;
  const Image variant =
      img2img(backend, image, strength, backend.embed_text(kStyleControlPrompt), opts, 50, derive_seed(seed, "style-control"));
  return {image, variant};
}

// ---------------------------------------------------------------------------
// Statistics

namespace {

bool graded(const ComparisonPair& p, Question q) {
  return (p.kind == PairKind::quality_control && q == Question::quality) ||
         (p.kind == PairKind::style_control && q == Question::style);
}

// pair index -> question -> annotator -> choice
using VoteMap = std::map<std::string, std::map<Question, std::map<std::string, Side>>>;

VoteMap collect(const std::vector<AnnotationRecord>& records, const StudyPlan& plan) {
  VoteMap votes;
  for (const auto& r : records) {
    plan.pair(r.pair_id);
    auto [it, fresh] = votes[r.pair_id][r.question].emplace(r.annotator_id, r.choice);
    if (!fresh) {
      throw DataError("duplicate record for (" + r.annotator_id + ", " + r.pair_id + ", " + to_string(r.question) + ")");
    }
  }
  return votes;
}

}  // namespace

FilterResult filter_annotators(const std::vector<AnnotationRecord>& records, const StudyPlan& plan, double threshold) {
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw ArgumentError("threshold must be within [0, 1]");
  std::map<std::string, std::pair<int, int>> tally;  // annotator -> (correct, answered)
  for (const auto& r : records) {
    const ComparisonPair& p = plan.pair(r.pair_id);
    auto& t = tally[r.annotator_id];
    if (!graded(p, r.question)) continue;
    ++t.second;
    if (r.choice == p.ground_truth) ++t.first;
  }
  FilterResult out;
  for (const auto& [id, t] : tally) {
    // integer comparison avoids 0.8 * 20 rounding below 16
    const bool keep = t.second > 0 && static_cast<double>(t.first) >= threshold * t.second - 1e-9;
    (keep ? out.kept : out.dropped).push_back(id);
  }
  return out;
}

std::vector<AnnotationRecord> keep_annotators(const std::vector<AnnotationRecord>& records,
                                              const std::vector<std::string>& kept) {
  const std::set<std::string> keep(kept.begin(), kept.end());
  std::vector<AnnotationRecord> out;
  for (const auto& r : records) {
    if (keep.count(r.annotator_id)) out.push_back(r);
  }
  return out;
}

namespace {

std::vector<const ComparisonPair*> scenario_pairs(const StudyPlan& plan, const std::string& artist,
                                                  const std::string& scenario) {
  std::vector<const ComparisonPair*> out;
  for (const auto& p : plan.pairs) {
    if (p.kind == PairKind::scenario && p.artist_id == artist && p.scenario == scenario) out.push_back(&p);
  }
  if (out.empty()) throw DataError("plan has no pairs for artist " + artist + ", scenario " + scenario);
  return out;
}

Rate question_rate(const VoteMap& votes, const std::vector<const ComparisonPair*>& pairs, Question q, int per_pair,
                   const RateOptions& options) {
  std::set<std::string> roster;
  for (const auto* p : pairs) {
    auto pit = votes.find(p->pair_id);
    if (pit == votes.end()) continue;
    auto qit = pit->second.find(q);
    if (qit == pit->second.end()) continue;
    for (const auto& [a, c] : qit->second) roster.insert(a);
  }
  Rate r;
  std::vector<std::string> missing;
  for (const auto* p : pairs) {
    const std::map<std::string, Side>* vs = nullptr;
    if (auto pit = votes.find(p->pair_id); pit != votes.end()) {
      if (auto qit = pit->second.find(q); qit != pit->second.end()) vs = &qit->second;
    }
    const int n = vs ? static_cast<int>(vs->size()) : 0;
    if (n > per_pair) {
      throw DataError("pair " + p->pair_id + " has " + std::to_string(n) + " " + to_string(q) + " votes, expected " +
                      std::to_string(per_pair));
    }
    r.expected += per_pair;
    r.answered += n;
    if (vs) {
      for (const auto& [a, c] : *vs) {
        if (c == p->ground_truth) ++r.preferred;
      }
    }
    if (n < per_pair) {
      int listed = 0;
      for (const auto& a : roster) {
        if (!vs || !vs->count(a)) {
          missing.push_back(p->pair_id + "/" + to_string(q) + "/" + a);
          ++listed;
        }
      }
      // slots nobody on the roster could fill are numbered so they stay distinct
      for (int k = 1; listed < per_pair - n; ++listed, ++k) {
        missing.push_back(p->pair_id + "/" + to_string(q) + "/?" + std::to_string(k));
      }
    }
  }
  if (!missing.empty()) {
    if (!options.allow_partial) {
      throw PartialDataError(std::to_string(missing.size()) + " vote slot(s) missing", std::move(missing));
    }
    r.partial = true;
  }
  if (r.answered == 0) throw DataError("no votes recorded for the requested pairs");
  r.percent = 100.0 * r.preferred / r.answered;
  return r;
}

}  // namespace

Rate success_rate(const std::vector<AnnotationRecord>& records, const StudyPlan& plan, const std::string& artist,
                  const std::string& scenario, QuestionMode mode, const RateOptions& options) {
  const auto pairs = scenario_pairs(plan, artist, scenario);
  const VoteMap votes = collect(records, plan);
  if (mode != QuestionMode::avg) {
    const Question q = mode == QuestionMode::quality ? Question::quality : Question::style;
    return question_rate(votes, pairs, q, plan.annotators_per_pair, options);
  }
  const Rate a = question_rate(votes, pairs, Question::quality, plan.annotators_per_pair, options);
  const Rate b = question_rate(votes, pairs, Question::style, plan.annotators_per_pair, options);
  Rate r;
  r.percent = 0.5 * (a.percent + b.percent);
  r.preferred = a.preferred + b.preferred;
  r.answered = a.answered + b.answered;
  r.expected = a.expected + b.expected;
  r.partial = a.partial || b.partial;
  return r;
}

double aggregate_summary(const std::vector<double>& per_artist, std::size_t expected_count) {
  if (per_artist.size() != expected_count) {
    throw ArgumentError("expected " + std::to_string(expected_count) + " per-artist values, got " +
                        std::to_string(per_artist.size()));
  }
  if (per_artist.empty()) throw ArgumentError("no per-artist values");
  const double mean = std::accumulate(per_artist.begin(), per_artist.end(), 0.0) / per_artist.size();
  return std::round(mean * 10.0) / 10.0;
}

int method_rank(const std::string& method) {
  const std::string name = method.substr(method.rfind('/') == std::string::npos ? 0 : method.rfind('/') + 1);
  for (std::size_t i = 0; i < kMethodOrder.size(); ++i) {
    if (name == kMethodOrder[i]) return static_cast<int>(i);
  }
  return static_cast<int>(kMethodOrder.size());
}

BestOfK best_of_k_counts(const std::vector<std::string>& methods, const std::vector<std::vector<int>>& preferred,
                         const std::vector<std::vector<int>>& votes) {
  if (methods.size() < 2) throw ArgumentError("best-of-k needs at least two methods");
  if (preferred.size() != methods.size() || votes.size() != methods.size()) {
    throw ArgumentError("vote tables do not match the method list");
  }
  const std::size_t prompts = preferred[0].size();
  if (prompts == 0) throw ArgumentError("best-of-k needs at least one prompt");
  for (std::size_t m = 0; m < methods.size(); ++m) {
    if (preferred[m].size() != prompts || votes[m].size() != prompts) {
      throw DataError("method " + methods[m] + " does not cover the shared prompts");
    }
  }
  // stable order: rank, then position in the input
  std::vector<std::size_t> order(methods.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return method_rank(methods[a]) < method_rank(methods[b]); });
  BestOfK out;
  out.tie_break = "naive<gaussian<impress++<diffpure<noisy-upscale";
  double sum = 0.0;
  for (std::size_t p = 0; p < prompts; ++p) {
    std::size_t best = order[0];
    for (std::size_t m : order) {
      if (votes[m][p] <= 0) throw DataError("method " + methods[m] + " has no votes on prompt " + std::to_string(p));
      if (preferred[m][p] > preferred[best][p]) best = m;
    }
    out.selected.push_back(methods[best]);
    sum += static_cast<double>(preferred[best][p]) / votes[best][p];
  }
  out.percent = 100.0 * sum / prompts;
  return out;
}

namespace {

BestOfK best_of_k_question(const VoteMap& votes, const StudyPlan& plan, const std::string& artist,
                           const std::vector<std::string>& scenarios, Question q, const RateOptions& options) {
  std::vector<std::vector<int>> preferred, counts;
  std::vector<std::string> shared;
  for (std::size_t m = 0; m < scenarios.size(); ++m) {
    const auto pairs = scenario_pairs(plan, artist, scenarios[m]);
    std::vector<std::string> prompts;
    for (const auto* p : pairs) prompts.push_back(p->prompt);
    std::sort(prompts.begin(), prompts.end());
    if (m == 0) {
      shared = prompts;
    } else if (prompts != shared) {
      throw DataError("scenario " + scenarios[m] + " covers different prompts than " + scenarios[0]);
    }
    // missing-slot policy is the same as for success_rate
    question_rate(votes, pairs, q, plan.annotators_per_pair, options);
    std::vector<int> pref(shared.size(), 0), cnt(shared.size(), 0);
    for (const auto* p : pairs) {
      const std::size_t idx = std::lower_bound(shared.begin(), shared.end(), p->prompt) - shared.begin();
      auto pit = votes.find(p->pair_id);
      if (pit == votes.end()) continue;
      auto qit = pit->second.find(q);
      if (qit == pit->second.end()) continue;
      for (const auto& [a, c] : qit->second) {
        ++cnt[idx];
        if (c == p->ground_truth) ++pref[idx];
      }
    }
    preferred.push_back(std::move(pref));
    counts.push_back(std::move(cnt));
  }
  return best_of_k_counts(scenarios, preferred, counts);
}

}  // namespace

BestOfK best_of_k(const std::vector<AnnotationRecord>& records, const StudyPlan& plan, const std::string& artist,
                  const std::vector<std::string>& scenarios, QuestionMode mode, const RateOptions& options) {
  if (scenarios.size() < 2) throw ArgumentError("best-of-k needs at least two methods");
  const VoteMap votes = collect(records, plan);
  if (mode != QuestionMode::avg) {
    const Question q = mode == QuestionMode::quality ? Question::quality : Question::style;
    return best_of_k_question(votes, plan, artist, scenarios, q, options);
  }
  BestOfK a = best_of_k_question(votes, plan, artist, scenarios, Question::quality, options);
  const BestOfK b = best_of_k_question(votes, plan, artist, scenarios, Question::style, options);
  a.percent = 0.5 * (a.percent + b.percent);
  a.selected.insert(a.selected.end(), b.selected.begin(), b.selected.end());
  return a;
}

Agreement interannotator_agreement(const std::vector<AnnotationRecord>& records, const StudyPlan& plan) {
  const VoteMap votes = collect(records, plan);
  Agreement out;
  for (const auto& [pair_id, by_q] : votes) {
    if (plan.pair(pair_id).kind != PairKind::scenario) continue;
    for (const auto& [q, vs] : by_q) {
      if (vs.size() != 5) {
        throw ArgumentError("agreement needs exactly 5 annotators; " + pair_id + "/" + to_string(q) + " has " +
                            std::to_string(vs.size()));
      }
      int left = 0;
      for (const auto& [a, c] : vs) left += c == Side::left;
      const int majority = std::max(left, 5 - left);
      ++out.count[majority - 3];
      ++out.comparisons;
    }
  }
  if (out.comparisons == 0) throw DataError("no scenario comparisons to measure agreement on");
  for (int i = 0; i < 3; ++i) out.percent[i] = 100.0 * out.count[i] / out.comparisons;
  return out;
}

LikertSummary likert_summary(const std::vector<int>& ratings, int threshold) {
  if (ratings.empty()) throw DataError("no Likert ratings");
  if (threshold < 1 || threshold > 5) throw ArgumentError("Likert threshold must be within 1..5");
  LikertSummary out;
  out.threshold = threshold;
  std::array<int, 5> count{};
  int success = 0;
  for (int r : ratings) {
    if (r < 1 || r > 5) throw DataError("Likert rating out of range: " + std::to_string(r));
    ++count[r - 1];
    success += r >= threshold;
  }
  for (int i = 0; i < 5; ++i) out.percent[i] = 100.0 * count[i] / ratings.size();
  out.success_percent = 100.0 * success / ratings.size();
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

void to_json(nlohmann::json& j, const ComparisonPair& p) {
  j = nlohmann::json{{"pair_id", p.pair_id},   {"kind", to_string(p.kind)}, {"artist_id", p.artist_id},
                     {"prompt", p.prompt},     {"scenario", p.scenario},    {"left", p.left},
                     {"right", p.right},       {"ground_truth", to_string(p.ground_truth)}};
  if (p.kind == PairKind::training) j["training_question"] = kQuestionOrder.at(p.training_question);
}

void from_json(const nlohmann::json& j, ComparisonPair& p) {
  p.pair_id = j.at("pair_id").get<std::string>();
  p.kind = parse_pair_kind(j.at("kind").get<std::string>());
  p.artist_id = j.value("artist_id", std::string());
  p.prompt = j.value("prompt", std::string());
  p.scenario = j.value("scenario", std::string());
  p.left = j.at("left").get<std::string>();
  p.right = j.at("right").get<std::string>();
  p.ground_truth = parse_side(j.at("ground_truth").get<std::string>());
  p.training_question = -1;
  if (j.contains("training_question")) {
    const auto q = j.at("training_question").get<std::string>();
    for (std::size_t i = 0; i < kQuestionOrder.size(); ++i) {
      if (q == kQuestionOrder[i]) p.training_question = static_cast<int>(i);
    }
    if (p.training_question < 0) throw ArgumentError("unknown training question " + q);
  }
}

void to_json(nlohmann::json& j, const StudyPlan& p) {
  j = nlohmann::json{{"schema", p.schema},
                     {"plan_id", p.plan_id},
                     {"artist_id", p.artist_id},
                     {"seed", p.seed},
                     {"annotators_per_pair", p.annotators_per_pair},
                     {"prompts", p.prompts},
                     {"scenarios", p.scenarios},
                     {"counts",
                      {{"scenario_pairs", p.counts.scenario_pairs},
                       {"quality_controls", p.counts.quality_controls},
                       {"style_controls", p.counts.style_controls},
                       {"training_pairs", p.counts.training_pairs}}},
                     {"pairs", p.pairs}};
}

void from_json(const nlohmann::json& j, StudyPlan& p) {
  p.schema = j.value("schema", 1);
  if (p.schema != 1) throw DataError("unsupported plan schema " + std::to_string(p.schema));
  p.plan_id = j.at("plan_id").get<std::string>();
  p.artist_id = j.value("artist_id", std::string());
  p.seed = j.value("seed", std::uint64_t{0});
  p.annotators_per_pair = j.value("annotators_per_pair", kAnnotatorsPerPair);
  p.prompts = j.value("prompts", std::vector<std::string>{});
  p.scenarios = j.value("scenarios", std::vector<std::string>{});
  const auto& c = j.at("counts");
  p.counts = {c.at("scenario_pairs").get<int>(), c.at("quality_controls").get<int>(),
              c.at("style_controls").get<int>(), c.at("training_pairs").get<int>()};
  p.pairs = j.at("pairs").get<std::vector<ComparisonPair>>();
}

void to_json(nlohmann::json& j, const AnnotationRecord& r) {
  j = nlohmann::json{{"schema", r.schema},
                     {"annotator_id", r.annotator_id},
                     {"plan_id", r.plan_id},
                     {"pair_id", r.pair_id},
                     {"question", to_string(r.question)},
                     {"choice", to_string(r.choice)},
                     {"dummies",
                      {{"noise", to_string(r.dummies.noise)},
                       {"artifacts", to_string(r.dummies.artifacts)},
                       {"detail", to_string(r.dummies.detail)},
                       {"prompt_fit", to_string(r.dummies.prompt_fit)}}},
                     {"timestamp_ms", r.timestamp_ms}};
}

void from_json(const nlohmann::json& j, AnnotationRecord& r) {
  r.schema = j.value("schema", 1);
  if (r.schema != 1) throw DataError("unsupported record schema " + std::to_string(r.schema));
  r.annotator_id = j.at("annotator_id").get<std::string>();
  r.plan_id = j.value("plan_id", std::string());
  r.pair_id = j.at("pair_id").get<std::string>();
  r.question = parse_question(j.at("question").get<std::string>());
  r.choice = parse_side(j.at("choice").get<std::string>());
  if (j.contains("dummies")) {
    const auto& d = j.at("dummies");
    r.dummies.noise = parse_side(d.at("noise").get<std::string>());
    r.dummies.artifacts = parse_side(d.at("artifacts").get<std::string>());
    r.dummies.detail = parse_side(d.at("detail").get<std::string>());
    r.dummies.prompt_fit = parse_side(d.at("prompt_fit").get<std::string>());
  }
  r.timestamp_ms = j.value("timestamp_ms", std::int64_t{0});
}

std::string record_to_line(const AnnotationRecord& r) { return nlohmann::json(r).dump(); }

AnnotationRecord record_from_line(const std::string& line) {
  try {
    return nlohmann::json::parse(line).get<AnnotationRecord>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed annotation record: ") + e.what());
  } catch (const ArgumentError& e) {
    throw DataError(std::string("malformed annotation record: ") + e.what());
  }
}

std::vector<AnnotationRecord> read_records(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open records " + path);
  std::vector<AnnotationRecord> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(record_from_line(line));
  }
  return out;
}

void write_records(const std::string& path, const std::vector<AnnotationRecord>& records) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write records " + path);
  for (const auto& r : records) os << record_to_line(r) << '\n';
  if (!os) throw IoError("failed writing records " + path);
}

StudyPlan read_plan(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open plan " + path);
  try {
    return nlohmann::json::parse(is).get<StudyPlan>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed plan: ") + e.what());
  }
}

void write_plan(const std::string& path, const StudyPlan& plan) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write plan " + path);
  os << nlohmann::json(plan).dump(2) << '\n';
  if (!os) throw IoError("failed writing plan " + path);
}

}  // namespace mimicry::evalkit
