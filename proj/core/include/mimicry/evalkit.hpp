#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mimicry/backend.hpp"
#include "mimicry/image.hpp"

namespace mimicry::evalkit {

enum class Side { left, right };
enum class Question { quality, style };
enum class QuestionMode { quality, style, avg };
enum class PairKind { scenario, quality_control, style_control, training };

std::string to_string(Side s);
std::string to_string(Question q);
std::string to_string(QuestionMode m);
std::string to_string(PairKind k);
Side parse_side(const std::string& s);
Question parse_question(const std::string& s);
QuestionMode parse_question_mode(const std::string& s);
PairKind parse_pair_kind(const std::string& s);

inline Side other(Side s) { return s == Side::left ? Side::right : Side::left; }

/// The six per-pair questions in the order annotators see them.
inline constexpr std::array<const char*, 6> kQuestionOrder = {"noise", "artifacts", "detail", "prompt_fit", "quality",
                                                              "style"};

inline constexpr const char* kStyleControlPrompt = "high quality photo, award winning";
inline constexpr double kQualityControlSigma = 0.3;
inline constexpr double kStyleControlStrength = 0.6;
inline constexpr double kFilterThreshold = 0.8;
inline constexpr int kAnnotatorsPerPair = 5;

struct ComparisonPair {
  std::string pair_id;
  PairKind kind = PairKind::scenario;
  std::string artist_id;
  std::string prompt;    ///< empty for controls and training pairs
  std::string scenario;  ///< "<protection>/<method>" or the control tag
  std::string left, right;  ///< image refs relative to the run directory
  Side ground_truth = Side::left;  ///< robust image for scenarios, correct image otherwise
  /// Training pairs check one question (index into kQuestionOrder).
  int training_question = -1;
};

struct StudyCounts {
  int scenario_pairs = 0;
  int quality_controls = 0;
  int style_controls = 0;
  int training_pairs = 0;

  int total() const noexcept { return scenario_pairs + quality_controls + style_controls + training_pairs; }
  bool operator==(const StudyCounts&) const = default;
};

struct StudyPlan {
  int schema = 1;
  std::string plan_id;
  std::string artist_id;
  std::uint64_t seed = 0;
  int annotators_per_pair = kAnnotatorsPerPair;
  std::vector<std::string> prompts;
  std::vector<std::string> scenarios;
  StudyCounts counts;
  std::vector<ComparisonPair> pairs;  ///< training pairs first, the rest in shuffled order

  /// Serving order for one annotator: training pairs in plan order, then a
  /// permutation of the remaining pairs seeded by the annotator id.
  std::vector<std::size_t> order_for(const std::string& annotator_id) const;

  const ComparisonPair& pair(const std::string& pair_id) const;  ///< throws DataError
  const ComparisonPair* find(const std::string& pair_id) const noexcept;
};

struct StudyRequest {
  std::string artist_id = "artist";
  std::vector<std::string> scenarios;
  std::vector<std::string> prompts;
  int quality_controls = 10;
  int style_controls = 10;
  int training_pairs = 6;
  int annotators_per_pair = kAnnotatorsPerPair;
  std::uint64_t seed = 0;
};

/// Scenario pairs compare images/<artist>/<scenario>/p<NN>.png (robust) with
/// images/<artist>/baseline/p<NN>.png. Control and training refs follow the
/// same scheme under controls/ and training/.
StudyPlan build_study(const StudyRequest& request);

/// Image refs used by build_study.
std::string scenario_image_ref(const std::string& artist, const std::string& scenario, std::size_t prompt_index);
std::string baseline_image_ref(const std::string& artist, std::size_t prompt_index);
std::string control_image_ref(const std::string& artist, PairKind kind, int index, bool original);
std::string training_image_ref(int index, bool correct);

struct ControlImages {
  Image original;
  Image variant;
};

/// Original plus a visibly noised copy (quantized to 8 bits, like a stored PNG).
ControlImages make_quality_control(const Image& image, double sigma = kQualityControlSigma, std::uint64_t seed = 0);

/// Original plus an image-to-image variant towards a photographic prompt.
ControlImages make_style_control(const DiffusionBackend& backend, const Image& image, std::uint64_t seed = 0,
                                 double strength = kStyleControlStrength, double guidance = 7.5);

struct DummyAnswers {
  Side noise = Side::left;
  Side artifacts = Side::left;
  Side detail = Side::left;
  Side prompt_fit = Side::left;
  bool operator==(const DummyAnswers&) const = default;
};

struct AnnotationRecord {
  int schema = 1;
  std::string annotator_id;
  std::string plan_id;
  std::string pair_id;
  Question question = Question::quality;
  Side choice = Side::left;
  DummyAnswers dummies;
  std::int64_t timestamp_ms = 0;
  bool operator==(const AnnotationRecord&) const = default;
};

struct FilterResult {
  std::vector<std::string> kept;
  std::vector<std::string> dropped;
};

/// Quality controls are graded on the quality question and style controls on
/// the style question. Annotators without any graded control are dropped.
FilterResult filter_annotators(const std::vector<AnnotationRecord>& records, const StudyPlan& plan,
                               double threshold = kFilterThreshold);

/// Records of the kept annotators only.
std::vector<AnnotationRecord> keep_annotators(const std::vector<AnnotationRecord>& records,
                                              const std::vector<std::string>& kept);

struct RateOptions {
  bool allow_partial = false;
};

struct Rate {
  double percent = 0.0;
  int preferred = 0;  ///< votes for the robust side
  int answered = 0;
  int expected = 0;
  bool partial = false;
};

/// Share of votes preferring the robust image over the baseline, over all
/// prompts of one (artist, scenario). Avg mode averages the two questions.
Rate success_rate(const std::vector<AnnotationRecord>& records, const StudyPlan& plan, const std::string& artist,
                  const std::string& scenario, QuestionMode mode, const RateOptions& options = {});

/// Unweighted mean over artists, rounded to 0.1.
double aggregate_summary(const std::vector<double>& per_artist, std::size_t expected_count = 10);

struct BestOfK {
  double percent = 0.0;
  std::vector<std::string> selected;  ///< chosen method per prompt
  std::string tie_break;
};

/// Method rank used to break ties: naive < gaussian < impress++ < diffpure <
/// noisy-upscale; unknown names rank after, in the order given.
int method_rank(const std::string& method);

/// Per-prompt argmax over methods. `preferred[m][p]` counts robust votes of
/// method m on prompt p out of `votes[m][p]`.
BestOfK best_of_k_counts(const std::vector<std::string>& methods, const std::vector<std::vector<int>>& preferred,
                         const std::vector<std::vector<int>>& votes);

/// `scenarios` must share their prompt set. Avg mode averages the quality and
/// style best-of-k values.
BestOfK best_of_k(const std::vector<AnnotationRecord>& records, const StudyPlan& plan, const std::string& artist,
                  const std::vector<std::string>& scenarios, QuestionMode mode, const RateOptions& options = {});

struct Agreement {
  std::array<double, 3> percent{};  ///< majority of 3, 4, 5
  std::array<int, 3> count{};
  int comparisons = 0;
};

/// Over scenario pairs and both questions; unanswered (pair, question) slots
/// are skipped, anything but exactly five votes is an error.
Agreement interannotator_agreement(const std::vector<AnnotationRecord>& records, const StudyPlan& plan);

struct LikertSummary {
  std::array<double, 5> percent{};
  double success_percent = 0.0;
  int threshold = 3;
};

LikertSummary likert_summary(const std::vector<int>& ratings, int threshold = 3);

// Serialization
void to_json(nlohmann::json& j, const ComparisonPair& p);
void from_json(const nlohmann::json& j, ComparisonPair& p);
void to_json(nlohmann::json& j, const StudyPlan& p);
void from_json(const nlohmann::json& j, StudyPlan& p);
void to_json(nlohmann::json& j, const AnnotationRecord& r);
void from_json(const nlohmann::json& j, AnnotationRecord& r);

/// One compact JSON object, no trailing newline.
std::string record_to_line(const AnnotationRecord& r);
AnnotationRecord record_from_line(const std::string& line);  ///< throws DataError

std::vector<AnnotationRecord> read_records(const std::string& path);
void write_records(const std::string& path, const std::vector<AnnotationRecord>& records);
StudyPlan read_plan(const std::string& path);
void write_plan(const std::string& path, const StudyPlan& plan);

}  // namespace mimicry::evalkit
