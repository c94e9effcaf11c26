#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mimicry/evalkit.hpp"
#include "mimicry/tables.hpp"

namespace mimicry::report {

struct Tables {
  tables::PerArtistTable quality, style, avg;
  tables::SummaryTable summary_quality, summary_style, summary_avg;
};

/// Summaries of given per-artist tables; avg is their cell-wise mean.
Tables from_per_artist(const tables::PerArtistTable& quality, const tables::PerArtistTable& style,
                       std::size_t artists_per_protection);

struct StudyReport {
  Tables tables;
  std::vector<std::string> kept, dropped;  ///< annotators after the control filter
  std::optional<evalkit::Agreement> agreement;
  std::string agreement_note;  ///< why agreement is missing
  bool partial = false;
  int answered = 0;
  int expected = 0;
};

struct StudyOptions {
  bool allow_partial = false;
  bool filter = true;
  double threshold = evalkit::kFilterThreshold;
};

/// One row per (protection, plan artist), columns in method order plus
/// best-of-4 when a protection has at least two methods. Records are grouped
/// by plan id. Throws DataError on empty input and PartialDataError on
/// missing votes unless partial data is allowed.
StudyReport from_records(const std::vector<evalkit::AnnotationRecord>& records,
                         const std::vector<evalkit::StudyPlan>& plans, const StudyOptions& options = {});

/// per_artist_{quality,style,avg}.csv, summary_{quality,style,avg}.csv and
/// report.txt (with `header` lines first).
void write_tables(const std::filesystem::path& dir, const Tables& t, const std::vector<std::string>& header = {});

}  // namespace mimicry::report
