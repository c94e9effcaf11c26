#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace mimicry::tables {

/// Success rates per (protection, artist), one column per method.
struct PerArtistTable {
  struct Row {
    std::string protection;
    std::string artist;
    std::vector<double> values;
  };
  std::vector<std::string> columns;
  std::vector<Row> rows;

  std::vector<std::string> protections() const;  ///< in first-appearance order
  std::size_t column(const std::string& name) const;  ///< throws ArgumentError
};

/// Per-protection means over artists.
struct SummaryTable {
  struct Row {
    std::string protection;
    std::vector<double> values;
  };
  std::vector<std::string> columns;
  std::vector<Row> rows;

  double at(const std::string& protection, const std::string& column) const;
};

/// Splits one CSV line; double quotes protect commas and "" escapes a quote.
std::vector<std::string> split_csv_line(const std::string& line);

/// Header: protection,artist,<methods...>
PerArtistTable read_per_artist(const std::filesystem::path& path);
/// Header: protection,<methods...>
SummaryTable read_summary(const std::filesystem::path& path);
void write_per_artist(const std::filesystem::path& path, const PerArtistTable& table);
void write_summary(const std::filesystem::path& path, const SummaryTable& table);

/// Every protection must have exactly `artists_per_protection` rows.
SummaryTable summarize(const PerArtistTable& table, std::size_t artists_per_protection = 10);

/// Cell-wise mean of two tables with identical layout (the avg question mode).
PerArtistTable average(const PerArtistTable& a, const PerArtistTable& b);

/// Largest absolute cell difference; layouts must match.
double max_abs_difference(const SummaryTable& a, const SummaryTable& b);

/// Fixed-width text rendering, percentages with one decimal.
std::string render(const SummaryTable& table, const std::string& title);
std::string render(const PerArtistTable& table, const std::string& title);

}  // namespace mimicry::tables
