#include "mimicry/tables.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "mimicry/error.hpp"
#include "mimicry/evalkit.hpp"

namespace mimicry::tables {

std::vector<std::string> PerArtistTable::protections() const {
  std::vector<std::string> out;
  for (const auto& r : rows) {
    if (std::find(out.begin(), out.end(), r.protection) == out.end()) out.push_back(r.protection);
  }
  return out;
}

std::size_t PerArtistTable::column(const std::string& name) const {
  auto it = std::find(columns.begin(), columns.end(), name);
  if (it == columns.end()) throw ArgumentError("table has no column " + name);
  return static_cast<std::size_t>(it - columns.begin());
}

double SummaryTable::at(const std::string& protection, const std::string& col) const {
  auto c = std::find(columns.begin(), columns.end(), col);
  if (c == columns.end()) throw ArgumentError("summary has no column " + col);
  for (const auto& r : rows) {
    if (r.protection == protection) return r.values[static_cast<std::size_t>(c - columns.begin())];
  }
  throw ArgumentError("summary has no protection " + protection);
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur.push_back('"');
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        cur.push_back(ch);
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  if (quoted) throw DataError("unterminated quote in CSV line");
  out.push_back(std::move(cur));
  return out;
}

namespace {

std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  std::vector<std::vector<std::string>> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(split_csv_line(line));
  }
  if (out.empty()) throw DataError(path.string() + " is empty");
  return out;
}

double parse_cell(const std::string& s, const std::filesystem::path& path) {
  std::string t = s;
  if (!t.empty() && t.back() == '%') t.pop_back();
  try {
    std::size_t used = 0;
    const double v = std::stod(t, &used);
    if (used != t.size() || !std::isfinite(v)) throw std::invalid_argument(t);
    return v;
  } catch (const std::exception&) {
    throw DataError(path.string() + ": not a number: '" + s + "'");
  }
}

std::string quote(const std::string& s) {
  if (s.find_first_of(",\"") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  return out + "\"";
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", v);
  return buf;
}

}  // namespace

PerArtistTable read_per_artist(const std::filesystem::path& path) {
  const auto rows = read_csv(path);
  const auto& head = rows[0];
  if (head.size() < 3 || head[0] != "protection" || head[1] != "artist") {
    throw DataError(path.string() + ": expected header protection,artist,<methods>");
  }
  PerArtistTable t;
  t.columns.assign(head.begin() + 2, head.end());
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].size() != head.size()) throw DataError(path.string() + ": row " + std::to_string(i) + " has the wrong width");
    PerArtistTable::Row r{rows[i][0], rows[i][1], {}};
    for (std::size_t c = 2; c < rows[i].size(); ++c) r.values.push_back(parse_cell(rows[i][c], path));
    t.rows.push_back(std::move(r));
  }
  return t;
}

SummaryTable read_summary(const std::filesystem::path& path) {
  const auto rows = read_csv(path);
  const auto& head = rows[0];
  if (head.size() < 2 || head[0] != "protection") throw DataError(path.string() + ": expected header protection,<methods>");
  SummaryTable t;
  t.columns.assign(head.begin() + 1, head.end());
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].size() != head.size()) throw DataError(path.string() + ": row " + std::to_string(i) + " has the wrong width");
    SummaryTable::Row r{rows[i][0], {}};
    for (std::size_t c = 1; c < rows[i].size(); ++c) r.values.push_back(parse_cell(rows[i][c], path));
    t.rows.push_back(std::move(r));
  }
  return t;
}

void write_per_artist(const std::filesystem::path& path, const PerArtistTable& t) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << "protection,artist";
  for (const auto& c : t.columns) os << ',' << quote(c);
  os << '\n';
  for (const auto& r : t.rows) {
    os << quote(r.protection) << ',' << quote(r.artist);
    for (double v : r.values) os << ',' << fmt(v);
    os << '\n';
  }
}

void write_summary(const std::filesystem::path& path, const SummaryTable& t) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << "protection";
  for (const auto& c : t.columns) os << ',' << quote(c);
  os << '\n';
  for (const auto& r : t.rows) {
    os << quote(r.protection);
    for (double v : r.values) os << ',' << fmt(v);
    os << '\n';
  }
}

SummaryTable summarize(const PerArtistTable& table, std::size_t artists_per_protection) {
  SummaryTable out;
  out.columns = table.columns;
  for (const auto& prot : table.protections()) {
    SummaryTable::Row row{prot, {}};
    for (std::size_t c = 0; c < table.columns.size(); ++c) {
      std::vector<double> vals;
      for (const auto& r : table.rows) {
        if (r.protection == prot) vals.push_back(r.values[c]);
      }
      row.values.push_back(evalkit::aggregate_summary(vals, artists_per_protection));
    }
    out.rows.push_back(std::move(row));
  }
  return out;
}

PerArtistTable average(const PerArtistTable& a, const PerArtistTable& b) {
  if (a.columns != b.columns || a.rows.size() != b.rows.size()) throw ArgumentError("table layouts differ");
  PerArtistTable out = a;
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    if (a.rows[i].protection != b.rows[i].protection || a.rows[i].artist != b.rows[i].artist) {
      throw ArgumentError("table rows differ at " + std::to_string(i));
    }
    for (std::size_t c = 0; c < a.columns.size(); ++c) out.rows[i].values[c] = 0.5 * (a.rows[i].values[c] + b.rows[i].values[c]);
  }
  return out;
}

double max_abs_difference(const SummaryTable& a, const SummaryTable& b) {
  if (a.columns != b.columns || a.rows.size() != b.rows.size()) throw ArgumentError("summary layouts differ");
  double d = 0.0;
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    if (a.rows[i].protection != b.rows[i].protection) throw ArgumentError("summary rows differ at " + std::to_string(i));
    for (std::size_t c = 0; c < a.columns.size(); ++c) d = std::max(d, std::abs(a.rows[i].values[c] - b.rows[i].values[c]));
  }
  return d;
}

namespace {

std::string pad(const std::string& s, std::size_t w, bool right) {
  if (s.size() >= w) return s;
  return right ? std::string(w - s.size(), ' ') + s : s + std::string(w - s.size(), ' ');
}

std::string render_grid(const std::string& title, const std::vector<std::string>& head,
                        const std::vector<std::vector<std::string>>& body, std::size_t label_cols) {
  std::vector<std::size_t> w(head.size());
  for (std::size_t c = 0; c < head.size(); ++c) {
    w[c] = head[c].size();
    for (const auto& r : body) w[c] = std::max(w[c], r[c].size());
  }
  std::ostringstream os;
  os << title << '\n';
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (c) os << "  ";
      os << pad(cells[c], w[c], c >= label_cols);
    }
    os << '\n';
  };
  line(head);
  std::size_t total = 0;
  for (auto x : w) total += x;
  os << std::string(total + 2 * (w.size() - 1), '-') << '\n';
  for (const auto& r : body) line(r);
  return os.str();
}

}  // namespace

std::string render(const SummaryTable& t, const std::string& title) {
  std::vector<std::string> head{"protection"};
  head.insert(head.end(), t.columns.begin(), t.columns.end());
  std::vector<std::vector<std::string>> body;
  for (const auto& r : t.rows) {
    std::vector<std::string> cells{r.protection};
    for (double v : r.values) cells.push_back(fmt(v) + "%");
    body.push_back(std::move(cells));
  }
  return render_grid(title, head, body, 1);
}

std::string render(const PerArtistTable& t, const std::string& title) {
  std::vector<std::string> head{"protection", "artist"};
  head.insert(head.end(), t.columns.begin(), t.columns.end());
  std::vector<std::vector<std::string>> body;
  std::string last;
  for (const auto& r : t.rows) {
    std::vector<std::string> cells{r.protection == last ? "" : r.protection, r.artist};
    last = r.protection;
    for (double v : r.values) cells.push_back(fmt(v) + "%");
    body.push_back(std::move(cells));
  }
  return render_grid(title, head, body, 2);
}

}  // namespace mimicry::tables
