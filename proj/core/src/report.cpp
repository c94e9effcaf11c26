#include "mimicry/report.hpp"

#include <algorithm>
#include <fstream>
#include <map>

#include "mimicry/error.hpp"

namespace fs = std::filesystem;

namespace mimicry::report {

using evalkit::AnnotationRecord;
using evalkit::QuestionMode;
using evalkit::StudyPlan;

Tables from_per_artist(const tables::PerArtistTable& quality, const tables::PerArtistTable& style,
                       std::size_t artists_per_protection) {
  Tables t;
  t.quality = quality;
  t.style = style;
  t.avg = tables::average(quality, style);
  t.summary_quality = tables::summarize(t.quality, artists_per_protection);
  t.summary_style = tables::summarize(t.style, artists_per_protection);
  t.summary_avg = tables::summarize(t.avg, artists_per_protection);
  return t;
}

namespace {

std::string protection_of(const std::string& scenario) { return scenario.substr(0, scenario.find('/')); }
std::string method_of(const std::string& scenario) {
  const auto cut = scenario.find('/');
  return cut == std::string::npos ? scenario : scenario.substr(cut + 1);
}

}  // namespace

StudyReport from_records(const std::vector<AnnotationRecord>& records, const std::vector<StudyPlan>& plans,
                         const StudyOptions& options) {
  if (records.empty()) throw DataError("no annotation records");
  if (plans.empty()) throw DataError("no study plans");

  std::map<std::string, std::vector<AnnotationRecord>> by_plan;
  for (const auto& r : records) by_plan[r.plan_id].push_back(r);
  for (const auto& [id, rs] : by_plan) {
    if (std::none_of(plans.begin(), plans.end(), [&](const auto& p) { return p.plan_id == id; })) {
      throw DataError("records reference unknown plan " + id);
    }
  }

  // Shared column layout: methods in rank order, best-of-K over the non-naive ones.
  std::vector<std::string> methods;
  for (const auto& s : plans.front().scenarios) {
    const auto m = method_of(s);
    if (std::find(methods.begin(), methods.end(), m) == methods.end()) methods.push_back(m);
  }
  std::stable_sort(methods.begin(), methods.end(),
                   [](const auto& a, const auto& b) { return evalkit::method_rank(a) < evalkit::method_rank(b); });
  std::vector<std::string> robust;
  for (const auto& m : methods) {
    if (m != "naive") robust.push_back(m);
  }
  std::vector<std::string> protections;
  for (const auto& s : plans.front().scenarios) {
    const auto p = protection_of(s);
    if (std::find(protections.begin(), protections.end(), p) == protections.end()) protections.push_back(p);
  }
  for (const auto& plan : plans) {
    for (const auto& p : protections) {
      for (const auto& m : methods) {
        if (std::find(plan.scenarios.begin(), plan.scenarios.end(), p + "/" + m) == plan.scenarios.end()) {
          throw DataError("plan " + plan.plan_id + " lacks scenario " + p + "/" + m);
        }
      }
    }
  }
  const bool with_best = robust.size() >= 2;

  StudyReport rep;
  std::vector<std::string> missing;
  const evalkit::RateOptions rate_opts{options.allow_partial};

  tables::PerArtistTable q, s;
  q.columns = methods;
  if (with_best) q.columns.push_back("best-of-" + std::to_string(robust.size()));
  s.columns = q.columns;

  std::vector<std::pair<std::string, std::string>> rows;  // protection, plan id
  for (const auto& prot : protections) {
    for (const auto& plan : plans) {
      auto rs = by_plan[plan.plan_id];
      if (options.filter) {
        const auto f = evalkit::filter_annotators(rs, plan, options.threshold);
        rep.kept.insert(rep.kept.end(), f.kept.begin(), f.kept.end());
        rep.dropped.insert(rep.dropped.end(), f.dropped.begin(), f.dropped.end());
        rs = evalkit::keep_annotators(rs, f.kept);
      }
      tables::PerArtistTable::Row qr{prot, plan.artist_id, {}}, sr{prot, plan.artist_id, {}};
      for (const auto& m : methods) {
        for (auto mode : {QuestionMode::quality, QuestionMode::style}) {
          double value = 0.0;
          try {
            const auto r = evalkit::success_rate(rs, plan, plan.artist_id, prot + "/" + m, mode, rate_opts);
            value = r.percent;
            rep.partial = rep.partial || r.partial;
            rep.answered += r.answered;
            rep.expected += r.expected;
          } catch (const PartialDataError& e) {
            missing.insert(missing.end(), e.missing_slots().begin(), e.missing_slots().end());
          }
          (mode == QuestionMode::quality ? qr : sr).values.push_back(value);
        }
      }
      if (with_best) {
        std::vector<std::string> sc;
        for (const auto& m : robust) sc.push_back(prot + "/" + m);
        for (auto mode : {QuestionMode::quality, QuestionMode::style}) {
          double value = 0.0;
          try {
            value = evalkit::best_of_k(rs, plan, plan.artist_id, sc, mode, rate_opts).percent;
          } catch (const PartialDataError&) {
            // already listed by the per-method rates
          }
          (mode == QuestionMode::quality ? qr : sr).values.push_back(value);
        }
      }
      q.rows.push_back(std::move(qr));
      s.rows.push_back(std::move(sr));
      rows.emplace_back(prot, plan.plan_id);
    }
  }
  if (!missing.empty()) {
    std::sort(missing.begin(), missing.end());
    missing.erase(std::unique(missing.begin(), missing.end()), missing.end());
    throw PartialDataError(std::to_string(missing.size()) + " vote slots are missing", missing);
  }

  std::sort(rep.kept.begin(), rep.kept.end());
  rep.kept.erase(std::unique(rep.kept.begin(), rep.kept.end()), rep.kept.end());
  std::sort(rep.dropped.begin(), rep.dropped.end());
  rep.dropped.erase(std::unique(rep.dropped.begin(), rep.dropped.end()), rep.dropped.end());
  rep.tables = from_per_artist(q, s, plans.size());

  // Agreement over all plans' scenario pairs, on the filtered records.
  try {
    evalkit::Agreement total;
    for (const auto& plan : plans) {
      auto rs = by_plan[plan.plan_id];
      if (options.filter) rs = evalkit::keep_annotators(rs, evalkit::filter_annotators(rs, plan, options.threshold).kept);
      const auto a = evalkit::interannotator_agreement(rs, plan);
      for (int k = 0; k < 3; ++k) total.count[k] += a.count[k];
      total.comparisons += a.comparisons;
    }
    for (int k = 0; k < 3; ++k) {
      total.percent[k] = total.comparisons ? 100.0 * total.count[k] / total.comparisons : 0.0;
    }
    rep.agreement = total;
  } catch (const std::exception& e) {
    rep.agreement_note = e.what();
  }
  return rep;
}

void write_tables(const fs::path& dir, const Tables& t, const std::vector<std::string>& header) {
  fs::create_directories(dir);
  tables::write_per_artist(dir / "per_artist_quality.csv", t.quality);
  tables::write_per_artist(dir / "per_artist_style.csv", t.style);
  tables::write_per_artist(dir / "per_artist_avg.csv", t.avg);
  tables::write_summary(dir / "summary_quality.csv", t.summary_quality);
  tables::write_summary(dir / "summary_style.csv", t.summary_style);
  tables::write_summary(dir / "summary_avg.csv", t.summary_avg);
  std::ofstream os(dir / "report.txt", std::ios::trunc);
  if (!os) throw IoError("cannot write " + (dir / "report.txt").string());
  for (const auto& h : header) os << h << '\n';
  if (!header.empty()) os << '\n';
  os << tables::render(t.summary_quality, "Summary, quality") << '\n';
  os << tables::render(t.summary_style, "Summary, style") << '\n';
  os << tables::render(t.summary_avg, "Summary, avg") << '\n';
  os << tables::render(t.quality, "Per artist, quality") << '\n';
  os << tables::render(t.style, "Per artist, style") << '\n';
}

}  // namespace mimicry::report
