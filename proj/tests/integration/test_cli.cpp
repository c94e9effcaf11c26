#include <fcntl.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include <gtest/gtest.h>
#include <httplib.h>

#include "mimicry/dataset.hpp"
#include "mimicry/evalkit.hpp"
#include "mimicry/tables.hpp"
#include "mimicry/toy_data.hpp"
#include "test_support.hpp"

using namespace mimicry;
using mimicry::testing::cli_path;
using mimicry::testing::fixture_dir;
using mimicry::testing::TempDir;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

std::string quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) {
    if (c == '\'') out += "'\\''";
    else out += c;
  }
  return out + "'";
}

// Runs the CLI to completion, capturing both streams.
Run cli(const std::vector<std::string>& args, const fs::path& scratch, const std::string& env = "") {
  std::string cmd = env.empty() ? "" : env + " ";
  cmd += quote(cli_path().string());
  for (const auto& a : args) cmd += " " + quote(a);
  cmd += " >" + quote((scratch / "stdout.txt").string()) + " 2>" + quote((scratch / "stderr.txt").string());
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(scratch / "stdout.txt");
  r.err = slurp(scratch / "stderr.txt");
  return r;
}

std::string config_path(const std::string& name) {
  return (fixture_dir().parent_path() / "configs" / name).string();
}

std::string ckpt() { return mimicry::testing::shared_toy_checkpoint().string(); }

// `study serve` in the background; the port is read from its first line.
struct Server {
  pid_t pid = -1;
  int port = 0;

  Server(const std::vector<std::string>& args, const fs::path& log, const std::string& crash_after = "") {
    pid = ::fork();
    if (pid == 0) {
      if (!crash_after.empty()) ::setenv("MIMICRY_STUDYD_CRASH_AFTER", crash_after.c_str(), 1);
      const int fd = ::open(log.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
      ::dup2(fd, 1);
      std::vector<std::string> full{cli_path().string()};
      full.insert(full.end(), args.begin(), args.end());
      std::vector<char*> argv;
      for (auto& s : full) argv.push_back(s.data());
      argv.push_back(nullptr);
      ::execv(argv[0], argv.data());
      ::_exit(127);
    }
    for (int i = 0; i < 2000 && port == 0; ++i) {
      const auto text = slurp(log);
      const auto at = text.find("listening on http://");
      if (at != std::string::npos && text.find('\n', at) != std::string::npos) {
        port = std::stoi(text.substr(text.rfind(':', text.find('\n', at)) + 1));
        break;
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
  }
  int wait() {
    int status = 0;
    ::waitpid(pid, &status, 0);
    pid = -1;
    return status;
  }
  int stop(int sig = SIGTERM) {
    if (pid <= 0) return -1;
    ::kill(pid, sig);
    return wait();
  }
  ~Server() { stop(SIGKILL); }
};

json answers_for(const evalkit::ComparisonPair& p) {
  json a;
  for (const char* q : evalkit::kQuestionOrder) a[q] = evalkit::to_string(p.ground_truth);
  return a;
}

}  // namespace

TEST(Cli, ReportTablesModeReproducesFixtureSummary) {
  TempDir tmp;
  const auto r = cli({"report", "--quality", (fixture_dir() / "per_artist_quality.csv").string(), "--style",
                      (fixture_dir() / "per_artist_style.csv").string(), "--out", (tmp / "rep").string()},
                     tmp.path());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("45.0%"), std::string::npos);
  EXPECT_NE(r.out.find("44.0%"), std::string::npos);
  for (const char* q : {"quality", "style"}) {
    const auto got = tables::read_summary(tmp / ("rep/summary_" + std::string(q) + ".csv"));
    const auto want = tables::read_summary(fixture_dir() / ("summary_" + std::string(q) + ".csv"));
    EXPECT_LE(tables::max_abs_difference(got, want), 0.05) << q;
  }
  EXPECT_TRUE(fs::exists(tmp / "rep/summary_avg.csv"));
}

TEST(Cli, UsageAndDataErrorsHaveDistinctExitCodes) {
  TempDir tmp;
  EXPECT_NE(cli({}, tmp.path()).code, 0);
  EXPECT_NE(cli({"no-such-command"}, tmp.path()).code, 0);
  auto r = cli({"report", "--quality", (fixture_dir() / "per_artist_quality.csv").string(), "--out", (tmp / "x").string()},
               tmp.path());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("--style"), std::string::npos);

  // empty records
  std::ofstream(tmp / "empty.jsonl").close();
  evalkit::write_plan((tmp / "plan.json").string(), mimicry::testing::small_plan({"mist/naive"}, 1));
  r = cli({"report", "--records", (tmp / "empty.jsonl").string(), "--plan", (tmp / "plan.json").string(), "--out",
           (tmp / "rep").string()},
          tmp.path());
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("no annotation records"), std::string::npos);
}

TEST(Cli, PartialDataFailsUnlessAllowed) {
  TempDir tmp;
  auto plan = mimicry::testing::small_plan({"mist/noisy-upscale"}, 2);
  evalkit::write_plan((tmp / "plan.json").string(), plan);
  // three of five annotators answered
  const auto recs = mimicry::testing::synth_records(plan, 3, [](int a, const auto&, auto) { return a != 1; });
  evalkit::write_records((tmp / "records.jsonl").string(), recs);
  const std::vector<std::string> base{"report", "--records", (tmp / "records.jsonl").string(), "--plan",
                                      (tmp / "plan.json").string(), "--no-filter", "--out", (tmp / "rep").string()};
  auto r = cli(base, tmp.path());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("--allow-partial"), std::string::npos);
  EXPECT_NE(r.err.find("missing "), std::string::npos);

  auto args = base;
  args.push_back("--allow-partial");
  r = cli(args, tmp.path());
  ASSERT_EQ(r.code, 0) << r.err;
  const auto text = slurp(tmp / "rep/report.txt");
  EXPECT_EQ(text.rfind("PARTIAL DATA: 12 of 20 votes present", 0), 0u) << text;
  const auto meta = json::parse(slurp(tmp / "rep/report.json"));
  EXPECT_TRUE(meta.at("partial").get<bool>());
  // 2 of 3 answered votes per slot prefer the robust image
  const auto q = tables::read_per_artist(tmp / "rep/per_artist_quality.csv");
  EXPECT_NEAR(q.rows[0].values[0], 66.7, 0.05);
}

TEST(Cli, ToyTrainReportsAndFailsWithTrace) {
  TempDir tmp;
  std::ofstream(tmp / "quick.json") << R"({"toy": {"train_steps": 100, "hidden": 32, "recon_threshold": 1.0,
                                           "denoiser_threshold": 10.0}, "toy_corpus_per_style": 6})";
  auto r = cli({"--config", (tmp / "quick.json").string(), "--out", (tmp / "m.ckpt").string(), "toy-train"}, tmp.path());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(tmp / "m.ckpt"));
  EXPECT_TRUE(json::parse(r.out).contains("recon_mse_heldout"));

  std::ofstream(tmp / "hard.json") << R"({"toy": {"train_steps": 100, "hidden": 32, "denoiser_threshold": 1e-9},
                                          "toy_corpus_per_style": 6})";
  r = cli({"--config", (tmp / "hard.json").string(), "--out", (tmp / "h.ckpt").string(), "toy-train"}, tmp.path());
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("loss trace:"), std::string::npos);
}

TEST(Cli, ProtectPurifyAndMimicCommands) {
  TempDir tmp;
  dataset::save_dataset(toy::make_artist("solo", "waves", 3, 32, 4), tmp / "clean");
  const std::vector<std::string> g{"--config", config_path("smoke.json"), "--checkpoint", ckpt(), "-q"};
  auto with = [&](std::vector<std::string> extra) {
    auto a = g;
    a.insert(a.end(), extra.begin(), extra.end());
    return a;
  };

  auto r = cli(with({"--out", (tmp / "prot").string(), "protect", "--method", "mist-enc", "--budget", "8/255", "--iters",
                     "5", "--in", (tmp / "clean").string()}),
               tmp.path());
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream traces(tmp / "prot/traces.jsonl");
  std::string line;
  int n = 0;
  while (std::getline(traces, line)) {
    const auto j = json::parse(line);
    EXPECT_LE(j.at("linf").get<double>(), 8.0 / 255 + 1e-9);
    EXPECT_EQ(j.at("trace").size(), 6u);
    ++n;
  }
  EXPECT_EQ(n, 3);
  EXPECT_EQ(json::parse(slurp(tmp / "prot/provenance.json")).at("stage"), "protect");

  r = cli(with({"--out", (tmp / "pur").string(), "purify", "--method", "gaussian", "--in", (tmp / "prot").string()}),
          tmp.path());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(dataset::load_dataset(tmp / "pur/manifest.json", 32).size(), 3u);

  std::ofstream(tmp / "prompts.txt") << "a mountain\na piano\n";
  r = cli(with({"--out", (tmp / "gen").string(), "mimic", "run", "--scenario", "mist:naive", "--manifest",
                (tmp / "prot").string(), "--prompts", (tmp / "prompts.txt").string()}),
          tmp.path());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(tmp / "gen/p00.png"));
  EXPECT_TRUE(fs::exists(tmp / "gen/p01.png"));
  EXPECT_EQ(json::parse(slurp(tmp / "gen/provenance.json")).at("scenario"), "mist/naive");

  r = cli(with({"--out", (tmp / "bad").string(), "protect", "--method", "nightshade", "--in", (tmp / "clean").string()}),
          tmp.path());
  EXPECT_EQ(r.code, 2);
}

TEST(Cli, PipelineStudyServeCrashRestartExportReport) {
  TempDir tmp;
  const std::string run = (tmp / "run").string();
  const std::vector<std::string> g{"--config", config_path("smoke.json"), "--checkpoint", ckpt(), "-q"};
  auto with = [&](std::vector<std::string> extra) {
    auto a = g;
    a.insert(a.end(), extra.begin(), extra.end());
    return a;
  };

  auto r = cli(with({"--out", run, "pipeline", "--scenario", "mist:noisy-upscale", "--scenario", "mist:naive"}),
               tmp.path());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("3 of 3 scenarios finished"), std::string::npos) << r.out;

  r = cli(with({"study", "build", "--run", run}), tmp.path());
  ASSERT_EQ(r.code, 0) << r.err;
  const auto plan_file = tmp / "run/study/smoke.plan.json";
  ASSERT_TRUE(fs::exists(plan_file));
  const auto plan = evalkit::read_plan(plan_file.string());
  EXPECT_EQ(plan.pairs.size(), static_cast<std::size_t>(2 * 2 + 10 + 10 + 6));

  // Serve with a crash after the third durable answer.
  std::string lost;
  int answered = 0;
  {
    Server srv(with({"study", "serve", "--run", run, "--port", "0"}), tmp / "serve1.log", "3");
    ASSERT_GT(srv.port, 0) << slurp(tmp / "serve1.log");
    httplib::Client c("127.0.0.1", srv.port);
    ASSERT_EQ(c.Post("/session", R"({"annotator_id":"ann0","viewport":{"width":1920,"height":1080}})",
                     "application/json")->status,
              200);
    for (int i = 0; i < 3; ++i) {
      const auto task = json::parse(c.Get("/task/next?annotator=ann0")->body);
      const auto& p = plan.pair(task.at("pair_id"));
      auto res = c.Post("/answer", json{{"annotator_id", "ann0"}, {"pair_id", p.pair_id}, {"answers", answers_for(p)}}.dump(),
                        "application/json");
      if (i < 2) {
        ASSERT_TRUE(res);
        ASSERT_EQ(res->status, 200);
        ++answered;
      } else {
        EXPECT_FALSE(res);
        lost = p.pair_id;
      }
    }
    const int status = srv.wait();
    ASSERT_TRUE(WIFEXITED(status));
    EXPECT_EQ(WEXITSTATUS(status), 137);
  }

  {
    Server srv(with({"study", "serve", "--run", run, "--port", "0"}), tmp / "serve2.log");
    ASSERT_GT(srv.port, 0);
    httplib::Client c("127.0.0.1", srv.port);
    ASSERT_EQ(c.Post("/session", R"({"annotator_id":"ann0","viewport":{"width":1920,"height":1080}})",
                     "application/json")->status,
              200);
    auto task = json::parse(c.Get("/task/next?annotator=ann0")->body);
    EXPECT_EQ(task.at("cursor"), 3);
    const auto retry = c.Post(
        "/answer", json{{"annotator_id", "ann0"}, {"pair_id", lost}, {"answers", answers_for(plan.pair(lost))}}.dump(),
        "application/json");
    EXPECT_EQ(retry->status, 409);
    while (!task.at("done").get<bool>()) {
      const auto& p = plan.pair(task.at("pair_id"));
      ASSERT_EQ(c.Post("/answer", json{{"annotator_id", "ann0"}, {"pair_id", p.pair_id}, {"answers", answers_for(p)}}.dump(),
                       "application/json")
                    ->status,
                200);
      task = json::parse(c.Get("/task/next?annotator=ann0")->body);
    }
    // static files come from the run directory
    const auto img = c.Get(("/files/" + plan.pairs.back().left).c_str());
    ASSERT_TRUE(img);
    EXPECT_EQ(img->status, 200);
    EXPECT_EQ(img->body.substr(1, 3), "PNG");
    const int status = srv.stop(SIGTERM);
    EXPECT_TRUE(WIFEXITED(status) && WEXITSTATUS(status) == 0);
    EXPECT_NE(slurp(tmp / "serve2.log").find("stopped"), std::string::npos);
  }

  r = cli(with({"--out", (tmp / "records.jsonl").string(), "study", "export", "--run", run}), tmp.path());
  ASSERT_EQ(r.code, 0) << r.err;
  const auto recs = evalkit::read_records((tmp / "records.jsonl").string());
  EXPECT_EQ(recs.size(), 2 * plan.pairs.size());
  std::set<std::tuple<std::string, std::string, evalkit::Question>> seen;
  for (const auto& rec : recs) EXPECT_TRUE(seen.insert({rec.annotator_id, rec.pair_id, rec.question}).second);

  // one annotator of five: the report must refuse, then renormalize on request
  const std::vector<std::string> rep{"report", "--records", (tmp / "records.jsonl").string(), "--plan",
                                     plan_file.string(), "--out", (tmp / "rep").string()};
  r = cli(rep, tmp.path());
  EXPECT_EQ(r.code, 1);
  auto allow = rep;
  allow.push_back("--allow-partial");
  r = cli(allow, tmp.path());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("PARTIAL DATA"), std::string::npos);
  const auto q = tables::read_per_artist(tmp / "rep/per_artist_quality.csv");
  ASSERT_EQ(q.rows.size(), 1u);
  EXPECT_EQ(q.columns, (std::vector<std::string>{"naive", "noisy-upscale"}));
  EXPECT_DOUBLE_EQ(q.rows[0].values[1], 100.0);  // every vote went to the robust side
}
