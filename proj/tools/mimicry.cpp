// mimicry: command line front end over one config file and one run directory.

#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <thread>

#include <pthread.h>
#include <unistd.h>

#include "CLI11.hpp"
#include "mimicry/config.hpp"
#include "mimicry/dataset.hpp"
#include "mimicry/error.hpp"
#include "mimicry/evalkit.hpp"
#include "mimicry/pipeline.hpp"
#include "mimicry/protect.hpp"
#include "mimicry/purify.hpp"
#include "mimicry/report.hpp"
#include "mimicry/rng.hpp"
#include "mimicry/studyd.hpp"
#include "mimicry/studyd_server.hpp"
#include "mimicry/tables.hpp"
#include "mimicry/toy_backend.hpp"
#include "mimicry/toy_data.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mimicry;

namespace {

enum Exit { kOk = 0, kFailed = 1, kUsage = 2, kError = 3 };

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::string out;
  std::string checkpoint;
  bool quiet = false;
};

RunConfig load(const Globals& g) {
  RunConfig cfg;
  if (!g.config.empty()) {
    cfg = load_config(g.config);
  } else {
    cfg.base_dir = fs::current_path();
  }
  if (g.seed) cfg.seed = *g.seed;
  if (g.workers) cfg.workers = *g.workers;
  if (!g.checkpoint.empty()) cfg.checkpoint = fs::absolute(g.checkpoint).string();
  validate(cfg);
  return cfg;
}

std::ostream* log_stream(const Globals& g) { return g.quiet ? nullptr : &std::cerr; }

fs::path need_out(const Globals& g) {
  if (g.out.empty()) throw ArgumentError("--out is required for this command");
  return g.out;
}

/// Accepts "0.031", "8/255".
double parse_fraction(const std::string& text) {
  try {
    const auto slash = text.find('/');
    if (slash == std::string::npos) return std::stod(text);
    const double den = std::stod(text.substr(slash + 1));
    if (den == 0.0) throw ArgumentError("zero denominator in " + text);
    return std::stod(text.substr(0, slash)) / den;
  } catch (const std::logic_error&) {
    throw ArgumentError("not a number: " + text);
  }
}

/// A manifest path, or a directory holding manifest.json.
fs::path manifest_path(const fs::path& in) {
  if (fs::is_directory(in)) return in / "manifest.json";
  return in;
}

void write_json(const fs::path& path, const json& doc) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << doc.dump(2) << '\n';
}

json provenance(const RunConfig& cfg, const std::string& stage, std::uint64_t seed) {
  return {{"config_hash", hash_hex(config_hash(cfg))}, {"seed", seed}, {"stage", stage}};
}

// toy-train ------------------------------------------------------------------

int cmd_toy_train(const Globals& g) {
  const auto cfg = load(g);
  const fs::path out = need_out(g);
  std::vector<std::string> styles(toy::kStyles.begin(), toy::kStyles.end());
  const auto corpus =
      toy::make_corpus(styles, cfg.toy_corpus_per_style, cfg.toy.image_side, derive_seed(cfg.seed, "toy-corpus"));
  try {
    auto b = toy::train_toy_backend(cfg.toy, corpus);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    b.save(out);
    const auto& r = b.report();
    json rep = {{"checkpoint", out.string()},
                {"recon_mse_train", r.recon_mse_train},
                {"recon_mse_heldout", r.recon_mse_heldout},
                {"recon_mse_noise", r.recon_mse_noise},
                {"denoiser_loss_heldout", r.denoiser_loss_heldout},
                {"denoiser_loss_prior_only", r.denoiser_loss_prior_only},
                {"loss_trace", r.loss_trace}};
    std::cout << rep.dump(2) << '\n';
    return kOk;
  } catch (const TrainingError& e) {
    std::cerr << "training failed: " << e.what() << "\nloss trace:";
    for (double v : e.loss_trace()) std::cerr << ' ' << v;
    std::cerr << '\n';
    return kError;
  }
}

// protect ----------------------------------------------------------------------

struct ProtectArgs {
  std::string method, budget = "8/255", in;
  int iters = -1;
};

int cmd_protect(const Globals& g, const ProtectArgs& a) {
  auto cfg = load(g);
  const fs::path out = need_out(g);
  const auto p = pipeline::parse_protection(a.method);
  const double budget = parse_fraction(a.budget);
  cfg.mist.budget = cfg.glaze.budget = cfg.anti_db.budget = budget;
  if (a.iters >= 0) {
    cfg.mist.iterations = a.iters;
    cfg.glaze.steps = a.iters;
    cfg.anti_db.iterations = a.iters;
  }
  const auto backend = pipeline::load_backend(cfg, {}, log_stream(g));
  auto ds = dataset::load_dataset(manifest_path(a.in), backend->image_side());
  const auto res = pipeline::apply_protection(*backend, ds, p, cfg, cfg.workers);
  for (std::size_t i = 0; i < ds.images.size(); ++i) ds.images[i] = res.images[i];
  dataset::save_dataset(ds, out);
  std::vector<std::string> lines;
  for (std::size_t i = 0; i < res.traces.size(); ++i) {
    lines.push_back(json{{"image", i}, {"linf", res.perturbations[i].linf()}, {"trace", res.traces[i]}}.dump());
  }
  pipeline::write_lines(out / "traces.jsonl", lines);
  auto meta = provenance(cfg, "protect", derive_seed(cfg.seed, "protect:" + ds.artist_id + ":" + pipeline::to_string(p)));
  meta["protection"] = pipeline::to_string(p);
  meta["settings"] = res.config;
  write_json(out / "provenance.json", meta);
  std::cout << "protected " << ds.size() << " images with " << pipeline::to_string(p) << " into " << out.string()
            << '\n';
  return kOk;
}

// purify -----------------------------------------------------------------------

struct PurifyArgs {
  std::string method, in;
  std::optional<double> sigma, strength, level;
  std::optional<int> iters;
};

int cmd_purify(const Globals& g, const PurifyArgs& a) {
  const auto cfg = load(g);
  const fs::path out = need_out(g);
  purify::PurifyConfig pc;
  pc.method = purify::parse_method(a.method);
  pc.sigma = cfg.mimic.gaussian_sigma;
  pc.strength = cfg.mimic.diffpure_strength;
  pc.guidance = cfg.mimic.guidance;
  pc.upscale_sigma = cfg.mimic.upscale_sigma;
  pc.level = cfg.mimic.upscale_level;
  pc.pgd = cfg.mimic.impress_pgd;
  pc.smooth_max_temperature = cfg.mimic.impress_temperature;
  if (a.sigma) pc.sigma = pc.upscale_sigma = *a.sigma;
  if (a.strength) pc.strength = *a.strength;
  if (a.level) pc.level = *a.level;
  if (a.iters) pc.pgd.iterations = *a.iters;
  pc.seed = derive_seed(cfg.seed, "purify:" + purify::to_string(pc.method));
  purify::validate(pc);
  const auto backend = pipeline::load_backend(cfg, {}, log_stream(g));
  auto ds = dataset::load_dataset(manifest_path(a.in), backend->image_side());
  ds.images = purify::apply_all(*backend, ds.images, pc, ds.captions, cfg.workers);
  dataset::save_dataset(ds, out);
  auto meta = provenance(cfg, "purify", pc.seed);
  meta["method"] = purify::to_string(pc.method);
  meta["input"] = fs::absolute(a.in).string();
  write_json(out / "provenance.json", meta);
  std::cout << "purified " << ds.size() << " images into " << out.string() << '\n';
  return kOk;
}

// mimic run --------------------------------------------------------------------

struct MimicArgs {
  std::string scenario, manifest, prompts;
};

int cmd_mimic_run(const Globals& g, const MimicArgs& a) {
  const auto cfg = load(g);
  const fs::path out = need_out(g);
  const auto scenario = pipeline::parse_scenario(a.scenario);
  const auto prompts = a.prompts.empty() ? (cfg.prompts.empty() ? default_prompts() : cfg.prompts)
                                         : pipeline::read_prompts(a.prompts);
  const auto backend = pipeline::load_backend(cfg, {}, log_stream(g));
  const auto ds = dataset::load_dataset(manifest_path(a.manifest), backend->image_side());
  const auto mc = pipeline::mimic_config(cfg, ds.artist_id);
  const auto res = mimic::run_scenario(*backend, ds, scenario.method, prompts, cfg.generation_seeds, mc, cfg.workers);
  fs::create_directories(out);
  for (std::size_t k = 0; k < res.images.size(); ++k) {
    save_image_lossless(res.images[k], out / pipeline::image_name(k / res.seeds.size(), k % res.seeds.size()));
  }
  auto meta = provenance(cfg, "mimic", mc.seed);
  meta["scenario"] = scenario.id();
  meta["artist"] = ds.artist_id;
  meta["prompts"] = res.prompts;
  meta["generation_seeds"] = res.seeds;
  meta["model"] = {{"parameter_hash", hash_hex(parameter_hash(*res.model.backend))},
                   {"checkpoint_steps", res.model.checkpoint_steps},
                   {"loss_trace", res.model.loss_trace}};
  write_json(out / "provenance.json", meta);
  std::cout << "wrote " << res.images.size() << " images for " << scenario.id() << " into " << out.string() << '\n';
  return kOk;
}

// pipeline ---------------------------------------------------------------------

struct PipelineArgs {
  std::vector<std::string> scenarios, artists;
};

int cmd_pipeline(const Globals& g, const PipelineArgs& a) {
  const auto cfg = load(g);
  const fs::path run = need_out(g);
  std::vector<pipeline::Scenario> scenarios;
  for (const auto& s : a.scenarios) scenarios.push_back(pipeline::parse_scenario(s));
  if (scenarios.empty()) scenarios = pipeline::all_scenarios();
  const auto backend = pipeline::load_backend(cfg, run / "model" / "toy.ckpt", log_stream(g));
  std::vector<dataset::ArtistDataset> artists;
  for (const auto& m : a.artists) artists.push_back(dataset::load_dataset(manifest_path(m), backend->image_side()));
  if (artists.empty()) artists = pipeline::toy_artists(cfg, backend->image_side());
  if (artists.empty()) throw ArgumentError("no artists: pass --artist or list toy_artists in the config");
  const auto res = pipeline::run_pipeline(*backend, cfg, artists, scenarios, run, log_stream(g));
  std::cout << (res.scenarios.size() - res.failures) << " of " << res.scenarios.size() << " scenarios finished in "
            << run.string() << '\n';
  for (const auto& s : res.scenarios) {
    if (!s.ok) std::cout << "FAILED " << s.artist_id << ' ' << s.scenario << ": " << s.error << '\n';
  }
  return res.failures ? kFailed : kOk;
}

// study ------------------------------------------------------------------------

struct StudyArgs {
  std::string run;
  std::vector<std::string> artists;
  std::vector<std::string> plans;
  std::string data;
  std::string host = "127.0.0.1";
  int port = -1;
  std::string plan_id;
};

fs::path study_dir(const fs::path& run) { return run / "study"; }

std::vector<evalkit::StudyPlan> load_plans(const StudyArgs& a) {
  std::vector<std::string> files = a.plans;
  if (files.empty()) {
    if (a.run.empty()) throw ArgumentError("pass --plan or --run");
    const auto dir = study_dir(a.run);
    if (fs::is_directory(dir)) {
      for (const auto& e : fs::directory_iterator(dir)) {
        const auto name = e.path().filename().string();
        if (name.size() > 10 && name.ends_with(".plan.json")) files.push_back(e.path().string());
      }
    }
    std::sort(files.begin(), files.end());
  }
  if (files.empty()) throw ArgumentError("no study plans found; run 'study build' first");
  std::vector<evalkit::StudyPlan> plans;
  for (const auto& f : files) plans.push_back(evalkit::read_plan(f));
  return plans;
}

fs::path data_dir(const StudyArgs& a) {
  if (!a.data.empty()) return a.data;
  if (!a.run.empty()) return study_dir(a.run) / "data";
  throw ArgumentError("pass --data or --run");
}

int cmd_study_build(const Globals& g, const StudyArgs& a) {
  const auto cfg = load(g);
  if (a.run.empty()) throw ArgumentError("--run is required");
  const fs::path out = g.out.empty() ? study_dir(a.run) : fs::path(g.out);
  std::vector<std::string> artists = a.artists;
  if (artists.empty()) {
    std::ifstream is(fs::path(a.run) / "scenarios.json");
    if (!is) throw IoError("no scenarios.json in " + a.run);
    const json index = json::parse(is);
    for (const auto& s : index.at("scenarios")) {
      const auto id = s.at("artist").get<std::string>();
      if (std::find(artists.begin(), artists.end(), id) == artists.end()) artists.push_back(id);
    }
  }
  const auto backend = pipeline::load_backend(cfg, fs::path(a.run) / "model" / "toy.ckpt", log_stream(g));
  for (const auto& artist : artists) {
    const auto plan = pipeline::prepare_study(*backend, cfg, a.run, artist);
    const auto path = out / (artist + ".plan.json");
    fs::create_directories(out);
    evalkit::write_plan(path.string(), plan);
    std::cout << plan.plan_id << ' ' << path.string() << ' ' << plan.pairs.size() << " pairs\n";
  }
  return kOk;
}

int cmd_study_serve(const Globals& g, const StudyArgs& a) {
  const RunConfig cfg = load(g);
  auto plans = load_plans(a);
  const fs::path run = a.run.empty() ? fs::current_path() : fs::path(a.run);
  studyd::Options opts;
  // Test hook: die right after the Nth durable batch, before the ack.
  if (const char* crash = std::getenv("MIMICRY_STUDYD_CRASH_AFTER")) {
    const std::size_t n = std::strtoull(crash, nullptr, 10);
    opts.after_append = [n](std::size_t batches) {
      if (batches >= n) _exit(137);
    };
  }
  studyd::Service service(std::move(plans), data_dir(a), opts);
  studyd::HttpServer server(service, run);

  // Handle SIGINT/SIGTERM on this thread; the server runs on another.
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);

  const int port = server.bind(a.host, a.port >= 0 ? a.port : cfg.study.port);
  std::cout << "listening on http://" << a.host << ':' << port << std::endl;
  std::thread worker([&] { server.run(); });
  int sig = 0;
  sigwait(&set, &sig);
  server.stop();
  worker.join();
  std::cout << "stopped" << std::endl;
  return kOk;
}

int cmd_study_export(const Globals& g, const StudyArgs& a) {
  auto plans = load_plans(a);
  std::string id = a.plan_id;
  if (id.empty()) {
    if (plans.size() != 1) throw ArgumentError("several plans are loaded; pass --plan-id");
    id = plans.front().plan_id;
  }
  studyd::Service service(std::move(plans), data_dir(a));
  const auto lines = service.export_lines(id);
  if (g.out.empty()) {
    for (const auto& l : lines) std::cout << l << '\n';
  } else {
    pipeline::write_lines(g.out, lines);
    std::cerr << "exported " << lines.size() << " records to " << g.out << '\n';
  }
  return kOk;
}

// report -----------------------------------------------------------------------

struct ReportArgs {
  std::vector<std::string> records, plans;
  std::string quality, style;
  std::size_t artists = 10;
  bool allow_partial = false;
  bool no_filter = false;
};

int cmd_report(const Globals& g, const ReportArgs& a) {
  const fs::path out = need_out(g);
  if (!a.quality.empty() || !a.style.empty()) {
    if (a.quality.empty() || a.style.empty()) throw ArgumentError("tables mode needs both --quality and --style");
    const auto t = report::from_per_artist(tables::read_per_artist(a.quality), tables::read_per_artist(a.style),
                                           a.artists);
    report::write_tables(out, t, {"source: per-artist tables " + a.quality + ", " + a.style});
    std::cout << tables::render(t.summary_quality, "Summary, quality") << '\n'
              << tables::render(t.summary_style, "Summary, style");
    return kOk;
  }
  if (a.records.empty() || a.plans.empty()) throw ArgumentError("pass --records and --plan, or --quality and --style");
  std::vector<evalkit::AnnotationRecord> records;
  for (const auto& r : a.records) {
    auto part = evalkit::read_records(r);
    records.insert(records.end(), part.begin(), part.end());
  }
  std::vector<evalkit::StudyPlan> plans;
  for (const auto& p : a.plans) plans.push_back(evalkit::read_plan(p));
  report::StudyOptions opts;
  opts.allow_partial = a.allow_partial;
  opts.filter = !a.no_filter;
  const auto rep = report::from_records(records, plans, opts);
  std::vector<std::string> header;
  if (rep.partial) {
    header.push_back("PARTIAL DATA: " + std::to_string(rep.answered) + " of " + std::to_string(rep.expected) +
                     " votes present; rates are renormalized over the answered votes");
  }
  header.push_back("annotators kept: " + std::to_string(rep.kept.size()) + ", dropped: " +
                   std::to_string(rep.dropped.size()));
  report::write_tables(out, rep.tables, header);
  json meta = {{"partial", rep.partial},
               {"answered", rep.answered},
               {"expected", rep.expected},
               {"kept", rep.kept},
               {"dropped", rep.dropped}};
  if (rep.agreement) {
    meta["agreement"] = {{"majority_3", rep.agreement->percent[0]},
                         {"majority_4", rep.agreement->percent[1]},
                         {"majority_5", rep.agreement->percent[2]},
                         {"comparisons", rep.agreement->comparisons}};
  } else {
    meta["agreement"] = nullptr;
    meta["agreement_note"] = rep.agreement_note;
  }
  write_json(out / "report.json", meta);
  for (const auto& h : header) std::cout << h << '\n';
  std::cout << tables::render(rep.tables.summary_quality, "Summary, quality") << '\n'
            << tables::render(rep.tables.summary_style, "Summary, style");
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Robust style mimicry toolkit: protections, purifications, mimicry runs and the preference study"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "Run configuration (JSON)")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Override the config seed");
  app.add_option("--workers", g.workers, "Worker threads")->check(CLI::PositiveNumber);
  app.add_option("--out", g.out, "Output path (file or directory, per command)");
  app.add_option("--checkpoint", g.checkpoint, "Toy checkpoint (overrides the config)");
  app.add_flag("-q,--quiet", g.quiet, "No progress log on stderr");

  int code = kOk;

  auto* train = app.add_subcommand("toy-train", "Train the toy backend and write a checkpoint to --out");
  train->callback([&] { code = cmd_toy_train(g); });

  ProtectArgs pa;
  auto* prot = app.add_subcommand("protect", "Protect an artist dataset");
  prot->add_option("--method", pa.method, "mist-enc | glaze-like | anti-db")->required();
  prot->add_option("--budget", pa.budget, "L-infinity budget, e.g. 8/255");
  prot->add_option("--in", pa.in, "Dataset manifest or its directory")->required();
  prot->add_option("--iters", pa.iters, "Iterations (outer rounds for anti-db)");
  prot->callback([&] { code = cmd_protect(g, pa); });

  PurifyArgs pu;
  auto* pur = app.add_subcommand("purify", "Purify a dataset");
  pur->add_option("--method", pu.method, "gaussian | diffpure | noisy-upscale | reverse-enc")->required();
  pur->add_option("--in", pu.in, "Dataset manifest or its directory")->required();
  pur->add_option("--sigma", pu.sigma, "Noise deviation (gaussian, noisy-upscale)");
  pur->add_option("--strength", pu.strength, "DiffPure strength");
  pur->add_option("--level", pu.level, "Upscaler noise level in [0, 1]");
  pur->add_option("--iters", pu.iters, "Reverse-encoder iterations");
  pur->callback([&] { code = cmd_purify(g, pu); });

  MimicArgs ma;
  auto* mim = app.add_subcommand("mimic", "Style mimicry");
  mim->require_subcommand(1);
  auto* mrun = mim->add_subcommand("run", "Finetune on a (protected) dataset and generate");
  mrun->add_option("--scenario", ma.scenario, "<protection>:<method>")->required();
  mrun->add_option("--manifest", ma.manifest, "Protected dataset manifest")->required();
  mrun->add_option("--prompts", ma.prompts, "Prompt file, one per line");
  mrun->callback([&] { code = cmd_mimic_run(g, ma); });

  PipelineArgs pl;
  auto* pipe = app.add_subcommand("pipeline", "protect -> purify -> finetune -> generate into the run directory --out");
  pipe->add_option("--scenario", pl.scenarios, "<protection>:<method>; repeatable, default all fifteen");
  pipe->add_option("--artist", pl.artists, "Artist manifest; repeatable, default the config's toy artists");
  pipe->callback([&] { code = cmd_pipeline(g, pl); });

  StudyArgs sa;
  auto* study = app.add_subcommand("study", "Preference study");
  study->require_subcommand(1);
  auto* sbuild = study->add_subcommand("build", "Build plans and control images for a finished run");
  sbuild->add_option("--run", sa.run, "Run directory")->required();
  sbuild->add_option("--artist", sa.artists, "Artist id; repeatable, default all");
  sbuild->callback([&] { code = cmd_study_build(g, sa); });
  auto* sserve = study->add_subcommand("serve", "Serve the study API");
  sserve->add_option("--run", sa.run, "Run directory (images, plans)");
  sserve->add_option("--plan", sa.plans, "Plan file; repeatable, default <run>/study/*.plan.json");
  sserve->add_option("--data", sa.data, "Record log directory, default <run>/study/data");
  sserve->add_option("--host", sa.host, "Bind address");
  sserve->add_option("--port", sa.port, "Port; 0 picks a free one");
  sserve->callback([&] { code = cmd_study_serve(g, sa); });
  auto* sexport = study->add_subcommand("export", "Write a plan's records as JSON lines to --out or stdout");
  sexport->add_option("--run", sa.run, "Run directory");
  sexport->add_option("--plan", sa.plans, "Plan file; repeatable");
  sexport->add_option("--data", sa.data, "Record log directory");
  sexport->add_option("--plan-id", sa.plan_id, "Plan to export");
  sexport->callback([&] { code = cmd_study_export(g, sa); });

  ReportArgs ra;
  auto* rep = app.add_subcommand("report", "Per-artist and summary tables into the directory --out");
  rep->add_option("--records", ra.records, "Exported records; repeatable");
  rep->add_option("--plan", ra.plans, "Plan file; repeatable");
  rep->add_option("--quality", ra.quality, "Per-artist quality table (tables mode)");
  rep->add_option("--style", ra.style, "Per-artist style table (tables mode)");
  rep->add_option("--artists", ra.artists, "Artists per protection in tables mode");
  rep->add_flag("--allow-partial", ra.allow_partial, "Renormalize over answered votes instead of failing");
  rep->add_flag("--no-filter", ra.no_filter, "Keep annotators who fail the control comparisons");
  rep->callback([&] { code = cmd_report(g, ra); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const PartialDataError& e) {
    std::cerr << "error: " << e.what() << " (use --allow-partial to renormalize)\n";
    for (const auto& s : e.missing_slots()) std::cerr << "  missing " << s << '\n';
    return kFailed;
  } catch (const ArgumentError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kError;
  }
  return code;
}
