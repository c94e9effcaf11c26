#include "mimicry/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <ostream>
#include <sstream>

#include "mimicry/error.hpp"
#include "mimicry/parallel.hpp"
#include "mimicry/rng.hpp"
#include "mimicry/toy_backend.hpp"
#include "mimicry/toy_data.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mimicry::pipeline {

std::string to_string(Protection p) {
  switch (p) {
    case Protection::anti_db: return "anti-db";
    case Protection::glaze: return "glaze";
    case Protection::mist: return "mist";
  }
  throw ArgumentError("unknown protection");
}

Protection parse_protection(const std::string& name) {
  if (name == "anti-db" || name == "antidb" || name == "aspl") return Protection::anti_db;
  if (name == "glaze" || name == "glaze-like") return Protection::glaze;
  if (name == "mist" || name == "mist-enc") return Protection::mist;
  throw ArgumentError("unknown protection: " + name);
}

std::string Scenario::id() const { return to_string(protection) + "/" + mimic::to_string(method); }

Scenario parse_scenario(const std::string& text) {
  const auto cut = text.find_first_of(":/");
  if (cut == std::string::npos) throw ArgumentError("scenario must be <protection>:<method>, got '" + text + "'");
  return {parse_protection(text.substr(0, cut)), mimic::parse_method(text.substr(cut + 1))};
}

std::vector<Scenario> all_scenarios() {
  std::vector<Scenario> out;
  for (auto p : kAllProtections) {
    for (auto m : mimic::kAllMethods) out.push_back({p, m});
  }
  return out;
}

std::vector<protect::StyleEntry> toy_style_library() {
  std::vector<protect::StyleEntry> lib;
  for (const char* s : toy::kStyles) lib.push_back({s, std::string("a ") + s + " picture"});
  return lib;
}

std::unique_ptr<DiffusionBackend> load_backend(const RunConfig& cfg, const fs::path& fallback_checkpoint,
                                               std::ostream* log) {
  if (cfg.backend == "adapter") {
    throw BackendError("the adapter backend is not available in this build; use backend \"toy\"");
  }
  if (cfg.backend != "toy") throw ArgumentError("unknown backend " + cfg.backend);
  fs::path ckpt = cfg.checkpoint.empty() ? fallback_checkpoint : fs::path(cfg.checkpoint);
  if (ckpt.is_relative() && !cfg.checkpoint.empty()) ckpt = cfg.base_dir / ckpt;
  if (!ckpt.empty() && fs::exists(ckpt)) {
    if (log) *log << "loading toy checkpoint " << ckpt.string() << '\n';
    auto b = toy::ToyBackend::load(ckpt);
    return b.clone();
  }
  if (log) *log << "training toy backend\n";
  std::vector<std::string> styles(toy::kStyles.begin(), toy::kStyles.end());
  const auto corpus =
      toy::make_corpus(styles, cfg.toy_corpus_per_style, cfg.toy.image_side, derive_seed(cfg.seed, "toy-corpus"));
  auto b = toy::train_toy_backend(cfg.toy, corpus);
  if (!ckpt.empty()) {
    if (ckpt.has_parent_path()) fs::create_directories(ckpt.parent_path());
    b.save(ckpt);
    if (log) *log << "saved toy checkpoint " << ckpt.string() << '\n';
  }
  return b.clone();
}

std::vector<dataset::ArtistDataset> toy_artists(const RunConfig& cfg, int side) {
  std::vector<dataset::ArtistDataset> out;
  for (const auto& a : cfg.toy_artists) {
    out.push_back(toy::make_artist(a.id, a.style, a.count, side, derive_seed(cfg.seed, "artist:" + a.id)));
  }
  return out;
}

protect::ProtectionResult apply_protection(const DiffusionBackend& backend, const dataset::ArtistDataset& artist,
                                           Protection protection, const RunConfig& cfg, int workers) {
  const std::string stream = "protect:" + artist.artist_id + ":" + to_string(protection);
  switch (protection) {
    case Protection::mist: {
      auto pc = cfg.mist;
      pc.seed = derive_seed(cfg.seed, stream);
      Image target;
      if (cfg.mist_target == "checker") {
        target = toy::checker_target(backend.image_side());
      } else {
        fs::path p = cfg.mist_target;
        if (p.is_relative()) p = cfg.base_dir / p;
        target = center_crop_resize(load_image(p), backend.image_side());
      }
      return protect::encoder_attack_pgd(backend, artist.images, target, pc, workers);
    }
    case Protection::glaze: {
      auto gc = cfg.glaze;
      gc.seed = derive_seed(cfg.seed, stream);
      const auto library = toy_style_library();
      const std::string style = protect::select_target_style(backend, artist.images, library, gc.seed);
      const auto entry = std::find_if(library.begin(), library.end(), [&](const auto& e) { return e.id == style; });
      const auto targets =
          protect::glaze_targets(backend, artist.images, entry->prompt, gc.target_strength, gc.seed, workers);
      auto res = protect::glaze_style_attack(backend, artist.images, targets, gc, workers);
      res.config["target_style"] = style;
      return res;
    }
    case Protection::anti_db: {
      auto ac = cfg.anti_db;
      ac.seed = derive_seed(cfg.seed, stream);
      return protect::aspl_attack(backend, artist, ac, workers);
    }
  }
  throw ArgumentError("unknown protection");
}

mimic::MimicConfig mimic_config(const RunConfig& cfg, const std::string& artist_id) {
  auto mc = cfg.mimic;
  mc.seed = derive_seed(cfg.seed, "mimic:" + artist_id);
  return mc;
}

std::string image_name(std::size_t prompt_index, std::size_t seed_index) {
  char buf[32];
  if (seed_index == 0) {
    std::snprintf(buf, sizeof buf, "p%02zu.png", prompt_index);
  } else {
    std::snprintf(buf, sizeof buf, "p%02zu_s%zu.png", prompt_index, seed_index);
  }
  return buf;
}

void write_lines(const fs::path& path, const std::vector<std::string>& lines) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  for (const auto& l : lines) os << l << '\n';
}

std::vector<std::string> read_prompts(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open prompt file " + path.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(is, line)) {
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    const auto e = line.find_last_not_of(" \t\r");
    out.push_back(line.substr(b, e - b + 1));
  }
  if (out.empty()) throw ArgumentError("prompt file " + path.string() + " is empty");
  return out;
}

std::uint64_t tree_hash(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), dir));
  }
  std::sort(files.begin(), files.end());
  std::uint64_t h = fnv1a64("");
  for (const auto& f : files) {
    h = fnv1a64(f.generic_string(), h);
    std::ifstream is(dir / f, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    h = fnv1a64(ss.str(), h);
  }
  return h;
}

namespace {

struct Job {
  std::size_t artist = 0;
  bool baseline = false;
  Scenario scenario;
};

void save_png(const Image& image, const fs::path& path) {
  fs::create_directories(path.parent_path());
  save_image_lossless(image, path);
}

json provenance(const RunConfig& cfg, const std::string& stage, const std::string& artist, std::uint64_t seed) {
  return {{"config_hash", hash_hex(config_hash(cfg))}, {"seed", seed}, {"stage", stage}, {"artist", artist}};
}

}  // namespace

PipelineResult run_pipeline(const DiffusionBackend& backend, const RunConfig& cfg,
                            const std::vector<dataset::ArtistDataset>& artists, const std::vector<Scenario>& scenarios,
                            const fs::path& run_dir, std::ostream* log) {
  validate(cfg);
  if (artists.empty()) throw ArgumentError("pipeline needs at least one artist");
  const auto prompts = cfg.prompts.empty() ? default_prompts() : cfg.prompts;
  const int side = backend.image_side();
  std::mutex log_mu;
  auto say = [&](const std::string& msg) {
    if (!log) return;
    std::lock_guard lock(log_mu);
    *log << msg << '\n';
  };

  fs::create_directories(run_dir);
  {
    json doc = cfg;
    doc.erase("workers");
    doc["config_hash"] = hash_hex(config_hash(cfg));
    std::ofstream os(run_dir / "config.json", std::ios::trunc);
    os << doc.dump(2) << '\n';
  }

  std::vector<dataset::ArtistDataset> clean;
  for (const auto& a : artists) {
    auto d = a;
    for (auto& img : d.images) {
      if (img.height != side || img.width != side) img = center_crop_resize(img, side);
    }
    dataset::validate(d, side);
    dataset::save_dataset(d, run_dir / "gallery" / d.artist_id, "g");
    clean.push_back(std::move(d));
  }

  // Protect each (artist, protection) once; scenarios share the result.
  std::vector<Protection> needed;
  for (const auto& s : scenarios) {
    if (std::find(needed.begin(), needed.end(), s.protection) == needed.end()) needed.push_back(s.protection);
  }
  struct Protected {
    dataset::ArtistDataset data;
    std::string error;
  };
  std::vector<Protected> prot(clean.size() * needed.size());
  parallel_for(prot.size(), cfg.workers, [&](std::size_t k) {
    const auto& artist = clean[k / needed.size()];
    const Protection p = needed[k % needed.size()];
    const fs::path dir = run_dir / "protected" / artist.artist_id / to_string(p);
    say("protect " + artist.artist_id + " " + to_string(p));
    fs::remove(dir / "FAILED");
    try {
      auto res = apply_protection(backend, artist, p, cfg, 1);
      auto ds = artist;
      for (std::size_t i = 0; i < ds.images.size(); ++i) ds.images[i] = quantize8(res.images[i]);
      dataset::save_dataset(ds, dir);
      std::vector<std::string> lines;
      for (std::size_t i = 0; i < res.traces.size(); ++i) {
        lines.push_back(json{{"image", i}, {"linf", res.perturbations[i].linf()}, {"trace", res.traces[i]}}.dump());
      }
      write_lines(dir / "traces.jsonl", lines);
      json meta = provenance(cfg, "protect", artist.artist_id, derive_seed(cfg.seed, "protect:" + artist.artist_id));
      meta["protection"] = to_string(p);
      meta["settings"] = res.config;
      std::ofstream(dir / "provenance.json") << meta.dump(2) << '\n';
      prot[k].data = std::move(ds);
    } catch (const std::exception& e) {
      fs::create_directories(dir);
      std::ofstream(dir / "FAILED") << e.what() << '\n';
      prot[k].error = e.what();
    }
  });

  std::vector<Job> jobs;
  for (std::size_t a = 0; a < clean.size(); ++a) {
    jobs.push_back({a, true, {}});
    for (const auto& s : scenarios) jobs.push_back({a, false, s});
  }

  PipelineResult result;
  result.run_dir = run_dir;
  result.scenarios.resize(jobs.size());
  parallel_for(jobs.size(), cfg.workers, [&](std::size_t j) {
    const Job& job = jobs[j];
    const auto& artist = clean[job.artist];
    ScenarioStatus& st = result.scenarios[j];
    st.artist_id = artist.artist_id;
    st.scenario = job.baseline ? "baseline" : job.scenario.id();
    st.dir = (fs::path("images") / artist.artist_id / st.scenario).generic_string();
    const fs::path dir = run_dir / st.dir;
    fs::create_directories(dir);
    fs::remove(dir / "FAILED");
    say("mimic " + artist.artist_id + " " + st.scenario);
    try {
      const auto mc = mimic_config(cfg, artist.artist_id);
      mimic::ScenarioOutput out;
      if (job.baseline) {
        auto spec = mimic::pipeline_for(mimic::Method::naive, mc);
        spec.name = "baseline";
        spec.stream = "baseline";
        out = mimic::run_pipeline(backend, artist, spec, prompts, cfg.generation_seeds, mc, 1);
      } else {
        const auto pi = std::find(needed.begin(), needed.end(), job.scenario.protection) - needed.begin();
        const auto& p = prot[job.artist * needed.size() + pi];
        if (!p.error.empty()) throw BackendError("protection failed: " + p.error);
        out = mimic::run_scenario(backend, p.data, job.scenario.method, prompts, cfg.generation_seeds, mc, 1);
      }
      for (std::size_t k = 0; k < out.images.size(); ++k) {
        const std::string name = image_name(k / out.seeds.size(), k % out.seeds.size());
        save_image_lossless(out.images[k], dir / name);
        st.images.push_back((fs::path(st.dir) / name).generic_string());
      }
      json meta = provenance(cfg, "mimic", artist.artist_id, mc.seed);
      meta["scenario"] = st.scenario;
      meta["prompts"] = out.prompts;
      meta["generation_seeds"] = out.seeds;
      meta["model"] = {{"method", out.model.provenance.method},
                       {"dataset", out.model.provenance.dataset_id},
                       {"parameter_hash", hash_hex(parameter_hash(*out.model.backend))},
                       {"checkpoint_steps", out.model.checkpoint_steps},
                       {"loss_trace", out.model.loss_trace}};
      std::ofstream(dir / "provenance.json") << meta.dump(2) << '\n';
      st.ok = true;
    } catch (const std::exception& e) {
      st.error = e.what();
      std::ofstream(dir / "FAILED") << e.what() << '\n';
      say("FAILED " + artist.artist_id + " " + st.scenario + ": " + e.what());
    }
  });

  json index = json::array();
  for (const auto& s : result.scenarios) {
    if (!s.ok) ++result.failures;
    index.push_back({{"artist", s.artist_id},
                     {"scenario", s.scenario},
                     {"dir", s.dir},
                     {"status", s.ok ? "ok" : "failed"},
                     {"error", s.error},
                     {"images", s.images}});
  }
  json doc = {{"config_hash", hash_hex(config_hash(cfg))}, {"prompts", prompts}, {"scenarios", index}};
  std::ofstream(run_dir / "scenarios.json", std::ios::trunc) << doc.dump(2) << '\n';
  return result;
}

evalkit::StudyPlan prepare_study(const DiffusionBackend& backend, const RunConfig& cfg, const fs::path& run_dir,
                                 const std::string& artist_id) {
  using evalkit::PairKind;
  std::ifstream is(run_dir / "scenarios.json");
  if (!is) throw IoError("no scenarios.json in " + run_dir.string() + "; run the pipeline first");
  const json index = json::parse(is);
  evalkit::StudyRequest req;
  req.artist_id = artist_id;
  req.prompts = index.at("prompts").get<std::vector<std::string>>();
  bool baseline = false;
  for (const auto& s : index.at("scenarios")) {
    if (s.at("artist") != artist_id || s.at("status") != "ok") continue;
    const auto id = s.at("scenario").get<std::string>();
    if (id == "baseline") {
      baseline = true;
    } else {
      req.scenarios.push_back(id);
    }
  }
  if (!baseline) throw DataError("artist " + artist_id + " has no baseline images in " + run_dir.string());
  if (req.scenarios.empty()) throw DataError("artist " + artist_id + " has no finished scenarios");
  req.quality_controls = cfg.study.quality_controls;
  req.style_controls = cfg.study.style_controls;
  req.training_pairs = cfg.study.training_pairs;
  req.annotators_per_pair = cfg.study.annotators_per_pair;
  req.seed = derive_seed(cfg.seed, "study");
  auto plan = evalkit::build_study(req);

  const auto gallery = dataset::load_dataset(run_dir / "gallery" / artist_id / "manifest.json", backend.image_side());
  const std::size_t n = gallery.size();
  for (int i = 0; i < req.quality_controls; ++i) {
    const auto c = evalkit::make_quality_control(gallery.images[i % n], cfg.study.quality_control_sigma,
                                                 derive_seed(req.seed, "qc:" + artist_id + ":" + std::to_string(i)));
    save_png(c.original, run_dir / evalkit::control_image_ref(artist_id, PairKind::quality_control, i, true));
    save_png(c.variant, run_dir / evalkit::control_image_ref(artist_id, PairKind::quality_control, i, false));
  }
  for (int i = 0; i < req.style_controls; ++i) {
    const auto c =
        evalkit::make_style_control(backend, gallery.images[i % n],
                                    derive_seed(req.seed, "sc:" + artist_id + ":" + std::to_string(i)),
                                    cfg.study.style_control_strength, cfg.mimic.guidance);
    save_png(c.original, run_dir / evalkit::control_image_ref(artist_id, PairKind::style_control, i, true));
    save_png(c.variant, run_dir / evalkit::control_image_ref(artist_id, PairKind::style_control, i, false));
  }
  // Training pairs do not depend on the artist: a clean drawing against a
  // heavily noised copy.
  for (int i = 0; i < req.training_pairs; ++i) {
    const auto s = derive_seed(req.seed, "training:" + std::to_string(i));
    const Image clean = toy::render(toy::kStyles[i % toy::kStyles.size()], toy::kShapes[i % toy::kShapes.size()],
                                    backend.image_side(), s);
    const auto c = evalkit::make_quality_control(clean, 0.3, s);
    save_png(c.original, run_dir / evalkit::training_image_ref(i, true));
    save_png(c.variant, run_dir / evalkit::training_image_ref(i, false));
  }
  return plan;
}

}  // namespace mimicry::pipeline
