#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mimicry/backend.hpp"
#include "mimicry/config.hpp"
#include "mimicry/dataset.hpp"
#include "mimicry/evalkit.hpp"
#include "mimicry/mimic.hpp"
#include "mimicry/protect.hpp"

namespace mimicry::pipeline {

enum class Protection { anti_db, glaze, mist };

inline constexpr Protection kAllProtections[] = {Protection::anti_db, Protection::glaze, Protection::mist};

/// "anti-db", "glaze", "mist". Parsing also accepts "mist-enc" and "glaze-like".
std::string to_string(Protection p);
Protection parse_protection(const std::string& name);

struct Scenario {
  Protection protection = Protection::mist;
  mimic::Method method = mimic::Method::naive;

  /// "<protection>/<method>", also the directory below images/<artist>/.
  std::string id() const;
  bool operator==(const Scenario&) const = default;
};

/// Accepts "<protection>:<method>" or "<protection>/<method>".
Scenario parse_scenario(const std::string& text);

/// Protections x methods, protection-major.
std::vector<Scenario> all_scenarios();

/// Five prompts, one per toy style, used as the glaze target library.
std::vector<protect::StyleEntry> toy_style_library();

/// Loads the configured backend. The toy checkpoint is read when it exists;
/// otherwise a toy model is trained and written to the checkpoint path (or
/// to `fallback_checkpoint` when the config names none).
std::unique_ptr<DiffusionBackend> load_backend(const RunConfig& cfg, const std::filesystem::path& fallback_checkpoint,
                                               std::ostream* log = nullptr);

/// Dataset for each configured toy artist, drawn with seed derive_seed(seed, "artist:<id>").
std::vector<dataset::ArtistDataset> toy_artists(const RunConfig& cfg, int side);

/// Runs one protection with the config's settings and seed substreams.
protect::ProtectionResult apply_protection(const DiffusionBackend& backend, const dataset::ArtistDataset& artist,
                                           Protection protection, const RunConfig& cfg, int workers = 1);

/// Mimicry settings for one artist; the seed is a per-artist substream.
mimic::MimicConfig mimic_config(const RunConfig& cfg, const std::string& artist_id);

struct ScenarioStatus {
  std::string artist_id;
  std::string scenario;  ///< "baseline" or Scenario::id()
  std::string dir;       ///< relative to the run directory
  bool ok = false;
  std::string error;
  std::vector<std::string> images;  ///< relative paths
};

struct PipelineResult {
  std::filesystem::path run_dir;
  std::vector<ScenarioStatus> scenarios;
  int failures = 0;
};

/// protect -> purify -> finetune -> generate for every (artist, scenario),
/// plus a clean naive baseline per artist. Layout under `run_dir`:
///   config.json, scenarios.json
///   gallery/<artist>/gNN.png                    clean artist images
///   protected/<artist>/<protection>/            images, manifest, traces.jsonl
///   images/<artist>/baseline/pNN.png
///   images/<artist>/<protection>/<method>/pNN.png and provenance.json
/// A failing scenario leaves a FAILED file with the error in its directory;
/// the others still complete. Scenarios run in parallel on `cfg.workers`.
PipelineResult run_pipeline(const DiffusionBackend& backend, const RunConfig& cfg,
                            const std::vector<dataset::ArtistDataset>& artists, const std::vector<Scenario>& scenarios,
                            const std::filesystem::path& run_dir, std::ostream* log = nullptr);

/// Study plan for one artist of a finished run. Uses the run's successful
/// scenarios and writes the control images (from the gallery) and the
/// training pairs into the run directory.
evalkit::StudyPlan prepare_study(const DiffusionBackend& backend, const RunConfig& cfg,
                                 const std::filesystem::path& run_dir, const std::string& artist_id);

/// "pNN.png" for the first seed, "pNN_sK.png" for seed index K > 0.
std::string image_name(std::size_t prompt_index, std::size_t seed_index);

/// Writes each line plus a newline.
void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines);
/// Non-empty lines with surrounding whitespace removed.
std::vector<std::string> read_prompts(const std::filesystem::path& path);

/// FNV-1a over sorted relative paths and file contents.
std::uint64_t tree_hash(const std::filesystem::path& dir);

}  // namespace mimicry::pipeline
