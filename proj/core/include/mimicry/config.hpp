#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mimicry/mimic.hpp"
#include "mimicry/protect.hpp"
#include "mimicry/toy_backend.hpp"

namespace mimicry {

struct StudyConfig {
  int quality_controls = 10;
  int style_controls = 10;
  int training_pairs = 6;
  int annotators_per_pair = 5;
  double filter_threshold = 0.8;
  double quality_control_sigma = 0.3;
  double style_control_strength = 0.6;
  int likert_threshold = 3;
  int port = 8080;
};

/// A procedurally generated artist for toy runs.
struct ToyArtist {
  std::string id;
  std::string style;
  int count = 8;
};

struct RunConfig {
  std::string backend = "toy";  ///< toy | adapter
  /// Toy checkpoint, relative to the config file. Empty or missing: train
  /// one into the run directory.
  std::string checkpoint;
  std::uint64_t seed = 0;
  int workers = 1;
  int crop_size = 512;  ///< dataset crop side; the toy backend uses toy.image_side

  toy::ToyConfig toy;
  std::vector<ToyArtist> toy_artists;
  int toy_corpus_per_style = 40;

  protect::PgdConfig mist;
  std::string mist_target = "checker";  ///< "checker" or an image path
  protect::GlazeConfig glaze;
  protect::AsplConfig anti_db;

  mimic::MimicConfig mimic;
  std::vector<std::string> prompts;
  std::vector<std::uint64_t> generation_seeds{0};

  StudyConfig study;

  std::filesystem::path base_dir;  ///< directory of the loaded file; not serialized
};

void to_json(nlohmann::json& j, const RunConfig& c);
/// Missing keys keep their defaults; unknown top-level keys are rejected.
void from_json(const nlohmann::json& j, RunConfig& c);

/// Throws ArgumentError on invalid values.
void validate(const RunConfig& c);

RunConfig load_config(const std::filesystem::path& path);
void save_config(const std::filesystem::path& path, const RunConfig& c);

/// FNV-1a of the canonical JSON form without the worker count.
std::uint64_t config_hash(const RunConfig& c);
std::string hash_hex(std::uint64_t h);

/// The ten evaluation prompts used when the config lists none.
const std::vector<std::string>& default_prompts();

}  // namespace mimicry
