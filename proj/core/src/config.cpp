#include "mimicry/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>

#include "mimicry/error.hpp"
#include "mimicry/purify.hpp"
#include "mimicry/rng.hpp"

namespace mimicry {

namespace {

template <typename T>
void opt(const nlohmann::json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw ArgumentError(where + " must be an object");
  const std::set<std::string> k(known.begin(), known.end());
  for (const auto& [key, v] : j.items()) {
    if (!k.count(key)) throw ArgumentError("unknown key '" + key + "' in " + where);
  }
}

nlohmann::json pgd_json(const protect::PgdConfig& c) {
  return {{"budget", c.budget}, {"step", c.step}, {"iterations", c.iterations}, {"seed", c.seed}};
}

void pgd_from(const nlohmann::json& j, protect::PgdConfig& c, const std::string& where) {
  reject_unknown(j, {"budget", "step", "iterations", "seed"}, where);
  opt(j, "budget", c.budget);
  opt(j, "step", c.step);
  opt(j, "iterations", c.iterations);
  opt(j, "seed", c.seed);
}

}  // namespace

const std::vector<std::string>& default_prompts() {
  static const std::vector<std::string> p = {"a mountain",
                                             "a piano",
                                             "a shoe",
                                             "a candle",
                                             "a astronaut riding a horse",
                                             "a shoe with a plant growing inside",
                                             "a feathered car",
                                             "a golden apple",
                                             "a castle in the jungle",
                                             "a village in a thunderstorm"};
  return p;
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  nlohmann::json artists = nlohmann::json::array();
  for (const auto& a : c.toy_artists) artists.push_back({{"id", a.id}, {"style", a.style}, {"count", a.count}});
  const auto& m = c.mimic;
  j = nlohmann::json{
      {"backend", c.backend},
      {"checkpoint", c.checkpoint},
      {"seed", c.seed},
      {"workers", c.workers},
      {"crop_size", c.crop_size},
      {"toy", c.toy},
      {"toy_artists", artists},
      {"toy_corpus_per_style", c.toy_corpus_per_style},
      {"mist", pgd_json(c.mist)},
      {"mist_target", c.mist_target},
      {"glaze",
       {{"penalty", c.glaze.penalty},
        {"similarity_bound", c.glaze.similarity_bound},
        {"budget", c.glaze.budget},
        {"steps", c.glaze.steps},
        {"lr", c.glaze.lr},
        {"target_strength", c.glaze.target_strength},
        {"seed", c.glaze.seed}}},
      {"anti_db",
       {{"iterations", c.anti_db.iterations},
        {"step", c.anti_db.step},
        {"pgd_steps", c.anti_db.pgd_steps},
        {"finetune_steps", c.anti_db.finetune_steps},
        {"budget", c.anti_db.budget},
        {"finetune_batch", c.anti_db.finetune_batch},
        {"finetune_lr", c.anti_db.finetune_lr},
        {"loss_samples", c.anti_db.loss_samples},
        {"special_word", c.anti_db.special_word},
        {"seed", c.anti_db.seed}}},
      {"mimic",
       {{"finetune",
         {{"steps", m.finetune.steps},
          {"batch", m.finetune.batch},
          {"lr", m.finetune.lr},
          {"special_word", m.finetune.special_word},
          {"seed", m.finetune.seed},
          {"checkpoint_every", m.finetune.checkpoint_every}}},
        {"inversion",
         {{"tokens", m.inversion.tokens},
          {"lr", m.inversion.lr},
          {"steps", m.inversion.steps},
          {"init_text", m.inversion.init_text},
          {"batch", m.inversion.batch},
          {"seed", m.inversion.seed}}},
        {"guidance", m.guidance},
        {"sampling_steps", m.sampling_steps},
        {"gaussian_sigma", m.gaussian_sigma},
        {"diffpure_strength", m.diffpure_strength},
        {"upscale_sigma", m.upscale_sigma},
        {"upscale_level", m.upscale_level},
        {"impress_sigma", m.impress_sigma},
        {"impress_pgd", pgd_json(m.impress_pgd)},
        {"impress_temperature", m.impress_temperature},
        {"negative_strength", m.negative_strength},
        {"post_strength", m.post_strength},
        {"post_suffix", m.post_suffix},
        {"negative_prefix", m.negative_prefix},
        {"seed", m.seed}}},
      {"prompts", c.prompts},
      {"generation_seeds", c.generation_seeds},
      {"study",
       {{"quality_controls", c.study.quality_controls},
        {"style_controls", c.study.style_controls},
        {"training_pairs", c.study.training_pairs},
        {"annotators_per_pair", c.study.annotators_per_pair},
        {"filter_threshold", c.study.filter_threshold},
        {"quality_control_sigma", c.study.quality_control_sigma},
        {"style_control_strength", c.study.style_control_strength},
        {"likert_threshold", c.study.likert_threshold},
        {"port", c.study.port}}}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  reject_unknown(j,
                 {"backend", "checkpoint", "seed", "workers", "crop_size", "toy", "toy_artists", "toy_corpus_per_style",
                  "mist", "mist_target", "glaze", "anti_db", "mimic", "prompts", "generation_seeds", "study"},
                 "config");
  opt(j, "backend", c.backend);
  opt(j, "checkpoint", c.checkpoint);
  opt(j, "seed", c.seed);
  opt(j, "workers", c.workers);
  opt(j, "crop_size", c.crop_size);
  if (j.contains("toy")) {
    // merge onto the current values rather than the struct defaults
    nlohmann::json merged = c.toy;
    merged.update(j.at("toy"));
    c.toy = merged.get<toy::ToyConfig>();
  }
  if (j.contains("toy_artists")) {
    c.toy_artists.clear();
    for (const auto& a : j.at("toy_artists")) {
      reject_unknown(a, {"id", "style", "count"}, "toy_artists entry");
      ToyArtist t;
      t.id = a.at("id").get<std::string>();
      t.style = a.at("style").get<std::string>();
      opt(a, "count", t.count);
      c.toy_artists.push_back(std::move(t));
    }
  }
  opt(j, "toy_corpus_per_style", c.toy_corpus_per_style);
  if (j.contains("mist")) pgd_from(j.at("mist"), c.mist, "mist");
  opt(j, "mist_target", c.mist_target);
  if (j.contains("glaze")) {
    const auto& g = j.at("glaze");
    reject_unknown(g, {"penalty", "similarity_bound", "budget", "steps", "lr", "target_strength", "seed"}, "glaze");
    opt(g, "penalty", c.glaze.penalty);
    opt(g, "similarity_bound", c.glaze.similarity_bound);
    opt(g, "budget", c.glaze.budget);
    opt(g, "steps", c.glaze.steps);
    opt(g, "lr", c.glaze.lr);
    opt(g, "target_strength", c.glaze.target_strength);
    opt(g, "seed", c.glaze.seed);
  }
  if (j.contains("anti_db")) {
    const auto& a = j.at("anti_db");
    reject_unknown(a,
                   {"iterations", "step", "pgd_steps", "finetune_steps", "budget", "finetune_batch", "finetune_lr",
                    "loss_samples", "special_word", "seed"},
                   "anti_db");
    opt(a, "iterations", c.anti_db.iterations);
    opt(a, "step", c.anti_db.step);
    opt(a, "pgd_steps", c.anti_db.pgd_steps);
    opt(a, "finetune_steps", c.anti_db.finetune_steps);
    opt(a, "budget", c.anti_db.budget);
    opt(a, "finetune_batch", c.anti_db.finetune_batch);
    opt(a, "finetune_lr", c.anti_db.finetune_lr);
    opt(a, "loss_samples", c.anti_db.loss_samples);
    opt(a, "special_word", c.anti_db.special_word);
    opt(a, "seed", c.anti_db.seed);
  }
  if (j.contains("mimic")) {
    const auto& m = j.at("mimic");
    auto& t = c.mimic;
    reject_unknown(m,
                   {"finetune", "inversion", "guidance", "sampling_steps", "gaussian_sigma", "diffpure_strength",
                    "upscale_sigma", "upscale_level", "impress_sigma", "impress_pgd", "impress_temperature",
                    "negative_strength", "post_strength", "post_suffix", "negative_prefix", "seed"},
                   "mimic");
    if (m.contains("finetune")) {
      const auto& f = m.at("finetune");
      reject_unknown(f, {"steps", "batch", "lr", "special_word", "seed", "checkpoint_every"}, "mimic.finetune");
      opt(f, "steps", t.finetune.steps);
      opt(f, "batch", t.finetune.batch);
      opt(f, "lr", t.finetune.lr);
      opt(f, "special_word", t.finetune.special_word);
      opt(f, "seed", t.finetune.seed);
      opt(f, "checkpoint_every", t.finetune.checkpoint_every);
    }
    if (m.contains("inversion")) {
      const auto& v = m.at("inversion");
      reject_unknown(v, {"tokens", "lr", "steps", "init_text", "batch", "seed"}, "mimic.inversion");
      opt(v, "tokens", t.inversion.tokens);
      opt(v, "lr", t.inversion.lr);
      opt(v, "steps", t.inversion.steps);
      opt(v, "init_text", t.inversion.init_text);
      opt(v, "batch", t.inversion.batch);
      opt(v, "seed", t.inversion.seed);
    }
    opt(m, "guidance", t.guidance);
    opt(m, "sampling_steps", t.sampling_steps);
    opt(m, "gaussian_sigma", t.gaussian_sigma);
    opt(m, "diffpure_strength", t.diffpure_strength);
    opt(m, "upscale_sigma", t.upscale_sigma);
    opt(m, "upscale_level", t.upscale_level);
    opt(m, "impress_sigma", t.impress_sigma);
    if (m.contains("impress_pgd")) pgd_from(m.at("impress_pgd"), t.impress_pgd, "mimic.impress_pgd");
    opt(m, "impress_temperature", t.impress_temperature);
    opt(m, "negative_strength", t.negative_strength);
    opt(m, "post_strength", t.post_strength);
    opt(m, "post_suffix", t.post_suffix);
    opt(m, "negative_prefix", t.negative_prefix);
    opt(m, "seed", t.seed);
  }
  opt(j, "prompts", c.prompts);
  opt(j, "generation_seeds", c.generation_seeds);
  if (j.contains("study")) {
    const auto& s = j.at("study");
    reject_unknown(s,
                   {"quality_controls", "style_controls", "training_pairs", "annotators_per_pair", "filter_threshold",
                    "quality_control_sigma", "style_control_strength", "likert_threshold", "port"},
                   "study");
    opt(s, "quality_controls", c.study.quality_controls);
    opt(s, "style_controls", c.study.style_controls);
    opt(s, "training_pairs", c.study.training_pairs);
    opt(s, "annotators_per_pair", c.study.annotators_per_pair);
    opt(s, "filter_threshold", c.study.filter_threshold);
    opt(s, "quality_control_sigma", c.study.quality_control_sigma);
    opt(s, "style_control_strength", c.study.style_control_strength);
    opt(s, "likert_threshold", c.study.likert_threshold);
    opt(s, "port", c.study.port);
  }
}

void validate(const RunConfig& c) {
  if (c.backend != "toy" && c.backend != "adapter") throw ArgumentError("backend must be toy or adapter");
  if (c.workers < 1) throw ArgumentError("workers must be at least 1");
  if (c.crop_size < 1) throw ArgumentError("crop_size must be positive");
  protect::validate(c.mist);
  mimic::validate(c.mimic.finetune);
  if (c.generation_seeds.empty()) throw ArgumentError("generation_seeds must not be empty");
  if (c.study.filter_threshold < 0.0 || c.study.filter_threshold > 1.0) {
    throw ArgumentError("study.filter_threshold must be within [0, 1]");
  }
  if (!(c.study.quality_control_sigma > 0.0)) throw ArgumentError("study.quality_control_sigma must be positive");
  if (!(c.study.style_control_strength > 0.0 && c.study.style_control_strength <= 1.0)) {
    throw ArgumentError("study.style_control_strength must be within (0, 1]");
  }
  if (c.study.annotators_per_pair < 1) throw ArgumentError("study.annotators_per_pair must be positive");
  std::set<std::string> ids;
  for (const auto& a : c.toy_artists) {
    if (a.id.empty() || a.id.find_first_of("/\\ ") != std::string::npos) throw ArgumentError("bad toy artist id '" + a.id + "'");
    if (!ids.insert(a.id).second) throw ArgumentError("duplicate toy artist id " + a.id);
    if (a.count < 1) throw ArgumentError("toy artist count must be positive");
  }
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path.string());
  RunConfig c;
  try {
    c = nlohmann::json::parse(is).get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ArgumentError("invalid config " + path.string() + ": " + e.what());
  }
  c.base_dir = path.parent_path();
  validate(c);
  return c;
}

void save_config(const std::filesystem::path& path, const RunConfig& c) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << nlohmann::json(c).dump(2) << '\n';
}

std::uint64_t config_hash(const RunConfig& c) {
  nlohmann::json j = c;
  j.erase("workers");  // parallelism does not change any output
  return fnv1a64(j.dump());
}

std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace mimicry
