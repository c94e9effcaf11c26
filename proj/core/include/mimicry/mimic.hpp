#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mimicry/backend.hpp"
#include "mimicry/dataset.hpp"
#include "mimicry/purify.hpp"

namespace mimicry::mimic {

inline constexpr const char* kSpecialWord = "nulevoy";

struct FinetuneConfig {
  int steps = 2000;
  int batch = 4;
  double lr = 5e-6;
  std::string special_word = kSpecialWord;
  std::uint64_t seed = 0;
  int checkpoint_every = 50;
};

void validate(const FinetuneConfig& cfg);

/// P_x = C_x + " by " + w
std::string training_prompt(const std::string& caption, const std::string& word);

struct Provenance {
  std::string dataset_id;
  std::string method;
  std::uint64_t config_hash = 0;
};

struct FinetunedModel {
  std::unique_ptr<DiffusionBackend> backend;
  Provenance provenance;
  std::vector<int> checkpoint_steps;
  std::vector<double> loss_trace;  ///< loss on a fixed evaluation batch at each checkpoint
};

/// Finetunes a deep copy of `backend` on (image, training_prompt(caption)).
FinetunedModel finetune(const DiffusionBackend& backend, const dataset::ArtistDataset& dataset,
                        const FinetuneConfig& cfg, const std::string& method = "naive");

/// Finetunes `model` in place; returns the checkpoint loss trace.
std::vector<double> finetune_in_place(DiffusionBackend& model, const std::vector<Image>& images,
                                      const std::vector<std::string>& prompts, const FinetuneConfig& cfg);

struct TextualInversionConfig {
  int tokens = 8;
  double lr = 0.005;
  int steps = 500;
  std::string init_text = "style *";
  int batch = 1;
  std::uint64_t seed = 0;
};

/// Learns `tokens` new embedding vectors appended to `prefix` (e.g. "art by")
/// with the backend frozen. Returns the composite embedding.
PromptEmbedding textual_inversion(const DiffusionBackend& backend, const std::vector<Image>& images,
                                  const TextualInversionConfig& cfg, const std::string& prefix = "art by");

/// Mean denoiser loss of `prompt` over the images on a fixed (timestep, noise) grid.
double embedding_loss(const DiffusionBackend& backend, const std::vector<Image>& images, const PromptEmbedding& prompt,
                      std::uint64_t seed, int samples_per_image = 8);

enum class Method { naive, gaussian, impress_pp, diffpure, noisy_upscale };

/// Canonical names; the enum order is also the best-of-k tie-break order.
std::string to_string(Method m);
Method parse_method(const std::string& name);
inline constexpr Method kAllMethods[] = {Method::naive, Method::gaussian, Method::impress_pp, Method::diffpure,
                                         Method::noisy_upscale};

struct MimicConfig {
  FinetuneConfig finetune;
  TextualInversionConfig inversion;
  double guidance = 7.5;
  int sampling_steps = 50;
  double gaussian_sigma = 0.05;
  double diffpure_strength = 0.2;
  double upscale_sigma = 0.1;
  double upscale_level = 1.0;
  double impress_sigma = 0.05;
  protect::PgdConfig impress_pgd{8.0 / 255.0, 1.0 / 255.0, 400, 0};
  double impress_temperature = 500.0;
  double negative_strength = 0.5;  ///< c
  double post_strength = 0.2;
  std::string post_suffix = ", artistic";
  std::string negative_prefix = "art by";
  std::uint64_t seed = 0;
};

/// A fully explicit pipeline: preprocessing chain, finetune, sample, optional
/// negative prompting and post-pass. Methods are presets of this.
struct PipelineSpec {
  std::string name;
  std::vector<purify::PurifyConfig> preprocess;
  bool negative_prompting = false;
  double negative_strength = 0.5;
  double post_strength = 0.0;
  std::string stream;  ///< generation-seed substream tag
};

PipelineSpec pipeline_for(Method method, const MimicConfig& cfg);

struct ScenarioOutput {
  std::vector<Image> images;  ///< prompt-major: images[p * |seeds| + s]
  std::vector<std::string> prompts;
  std::vector<std::uint64_t> seeds;
  std::vector<Image> training_images;  ///< after preprocessing
  FinetunedModel model;
};

ScenarioOutput run_pipeline(const DiffusionBackend& backend, const dataset::ArtistDataset& protected_dataset,
                            const PipelineSpec& spec, const std::vector<std::string>& prompts,
                            const std::vector<std::uint64_t>& seeds, const MimicConfig& cfg, int workers = 1);

ScenarioOutput run_scenario(const DiffusionBackend& backend, const dataset::ArtistDataset& protected_dataset,
                            Method method, const std::vector<std::string>& prompts,
                            const std::vector<std::uint64_t>& seeds, const MimicConfig& cfg, int workers = 1);

/// Seed for one generation, from a per-method substream.
std::uint64_t generation_seed(std::uint64_t base, const std::string& stream, const std::string& prompt,
                              std::uint64_t seed);

}  // namespace mimicry::mimic
