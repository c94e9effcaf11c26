#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mimicry/backend.hpp"
#include "mimicry/dataset.hpp"

namespace mimicry::protect {

inline constexpr double kDefaultBudget = 8.0 / 255.0;

struct PgdConfig {
  double budget = kDefaultBudget;  ///< L-infinity radius p, [0, 1] pixel scale
  double step = 1.0 / 255.0;       ///< alpha
  int iterations = 100;            ///< N
  std::uint64_t seed = 0;
};

void validate(const PgdConfig& cfg);

struct Perturbation {
  Image delta;
  double budget = 0.0;

  double linf() const;
};

struct ProtectionResult {
  std::vector<Image> images;  ///< clean + delta, clamped to [0, 1]
  std::vector<Perturbation> perturbations;
  std::vector<std::vector<double>> traces;  ///< objective per image, N + 1 entries
  nlohmann::json config;
};

enum class Direction { descend, ascend };

/// Projects x onto {x : |x - x0|_inf <= p} intersected with [0, 1]^n.
void project(Image& x, const Image& x0, double budget);

/// One signed-gradient step followed by projection.
void pgd_step(Image& x, const Image& x0, const Image& grad, double step, double budget, Direction dir);

/// Drives E(x + delta) toward E(target) under the budget.
ProtectionResult encoder_attack_pgd(const DiffusionBackend& backend, const std::vector<Image>& images,
                                    const Image& target_image, const PgdConfig& cfg, int workers = 1);

struct StyleEntry {
  std::string id;
  std::string prompt;
};

/// 1-indexed inclusive rank window [ceil(0.5 n), floor(0.75 n)].
std::pair<int, int> percentile_window(int n);

/// Ranks styles by ascending distance between the images' mean embedding and
/// each style prompt's embedding, then draws uniformly from the window.
std::string select_target_style(const DiffusionBackend& backend, const std::vector<Image>& images,
                                const std::vector<StyleEntry>& library, std::uint64_t seed);

struct GlazeConfig {
  double penalty = 1.0;              ///< alpha_pen
  double similarity_bound = 2e-4;    ///< hinge threshold in units of backend.similarity
  double budget = kDefaultBudget;    ///< hard L-infinity cap
  int steps = 100;
  double lr = 1.0 / 255.0;
  double target_strength = 0.6;      ///< img2img strength used to build style targets
  std::uint64_t seed = 0;
};

/// Style-transferred targets x_S' for each image: img2img toward the prompt.
std::vector<Image> glaze_targets(const DiffusionBackend& backend, const std::vector<Image>& images,
                                 const std::string& style_prompt, double strength, std::uint64_t seed,
                                 int workers = 1);

/// Penalty-method attack: min |E(x + d) - t_x|^2 + alpha_pen * max(sim(x + d, x) - bound, 0), Adam updates.
ProtectionResult glaze_style_attack(const DiffusionBackend& backend, const std::vector<Image>& images,
                                    const std::vector<Image>& target_style_images, const GlazeConfig& cfg,
                                    int workers = 1);

struct AsplConfig {
  int iterations = 50;       ///< N outer rounds
  double step = 5e-3;        ///< alpha
  int pgd_steps = 6;         ///< N_PGD per round
  int finetune_steps = 300;  ///< surrogate steps per round
  double budget = kDefaultBudget;
  int finetune_batch = 4;
  double finetune_lr = 5e-6;
  int loss_samples = 4;      ///< (timestep, noise) draws per gradient estimate
  std::string special_word = "nulevoy";
  std::uint64_t seed = 0;
};

/// Anti-DreamBooth style alternating surrogate finetuning and ascent PGD on
/// the surrogate's denoiser loss. Traces hold the surrogate loss on the
/// current images before round 1 and after every round.
ProtectionResult aspl_attack(const DiffusionBackend& backend, const dataset::ArtistDataset& dataset,
                             const AsplConfig& cfg, int workers = 1);

}  // namespace mimicry::protect
