#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mimicry/backend.hpp"
#include "mimicry/rng.hpp"

namespace mimicry {

inline constexpr double kDefaultGuidanceScale = 7.5;
inline constexpr int kDefaultSamplingSteps = 50;

/// x_t = sqrt(alpha_bar_t) * x + sqrt(1 - alpha_bar_t) * eps, eps ~ N(0, I)
/// drawn from `seed`.
std::vector<double> forward_diffuse(std::span<const double> x, int timestep, const NoiseSchedule& schedule,
                                    std::uint64_t seed);
LatentTensor forward_diffuse(const LatentTensor& x, int timestep, const NoiseSchedule& schedule, std::uint64_t seed);

/// (1 + w) * eps_p - w * ((1 + c) * eps_neg - c * eps_empty), elementwise.
/// c = -1 is plain classifier-free guidance, c = 0 plain negative prompting.
std::vector<double> combine_guidance(std::span<const double> eps_prompt, std::span<const double> eps_negative,
                                     std::span<const double> eps_empty, double w, double c);

/// Classifier-free guidance against the empty prompt.
LatentTensor cfg_denoise(const DiffusionBackend& backend, const LatentTensor& z, int timestep,
                         const PromptEmbedding& prompt, double w);

/// Guidance with a weighted negative prompt.
LatentTensor weighted_negative_denoise(const DiffusionBackend& backend, const LatentTensor& z, int timestep,
                                       const PromptEmbedding& prompt, const PromptEmbedding& negative, double w,
                                       double c);

struct NegativePrompt {
  PromptEmbedding embedding;
  double strength = 0.5;  ///< c
};

struct GuidanceOptions {
  double scale = kDefaultGuidanceScale;
  std::optional<NegativePrompt> negative;
  /// Clip predicted clean latents to [-clip, clip]; 0 disables, negative
  /// defers to backend.sampling_clip().
  double latent_clip = -1.0;
};

/// Evenly spaced descending timesteps from `start` down to the first stride
/// (at most `steps`; every timestep when steps >= start).
std::vector<int> respaced_timesteps(int start, int steps);

/// Ancestral (DDPM posterior) reverse process from z at timesteps[0] down to
/// 0, visiting the given descending timesteps.
LatentTensor reverse_diffuse(const DiffusionBackend& backend, LatentTensor z, std::span<const int> timesteps,
                             const PromptEmbedding& prompt, const GuidanceOptions& guidance, Rng& rng);

/// Text-to-image from pure noise, decoded through the backend.
Image sample(const DiffusionBackend& backend, const PromptEmbedding& prompt, int steps,
             const GuidanceOptions& guidance, std::uint64_t seed);
Image sample(const DiffusionBackend& backend, const std::string& prompt, int steps, double w,
             const std::optional<std::pair<std::string, double>>& negative, std::uint64_t seed);

/// Image-to-image: encode, diffuse to t = round(strength * T), run the
/// guided reverse process from t, decode. strength 0 returns D(E(image)).
Image img2img(const DiffusionBackend& backend, const Image& image, double strength, const PromptEmbedding& prompt,
              const GuidanceOptions& guidance, int max_steps, std::uint64_t seed);

}  // namespace mimicry
