#include "mimicry/guidance.hpp"

#include <algorithm>
#include <cmath>

#include "mimicry/error.hpp"
#include "mimicry/rng.hpp"

namespace mimicry {

std::vector<double> forward_diffuse(std::span<const double> x, int timestep, const NoiseSchedule& schedule,
                                    std::uint64_t seed) {
  const double ab = schedule.alpha_bar(timestep);
  const double signal = std::sqrt(ab);
  const double noise = std::sqrt(1.0 - ab);
  std::vector<double> out(x.size());
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double eps = normal(rng);
    out[i] = signal * x[i] + noise * eps;
  }
  return out;
}

LatentTensor forward_diffuse(const LatentTensor& x, int timestep, const NoiseSchedule& schedule, std::uint64_t seed) {
  LatentTensor out = x;
  out.data = forward_diffuse(std::span<const double>(x.data), timestep, schedule, seed);
  return out;
}

std::vector<double> combine_guidance(std::span<const double> eps_prompt, std::span<const double> eps_negative,
                                     std::span<const double> eps_empty, double w, double c) {
  if (eps_prompt.size() != eps_negative.size() || eps_prompt.size() != eps_empty.size()) {
    throw ArgumentError("noise predictions differ in size");
  }
  std::vector<double> out(eps_prompt.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = (1.0 + w) * eps_prompt[i] - w * ((1.0 + c) * eps_negative[i] - c * eps_empty[i]);
  }
  return out;
}

LatentTensor cfg_denoise(const DiffusionBackend& backend, const LatentTensor& z, int timestep,
                         const PromptEmbedding& prompt, double w) {
  LatentTensor cond = backend.denoise(z, timestep, prompt);
  if (w == 0.0) return cond;
  const LatentTensor uncond = backend.denoise(z, timestep, backend.embed_text(""));
  LatentTensor out = cond;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = (1.0 + w) * cond.data[i] - w * uncond.data[i];
  return out;
}

LatentTensor weighted_negative_denoise(const DiffusionBackend& backend, const LatentTensor& z, int timestep,
                                       const PromptEmbedding& prompt, const PromptEmbedding& negative, double w,
                                       double c) {
  const LatentTensor cond = backend.denoise(z, timestep, prompt);
  const LatentTensor neg = backend.denoise(z, timestep, negative);
  const LatentTensor uncond = backend.denoise(z, timestep, backend.embed_text(""));
  LatentTensor out = cond;
  out.data = combine_guidance(cond.data, neg.data, uncond.data, w, c);
  return out;
}

std::vector<int> respaced_timesteps(int start, int steps) {
  if (steps < 1) throw ArgumentError("sampling needs at least one step");
  if (start < 1) return {};
  steps = std::min(steps, start);
  std::vector<int> ts;
  ts.reserve(steps);
  for (int i = steps; i >= 1; --i) {
    const int t = static_cast<int>(std::ceil(static_cast<double>(i) * start / steps));
    if (ts.empty() || ts.back() != t) ts.push_back(t);
  }
  return ts;
}

LatentTensor reverse_diffuse(const DiffusionBackend& backend, LatentTensor z, std::span<const int> timesteps,
                             const PromptEmbedding& prompt, const GuidanceOptions& guidance, Rng& rng) {
  const NoiseSchedule& schedule = backend.schedule();
  const double clip = guidance.latent_clip < 0.0 ? backend.sampling_clip() : guidance.latent_clip;
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t k = 0; k < timesteps.size(); ++k) {
    const int t = timesteps[k];
    const int t_prev = k + 1 < timesteps.size() ? timesteps[k + 1] : 0;
    const LatentTensor eps = guidance.negative
                                 ? weighted_negative_denoise(backend, z, t, prompt, guidance.negative->embedding,
                                                             guidance.scale, guidance.negative->strength)
                                 : cfg_denoise(backend, z, t, prompt, guidance.scale);

    const double ab = schedule.alpha_bar(t);
    const double ab_prev = schedule.alpha_bar(t_prev);
    const double beta = 1.0 - ab / ab_prev;
    const double sqrt_ab = std::sqrt(std::max(ab, 1e-12));
    const double sqrt_one_minus = std::sqrt(1.0 - ab);

    // Posterior q(z_{t_prev} | z_t, x0) with x0 predicted from eps.
    const double coef_x0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
    const double coef_zt = std::sqrt(ab / ab_prev) * (1.0 - ab_prev) / (1.0 - ab);
    const double var = t_prev > 0 ? beta * (1.0 - ab_prev) / (1.0 - ab) : 0.0;
    const double sd = std::sqrt(std::max(var, 0.0));
    for (std::size_t i = 0; i < z.size(); ++i) {
      double x0 = (z.data[i] - sqrt_one_minus * eps.data[i]) / sqrt_ab;
      if (clip > 0.0) x0 = std::clamp(x0, -clip, clip);
      double next = coef_x0 * x0 + coef_zt * z.data[i];
      if (t_prev > 0) next += sd * normal(rng);
      z.data[i] = next;
    }
  }
  return z;
}

Image sample(const DiffusionBackend& backend, const PromptEmbedding& prompt, int steps,
             const GuidanceOptions& guidance, std::uint64_t seed) {
  if (steps < 1) throw ArgumentError("sampling needs at least one step");
  const int T = backend.schedule().timesteps();
  // The latent geometry is whatever the encoder emits.
  const LatentTensor probe = backend.encode(Image(backend.image_side(), backend.image_side(), 0.5));
  LatentTensor z(probe.channels, probe.height, probe.width);
  Rng rng(seed);
  fill_normal(rng, z.data);
  const auto ts = respaced_timesteps(T, steps);
  z = reverse_diffuse(backend, std::move(z), ts, prompt, guidance, rng);
  return backend.decode(z);
}

Image sample(const DiffusionBackend& backend, const std::string& prompt, int steps, double w,
             const std::optional<std::pair<std::string, double>>& negative, std::uint64_t seed) {
  GuidanceOptions g;
  g.scale = w;
  if (negative) g.negative = NegativePrompt{backend.embed_text(negative->first), negative->second};
  return sample(backend, backend.embed_text(prompt), steps, g, seed);
}

Image img2img(const DiffusionBackend& backend, const Image& image, double strength, const PromptEmbedding& prompt,
              const GuidanceOptions& guidance, int max_steps, std::uint64_t seed) {
  if (!(strength >= 0.0 && strength <= 1.0)) throw ArgumentError("strength must be within [0, 1]");
  const LatentTensor z0 = backend.encode(image);
  const int t = static_cast<int>(std::lround(strength * backend.schedule().timesteps()));
  if (t == 0) return backend.decode(z0);
  Rng rng(seed);
  const LatentTensor zt = forward_diffuse(z0, t, backend.schedule(), rng());
  const auto ts = respaced_timesteps(t, max_steps);
  return backend.decode(reverse_diffuse(backend, zt, ts, prompt, guidance, rng));
}

}  // namespace mimicry
