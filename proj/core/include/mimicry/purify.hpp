#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mimicry/backend.hpp"
#include "mimicry/protect.hpp"

namespace mimicry::purify {

enum class Method { gaussian, diffpure, noisy_upscale, reverse_encoder };

std::string to_string(Method m);
Method parse_method(const std::string& name);

struct PurifyConfig {
  Method method = Method::gaussian;
  double sigma = 0.05;           ///< Gaussian noising std
  double strength = 0.2;         ///< DiffPure fraction of timesteps
  double guidance = 7.5;         ///< DiffPure CFG scale
  int max_steps = 50;            ///< DiffPure reverse-step cap
  double upscale_sigma = 0.1;    ///< noise before upscaling
  double level = 1.0;            ///< upscaler noise level, normalized; 1 = maximum
  protect::PgdConfig pgd{8.0 / 255.0, 1.0 / 255.0, 400, 0};
  double smooth_max_temperature = 500.0;
  std::uint64_t seed = 0;
};

void validate(const PurifyConfig& cfg);

Image gaussian_noise(const Image& image, double sigma, std::uint64_t seed);

/// Unconditional when `prompt` is empty.
Image diffpure(const DiffusionBackend& backend, const Image& image, double strength,
               const std::optional<std::string>& prompt, double w, std::uint64_t seed, int max_steps = 50);

Image noisy_upscale(const DiffusionBackend& backend, const Image& image, double sigma, double level,
                    std::uint64_t seed);

struct ReverseEncoderResult {
  Image image;
  std::vector<double> trace;  ///< hard |D(E(x)) - x|_inf, N + 1 entries
};

/// PGD on the consistency loss |D(E(x')) - x'|_inf (smooth max for the
/// gradient), within the budget around the input.
ReverseEncoderResult reverse_encoder_opt(const DiffusionBackend& backend, const Image& image,
                                         const protect::PgdConfig& cfg, double temperature = 500.0);

/// Hard consistency objective |D(E(x)) - x|_inf.
double consistency_linf(const DiffusionBackend& backend, const Image& image);

/// Dispatches on cfg.method. `caption` feeds DiffPure's prompt.
Image apply(const DiffusionBackend& backend, const Image& image, const PurifyConfig& cfg, std::uint64_t seed,
            const std::optional<std::string>& caption = std::nullopt);

/// Image i is purified with seed cfg.seed ^ i.
std::vector<Image> apply_all(const DiffusionBackend& backend, const std::vector<Image>& images,
                             const PurifyConfig& cfg, const std::vector<std::string>& captions = {},
                             int workers = 1);

}  // namespace mimicry::purify
