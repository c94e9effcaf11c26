#include "mimicry/purify.hpp"

#include <algorithm>
#include <cmath>

#include "mimicry/error.hpp"
#include "mimicry/guidance.hpp"
#include "mimicry/parallel.hpp"
#include "mimicry/rng.hpp"

namespace mimicry::purify {

std::string to_string(Method m) {
  switch (m) {
    case Method::gaussian: return "gaussian";
    case Method::diffpure: return "diffpure";
    case Method::noisy_upscale: return "noisy-upscale";
    case Method::reverse_encoder: return "reverse-enc";
  }
  throw ArgumentError("unknown purification method");
}

Method parse_method(const std::string& name) {
  if (name == "gaussian") return Method::gaussian;
  if (name == "diffpure") return Method::diffpure;
  if (name == "noisy-upscale" || name == "noisy_upscale") return Method::noisy_upscale;
  if (name == "reverse-enc" || name == "reverse_encoder") return Method::reverse_encoder;
  throw ArgumentError("unknown purification method: " + name);
}

void validate(const PurifyConfig& cfg) {
  if (!(cfg.sigma >= 0.0) || !(cfg.upscale_sigma >= 0.0)) throw ArgumentError("sigma must be nonnegative");
  if (!(cfg.strength >= 0.0 && cfg.strength <= 1.0)) throw ArgumentError("strength must be within [0, 1]");
  if (!(cfg.level >= 0.0 && cfg.level <= 1.0)) throw ArgumentError("upscale level must be within [0, 1]");
  if (cfg.max_steps < 1) throw ArgumentError("max_steps must be positive");
}

Image gaussian_noise(const Image& image, double sigma, std::uint64_t seed) {
  if (!(sigma >= 0.0)) throw ArgumentError("sigma must be nonnegative");
  if (sigma == 0.0) return image;
  Image out = image;
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, sigma);
  for (double& v : out.data) v = std::clamp(v + normal(rng), 0.0, 1.0);
  return out;
}

Image diffpure(const DiffusionBackend& backend, const Image& image, double strength,
               const std::optional<std::string>& prompt, double w, std::uint64_t seed, int max_steps) {
  GuidanceOptions g;
  g.scale = w;
  return img2img(backend, image, strength, backend.embed_text(prompt.value_or("")), g, max_steps, seed);
}

Image noisy_upscale(const DiffusionBackend& backend, const Image& image, double sigma, double level,
                    std::uint64_t seed) {
  // Additive noise without the sqrt(alpha_bar) factor; the upscaler is
  // conditioned on the matching level.
  Image noisy = image;
  if (sigma > 0.0) {
    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, sigma);
    for (double& v : noisy.data) v += normal(rng);
  } else if (sigma < 0.0) {
    throw ArgumentError("sigma must be nonnegative");
  }
  const Image up = backend.upscale(noisy, level);
  if (up.height == image.height && up.width == image.width) return clamped01(up);
  if (up.height % image.height == 0 && up.width % image.width == 0 && up.height / image.height == up.width / image.width) {
    return clamped01(downsample_box(up, up.height / image.height));
  }
  return clamped01(resize_bilinear(up, image.height, image.width));
}

double consistency_linf(const DiffusionBackend& backend, const Image& image) {
  return linf_distance(backend.decode(backend.encode(image)), image);
}

ReverseEncoderResult reverse_encoder_opt(const DiffusionBackend& backend, const Image& image,
                                         const protect::PgdConfig& cfg, double temperature) {
  protect::validate(cfg);
  if (!(temperature > 0.0)) throw ArgumentError("smooth-max temperature must be positive");
  ReverseEncoderResult res;
  res.image = image;
  res.trace.reserve(cfg.iterations + 1);
  res.trace.push_back(consistency_linf(backend, image));
  std::vector<double> weights(image.size());
  for (int it = 0; it < cfg.iterations; ++it) {
    Image& x = res.image;
    const LatentTensor z = backend.encode(x);
    const Image recon = backend.decode(z);
    // Softmax weights of the log-sum-exp smooth max over |r_i|.
    double m = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) m = std::max(m, std::abs(recon.data[i] - x.data[i]));
    double total = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      weights[i] = std::exp(temperature * (std::abs(recon.data[i] - x.data[i]) - m));
      total += weights[i];
    }
    Image w(x.height, x.width);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double r = recon.data[i] - x.data[i];
      w.data[i] = (weights[i] / total) * (r > 0.0 ? 1.0 : (r < 0.0 ? -1.0 : 0.0));
    }
    Image grad = backend.encode_vjp(x, backend.decode_vjp(z, w));
    for (std::size_t i = 0; i < x.size(); ++i) grad.data[i] -= w.data[i];
    protect::pgd_step(x, image, grad, cfg.step, cfg.budget, protect::Direction::descend);
    res.trace.push_back(consistency_linf(backend, x));
  }
  return res;
}

Image apply(const DiffusionBackend& backend, const Image& image, const PurifyConfig& cfg, std::uint64_t seed,
            const std::optional<std::string>& caption) {
  validate(cfg);
  switch (cfg.method) {
    case Method::gaussian: return gaussian_noise(image, cfg.sigma, seed);
    case Method::diffpure: return diffpure(backend, image, cfg.strength, caption, cfg.guidance, seed, cfg.max_steps);
    case Method::noisy_upscale: return noisy_upscale(backend, image, cfg.upscale_sigma, cfg.level, seed);
    case Method::reverse_encoder: {
      protect::PgdConfig pgd = cfg.pgd;
      pgd.seed = seed;
      return reverse_encoder_opt(backend, image, pgd, cfg.smooth_max_temperature).image;
    }
  }
  throw ArgumentError("unknown purification method");
}

std::vector<Image> apply_all(const DiffusionBackend& backend, const std::vector<Image>& images,
                             const PurifyConfig& cfg, const std::vector<std::string>& captions, int workers) {
  if (!captions.empty() && captions.size() != images.size()) throw ArgumentError("caption count does not match images");
  std::vector<Image> out(images.size());
  parallel_for(images.size(), workers, [&](std::size_t i) {
    std::optional<std::string> caption;
    if (!captions.empty()) caption = captions[i];
    out[i] = apply(backend, images[i], cfg, cfg.seed ^ static_cast<std::uint64_t>(i), caption);
  });
  return out;
}

}  // namespace mimicry::purify
