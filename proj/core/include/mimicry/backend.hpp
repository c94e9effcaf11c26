#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mimicry/image.hpp"

namespace mimicry {

/// Cumulative signal level alpha_bar_t for t in {0..T}.
/// Invariants: alpha_bar_0 == 1, nonincreasing, alpha_bar_T >= 0.
class NoiseSchedule {
 public:
  explicit NoiseSchedule(std::vector<double> alpha_bar);

  /// Cosine schedule (Nichol & Dhariwal) with per-step beta clipped to 0.999.
  static NoiseSchedule cosine(int timesteps, double offset = 0.008);

  int timesteps() const noexcept { return static_cast<int>(alpha_bar_.size()) - 1; }
  double alpha_bar(int t) const;
  std::span<const double> values() const noexcept { return alpha_bar_; }

 private:
  std::vector<double> alpha_bar_;
};

/// Backend-defined latent, stored channels x height x width.
struct LatentTensor {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> data;

  LatentTensor() = default;
  LatentTensor(int c, int h, int w, double fill = 0.0)
      : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {}

  std::size_t size() const noexcept { return data.size(); }
  bool same_shape(const LatentTensor& o) const noexcept {
    return channels == o.channels && height == o.height && width == o.width;
  }
  friend bool operator==(const LatentTensor&, const LatentTensor&) = default;
};

double l2_distance(const LatentTensor& a, const LatentTensor& b);

/// Conditioning vector. Kept as per-token vectors so learned tokens can be
/// spliced into prompts; the denoiser consumes pooled().
struct PromptEmbedding {
  std::string text;
  int dim = 0;
  std::vector<std::vector<double>> tokens;

  std::vector<double> pooled() const;

  /// Token-wise concatenation, e.g. concat(embed("art by"), learned_word).
  friend PromptEmbedding concat(const PromptEmbedding& a, const PromptEmbedding& b);
};

/// One denoising-loss term: the clean latent is diffused to timestep t with
/// the given noise and the backend is scored on predicting that noise.
struct DenoiserSample {
  LatentTensor latent;
  int timestep = 1;
  LatentTensor noise;
  PromptEmbedding prompt;
};

struct GradientRequest {
  bool parameters = false;
  bool latents = false;
  bool prompts = false;
};

struct DenoiserLoss {
  double loss = 0.0;                          ///< mean squared noise-prediction error
  std::vector<double> parameter_grad;         ///< d loss / d parameters()
  std::vector<LatentTensor> latent_grad;      ///< d loss / d clean latent, per sample
  std::vector<std::vector<double>> prompt_grad;  ///< d loss / d pooled prompt, per sample
};

/// Everything an algorithm may ask of a latent text-to-image model. Inference
/// operations are const and must be safe to call concurrently. The gradient
/// hooks back the white-box protections and defenses; backends that cannot
/// provide them keep the throwing defaults.
class DiffusionBackend {
 public:
  virtual ~DiffusionBackend() = default;

  virtual std::unique_ptr<DiffusionBackend> clone() const = 0;
  virtual std::string name() const = 0;
  virtual const NoiseSchedule& schedule() const = 0;
  /// Side of the square images the autoencoder operates on.
  virtual int image_side() const = 0;
  /// Bound applied to predicted clean latents during sampling; 0 disables.
  virtual double sampling_clip() const { return 0.0; }

  virtual LatentTensor encode(const Image& image) const = 0;
  virtual Image decode(const LatentTensor& latent) const = 0;
  /// Noise prediction eps_theta(z, t, prompt).
  virtual LatentTensor denoise(const LatentTensor& latent, int timestep, const PromptEmbedding& prompt) const = 0;
  virtual PromptEmbedding embed_text(std::string_view text) const = 0;
  virtual PromptEmbedding embed_image(const Image& image) const = 0;
  /// Noise-conditioned upscaler; `level` is normalized to [0, 1].
  virtual Image upscale(const Image& image, double level) const = 0;
  /// Perceptual image distance d_img: symmetric, nonnegative, d(a, a) == 0.
  virtual double similarity(const Image& a, const Image& b) const = 0;

  virtual Image encode_vjp(const Image& image, const LatentTensor& grad) const;
  virtual LatentTensor decode_vjp(const LatentTensor& latent, const Image& grad) const;
  /// Gradient of similarity(a, b) with respect to a.
  virtual Image similarity_grad(const Image& a, const Image& b) const;

  /// Finetunable parameter set.
  virtual std::span<double> parameters();
  virtual std::span<const double> parameters() const;
  virtual DenoiserLoss denoiser_loss(std::span<const DenoiserSample> batch, const GradientRequest& request) const;
};

/// FNV-1a digest of the finetunable parameters; used for provenance and
/// immutability checks.
std::uint64_t parameter_hash(const DiffusionBackend& backend);

}  // namespace mimicry
