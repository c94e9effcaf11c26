#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mimicry/backend.hpp"

namespace mimicry::toy {

struct CorpusItem;

/// Hyperparameters of the desk-scale latent diffusion model.
struct ToyConfig {
  int image_side = 32;
  int patch = 4;
  int latent_dim = 8;  ///< PCA channels per patch; one texture channel is added on top
  int timesteps = 100;
  int prompt_dim = 32;
  int hidden = 160;
  int time_features = 16;
  std::uint64_t seed = 0;

  int train_steps = 3000;
  int batch = 32;
  double lr = 1e-3;
  double cond_dropout = 0.1;

  // Texture pathway of the encoder: a saturating detector of pixel-level
  // checkerboard energy. The decoder renders the checkerboard whose detector
  // response equals the latent value, so encode(decode(z)) keeps z.
  double texture_gain = 4.0;
  double texture_kappa = 60.0;
  double texture_saturation = 0.995;  ///< largest |z / gain| the decoder inverts

  double sampling_clip = 8.0;

  int upscaler_kernel = 9;
  double upscaler_sigma_max = 0.2;  ///< noise deviation assumed at level 1
  double ridge = 1e-2;

  double heldout_fraction = 0.2;
  double recon_threshold = 0.01;
  double denoiser_threshold = 0.5;

  int latent_channels() const noexcept { return latent_dim + 1; }
  int grid() const noexcept { return image_side / patch; }
  int latent_size() const noexcept { return latent_channels() * grid() * grid(); }
};

void to_json(nlohmann::json& j, const ToyConfig& c);
void from_json(const nlohmann::json& j, ToyConfig& c);

struct ToyTrainReport {
  double recon_mse_train = 0.0;
  double recon_mse_heldout = 0.0;
  double recon_mse_noise = 0.0;  ///< on uniform-noise images
  double denoiser_loss_heldout = 0.0;
  double denoiser_loss_prior_only = 0.0;  ///< same batch, learned residual switched off
  std::vector<double> loss_trace;  ///< training loss every 50 steps
};

class ToyBackend final : public DiffusionBackend {
 public:
  std::unique_ptr<DiffusionBackend> clone() const override;
  std::string name() const override { return "toy"; }
  const NoiseSchedule& schedule() const override { return schedule_; }
  int image_side() const override { return cfg_.image_side; }
  double sampling_clip() const override { return cfg_.sampling_clip; }

  LatentTensor encode(const Image& image) const override;
  Image decode(const LatentTensor& latent) const override;
  LatentTensor denoise(const LatentTensor& latent, int timestep, const PromptEmbedding& prompt) const override;
  PromptEmbedding embed_text(std::string_view text) const override;
  PromptEmbedding embed_image(const Image& image) const override;
  Image upscale(const Image& image, double level) const override;
  double similarity(const Image& a, const Image& b) const override;

  Image encode_vjp(const Image& image, const LatentTensor& grad) const override;
  LatentTensor decode_vjp(const LatentTensor& latent, const Image& grad) const override;
  Image similarity_grad(const Image& a, const Image& b) const override;

  std::span<double> parameters() override { return params_; }
  std::span<const double> parameters() const override { return params_; }
  DenoiserLoss denoiser_loss(std::span<const DenoiserSample> batch, const GradientRequest& request) const override;

  const ToyConfig& config() const noexcept { return cfg_; }
  const ToyTrainReport& report() const noexcept { return report_; }

  void save(const std::filesystem::path& path) const;
  static ToyBackend load(const std::filesystem::path& path);

  /// Offsets of the denoiser tensors inside parameters().
  struct Layout {
    int D, TF, P, H, In;
    std::size_t w1, b1, w2, b2, w3, b3, mu, logv, total;
  };
  Layout layout() const;

 private:
  friend ToyBackend train_toy_backend(const ToyConfig&, const std::vector<std::pair<Image, std::string>>&);

  explicit ToyBackend(const ToyConfig& cfg);

  std::vector<double> time_features(int t) const;
  Image patch_wiener(const Image& image, double sigma) const;

  ToyConfig cfg_;
  NoiseSchedule schedule_;
  std::vector<double> patch_mean_;  ///< 3*patch*patch
  std::vector<double> basis_;       ///< all patch principal axes, strongest first; the encoder uses latent_dim
  std::vector<double> patch_var_;   ///< variance along each axis
  double latent_scale_ = 1.0;
  std::vector<double> params_;      ///< denoiser MLP, prior mean and log-variance
  std::vector<double> image_ridge_;  ///< prompt_dim x feature count
  std::vector<double> upscaler_;    ///< K0, K1 (k*k each), b0, b1
  ToyTrainReport report_;
};

/// Fits the autoencoder, image-embedding head and upscaler in closed form and
/// trains the denoiser with Adam. Throws TrainingError (with the loss trace)
/// when the held-out reconstruction or denoiser loss misses its threshold.
ToyBackend train_toy_backend(const ToyConfig& cfg, const std::vector<std::pair<Image, std::string>>& corpus);
ToyBackend train_toy_backend(const ToyConfig& cfg, const std::vector<CorpusItem>& corpus);

}  // namespace mimicry::toy
