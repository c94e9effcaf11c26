#include "mimicry/backend.hpp"

#include <cmath>
#include <numbers>
#include <string_view>

#include "mimicry/error.hpp"
#include "mimicry/rng.hpp"

namespace mimicry {

NoiseSchedule::NoiseSchedule(std::vector<double> alpha_bar) : alpha_bar_(std::move(alpha_bar)) {
  if (alpha_bar_.size() < 2) throw ArgumentError("noise schedule needs at least one timestep");
  if (alpha_bar_.front() != 1.0) throw ArgumentError("noise schedule must start at alpha_bar_0 = 1");
  for (std::size_t t = 1; t < alpha_bar_.size(); ++t) {
    if (!(alpha_bar_[t] >= 0.0) || alpha_bar_[t] > alpha_bar_[t - 1]) {
      throw ArgumentError("noise schedule must be nonincreasing and nonnegative");
    }
  }
}

NoiseSchedule NoiseSchedule::cosine(int timesteps, double offset) {
  if (timesteps < 1) throw ArgumentError("timesteps must be positive");
  auto f = [&](int t) {
    const double u = (static_cast<double>(t) / timesteps + offset) / (1.0 + offset);
    const double c = std::cos(u * std::numbers::pi / 2.0);
    return c * c;
  };
  std::vector<double> ab(timesteps + 1);
  ab[0] = 1.0;
  const double f0 = f(0);
  double prev_raw = 1.0;
  for (int t = 1; t <= timesteps; ++t) {
    const double raw = f(t) / f0;
    const double beta = std::min(1.0 - raw / prev_raw, 0.999);
    ab[t] = ab[t - 1] * (1.0 - beta);
    prev_raw = raw;
  }
  return NoiseSchedule(std::move(ab));
}

double NoiseSchedule::alpha_bar(int t) const {
  if (t < 0 || t > timesteps()) throw ArgumentError("timestep out of range");
  return alpha_bar_[t];
}

double l2_distance(const LatentTensor& a, const LatentTensor& b) {
  if (!a.same_shape(b)) throw ArgumentError("latent shapes differ");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    s += d * d;
  }
  return std::sqrt(s);
}

std::vector<double> PromptEmbedding::pooled() const {
  std::vector<double> out(dim, 0.0);
  if (tokens.empty()) return out;
  for (const auto& tok : tokens) {
    for (int i = 0; i < dim; ++i) out[i] += tok[i];
  }
  const double inv = 1.0 / static_cast<double>(tokens.size());
  for (double& v : out) v *= inv;
  return out;
}

PromptEmbedding concat(const PromptEmbedding& a, const PromptEmbedding& b) {
  if (a.dim != b.dim) throw ArgumentError("cannot concatenate embeddings of different width");
  PromptEmbedding out;
  out.dim = a.dim;
  out.text = a.text.empty() ? b.text : (b.text.empty() ? a.text : a.text + " " + b.text);
  out.tokens = a.tokens;
  out.tokens.insert(out.tokens.end(), b.tokens.begin(), b.tokens.end());
  return out;
}

Image DiffusionBackend::encode_vjp(const Image&, const LatentTensor&) const {
  throw BackendError(name() + " does not provide encoder gradients");
}

LatentTensor DiffusionBackend::decode_vjp(const LatentTensor&, const Image&) const {
  throw BackendError(name() + " does not provide decoder gradients");
}

Image DiffusionBackend::similarity_grad(const Image&, const Image&) const {
  throw BackendError(name() + " does not provide similarity gradients");
}

std::span<double> DiffusionBackend::parameters() { return {}; }

std::span<const double> DiffusionBackend::parameters() const { return {}; }

DenoiserLoss DiffusionBackend::denoiser_loss(std::span<const DenoiserSample>, const GradientRequest&) const {
  throw BackendError(name() + " does not expose a trainable denoiser");
}

std::uint64_t parameter_hash(const DiffusionBackend& backend) {
  const auto params = backend.parameters();
  return fnv1a64(std::string_view(reinterpret_cast<const char*>(params.data()), params.size_bytes()));
}

}  // namespace mimicry
