#include "mimicry/toy_backend.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>

#include "mimicry/error.hpp"
#include "mimicry/optim.hpp"
#include "mimicry/rng.hpp"
#include "mimicry/toy_data.hpp"

namespace mimicry::toy {

using Eigen::MatrixXd;
using Eigen::VectorXd;

void to_json(nlohmann::json& j, const ToyConfig& c) {
  j = nlohmann::json{
      {"image_side", c.image_side},
      {"patch", c.patch},
      {"latent_dim", c.latent_dim},
      {"timesteps", c.timesteps},
      {"prompt_dim", c.prompt_dim},
      {"hidden", c.hidden},
      {"time_features", c.time_features},
      {"seed", c.seed},
      {"train_steps", c.train_steps},
      {"batch", c.batch},
      {"lr", c.lr},
      {"cond_dropout", c.cond_dropout},
      {"texture_gain", c.texture_gain},
      {"texture_kappa", c.texture_kappa},
      {"texture_saturation", c.texture_saturation},
      {"sampling_clip", c.sampling_clip},
      {"upscaler_kernel", c.upscaler_kernel},
      {"upscaler_sigma_max", c.upscaler_sigma_max},
      {"ridge", c.ridge},
      {"heldout_fraction", c.heldout_fraction},
      {"recon_threshold", c.recon_threshold},
      {"denoiser_threshold", c.denoiser_threshold}};
}

void from_json(const nlohmann::json& j, ToyConfig& c) {
  const ToyConfig d;
  c.image_side = j.value("image_side", d.image_side);
  c.patch = j.value("patch", d.patch);
  c.latent_dim = j.value("latent_dim", d.latent_dim);
  c.timesteps = j.value("timesteps", d.timesteps);
  c.prompt_dim = j.value("prompt_dim", d.prompt_dim);
  c.hidden = j.value("hidden", d.hidden);
  c.time_features = j.value("time_features", d.time_features);
  c.seed = j.value("seed", d.seed);
  c.train_steps = j.value("train_steps", d.train_steps);
  c.batch = j.value("batch", d.batch);
  c.lr = j.value("lr", d.lr);
  c.cond_dropout = j.value("cond_dropout", d.cond_dropout);
  c.texture_gain = j.value("texture_gain", d.texture_gain);
  c.texture_kappa = j.value("texture_kappa", d.texture_kappa);
  c.texture_saturation = j.value("texture_saturation", d.texture_saturation);
  c.sampling_clip = j.value("sampling_clip", d.sampling_clip);
  c.upscaler_kernel = j.value("upscaler_kernel", d.upscaler_kernel);
  c.upscaler_sigma_max = j.value("upscaler_sigma_max", d.upscaler_sigma_max);
  c.ridge = j.value("ridge", d.ridge);
  c.heldout_fraction = j.value("heldout_fraction", d.heldout_fraction);
  c.recon_threshold = j.value("recon_threshold", d.recon_threshold);
  c.denoiser_threshold = j.value("denoiser_threshold", d.denoiser_threshold);
}

namespace {

constexpr char kMagic[8] = {'M', 'I', 'M', 'T', 'O', 'Y', '0', '2'};
constexpr int kImageFeatures = 11;
constexpr std::size_t kMaxPromptTokens = 77;

void check_config(const ToyConfig& c) {
  if (c.image_side < 4 || c.patch < 1 || c.image_side % c.patch != 0) {
    throw ArgumentError("image_side must be a positive multiple of patch");
  }
  if (c.latent_dim < 1 || c.latent_dim > 3 * c.patch * c.patch) throw ArgumentError("latent_dim out of range");
  if (c.timesteps < 1 || c.prompt_dim < 1 || c.hidden < 1 || c.time_features < 2 || c.time_features % 2 != 0) {
    throw ArgumentError("invalid toy model dimensions");
  }
  if (c.train_steps < 0 || c.batch < 1 || !(c.lr > 0.0)) throw ArgumentError("invalid toy training settings");
  if (!(c.texture_gain > 0.0) || !(c.texture_kappa > 0.0) || !(c.texture_saturation > 0.0 && c.texture_saturation < 1.0)) {
    throw ArgumentError("invalid texture pathway settings");
  }
  if (c.upscaler_kernel < 1 || c.upscaler_kernel % 2 == 0) throw ArgumentError("upscaler_kernel must be odd");
}

inline double checker_sign(int y, int x) { return ((x + y) & 1) == 0 ? 1.0 : -1.0; }

// A checkerboard of amplitude a has high-pass response 8a/9 at every pixel,
// so the detector reads gain * tanh(8 kappa a / 9). Invert that.
struct TextureAmp {
  double value, slope;
};

TextureAmp texture_amplitude(double z, const ToyConfig& c) {
  const double u = z / c.texture_gain;
  const double k = 9.0 / (8.0 * c.texture_kappa);
  if (std::abs(u) >= c.texture_saturation) {
    return {std::copysign(k * std::atanh(c.texture_saturation), u), 0.0};
  }
  return {k * std::atanh(u), k / (c.texture_gain * (1.0 - u * u))};
}

// 3x3 box blur with replicate padding, applied per channel.
std::vector<double> blur3(const Image& img) {
  const int h = img.height, w = img.width;
  std::vector<double> out(img.size());
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double s = 0.0;
        for (int dy = -1; dy <= 1; ++dy) {
          const int yy = std::clamp(y + dy, 0, h - 1);
          for (int dx = -1; dx <= 1; ++dx) s += img.at(c, yy, std::clamp(x + dx, 0, w - 1));
        }
        out[img.index(c, y, x)] = s / 9.0;
      }
    }
  }
  return out;
}

void blur3_transpose_add(const std::vector<double>& g, int h, int w, std::vector<double>& out, double sign) {
  for (int c = 0; c < 3; ++c) {
    const std::size_t base = static_cast<std::size_t>(c) * h * w;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double v = sign * g[base + y * w + x] / 9.0;
        if (v == 0.0) continue;
        for (int dy = -1; dy <= 1; ++dy) {
          const int yy = std::clamp(y + dy, 0, h - 1);
          for (int dx = -1; dx <= 1; ++dx) out[base + yy * w + std::clamp(x + dx, 0, w - 1)] += v;
        }
      }
    }
  }
}

std::vector<double> high_pass(const Image& img) {
  std::vector<double> r = blur3(img);
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = img.data[i] - r[i];
  return r;
}

std::array<double, kImageFeatures> image_features(const Image& img) {
  const StyleStats s = style_stats(img);
  std::array<double, kImageFeatures> f{};
  f[0] = s.mean[0];
  f[1] = s.mean[1];
  f[2] = s.mean[2];
  f[3] = s.cov[0];
  f[4] = s.cov[1];
  f[5] = s.cov[2];
  f[6] = s.cov[4];
  f[7] = s.cov[5];
  f[8] = s.cov[8];
  const auto r = high_pass(img);
  double e = 0.0;
  for (double v : r) e += v * v;
  f[9] = e / r.size();
  f[10] = 1.0;
  return f;
}

// Replicate-padded k x k correlation of one channel plane.
double conv_at(const Image& img, int c, int y, int x, const double* kernel, int k) {
  const int r = k / 2;
  double s = 0.0;
  for (int dy = -r; dy <= r; ++dy) {
    const int yy = std::clamp(y + dy, 0, img.height - 1);
    for (int dx = -r; dx <= r; ++dx) {
      s += kernel[(dy + r) * k + (dx + r)] * img.at(c, yy, std::clamp(x + dx, 0, img.width - 1));
    }
  }
  return s;
}

MatrixXd gain_matrix(const std::vector<double>& g) {
  return Eigen::Map<const VectorXd>(g.data(), static_cast<Eigen::Index>(g.size())).asDiagonal();
}

double silu(double a) { return a / (1.0 + std::exp(-a)); }
double silu_grad(double a) {
  const double sg = 1.0 / (1.0 + std::exp(-a));
  return sg * (1.0 + a * (1.0 - sg));
}

std::vector<std::string> tokenize(std::string_view text) {
  for (unsigned char ch : text) {
    if (ch < 0x20 || ch == 0x7f) throw ArgumentError("prompt contains control characters");
  }
  std::vector<std::string> tokens;
  std::string cur;
  auto flush = [&] {
    while (!cur.empty() && std::strchr(",.;:!?\"'", cur.back())) cur.pop_back();
    std::size_t start = 0;
    while (start < cur.size() && std::strchr(",.;:!?\"'", cur[start])) ++start;
    if (start < cur.size()) tokens.push_back(cur.substr(start));
    cur.clear();
  };
  for (char ch : text) {
    if (ch == ' ' || ch == '\t') {
      flush();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  flush();
  if (tokens.size() > kMaxPromptTokens) throw ArgumentError("prompt exceeds the token limit");
  return tokens;
}

}  // namespace

ToyBackend::Layout ToyBackend::layout() const {
  Layout l{};
  l.D = cfg_.latent_size();
  l.TF = cfg_.time_features;
  l.P = cfg_.prompt_dim;
  l.H = cfg_.hidden;
  l.In = l.D + l.TF + l.P;
  std::size_t o = 0;
  l.w1 = o;
  o += static_cast<std::size_t>(l.H) * l.In;
  l.b1 = o;
  o += l.H;
  l.w2 = o;
  o += static_cast<std::size_t>(l.H) * l.H;
  l.b2 = o;
  o += l.H;
  l.w3 = o;
  o += static_cast<std::size_t>(l.D) * l.H;
  l.b3 = o;
  o += l.D;
  l.mu = o;
  o += l.D;
  l.logv = o;
  o += l.D;
  l.total = o;
  return l;
}

ToyBackend::ToyBackend(const ToyConfig& cfg) : cfg_(cfg), schedule_(NoiseSchedule::cosine(cfg.timesteps)) {
  check_config(cfg_);
  params_.assign(layout().total, 0.0);
}

std::unique_ptr<DiffusionBackend> ToyBackend::clone() const { return std::make_unique<ToyBackend>(*this); }

std::vector<double> ToyBackend::time_features(int t) const {
  const double tau = static_cast<double>(t) / cfg_.timesteps;
  const int half = cfg_.time_features / 2;
  std::vector<double> f(cfg_.time_features);
  for (int j = 0; j < half; ++j) {
    const double freq = std::numbers::pi * std::pow(1.6, j);
    f[2 * j] = std::sin(freq * tau);
    f[2 * j + 1] = std::cos(freq * tau);
  }
  return f;
}

// ---------------------------------------------------------------------------
// Autoencoder

LatentTensor ToyBackend::encode(const Image& image) const {
  const int side = cfg_.image_side, p = cfg_.patch, g = cfg_.grid(), K = cfg_.latent_dim;
  if (image.height != side || image.width != side) throw ArgumentError("toy backend expects square images of its side");
  const int pd = 3 * p * p;
  const auto r = high_pass(image);
  LatentTensor z(K + 1, g, g);
  std::vector<double> patch(pd);
  for (int gy = 0; gy < g; ++gy) {
    for (int gx = 0; gx < g; ++gx) {
      double h = 0.0;
      for (int c = 0; c < 3; ++c) {
        for (int dy = 0; dy < p; ++dy) {
          for (int dx = 0; dx < p; ++dx) {
            const int y = gy * p + dy, x = gx * p + dx;
            const int j = (c * p + dy) * p + dx;
            patch[j] = image.at(c, y, x) - patch_mean_[j];
            h += checker_sign(y, x) * std::tanh(cfg_.texture_kappa * r[image.index(c, y, x)]);
          }
        }
      }
      for (int k = 0; k < K; ++k) {
        double s = 0.0;
        const double* u = &basis_[static_cast<std::size_t>(k) * pd];
        for (int j = 0; j < pd; ++j) s += u[j] * patch[j];
        z.data[(static_cast<std::size_t>(k) * g + gy) * g + gx] = latent_scale_ * s;
      }
      z.data[(static_cast<std::size_t>(K) * g + gy) * g + gx] = cfg_.texture_gain * h / pd;
    }
  }
  return z;
}

namespace {

void check_latent(const LatentTensor& z, const ToyConfig& c) {
  if (z.channels != c.latent_channels() || z.height != c.grid() || z.width != c.grid() ||
      z.data.size() != static_cast<std::size_t>(c.latent_size())) {
    throw ArgumentError("latent shape does not match the toy backend");
  }
}

}  // namespace

Image ToyBackend::decode(const LatentTensor& latent) const {
  check_latent(latent, cfg_);
  const int side = cfg_.image_side, p = cfg_.patch, g = cfg_.grid(), K = cfg_.latent_dim;
  const int pd = 3 * p * p;
  Image out(side, side);
  for (int gy = 0; gy < g; ++gy) {
    for (int gx = 0; gx < g; ++gx) {
      const double amp = texture_amplitude(latent.data[(static_cast<std::size_t>(K) * g + gy) * g + gx], cfg_).value;
      for (int j = 0; j < pd; ++j) {
        double v = patch_mean_[j];
        for (int k = 0; k < K; ++k) {
          v += basis_[static_cast<std::size_t>(k) * pd + j] * latent.data[(static_cast<std::size_t>(k) * g + gy) * g + gx] /
               latent_scale_;
        }
        const int c = j / (p * p), dy = (j / p) % p, dx = j % p;
        const int y = gy * p + dy, x = gx * p + dx;
        v += amp * checker_sign(y, x);
        out.at(c, y, x) = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return out;
}

Image ToyBackend::encode_vjp(const Image& image, const LatentTensor& grad) const {
  check_latent(grad, cfg_);
  const int side = cfg_.image_side, p = cfg_.patch, g = cfg_.grid(), K = cfg_.latent_dim;
  if (image.height != side || image.width != side) throw ArgumentError("toy backend expects square images of its side");
  const int pd = 3 * p * p;
  const auto r = high_pass(image);
  Image out(side, side);
  std::vector<double> dr(image.size(), 0.0);
  for (int gy = 0; gy < g; ++gy) {
    for (int gx = 0; gx < g; ++gx) {
      const double gt = grad.data[(static_cast<std::size_t>(K) * g + gy) * g + gx] * cfg_.texture_gain / pd;
      for (int j = 0; j < pd; ++j) {
        double v = 0.0;
        for (int k = 0; k < K; ++k) {
          v += basis_[static_cast<std::size_t>(k) * pd + j] * grad.data[(static_cast<std::size_t>(k) * g + gy) * g + gx];
        }
        const int c = j / (p * p), dy = (j / p) % p, dx = j % p;
        const int y = gy * p + dy, x = gx * p + dx;
        out.at(c, y, x) = latent_scale_ * v;
        if (gt != 0.0) {
          const double th = std::tanh(cfg_.texture_kappa * r[image.index(c, y, x)]);
          dr[image.index(c, y, x)] = gt * checker_sign(y, x) * cfg_.texture_kappa * (1.0 - th * th);
        }
      }
    }
  }
  // r = x - blur(x)  =>  dx = dr - blur^T(dr)
  for (std::size_t i = 0; i < dr.size(); ++i) out.data[i] += dr[i];
  blur3_transpose_add(dr, side, side, out.data, -1.0);
  return out;
}

LatentTensor ToyBackend::decode_vjp(const LatentTensor& latent, const Image& grad) const {
  check_latent(latent, cfg_);
  const int side = cfg_.image_side, p = cfg_.patch, g = cfg_.grid(), K = cfg_.latent_dim;
  if (grad.height != side || grad.width != side) throw ArgumentError("gradient image has the wrong shape");
  const int pd = 3 * p * p;
  LatentTensor out(K + 1, g, g);
  std::vector<double> gp(pd);
  for (int gy = 0; gy < g; ++gy) {
    for (int gx = 0; gx < g; ++gx) {
      const TextureAmp amp = texture_amplitude(latent.data[(static_cast<std::size_t>(K) * g + gy) * g + gx], cfg_);
      double gt = 0.0;
      for (int j = 0; j < pd; ++j) {
        double v = patch_mean_[j];
        for (int k = 0; k < K; ++k) {
          v += basis_[static_cast<std::size_t>(k) * pd + j] * latent.data[(static_cast<std::size_t>(k) * g + gy) * g + gx] /
               latent_scale_;
        }
        const int c = j / (p * p), dy = (j / p) % p, dx = j % p;
        const int y = gy * p + dy, x = gx * p + dx;
        v += amp.value * checker_sign(y, x);
        gp[j] = (v < 0.0 || v > 1.0) ? 0.0 : grad.at(c, y, x);
        gt += gp[j] * checker_sign(y, x);
      }
      for (int k = 0; k < K; ++k) {
        double s = 0.0;
        for (int j = 0; j < pd; ++j) s += basis_[static_cast<std::size_t>(k) * pd + j] * gp[j];
        out.data[(static_cast<std::size_t>(k) * g + gy) * g + gx] = s / latent_scale_;
      }
      out.data[(static_cast<std::size_t>(K) * g + gy) * g + gx] = gt * amp.slope;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Denoiser: analytic diagonal-Gaussian prior plus a learned MLP residual.

namespace {

struct Pass {
  MatrixXd X, A1, H1, A2, H2, Out;
  MatrixXd prior;  // epsilon of the Gaussian prior term
  std::vector<double> ab;
};

}  // namespace

namespace detail {

struct Forward {
  static Pass run(const ToyBackend::Layout& l, const double* params, const std::vector<const LatentTensor*>& zs,
                  const std::vector<int>& ts, const std::vector<std::vector<double>>& prompts,
                  const NoiseSchedule& sched, const std::vector<std::vector<double>>& tfeat) {
    const int B = static_cast<int>(zs.size());
    Pass p;
    p.X.resize(l.In, B);
    p.prior.resize(l.D, B);
    p.ab.resize(B);
    Eigen::Map<const VectorXd> mu(params + l.mu, l.D);
    Eigen::Map<const VectorXd> logv(params + l.logv, l.D);
    for (int b = 0; b < B; ++b) {
      Eigen::Map<const VectorXd> z(zs[b]->data.data(), l.D);
      p.X.col(b).head(l.D) = z;
      p.X.col(b).segment(l.D, l.TF) = Eigen::Map<const VectorXd>(tfeat[b].data(), l.TF);
      p.X.col(b).tail(l.P) = Eigen::Map<const VectorXd>(prompts[b].data(), l.P);
      const double ab = sched.alpha_bar(ts[b]);
      p.ab[b] = ab;
      const double sa = std::sqrt(ab), sn = std::sqrt(1.0 - ab);
      for (int i = 0; i < l.D; ++i) {
        const double v = std::exp(logv[i]);
        p.prior(i, b) = sn * (z[i] - sa * mu[i]) / (ab * v + 1.0 - ab);
      }
    }
    Eigen::Map<const MatrixXd> W1(params + l.w1, l.H, l.In);
    Eigen::Map<const VectorXd> b1(params + l.b1, l.H);
    Eigen::Map<const MatrixXd> W2(params + l.w2, l.H, l.H);
    Eigen::Map<const VectorXd> b2(params + l.b2, l.H);
    Eigen::Map<const MatrixXd> W3(params + l.w3, l.D, l.H);
    Eigen::Map<const VectorXd> b3(params + l.b3, l.D);
    p.A1 = (W1 * p.X).colwise() + b1;
    p.H1 = p.A1.unaryExpr(&silu);
    p.A2 = (W2 * p.H1).colwise() + b2;
    p.H2 = p.A2.unaryExpr(&silu);
    p.Out = ((W3 * p.H2).colwise() + b3) + p.prior;
    return p;
  }
};

}  // namespace detail

LatentTensor ToyBackend::denoise(const LatentTensor& latent, int timestep, const PromptEmbedding& prompt) const {
  check_latent(latent, cfg_);
  if (prompt.dim != cfg_.prompt_dim) throw ArgumentError("prompt embedding width does not match the toy backend");
  const Layout l = layout();
  const auto pass = detail::Forward::run(l, params_.data(), {&latent}, {timestep}, {prompt.pooled()}, schedule_,
                                         {time_features(timestep)});
  LatentTensor out(latent.channels, latent.height, latent.width);
  Eigen::Map<VectorXd>(out.data.data(), l.D) = pass.Out.col(0);
  return out;
}

DenoiserLoss ToyBackend::denoiser_loss(std::span<const DenoiserSample> batch, const GradientRequest& request) const {
  if (batch.empty()) throw ArgumentError("denoiser loss needs a nonempty batch");
  const Layout l = layout();
  const int B = static_cast<int>(batch.size());
  std::vector<LatentTensor> noisy(B);
  std::vector<const LatentTensor*> zs(B);
  std::vector<int> ts(B);
  std::vector<std::vector<double>> prompts(B), tf(B);
  for (int b = 0; b < B; ++b) {
    const auto& s = batch[b];
    check_latent(s.latent, cfg_);
    check_latent(s.noise, cfg_);
    if (s.prompt.dim != cfg_.prompt_dim) throw ArgumentError("prompt embedding width does not match the toy backend");
    const double ab = schedule_.alpha_bar(s.timestep);
    noisy[b] = s.latent;
    for (int i = 0; i < l.D; ++i) noisy[b].data[i] = std::sqrt(ab) * s.latent.data[i] + std::sqrt(1.0 - ab) * s.noise.data[i];
    zs[b] = &noisy[b];
    ts[b] = s.timestep;
    prompts[b] = s.prompt.pooled();
    tf[b] = time_features(s.timestep);
  }
  const Pass p = detail::Forward::run(l, params_.data(), zs, ts, prompts, schedule_, tf);
  MatrixXd E(l.D, B);
  for (int b = 0; b < B; ++b) E.col(b) = Eigen::Map<const VectorXd>(batch[b].noise.data.data(), l.D);
  const MatrixXd diff = p.Out - E;
  const double n = static_cast<double>(l.D) * B;
  DenoiserLoss out;
  out.loss = diff.squaredNorm() / n;
  if (!request.parameters && !request.latents && !request.prompts) return out;

  const MatrixXd gOut = diff * (2.0 / n);
  const double* P = params_.data();
  Eigen::Map<const MatrixXd> W1(P + l.w1, l.H, l.In);
  Eigen::Map<const MatrixXd> W2(P + l.w2, l.H, l.H);
  Eigen::Map<const MatrixXd> W3(P + l.w3, l.D, l.H);
  Eigen::Map<const VectorXd> mu(P + l.mu, l.D);
  Eigen::Map<const VectorXd> logv(P + l.logv, l.D);

  const MatrixXd gH2 = W3.transpose() * gOut;
  const MatrixXd gA2 = gH2.cwiseProduct(p.A2.unaryExpr(&silu_grad));
  const MatrixXd gH1 = W2.transpose() * gA2;
  const MatrixXd gA1 = gH1.cwiseProduct(p.A1.unaryExpr(&silu_grad));

  if (request.parameters) {
    out.parameter_grad.assign(l.total, 0.0);
    double* G = out.parameter_grad.data();
    Eigen::Map<MatrixXd>(G + l.w1, l.H, l.In) = gA1 * p.X.transpose();
    Eigen::Map<VectorXd>(G + l.b1, l.H) = gA1.rowwise().sum();
    Eigen::Map<MatrixXd>(G + l.w2, l.H, l.H) = gA2 * p.H1.transpose();
    Eigen::Map<VectorXd>(G + l.b2, l.H) = gA2.rowwise().sum();
    Eigen::Map<MatrixXd>(G + l.w3, l.D, l.H) = gOut * p.H2.transpose();
    Eigen::Map<VectorXd>(G + l.b3, l.D) = gOut.rowwise().sum();
    for (int b = 0; b < B; ++b) {
      const double ab = p.ab[b];
      const double sa = std::sqrt(ab), sn = std::sqrt(1.0 - ab);
      for (int i = 0; i < l.D; ++i) {
        const double v = std::exp(logv[i]);
        const double den = ab * v + 1.0 - ab;
        G[l.mu + i] += gOut(i, b) * (-sn * sa / den);
        G[l.logv + i] += gOut(i, b) * (-p.prior(i, b) * ab * v / den);
      }
    }
  }
  if (request.latents || request.prompts) {
    const MatrixXd gX = W1.transpose() * gA1;
    if (request.latents) {
      out.latent_grad.resize(B);
      for (int b = 0; b < B; ++b) {
        const double ab = p.ab[b];
        const double sa = std::sqrt(ab), sn = std::sqrt(1.0 - ab);
        LatentTensor g(batch[b].latent.channels, batch[b].latent.height, batch[b].latent.width);
        for (int i = 0; i < l.D; ++i) {
          const double v = std::exp(logv[i]);
          const double dzt = gX(i, b) + gOut(i, b) * sn / (ab * v + 1.0 - ab);
          g.data[i] = sa * dzt;
        }
        out.latent_grad[b] = std::move(g);
      }
    }
    if (request.prompts) {
      out.prompt_grad.resize(B);
      for (int b = 0; b < B; ++b) {
        out.prompt_grad[b].resize(l.P);
        for (int i = 0; i < l.P; ++i) out.prompt_grad[b][i] = gX(l.D + l.TF + i, b);
      }
    }
  }
  (void)mu;
  return out;
}

// ---------------------------------------------------------------------------
// Embeddings, upscaler, similarity

PromptEmbedding ToyBackend::embed_text(std::string_view text) const {
  PromptEmbedding e;
  e.text = std::string(text);
  e.dim = cfg_.prompt_dim;
  for (const auto& tok : tokenize(text)) {
    Rng rng(derive_seed(cfg_.seed, "token:" + tok));
    std::vector<double> v(cfg_.prompt_dim);
    fill_normal(rng, v);
    e.tokens.push_back(std::move(v));
  }
  return e;
}

PromptEmbedding ToyBackend::embed_image(const Image& image) const {
  validate(image);
  const auto f = image_features(image);
  PromptEmbedding e;
  e.text = "<image>";
  e.dim = cfg_.prompt_dim;
  std::vector<double> v(cfg_.prompt_dim, 0.0);
  for (int i = 0; i < cfg_.prompt_dim; ++i) {
    for (int j = 0; j < kImageFeatures; ++j) v[i] += image_ridge_[static_cast<std::size_t>(i) * kImageFeatures + j] * f[j];
  }
  e.tokens.push_back(std::move(v));
  return e;
}

// Shrinks every overlapping patch towards the corpus patch distribution
// (per-axis Wiener gain for white noise of the given deviation) and averages
// the overlapping estimates.
Image ToyBackend::patch_wiener(const Image& image, double sigma) const {
  const int p = cfg_.patch, pd = 3 * p * p;
  if (sigma <= 0.0 || image.height < p || image.width < p) return image;
  std::vector<double> gain(pd);
  for (int k = 0; k < pd; ++k) gain[k] = patch_var_[k] / (patch_var_[k] + sigma * sigma);
  Eigen::Map<const MatrixXd> U(basis_.data(), pd, pd);
  const MatrixXd filter = U * gain_matrix(gain) * U.transpose();
  Image acc(image.height, image.width);
  std::vector<double> weight(static_cast<std::size_t>(image.height) * image.width, 0.0);
  VectorXd v(pd);
  for (int y0 = 0; y0 + p <= image.height; ++y0) {
    for (int x0 = 0; x0 + p <= image.width; ++x0) {
      for (int j = 0; j < pd; ++j) {
        const int c = j / (p * p), dy = (j / p) % p, dx = j % p;
        v[j] = image.at(c, y0 + dy, x0 + dx) - patch_mean_[j];
      }
      const VectorXd f = filter * v;
      for (int j = 0; j < pd; ++j) {
        const int c = j / (p * p), dy = (j / p) % p, dx = j % p;
        acc.at(c, y0 + dy, x0 + dx) += f[j] + patch_mean_[j];
        if (c == 0) weight[static_cast<std::size_t>(y0 + dy) * image.width + x0 + dx] += 1.0;
      }
    }
  }
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < image.height; ++y)
      for (int x = 0; x < image.width; ++x) acc.at(c, y, x) /= weight[static_cast<std::size_t>(y) * image.width + x];
  return acc;
}

Image ToyBackend::upscale(const Image& image, double level) const {
  if (!(level >= 0.0 && level <= 1.0)) throw ArgumentError("upscaler noise level must be within [0, 1]");
  // Noisy inputs may leave [0, 1]; only finiteness is required.
  for (double v : image.data) {
    if (!std::isfinite(v)) throw ArgumentError("upscaler input must be finite");
  }
  const Image up = resize_bilinear(patch_wiener(image, level * cfg_.upscaler_sigma_max), image.height * 2, image.width * 2);
  const int k = cfg_.upscaler_kernel, kk = k * k;
  std::vector<double> kernel(kk);
  for (int i = 0; i < kk; ++i) kernel[i] = upscaler_[i] + level * upscaler_[kk + i];
  const double bias = upscaler_[2 * kk] + level * upscaler_[2 * kk + 1];
  Image out(up.height, up.width);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < up.height; ++y)
      for (int x = 0; x < up.width; ++x) out.at(c, y, x) = std::clamp(conv_at(up, c, y, x, kernel.data(), k) + bias, 0.0, 1.0);
  return out;
}

namespace {

std::vector<int> similarity_scales(const Image& a) {
  std::vector<int> s;
  for (int f : {1, 2, 4}) {
    if (a.height % f == 0 && a.width % f == 0) s.push_back(f);
  }
  return s;
}

}  // namespace

double ToyBackend::similarity(const Image& a, const Image& b) const {
  if (!a.same_shape(b)) throw ArgumentError("image shapes differ");
  Image diff(a.height, a.width);
  for (std::size_t i = 0; i < a.size(); ++i) diff.data[i] = a.data[i] - b.data[i];
  double d = 0.0;
  for (int f : similarity_scales(a)) {
    const int h = a.height / f, w = a.width / f;
    double s = 0.0;
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          double acc = 0.0;
          for (int dy = 0; dy < f; ++dy)
            for (int dx = 0; dx < f; ++dx) acc += diff.at(c, y * f + dy, x * f + dx);
          acc /= f * f;
          s += acc * acc;
        }
    d += s / (3.0 * h * w);
  }
  return d;
}

Image ToyBackend::similarity_grad(const Image& a, const Image& b) const {
  if (!a.same_shape(b)) throw ArgumentError("image shapes differ");
  Image g(a.height, a.width);
  for (int f : similarity_scales(a)) {
    const int h = a.height / f, w = a.width / f;
    const double scale = 2.0 / (3.0 * h * w) / (f * f);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          double acc = 0.0;
          for (int dy = 0; dy < f; ++dy)
            for (int dx = 0; dx < f; ++dx) {
              const std::size_t i = a.index(c, y * f + dy, x * f + dx);
              acc += a.data[i] - b.data[i];
            }
          acc /= f * f;
          for (int dy = 0; dy < f; ++dy)
            for (int dx = 0; dx < f; ++dx) g.at(c, y * f + dy, x * f + dx) += scale * acc;
        }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

void write_vec(std::ostream& os, const std::vector<double>& v) {
  const std::uint64_t n = v.size();
  os.write(reinterpret_cast<const char*>(&n), sizeof n);
  os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
}

std::vector<double> read_vec(std::istream& is, std::size_t expected) {
  std::uint64_t n = 0;
  is.read(reinterpret_cast<char*>(&n), sizeof n);
  if (!is || n != expected) throw IoError("toy checkpoint is truncated or has mismatched tensor sizes");
  std::vector<double> v(n);
  is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (!is) throw IoError("toy checkpoint is truncated");
  return v;
}

}  // namespace

void ToyBackend::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write checkpoint " + path.string());
  nlohmann::json header;
  header["config"] = cfg_;
  header["latent_scale"] = latent_scale_;
  header["report"] = {{"recon_mse_train", report_.recon_mse_train},
                      {"recon_mse_heldout", report_.recon_mse_heldout},
                      {"recon_mse_noise", report_.recon_mse_noise},
                      {"denoiser_loss_heldout", report_.denoiser_loss_heldout},
                      {"denoiser_loss_prior_only", report_.denoiser_loss_prior_only},
                      {"loss_trace", report_.loss_trace}};
  const std::string text = header.dump();
  const std::uint64_t len = text.size();
  os.write(kMagic, sizeof kMagic);
  os.write(reinterpret_cast<const char*>(&len), sizeof len);
  os.write(text.data(), static_cast<std::streamsize>(len));
  write_vec(os, patch_mean_);
  write_vec(os, basis_);
  write_vec(os, patch_var_);
  write_vec(os, params_);
  write_vec(os, image_ridge_);
  write_vec(os, upscaler_);
  if (!os) throw IoError("failed writing checkpoint " + path.string());
}

ToyBackend ToyBackend::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  char magic[sizeof kMagic];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw IoError("not a toy backend checkpoint: " + path.string());
  std::uint64_t len = 0;
  is.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!is || len > (1u << 26)) throw IoError("corrupt checkpoint header");
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  if (!is) throw IoError("corrupt checkpoint header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("corrupt checkpoint header: ") + e.what());
  }
  ToyBackend b(header.at("config").get<ToyConfig>());
  b.latent_scale_ = header.at("latent_scale").get<double>();
  const auto& r = header.at("report");
  b.report_.recon_mse_train = r.at("recon_mse_train");
  b.report_.recon_mse_heldout = r.at("recon_mse_heldout");
  b.report_.recon_mse_noise = r.at("recon_mse_noise");
  b.report_.denoiser_loss_heldout = r.at("denoiser_loss_heldout");
  b.report_.denoiser_loss_prior_only = r.at("denoiser_loss_prior_only");
  b.report_.loss_trace = r.at("loss_trace").get<std::vector<double>>();
  const std::size_t pd = 3 * b.cfg_.patch * b.cfg_.patch;
  const std::size_t kk = static_cast<std::size_t>(b.cfg_.upscaler_kernel) * b.cfg_.upscaler_kernel;
  b.patch_mean_ = read_vec(is, pd);
  b.basis_ = read_vec(is, pd * pd);
  b.patch_var_ = read_vec(is, pd);
  b.params_ = read_vec(is, b.layout().total);
  b.image_ridge_ = read_vec(is, static_cast<std::size_t>(b.cfg_.prompt_dim) * kImageFeatures);
  b.upscaler_ = read_vec(is, 2 * kk + 2);
  return b;
}

// ---------------------------------------------------------------------------
// Training

namespace {

double recon_mse(const ToyBackend& b, const std::vector<Image>& images) {
  if (images.empty()) return 0.0;
  double s = 0.0;
  for (const auto& img : images) s += mean_squared_error(b.decode(b.encode(img)), img);
  return s / images.size();
}

}  // namespace

ToyBackend train_toy_backend(const ToyConfig& cfg, const std::vector<CorpusItem>& corpus) {
  std::vector<std::pair<Image, std::string>> pairs;
  pairs.reserve(corpus.size());
  for (const auto& item : corpus) pairs.emplace_back(item.image, item.caption);
  return train_toy_backend(cfg, pairs);
}

ToyBackend train_toy_backend(const ToyConfig& cfg, const std::vector<std::pair<Image, std::string>>& corpus) {
  if (corpus.empty()) throw ArgumentError("toy training corpus is empty");
  ToyBackend b(cfg);
  const int side = cfg.image_side, p = cfg.patch, K = cfg.latent_dim;
  const int pd = 3 * p * p;
  for (const auto& [img, caption] : corpus) {
    if (img.height != side || img.width != side) throw ArgumentError("corpus image does not match image_side");
    validate(img);
  }

  // Deterministic train / held-out split.
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  Rng split_rng(derive_seed(cfg.seed, "split"));
  std::shuffle(order.begin(), order.end(), split_rng);
  std::size_t n_held = corpus.size() >= 2 ? static_cast<std::size_t>(cfg.heldout_fraction * corpus.size()) : 0;
  n_held = std::min(n_held, corpus.size() - 1);
  std::vector<std::size_t> train_idx(order.begin() + n_held, order.end());
  std::vector<std::size_t> held_idx(order.begin(), order.begin() + n_held);
  std::vector<Image> train_images, held_images;
  for (auto i : train_idx) train_images.push_back(corpus[i].first);
  for (auto i : held_idx) held_images.push_back(corpus[i].first);

  // Patch PCA.
  {
    const int g = cfg.grid();
    VectorXd mean = VectorXd::Zero(pd);
    MatrixXd second = MatrixXd::Zero(pd, pd);
    std::size_t count = 0;
    VectorXd v(pd);
    for (const auto& img : train_images) {
      for (int gy = 0; gy < g; ++gy)
        for (int gx = 0; gx < g; ++gx) {
          for (int j = 0; j < pd; ++j) {
            const int c = j / (p * p), dy = (j / p) % p, dx = j % p;
            v[j] = img.at(c, gy * p + dy, gx * p + dx);
          }
          mean += v;
          second.selfadjointView<Eigen::Lower>().rankUpdate(v);
          ++count;
        }
    }
    mean /= static_cast<double>(count);
    MatrixXd cov = second.selfadjointView<Eigen::Lower>();
    cov = cov / static_cast<double>(count) - mean * mean.transpose();
    Eigen::SelfAdjointEigenSolver<MatrixXd> eig(cov);
    b.patch_mean_.assign(mean.data(), mean.data() + pd);
    b.basis_.assign(static_cast<std::size_t>(pd) * pd, 0.0);
    b.patch_var_.assign(pd, 0.0);
    double lam = 0.0;
    for (int k = 0; k < pd; ++k) {
      VectorXd u = eig.eigenvectors().col(pd - 1 - k);
      Eigen::Index arg = 0;
      u.cwiseAbs().maxCoeff(&arg);
      if (u[arg] < 0) u = -u;
      std::copy(u.data(), u.data() + pd, b.basis_.begin() + static_cast<std::ptrdiff_t>(k) * pd);
      b.patch_var_[k] = std::max(eig.eigenvalues()[pd - 1 - k], 0.0);
      if (k < K) lam += b.patch_var_[k];
    }
    lam /= K;
    b.latent_scale_ = lam > 0.0 ? 1.0 / std::sqrt(lam) : 1.0;
  }

  // Image-embedding head: ridge regression from image statistics to the
  // pooled caption embedding.
  {
    MatrixXd F(static_cast<Eigen::Index>(train_idx.size()), kImageFeatures);
    MatrixXd Y(static_cast<Eigen::Index>(train_idx.size()), cfg.prompt_dim);
    for (std::size_t r = 0; r < train_idx.size(); ++r) {
      const auto f = image_features(corpus[train_idx[r]].first);
      for (int j = 0; j < kImageFeatures; ++j) F(r, j) = f[j];
      const auto pooled = b.embed_text(corpus[train_idx[r]].second).pooled();
      for (int j = 0; j < cfg.prompt_dim; ++j) Y(r, j) = pooled[j];
    }
    const MatrixXd A = F.transpose() * F + cfg.ridge * MatrixXd::Identity(kImageFeatures, kImageFeatures);
    const MatrixXd W = A.ldlt().solve(F.transpose() * Y);  // features x prompt_dim
    b.image_ridge_.resize(static_cast<std::size_t>(cfg.prompt_dim) * kImageFeatures);
    for (int i = 0; i < cfg.prompt_dim; ++i)
      for (int j = 0; j < kImageFeatures; ++j) b.image_ridge_[static_cast<std::size_t>(i) * kImageFeatures + j] = W(j, i);
  }

  // Upscaler: least squares for a level-conditioned kernel mapping the
  // upsampled, Wiener-filtered noisy image onto the upsampled clean one.
  {
    const int k = cfg.upscaler_kernel, kk = k * k, r = k / 2;
    const int nf = 2 * kk + 2, big = 2 * side;
    MatrixXd AtA = MatrixXd::Zero(nf, nf);
    VectorXd Atb = VectorXd::Zero(nf);
    Rng rng(derive_seed(cfg.seed, "upscaler"));
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_int_distribution<int> pix(0, big - 1);
    const int per_plane = std::max(64, 8192 / static_cast<int>(train_images.size()));
    VectorXd row(nf);
    for (const auto& img : train_images) {
      const Image target = resize_bilinear(img, big, big);
      for (double level : {0.0, 0.25, 0.5, 0.75, 1.0}) {
        Image noisy = img;
        const double sd = level * cfg.upscaler_sigma_max;
        for (double& v : noisy.data) v += sd * normal(rng);
        const Image up = resize_bilinear(b.patch_wiener(noisy, sd), big, big);
        for (int c = 0; c < 3; ++c) {
          for (int s = 0; s < per_plane; ++s) {
            const int y = pix(rng), x = pix(rng);
            for (int dy = -r; dy <= r; ++dy) {
              const int yy = std::clamp(y + dy, 0, big - 1);
              for (int dx = -r; dx <= r; ++dx) {
                const double v = up.at(c, yy, std::clamp(x + dx, 0, big - 1));
                row[(dy + r) * k + (dx + r)] = v;
                row[kk + (dy + r) * k + (dx + r)] = level * v;
              }
            }
            row[2 * kk] = 1.0;
            row[2 * kk + 1] = level;
            AtA.selfadjointView<Eigen::Lower>().rankUpdate(row);
            Atb += row * target.at(c, y, x);
          }
        }
      }
    }
    MatrixXd full = AtA.selfadjointView<Eigen::Lower>();
    full += 1e-6 * MatrixXd::Identity(nf, nf);
    const VectorXd sol = full.ldlt().solve(Atb);
    b.upscaler_.assign(sol.data(), sol.data() + nf);
  }

  // Denoiser.
  const ToyBackend::Layout l = b.layout();
  std::vector<LatentTensor> latents;
  std::vector<PromptEmbedding> prompts;
  for (auto i : train_idx) {
    latents.push_back(b.encode(corpus[i].first));
    prompts.push_back(b.embed_text(corpus[i].second));
  }
  {
    VectorXd mean = VectorXd::Zero(l.D), sq = VectorXd::Zero(l.D);
    for (const auto& z : latents) {
      Eigen::Map<const VectorXd> v(z.data.data(), l.D);
      mean += v;
      sq += v.cwiseProduct(v);
    }
    mean /= static_cast<double>(latents.size());
    sq /= static_cast<double>(latents.size());
    for (int i = 0; i < l.D; ++i) {
      b.params_[l.mu + i] = mean[i];
      b.params_[l.logv + i] = std::log(std::max(sq[i] - mean[i] * mean[i], 1e-4));
    }
    Rng rng(derive_seed(cfg.seed, "mlp-init"));
    std::normal_distribution<double> normal(0.0, 1.0);
    const double s1 = 1.0 / std::sqrt(static_cast<double>(l.In));
    const double s2 = 1.0 / std::sqrt(static_cast<double>(l.H));
    for (std::size_t i = 0; i < static_cast<std::size_t>(l.H) * l.In; ++i) b.params_[l.w1 + i] = s1 * normal(rng);
    for (std::size_t i = 0; i < static_cast<std::size_t>(l.H) * l.H; ++i) b.params_[l.w2 + i] = s2 * normal(rng);
  }

  const PromptEmbedding empty = b.embed_text("");
  Rng rng(derive_seed(cfg.seed, "denoiser-train"));
  std::uniform_int_distribution<std::size_t> pick(0, latents.size() - 1);
  std::uniform_int_distribution<int> pick_t(1, cfg.timesteps);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Adam adam(b.params_.size(), cfg.lr);
  std::vector<double> trace;
  std::vector<DenoiserSample> batch(cfg.batch);
  double window = 0.0;
  int window_n = 0;
  for (int step = 0; step < cfg.train_steps; ++step) {
    for (auto& s : batch) {
      const std::size_t i = pick(rng);
      s.latent = latents[i];
      s.timestep = pick_t(rng);
      s.noise = LatentTensor(latents[i].channels, latents[i].height, latents[i].width);
      fill_normal(rng, s.noise.data);
      s.prompt = unit(rng) < cfg.cond_dropout ? empty : prompts[i];
    }
    const double progress = static_cast<double>(step) / std::max(cfg.train_steps, 1);
    adam.set_lr(cfg.lr * (progress < 0.7 ? 1.0 : 1.0 - 0.9 * (progress - 0.7) / 0.3));
    DenoiserLoss loss = b.denoiser_loss(batch, {.parameters = true});
    if (!std::isfinite(loss.loss)) {
      trace.push_back(loss.loss);
      throw TrainingError("toy denoiser diverged", trace);
    }
    adam.step(b.params_, loss.parameter_grad);
    window += loss.loss;
    ++window_n;
    if ((step + 1) % 50 == 0 || step + 1 == cfg.train_steps) {
      trace.push_back(window / window_n);
      window = 0.0;
      window_n = 0;
    }
  }

  // Held-out evaluation.
  ToyTrainReport& rep = b.report_;
  rep.loss_trace = trace;
  rep.recon_mse_train = recon_mse(b, train_images);
  rep.recon_mse_heldout = held_images.empty() ? rep.recon_mse_train : recon_mse(b, held_images);
  {
    Rng nrng(derive_seed(cfg.seed, "noise-images"));
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::vector<Image> noise_images(8, Image(side, side));
    for (auto& img : noise_images)
      for (double& v : img.data) v = u01(nrng);
    rep.recon_mse_noise = recon_mse(b, noise_images);
  }
  {
    const auto& eval_idx = held_idx.empty() ? train_idx : held_idx;
    std::vector<DenoiserSample> eval;
    Rng erng(derive_seed(cfg.seed, "denoiser-eval"));
    for (auto i : eval_idx) {
      const LatentTensor z = b.encode(corpus[i].first);
      const PromptEmbedding pe = b.embed_text(corpus[i].second);
      for (int q = 1; q <= 4; ++q) {
        DenoiserSample s;
        s.latent = z;
        s.timestep = std::max(1, q * cfg.timesteps / 4);
        s.noise = LatentTensor(z.channels, z.height, z.width);
        fill_normal(erng, s.noise.data);
        s.prompt = pe;
        eval.push_back(std::move(s));
      }
    }
    rep.denoiser_loss_heldout = b.denoiser_loss(eval, {}).loss;
    ToyBackend prior_only = b;
    std::fill(prior_only.params_.begin() + static_cast<std::ptrdiff_t>(l.w3),
              prior_only.params_.begin() + static_cast<std::ptrdiff_t>(l.mu), 0.0);
    rep.denoiser_loss_prior_only = prior_only.denoiser_loss(eval, {}).loss;
  }
  if (!(rep.recon_mse_heldout < cfg.recon_threshold)) {
    throw TrainingError("toy autoencoder missed its reconstruction threshold (held-out MSE " +
                            std::to_string(rep.recon_mse_heldout) + ")",
                        trace);
  }
  if (!(rep.denoiser_loss_heldout < cfg.denoiser_threshold)) {
    throw TrainingError("toy denoiser missed its loss threshold (held-out loss " +
                            std::to_string(rep.denoiser_loss_heldout) + ")",
                        trace);
  }
  return b;
}

}  // namespace mimicry::toy
