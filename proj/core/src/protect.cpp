#include "mimicry/protect.hpp"

#include <algorithm>
#include <cmath>

#include "mimicry/error.hpp"
#include "mimicry/guidance.hpp"
#include "mimicry/mimic.hpp"
#include "mimicry/optim.hpp"
#include "mimicry/parallel.hpp"
#include "mimicry/rng.hpp"

namespace mimicry::protect {

void validate(const PgdConfig& cfg) {
  if (!(cfg.budget > 0.0)) throw ArgumentError("budget must be positive");
  if (!(cfg.step > 0.0)) throw ArgumentError("PGD step must be positive");
  if (cfg.iterations < 0) throw ArgumentError("PGD iterations must be nonnegative");
}

double Perturbation::linf() const {
  double m = 0.0;
  for (double v : delta.data) m = std::max(m, std::abs(v));
  return m;
}

void project(Image& x, const Image& x0, double budget) {
  if (!x.same_shape(x0)) throw ArgumentError("image shapes differ");
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double lo = std::max(x0.data[i] - budget, 0.0);
    const double hi = std::min(x0.data[i] + budget, 1.0);
    x.data[i] = std::clamp(x.data[i], lo, hi);
  }
}

void pgd_step(Image& x, const Image& x0, const Image& grad, double step, double budget, Direction dir) {
  if (!x.same_shape(grad)) throw ArgumentError("gradient shape differs from image");
  const double s = dir == Direction::descend ? -step : step;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double g = grad.data[i];
    x.data[i] += s * (g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0));
  }
  project(x, x0, budget);
}

namespace {

Perturbation make_perturbation(const Image& protected_image, const Image& clean, double budget) {
  Perturbation p;
  p.budget = budget;
  p.delta = Image(clean.height, clean.width);
  for (std::size_t i = 0; i < clean.size(); ++i) p.delta.data[i] = protected_image.data[i] - clean.data[i];
  return p;
}

double latent_sq_distance(const LatentTensor& a, const LatentTensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
  return s;
}

void require_images(const std::vector<Image>& images) {
  for (const auto& img : images) validate(img);
}

}  // namespace

ProtectionResult encoder_attack_pgd(const DiffusionBackend& backend, const std::vector<Image>& images,
                                    const Image& target_image, const PgdConfig& cfg, int workers) {
  validate(cfg);
  require_images(images);
  for (const auto& img : images) {
    if (!img.same_shape(target_image)) throw ArgumentError("target image shape differs from input images");
  }
  const LatentTensor target = backend.encode(target_image);
  ProtectionResult res;
  res.images.resize(images.size());
  res.perturbations.resize(images.size());
  res.traces.resize(images.size());
  parallel_for(images.size(), workers, [&](std::size_t i) {
    const Image& x0 = images[i];
    Image x = x0;
    auto& trace = res.traces[i];
    trace.reserve(cfg.iterations + 1);
    LatentTensor z = backend.encode(x);
    trace.push_back(latent_sq_distance(z, target));
    for (int it = 0; it < cfg.iterations; ++it) {
      LatentTensor g = z;
      for (std::size_t k = 0; k < g.size(); ++k) g.data[k] = 2.0 * (z.data[k] - target.data[k]);
      pgd_step(x, x0, backend.encode_vjp(x, g), cfg.step, cfg.budget, Direction::descend);
      z = backend.encode(x);
      trace.push_back(latent_sq_distance(z, target));
    }
    res.perturbations[i] = make_perturbation(x, x0, cfg.budget);
    res.images[i] = std::move(x);
  });
  res.config = {{"method", "mist-enc"}, {"budget", cfg.budget}, {"step", cfg.step},
                {"iterations", cfg.iterations}, {"seed", cfg.seed}};
  return res;
}

std::pair<int, int> percentile_window(int n) {
  const int lo = static_cast<int>(std::ceil(0.5 * n));
  const int hi = static_cast<int>(std::floor(0.75 * n));
  return {lo, hi};
}

std::string select_target_style(const DiffusionBackend& backend, const std::vector<Image>& images,
                                const std::vector<StyleEntry>& library, std::uint64_t seed) {
  const int n = static_cast<int>(library.size());
  const auto [lo, hi] = percentile_window(n);
  if (n < 4 || lo < 1 || hi < lo) throw ArgumentError("style library too small for the percentile window");
  if (images.empty()) throw ArgumentError("target style selection needs images");

  std::vector<double> mean;
  for (const auto& img : images) {
    const auto e = backend.embed_image(img).pooled();
    if (mean.empty()) mean.assign(e.size(), 0.0);
    for (std::size_t j = 0; j < e.size(); ++j) mean[j] += e[j] / images.size();
  }
  std::vector<std::pair<double, std::size_t>> ranked;
  for (std::size_t s = 0; s < library.size(); ++s) {
    const auto e = backend.embed_text(library[s].prompt).pooled();
    if (e.size() != mean.size()) throw ArgumentError("style embedding width differs from image embedding width");
    double d = 0.0;
    for (std::size_t j = 0; j < e.size(); ++j) d += (e[j] - mean[j]) * (e[j] - mean[j]);
    ranked.emplace_back(std::sqrt(d), s);
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  Rng rng(derive_seed(seed, "target-style"));
  std::uniform_int_distribution<int> pick(lo, hi);
  return library[ranked[pick(rng) - 1].second].id;
}

std::vector<Image> glaze_targets(const DiffusionBackend& backend, const std::vector<Image>& images,
                                 const std::string& style_prompt, double strength, std::uint64_t seed, int workers) {
  std::vector<Image> out(images.size());
  const PromptEmbedding prompt = backend.embed_text(style_prompt);
  GuidanceOptions g;
  parallel_for(images.size(), workers, [&](std::size_t i) {
    out[i] = img2img(backend, images[i], strength, prompt, g, kDefaultSamplingSteps, derive_seed(seed, i));
  });
  return out;
}

ProtectionResult glaze_style_attack(const DiffusionBackend& backend, const std::vector<Image>& images,
                                    const std::vector<Image>& target_style_images, const GlazeConfig& cfg,
                                    int workers) {
  if (target_style_images.size() != images.size()) throw ArgumentError("glaze needs one target image per input");
  if (!(cfg.budget > 0.0) || cfg.steps < 0 || !(cfg.lr > 0.0) || cfg.penalty < 0.0) {
    throw ArgumentError("invalid glaze settings");
  }
  require_images(images);
  ProtectionResult res;
  res.images.resize(images.size());
  res.perturbations.resize(images.size());
  res.traces.resize(images.size());
  parallel_for(images.size(), workers, [&](std::size_t i) {
    const Image& x0 = images[i];
    const LatentTensor target = backend.encode(target_style_images[i]);
    Image x = x0;
    auto objective = [&](const Image& xi, LatentTensor* z_out, double* sim_out) {
      LatentTensor z = backend.encode(xi);
      const double sim = backend.similarity(xi, x0);
      const double obj = latent_sq_distance(z, target) + cfg.penalty * std::max(sim - cfg.similarity_bound, 0.0);
      if (z_out) *z_out = std::move(z);
      if (sim_out) *sim_out = sim;
      return obj;
    };
    auto& trace = res.traces[i];
    trace.reserve(cfg.steps + 1);
    LatentTensor z;
    double sim = 0.0;
    trace.push_back(objective(x, &z, &sim));
    Adam adam(x.size(), cfg.lr);
    for (int it = 0; it < cfg.steps; ++it) {
      LatentTensor g = z;
      for (std::size_t k = 0; k < g.size(); ++k) g.data[k] = 2.0 * (z.data[k] - target.data[k]);
      Image grad = backend.encode_vjp(x, g);
      if (cfg.penalty > 0.0 && sim > cfg.similarity_bound) {
        const Image sg = backend.similarity_grad(x, x0);
        for (std::size_t k = 0; k < grad.size(); ++k) grad.data[k] += cfg.penalty * sg.data[k];
      }
      adam.step(x.data, grad.data);
      project(x, x0, cfg.budget);
      trace.push_back(objective(x, &z, &sim));
    }
    res.perturbations[i] = make_perturbation(x, x0, cfg.budget);
    res.images[i] = std::move(x);
  });
  res.config = {{"method", "glaze-like"}, {"penalty", cfg.penalty}, {"similarity_bound", cfg.similarity_bound},
                {"budget", cfg.budget}, {"steps", cfg.steps}, {"lr", cfg.lr},
                {"target_strength", cfg.target_strength}, {"seed", cfg.seed}};
  return res;
}

namespace {

// Surrogate denoiser loss and its gradient with respect to the image.
double aspl_loss(const DiffusionBackend& surrogate, const Image& x, const PromptEmbedding& prompt, Rng& rng,
                 int samples, Image* grad) {
  const LatentTensor z = surrogate.encode(x);
  const int T = surrogate.schedule().timesteps();
  std::uniform_int_distribution<int> pick_t(1, T);
  std::vector<DenoiserSample> batch(samples);
  for (auto& s : batch) {
    s.latent = z;
    s.timestep = pick_t(rng);
    s.noise = LatentTensor(z.channels, z.height, z.width);
    fill_normal(rng, s.noise.data);
    s.prompt = prompt;
  }
  const DenoiserLoss loss = surrogate.denoiser_loss(batch, {.latents = grad != nullptr});
  if (grad) {
    LatentTensor gz(z.channels, z.height, z.width);
    for (const auto& lg : loss.latent_grad)
      for (std::size_t k = 0; k < gz.size(); ++k) gz.data[k] += lg.data[k];
    *grad = surrogate.encode_vjp(x, gz);
  }
  return loss.loss;
}

}  // namespace

ProtectionResult aspl_attack(const DiffusionBackend& backend, const dataset::ArtistDataset& dataset,
                             const AsplConfig& cfg, int workers) {
  if (!(cfg.budget > 0.0)) throw ArgumentError("budget must be positive");
  if (cfg.iterations < 0 || cfg.pgd_steps < 0 || cfg.finetune_steps < 0 || !(cfg.step > 0.0) || cfg.loss_samples < 1) {
    throw ArgumentError("invalid ASPL settings");
  }
  if (dataset.images.empty()) throw ArgumentError("ASPL needs a nonempty dataset");
  if (dataset.captions.size() != dataset.images.size()) throw ArgumentError("dataset captions do not match images");
  require_images(dataset.images);

  const std::size_t n = dataset.images.size();
  std::vector<std::string> prompts;
  for (const auto& c : dataset.captions) prompts.push_back(mimic::training_prompt(c, cfg.special_word));
  std::vector<Image> x = dataset.images;
  ProtectionResult res;
  res.traces.resize(n);

  auto evaluate = [&](const DiffusionBackend& surrogate) {
    for (std::size_t i = 0; i < n; ++i) {
      Rng rng(derive_seed(derive_seed(cfg.seed, "aspl-eval"), i));
      res.traces[i].push_back(aspl_loss(surrogate, x[i], surrogate.embed_text(prompts[i]), rng, 8, nullptr));
    }
  };

  evaluate(backend);
  for (int round = 0; round < cfg.iterations; ++round) {
    // Re-clone from the pristine backend every round, then simulate the
    // forger's finetuning on the current perturbed images.
    auto surrogate = backend.clone();
    if (cfg.finetune_steps > 0) {
      mimic::FinetuneConfig ft;
      ft.steps = cfg.finetune_steps;
      ft.batch = cfg.finetune_batch;
      ft.lr = cfg.finetune_lr;
      ft.special_word = cfg.special_word;
      ft.seed = derive_seed(cfg.seed, "aspl-surrogate:" + std::to_string(round));
      ft.checkpoint_every = cfg.finetune_steps;
      mimic::finetune_in_place(*surrogate, x, prompts, ft);
    }
    parallel_for(n, workers, [&](std::size_t i) {
      Rng rng(derive_seed(derive_seed(cfg.seed, "aspl-pgd:" + std::to_string(round)), i));
      const PromptEmbedding prompt = surrogate->embed_text(prompts[i]);
      for (int s = 0; s < cfg.pgd_steps; ++s) {
        Image grad;
        aspl_loss(*surrogate, x[i], prompt, rng, cfg.loss_samples, &grad);
        pgd_step(x[i], dataset.images[i], grad, cfg.step, cfg.budget, Direction::ascend);
      }
    });
    evaluate(*surrogate);
  }

  for (std::size_t i = 0; i < n; ++i) {
    res.perturbations.push_back(make_perturbation(x[i], dataset.images[i], cfg.budget));
  }
  res.images = std::move(x);
  res.config = {{"method", "anti-db"}, {"iterations", cfg.iterations}, {"step", cfg.step},
                {"pgd_steps", cfg.pgd_steps}, {"finetune_steps", cfg.finetune_steps}, {"budget", cfg.budget},
                {"finetune_batch", cfg.finetune_batch}, {"finetune_lr", cfg.finetune_lr},
                {"loss_samples", cfg.loss_samples}, {"special_word", cfg.special_word}, {"seed", cfg.seed}};
  return res;
}

}  // namespace mimicry::protect
