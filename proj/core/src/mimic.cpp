#include "mimicry/mimic.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "mimicry/error.hpp"
#include "mimicry/guidance.hpp"
#include "mimicry/optim.hpp"
#include "mimicry/parallel.hpp"
#include "mimicry/rng.hpp"

namespace mimicry::mimic {

void validate(const FinetuneConfig& cfg) {
  if (cfg.steps < 1) throw ArgumentError("finetune steps must be at least 1");
  if (cfg.batch < 1) throw ArgumentError("finetune batch must be at least 1");
  if (!(cfg.lr > 0.0)) throw ArgumentError("finetune learning rate must be positive");
  if (cfg.checkpoint_every < 1) throw ArgumentError("checkpoint interval must be positive");
}

std::string training_prompt(const std::string& caption, const std::string& word) { return caption + " by " + word; }

namespace {

LatentTensor noise_like(const LatentTensor& z, Rng& rng) {
  LatentTensor n(z.channels, z.height, z.width);
  fill_normal(rng, n.data);
  return n;
}

struct FinetuneTrace {
  std::vector<int> steps;
  std::vector<double> loss;
};

FinetuneTrace finetune_impl(DiffusionBackend& model, const std::vector<Image>& images,
                            const std::vector<std::string>& prompts, const FinetuneConfig& cfg) {
  validate(cfg);
  if (images.empty()) throw ArgumentError("finetuning needs at least one image");
  if (images.size() != prompts.size()) throw ArgumentError("finetuning needs one prompt per image");
  auto params = model.parameters();
  if (params.empty()) throw BackendError(model.name() + " has no finetunable parameters");

  std::vector<LatentTensor> latents;
  std::vector<PromptEmbedding> embeds;
  for (std::size_t i = 0; i < images.size(); ++i) {
    latents.push_back(model.encode(images[i]));
    embeds.push_back(model.embed_text(prompts[i]));
  }
  const int T = model.schedule().timesteps();

  std::vector<DenoiserSample> eval;
  {
    Rng rng(derive_seed(cfg.seed, "finetune-eval"));
    for (std::size_t i = 0; i < latents.size(); ++i) {
      for (int k = 1; k <= 4; ++k) {
        eval.push_back({latents[i], std::max(1, k * T / 5), noise_like(latents[i], rng), embeds[i]});
      }
    }
  }

  FinetuneTrace trace;
  auto checkpoint = [&](int step) {
    const double l = model.denoiser_loss(eval, {}).loss;
    if (!std::isfinite(l)) {
      trace.loss.push_back(l);
      throw TrainingError("finetuning diverged at step " + std::to_string(step), trace.loss);
    }
    trace.steps.push_back(step);
    trace.loss.push_back(l);
  };

  Rng rng(derive_seed(cfg.seed, "finetune"));
  std::uniform_int_distribution<std::size_t> pick(0, latents.size() - 1);
  std::uniform_int_distribution<int> pick_t(1, T);
  Adam adam(params.size(), cfg.lr);
  std::vector<DenoiserSample> batch(cfg.batch);
  for (int step = 0; step < cfg.steps; ++step) {
    if (step % cfg.checkpoint_every == 0) checkpoint(step);
    for (auto& s : batch) {
      const std::size_t i = pick(rng);
      s.latent = latents[i];
      s.timestep = pick_t(rng);
      s.noise = noise_like(latents[i], rng);
      s.prompt = embeds[i];
    }
    const DenoiserLoss loss = model.denoiser_loss(batch, {.parameters = true});
    if (!std::isfinite(loss.loss)) {
      trace.loss.push_back(loss.loss);
      throw TrainingError("finetuning diverged at step " + std::to_string(step), trace.loss);
    }
    adam.step(params, loss.parameter_grad);
  }
  checkpoint(cfg.steps);
  return trace;
}

}  // namespace

std::vector<double> finetune_in_place(DiffusionBackend& model, const std::vector<Image>& images,
                                      const std::vector<std::string>& prompts, const FinetuneConfig& cfg) {
  return finetune_impl(model, images, prompts, cfg).loss;
}

FinetunedModel finetune(const DiffusionBackend& backend, const dataset::ArtistDataset& dataset,
                        const FinetuneConfig& cfg, const std::string& method) {
  if (dataset.images.empty()) throw ArgumentError("finetuning needs a nonempty dataset");
  if (dataset.images.size() != dataset.captions.size()) throw ArgumentError("dataset captions do not match images");
  FinetunedModel out;
  out.backend = backend.clone();
  std::vector<std::string> prompts;
  for (const auto& c : dataset.captions) prompts.push_back(training_prompt(c, cfg.special_word));
  auto trace = finetune_impl(*out.backend, dataset.images, prompts, cfg);
  out.checkpoint_steps = std::move(trace.steps);
  out.loss_trace = std::move(trace.loss);
  const nlohmann::json cj = {{"steps", cfg.steps}, {"batch", cfg.batch}, {"lr", cfg.lr},
                             {"special_word", cfg.special_word}, {"seed", cfg.seed},
                             {"checkpoint_every", cfg.checkpoint_every}};
  out.provenance = {dataset.artist_id, method, fnv1a64(cj.dump())};
  return out;
}

double embedding_loss(const DiffusionBackend& backend, const std::vector<Image>& images, const PromptEmbedding& prompt,
                      std::uint64_t seed, int samples_per_image) {
  if (images.empty()) throw ArgumentError("embedding loss needs images");
  const int T = backend.schedule().timesteps();
  Rng rng(derive_seed(seed, "embedding-loss"));
  std::vector<DenoiserSample> batch;
  for (const auto& img : images) {
    const LatentTensor z = backend.encode(img);
    for (int k = 0; k < samples_per_image; ++k) {
      const int t = samples_per_image == 1 ? T / 2 : 1 + k * (T - 1) / (samples_per_image - 1);
      batch.push_back({z, t, noise_like(z, rng), prompt});
    }
  }
  return backend.denoiser_loss(batch, {}).loss;
}

PromptEmbedding textual_inversion(const DiffusionBackend& backend, const std::vector<Image>& images,
                                  const TextualInversionConfig& cfg, const std::string& prefix) {
  if (images.empty()) throw ArgumentError("textual inversion needs at least one image");
  if (cfg.tokens < 1 || cfg.steps < 0 || cfg.batch < 1 || !(cfg.lr > 0.0)) {
    throw ArgumentError("invalid textual inversion settings");
  }
  const PromptEmbedding head = backend.embed_text(prefix);
  const std::vector<double> init = backend.embed_text(cfg.init_text).pooled();
  PromptEmbedding learned;
  learned.text = "<learned>";
  learned.dim = head.dim;
  learned.tokens.assign(cfg.tokens, init);
  if (cfg.steps == 0) return concat(head, learned);

  std::vector<LatentTensor> latents;
  for (const auto& img : images) latents.push_back(backend.encode(img));
  const int T = backend.schedule().timesteps();
  const std::size_t n_tok = head.tokens.size() + cfg.tokens;
  const std::size_t dim = static_cast<std::size_t>(head.dim);

  std::vector<double> flat(cfg.tokens * dim);
  for (int k = 0; k < cfg.tokens; ++k) std::copy(init.begin(), init.end(), flat.begin() + k * dim);
  std::vector<double> grad(flat.size());
  Adam adam(flat.size(), cfg.lr);
  Rng rng(derive_seed(cfg.seed, "textual-inversion"));
  std::uniform_int_distribution<std::size_t> pick(0, latents.size() - 1);
  std::uniform_int_distribution<int> pick_t(1, T);
  std::vector<DenoiserSample> batch(cfg.batch);
  for (int step = 0; step < cfg.steps; ++step) {
    for (int k = 0; k < cfg.tokens; ++k) {
      learned.tokens[k].assign(flat.begin() + k * dim, flat.begin() + (k + 1) * dim);
    }
    const PromptEmbedding composite = concat(head, learned);
    for (auto& s : batch) {
      const std::size_t i = pick(rng);
      s.latent = latents[i];
      s.timestep = pick_t(rng);
      s.noise = noise_like(latents[i], rng);
      s.prompt = composite;
    }
    const DenoiserLoss loss = backend.denoiser_loss(batch, {.prompts = true});
    if (!std::isfinite(loss.loss)) throw TrainingError("textual inversion diverged", {loss.loss});
    std::fill(grad.begin(), grad.end(), 0.0);
    // pooled = mean over all tokens, so each learned token gets 1/n of the pooled gradient.
    for (const auto& pg : loss.prompt_grad) {
      for (int k = 0; k < cfg.tokens; ++k)
        for (std::size_t j = 0; j < dim; ++j) grad[k * dim + j] += pg[j] / static_cast<double>(n_tok);
    }
    adam.step(flat, grad);
  }
  for (int k = 0; k < cfg.tokens; ++k) learned.tokens[k].assign(flat.begin() + k * dim, flat.begin() + (k + 1) * dim);
  return concat(head, learned);
}

std::string to_string(Method m) {
  switch (m) {
    case Method::naive: return "naive";
    case Method::gaussian: return "gaussian";
    case Method::impress_pp: return "impress++";
    case Method::diffpure: return "diffpure";
    case Method::noisy_upscale: return "noisy-upscale";
  }
  throw ArgumentError("unknown mimicry method");
}

Method parse_method(const std::string& name) {
  if (name == "naive") return Method::naive;
  if (name == "gaussian") return Method::gaussian;
  if (name == "impress++" || name == "impress_pp" || name == "impress") return Method::impress_pp;
  if (name == "diffpure") return Method::diffpure;
  if (name == "noisy-upscale" || name == "noisy_upscale") return Method::noisy_upscale;
  throw ArgumentError("unknown mimicry method: " + name);
}

PipelineSpec pipeline_for(Method method, const MimicConfig& cfg) {
  PipelineSpec spec;
  spec.name = to_string(method);
  spec.stream = spec.name;
  auto step = [&](purify::Method m, int index) {
    purify::PurifyConfig p;
    p.method = m;
    p.seed = derive_seed(cfg.seed, "preprocess:" + spec.name + ":" + std::to_string(index));
    p.guidance = cfg.guidance;
    p.max_steps = cfg.sampling_steps;
    return p;
  };
  switch (method) {
    case Method::naive: break;
    case Method::gaussian: {
      auto p = step(purify::Method::gaussian, 0);
      p.sigma = cfg.gaussian_sigma;
      spec.preprocess.push_back(p);
      break;
    }
    case Method::diffpure: {
      auto p = step(purify::Method::diffpure, 0);
      p.strength = cfg.diffpure_strength;
      spec.preprocess.push_back(p);
      break;
    }
    case Method::noisy_upscale: {
      auto p = step(purify::Method::noisy_upscale, 0);
      p.upscale_sigma = cfg.upscale_sigma;
      p.level = cfg.upscale_level;
      spec.preprocess.push_back(p);
      break;
    }
    case Method::impress_pp: {
      auto g = step(purify::Method::gaussian, 0);
      g.sigma = cfg.impress_sigma;
      auto r = step(purify::Method::reverse_encoder, 1);
      r.pgd = cfg.impress_pgd;
      r.smooth_max_temperature = cfg.impress_temperature;
      spec.preprocess = {g, r};
      spec.negative_prompting = true;
      spec.negative_strength = cfg.negative_strength;
      spec.post_strength = cfg.post_strength;
      break;
    }
  }
  return spec;
}

std::uint64_t generation_seed(std::uint64_t base, const std::string& stream, const std::string& prompt,
                              std::uint64_t seed) {
  return derive_seed(derive_seed(base, "generate:" + stream + ":" + prompt), seed);
}

ScenarioOutput run_pipeline(const DiffusionBackend& backend, const dataset::ArtistDataset& protected_dataset,
                            const PipelineSpec& spec, const std::vector<std::string>& prompts,
                            const std::vector<std::uint64_t>& seeds, const MimicConfig& cfg, int workers) {
  if (prompts.empty()) throw ArgumentError("mimicry needs at least one prompt");
  if (seeds.empty()) throw ArgumentError("mimicry needs at least one seed");
  if (protected_dataset.images.empty()) throw ArgumentError("mimicry needs a nonempty dataset");

  ScenarioOutput out;
  out.prompts = prompts;
  out.seeds = seeds;

  std::vector<Image> train = protected_dataset.images;
  for (const auto& step : spec.preprocess) train = purify::apply_all(backend, train, step, protected_dataset.captions, workers);
  out.training_images = train;

  dataset::ArtistDataset ds = protected_dataset;
  ds.images = train;
  FinetuneConfig ft = cfg.finetune;
  ft.seed = derive_seed(cfg.seed, "finetune:" + spec.name);
  out.model = finetune(backend, ds, ft, spec.name);
  const DiffusionBackend& model = *out.model.backend;

  GuidanceOptions guidance;
  guidance.scale = cfg.guidance;
  if (spec.negative_prompting) {
    TextualInversionConfig ti = cfg.inversion;
    ti.seed = derive_seed(cfg.seed, "inversion:" + spec.name);
    // Trained on the protected images: the negative prompt should capture the
    // adversarial style, not the purified one.
    guidance.negative = NegativePrompt{textual_inversion(model, protected_dataset.images, ti, cfg.negative_prefix),
                                       spec.negative_strength};
  }

  const std::size_t n = prompts.size() * seeds.size();
  out.images.resize(n);
  parallel_for(n, workers, [&](std::size_t k) {
    const std::string& prompt = prompts[k / seeds.size()];
    const std::uint64_t s = seeds[k % seeds.size()];
    const std::uint64_t gen = generation_seed(cfg.seed, spec.stream, prompt, s);
    Image img = sample(model, model.embed_text(training_prompt(prompt, ft.special_word)), cfg.sampling_steps, guidance, gen);
    if (spec.post_strength > 0.0) {
      img = purify::diffpure(backend, img, spec.post_strength, prompt + cfg.post_suffix, cfg.guidance,
                             derive_seed(gen, "post"), cfg.sampling_steps);
    }
    out.images[k] = std::move(img);
  });
  return out;
}

ScenarioOutput run_scenario(const DiffusionBackend& backend, const dataset::ArtistDataset& protected_dataset,
                            Method method, const std::vector<std::string>& prompts,
                            const std::vector<std::uint64_t>& seeds, const MimicConfig& cfg, int workers) {
  return run_pipeline(backend, protected_dataset, pipeline_for(method, cfg), prompts, seeds, cfg, workers);
}

}  // namespace mimicry::mimic
