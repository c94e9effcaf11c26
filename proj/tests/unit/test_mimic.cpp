#include <cmath>

#include <gtest/gtest.h>

#include "mimicry/error.hpp"
#include "mimicry/guidance.hpp"
#include "mimicry/mimic.hpp"
#include "mimicry/protect.hpp"
#include "mimicry/toy_data.hpp"
#include "test_support.hpp"

using namespace mimicry;
using namespace mimicry::mimic;
using mimicry::testing::shared_toy;

namespace {

// Short everything, so a full scenario runs in well under a second.
MimicConfig quick_config() {
  MimicConfig c;
  c.finetune.steps = 40;
  c.finetune.lr = 5e-4;
  c.finetune.checkpoint_every = 20;
  c.inversion.steps = 20;
  c.sampling_steps = 10;
  c.impress_pgd.iterations = 10;
  c.seed = 3;
  return c;
}

dataset::ArtistDataset artist(const std::string& style = "plain", int n = 4) {
  return toy::make_artist("A", style, n, 32, 5);
}

const std::vector<std::string> kPrompts = {"a circle", "a square"};
const std::vector<std::uint64_t> kSeeds = {0, 1};

}  // namespace

TEST(Finetune, PromptRule) {
  EXPECT_EQ(training_prompt("a red hat", "nulevoy"), "a red hat by nulevoy");
  FinetuneConfig d;
  EXPECT_EQ(d.steps, 2000);
  EXPECT_EQ(d.batch, 4);
  EXPECT_DOUBLE_EQ(d.lr, 5e-6);
  EXPECT_EQ(d.special_word, "nulevoy");
}

TEST(Finetune, LossDecreasesOverTwoHundredSteps) {
  const auto& b = shared_toy();
  FinetuneConfig cfg;
  cfg.steps = 200;
  cfg.lr = 5e-4;
  const auto m = finetune(b, artist("stripes"), cfg);
  ASSERT_GE(m.loss_trace.size(), 2u);
  EXPECT_EQ(m.checkpoint_steps.size(), m.loss_trace.size());
  EXPECT_EQ(m.checkpoint_steps.back(), 200);
  EXPECT_LT(m.loss_trace.back(), m.loss_trace.front());
  EXPECT_EQ(m.provenance.dataset_id, "A");
  EXPECT_EQ(m.provenance.method, "naive");
}

TEST(Finetune, NeverMutatesTheBaseBackend) {
  const auto& b = shared_toy();
  const auto before = parameter_hash(b);
  FinetuneConfig cfg;
  cfg.steps = 30;
  cfg.lr = 1e-3;
  const auto m = finetune(b, artist(), cfg);
  EXPECT_EQ(parameter_hash(b), before);
  EXPECT_NE(parameter_hash(*m.backend), before);
}

TEST(Finetune, DeterministicPerSeed) {
  const auto& b = shared_toy();
  FinetuneConfig cfg;
  cfg.steps = 30;
  cfg.lr = 1e-3;
  const auto x = finetune(b, artist(), cfg), y = finetune(b, artist(), cfg);
  EXPECT_EQ(parameter_hash(*x.backend), parameter_hash(*y.backend));
  EXPECT_EQ(x.loss_trace, y.loss_trace);
  cfg.seed = 1;
  EXPECT_NE(parameter_hash(*finetune(b, artist(), cfg).backend), parameter_hash(*x.backend));
}

TEST(Finetune, DivergenceIsTrainingError) {
  const auto& b = shared_toy();
  FinetuneConfig cfg;
  cfg.steps = 400;
  cfg.lr = 1e150;
  EXPECT_THROW(finetune(b, artist(), cfg), TrainingError);
}

TEST(Finetune, RejectsBadConfigAndEmptyDataset) {
  const auto& b = shared_toy();
  FinetuneConfig cfg;
  cfg.steps = 0;
  EXPECT_THROW(validate(cfg), ArgumentError);
  cfg = FinetuneConfig{};
  cfg.lr = 0.0;
  EXPECT_THROW(validate(cfg), ArgumentError);
  dataset::ArtistDataset empty{"A", "", {}, {}};
  EXPECT_THROW(finetune(b, empty, FinetuneConfig{}), ArgumentError);
}

TEST(TextualInversion, ZeroStepsReturnsInitialization) {
  const auto& b = shared_toy();
  TextualInversionConfig cfg;
  cfg.steps = 0;
  const auto e = textual_inversion(b, artist().images, cfg);
  const auto head = b.embed_text("art by");
  ASSERT_EQ(e.tokens.size(), head.tokens.size() + 8);
  const auto init = b.embed_text("style *").pooled();
  for (std::size_t k = head.tokens.size(); k < e.tokens.size(); ++k) EXPECT_EQ(e.tokens[k], init);
  for (std::size_t k = 0; k < head.tokens.size(); ++k) EXPECT_EQ(e.tokens[k], head.tokens[k]);
}

TEST(TextualInversion, LearnedEmbeddingLowersLoss) {
  const auto& b = shared_toy();
  const auto images = artist("dots").images;
  TextualInversionConfig cfg;
  cfg.steps = 0;
  const auto init = textual_inversion(b, images, cfg);
  cfg.steps = 150;
  const auto learned = textual_inversion(b, images, cfg);
  EXPECT_LT(embedding_loss(b, images, learned, 42, 16), embedding_loss(b, images, init, 42, 16));
}

TEST(TextualInversion, DefaultsAndErrors) {
  TextualInversionConfig d;
  EXPECT_EQ(d.tokens, 8);
  EXPECT_DOUBLE_EQ(d.lr, 0.005);
  EXPECT_EQ(d.steps, 500);
  EXPECT_EQ(d.init_text, "style *");
  EXPECT_THROW(textual_inversion(shared_toy(), {}, d), ArgumentError);
}

TEST(Scenario, OutputCountForEveryMethod) {
  const auto& b = shared_toy();
  const auto cfg = quick_config();
  for (auto m : kAllMethods) {
    const auto out = run_scenario(b, artist(), m, kPrompts, kSeeds, cfg);
    EXPECT_EQ(out.images.size(), kPrompts.size() * kSeeds.size()) << to_string(m);
    EXPECT_EQ(out.training_images.size(), 4u);
    for (const auto& img : out.images) {
      ASSERT_EQ(img.height, 32);
      for (double v : img.data) {
        ASSERT_GE(v, 0.0);
        ASSERT_LE(v, 1.0);
      }
    }
  }
  EXPECT_THROW(run_scenario(b, artist(), Method::naive, {}, kSeeds, cfg), ArgumentError);
}

TEST(Scenario, BitReproducible) {
  const auto& b = shared_toy();
  const auto cfg = quick_config();
  for (auto m : {Method::naive, Method::impress_pp, Method::noisy_upscale}) {
    const auto x = run_scenario(b, artist(), m, kPrompts, kSeeds, cfg);
    const auto y = run_scenario(b, artist(), m, kPrompts, kSeeds, cfg);
    EXPECT_EQ(x.images, y.images) << to_string(m);
  }
}

TEST(Scenario, WorkersDoNotChangeOutputs) {
  const auto& b = shared_toy();
  const auto cfg = quick_config();
  const auto x = run_scenario(b, artist(), Method::gaussian, kPrompts, kSeeds, cfg, 1);
  const auto y = run_scenario(b, artist(), Method::gaussian, kPrompts, kSeeds, cfg, 3);
  EXPECT_EQ(x.images, y.images);
}

TEST(Scenario, MethodsDrawFromDistinctSeedStreams) {
  EXPECT_NE(generation_seed(0, "naive", "a mountain", 0), generation_seed(0, "baseline", "a mountain", 0));
  EXPECT_NE(generation_seed(0, "naive", "a mountain", 0), generation_seed(0, "naive", "a piano", 0));
  EXPECT_EQ(generation_seed(0, "naive", "a mountain", 0), generation_seed(0, "naive", "a mountain", 0));
}

TEST(Scenario, ImpressDefaults) {
  const MimicConfig cfg;
  const auto spec = pipeline_for(Method::impress_pp, cfg);
  EXPECT_TRUE(spec.negative_prompting);
  EXPECT_DOUBLE_EQ(spec.negative_strength, 0.5);
  EXPECT_DOUBLE_EQ(spec.post_strength, 0.2);
  ASSERT_EQ(spec.preprocess.size(), 2u);
  EXPECT_EQ(spec.preprocess[0].method, purify::Method::gaussian);
  EXPECT_DOUBLE_EQ(spec.preprocess[0].sigma, 0.05);
  EXPECT_EQ(spec.preprocess[1].method, purify::Method::reverse_encoder);
  EXPECT_EQ(spec.preprocess[1].pgd.iterations, 400);
  EXPECT_TRUE(pipeline_for(Method::naive, cfg).preprocess.empty());
}

TEST(Scenario, ImpressDegradesToPurifyThenFinetune) {
  const auto& b = shared_toy();
  const auto cfg = quick_config();
  auto impress = pipeline_for(Method::impress_pp, cfg);
  impress.negative_strength = -1.0;
  impress.post_strength = 0.0;
  auto plain = impress;
  plain.negative_prompting = false;
  const auto x = run_pipeline(b, artist(), impress, kPrompts, kSeeds, cfg);
  const auto y = run_pipeline(b, artist(), plain, kPrompts, kSeeds, cfg);
  EXPECT_EQ(x.training_images, y.training_images);
  ASSERT_EQ(x.images.size(), y.images.size());
  for (std::size_t i = 0; i < x.images.size(); ++i) {
    for (std::size_t j = 0; j < x.images[i].size(); ++j) ASSERT_NEAR(x.images[i].data[j], y.images[i].data[j], 1e-9);
  }
}

TEST(Scenario, NaiveOnCleanDataIsTheBaselinePath) {
  const auto& b = shared_toy();
  const auto cfg = quick_config();
  auto spec = pipeline_for(Method::naive, cfg);
  spec.stream = "baseline";
  const auto direct = run_pipeline(b, artist(), spec, kPrompts, kSeeds, cfg);
  EXPECT_EQ(direct.training_images, artist().images);
  EXPECT_EQ(direct.images.size(), 4u);
}

TEST(Scenario, MethodNamesRoundTrip) {
  for (auto m : kAllMethods) EXPECT_EQ(parse_method(to_string(m)), m);
  EXPECT_EQ(to_string(Method::impress_pp), "impress++");
  EXPECT_EQ(to_string(Method::noisy_upscale), "noisy-upscale");
  EXPECT_THROW(parse_method("dreambooth"), ArgumentError);
}
