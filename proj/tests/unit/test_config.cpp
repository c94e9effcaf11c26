#include <fstream>
#include <set>

#include <gtest/gtest.h>

#include "mimicry/config.hpp"
#include "mimicry/error.hpp"
#include "mimicry/pipeline.hpp"
#include "test_support.hpp"

using namespace mimicry;
using mimicry::testing::TempDir;
using nlohmann::json;

namespace {

RunConfig parse(const json& j) { return j.get<RunConfig>(); }

std::filesystem::path repo_config(const std::string& name) {
  return mimicry::testing::fixture_dir().parent_path() / "configs" / name;
}

}  // namespace

TEST(Config, DefaultsAreThePublishedValues) {
  const RunConfig c;
  EXPECT_EQ(c.backend, "toy");
  EXPECT_DOUBLE_EQ(c.mist.budget, 8.0 / 255.0);
  EXPECT_DOUBLE_EQ(c.mist.step, 1.0 / 255.0);
  EXPECT_EQ(c.mist.iterations, 100);
  EXPECT_DOUBLE_EQ(c.glaze.penalty, 1.0);
  EXPECT_DOUBLE_EQ(c.glaze.target_strength, 0.6);
  EXPECT_EQ(c.anti_db.iterations, 50);
  EXPECT_DOUBLE_EQ(c.anti_db.step, 5e-3);
  EXPECT_EQ(c.anti_db.pgd_steps, 6);
  EXPECT_EQ(c.mimic.finetune.steps, 2000);
  EXPECT_DOUBLE_EQ(c.mimic.finetune.lr, 5e-6);
  EXPECT_DOUBLE_EQ(c.mimic.gaussian_sigma, 0.05);
  EXPECT_DOUBLE_EQ(c.mimic.diffpure_strength, 0.2);
  EXPECT_DOUBLE_EQ(c.mimic.upscale_sigma, 0.1);
  EXPECT_DOUBLE_EQ(c.mimic.negative_strength, 0.5);
  EXPECT_DOUBLE_EQ(c.mimic.guidance, 7.5);
  EXPECT_EQ(c.mimic.impress_pgd.iterations, 400);
  EXPECT_EQ(c.study.quality_controls, 10);
  EXPECT_EQ(c.study.style_controls, 10);
  EXPECT_EQ(c.study.training_pairs, 6);
  EXPECT_EQ(c.study.annotators_per_pair, 5);
  EXPECT_DOUBLE_EQ(c.study.filter_threshold, 0.8);
  EXPECT_EQ(c.study.likert_threshold, 3);
  EXPECT_NO_THROW(validate(c));
}

TEST(Config, JsonRoundTripKeepsEveryField) {
  RunConfig c;
  c.seed = 42;
  c.workers = 3;
  c.toy_artists = {{"a1", "dots", 5}};
  c.mist.iterations = 7;
  c.glaze.similarity_bound = 1e-3;
  c.mimic.inversion.steps = 11;
  c.mimic.post_suffix = ", painterly";
  c.prompts = {"a cat"};
  c.generation_seeds = {1, 2};
  c.study.port = 9999;
  const json j = c;
  const auto back = parse(j);
  EXPECT_EQ(json(back), j);
  EXPECT_EQ(config_hash(back), config_hash(c));
}

TEST(Config, MissingKeysKeepDefaults) {
  const auto c = parse(json{{"seed", 5}, {"mimic", {{"finetune", {{"steps", 10}}}}}});
  EXPECT_EQ(c.seed, 5u);
  EXPECT_EQ(c.mimic.finetune.steps, 10);
  EXPECT_DOUBLE_EQ(c.mimic.finetune.lr, 5e-6);
  EXPECT_EQ(c.mist.iterations, 100);
}

TEST(Config, UnknownKeysAreRejected) {
  EXPECT_THROW(parse(json{{"sed", 1}}), ArgumentError);
  EXPECT_THROW(parse(json{{"mist", {{"budgit", 0.1}}}}), ArgumentError);
  EXPECT_THROW(parse(json{{"mimic", {{"finetune", {{"stpes", 3}}}}}}), ArgumentError);
  EXPECT_THROW(parse(json{{"study", {{"annotators", 3}}}}), ArgumentError);
  EXPECT_THROW(parse(json{{"toy_artists", {{{"id", "a"}, {"style", "dots"}, {"n", 2}}}}}), ArgumentError);
  EXPECT_THROW(parse(json::array()), ArgumentError);
}

TEST(Config, ValidationRejectsBadValues) {
  auto bad = [](auto mutate) {
    RunConfig c;
    mutate(c);
    EXPECT_THROW(validate(c), ArgumentError);
  };
  bad([](RunConfig& c) { c.backend = "gpu"; });
  bad([](RunConfig& c) { c.workers = 0; });
  bad([](RunConfig& c) { c.crop_size = 0; });
  bad([](RunConfig& c) { c.mist.budget = 0.0; });
  bad([](RunConfig& c) { c.mimic.finetune.lr = -1.0; });
  bad([](RunConfig& c) { c.generation_seeds.clear(); });
  bad([](RunConfig& c) { c.study.filter_threshold = 1.5; });
  bad([](RunConfig& c) { c.study.quality_control_sigma = 0.0; });
  bad([](RunConfig& c) { c.study.style_control_strength = 0.0; });
  bad([](RunConfig& c) { c.study.annotators_per_pair = 0; });
  bad([](RunConfig& c) { c.toy_artists = {{"a/b", "dots", 2}}; });
  bad([](RunConfig& c) { c.toy_artists = {{"a", "dots", 2}, {"a", "waves", 2}}; });
  bad([](RunConfig& c) { c.toy_artists = {{"a", "dots", 0}}; });
}

TEST(Config, HashIgnoresWorkersOnly) {
  RunConfig a, b;
  b.workers = 8;
  EXPECT_EQ(config_hash(a), config_hash(b));
  b.seed = 1;
  EXPECT_NE(config_hash(a), config_hash(b));
  b = a;
  b.mimic.gaussian_sigma = 0.06;
  EXPECT_NE(config_hash(a), config_hash(b));
  EXPECT_EQ(hash_hex(0xabc).size(), 16u);
  EXPECT_EQ(hash_hex(0xabc), "0000000000000abc");
}

TEST(Config, LoadSaveAndErrors) {
  TempDir tmp;
  RunConfig c;
  c.seed = 9;
  save_config(tmp / "c.json", c);
  const auto back = load_config(tmp / "c.json");
  EXPECT_EQ(back.seed, 9u);
  EXPECT_EQ(back.base_dir, tmp.path());
  EXPECT_THROW(load_config(tmp / "missing.json"), IoError);
  std::ofstream(tmp / "broken.json") << "{\"seed\": ";
  EXPECT_THROW(load_config(tmp / "broken.json"), ArgumentError);
  std::ofstream(tmp / "invalid.json") << R"({"workers": 0})";
  EXPECT_THROW(load_config(tmp / "invalid.json"), ArgumentError);
}

TEST(Config, ShippedConfigsLoad) {
  for (const char* name : {"toy.json", "smoke.json"}) {
    const auto c = load_config(repo_config(name));
    EXPECT_FALSE(c.toy_artists.empty()) << name;
  }
  EXPECT_EQ(load_config(repo_config("toy.json")).mimic.finetune.steps, 300);
}

TEST(Config, DefaultPromptsMatchFixture) {
  const auto fixture = pipeline::read_prompts(mimicry::testing::fixture_dir() / "prompts.txt");
  EXPECT_EQ(fixture, default_prompts());
  ASSERT_EQ(fixture.size(), 10u);
  EXPECT_EQ(fixture.front(), "a mountain");
  EXPECT_EQ(fixture.back(), "a village in a thunderstorm");
}

TEST(Scenarios, FifteenDistinctScenarios) {
  const auto all = pipeline::all_scenarios();
  ASSERT_EQ(all.size(), 15u);
  std::set<std::string> ids;
  for (const auto& s : all) ids.insert(s.id());
  EXPECT_EQ(ids.size(), 15u);
  EXPECT_EQ(all.front().id(), "anti-db/naive");
  EXPECT_EQ(all.back().id(), "mist/noisy-upscale");
}

TEST(Scenarios, ParsingAcceptsBothSeparatorsAndAliases) {
  for (const auto& s : pipeline::all_scenarios()) EXPECT_EQ(pipeline::parse_scenario(s.id()), s);
  const auto s = pipeline::parse_scenario("mist-enc:noisy-upscale");
  EXPECT_EQ(s.protection, pipeline::Protection::mist);
  EXPECT_EQ(s.method, mimic::Method::noisy_upscale);
  EXPECT_EQ(pipeline::parse_scenario("glaze-like/impress++").id(), "glaze/impress++");
  EXPECT_EQ(pipeline::parse_scenario("aspl:diffpure").id(), "anti-db/diffpure");
  EXPECT_THROW(pipeline::parse_scenario("mist"), ArgumentError);
  EXPECT_THROW(pipeline::parse_scenario("nightshade:naive"), ArgumentError);
  EXPECT_THROW(pipeline::parse_scenario("mist:lora"), ArgumentError);
}

TEST(Scenarios, ImageNamesAndPromptFiles) {
  EXPECT_EQ(pipeline::image_name(0, 0), "p00.png");
  EXPECT_EQ(pipeline::image_name(9, 0), "p09.png");
  EXPECT_EQ(pipeline::image_name(3, 2), "p03_s2.png");
  TempDir tmp;
  std::ofstream(tmp / "p.txt") << "  a cat \n\n\ta dog\n";
  EXPECT_EQ(pipeline::read_prompts(tmp / "p.txt"), (std::vector<std::string>{"a cat", "a dog"}));
  EXPECT_THROW(pipeline::read_prompts(tmp / "none.txt"), IoError);
}

TEST(Scenarios, AdapterBackendIsUnavailable) {
  RunConfig c;
  c.backend = "adapter";
  TempDir tmp;
  EXPECT_THROW(pipeline::load_backend(c, tmp / "x.ckpt"), BackendError);
}

TEST(Scenarios, TreeHashSeesContentAndNames) {
  TempDir tmp;
  std::filesystem::create_directories(tmp / "a/b");
  std::ofstream(tmp / "a/b/x.txt") << "one";
  std::ofstream(tmp / "a/y.txt") << "two";
  const auto h = pipeline::tree_hash(tmp / "a");
  EXPECT_EQ(h, pipeline::tree_hash(tmp / "a"));
  std::ofstream(tmp / "a/y.txt") << "two!";
  EXPECT_NE(pipeline::tree_hash(tmp / "a"), h);
  std::ofstream(tmp / "a/y.txt", std::ios::trunc) << "two";
  EXPECT_EQ(pipeline::tree_hash(tmp / "a"), h);
  std::filesystem::rename(tmp / "a/y.txt", tmp / "a/z.txt");
  EXPECT_NE(pipeline::tree_hash(tmp / "a"), h);
}
