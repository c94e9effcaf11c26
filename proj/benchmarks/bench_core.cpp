#include <unistd.h>

#include <filesystem>
#include <random>

#include <benchmark/benchmark.h>

#include "mimicry/evalkit.hpp"
#include "mimicry/guidance.hpp"
#include "mimicry/protect.hpp"
#include "mimicry/purify.hpp"
#include "mimicry/studyd.hpp"
#include "mimicry/toy_backend.hpp"
#include "mimicry/toy_data.hpp"

using namespace mimicry;
namespace fs = std::filesystem;

namespace {

// Small toy model, trained once per process.
const toy::ToyBackend& bench_toy() {
  static const toy::ToyBackend b = [] {
    toy::ToyConfig cfg;
    cfg.train_steps = 300;
    cfg.hidden = 64;
    cfg.recon_threshold = 1.0;
    cfg.denoiser_threshold = 10.0;
    std::vector<std::string> styles(toy::kStyles.begin(), toy::kStyles.end());
    return toy::train_toy_backend(cfg, toy::make_corpus(styles, 10, cfg.image_side, 1));
  }();
  return b;
}

std::vector<std::string> scenarios() {
  std::vector<std::string> out;
  for (const char* p : {"anti-db", "glaze", "mist"}) {
    for (const char* m : {"naive", "gaussian", "impress++", "diffpure", "noisy-upscale"}) {
      out.push_back(std::string(p) + "/" + m);
    }
  }
  return out;
}

evalkit::StudyPlan full_plan() {
  evalkit::StudyRequest req;
  req.artist_id = "A";
  req.scenarios = scenarios();
  for (int i = 0; i < 10; ++i) req.prompts.push_back("prompt " + std::to_string(i));
  return evalkit::build_study(req);
}

std::vector<evalkit::AnnotationRecord> full_records(const evalkit::StudyPlan& plan) {
  std::mt19937_64 rng(3);
  std::vector<evalkit::AnnotationRecord> out;
  for (int a = 0; a < 5; ++a) {
    for (const auto& p : plan.pairs) {
      for (auto q : {evalkit::Question::quality, evalkit::Question::style}) {
        evalkit::AnnotationRecord r;
        r.annotator_id = "ann" + std::to_string(a);
        r.plan_id = plan.plan_id;
        r.pair_id = p.pair_id;
        r.question = q;
        r.choice = rng() & 1 ? evalkit::Side::left : evalkit::Side::right;
        out.push_back(r);
      }
    }
  }
  return out;
}

void BM_ForwardDiffuse(benchmark::State& state) {
  const auto s = NoiseSchedule::cosine(100);
  const std::vector<double> x(static_cast<std::size_t>(state.range(0)), 0.5);
  std::uint64_t seed = 0;
  for (auto _ : state) benchmark::DoNotOptimize(forward_diffuse(x, 50, s, ++seed));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ForwardDiffuse)->Arg(1 << 12)->Arg(1 << 16);

void BM_ToyEncodeDecode(benchmark::State& state) {
  const auto& b = bench_toy();
  const auto img = toy::render("waves", "circle", 32, 1);
  for (auto _ : state) benchmark::DoNotOptimize(b.decode(b.encode(img)));
}
BENCHMARK(BM_ToyEncodeDecode);

void BM_ToySample(benchmark::State& state) {
  const auto& b = bench_toy();
  std::uint64_t seed = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(sample(b, "a dots circle", static_cast<int>(state.range(0)), 7.5, std::nullopt, ++seed));
  }
}
BENCHMARK(BM_ToySample)->Arg(10)->Arg(50)->Unit(benchmark::kMillisecond);

void BM_EncoderAttack(benchmark::State& state) {
  const auto& b = bench_toy();
  const auto ds = toy::make_artist("A", "plain", 1, 32, 2);
  protect::PgdConfig cfg;
  cfg.iterations = static_cast<int>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(protect::encoder_attack_pgd(b, ds.images, toy::checker_target(32), cfg));
}
BENCHMARK(BM_EncoderAttack)->Arg(10)->Arg(100)->Unit(benchmark::kMillisecond);

void BM_NoisyUpscale(benchmark::State& state) {
  const auto& b = bench_toy();
  const auto img = toy::render("stripes", "square", 32, 4);
  std::uint64_t seed = 0;
  for (auto _ : state) benchmark::DoNotOptimize(purify::noisy_upscale(b, img, 0.1, 1.0, ++seed));
}
BENCHMARK(BM_NoisyUpscale);

void BM_SuccessRateFullStudy(benchmark::State& state) {
  const auto plan = full_plan();
  const auto records = full_records(plan);
  const auto scen = scenarios();
  for (auto _ : state) {
    for (const auto& s : scen) {
      benchmark::DoNotOptimize(evalkit::success_rate(records, plan, "A", s, evalkit::QuestionMode::avg));
    }
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(records.size()));
}
BENCHMARK(BM_SuccessRateFullStudy)->Unit(benchmark::kMillisecond);

void BM_StudydSubmit(benchmark::State& state) {
  const auto plan = full_plan();
  const auto dir = fs::temp_directory_path() / ("mimicry-bench-" + std::to_string(::getpid()));
  studyd::Options opts;
  opts.fsync = state.range(0) != 0;
  nlohmann::json answers;
  for (const char* q : evalkit::kQuestionOrder) answers[q] = "left";
  int annotator = 0;
  std::size_t cursor = plan.pairs.size();
  std::vector<std::size_t> order;
  std::string who;
  fs::remove_all(dir);
  studyd::Service svc({plan}, dir, opts);
  for (auto _ : state) {
    if (cursor >= order.size()) {
      state.PauseTiming();
      who = "b" + std::to_string(annotator++);
      svc.start_session(who, {1920, 1080});
      order = plan.order_for(who);
      cursor = 0;
      state.ResumeTiming();
    }
    const auto& p = plan.pairs[order[cursor]];
    auto a = answers;
    if (p.kind == evalkit::PairKind::training) a[evalkit::kQuestionOrder[p.training_question]] = evalkit::to_string(p.ground_truth);
    svc.submit_answer(who, p.pair_id, a);
    ++cursor;
  }
  fs::remove_all(dir);
}
BENCHMARK(BM_StudydSubmit)->Arg(0)->Arg(1)->ArgName("fsync");

}  // namespace

BENCHMARK_MAIN();
