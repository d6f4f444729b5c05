#include <benchmark/benchmark.h>

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "distill/audio.hpp"
#include "distill/compiler.hpp"
#include "distill/document.hpp"
#include "distill/retrieval.hpp"
#include "distill/vision.hpp"

using namespace distill;

namespace {

const std::vector<std::string> kVocab = {"relay", "station", "frame", "buffer", "offline", "beacon", "packet",
                                         "hop",   "invoice", "total", "due",    "schedule", "inspection", "link"};

std::string words(std::mt19937_64& rng, std::size_t n) {
  std::uniform_int_distribution<std::size_t> pick(0, kVocab.size() - 1);
  std::string out;
  for (std::size_t i = 0; i < n; ++i) out += (i ? " " : "") + kVocab[pick(rng)];
  return out;
}

Provenance prov(const std::string& source) { return {source, std::string(64, 'a'), Timestamp{}, std::nullopt}; }

CompileInput compile_input(std::size_t items) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0, 1);
  CompileInput in;
  in.query = "when is the invoice total due";
  in.budgets = {400, 300, 150, 120};
  for (std::size_t f = 0; f < 4; ++f) {
    ContextState s;
    const std::string src = "src" + std::to_string(f);
    s.provenance_index[src] = prov(src);
    for (std::size_t i = 0; i < items; ++i) {
      const std::string id = "f" + std::to_string(f) + "o" + std::to_string(i);
      s.observations.push_back({id, words(rng, 12), u(rng), {prov(src)}});
      Entity e;
      e.id = "f" + std::to_string(f) + "e" + std::to_string(i);
      e.text = words(rng, 3);
      e.span = CharSpan{static_cast<std::int64_t>(i * 10), static_cast<std::int64_t>(i * 10 + 8)};
      e.confidence = u(rng);
      e.provenance = {prov(src)};
      s.entities.push_back(std::move(e));
      if (i > 0) {
        s.relations.push_back({"f" + std::to_string(f) + "r" + std::to_string(i), RelationKind::follows, id,
                               "f" + std::to_string(f) + "o" + std::to_string(i - 1), 0.0, {prov(src)}});
      }
    }
    in.fragments.push_back({src, std::move(s)});
  }
  return in;
}

void BM_CompileContext(benchmark::State& state) {
  const auto in = compile_input(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(compile_context(in));
}
BENCHMARK(BM_CompileContext)->Arg(16)->Arg(64)->Arg(256);

void BM_Bm25Search(benchmark::State& state) {
  std::mt19937_64 rng(11);
  std::vector<PageSegment> segments;
  for (std::int64_t i = 0; i < state.range(0); ++i) {
    PageSegment s;
    s.segment_id = "doc#b" + std::to_string(i);
    s.block_index = static_cast<std::size_t>(i);
    s.text = words(rng, 40);
    s.provenance = prov("doc");
    segments.push_back(std::move(s));
  }
  const auto index = build_index(IndexKind::docs, segments);
  for (auto _ : state) benchmark::DoNotOptimize(search(index, "offline relay beacon schedule", 5));
}
BENCHMARK(BM_Bm25Search)->Arg(100)->Arg(1000)->Arg(10000);

void BM_ReadingOrder(benchmark::State& state) {
  std::mt19937_64 rng(13);
  std::vector<Line> lines;
  for (std::int64_t i = 0; i < state.range(0); ++i) {
    const double x = (i % 2) ? 540.0 : 60.0;
    const double y = 20.0 * static_cast<double>(i / 2);
    Line l;
    l.text = "line " + std::to_string(i);
    l.box = {x, y, x + 400, y + 12};
    l.quad = quad_from_box(l.box);
    l.font_height = 12;
    lines.push_back(std::move(l));
  }
  std::shuffle(lines.begin(), lines.end(), rng);
  for (auto _ : state) benchmark::DoNotOptimize(reading_order(lines, 1000));
}
BENCHMARK(BM_ReadingOrder)->Arg(20)->Arg(80)->Arg(200);

void BM_LogMel(benchmark::State& state) {
  const auto cfg = make_mel_config();
  std::vector<double> s(static_cast<std::size_t>(state.range(0)) * 16000);
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = 0.3 * std::sin(2 * M_PI * 440.0 * static_cast<double>(i) / 16000);
  const Waveform wave{s, 16000};
  for (auto _ : state) benchmark::DoNotOptimize(log_mel(wave, cfg));
}
BENCHMARK(BM_LogMel)->Arg(1)->Arg(10)->Unit(benchmark::kMillisecond);

void BM_RelevanceAndRegions(benchmark::State& state) {
  std::mt19937_64 rng(17);
  std::normal_distribution<double> n(0, 1);
  const auto side = static_cast<std::size_t>(state.range(0));
  VisualTokens tokens{side, side, 64, std::vector<double>(side * side * 64)};
  for (auto& x : tokens.data) x = n(rng);
  TextEmbedding text{std::vector<double>(64), "shelf", 1.0};
  for (auto& x : text.vector) x = n(rng);
  for (auto _ : state) benchmark::DoNotOptimize(group_regions(relevance_map(tokens, text)));
}
BENCHMARK(BM_RelevanceAndRegions)->Arg(16)->Arg(32)->Arg(64);

}  // namespace

BENCHMARK_MAIN();
