#include "support.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "distill/common.hpp"

namespace support {

namespace fs = std::filesystem;
using nlohmann::json;

fs::path fixtures_dir() { return DISTILL_TEST_FIXTURES; }
fs::path golden_dir() { return DISTILL_TEST_GOLDEN; }
fs::path tools_dir() { return DISTILL_TOOLS_DIR; }

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string check_golden(const std::string& name, const std::string& actual) {
  const fs::path path = golden_dir() / name;
  const char* update = std::getenv("DISTILL_UPDATE_GOLDENS");
  if (update != nullptr && std::string(update) == "1") {
    fs::create_directories(path.parent_path());
    std::ofstream(path, std::ios::binary) << actual;
    return {};
  }
  if (!fs::exists(path)) return "missing golden " + path.string();
  const std::string expected = read_file(path);
  if (expected == actual) return {};
  std::size_t at = 0;
  while (at < expected.size() && at < actual.size() && expected[at] == actual[at]) ++at;
  return "golden " + name + " differs at byte " + std::to_string(at) + ": expected '" +
         expected.substr(at, 60) + "' got '" + actual.substr(at, 60) + "'";
}

distill::Timestamp epoch_plus(std::int64_t seconds) { return distill::Timestamp(std::chrono::seconds(seconds)); }

distill::Provenance provenance(const std::string& source, std::int64_t t, std::string locator) {
  distill::Provenance p{source, distill::sha256_hex(source), epoch_plus(t), std::nullopt};
  if (!locator.empty()) p.locator = std::move(locator);
  return p;
}

namespace {

const std::vector<std::string> kVocab = {"red",   "button", "relay", "station", "offline", "signal", "pump",
                                         "valve", "report", "error", "beacon",  "packet",  "alpha",  "delta",
                                         "blue",  "green",  "north", "south",   "timer",   "queue"};

std::size_t pick(Rng& rng, std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); }
double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

}  // namespace

std::string random_words(Rng& rng, std::size_t min_words, std::size_t max_words) {
  const std::size_t n = min_words + pick(rng, max_words - min_words + 1);
  std::string out;
  for (std::size_t i = 0; i < n; ++i) {
    if (i > 0) out += pick(rng, 5) == 0 ? "  " : " ";
    out += kVocab[pick(rng, kVocab.size())];
  }
  return out;
}

distill::ContextState random_state(Rng& rng, const std::string& prefix, const StateShape& shape) {
  using namespace distill;
  ContextState s;
  auto prov = [&] {
    std::vector<Provenance> list{provenance("src" + std::to_string(pick(rng, shape.sources)),
                                            static_cast<std::int64_t>(pick(rng, 4)))};
    if (pick(rng, 4) == 0) list.push_back(provenance("aux" + std::to_string(pick(rng, 2)), 7, "x"));
    return list;
  };
  const std::size_t n_obs = pick(rng, shape.max_observations + 1);
  for (std::size_t i = 0; i < n_obs; ++i) {
    s.observations.push_back({prefix + "o" + std::to_string(i), random_words(rng, 1, 12), 0.0, prov()});
  }
  const std::size_t n_ent = pick(rng, shape.max_entities + 1);
  const std::vector<EntityKind> kinds = {EntityKind::text_span, EntityKind::bounding_region, EntityKind::speaker,
                                         EntityKind::section};
  for (std::size_t i = 0; i < n_ent; ++i) {
    Entity e;
    e.id = prefix + "e" + std::to_string(i);
    e.kind = kinds[pick(rng, kinds.size())];
    if (pick(rng, 3) != 0) e.text = random_words(rng, 1, 5);
    switch (pick(rng, 3)) {
      case 0: {
        const auto a = static_cast<std::int64_t>(pick(rng, 200));
        e.span = CharSpan{a, a + 1 + static_cast<std::int64_t>(pick(rng, 40))};
        break;
      }
      case 1: {
        const double x = uniform(rng, 0, 500);
        const double y = uniform(rng, 0, 500);
        e.region = Box{x, y, x + uniform(rng, 5, 80), y + uniform(rng, 5, 40)};
        break;
      }
      default:
        if (!e.text) e.text = random_words(rng, 1, 3);
    }
    e.confidence = std::round(uniform(rng, 0.0, 1.0) * 100.0) / 100.0;
    if (pick(rng, 3) == 0) e.attributes["lang"] = pick(rng, 2) ? "en" : "de";
    e.provenance = prov();
    s.entities.push_back(std::move(e));
  }
  std::vector<std::string> ids;
  for (const auto& o : s.observations) ids.push_back(o.id);
  for (const auto& e : s.entities) ids.push_back(e.id);
  if (ids.size() >= 2) {
    const std::size_t n_rel = pick(rng, shape.max_relations + 1);
    const std::vector<RelationKind> rk = {RelationKind::follows, RelationKind::contains, RelationKind::refers_to};
    for (std::size_t i = 0; i < n_rel; ++i) {
      const std::size_t a = pick(rng, ids.size());
      std::size_t b = pick(rng, ids.size() - 1);
      if (b >= a) ++b;
      s.relations.push_back({prefix + "r" + std::to_string(i), rk[pick(rng, rk.size())], ids[a], ids[b], 0.0, prov()});
    }
  }
  rebuild_provenance_index(s);
  return s;
}

distill::CompileInput random_compile_input(Rng& rng) {
  distill::CompileInput in;
  const std::size_t n = 1 + pick(rng, 4);
  for (std::size_t i = 0; i < n; ++i) {
    in.fragments.push_back({"f" + std::to_string(i), random_state(rng, "f" + std::to_string(i) + ".")});
  }
  in.query = random_words(rng, 0, 4);
  in.budgets = {pick(rng, 80), pick(rng, 60), pick(rng, 40), pick(rng, 30)};
  in.floors.fallback = pick(rng, 2) ? 0.0 : 0.3;
  if (pick(rng, 2)) in.floors.per_kind[distill::EntityKind::speaker] = 0.5;
  return in;
}

LayoutFixture random_layout(Rng& rng) {
  LayoutFixture f;
  const bool two = pick(rng, 2) == 1;
  const double w = f.page_width;
  const double font = 10.0 + static_cast<double>(pick(rng, 4));
  const double leading = font + 6.0 + static_cast<double>(pick(rng, 8));
  const std::vector<std::pair<double, double>> cols =
      two ? std::vector<std::pair<double, double>>{{60, 470}, {530, 940}} : std::vector<std::pair<double, double>>{{60, 940}};
  int serial = 0;
  const double top = 80 + uniform(rng, 0, 40);
  for (std::size_t c = 0; c < cols.size(); ++c) {
    const std::size_t n = 3 + pick(rng, 10);
    double y = top;
    for (std::size_t i = 0; i < n; ++i) {
      const double indent = (i == 0 || pick(rng, 4) != 0) ? 0.0 : 20.0;
      const double x0 = cols[c].first + indent;
      const double x1 = cols[c].second - (i + 1 == n ? uniform(rng, 50, 200) : uniform(rng, 0, 30));
      distill::Line line;
      line.text = "c" + std::to_string(c) + "l" + std::to_string(serial++) + " " + random_words(rng, 2, 6);
      line.box = {x0, y, x1, y + font};
      line.quad = distill::quad_from_box(line.box);
      line.font_height = font;
      f.lines.push_back(line);
      f.columns.push_back(static_cast<int>(c));
      y += leading;
    }
  }
  if (pick(rng, 3) == 0) {
    distill::Line footer;
    footer.text = "page " + std::to_string(1 + pick(rng, 9));
    footer.box = {480, 1350, 520, 1350 + font};
    footer.quad = distill::quad_from_box(footer.box);
    footer.font_height = font;
    f.lines.push_back(footer);
    f.columns.push_back(static_cast<int>(cols.size()));  // marginalia reads last
  }
  std::vector<std::size_t> order(f.lines.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  LayoutFixture shuffled;
  shuffled.page_width = w;
  for (auto i : order) {
    shuffled.lines.push_back(f.lines[i]);
    shuffled.columns.push_back(f.columns[i]);
  }
  return shuffled;
}

distill::VisualTokens random_tokens(Rng& rng, std::size_t rows, std::size_t cols, std::size_t dim) {
  distill::VisualTokens t;
  t.rows = rows;
  t.cols = cols;
  t.dim = dim;
  t.patch_size = 16;
  t.image_width = static_cast<double>(cols) * 16;
  t.image_height = static_cast<double>(rows) * 16;
  std::normal_distribution<double> n(0.0, 1.0);
  for (std::size_t i = 0; i < rows * cols * dim; ++i) t.data.push_back(n(rng));
  return t;
}

distill::TextEmbedding random_text(Rng& rng, std::size_t dim) {
  distill::TextEmbedding e;
  std::normal_distribution<double> n(0.0, 1.0);
  for (std::size_t i = 0; i < dim; ++i) e.vector.push_back(n(rng));
  e.prompt = "target";
  e.temperature = uniform(rng, 0.5, 4.0);
  return e;
}

ChainScenario random_scenario(Rng& rng) {
  using distill::Modality;
  using distill::PrimitiveKind;
  static const std::vector<Modality> kModalities{Modality::text, Modality::image, Modality::audio, Modality::document,
                                                 Modality::url};
  static const std::vector<PrimitiveKind> kSteps{PrimitiveKind::query_index, PrimitiveKind::fetch_parse,
                                                 PrimitiveKind::run_perception, PrimitiveKind::run_sandbox};
  static const std::vector<std::string> kTasks{"general", "code", "transcribe"};
  ChainScenario sc;
  sc.task = kTasks[pick(rng, kTasks.size())];
  for (auto m : kModalities) {
    if (uniform(rng, 0, 1) < 0.6) sc.modalities.insert(m);
  }
  sc.q_min = 0.25 * static_cast<double>(pick(rng, 4)) + 0.25;
  const std::size_t n = 1 + pick(rng, 6);
  for (std::size_t c = 0; c < n; ++c) {
    distill::ToolChain chain;
    chain.chain_id = "chain" + std::to_string(pick(rng, 100)) + "_" + std::to_string(c);
    for (std::size_t s = pick(rng, 5); s > 0; --s) chain.steps.push_back({kSteps[pick(rng, kSteps.size())], json::object()});
    chain.steps.push_back({PrimitiveKind::call_llm, json::object()});
    for (auto m : kModalities) {
      if (uniform(rng, 0, 1) < 0.2) chain.required_modalities.insert(m);
    }
    chain.tags = {uniform(rng, 0, 1) < 0.3 ? std::string("*") : kTasks[pick(rng, kTasks.size())]};
    for (std::size_t s = 0; s < chain.steps.size(); ++s) {
      const double p = chain.steps[s].kind == PrimitiveKind::call_llm ? 0.1 : 0.2;
      if (uniform(rng, 0, 1) < p) sc.failing.insert({chain.chain_id, s});
    }
    // Coarse grids make ties on every sort key likely.
    sc.estimates[chain.chain_id] = {chain.chain_id, 0.25 * static_cast<double>(pick(rng, 5)),
                                    static_cast<double>(1 + pick(rng, 3)), 100.0 * static_cast<double>(1 + pick(rng, 3))};
    sc.registry.push_back(std::move(chain));
  }
  return sc;
}

distill::ExecutionHooks scenario_hooks(const ChainScenario& scenario) {
  distill::ExecutionHooks h;
  const auto failing = scenario.failing;
  h.run_step = [failing](const distill::ToolChain& chain, std::size_t i, const distill::Primitive&,
                         std::chrono::milliseconds) {
    if (failing.contains({chain.chain_id, i})) throw distill::Error(distill::ErrorCode::unavailable, "injected");
    distill::ContextState s;
    s.observations.push_back({chain.chain_id + ".s" + std::to_string(i), "step output " + std::to_string(i), 0.0,
                              {provenance(chain.chain_id)}});
    return std::vector<distill::Fragment>{{chain.chain_id + "#" + std::to_string(i), s}};
  };
  h.compile = [](const std::vector<distill::Fragment>& fragments) {
    distill::CompileInput in;
    in.fragments = fragments;
    in.budgets = {200, 200, 200, 200};
    return distill::compile_context(in);
  };
  h.render = [](const distill::ContextState& s) { return distill::render_prompt(s, "q", {200, 200, 200, 200}); };
  h.call_llm = [failing](const distill::ToolChain& chain, const distill::Primitive&, const std::string& prompt,
                         std::chrono::milliseconds) {
    if (failing.contains({chain.chain_id, chain.steps.size() - 1})) {
      throw distill::Error(distill::ErrorCode::unavailable, "injected");
    }
    return chain.chain_id + " " + distill::sha256_hex(prompt).substr(0, 8);
  };
  return h;
}

distill::GatewayConfig test_config() { return distill::load_config(fixtures_dir() / "gateway" / "config.json"); }

json chat_body(const std::string& text, const std::vector<std::pair<std::string, std::string>>& attachments,
               const std::vector<std::string>& urls) {
  json message = {{"role", "user"}, {"content", text}};
  if (!attachments.empty()) {
    json list = json::array();
    for (const auto& [name, bytes] : attachments) {
      list.push_back({{"name", name}, {"encoding", "base64"}, {"data", distill::base64_encode(bytes)}});
    }
    message["attachments"] = list;
  }
  if (!urls.empty()) message["urls"] = urls;
  return {{"model", "distill-1"},
          {"messages", json::array({{{"role", "system"}, {"content", "You are concise."}}, message})}};
}

std::vector<ScriptedRequest> scripted_requests() {
  const fs::path media = fixtures_dir() / "media";
  return {
      {"text", chat_body("What is the capital of France?")},
      {"pdf", chat_body("Summarize the failure handling section.", {{"report.pdf", read_file(media / "report.pdf")}})},
      {"audio", chat_body("Who asked about the inspection?", {{"meeting.wav", read_file(media / "meeting.wav")}})},
      {"html", chat_body("How do I restart a station?", {{"guide.html", read_file(media / "guide.html")}})},
      {"code", chat_body("Why does this print the wrong value?\n```python\nprint(sum([1, 2]) / 3)\n```")},
  };
}

}  // namespace support
