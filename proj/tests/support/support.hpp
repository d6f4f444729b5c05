#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "distill/compiler.hpp"
#include "distill/controller.hpp"
#include "distill/document.hpp"
#include "distill/gateway.hpp"
#include "distill/vision.hpp"

namespace support {

using Rng = std::mt19937_64;

std::filesystem::path fixtures_dir();
std::filesystem::path golden_dir();
std::filesystem::path tools_dir();
std::string read_file(const std::filesystem::path& p);

/// Compares against tests/golden/<name>. With DISTILL_UPDATE_GOLDENS=1 the
/// file is rewritten instead. Returns an empty string on success.
std::string check_golden(const std::string& name, const std::string& actual);

distill::Timestamp epoch_plus(std::int64_t seconds);
distill::Provenance provenance(const std::string& source, std::int64_t t = 0, std::string locator = "");

// --- Random states ---------------------------------------------------------

struct StateShape {
  std::size_t max_observations = 6;
  std::size_t max_entities = 6;
  std::size_t max_relations = 6;
  std::size_t sources = 3;
};

/// A valid fragment. Ids carry `prefix` so fragments never collide unless
/// the caller reuses a prefix on purpose.
distill::ContextState random_state(Rng& rng, const std::string& prefix, const StateShape& shape = {});
distill::CompileInput random_compile_input(Rng& rng);
std::string random_words(Rng& rng, std::size_t min_words, std::size_t max_words);

// --- Reading order ---------------------------------------------------------

struct LayoutFixture {
  std::vector<distill::Line> lines;  // shuffled detector order
  std::vector<int> columns;          // true column per line
  double page_width = 1000;
};

/// One or two text columns, optional indents, a heading and an optional
/// page-number footer.
LayoutFixture random_layout(Rng& rng);

// --- Vision ----------------------------------------------------------------

distill::VisualTokens random_tokens(Rng& rng, std::size_t rows, std::size_t cols, std::size_t dim);
distill::TextEmbedding random_text(Rng& rng, std::size_t dim);

// --- Controller ------------------------------------------------------------

/// A random chain registry with estimates and injected step failures.
struct ChainScenario {
  std::vector<distill::ToolChain> registry;
  std::map<std::string, distill::ChainEstimate> estimates;
  std::set<std::pair<std::string, std::size_t>> failing;  // (chain_id, step index)
  distill::ModalitySet modalities;
  std::string task;
  double q_min = 0.7;
};

ChainScenario random_scenario(Rng& rng);

/// Hooks whose steps fail exactly where the scenario says. Each successful
/// step contributes one observation; the model echoes the chain id.
distill::ExecutionHooks scenario_hooks(const ChainScenario& scenario);

// --- Gateway ---------------------------------------------------------------

distill::GatewayConfig test_config();

struct ScriptedRequest {
  std::string name;
  nlohmann::json body;
};

/// The five end-to-end requests: text, PDF, audio, HTML and a code query.
std::vector<ScriptedRequest> scripted_requests();

nlohmann::json chat_body(const std::string& text,
                         const std::vector<std::pair<std::string, std::string>>& attachments = {},
                         const std::vector<std::string>& urls = {});

}  // namespace support
