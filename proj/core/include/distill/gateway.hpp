#pragma once

#include <atomic>
#include <chrono>
#include <cstddef>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "distill/adapters.hpp"
#include "distill/audio.hpp"
#include "distill/compiler.hpp"
#include "distill/controller.hpp"
#include "distill/document.hpp"
#include "distill/ingress.hpp"
#include "distill/retrieval.hpp"
#include "distill/schema.hpp"

namespace distill {

struct SandboxLimits {
  int wall_ms = 2000;
  std::size_t output_bytes = 4096;
};

/// An adapter entry from the config file.
struct AdapterSpec {
  AdapterDescriptor descriptor;
  /// in_process_mock only: {"kind": "echo"|"table"|"mock_llm"|"reference"|"sandbox_echo", ...}.
  nlohmann::json mock;
};

struct IndexSpec {
  IndexKind kind = IndexKind::docs;
  std::optional<std::filesystem::path> dump;      // load a saved index
  std::optional<std::filesystem::path> build_from;  // or index a directory at startup
};

struct GatewayConfig {
  std::string model = "distill-1";
  std::optional<Timestamp> fixed_clock;
  double q_min = 0.7;
  int deadline_ms = 10000;
  std::size_t top_k = 5;
  std::size_t max_block_tokens = 64;
  TokenBudget budgets{400, 300, 150, 120};
  ConfidenceFloors floors;
  std::vector<SafetyRule> safety_rules;
  std::vector<TaskRule> task_rules;
  std::vector<AdapterSpec> adapters;
  std::string llm_adapter;
  std::vector<ToolChain> chains;
  std::map<std::string, ChainEstimate> estimates;
  std::vector<IndexSpec> indexes;
  DocumentThresholds document;
  AudioPipelineConfig audio;
  double region_threshold = 0.5;
  SandboxLimits sandbox;
  std::optional<std::filesystem::path> trace_log;
};

/// {"default": x, "<entity kind>": y, ...}; throws Error(config).
ConfidenceFloors parse_floors(const nlohmann::json& j);

/// Parses and validates a config document. Relative paths resolve against
/// `base_dir`. Throws Error(config) with the offending field.
GatewayConfig parse_config(const nlohmann::json& j, const std::filesystem::path& base_dir);
/// Reads `path`, or $INTERFAZE_CONFIG when `path` is empty.
GatewayConfig load_config(const std::filesystem::path& path);

/// Indexes every regular file under `dir` (sorted by path). HTML files are
/// split into DOM blocks, other files by segment_text; segment ids start with
/// the relative path.
SegmentIndex build_index_from_directory(IndexKind kind, const std::filesystem::path& dir, std::size_t max_block_tokens,
                                        Timestamp timestamp);

/// "ANSWER(" + first 16 hex digits of sha256(prompt) + ")".
std::string mock_llm_answer(std::string_view prompt);

/// Builds the handler for an in-process mock spec.
MockHandler make_mock_handler(const nlohmann::json& spec);

/// Fenced code block contents (```lang\n...```), if the text has one.
std::optional<std::string> extract_fenced_code(std::string_view text);

/// Cuts `text` to at most `limit` bytes on a UTF-8 boundary.
std::string truncate_utf8(std::string_view text, std::size_t limit);

/// Chat-completions body to a request. Throws Error(protocol).
Request parse_completion_request(const nlohmann::json& body);

struct CompletionResult {
  int http_status = 200;
  nlohmann::json body;
  /// Populated on success; the exact prompt the model received.
  std::string prompt;
};

/// Wires ingress, controller, compiler and adapters. Thread safe: requests
/// are handled concurrently over shared immutable config and indexes.
class Gateway {
 public:
  explicit Gateway(GatewayConfig config);

  const GatewayConfig& config() const { return config_; }
  AdapterRegistry& adapters() { return registry_; }
  const AdapterRegistry& adapters() const { return registry_; }

  /// Replaces the adapter with the same id (tests use this to wrap or inject).
  void replace_adapter(std::shared_ptr<AdapterClient> client);

  CompletionResult handle_completion(const nlohmann::json& body);
  /// Same pipeline for an already-built request (CLI `run`).
  CompletionResult handle_request(Request request, const nlohmann::json& options = nlohmann::json::object());

  const SegmentIndex* standing_index(IndexKind kind) const;

 private:
  std::string next_request_id();
  void log_trace(const Trace& trace, const std::string& request_id);

  GatewayConfig config_;
  Clock clock_;
  AdapterRegistry registry_;
  std::map<IndexKind, SegmentIndex> indexes_;
  std::atomic<std::size_t> counter_{0};
  std::mutex log_mutex_;
};

}  // namespace distill
