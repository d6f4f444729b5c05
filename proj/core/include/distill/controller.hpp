#pragma once

#include <chrono>
#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "distill/compiler.hpp"
#include "distill/ingress.hpp"
#include "distill/schema.hpp"

namespace distill {

enum class PrimitiveKind { query_index, fetch_parse, run_perception, run_sandbox, call_llm };

std::string_view to_string(PrimitiveKind kind);
PrimitiveKind parse_primitive_kind(std::string_view text);

struct Primitive {
  PrimitiveKind kind = PrimitiveKind::call_llm;
  nlohmann::json params = nlohmann::json::object();
};

struct ToolChain {
  std::string chain_id;
  std::vector<Primitive> steps;
  ModalitySet required_modalities;
  /// Task types this chain serves; "*" serves every task.
  std::vector<std::string> tags;
};

/// Throws Error(config) unless the chain has an id and ends in its only
/// call_llm step.
void validate(const ToolChain& chain);

struct ChainEstimate {
  std::string chain_id;
  double quality = 0.0;
  double cost = 0.0;
  double latency_ms = 0.0;
};

/// A rule matches when every condition it sets holds.
struct TaskRule {
  std::string task;
  std::optional<std::string> query_pattern;  // ECMAScript regex, case-insensitive
  std::optional<Modality> modality;
};

/// First matching rule wins; "general" when none does.
std::string predict_task_type(const IngressSummary& summary, std::string_view query, const std::vector<TaskRule>& rules);

/// Chains whose modalities are available and whose tags cover the task, in
/// registry order. Throws Error(no_feasible_chain) when nothing qualifies.
std::vector<ToolChain> enumerate_chains(std::string_view task_type, const ModalitySet& modalities,
                                        const std::vector<ToolChain>& registry);

struct Selection {
  std::vector<ToolChain> fallbacks;
  /// No chain met q_min; ordered by quality instead.
  bool degraded = false;
};

/// Feasible chains (quality >= q_min) by (cost, latency, id). When none is
/// feasible, every candidate by (quality desc, cost asc, id). Throws
/// Error(config) if a candidate has no estimate.
Selection select_chain(const std::vector<ToolChain>& candidates, const std::map<std::string, ChainEstimate>& estimates,
                       double q_min);

struct StepRecord {
  std::string chain_id;
  std::size_t step_index = 0;
  PrimitiveKind kind = PrimitiveKind::call_llm;
  std::string label;
  bool ok = false;
  std::string outcome;  // "OK" or an error code
  std::string message;
  std::chrono::microseconds duration{0};
};

struct Trace {
  std::vector<StepRecord> steps;
};

/// Runs one non-LLM primitive and returns the fragments it produced. Throws
/// distill::Error on failure. `budget` is the time left before the deadline.
using StepRunner = std::function<std::vector<Fragment>(const ToolChain& chain, std::size_t step_index,
                                                       const Primitive& step, std::chrono::milliseconds budget)>;
/// Compiles a chain's fragments into the state handed to the model.
using StateCompiler = std::function<ContextState(const std::vector<Fragment>& fragments)>;
/// Renders the compiled state into the only text the model receives.
using PromptRenderer = std::function<std::string(const ContextState& state)>;
/// Calls the configured model with the rendered prompt for the chain's
/// call_llm step.
using LlmCaller = std::function<std::string(const ToolChain& chain, const Primitive& step, const std::string& prompt,
                                            std::chrono::milliseconds budget)>;

struct ExecutionHooks {
  StepRunner run_step;
  StateCompiler compile;
  PromptRenderer render;
  LlmCaller call_llm;
};

struct ExecutionFailure {
  ErrorCode code = ErrorCode::chains_exhausted;
  std::string message;
};

struct ExecutionResult {
  std::optional<std::string> answer;
  std::string chain_id;
  ContextState state;  // best effort on failure
  std::string prompt;
  Trace trace;
  std::optional<ExecutionFailure> error;
};

/// Tries each chain in order; a failing step aborts its chain and moves to the
/// next. Consecutive run_perception steps run concurrently. Compilation and
/// rendering happen right before the call_llm step. Past the deadline the
/// result carries DEADLINE; after the last chain fails, CHAINS_EXHAUSTED.
ExecutionResult execute_chain(const std::vector<ToolChain>& fallbacks, const ExecutionHooks& hooks,
                              std::chrono::milliseconds deadline);

/// One entry per step without timings: chain, step, kind, label, outcome.
nlohmann::json trace_summary(const Trace& trace);
/// One log line per step, with durations.
std::string trace_log_lines(const Trace& trace, std::string_view request_id);

nlohmann::json to_json(const ToolChain& chain);
ToolChain tool_chain_from_json(const nlohmann::json& j);
ChainEstimate chain_estimate_from_json(const nlohmann::json& j);
TaskRule task_rule_from_json(const nlohmann::json& j);
Modality parse_modality(std::string_view text);

}  // namespace distill
