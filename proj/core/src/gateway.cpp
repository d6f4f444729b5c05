#include "distill/gateway.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <regex>
#include <set>
#include <sstream>

#include "distill/vision.hpp"
#include "distill/web.hpp"

namespace distill {

using nlohmann::json;
namespace fs = std::filesystem;

// --- Small helpers -----------------------------------------------------------

std::string mock_llm_answer(std::string_view prompt) { return "ANSWER(" + sha256_hex(prompt).substr(0, 16) + ")"; }

std::optional<std::string> extract_fenced_code(std::string_view text) {
  const auto open = text.find("```");
  if (open == std::string_view::npos) return std::nullopt;
  auto body = text.find('\n', open + 3);
  if (body == std::string_view::npos) return std::nullopt;
  ++body;
  const auto close = text.find("```", body);
  if (close == std::string_view::npos) return std::nullopt;
  std::string code(text.substr(body, close - body));
  if (!code.empty() && code.back() == '\n') code.pop_back();
  return code;
}

std::string truncate_utf8(std::string_view text, std::size_t limit) {
  if (text.size() <= limit) return std::string(text);
  std::size_t cut = limit;
  // Back off over continuation bytes so a code point is never split.
  while (cut > 0 && (static_cast<unsigned char>(text[cut]) & 0xC0) == 0x80) --cut;
  return std::string(text.substr(0, cut));
}

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error(ErrorCode::config, "cannot read '" + p.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json_file(const fs::path& p) {
  try {
    return json::parse(read_file(p));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::config, "'" + p.string() + "' is not valid JSON: " + e.what());
  }
}

void prefix_ids(ContextState& s, const std::string& prefix) {
  for (auto& o : s.observations) o.id = prefix + o.id;
  for (auto& e : s.entities) e.id = prefix + e.id;
  for (auto& r : s.relations) {
    r.id = prefix + r.id;
    r.subject = prefix + r.subject;
    r.object = prefix + r.object;
  }
}

void append_state(ContextState& into, ContextState from) {
  for (auto& o : from.observations) into.observations.push_back(std::move(o));
  for (auto& e : from.entities) into.entities.push_back(std::move(e));
  for (auto& r : from.relations) into.relations.push_back(std::move(r));
}

Fragment make_fragment(std::string name, ContextState state) {
  rebuild_provenance_index(state);
  return {std::move(name), std::move(state)};
}

}  // namespace

// --- Mock handlers -----------------------------------------------------------

MockHandler make_mock_handler(const json& spec) {
  const std::string kind = spec.value("kind", std::string{});
  if (kind == "echo") return echo_handler();
  if (kind == "reference") return reference_handler();
  if (kind == "table") return table_handler(spec);
  if (kind == "mock_llm") {
    return [](const AdapterRequest& r) -> json {
      if (r.op != "complete") throw Error(ErrorCode::unsupported, "unsupported op '" + r.op + "'");
      return {{"text", mock_llm_answer(r.payload.at("prompt").get<std::string>())}};
    };
  }
  if (kind == "sandbox_echo") {
    return [](const AdapterRequest& r) -> json {
      if (r.op != "run") throw Error(ErrorCode::unsupported, "unsupported op '" + r.op + "'");
      return {{"stdout", r.payload.at("code").get<std::string>()}, {"exit_status", 0}};
    };
  }
  throw Error(ErrorCode::config, "unknown mock kind '" + kind + "'");
}

// --- Config ------------------------------------------------------------------

namespace {

template <typename T>
T field(const json& j, const char* key, T fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw Error(ErrorCode::config, where + "." + key + " has the wrong type");
  }
}

/// Inlines "file" and per-entry "result_file" references of a table mock.
json resolve_table(json spec, const fs::path& base) {
  if (spec.contains("file")) {
    json loaded = read_json_file(base / spec["file"].get<std::string>());
    const fs::path table_dir = (base / spec["file"].get<std::string>()).parent_path();
    loaded["kind"] = "table";
    return resolve_table(std::move(loaded), table_dir);
  }
  // "result_file" loads the result from disk; "result_key" nests it one level.
  auto inline_result = [&](json& entry) {
    if (!entry.is_object() || !entry.contains("result_file")) return;
    json loaded = read_json_file(base / entry["result_file"].get<std::string>());
    if (entry.contains("result_key")) {
      entry["result"] = json{{entry["result_key"].get<std::string>(), std::move(loaded)}};
      entry.erase("result_key");
    } else {
      entry["result"] = std::move(loaded);
    }
    entry.erase("result_file");
  };
  if (spec.contains("entries")) {
    for (auto& entry : spec["entries"]) inline_result(entry);
  }
  if (spec.contains("default")) inline_result(spec["default"]);
  return spec;
}

AdapterSpec parse_adapter(const json& j, const fs::path& base, std::size_t index) {
  const std::string where = "adapters[" + std::to_string(index) + "]";
  if (!j.is_object()) throw Error(ErrorCode::config, where + " must be an object");
  AdapterSpec spec;
  auto& d = spec.descriptor;
  d.adapter_id = field<std::string>(j, "id", "", where);
  if (d.adapter_id.empty()) throw Error(ErrorCode::config, where + ".id is required");
  const std::string w = "adapter '" + d.adapter_id + "'";
  try {
    d.tool = parse_tool_kind(field<std::string>(j, "tool", "", w));
    d.transport = parse_transport_kind(field<std::string>(j, "transport", "in_process_mock", w));
  } catch (const Error& e) {
    throw Error(ErrorCode::config, w + ": " + e.what());
  }
  d.timeout_ms = field<int>(j, "timeout_ms", d.timeout_ms, w);
  d.batch_max = field<std::size_t>(j, "batch_max", d.batch_max, w);
  d.cacheable = field<bool>(j, "cacheable", d.cacheable, w);
  d.cache_capacity = field<std::size_t>(j, "cache_capacity", d.cache_capacity, w);
  d.command = field<std::vector<std::string>>(j, "command", {}, w);
  d.host = field<std::string>(j, "host", d.host, w);
  d.port = field<int>(j, "port", d.port, w);
  try {
    validate(d);
  } catch (const Error& e) {
    throw Error(ErrorCode::config, w + ": " + e.what());
  }
  if (d.transport == TransportKind::in_process_mock) {
    if (!j.contains("mock") || !j["mock"].is_object()) {
      throw Error(ErrorCode::config, w + ": in_process_mock needs a \"mock\" object");
    }
    spec.mock = j["mock"];
    if (spec.mock.value("kind", "") == "table") spec.mock = resolve_table(spec.mock, base);
    make_mock_handler(spec.mock);  // rejects unknown kinds now rather than per request
  } else if (d.transport == TransportKind::stdio && !d.command.empty()) {
    // A relative program path resolves against the config directory.
    if (d.command[0].find('/') != std::string::npos && fs::path(d.command[0]).is_relative()) {
      d.command[0] = (base / d.command[0]).lexically_normal().string();
    }
  }
  return spec;
}

std::optional<EntityKind> try_entity_kind(const std::string& s) {
  try {
    return parse_entity_kind(s);
  } catch (const Error&) {
    return std::nullopt;
  }
}

}  // namespace

ConfidenceFloors parse_floors(const json& j) {
  if (!j.is_object()) throw Error(ErrorCode::config, "config.floors must be an object");
  ConfidenceFloors floors;
  for (const auto& [k, v] : j.items()) {
    if (!v.is_number() || v.get<double>() < 0.0 || v.get<double>() > 1.0) {
      throw Error(ErrorCode::config, "config.floors." + k + " must be a number in [0,1]");
    }
    if (k == "default") {
      floors.fallback = v.get<double>();
    } else if (auto kind = try_entity_kind(k)) {
      floors.per_kind[*kind] = v.get<double>();
    } else {
      throw Error(ErrorCode::config, "config.floors: unknown entity kind '" + k + "'");
    }
  }
  return floors;
}

GatewayConfig parse_config(const json& j, const fs::path& base) {
  if (!j.is_object()) throw Error(ErrorCode::config, "config must be a JSON object");
  GatewayConfig c;
  const std::string top = "config";
  c.model = field<std::string>(j, "model", c.model, top);
  if (j.contains("clock")) {
    try {
      c.fixed_clock = parse_timestamp(field<std::string>(j, "clock", "", top));
    } catch (const Error& e) {
      throw Error(ErrorCode::config, std::string("config.clock: ") + e.what());
    }
  }
  c.q_min = field<double>(j, "q_min", c.q_min, top);
  if (!(c.q_min >= 0.0 && c.q_min <= 1.0)) throw Error(ErrorCode::config, "config.q_min must lie in [0,1]");
  c.deadline_ms = field<int>(j, "deadline_ms", c.deadline_ms, top);
  if (c.deadline_ms <= 0) throw Error(ErrorCode::config, "config.deadline_ms must be positive");
  c.top_k = field<std::size_t>(j, "top_k", c.top_k, top);
  if (c.top_k == 0) throw Error(ErrorCode::config, "config.top_k must be at least 1");
  c.max_block_tokens = field<std::size_t>(j, "max_block_tokens", c.max_block_tokens, top);

  if (j.contains("budgets")) {
    const auto& b = j["budgets"];
    for (const char* k : {"observations", "entities", "relations", "provenance"}) {
      if (b.contains(k) && (!b[k].is_number_integer() || b[k].get<long long>() < 0)) {
        throw Error(ErrorCode::config, std::string("config.budgets.") + k + " must be a nonnegative integer");
      }
    }
    c.budgets.observations_max = field<std::size_t>(b, "observations", c.budgets.observations_max, "budgets");
    c.budgets.entities_max = field<std::size_t>(b, "entities", c.budgets.entities_max, "budgets");
    c.budgets.relations_max = field<std::size_t>(b, "relations", c.budgets.relations_max, "budgets");
    c.budgets.provenance_max = field<std::size_t>(b, "provenance", c.budgets.provenance_max, "budgets");
  }
  if (j.contains("floors")) c.floors = parse_floors(j["floors"]);

  std::string rules_text;
  for (const auto& line : field<std::vector<std::string>>(j, "safety_rules", {}, top)) rules_text += line + "\n";
  if (j.contains("safety_rules_file")) rules_text += read_file(base / j["safety_rules_file"].get<std::string>());
  try {
    c.safety_rules = parse_safety_rules(rules_text);
  } catch (const Error& e) {
    throw Error(ErrorCode::config, std::string("safety rules: ") + e.what());
  }

  if (j.contains("task_rules")) {
    for (const auto& r : j["task_rules"]) c.task_rules.push_back(task_rule_from_json(r));
  } else {
    c.task_rules = {{"transcribe", std::nullopt, Modality::audio},
                    {"code", std::string("```"), std::nullopt},
                    {"tool_usage", std::string("\\bhow (do|can|should) i (use|run|install|configure)\\b|\\busage\\b"),
                     std::nullopt}};
  }

  if (!j.contains("adapters") || !j["adapters"].is_array()) throw Error(ErrorCode::config, "config.adapters must be a list");
  std::set<std::string> adapter_ids;
  for (std::size_t i = 0; i < j["adapters"].size(); ++i) {
    auto spec = parse_adapter(j["adapters"][i], base, i);
    if (!adapter_ids.insert(spec.descriptor.adapter_id).second) {
      throw Error(ErrorCode::config, "duplicate adapter id '" + spec.descriptor.adapter_id + "'");
    }
    c.adapters.push_back(std::move(spec));
  }
  c.llm_adapter = field<std::string>(j, "llm_adapter", "", top);
  const auto llm = std::find_if(c.adapters.begin(), c.adapters.end(),
                                [&](const AdapterSpec& a) { return a.descriptor.adapter_id == c.llm_adapter; });
  if (llm == c.adapters.end()) throw Error(ErrorCode::config, "config.llm_adapter must name a configured adapter");
  if (llm->descriptor.tool != ToolKind::llm) throw Error(ErrorCode::config, "config.llm_adapter must be an llm adapter");

  if (!j.contains("chains") || !j["chains"].is_array() || j["chains"].empty()) {
    throw Error(ErrorCode::config, "config.chains must be a non-empty list");
  }
  std::set<std::string> chain_ids;
  for (const auto& cj : j["chains"]) {
    ToolChain chain = tool_chain_from_json(cj);
    if (!chain_ids.insert(chain.chain_id).second) {
      throw Error(ErrorCode::config, "duplicate chain id '" + chain.chain_id + "'");
    }
    for (const auto& step : chain.steps) {
      if (step.kind != PrimitiveKind::run_perception) continue;
      const std::string pipeline = step.params.value("pipeline", "");
      if (pipeline != "audio" && pipeline != "vision" && pipeline != "ocr") {
        throw Error(ErrorCode::config, "chain '" + chain.chain_id +
                                           "': run_perception needs pipeline audio, vision or ocr");
      }
    }
    c.chains.push_back(std::move(chain));
  }
  for (const auto& ej : j.value("estimates", json::array())) {
    ChainEstimate e = chain_estimate_from_json(ej);
    if (!chain_ids.count(e.chain_id)) throw Error(ErrorCode::config, "estimate for unknown chain '" + e.chain_id + "'");
    c.estimates[e.chain_id] = e;
  }
  for (const auto& id : chain_ids) {
    if (!c.estimates.count(id)) throw Error(ErrorCode::config, "chain '" + id + "' has no estimate");
  }

  if (j.contains("indexes")) {
    for (const auto& [k, v] : j["indexes"].items()) {
      IndexSpec spec;
      try {
        spec.kind = parse_index_kind(k);
      } catch (const Error& e) {
        throw Error(ErrorCode::config, std::string("config.indexes: ") + e.what());
      }
      if (spec.kind == IndexKind::request) throw Error(ErrorCode::config, "the request index is built per request");
      if (v.is_string()) {
        spec.dump = base / v.get<std::string>();
      } else if (v.is_object() && v.contains("build_from")) {
        spec.build_from = base / v["build_from"].get<std::string>();
      } else if (v.is_object() && v.contains("path")) {
        spec.dump = base / v["path"].get<std::string>();
      } else {
        throw Error(ErrorCode::config, "config.indexes." + k + " needs a path or build_from");
      }
      c.indexes.push_back(std::move(spec));
    }
  }
  if (j.contains("document")) {
    const auto& d = j["document"];
    c.document.edge = field<double>(d, "edge_threshold", c.document.edge, "document");
    c.document.column_gap = field<double>(d, "column_gap", c.document.column_gap, "document");
    c.document.iou = field<double>(d, "iou_threshold", c.document.iou, "document");
    c.document.similarity = field<double>(d, "similarity_threshold", c.document.similarity, "document");
    c.document.ocr = field<double>(d, "ocr_threshold", c.document.ocr, "document");
  }
  if (j.contains("audio")) {
    const auto& a = j["audio"];
    c.audio.vad.threshold = field<double>(a, "vad_threshold", c.audio.vad.threshold, "audio");
    c.audio.vad.merge_gap_frames = field<std::size_t>(a, "merge_gap_frames", c.audio.vad.merge_gap_frames, "audio");
    c.audio.vad.min_len_frames = field<std::size_t>(a, "min_len_frames", c.audio.vad.min_len_frames, "audio");
    c.audio.vad_frame_ms = field<double>(a, "frame_ms", c.audio.vad_frame_ms, "audio");
    c.audio.cluster_stop_distance = field<double>(a, "cluster_stop_distance", c.audio.cluster_stop_distance, "audio");
    if (c.audio.vad_frame_ms <= 0.0) throw Error(ErrorCode::config, "config.audio.frame_ms must be positive");
  }
  if (j.contains("vision")) c.region_threshold = field<double>(j["vision"], "threshold", c.region_threshold, "vision");
  if (j.contains("sandbox")) {
    c.sandbox.wall_ms = field<int>(j["sandbox"], "wall_ms", c.sandbox.wall_ms, "sandbox");
    c.sandbox.output_bytes = field<std::size_t>(j["sandbox"], "output_bytes", c.sandbox.output_bytes, "sandbox");
    if (c.sandbox.wall_ms <= 0) throw Error(ErrorCode::config, "config.sandbox.wall_ms must be positive");
  }
  if (j.contains("trace_log")) c.trace_log = base / j["trace_log"].get<std::string>();
  return c;
}

GatewayConfig load_config(const fs::path& path) {
  fs::path p = path;
  if (p.empty()) {
    const char* env = std::getenv("INTERFAZE_CONFIG");
    if (env == nullptr || *env == '\0') {
      throw Error(ErrorCode::config, "no config given and INTERFAZE_CONFIG is not set");
    }
    p = env;
  }
  return parse_config(read_json_file(p), p.parent_path());
}

SegmentIndex build_index_from_directory(IndexKind kind, const fs::path& dir, std::size_t max_block_tokens,
                                        Timestamp timestamp) {
  if (!fs::is_directory(dir)) throw Error(ErrorCode::invalid_argument, "'" + dir.string() + "' is not a directory");
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (entry.is_regular_file()) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<PageSegment> segments;
  for (const auto& f : files) {
    const std::string rel = fs::relative(f, dir).generic_string();
    const std::string bytes = read_file(f);
    const Provenance source{rel, sha256_hex(bytes), timestamp, std::nullopt};
    const auto ext = ascii_lower(f.extension().string());
    if (ext == ".html" || ext == ".htm") {
      const auto blocks = extract_blocks(bytes);
      auto segs = blocks_to_segments(blocks, source);
      for (std::size_t i = 0; i < segs.size(); ++i) segs[i].segment_id = rel + "#b" + std::to_string(i);
      segments.insert(segments.end(), segs.begin(), segs.end());
    } else if (is_valid_utf8(bytes)) {
      auto segs = segment_text(rel, bytes, max_block_tokens, source);
      segments.insert(segments.end(), segs.begin(), segs.end());
    }
  }
  return build_index(kind, segments);
}

// --- Completion requests -----------------------------------------------------

Request parse_completion_request(const json& body) {
  auto bad = [](const std::string& msg) { throw Error(ErrorCode::protocol, msg); };
  if (!body.is_object()) bad("request body must be a JSON object");
  if (body.contains("model") && !body["model"].is_string()) bad("model must be a string");
  if (body.value("stream", false)) bad("streaming is not supported");
  if (!body.contains("messages") || !body["messages"].is_array() || body["messages"].empty()) {
    bad("messages must be a non-empty array");
  }
  Request req;
  std::string text;
  for (std::size_t i = 0; i < body["messages"].size(); ++i) {
    const auto& m = body["messages"][i];
    const std::string where = "messages[" + std::to_string(i) + "]";
    if (!m.is_object() || !m.contains("role") || !m["role"].is_string()) bad(where + " needs a string role");
    const std::string role = m["role"].get<std::string>();
    if (role != "system" && role != "user" && role != "assistant") bad(where + ": unknown role '" + role + "'");
    if (m.contains("content") && !m["content"].is_string() && !m["content"].is_null()) {
      bad(where + ".content must be a string");
    }
    if (role != "user") continue;
    if (m.contains("content") && m["content"].is_string()) {
      if (!text.empty()) text += "\n";
      text += m["content"].get<std::string>();
    }
    if (m.contains("attachments")) {
      if (!m["attachments"].is_array()) bad(where + ".attachments must be an array");
      for (const auto& a : m["attachments"]) {
        if (!a.is_object() || !a.contains("data") || !a["data"].is_string()) {
          bad(where + ": attachment needs a string data field");
        }
        if (a.value("encoding", std::string("base64")) != "base64") bad(where + ": attachment encoding must be base64");
        Attachment att;
        att.name = a.value("name", std::string{});
        try {
          att.payload = base64_decode(a["data"].get<std::string>());
          if (a.contains("media_kind")) att.media_kind = parse_media_kind(a["media_kind"].get<std::string>());
        } catch (const Error& e) {
          bad(where + ": " + e.what());
        }
        if (att.payload.empty()) bad(where + ": attachment payload is empty");
        req.attachments.push_back(std::move(att));
      }
    }
    if (m.contains("urls")) {
      if (!m["urls"].is_array()) bad(where + ".urls must be an array");
      for (const auto& u : m["urls"]) {
        if (!u.is_string()) bad(where + ".urls entries must be strings");
        req.declared_urls.push_back(u.get<std::string>());
      }
    }
  }
  if (!text.empty()) req.text = text;
  return req;
}

// --- Per-request pipeline ----------------------------------------------------

namespace {

struct Source {
  Provenance prov;
  std::string prefix;  // id namespace inside the compiled state
};

class RequestPipeline {
 public:
  RequestPipeline(const GatewayConfig& cfg, const AdapterRegistry& registry,
                  const std::map<IndexKind, SegmentIndex>& indexes, Timestamp now, const Request& request,
                  const IngressSummary& summary, std::string task_type, json options)
      : cfg_(cfg),
        registry_(registry),
        indexes_(indexes),
        now_(now),
        request_(request),
        summary_(summary),
        task_type_(std::move(task_type)),
        options_(std::move(options)) {
    for (std::size_t i = 0; i < request_.attachments.size(); ++i) {
      const auto& a = request_.attachments[i];
      const std::string name = a.name.empty() ? std::to_string(i) : a.name;
      sources_.push_back({{"attachment:" + name, sha256_hex(a.payload), now_, std::nullopt},
                          "a" + std::to_string(i) + "."});
    }
  }

  std::string query() const { return request_.text.value_or(""); }

  std::vector<Fragment> run(const ToolChain& chain, std::size_t, const Primitive& step,
                            std::chrono::milliseconds budget) {
    switch (step.kind) {
      case PrimitiveKind::fetch_parse:
        return fetch_parse(chain, budget);
      case PrimitiveKind::run_perception:
        return perception(chain, step, budget);
      case PrimitiveKind::query_index:
        return query_index(chain, step);
      case PrimitiveKind::run_sandbox:
        return sandbox(step, budget);
      case PrimitiveKind::call_llm:
        break;
    }
    throw Error(ErrorCode::invalid_argument, "call_llm is run by the controller");
  }

  std::string call_llm(const std::string& prompt, std::chrono::milliseconds budget) const {
    auto llm = registry_.find(cfg_.llm_adapter);
    if (!llm) throw Error(ErrorCode::unavailable, "llm adapter '" + cfg_.llm_adapter + "' is not registered");
    AdapterRequest req{"llm-0", ToolKind::llm, "complete", {{"prompt", prompt}, {"model", cfg_.model}}};
    const auto resp = llm->invoke(req, budget);
    if (!resp.ok) throw Error(resp.error->code, "llm: " + resp.error->message);
    if (!resp.result.is_object() || !resp.result.contains("text") || !resp.result["text"].is_string()) {
      throw Error(ErrorCode::protocol, "llm reply lacks a text field");
    }
    return resp.result["text"].get<std::string>();
  }

 private:
  std::shared_ptr<AdapterClient> need(ToolKind tool, const json& params, const char* key) const {
    std::shared_ptr<AdapterClient> c;
    if (params.is_object() && params.contains(key)) {
      c = registry_.find(params[key].get<std::string>());
    } else {
      c = registry_.for_tool(tool);
    }
    if (!c) throw Error(ErrorCode::unavailable, "no " + std::string(to_string(tool)) + " adapter registered");
    return c;
  }

  void add_segments(const ToolChain& chain, std::vector<PageSegment> segs) {
    std::lock_guard lock(mutex_);
    auto& list = segments_[chain.chain_id];
    list.insert(list.end(), std::make_move_iterator(segs.begin()), std::make_move_iterator(segs.end()));
  }

  static json invoke_ok(AdapterClient& client, AdapterRequest req, std::chrono::milliseconds budget) {
    const auto resp = client.invoke(req, budget);
    if (!resp.ok) throw Error(resp.error->code, std::string(to_string(req.tool)) + ": " + resp.error->message);
    if (!resp.result.is_object()) throw Error(ErrorCode::protocol, std::string(to_string(req.tool)) + ": reply is not an object");
    return resp.result;
  }

  /// Ordered lines to fragment + request segments, with optional escalation.
  ContextState document_state(const ToolChain& chain, const DetectedDocument& doc, const Source& src,
                              std::chrono::milliseconds budget, const std::vector<PageLines>* ordered = nullptr) {
    const auto pages = ordered ? *ordered : order_pages(doc, cfg_.document);
    auto segments = segment_document(pages, cfg_.max_block_tokens, src.prov);
    ContextState state;
    std::vector<Line> all_lines;
    for (const auto& page : pages) {
      std::vector<PageSegment> page_segs;
      for (const auto& s : segments) {
        if (s.page_index == page.page_index) page_segs.push_back(s);
      }
      append_state(state, lines_to_state(page.lines, page.page_index, page_segs, src.prov));
      all_lines.insert(all_lines.end(), page.lines.begin(), page.lines.end());
    }
    const bool requested = options_.contains("extract_schema");
    if (should_escalate_extraction(all_lines, cfg_.document.ocr, requested)) {
      if (auto ocr = registry_.for_tool(ToolKind::ocr)) {
        const json schema = requested ? options_["extract_schema"] : json{{"text", ""}};
        std::string joined;
        for (const auto& l : all_lines) joined += (joined.empty() ? "" : "\n") + l.text;
        AdapterRequest req{"extract-" + src.prefix, ToolKind::ocr, "extract_structured",
                           {{"content_hash", src.prov.content_hash}, {"schema", schema}, {"text", joined}}};
        const json reply = invoke_ok(*ocr, req, budget);
        if (!matches_schema_template(schema, reply)) {
          throw Error(ErrorCode::protocol, "structured extraction reply does not match the schema");
        }
        Provenance p = src.prov;
        p.locator = "extract";
        state.observations.push_back({"extract", canonical_json(reply), 0.0, {p}});
      } else if (requested) {
        throw Error(ErrorCode::unavailable, "structured extraction requested but no ocr adapter is registered");
      }
    }
    prefix_ids(state, src.prefix);
    for (auto& s : segments) s.segment_id = src.prefix + s.segment_id;
    add_segments(chain, std::move(segments));
    return state;
  }

  ContextState web_state(const ToolChain& chain, std::string_view markup, const Source& src) {
    const auto blocks = extract_blocks(markup);
    ContextState state = blocks_to_state(blocks, src.prov);
    auto segs = blocks_to_segments(blocks, src.prov);
    prefix_ids(state, src.prefix);
    for (auto& s : segs) s.segment_id = src.prefix + s.segment_id;
    add_segments(chain, std::move(segs));
    return state;
  }

  std::vector<Fragment> fetch_parse(const ToolChain& chain, std::chrono::milliseconds budget) {
    std::vector<Fragment> out;
    for (std::size_t i = 0; i < request_.attachments.size(); ++i) {
      const auto& a = request_.attachments[i];
      const auto& src = sources_[i];
      ContextState state;
      if (a.media_kind == MediaKind::html) {
        state = web_state(chain, a.payload, src);
      } else if (a.media_kind == MediaKind::plain_text) {
        auto segs = segment_text("t", a.payload, cfg_.max_block_tokens, src.prov);
        for (const auto& s : segs) state.observations.push_back({s.segment_id, s.text, 0.0, {s.provenance}});
        prefix_ids(state, src.prefix);
        for (auto& s : segs) s.segment_id = src.prefix + s.segment_id;
        add_segments(chain, std::move(segs));
      } else if (a.media_kind == MediaKind::pdf) {
        auto renderer = need(ToolKind::render_page, json::object(), "");
        AdapterRequest req{"render-" + src.prefix, ToolKind::render_page, "render_pdf",
                           {{"name", a.name}, {"content_hash", src.prov.content_hash}, {"pdf", encode_binary(a.payload)}}};
        const json reply = invoke_ok(*renderer, req, budget);
        if (!reply.contains("document")) throw Error(ErrorCode::protocol, "render_pdf reply lacks a document");
        state = document_state(chain, document_from_json(reply["document"]), src, budget);
      } else {
        continue;
      }
      out.push_back(make_fragment(src.prefix + "fetch", std::move(state)));
    }
    for (std::size_t j = 0; j < request_.declared_urls.size(); ++j) {
      const std::string& url = request_.declared_urls[j];
      auto renderer = need(ToolKind::render_page, json::object(), "");
      AdapterRequest req{"render-u" + std::to_string(j), ToolKind::render_page, "render_url", {{"url", url}}};
      const json reply = invoke_ok(*renderer, req, budget);
      if (!reply.contains("markup") || !reply["markup"].is_string()) {
        throw Error(ErrorCode::protocol, "render_url reply lacks markup");
      }
      const std::string markup = reply["markup"].get<std::string>();
      const Source src{{url, sha256_hex(markup), now_, std::nullopt}, "u" + std::to_string(j) + "."};
      out.push_back(make_fragment(src.prefix + "fetch", web_state(chain, markup, src)));
    }
    return out;
  }

  std::vector<Fragment> perception(const ToolChain& chain, const Primitive& step, std::chrono::milliseconds budget) {
    const std::string pipeline = step.params.value("pipeline", "");
    std::vector<Fragment> out;
    for (std::size_t i = 0; i < request_.attachments.size(); ++i) {
      const auto& a = request_.attachments[i];
      const auto& src = sources_[i];
      if (pipeline == "audio" && a.media_kind == MediaKind::audio) {
        auto vad = need(ToolKind::vad, step.params, "vad");
        auto asr = need(ToolKind::asr, step.params, "asr");
        auto embed = registry_.for_tool(ToolKind::diarize_embed);
        const Waveform wave = decode_wav(a.payload);
        const auto utterances =
            transcribe(wave, src.prov.content_hash, {vad.get(), embed.get(), asr.get()}, cfg_.audio, budget);
        ContextState state = build_transcript_state(utterances, src.prov);
        prefix_ids(state, src.prefix);
        out.push_back(make_fragment(src.prefix + "audio", std::move(state)));
      } else if (pipeline == "vision" && a.media_kind == MediaKind::image) {
        out.push_back(make_fragment(src.prefix + "vision", vision_state(step, a, src, budget)));
      } else if (pipeline == "ocr" && a.media_kind == MediaKind::image) {
        out.push_back(make_fragment(src.prefix + "ocr", ocr_state(chain, step, a, src, budget)));
      }
    }
    return out;
  }

  ContextState vision_state(const Primitive& step, const Attachment& a, const Source& src,
                            std::chrono::milliseconds budget) {
    auto detector = need(ToolKind::detect, step.params, "detect");
    AdapterRequest req{"grid-" + src.prefix, ToolKind::detect, "embed_grid",
                       {{"name", a.name},
                        {"content_hash", src.prov.content_hash},
                        {"prompt", query()},
                        {"image", encode_binary(a.payload)}}};
    const json reply = invoke_ok(*detector, req, budget);
    if (!reply.contains("tokens") || !reply.contains("text")) {
      throw Error(ErrorCode::protocol, "embed_grid reply needs tokens and text");
    }
    const VisualTokens tokens = tokens_from_json(reply["tokens"]);
    TextEmbedding text = text_embedding_from_json(reply["text"]);
    if (text.prompt.empty()) text.prompt = query();
    const RelevanceMap map = relevance_map(tokens, text);
    const double threshold = step.params.value("threshold", cfg_.region_threshold);
    std::vector<Box> boxes;
    std::vector<double> scores;
    for (const auto& g : group_regions(map, threshold)) {
      boxes.push_back(grid_to_pixels(g, tokens));
      scores.push_back(region_score(map, g));
    }
    if (auto segmenter = registry_.for_tool(ToolKind::segment_mask)) {
      // Masks are kept out of the prompt; failures still fail the step.
      for (const auto& m : refine_masks(boxes, src.prov, *segmenter, budget)) {
        if (m.error) throw Error(m.error->code, "segment_mask: " + m.error->message);
      }
    }
    ContextState state = regions_to_state(boxes, scores, text.prompt, src.prov);
    prefix_ids(state, src.prefix);
    return state;
  }

  ContextState ocr_state(const ToolChain& chain, const Primitive& step, const Attachment& a, const Source& src,
                         std::chrono::milliseconds budget) {
    auto recognize = [&](AdapterClient& client) {
      AdapterRequest req{"ocr-" + src.prefix + client.descriptor().adapter_id, ToolKind::ocr, "recognize",
                         {{"name", a.name}, {"content_hash", src.prov.content_hash}, {"image", encode_binary(a.payload)}}};
      const json reply = invoke_ok(client, req, budget);
      if (!reply.contains("document")) throw Error(ErrorCode::protocol, "recognize reply lacks a document");
      return document_from_json(reply["document"]);
    };
    auto primary = need(ToolKind::ocr, step.params, "adapter");
    const DetectedDocument doc = recognize(*primary);
    auto pages = order_pages(doc, cfg_.document);
    if (step.params.contains("secondary")) {
      auto secondary = need(ToolKind::ocr, step.params, "secondary");
      const auto other = order_pages(recognize(*secondary), cfg_.document);
      for (auto& page : pages) {
        for (const auto& o : other) {
          if (o.page_index != page.page_index) continue;
          const auto merged = merge_recognizers(page.lines, o.lines, cfg_.document.iou, cfg_.document.similarity);
          const auto it = std::find_if(doc.pages.begin(), doc.pages.end(),
                                       [&](const DetectedPage& p) { return p.page_index == page.page_index; });
          page.lines = reading_order(merged, it->width > 0 ? it->width : 1.0, cfg_.document.edge,
                                     cfg_.document.column_gap);
        }
      }
    }
    return document_state(chain, doc, src, budget, &pages);
  }

  std::vector<Fragment> query_index(const ToolChain& chain, const Primitive& step) {
    std::vector<IndexKind> kinds;
    if (step.params.contains("indexes")) {
      for (const auto& k : step.params["indexes"]) kinds.push_back(parse_index_kind(k.get<std::string>()));
    } else {
      kinds = route_query(task_type_, summary_.modalities);
    }
    const std::size_t k = step.params.value("k", cfg_.top_k);
    std::vector<Fragment> out;
    for (const auto kind : kinds) {
      const std::string prefix = "ix." + std::string(to_string(kind)) + ".";
      if (kind == IndexKind::request) {
        std::vector<PageSegment> segs;
        {
          std::lock_guard lock(mutex_);
          segs = segments_[chain.chain_id];
        }
        if (segs.empty()) continue;
        const SegmentIndex index = build_index(IndexKind::request, segs);
        const auto hits = search(index, query(), k);
        out.push_back(make_fragment(prefix + "hits", hits_to_state(index, hits, prefix)));
        continue;
      }
      const auto it = indexes_.find(kind);
      if (it == indexes_.end()) continue;
      const auto hits = search(it->second, query(), k);
      out.push_back(make_fragment(prefix + "hits", hits_to_state(it->second, hits, prefix)));
    }
    return out;
  }

  std::vector<Fragment> sandbox(const Primitive& step, std::chrono::milliseconds budget) {
    std::optional<std::string> code;
    if (step.params.contains("code")) {
      code = step.params["code"].get<std::string>();
    } else {
      code = extract_fenced_code(query());
    }
    if (!code) return {};
    auto runner = need(ToolKind::sandbox, step.params, "adapter");
    SandboxLimits limits = cfg_.sandbox;
    limits.wall_ms = step.params.value("wall_ms", limits.wall_ms);
    limits.output_bytes = step.params.value("output_bytes", limits.output_bytes);
    AdapterRequest req{"sandbox-0", ToolKind::sandbox, "run",
                       {{"code", *code}, {"limits", {{"wall_ms", limits.wall_ms}, {"output_bytes", limits.output_bytes}}}}};
    const json reply = invoke_ok(*runner, req, std::min(budget, std::chrono::milliseconds(limits.wall_ms)));
    if (!reply.contains("stdout") || !reply["stdout"].is_string() || !reply.contains("exit_status") ||
        !reply["exit_status"].is_number_integer()) {
      throw Error(ErrorCode::protocol, "sandbox reply needs stdout and exit_status");
    }
    const std::string raw = reply["stdout"].get<std::string>();
    const std::string kept = truncate_utf8(raw, limits.output_bytes);
    std::string text = "exit_status=" + std::to_string(reply["exit_status"].get<int>()) + "\n" + kept;
    if (kept.size() < raw.size()) text += "\n[output truncated at " + std::to_string(limits.output_bytes) + " bytes]";
    ContextState state;
    state.observations.push_back(
        {"sbx.run", text, 0.0, {{"sandbox", sha256_hex(*code), now_, "exit=" + std::to_string(reply["exit_status"].get<int>())}}});
    return {make_fragment("sandbox", std::move(state))};
  }

  const GatewayConfig& cfg_;
  const AdapterRegistry& registry_;
  const std::map<IndexKind, SegmentIndex>& indexes_;
  Timestamp now_;
  const Request& request_;
  const IngressSummary& summary_;
  std::string task_type_;
  json options_;
  std::vector<Source> sources_;
  std::mutex mutex_;
  std::map<std::string, std::vector<PageSegment>> segments_;
};

json modalities_json(const ModalitySet& m) {
  json out = json::array();
  for (auto x : m) out.push_back(to_string(x));
  return out;
}

json provenance_json(const ContextState& state) {
  json out = json::array();
  for (const auto& [_, p] : state.provenance_index) out.push_back(to_json(p));
  return out;
}

int status_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::protocol:
    case ErrorCode::invalid_argument:
    case ErrorCode::parse:
      return 400;
    case ErrorCode::no_feasible_chain:
      return 422;
    case ErrorCode::chains_exhausted:
      return 502;
    case ErrorCode::deadline:
      return 504;
    default:
      return 500;
  }
}

json error_body(ErrorCode code, const std::string& message, json extension) {
  return {{"error", {{"code", to_string(code)}, {"message", message}, {"type", "gateway_error"}}},
          {"interfaze", std::move(extension)}};
}

}  // namespace

// --- Gateway -----------------------------------------------------------------

Gateway::Gateway(GatewayConfig config) : config_(std::move(config)) {
  if (config_.fixed_clock) clock_ = Clock(*config_.fixed_clock);
  for (const auto& spec : config_.adapters) {
    std::unique_ptr<AdapterTransport> transport;
    if (spec.descriptor.transport == TransportKind::in_process_mock) {
      transport = std::make_unique<MockTransport>(make_mock_handler(spec.mock));
    } else {
      transport = make_transport(spec.descriptor);
    }
    registry_.add(std::make_shared<AdapterClient>(spec.descriptor, std::move(transport)));
  }
  for (const auto& spec : config_.indexes) {
    try {
      if (spec.dump) {
        indexes_[spec.kind] = load_index(read_file(*spec.dump));
      } else {
        indexes_[spec.kind] =
            build_index_from_directory(spec.kind, *spec.build_from, config_.max_block_tokens, clock_.now());
      }
    } catch (const Error& e) {
      throw Error(ErrorCode::config, "index '" + std::string(to_string(spec.kind)) + "': " + e.what());
    }
    indexes_[spec.kind].kind = spec.kind;
  }
}

void Gateway::replace_adapter(std::shared_ptr<AdapterClient> client) {
  AdapterRegistry next;
  bool replaced = false;
  for (const auto& c : registry_.all()) {
    if (c->descriptor().adapter_id == client->descriptor().adapter_id) {
      next.add(client);
      replaced = true;
    } else {
      next.add(c);
    }
  }
  if (!replaced) next.add(client);
  registry_ = std::move(next);
}

const SegmentIndex* Gateway::standing_index(IndexKind kind) const {
  const auto it = indexes_.find(kind);
  return it == indexes_.end() ? nullptr : &it->second;
}

std::string Gateway::next_request_id() {
  char buf[32];
  std::snprintf(buf, sizeof buf, "req-%06zu", ++counter_);
  return buf;
}

void Gateway::log_trace(const Trace& trace, const std::string& request_id) {
  if (!config_.trace_log) return;
  std::lock_guard lock(log_mutex_);
  std::ofstream out(*config_.trace_log, std::ios::app);
  out << trace_log_lines(trace, request_id);
}

CompletionResult Gateway::handle_completion(const json& body) {
  Request req;
  try {
    req = parse_completion_request(body);
  } catch (const Error& e) {
    const std::string id = next_request_id();
    return {status_for(e.code()), error_body(e.code(), e.what(), {{"request_id", id}}), ""};
  }
  json options = body.is_object() && body.contains("interfaze") && body["interfaze"].is_object() ? body["interfaze"]
                                                                                                  : json::object();
  return handle_request(std::move(req), options);
}

CompletionResult Gateway::handle_request(Request request, const json& options) {
  const std::string id = next_request_id();
  request.id = id;
  const Timestamp now = clock_.now();
  const auto created = std::chrono::duration_cast<std::chrono::seconds>(now.time_since_epoch()).count();

  Request normalized;
  IngressSummary summary;
  try {
    normalized = normalize_request(std::move(request));
    summary = summarize(normalized, config_.safety_rules);
  } catch (const Error& e) {
    const ErrorCode code = e.code() == ErrorCode::invalid_argument ? ErrorCode::protocol : e.code();
    return {status_for(code), error_body(code, e.what(), {{"request_id", id}}), ""};
  }

  json ext = {{"request_id", id},
              {"modalities", modalities_json(summary.modalities)},
              {"safety", to_string(summary.safety)},
              {"flagged_urls", normalized.flagged_urls}};

  if (summary.safety == SafetyVerdict::deny) {
    ext["refused"] = true;
    ext["reason_code"] = "SAFETY_DENY";
    ext["chain_id"] = nullptr;
    ext["degraded"] = false;
    ext["trace"] = json::array();
    ext["provenance"] = json::array();
    ext["context_digest"] = context_digest(ContextState{});
    json body = {{"id", "chatcmpl-" + id},
                 {"object", "chat.completion"},
                 {"created", created},
                 {"model", config_.model},
                 {"choices",
                  {{{"index", 0},
                    {"message", {{"role", "assistant"}, {"content", "Request refused by safety policy."}}},
                    {"finish_reason", "content_filter"}}}},
                 {"interfaze", ext}};
    return {200, std::move(body), ""};
  }

  const std::string query = normalized.text.value_or("");
  const std::string task = predict_task_type(summary, query, config_.task_rules);
  ext["task_type"] = task;

  Selection selection;
  try {
    const auto candidates = enumerate_chains(task, summary.modalities, config_.chains);
    const double q_min = options.value("q_min", config_.q_min);
    selection = select_chain(candidates, config_.estimates, q_min);
  } catch (const Error& e) {
    ext["trace"] = json::array();
    return {status_for(e.code()), error_body(e.code(), e.what(), ext), ""};
  }
  ext["degraded"] = selection.degraded;

  RequestPipeline pipeline(config_, registry_, indexes_, now, normalized, summary, task, options);
  ExecutionHooks hooks;
  hooks.run_step = [&](const ToolChain& chain, std::size_t i, const Primitive& step, std::chrono::milliseconds budget) {
    return pipeline.run(chain, i, step, budget);
  };
  hooks.compile = [&](const std::vector<Fragment>& fragments) {
    CompileInput input;
    input.fragments = fragments;
    input.query = query;
    input.budgets = config_.budgets;
    input.floors = config_.floors;
    return compile_context(input);
  };
  hooks.render = [&](const ContextState& state) { return render_prompt(state, query, config_.budgets); };
  hooks.call_llm = [&](const ToolChain&, const Primitive&, const std::string& prompt, std::chrono::milliseconds budget) {
    return pipeline.call_llm(prompt, budget);
  };
  const int deadline = options.value("deadline_ms", config_.deadline_ms);
  ExecutionResult result = execute_chain(selection.fallbacks, hooks, std::chrono::milliseconds(deadline));
  log_trace(result.trace, id);

  ext["trace"] = trace_summary(result.trace);
  ext["context_digest"] = context_digest(result.state);
  ext["provenance"] = provenance_json(result.state);
  if (result.error) {
    ext["chain_id"] = nullptr;
    return {status_for(result.error->code), error_body(result.error->code, result.error->message, ext), ""};
  }
  ext["chain_id"] = result.chain_id;
  json body = {{"id", "chatcmpl-" + id},
               {"object", "chat.completion"},
               {"created", created},
               {"model", config_.model},
               {"choices",
                {{{"index", 0},
                  {"message", {{"role", "assistant"}, {"content", *result.answer}}},
                  {"finish_reason", "stop"}}}},
               {"interfaze", ext}};
  return {200, std::move(body), std::move(result.prompt)};
}

}  // namespace distill
