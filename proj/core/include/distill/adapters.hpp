#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstddef>
#include <functional>
#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "distill/common.hpp"

namespace distill {

enum class ToolKind {
  ocr,
  asr,
  vad,
  diarize_embed,
  detect,
  classify,
  render_page,
  segment_mask,
  llm,
  sandbox,
};

enum class TransportKind { in_process_mock, stdio, tcp };

std::string_view to_string(ToolKind tool);
ToolKind parse_tool_kind(std::string_view text);
std::string_view to_string(TransportKind t);
TransportKind parse_transport_kind(std::string_view text);

struct AdapterDescriptor {
  std::string adapter_id;
  ToolKind tool = ToolKind::llm;
  TransportKind transport = TransportKind::in_process_mock;
  int timeout_ms = 1000;
  std::size_t batch_max = 8;
  bool cacheable = false;
  std::size_t cache_capacity = 1024;
  /// stdio: argv of the adapter process.
  std::vector<std::string> command;
  /// tcp: endpoint.
  std::string host = "127.0.0.1";
  int port = 0;
};

/// Throws Error(config) when an invariant does not hold.
void validate(const AdapterDescriptor& d);

struct AdapterRequest {
  std::string id;
  ToolKind tool = ToolKind::llm;
  std::string op;
  nlohmann::json payload = nlohmann::json::object();
};

struct AdapterFailure {
  ErrorCode code = ErrorCode::protocol;
  std::string message;
};

struct AdapterResponse {
  std::string id;
  bool ok = false;
  nlohmann::json result;
  std::optional<AdapterFailure> error;

  static AdapterResponse success(std::string id, nlohmann::json result);
  static AdapterResponse failure(std::string id, ErrorCode code, std::string message);
};

// Wire format: one compact JSON object per line, sorted keys, exactly the
// fields {id, tool, op, payload} and {id, ok, result|error{code,message}}.
std::string encode_request(const AdapterRequest& r);
std::string encode_response(const AdapterResponse& r);
/// Throws Error(protocol) on anything that is not a well-formed message.
AdapterRequest decode_request(std::string_view line);
AdapterResponse decode_response(std::string_view line);
ErrorCode parse_error_code(std::string_view text);

/// Binary payload fields travel as {"encoding":"base64","data":...}.
nlohmann::json encode_binary(std::string_view bytes);
std::string decode_binary(const nlohmann::json& field);

/// sha256 over tool, op and the canonical payload.
std::string cache_key(const AdapterRequest& r);

/// Bounded LRU keyed by cache_key. Concurrent lookups, exclusive inserts.
class ResponseCache {
 public:
  explicit ResponseCache(std::size_t capacity) : capacity_(capacity) {}

  std::optional<nlohmann::json> get(const std::string& key);
  void put(const std::string& key, nlohmann::json result);
  std::size_t size() const;

 private:
  using Order = std::list<std::string>;
  struct Slot {
    nlohmann::json result;
    Order::iterator position;
  };

  std::size_t capacity_;
  mutable std::mutex mutex_;
  Order order_;  // front = most recent
  std::unordered_map<std::string, Slot> slots_;
};

/// One transport round trip for a batch. Implementations return responses
/// aligned with `batch` and report per-item failures as error responses.
class AdapterTransport {
 public:
  virtual ~AdapterTransport() = default;

  std::vector<AdapterResponse> exchange(std::span<const AdapterRequest> batch,
                                        std::chrono::milliseconds timeout);
  std::size_t calls() const { return calls_.load(); }

 protected:
  virtual std::vector<AdapterResponse> do_exchange(std::span<const AdapterRequest> batch,
                                                   std::chrono::milliseconds timeout) = 0;

 private:
  std::atomic<std::size_t> calls_{0};
};

/// Handler for in-process mocks. Return the result object, or throw
/// distill::Error to produce an error response with that code.
using MockHandler = std::function<nlohmann::json(const AdapterRequest&)>;

/// Runs each item of a batch on its own thread and enforces the timeout per
/// item. Items still running at the deadline are reported as TIMEOUT and
/// joined when the transport is destroyed.
class MockTransport final : public AdapterTransport {
 public:
  explicit MockTransport(MockHandler handler);
  ~MockTransport() override;

 protected:
  std::vector<AdapterResponse> do_exchange(std::span<const AdapterRequest> batch,
                                           std::chrono::milliseconds timeout) override;

 private:
  std::shared_ptr<const MockHandler> handler_;
  std::mutex stragglers_mutex_;
  std::vector<std::jthread> stragglers_;
};

class LineChannel;

/// Newline-delimited JSON over a child process's stdin/stdout.
class StdioTransport final : public AdapterTransport {
 public:
  explicit StdioTransport(std::vector<std::string> command);
  ~StdioTransport() override;

 protected:
  std::vector<AdapterResponse> do_exchange(std::span<const AdapterRequest> batch,
                                           std::chrono::milliseconds timeout) override;

 private:
  void start();
  void stop();

  std::vector<std::string> command_;
  std::mutex mutex_;
  int pid_ = -1;
  std::unique_ptr<LineChannel> channel_;
};

/// Newline-delimited JSON over one TCP connection, reconnected on failure.
class TcpTransport final : public AdapterTransport {
 public:
  TcpTransport(std::string host, int port);
  ~TcpTransport() override;

 protected:
  std::vector<AdapterResponse> do_exchange(std::span<const AdapterRequest> batch,
                                           std::chrono::milliseconds timeout) override;

 private:
  void connect_channel();

  std::string host_;
  int port_;
  std::mutex mutex_;
  std::unique_ptr<LineChannel> channel_;
};

/// Uniform invocation layer: timeout, batching and caching in front of a
/// transport.
class AdapterClient {
 public:
  AdapterClient(AdapterDescriptor descriptor, std::unique_ptr<AdapterTransport> transport);

  const AdapterDescriptor& descriptor() const { return descriptor_; }

  /// `budget` caps the descriptor timeout (used to honor request deadlines).
  AdapterResponse invoke(const AdapterRequest& request,
                         std::optional<std::chrono::milliseconds> budget = std::nullopt);

  /// Responses are aligned with `requests`. Request ids must be distinct.
  std::vector<AdapterResponse> invoke_batched(std::span<const AdapterRequest> requests,
                                              std::optional<std::chrono::milliseconds> budget = std::nullopt);

  std::size_t transport_calls() const { return transport_->calls(); }
  std::size_t invocations() const { return invocations_.load(); }

 private:
  AdapterDescriptor descriptor_;
  std::unique_ptr<AdapterTransport> transport_;
  ResponseCache cache_;
  std::atomic<std::size_t> invocations_{0};
};

/// Builds the transport for a non-mock descriptor.
std::unique_ptr<AdapterTransport> make_transport(const AdapterDescriptor& d);

class AdapterRegistry {
 public:
  void add(std::shared_ptr<AdapterClient> client);
  std::shared_ptr<AdapterClient> find(std::string_view adapter_id) const;
  /// First registered adapter for the tool, or null.
  std::shared_ptr<AdapterClient> for_tool(ToolKind tool) const;
  const std::vector<std::shared_ptr<AdapterClient>>& all() const { return clients_; }
  /// Sum of invocations over every adapter.
  std::size_t total_invocations() const;

 private:
  std::vector<std::shared_ptr<AdapterClient>> clients_;
};

// --- Built-in mock handlers ------------------------------------------------

/// Returns the payload unchanged.
MockHandler echo_handler();

/// Table-driven mock. `table` is {"entries":[{"op":..,"match":{..},"key":..,
/// "result":..|"error":{code,message},"delay_ms":..}], "default": ...}.
/// An entry applies when its op equals the request op and every `match` field
/// equals the payload field (or `key` equals cache_key). First match wins;
/// `default` is an entry of the same shape used when nothing matches.
MockHandler table_handler(nlohmann::json table);

struct EnergyVadConfig {
  double frame_ms = 10.0;
  double energy_threshold = 0.1;
};

/// Per frame: min(1, rms / (threshold * peak_rms)); all zeros when silent.
/// Frames are non-overlapping; a trailing partial frame counts.
std::vector<double> energy_vad(std::span<const double> samples, int sample_rate, const EnergyVadConfig& cfg);

/// In-process twin of the out-of-process reference adapter: ops "vad",
/// "classify", "complete" (echo LLM) and "echo".
MockHandler reference_handler();

/// Response line (without newline) for one request line of a protocol loop.
/// Malformed input yields a PROTOCOL error naming `line_no`; handler errors
/// keep their code.
std::string protocol_reply(const MockHandler& handler, std::string_view line, std::size_t line_no);

/// Rule classifier used by the reference adapter.
std::string classify_text(std::string_view text);

}  // namespace distill
