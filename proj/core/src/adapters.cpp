#include "distill/adapters.hpp"

#include <fcntl.h>
#include <netdb.h>
#include <poll.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <array>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <future>
#include <set>

#include "distill/schema.hpp"

namespace distill {

using nlohmann::json;
using Clock_ = std::chrono::steady_clock;

namespace {

constexpr std::array<std::pair<ToolKind, std::string_view>, 10> kTools{{
    {ToolKind::ocr, "ocr"},
    {ToolKind::asr, "asr"},
    {ToolKind::vad, "vad"},
    {ToolKind::diarize_embed, "diarize_embed"},
    {ToolKind::detect, "detect"},
    {ToolKind::classify, "classify"},
    {ToolKind::render_page, "render_page"},
    {ToolKind::segment_mask, "segment_mask"},
    {ToolKind::llm, "llm"},
    {ToolKind::sandbox, "sandbox"},
}};

std::string dump_compact(const json& j) { return j.dump(-1, ' ', false, json::error_handler_t::replace); }

void ignore_sigpipe() {
  static std::once_flag once;
  std::call_once(once, [] { ::signal(SIGPIPE, SIG_IGN); });
}

}  // namespace

std::string_view to_string(ToolKind tool) {
  for (const auto& [k, name] : kTools) {
    if (k == tool) return name;
  }
  return "unknown";
}

ToolKind parse_tool_kind(std::string_view text) {
  for (const auto& [k, name] : kTools) {
    if (name == text) return k;
  }
  throw Error(ErrorCode::parse, "unknown tool '" + std::string(text) + "'");
}

std::string_view to_string(TransportKind t) {
  switch (t) {
    case TransportKind::in_process_mock: return "in_process_mock";
    case TransportKind::stdio: return "stdio";
    case TransportKind::tcp: return "tcp";
  }
  return "unknown";
}

TransportKind parse_transport_kind(std::string_view text) {
  for (auto t : {TransportKind::in_process_mock, TransportKind::stdio, TransportKind::tcp}) {
    if (to_string(t) == text) return t;
  }
  throw Error(ErrorCode::parse, "unknown transport '" + std::string(text) + "'");
}

void validate(const AdapterDescriptor& d) {
  const std::string where = "adapter '" + d.adapter_id + "': ";
  if (d.adapter_id.empty()) throw Error(ErrorCode::config, "adapter_id must be non-empty");
  if (d.timeout_ms <= 0) throw Error(ErrorCode::config, where + "timeout_ms must be > 0");
  if (d.batch_max < 1) throw Error(ErrorCode::config, where + "batch_max must be >= 1");
  if (d.transport == TransportKind::stdio && d.command.empty()) {
    throw Error(ErrorCode::config, where + "stdio transport needs a command");
  }
  if (d.transport == TransportKind::tcp && (d.port <= 0 || d.port > 65535)) {
    throw Error(ErrorCode::config, where + "tcp transport needs a port in 1..65535");
  }
}

AdapterResponse AdapterResponse::success(std::string id, json result) {
  AdapterResponse r;
  r.id = std::move(id);
  r.ok = true;
  r.result = std::move(result);
  return r;
}

AdapterResponse AdapterResponse::failure(std::string id, ErrorCode code, std::string message) {
  AdapterResponse r;
  r.id = std::move(id);
  r.ok = false;
  r.error = AdapterFailure{code, std::move(message)};
  return r;
}

ErrorCode parse_error_code(std::string_view text) {
  for (auto c : {ErrorCode::invalid_argument, ErrorCode::parse, ErrorCode::protocol, ErrorCode::timeout,
                 ErrorCode::unavailable, ErrorCode::unsupported, ErrorCode::no_feasible_chain,
                 ErrorCode::chains_exhausted, ErrorCode::deadline, ErrorCode::config}) {
    if (to_string(c) == text) return c;
  }
  throw Error(ErrorCode::protocol, "unknown error code '" + std::string(text) + "'");
}

std::string encode_request(const AdapterRequest& r) {
  return dump_compact({{"id", r.id}, {"tool", std::string(to_string(r.tool))}, {"op", r.op}, {"payload", r.payload}});
}

std::string encode_response(const AdapterResponse& r) {
  json j = {{"id", r.id}, {"ok", r.ok}};
  if (r.ok) {
    j["result"] = r.result;
  } else {
    const auto& e = r.error.value_or(AdapterFailure{});
    j["error"] = {{"code", std::string(to_string(e.code))}, {"message", e.message}};
  }
  return dump_compact(j);
}

AdapterRequest decode_request(std::string_view line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error&) {
    throw Error(ErrorCode::protocol, "request is not JSON");
  }
  if (!j.is_object() || j.size() != 4 || !j.contains("id") || !j.contains("tool") || !j.contains("op") ||
      !j.contains("payload")) {
    throw Error(ErrorCode::protocol, "request must have exactly id, tool, op, payload");
  }
  if (!j["id"].is_string() || !j["tool"].is_string() || !j["op"].is_string()) {
    throw Error(ErrorCode::protocol, "id, tool and op must be strings");
  }
  AdapterRequest r;
  r.id = j["id"].get<std::string>();
  try {
    r.tool = parse_tool_kind(j["tool"].get<std::string>());
  } catch (const Error& e) {
    throw Error(ErrorCode::protocol, e.what());
  }
  r.op = j["op"].get<std::string>();
  r.payload = j["payload"];
  return r;
}

AdapterResponse decode_response(std::string_view line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error&) {
    throw Error(ErrorCode::protocol, "response is not JSON");
  }
  if (!j.is_object() || j.size() != 3 || !j.contains("id") || !j.contains("ok") || !j["id"].is_string() ||
      !j["ok"].is_boolean()) {
    throw Error(ErrorCode::protocol, "response must have exactly id, ok and one of result/error");
  }
  const bool ok = j["ok"].get<bool>();
  if (ok) {
    if (!j.contains("result")) throw Error(ErrorCode::protocol, "ok response without result");
    return AdapterResponse::success(j["id"].get<std::string>(), j["result"]);
  }
  if (!j.contains("error") || !j["error"].is_object()) throw Error(ErrorCode::protocol, "error response without error");
  const auto& e = j["error"];
  if (!e.contains("code") || !e["code"].is_string()) throw Error(ErrorCode::protocol, "error without code");
  return AdapterResponse::failure(j["id"].get<std::string>(), parse_error_code(e["code"].get<std::string>()),
                                  e.value("message", std::string{}));
}

json encode_binary(std::string_view bytes) { return {{"encoding", "base64"}, {"data", base64_encode(bytes)}}; }

std::string decode_binary(const json& field) {
  if (!field.is_object() || field.value("encoding", std::string{}) != "base64" || !field.contains("data")) {
    throw Error(ErrorCode::protocol, "binary field must be {\"encoding\":\"base64\",\"data\":...}");
  }
  return base64_decode(field["data"].get<std::string>());
}

std::string cache_key(const AdapterRequest& r) {
  std::string material(to_string(r.tool));
  material += '\n';
  material += r.op;
  material += '\n';
  material += canonical_json(r.payload);
  return sha256_hex(material);
}

// --- ResponseCache ---------------------------------------------------------

std::optional<json> ResponseCache::get(const std::string& key) {
  std::lock_guard lock(mutex_);
  auto it = slots_.find(key);
  if (it == slots_.end()) return std::nullopt;
  order_.splice(order_.begin(), order_, it->second.position);
  return it->second.result;
}

void ResponseCache::put(const std::string& key, json result) {
  if (capacity_ == 0) return;
  std::lock_guard lock(mutex_);
  auto it = slots_.find(key);
  if (it != slots_.end()) {
    it->second.result = std::move(result);
    order_.splice(order_.begin(), order_, it->second.position);
    return;
  }
  order_.push_front(key);
  slots_.emplace(key, Slot{std::move(result), order_.begin()});
  while (slots_.size() > capacity_) {
    slots_.erase(order_.back());
    order_.pop_back();
  }
}

std::size_t ResponseCache::size() const {
  std::lock_guard lock(mutex_);
  return slots_.size();
}

// --- Transports ------------------------------------------------------------

std::vector<AdapterResponse> AdapterTransport::exchange(std::span<const AdapterRequest> batch,
                                                        std::chrono::milliseconds timeout) {
  ++calls_;
  return do_exchange(batch, timeout);
}

MockTransport::MockTransport(MockHandler handler)
    : handler_(std::make_shared<const MockHandler>(std::move(handler))) {}

MockTransport::~MockTransport() {
  std::lock_guard lock(stragglers_mutex_);
  stragglers_.clear();  // joins
}

std::vector<AdapterResponse> MockTransport::do_exchange(std::span<const AdapterRequest> batch,
                                                        std::chrono::milliseconds timeout) {
  const auto deadline = Clock_::now() + timeout;
  std::vector<std::future<AdapterResponse>> futures;
  std::vector<std::jthread> threads;
  futures.reserve(batch.size());
  threads.reserve(batch.size());
  for (const auto& req : batch) {
    std::promise<AdapterResponse> promise;
    futures.push_back(promise.get_future());
    threads.emplace_back([handler = handler_, req, p = std::move(promise)]() mutable {
      try {
        p.set_value(AdapterResponse::success(req.id, (*handler)(req)));
      } catch (const Error& e) {
        p.set_value(AdapterResponse::failure(req.id, e.code(), e.what()));
      } catch (const std::exception& e) {
        p.set_value(AdapterResponse::failure(req.id, ErrorCode::unavailable, e.what()));
      }
    });
  }
  std::vector<AdapterResponse> out;
  out.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (futures[i].wait_until(deadline) == std::future_status::ready) {
      out.push_back(futures[i].get());
      threads[i].join();
    } else {
      out.push_back(AdapterResponse::failure(batch[i].id, ErrorCode::timeout,
                                             "no reply within " + std::to_string(timeout.count()) + " ms"));
      std::lock_guard lock(stragglers_mutex_);
      stragglers_.push_back(std::move(threads[i]));
    }
  }
  return out;
}

/// Buffered line reader/writer over a pair of file descriptors.
class LineChannel {
 public:
  LineChannel(int read_fd, int write_fd) : read_fd_(read_fd), write_fd_(write_fd) {}
  ~LineChannel() {
    if (read_fd_ >= 0) ::close(read_fd_);
    if (write_fd_ >= 0 && write_fd_ != read_fd_) ::close(write_fd_);
  }
  LineChannel(const LineChannel&) = delete;
  LineChannel& operator=(const LineChannel&) = delete;

  bool write_line(const std::string& line) {
    std::string data = line + "\n";
    std::size_t off = 0;
    while (off < data.size()) {
      const ssize_t n = ::write(write_fd_, data.data() + off, data.size() - off);
      if (n < 0) {
        if (errno == EINTR) continue;
        return false;
      }
      off += static_cast<std::size_t>(n);
    }
    return true;
  }

  enum class ReadStatus { line, timeout, closed };

  ReadStatus read_line(Clock_::time_point deadline, std::string& line) {
    for (;;) {
      const auto nl = buffer_.find('\n');
      if (nl != std::string::npos) {
        line = buffer_.substr(0, nl);
        buffer_.erase(0, nl + 1);
        return ReadStatus::line;
      }
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock_::now()).count();
      if (left <= 0) return ReadStatus::timeout;
      pollfd pfd{read_fd_, POLLIN, 0};
      const int rc = ::poll(&pfd, 1, static_cast<int>(left));
      if (rc < 0) {
        if (errno == EINTR) continue;
        return ReadStatus::closed;
      }
      if (rc == 0) return ReadStatus::timeout;
      char chunk[4096];
      const ssize_t n = ::read(read_fd_, chunk, sizeof chunk);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) return ReadStatus::closed;
      buffer_.append(chunk, static_cast<std::size_t>(n));
    }
  }

 private:
  int read_fd_;
  int write_fd_;
  std::string buffer_;
};

namespace {

enum class ChannelOutcome { ok, broken };

/// Writes the batch and collects replies matched by id. Any protocol
/// violation, EOF or timeout leaves the channel unusable.
ChannelOutcome run_line_exchange(LineChannel& channel, std::span<const AdapterRequest> batch,
                                 std::chrono::milliseconds timeout, std::vector<AdapterResponse>& out) {
  const auto deadline = Clock_::now() + timeout;
  std::map<std::string, std::size_t> pending;
  out.clear();
  for (std::size_t i = 0; i < batch.size(); ++i) {
    pending.emplace(batch[i].id, i);
    out.push_back(AdapterResponse::failure(batch[i].id, ErrorCode::timeout, "no reply"));
  }
  auto fail_pending = [&](ErrorCode code, const std::string& msg) {
    for (const auto& [id, idx] : pending) out[idx] = AdapterResponse::failure(id, code, msg);
  };
  for (const auto& req : batch) {
    if (!channel.write_line(encode_request(req))) {
      fail_pending(ErrorCode::unavailable, "adapter input closed");
      return ChannelOutcome::broken;
    }
  }
  while (!pending.empty()) {
    std::string line;
    switch (channel.read_line(deadline, line)) {
      case LineChannel::ReadStatus::timeout:
        fail_pending(ErrorCode::timeout, "no reply within " + std::to_string(timeout.count()) + " ms");
        return ChannelOutcome::broken;
      case LineChannel::ReadStatus::closed:
        fail_pending(ErrorCode::unavailable, "adapter exited");
        return ChannelOutcome::broken;
      case LineChannel::ReadStatus::line:
        break;
    }
    AdapterResponse resp;
    try {
      resp = decode_response(line);
    } catch (const Error& e) {
      fail_pending(ErrorCode::protocol, std::string("malformed reply: ") + e.what());
      return ChannelOutcome::broken;
    }
    auto it = pending.find(resp.id);
    if (it == pending.end()) {
      fail_pending(ErrorCode::protocol, "reply id '" + resp.id + "' matches no pending request");
      return ChannelOutcome::broken;
    }
    out[it->second] = std::move(resp);
    pending.erase(it);
  }
  return ChannelOutcome::ok;
}

}  // namespace

StdioTransport::StdioTransport(std::vector<std::string> command) : command_(std::move(command)) {
  ignore_sigpipe();
}

StdioTransport::~StdioTransport() {
  std::lock_guard lock(mutex_);
  stop();
}

void StdioTransport::start() {
  int to_child[2];
  int from_child[2];
  if (::pipe2(to_child, O_CLOEXEC) != 0) throw Error(ErrorCode::unavailable, "pipe failed");
  if (::pipe2(from_child, O_CLOEXEC) != 0) {
    ::close(to_child[0]);
    ::close(to_child[1]);
    throw Error(ErrorCode::unavailable, "pipe failed");
  }
  std::vector<char*> argv;
  for (auto& a : command_) argv.push_back(a.data());
  argv.push_back(nullptr);
  const pid_t pid = ::fork();
  if (pid < 0) throw Error(ErrorCode::unavailable, "fork failed");
  if (pid == 0) {
    ::dup2(to_child[0], STDIN_FILENO);
    ::dup2(from_child[1], STDOUT_FILENO);
    ::execvp(argv[0], argv.data());
    ::_exit(127);
  }
  ::close(to_child[0]);
  ::close(from_child[1]);
  pid_ = pid;
  channel_ = std::make_unique<LineChannel>(from_child[0], to_child[1]);
}

void StdioTransport::stop() {
  channel_.reset();  // closes the child's stdin
  if (pid_ > 0) {
    int status = 0;
    for (int i = 0; i < 50; ++i) {
      if (::waitpid(pid_, &status, WNOHANG) == pid_) {
        pid_ = -1;
        return;
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(2));
    }
    ::kill(pid_, SIGKILL);
    ::waitpid(pid_, &status, 0);
    pid_ = -1;
  }
}

std::vector<AdapterResponse> StdioTransport::do_exchange(std::span<const AdapterRequest> batch,
                                                         std::chrono::milliseconds timeout) {
  std::lock_guard lock(mutex_);
  std::vector<AdapterResponse> out;
  try {
    if (!channel_) start();
  } catch (const Error& e) {
    for (const auto& r : batch) out.push_back(AdapterResponse::failure(r.id, ErrorCode::unavailable, e.what()));
    return out;
  }
  if (run_line_exchange(*channel_, batch, timeout, out) == ChannelOutcome::broken) stop();
  return out;
}

TcpTransport::TcpTransport(std::string host, int port) : host_(std::move(host)), port_(port) { ignore_sigpipe(); }

TcpTransport::~TcpTransport() = default;

void TcpTransport::connect_channel() {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  const std::string port = std::to_string(port_);
  if (::getaddrinfo(host_.c_str(), port.c_str(), &hints, &res) != 0 || res == nullptr) {
    throw Error(ErrorCode::unavailable, "cannot resolve " + host_);
  }
  int fd = -1;
  for (addrinfo* ai = res; ai != nullptr; ai = ai->ai_next) {
    fd = ::socket(ai->ai_family, ai->ai_socktype | SOCK_CLOEXEC, ai->ai_protocol);
    if (fd < 0) continue;
    if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) break;
    ::close(fd);
    fd = -1;
  }
  ::freeaddrinfo(res);
  if (fd < 0) throw Error(ErrorCode::unavailable, "cannot connect to " + host_ + ":" + port);
  channel_ = std::make_unique<LineChannel>(fd, fd);
}

std::vector<AdapterResponse> TcpTransport::do_exchange(std::span<const AdapterRequest> batch,
                                                       std::chrono::milliseconds timeout) {
  std::lock_guard lock(mutex_);
  std::vector<AdapterResponse> out;
  try {
    if (!channel_) connect_channel();
  } catch (const Error& e) {
    for (const auto& r : batch) out.push_back(AdapterResponse::failure(r.id, ErrorCode::unavailable, e.what()));
    return out;
  }
  if (run_line_exchange(*channel_, batch, timeout, out) == ChannelOutcome::broken) channel_.reset();
  return out;
}

std::unique_ptr<AdapterTransport> make_transport(const AdapterDescriptor& d) {
  switch (d.transport) {
    case TransportKind::stdio: return std::make_unique<StdioTransport>(d.command);
    case TransportKind::tcp: return std::make_unique<TcpTransport>(d.host, d.port);
    case TransportKind::in_process_mock: break;
  }
  throw Error(ErrorCode::config, "adapter '" + d.adapter_id + "': in-process mocks need a handler");
}

// --- AdapterClient ---------------------------------------------------------

AdapterClient::AdapterClient(AdapterDescriptor descriptor, std::unique_ptr<AdapterTransport> transport)
    : descriptor_(std::move(descriptor)), transport_(std::move(transport)), cache_(descriptor_.cache_capacity) {
  validate(descriptor_);
}

AdapterResponse AdapterClient::invoke(const AdapterRequest& request, std::optional<std::chrono::milliseconds> budget) {
  auto out = invoke_batched(std::span<const AdapterRequest>(&request, 1), budget);
  return std::move(out.front());
}

std::vector<AdapterResponse> AdapterClient::invoke_batched(std::span<const AdapterRequest> requests,
                                                           std::optional<std::chrono::milliseconds> budget) {
  invocations_ += requests.size();
  {
    std::set<std::string_view> ids;
    for (const auto& r : requests) {
      if (!ids.insert(r.id).second) {
        throw Error(ErrorCode::invalid_argument, "duplicate request id '" + r.id + "' in batch");
      }
    }
  }
  auto timeout = std::chrono::milliseconds(descriptor_.timeout_ms);
  if (budget) timeout = std::max(std::chrono::milliseconds(0), std::min(timeout, *budget));

  std::vector<std::optional<AdapterResponse>> out(requests.size());
  std::vector<std::string> keys(requests.size());
  // Index into `requests` of the item actually sent, per distinct key.
  std::map<std::string, std::size_t> leader;
  std::vector<std::size_t> to_send;
  for (std::size_t i = 0; i < requests.size(); ++i) {
    if (descriptor_.cacheable) {
      keys[i] = cache_key(requests[i]);
      if (auto hit = cache_.get(keys[i])) {
        out[i] = AdapterResponse::success(requests[i].id, std::move(*hit));
        continue;
      }
      if (leader.contains(keys[i])) continue;
      leader.emplace(keys[i], i);
    }
    to_send.push_back(i);
  }

  for (std::size_t start = 0; start < to_send.size(); start += descriptor_.batch_max) {
    const std::size_t end = std::min(to_send.size(), start + descriptor_.batch_max);
    std::vector<AdapterRequest> batch;
    for (std::size_t k = start; k < end; ++k) batch.push_back(requests[to_send[k]]);
    auto replies = transport_->exchange(batch, timeout);
    if (replies.size() != batch.size()) {
      replies.clear();
      for (const auto& r : batch) {
        replies.push_back(AdapterResponse::failure(r.id, ErrorCode::protocol, "transport returned misaligned batch"));
      }
    }
    for (std::size_t k = start; k < end; ++k) {
      const std::size_t i = to_send[k];
      auto& reply = replies[k - start];
      if (reply.id != requests[i].id) {
        reply = AdapterResponse::failure(requests[i].id, ErrorCode::protocol,
                                         "reply id '" + reply.id + "' does not match request");
      }
      if (descriptor_.cacheable && reply.ok) cache_.put(keys[i], reply.result);
      out[i] = std::move(reply);
    }
  }

  // Followers of an identical request sent in this call copy the leader's reply.
  for (std::size_t i = 0; i < requests.size(); ++i) {
    if (out[i]) continue;
    AdapterResponse copy = *out[leader.at(keys[i])];
    copy.id = requests[i].id;
    out[i] = std::move(copy);
  }
  std::vector<AdapterResponse> result;
  result.reserve(requests.size());
  for (auto& o : out) result.push_back(std::move(*o));
  return result;
}

void AdapterRegistry::add(std::shared_ptr<AdapterClient> client) {
  if (find(client->descriptor().adapter_id)) {
    throw Error(ErrorCode::config, "duplicate adapter id '" + client->descriptor().adapter_id + "'");
  }
  clients_.push_back(std::move(client));
}

std::shared_ptr<AdapterClient> AdapterRegistry::find(std::string_view adapter_id) const {
  for (const auto& c : clients_) {
    if (c->descriptor().adapter_id == adapter_id) return c;
  }
  return nullptr;
}

std::shared_ptr<AdapterClient> AdapterRegistry::for_tool(ToolKind tool) const {
  for (const auto& c : clients_) {
    if (c->descriptor().tool == tool) return c;
  }
  return nullptr;
}

std::size_t AdapterRegistry::total_invocations() const {
  std::size_t n = 0;
  for (const auto& c : clients_) n += c->invocations();
  return n;
}

// --- Mock handlers ---------------------------------------------------------

MockHandler echo_handler() {
  return [](const AdapterRequest& r) { return r.payload; };
}

MockHandler table_handler(json table) {
  auto shared = std::make_shared<const json>(std::move(table));
  return [shared](const AdapterRequest& r) -> json {
    const json& t = *shared;
    auto apply = [&](const json& entry) -> json {
      if (entry.contains("delay_ms")) {
        std::this_thread::sleep_for(std::chrono::milliseconds(entry["delay_ms"].get<int>()));
      }
      if (entry.contains("error")) {
        const auto& e = entry["error"];
        throw Error(parse_error_code(e.value("code", std::string("UNAVAILABLE"))), e.value("message", std::string{}));
      }
      return entry.value("result", json::object());
    };
    if (t.contains("entries")) {
      for (const auto& entry : t["entries"]) {
        if (entry.contains("op") && entry["op"].get<std::string>() != r.op) continue;
        if (entry.contains("key") && entry["key"].get<std::string>() != cache_key(r)) continue;
        bool match = true;
        if (entry.contains("match")) {
          for (const auto& [field, value] : entry["match"].items()) {
            if (!r.payload.is_object() || !r.payload.contains(field) || r.payload[field] != value) {
              match = false;
              break;
            }
          }
        }
        if (match) return apply(entry);
      }
    }
    if (t.contains("default")) return apply(t["default"]);
    throw Error(ErrorCode::unsupported, "no fixture entry for op '" + r.op + "'");
  };
}

std::vector<double> energy_vad(std::span<const double> samples, int sample_rate, const EnergyVadConfig& cfg) {
  if (samples.empty()) return {};
  const auto frame_len =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(cfg.frame_ms * sample_rate / 1000.0)));
  std::vector<double> rms;
  for (std::size_t start = 0; start < samples.size(); start += frame_len) {
    const std::size_t end = std::min(samples.size(), start + frame_len);
    double acc = 0.0;
    for (std::size_t i = start; i < end; ++i) acc += samples[i] * samples[i];
    rms.push_back(std::sqrt(acc / static_cast<double>(end - start)));
  }
  const double peak = *std::max_element(rms.begin(), rms.end());
  std::vector<double> probs(rms.size(), 0.0);
  if (peak <= 0.0) return probs;
  const double denom = cfg.energy_threshold * peak;
  for (std::size_t i = 0; i < rms.size(); ++i) {
    probs[i] = denom <= 0.0 ? (rms[i] > 0.0 ? 1.0 : 0.0) : std::min(1.0, rms[i] / denom);
  }
  return probs;
}

std::string classify_text(std::string_view text) {
  const std::string lower = ascii_lower(text);
  if (lower.find("```") != std::string::npos || lower.find("#include") != std::string::npos ||
      lower.find("def ") != std::string::npos) {
    return "code";
  }
  if (lower.find("how do i") != std::string::npos || lower.find("how to use") != std::string::npos) {
    return "tool_usage";
  }
  return "general";
}

MockHandler reference_handler() {
  return [](const AdapterRequest& r) -> json {
    if (r.op == "echo") return r.payload;
    if (r.op == "complete") return {{"text", r.payload.at("prompt").get<std::string>()}};
    if (r.op == "classify") return {{"label", classify_text(r.payload.at("text").get<std::string>())}};
    if (r.op == "vad") {
      const std::string pcm = decode_binary(r.payload.at("pcm16"));
      std::vector<double> samples(pcm.size() / 2);
      for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto lo = static_cast<unsigned char>(pcm[2 * i]);
        const auto hi = static_cast<unsigned char>(pcm[2 * i + 1]);
        samples[i] = static_cast<std::int16_t>(static_cast<std::uint16_t>(lo | (hi << 8))) / 32768.0;
      }
      EnergyVadConfig cfg;
      cfg.frame_ms = r.payload.value("frame_ms", 10.0);
      cfg.energy_threshold = r.payload.value("energy_threshold", 0.1);
      if (samples.empty()) throw Error(ErrorCode::invalid_argument, "vad needs non-empty samples");
      return {{"probs", energy_vad(samples, r.payload.value("sample_rate", 16000), cfg)}};
    }
    throw Error(ErrorCode::unsupported, "unsupported op '" + r.op + "'");
  };
}

std::string protocol_reply(const MockHandler& handler, std::string_view line, std::size_t line_no) {
  AdapterRequest req;
  try {
    req = decode_request(line);
  } catch (const Error& e) {
    return encode_response(
        AdapterResponse::failure("", ErrorCode::protocol, "line " + std::to_string(line_no) + ": " + e.what()));
  }
  try {
    return encode_response(AdapterResponse::success(req.id, handler(req)));
  } catch (const Error& e) {
    return encode_response(AdapterResponse::failure(req.id, e.code(), e.what()));
  } catch (const std::exception& e) {
    return encode_response(AdapterResponse::failure(req.id, ErrorCode::invalid_argument, e.what()));
  }
}

}  // namespace distill
