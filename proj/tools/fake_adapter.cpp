// Line-protocol adapter for integration tests. Serves the reference handler
// over stdio or TCP and can misbehave on demand.
#include <CLI11.hpp>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <optional>
#include <iostream>
#include <string>
#include <thread>

#include "distill/adapters.hpp"

namespace {

struct Behaviour {
  std::string mode = "reference";  // reference|echo|garbage|hang|exit|wrong_id|error|slow
  int after = 0;                   // requests served normally before misbehaving
  int delay_ms = 0;
  std::string error_code = "UNAVAILABLE";
};

std::atomic<int> g_served{0};

/// Reply line for one request line, or nullopt to stay silent. Sets `quit`
/// when the process should exit.
std::optional<std::string> respond(const std::string& line, const Behaviour& b, bool& quit) {
  using namespace distill;
  const int n = g_served++;
  const bool misbehave = n >= b.after;
  static const MockHandler reference = reference_handler();
  static const MockHandler echo = echo_handler();
  const std::string mode = misbehave ? b.mode : "reference";
  AdapterRequest req;
  try {
    req = decode_request(line);
  } catch (const Error&) {
    return protocol_reply(reference, line, static_cast<std::size_t>(n) + 1);
  }
  if (mode == "garbage") return std::string("this is not json");
  if (mode == "hang") return std::nullopt;
  if (mode == "exit") {
    quit = true;
    return std::nullopt;
  }
  if (mode == "wrong_id") return encode_response(AdapterResponse::success(req.id + "-other", nlohmann::json::object()));
  if (mode == "error") return encode_response(AdapterResponse::failure(req.id, parse_error_code(b.error_code), "injected"));
  if (mode == "slow") std::this_thread::sleep_for(std::chrono::milliseconds(b.delay_ms));
  return protocol_reply(mode == "echo" ? echo : reference, line, static_cast<std::size_t>(n) + 1);
}

void serve_fd(int in_fd, int out_fd, const Behaviour& b) {
  std::string buffer;
  char chunk[4096];
  for (;;) {
    const ssize_t got = ::read(in_fd, chunk, sizeof chunk);
    if (got <= 0) return;
    buffer.append(chunk, static_cast<std::size_t>(got));
    std::size_t nl;
    while ((nl = buffer.find('\n')) != std::string::npos) {
      const std::string line = buffer.substr(0, nl);
      buffer.erase(0, nl + 1);
      bool quit = false;
      auto reply = respond(line, b, quit);
      if (quit) std::_Exit(3);
      if (!reply) continue;
      *reply += "\n";
      std::size_t off = 0;
      while (off < reply->size()) {
        const ssize_t w = ::write(out_fd, reply->data() + off, reply->size() - off);
        if (w <= 0) return;
        off += static_cast<std::size_t>(w);
      }
    }
  }
}

int serve_tcp(int port, const Behaviour& b) {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  int one = 1;
  ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(static_cast<uint16_t>(port));
  if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(fd, 8) != 0) {
    std::perror("bind");
    return 1;
  }
  socklen_t len = sizeof addr;
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
  std::printf("%d\n", ntohs(addr.sin_port));
  std::fflush(stdout);
  for (;;) {
    const int conn = ::accept(fd, nullptr, nullptr);
    if (conn < 0) return 1;
    std::thread([conn, b] {
      serve_fd(conn, conn, b);
      ::close(conn);
    }).detach();
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fake line-protocol adapter"};
  Behaviour b;
  int tcp_port = -1;
  app.add_option("--mode", b.mode)
      ->check(CLI::IsMember({"reference", "echo", "garbage", "hang", "exit", "wrong_id", "error", "slow"}));
  app.add_option("--after", b.after, "Requests served normally first");
  app.add_option("--delay-ms", b.delay_ms);
  app.add_option("--error-code", b.error_code);
  app.add_option("--tcp", tcp_port, "Listen on this port (0 = any) and print it");
  CLI11_PARSE(app, argc, argv);
  if (tcp_port >= 0) return serve_tcp(tcp_port, b);
  serve_fd(STDIN_FILENO, STDOUT_FILENO, b);
  return 0;
}
