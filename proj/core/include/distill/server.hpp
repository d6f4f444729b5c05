#pragma once

#include <functional>
#include <memory>
#include <string>

#include "distill/gateway.hpp"

namespace distill {

/// OpenAI-compatible HTTP front end: POST /v1/chat/completions, GET /healthz.
class HttpServer {
 public:
  explicit HttpServer(Gateway& gateway);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  /// Binds and serves until stop(). Port 0 picks a free port. Returns false
  /// if binding fails.
  bool listen(const std::string& host, int port);
  /// Binds without serving; returns the bound port or -1.
  int bind(const std::string& host, int port);
  /// Serves on a socket from bind(). Blocks until stop().
  bool serve();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace distill
