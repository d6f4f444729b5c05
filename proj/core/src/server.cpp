#include "distill/server.hpp"

#include <httplib.h>

#include "distill/schema.hpp"

namespace distill {

using nlohmann::json;

struct HttpServer::Impl {
  Gateway& gateway;
  httplib::Server server;

  explicit Impl(Gateway& g) : gateway(g) {
    server.Get("/healthz", [](const httplib::Request&, httplib::Response& res) {
      res.set_content("{\"status\":\"ok\"}", "application/json");
    });
    server.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      CompletionResult result;
      json body = json::parse(req.body, nullptr, false);
      if (body.is_discarded()) {
        result = gateway.handle_completion(json());
      } else {
        result = gateway.handle_completion(body);
      }
      res.status = result.http_status;
      res.set_content(canonical_json(result.body), "application/json");
    });
  }
};

HttpServer::HttpServer(Gateway& gateway) : impl_(std::make_unique<Impl>(gateway)) {}
HttpServer::~HttpServer() { stop(); }

bool HttpServer::listen(const std::string& host, int port) { return impl_->server.listen(host, port); }

int HttpServer::bind(const std::string& host, int port) {
  if (port == 0) return impl_->server.bind_to_any_port(host);
  return impl_->server.bind_to_port(host, port) ? port : -1;
}

bool HttpServer::serve() { return impl_->server.listen_after_bind(); }

void HttpServer::stop() {
  if (impl_) impl_->server.stop();
}

}  // namespace distill
