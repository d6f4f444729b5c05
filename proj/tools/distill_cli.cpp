#include <CLI11.hpp>

#include <algorithm>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "distill/compiler.hpp"
#include "distill/gateway.hpp"
#include "distill/retrieval.hpp"
#include "distill/schema.hpp"
#include "distill/server.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw distill::Error(distill::ErrorCode::invalid_argument, "cannot read '" + p.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

distill::HttpServer* g_server = nullptr;

void on_signal(int) {
  if (g_server) g_server->stop();
}

int cmd_serve(const std::string& config, const std::string& host, int port) {
  distill::Gateway gateway(distill::load_config(config));
  distill::HttpServer server(gateway);
  const int bound = server.bind(host, port);
  if (bound < 0) {
    std::cerr << "error: cannot bind " << host << ":" << port << "\n";
    return kExitRuntime;
  }
  g_server = &server;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::cout << "listening on " << host << ":" << bound << std::endl;
  server.serve();
  g_server = nullptr;
  return 0;
}

int cmd_run(const std::string& config, const std::string& query, const std::vector<std::string>& files,
            const std::vector<std::string>& urls, bool emit_trace, bool emit_prompt) {
  distill::Gateway gateway(distill::load_config(config));
  distill::Request req;
  if (!query.empty()) req.text = query;
  for (const auto& f : files) {
    distill::Attachment a;
    a.name = fs::path(f).filename().string();
    a.payload = slurp(f);
    req.attachments.push_back(std::move(a));
  }
  req.declared_urls = urls;
  const auto result = gateway.handle_request(std::move(req));
  std::cout << distill::canonical_json(result.body) << "\n";
  const auto& ext = result.body.at("interfaze");
  if (emit_trace && ext.contains("trace")) {
    for (const auto& s : ext["trace"]) {
      std::cerr << s.value("chain_id", "") << " step=" << s.value("step", 0) << " " << s.value("kind", "") << " "
                << s.value("label", "") << " " << s.value("outcome", "") << "\n";
    }
  }
  if (emit_prompt && !result.prompt.empty()) std::cerr << result.prompt;
  return result.http_status == 200 ? 0 : kExitRuntime;
}

int cmd_index_build(const std::string& kind, const std::string& input, const std::string& out,
                    std::size_t max_block_tokens, const std::string& timestamp) {
  const auto k = distill::parse_index_kind(kind);
  const auto index = distill::build_index_from_directory(k, input, max_block_tokens, distill::parse_timestamp(timestamp));
  std::ofstream o(out, std::ios::binary);
  if (!o) throw distill::Error(distill::ErrorCode::invalid_argument, "cannot write '" + out + "'");
  o << distill::dump_index(index);
  std::cout << index.segments.size() << " segments\n";
  return 0;
}

int cmd_compile(const std::string& dir, const std::string& query, const std::string& budgets_file, bool emit_json) {
  distill::CompileInput input;
  input.query = query;
  input.budgets = distill::GatewayConfig{}.budgets;
  if (!budgets_file.empty()) {
    const json b = json::parse(slurp(budgets_file));
    input.budgets.observations_max = b.value("observations", input.budgets.observations_max);
    input.budgets.entities_max = b.value("entities", input.budgets.entities_max);
    input.budgets.relations_max = b.value("relations", input.budgets.relations_max);
    input.budgets.provenance_max = b.value("provenance", input.budgets.provenance_max);
    if (b.contains("floors")) input.floors = distill::parse_floors(b["floors"]);
  }
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    input.fragments.push_back({f.filename().string(), distill::state_from_json(json::parse(slurp(f)))});
  }
  const auto state = distill::compile_context(input);
  if (emit_json) {
    std::cout << distill::canonical_serialize(state) << "\n";
  } else {
    std::cout << distill::render_prompt(state, query, input.budgets);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Context-compiling tool gateway"};
  app.require_subcommand(1);

  std::string config;
  std::string host = "127.0.0.1";
  int port = 8080;
  auto* serve = app.add_subcommand("serve", "Run the HTTP gateway");
  serve->add_option("--config", config, "Config file (default: $INTERFAZE_CONFIG)");
  serve->add_option("--host", host);
  serve->add_option("--port", port);

  std::string query;
  std::vector<std::string> files;
  std::vector<std::string> urls;
  bool emit_trace = false;
  bool emit_prompt = false;
  auto* run = app.add_subcommand("run", "Handle one request and print the response");
  run->add_option("--config", config, "Config file (default: $INTERFAZE_CONFIG)");
  run->add_option("--query", query);
  run->add_option("--file", files)->check(CLI::ExistingFile);
  run->add_option("--url", urls);
  run->add_flag("--emit-trace", emit_trace, "Print the step trace to stderr");
  run->add_flag("--emit-prompt", emit_prompt, "Print the model prompt to stderr");

  auto* index = app.add_subcommand("index", "Index maintenance");
  index->require_subcommand(1);
  std::string kind;
  std::string input;
  std::string out;
  std::size_t max_block_tokens = 64;
  std::string timestamp = "1970-01-01T00:00:00Z";
  auto* build = index->add_subcommand("build", "Index a directory");
  build->add_option("--kind", kind)->required();
  build->add_option("--input", input)->required()->check(CLI::ExistingDirectory);
  build->add_option("--out", out)->required();
  build->add_option("--max-block-tokens", max_block_tokens);
  build->add_option("--timestamp", timestamp);

  std::string fragments;
  std::string budgets;
  bool emit_json = false;
  auto* compile = app.add_subcommand("compile", "Compile state fragments into a prompt");
  compile->add_option("--fragments", fragments)->required()->check(CLI::ExistingDirectory);
  compile->add_option("--query", query);
  compile->add_option("--budgets", budgets)->check(CLI::ExistingFile);
  compile->add_flag("--emit-json", emit_json, "Print canonical state instead of the prompt");

  CLI11_PARSE(app, argc, argv);

  try {
    if (serve->parsed()) return cmd_serve(config, host, port);
    if (run->parsed()) return cmd_run(config, query, files, urls, emit_trace, emit_prompt);
    if (build->parsed()) return cmd_index_build(kind, input, out, max_block_tokens, timestamp);
    if (compile->parsed()) return cmd_compile(fragments, query, budgets, emit_json);
  } catch (const distill::Error& e) {
    std::cerr << "error: " << distill::to_string(e.code()) << ": " << e.what() << "\n";
    return e.code() == distill::ErrorCode::config ? kExitConfig : kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
