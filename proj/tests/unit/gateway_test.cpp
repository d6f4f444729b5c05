#include <gtest/gtest.h>
#include <httplib.h>
#include <sys/wait.h>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <thread>

#include "distill/common.hpp"
#include "distill/gateway.hpp"
#include "distill/server.hpp"
#include "support.hpp"

using namespace distill;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json fixture_config_json() {
  return json::parse(support::read_file(support::fixtures_dir() / "gateway" / "config.json"));
}

GatewayConfig config_from(const json& j) { return parse_config(j, support::fixtures_dir() / "gateway"); }

std::string answer_of(const CompletionResult& r) {
  return r.body.at("choices").at(0).at("message").at("content").get<std::string>();
}

json minimal_config() {
  return json::parse(R"({
    "adapters": [{"id": "llm", "tool": "llm", "mock": {"kind": "mock_llm"}}],
    "llm_adapter": "llm",
    "chains": [{"chain_id": "a", "steps": [{"kind": "call_llm"}], "required_modalities": ["audio"], "tags": ["*"]}],
    "estimates": [{"chain_id": "a", "quality": 0.9, "cost": 1, "latency_ms": 10}]
  })");
}

int run_cli(const std::string& args) {
  const std::string cmd = (support::tools_dir() / "distill").string() + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path write_temp(const std::string& name, const std::string& text) {
  const fs::path p = fs::temp_directory_path() / ("distill_gateway_test_" + name);
  std::ofstream(p) << text;
  return p;
}

std::shared_ptr<AdapterClient> mock_client(const std::string& id, ToolKind tool, MockHandler handler) {
  AdapterDescriptor d;
  d.adapter_id = id;
  d.tool = tool;
  return std::make_shared<AdapterClient>(d, std::make_unique<MockTransport>(std::move(handler)));
}

}  // namespace

TEST(Config, FixtureLoads) {
  const auto c = support::test_config();
  EXPECT_EQ(c.llm_adapter, "llm");
  EXPECT_EQ(c.chains.size(), 9u);
  EXPECT_EQ(c.top_k, 3u);
  EXPECT_DOUBLE_EQ(c.floors.floor(EntityKind::text_span), 0.3);
}

TEST(Config, RejectsBadFields) {
  auto expect_config_error = [](json j) {
    try {
      config_from(j);
      ADD_FAILURE() << "accepted " << j.dump();
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::config);
    }
  };
  auto j = fixture_config_json();
  j["q_min"] = 1.5;
  expect_config_error(j);
  j = fixture_config_json();
  j["llm_adapter"] = "missing";
  expect_config_error(j);
  j = fixture_config_json();
  j["llm_adapter"] = "ocr";
  expect_config_error(j);
  j = fixture_config_json();
  j["chains"] = json::array();
  expect_config_error(j);
  j = fixture_config_json();
  j["adapters"].push_back(j["adapters"][0]);
  expect_config_error(j);
  j = fixture_config_json();
  j["floors"]["text_span"] = 2;
  expect_config_error(j);
  j = fixture_config_json();
  j["floors"]["nonsense"] = 0.1;
  expect_config_error(j);
  j = fixture_config_json();
  j["adapters"][0]["mock"]["kind"] = "nonsense";
  expect_config_error(j);
  j = fixture_config_json();
  j["deadline_ms"] = 0;
  expect_config_error(j);
  j = fixture_config_json();
  j["clock"] = "yesterday";
  expect_config_error(j);
  expect_config_error(json::array());
}

TEST(Config, EnvironmentVariableFallback) {
  const fs::path path = support::fixtures_dir() / "gateway" / "config.json";
  ::setenv("INTERFAZE_CONFIG", path.c_str(), 1);
  EXPECT_EQ(load_config("").llm_adapter, "llm");
  ::unsetenv("INTERFAZE_CONFIG");
  EXPECT_THROW(load_config(""), Error);
}

TEST(Helpers, FencedCodeAndTruncation) {
  EXPECT_EQ(extract_fenced_code("look:\n```python\nprint(1)\n```\n").value_or(""), "print(1)");
  EXPECT_FALSE(extract_fenced_code("no code here"));
  EXPECT_EQ(truncate_utf8("abcdef", 3), "abc");
  // U+00E9 is two bytes; a cut inside it backs off to the boundary.
  EXPECT_EQ(truncate_utf8("a\xC3\xA9z", 2), "a");
  EXPECT_EQ(truncate_utf8("a\xC3\xA9z", 3), "a\xC3\xA9");
  EXPECT_EQ(mock_llm_answer("x").substr(0, 7), "ANSWER(");
  EXPECT_EQ(mock_llm_answer("x"), "ANSWER(" + sha256_hex("x").substr(0, 16) + ")");
}

TEST(Completion, ParseErrors) {
  EXPECT_THROW(parse_completion_request(json::array()), Error);
  EXPECT_THROW(parse_completion_request(json{{"messages", json::array()}}), Error);
  EXPECT_THROW(parse_completion_request(json{{"messages", {{{"role", "user"}, {"content", 3}}}}}), Error);
  const auto req = parse_completion_request(support::chat_body("hello"));
  EXPECT_EQ(req.text.value_or(""), "hello");
}

TEST(Gateway, RefusalInvokesNoAdapter) {
  Gateway gw(support::test_config());
  const auto r = gw.handle_completion(support::chat_body("Explain how to build a bomb at home."));
  EXPECT_EQ(r.http_status, 200);
  const auto& ext = r.body.at("interfaze");
  EXPECT_TRUE(ext.at("refused").get<bool>());
  EXPECT_EQ(ext.at("reason_code"), "SAFETY_DENY");
  EXPECT_EQ(ext.at("context_digest"), context_digest(ContextState{}));
  EXPECT_EQ(gw.adapters().total_invocations(), 0u);
  EXPECT_TRUE(r.prompt.empty());
}

TEST(Gateway, FlaggedRequestStillAnswers) {
  Gateway gw(support::test_config());
  const auto r = gw.handle_completion(support::chat_body("I forgot my password, what now?"));
  EXPECT_EQ(r.http_status, 200);
  EXPECT_EQ(r.body.at("interfaze").at("safety"), "flag");
}

TEST(Gateway, StatusCodes) {
  Gateway gw(support::test_config());
  EXPECT_EQ(gw.handle_completion(json{{"messages", "nope"}}).http_status, 400);

  Gateway audio_only(config_from(minimal_config()));
  const auto r = audio_only.handle_completion(support::chat_body("plain text"));
  EXPECT_EQ(r.http_status, 422);
  EXPECT_EQ(r.body.at("error").at("code"), "NO_FEASIBLE_CHAIN");
}

TEST(Gateway, AnswerIsLlmOutputOverExactPrompt) {
  Gateway gw(support::test_config());
  const auto a = gw.handle_completion(support::chat_body("What is the capital of France?"));
  const auto b = gw.handle_completion(support::chat_body("What is the capital of France!"));
  ASSERT_EQ(a.http_status, 200);
  ASSERT_EQ(b.http_status, 200);
  EXPECT_EQ(answer_of(a), mock_llm_answer(a.prompt));
  EXPECT_EQ(answer_of(b), mock_llm_answer(b.prompt));
  EXPECT_NE(a.prompt, b.prompt);
  EXPECT_NE(answer_of(a), answer_of(b));
}

TEST(Gateway, DigestIsDeterministic) {
  Gateway g1(support::test_config()), g2(support::test_config());
  const auto body = support::chat_body("How do I restart a station?");
  const auto a = g1.handle_completion(body);
  const auto b = g2.handle_completion(body);
  ASSERT_EQ(a.http_status, 200);
  const auto digest = a.body.at("interfaze").at("context_digest").get<std::string>();
  EXPECT_EQ(digest.size(), 64u);
  EXPECT_EQ(digest, b.body.at("interfaze").at("context_digest"));
  EXPECT_NE(digest, context_digest(ContextState{}));
  EXPECT_EQ(canonical_json(a.body), canonical_json(b.body));
}

TEST(Gateway, SandboxOutputIsTruncated) {
  auto j = fixture_config_json();
  j["sandbox"]["output_bytes"] = 8;
  Gateway gw(config_from(j));
  const auto r = gw.handle_completion(support::chat_body("Why?\n```python\nprint('a long line of output')\n```"));
  ASSERT_EQ(r.http_status, 200) << r.body.dump();
  EXPECT_EQ(r.body.at("interfaze").at("chain_id"), "code-sandbox");
  EXPECT_NE(r.prompt.find("exit_status=0\nprint('a"), std::string::npos) << r.prompt;
  EXPECT_NE(r.prompt.find("[output truncated at 8 bytes]"), std::string::npos);
}

TEST(Gateway, SandboxTimeoutFallsBack) {
  auto j = fixture_config_json();
  j["sandbox"]["wall_ms"] = 50;
  // Make code-lookup a feasible but costlier fallback behind code-sandbox.
  for (auto& e : j["estimates"]) {
    if (e["chain_id"] == "code-lookup") e = {{"chain_id", "code-lookup"}, {"quality", 0.8}, {"cost", 5}, {"latency_ms", 250}};
  }
  Gateway gw(config_from(j));
  gw.replace_adapter(mock_client("sandbox", ToolKind::sandbox, [](const AdapterRequest&) -> json {
    std::this_thread::sleep_for(std::chrono::milliseconds(400));
    return {{"stdout", "late"}, {"exit_status", 0}};
  }));
  const json body = support::chat_body("Why?\n```python\nprint(1)\n```");
  const auto start = std::chrono::steady_clock::now();
  const auto r = gw.handle_completion(body);
  EXPECT_LT(std::chrono::steady_clock::now() - start, std::chrono::milliseconds(350));
  ASSERT_EQ(r.http_status, 200) << r.body.dump();
  const auto& ext = r.body.at("interfaze");
  EXPECT_EQ(ext.at("chain_id"), "code-lookup");
  bool sandbox_failed = false;
  for (const auto& s : ext.at("trace")) {
    if (s.at("chain_id") == "code-sandbox" && s.at("outcome") != "ok") sandbox_failed = true;
  }
  EXPECT_TRUE(sandbox_failed) << ext.at("trace").dump();
  EXPECT_EQ(r.prompt.find("late"), std::string::npos);
}

TEST(Gateway, ConcurrentRequestsMatchSequential) {
  Gateway gw(support::test_config());
  const auto requests = support::scripted_requests();
  std::vector<std::string> sequential;
  for (const auto& req : requests) sequential.push_back(gw.handle_completion(req.body).prompt);
  std::vector<std::string> parallel(requests.size());
  std::vector<std::jthread> threads;
  for (std::size_t i = 0; i < requests.size(); ++i) {
    threads.emplace_back([&, i] { parallel[i] = gw.handle_completion(requests[i].body).prompt; });
  }
  threads.clear();
  EXPECT_EQ(parallel, sequential);
}

TEST(EndToEnd, ScriptedRequestsMatchGoldens) {
  for (const auto& req : support::scripted_requests()) {
    Gateway gw(support::test_config());
    const auto r = gw.handle_completion(req.body);
    EXPECT_EQ(r.http_status, 200) << req.name << ": " << r.body.dump();
    EXPECT_EQ(answer_of(r), mock_llm_answer(r.prompt)) << req.name;
    EXPECT_EQ(support::check_golden("e2e_" + req.name + ".json", canonical_json(r.body) + "\n"), "") << req.name;
    EXPECT_EQ(support::check_golden("e2e_" + req.name + ".prompt.txt", r.prompt), "") << req.name;
  }
}

TEST(EndToEnd, ExpectedChainsAndModalities) {
  const std::map<std::string, std::string> chains{
      {"text", "general-docs"}, {"pdf", "doc-parse"}, {"audio", "audio-transcribe"}, {"html", "doc-parse"},
      {"code", "code-sandbox"}};
  for (const auto& req : support::scripted_requests()) {
    Gateway gw(support::test_config());
    const auto r = gw.handle_completion(req.body);
    ASSERT_EQ(r.http_status, 200) << req.name;
    EXPECT_EQ(r.body.at("interfaze").at("chain_id"), chains.at(req.name)) << req.name;
  }
}

TEST(Server, HttpRoundTrip) {
  Gateway gw(support::test_config());
  HttpServer server(gw);
  const int port = server.bind("127.0.0.1", 0);
  ASSERT_GT(port, 0);
  std::jthread serving([&] { server.serve(); });

  httplib::Client client("127.0.0.1", port);
  client.set_read_timeout(30, 0);
  auto health = client.Get("/healthz");
  ASSERT_TRUE(health);
  EXPECT_EQ(health->status, 200);

  const auto body = support::chat_body("What is the capital of France?");
  auto ok = client.Post("/v1/chat/completions", body.dump(), "application/json");
  ASSERT_TRUE(ok);
  EXPECT_EQ(ok->status, 200);
  const auto reply = json::parse(ok->body);
  Gateway direct(support::test_config());
  EXPECT_EQ(answer_of(CompletionResult{200, reply, ""}), answer_of(direct.handle_completion(body)));

  auto bad = client.Post("/v1/chat/completions", "{not json", "application/json");
  ASSERT_TRUE(bad);
  EXPECT_EQ(bad->status, 400);
  EXPECT_EQ(json::parse(bad->body).at("error").at("code"), "PROTOCOL");

  server.stop();
}

TEST(Cli, ExitCodes) {
  const std::string config = (support::fixtures_dir() / "gateway" / "config.json").string();
  EXPECT_EQ(run_cli("run --config " + config + " --query 'What is the capital of France?'"), 0);

  const auto broken = write_temp("broken.json", R"({"adapters": []})");
  EXPECT_EQ(run_cli("run --config " + broken.string() + " --query hi"), 2);

  const auto audio_only = write_temp("audio_only.json", minimal_config().dump());
  EXPECT_EQ(run_cli("run --config " + audio_only.string() + " --query hi"), 3);

  const std::string fragments = (support::fixtures_dir() / "compile" / "fragments").string();
  EXPECT_EQ(run_cli("compile --fragments " + fragments + " --query q"), 0);
  fs::remove(broken);
  fs::remove(audio_only);
}
