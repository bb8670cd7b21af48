// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <atomic>
#include <chrono>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include "starft/spurgen.hpp"

// After the library headers: <resolv.h> defines a _res macro that breaks Eigen.
#include <httplib.h>

using namespace starft;

namespace {

std::string fixture(const std::string& name) {
  std::ifstream in(std::string(STARFT_FIXTURE_DIR) + "/" + name, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::string numbered(int from, int to) {
  // Completion for a prompt ending in "-": the first item carries no marker.
  std::string out;
  for (int i = from; i < to; ++i) {
    out += (i == from ? " " : std::to_string(i - from + 1) + ". ") + "word" + std::to_string(i) + "\n";
  }
  return out;
}

// Tracks the peak number of concurrent calls.
class CountingClient : public ChatClient {
 public:
  ChatResponse complete(const ChatRequest& request) override {
    const int now = ++in_flight_;
    int seen = peak_.load();
    while (now > seen && !peak_.compare_exchange_weak(seen, now)) {
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
    --in_flight_;
    return ChatResponse{" k" + std::to_string(request.run) + "\n", "stop"};
  }
  int peak() const { return peak_.load(); }

 private:
  std::atomic<int> in_flight_{0};
  std::atomic<int> peak_{0};
};

}  // namespace

TEST_CASE("prompts reproduce the three generation stages") {
  const std::string preamble =
      "### Your Task ### You are an image classifier classifying a given natural image into a certain class.\n\n";
  CHECK(stage1_prompt() == preamble +
                               "Question: List possible spurious correlations while classifying natural images. "
                               "Answer in a word.\n\nAnswer: 1.\n-");
  CHECK(stage2_prompt("texture") ==
        preamble + "Question: List 20 texture bias keywords that may lead to a spurious correlation.\n\nAnswer: 1.\n-");
  const std::string s3 = stage3_prompt({"fuzzy", "matte"});
  CHECK(s3.find("The base prompt is \"a photo of a [class].\"") != std::string::npos);
  CHECK(s3.find("Question: Design a prompt with following keywords: fuzzy, matte\n\nAnswer: 1.\n-") !=
        std::string::npos);
}

TEST_CASE("numbered lists accept several markers and skip prose") {
  const auto items = parse_numbered_list("Sure! Here you go:\n1. alpha\n2) beta\n- gamma\n* delta\n  3.  - epsilon \n");
  CHECK(items == std::vector<std::string>{"alpha", "beta", "gamma", "delta", "epsilon"});
  CHECK_THROWS_AS(parse_numbered_list("no list here\nat all"), ParseError);
  CHECK(join_numbered_list({"a", "b"}) == "1. a\n2. b\n");
  CHECK(parse_numbered_list(join_numbered_list({"x y", "z"})) == std::vector<std::string>{"x y", "z"});
}

TEST_CASE("descriptor lines are normalized to placeholder templates") {
  CHECK(normalize_descriptor_line("\"A photo of a [class] on the beach.\"") == "{class} on the beach");
  CHECK(normalize_descriptor_line("a photo of a [CLASS] in the snow") == "{class} in the snow");
  CHECK(normalize_descriptor_line("blurred {class};") == "blurred {class}");
  CHECK(normalize_descriptor_line("a photo of a beach") == std::nullopt);
  CHECK(normalize_descriptor_line("[class] next to [class]") == std::nullopt);
}

TEST_CASE("keyword runs are merged with duplicates removed") {
  // Three runs of 20 items; runs 0 and 1 share 10, so 50 remain.
  ScriptedChatClient client;
  const std::string p = stage2_prompt("background");
  client.add(2, 0, p, numbered(0, 20));
  client.add(2, 1, p, numbered(10, 30));
  client.add(2, 2, p, numbered(30, 50));
  SpurgenConfig cfg;
  AuditLog audit;
  const auto kws = stage2_keywords(client, "background", cfg, &audit);
  CHECK(kws.size() == 50);
  CHECK(kws.front() == "word0");
  CHECK(kws.back() == "word49");
  CHECK(std::set<std::string>(kws.begin(), kws.end()).size() == 50);
  CHECK(audit.entries().size() == 3);
}

TEST_CASE("a failed keyword run is tolerated, all failed runs are not") {
  const std::string p = stage2_prompt("texture");
  SpurgenConfig cfg;
  {
    ScriptedChatClient client;
    client.add(2, 0, p, numbered(0, 5));
    client.add_failure(2, 1, p);
    client.add(2, 2, p, "");
    AuditLog audit;
    CHECK(stage2_keywords(client, "texture", cfg, &audit).size() == 5);
    const auto entries = audit.entries();
    REQUIRE(entries.size() == 3);
    CHECK(entries[1].error.find("recorded failure") != std::string::npos);
    CHECK_FALSE(entries[2].error.empty());
  }
  {
    ScriptedChatClient client;
    for (int r = 0; r < 3; ++r) client.add_failure(2, r, p);
    CHECK_THROWS_AS(stage2_keywords(client, "texture", cfg, nullptr), TransportError);
  }
}

TEST_CASE("stage 1 keeps single-word concepts and suggests the bundled bank on garbage") {
  SpurgenConfig cfg;
  ScriptedChatClient ok;
  ok.add(1, 0, stage1_prompt(), " Background.\n2. Texture\n3. camera angle\n4. background\n");
  CHECK(stage1_concepts(ok, cfg) == std::vector<std::string>{"background", "texture"});

  ScriptedChatClient junk;
  junk.add(1, 0, stage1_prompt(), "");
  junk.add(1, 0, stage1_prompt(), "As a language model I will not list anything.");
  try {
    build_bank(&junk, cfg);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("--bundled") != std::string::npos);
  }
}

TEST_CASE("stage 3 rejects lines without a placeholder") {
  ScriptedChatClient client;
  const std::vector<std::string> kws{"blurred", "dark"};
  client.add(3, 0, stage3_prompt(kws), " a photo of a blurred [class].\n2. a photo of a dark scene\n");
  AuditLog audit;
  SpurgenConfig cfg;
  const auto d = stage3_descriptors(client, "resolution", kws, cfg, &audit);
  REQUIRE(d.size() == 1);
  CHECK(d[0].text() == "blurred {class}");
  CHECK(audit.entries().at(0).rejected == std::vector<std::string>{"a photo of a dark scene"});
}

TEST_CASE("recorded completions rebuild the bundled bank byte for byte") {
  ScriptedChatClient client = ScriptedChatClient::from_audit_jsonl(fixture("spurgen_audit.jsonl"));
  SpurgenConfig cfg;
  AuditLog audit;
  const ConceptBank bank = build_bank(&client, cfg, &audit);
  CHECK(bank_to_string(bank) == bank_to_string(bundled_bank()));
  CHECK(bank == bundled_bank());

  // The audit of the replay replays again to the same bank.
  ScriptedChatClient again = ScriptedChatClient::from_audit_jsonl(audit.to_jsonl());
  CHECK(bank_to_string(build_bank(&again, cfg)) == bank_to_string(bundled_bank()));
  CHECK(build_bank(nullptr, cfg) == bundled_bank());
}

TEST_CASE("requests run with bounded concurrency and keep their order") {
  CountingClient client;
  SpurgenConfig cfg;
  cfg.keyword_runs = 8;
  cfg.max_in_flight = 3;
  const auto kws = stage2_keywords(client, "background", cfg, nullptr);
  CHECK(kws == std::vector<std::string>{"k0", "k1", "k2", "k3", "k4", "k5", "k6", "k7"});
  CHECK(client.peak() <= 3);
  CHECK(client.peak() >= 2);
}

TEST_CASE("chat response bodies are parsed and request bodies are shaped") {
  const auto r = HttpChatClient::parse_response(
      R"({"id":"x","choices":[{"index":0,"message":{"role":"assistant","content":" a\n2. b"},"finish_reason":"stop"}]})");
  CHECK(r.text == " a\n2. b");
  CHECK(r.finish_reason == "stop");
  CHECK_THROWS_AS(HttpChatClient::parse_response("not json"), ParseError);
  CHECK_THROWS_AS(HttpChatClient::parse_response(R"({"choices":[]})"), ParseError);

  ChatRequest req;
  req.model = "m";
  req.message = "hi";
  const auto body = HttpChatClient::request_body(req);
  CHECK(body["model"] == "m");
  CHECK(body["messages"][0]["role"] == "user");
  CHECK(body["messages"][0]["content"] == "hi");
  CHECK(body["temperature"] == 0.7);
  CHECK(body["max_tokens"] == 1024);
}

TEST_CASE("HTTP client retries rate limits and server errors") {
  httplib::Server server;
  std::atomic<int> calls{0};
  std::string seen_auth, seen_path;
  server.Post(R"(/v1/chat/completions)", [&](const httplib::Request& req, httplib::Response& res) {
    const int n = ++calls;
    seen_auth = req.get_header_value("Authorization");
    seen_path = req.path;
    if (n == 1) {
      res.status = 429;
      return;
    }
    if (n == 2) {
      res.status = 503;
      return;
    }
    const auto body = nlohmann::json::parse(req.body);
    nlohmann::json out = {{"choices", {{{"message", {{"content", body["messages"][0]["content"]}}}}}}};
    res.set_content(out.dump(), "application/json");
  });
  server.Post(R"(/bad/chat/completions)", [&](const httplib::Request&, httplib::Response& res) { res.status = 400; });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  HttpClientConfig cfg;
  cfg.base_url = "http://127.0.0.1:" + std::to_string(port) + "/v1/";
  cfg.api_key = "secret";
  cfg.model = "local";
  cfg.initial_backoff = std::chrono::milliseconds(1);
  HttpChatClient client(cfg);
  ChatRequest req;
  req.message = "echo";
  CHECK(client.complete(req).text == "echo");
  CHECK(calls.load() == 3);
  CHECK(seen_auth == "Bearer secret");
  CHECK(seen_path == "/v1/chat/completions");

  // Client errors other than 429 are not retried.
  calls = 0;
  HttpClientConfig bad = cfg;
  bad.base_url = "http://127.0.0.1:" + std::to_string(port) + "/bad";
  HttpChatClient bad_client(bad);
  CHECK_THROWS_AS(bad_client.complete(req), TransportError);

  server.stop();
  th.join();

  HttpClientConfig gone = cfg;
  gone.retries = 1;
  HttpChatClient unreachable(gone);
  CHECK_THROWS_AS(unreachable.complete(req), TransportError);
  CHECK_THROWS_AS(HttpChatClient(HttpClientConfig{}), UsageError);
}
