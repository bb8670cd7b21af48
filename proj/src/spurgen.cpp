// SPDX-License-Identifier: Apache-2.0
#include "starft/spurgen.hpp"

#include <httplib.h>

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <ctime>
#include <exception>
#include <iomanip>
#include <regex>
#include <set>
#include <sstream>
#include <thread>

namespace starft {

// ---- prompts ------------------------------------------------------------------

namespace {

constexpr std::string_view kClassifierPreamble =
    "### Your Task ### You are an image classifier classifying a given natural image into a "
    "certain class.\n\n";

std::string now_utc() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

}  // namespace

std::string stage1_prompt() {
  return std::string(kClassifierPreamble) +
         "Question: List possible spurious correlations while classifying natural images. "
         "Answer in a word.\n\nAnswer: 1.\n-";
}

std::string stage2_prompt(std::string_view concept_name) {
  return std::string(kClassifierPreamble) + "Question: List 20 " + std::string(concept_name) +
         " bias keywords that may lead to a spurious correlation.\n\nAnswer: 1.\n-";
}

std::string stage3_prompt(const std::vector<std::string>& keywords) {
  std::string list;
  for (const auto& k : keywords) list += (list.empty() ? "" : ", ") + k;
  return "### Your Task ### You design a proper prompt with a given keyword. The base prompt is "
         "\"a photo of a [class].\" You append an appropriate postfix to the base prompt with the "
         "given keyword. You use only one keyword to design each prompt.\n\n"
         "Question: Design a prompt with following keywords: " +
         list + "\n\nAnswer: 1.\n-";
}

// ---- parsing ------------------------------------------------------------------

namespace {

const std::regex& marker_regex() {
  static const std::regex re(R"(^\s*(?:-|\*|\d+[.)])\s*)");
  return re;
}

}  // namespace

std::vector<std::string> parse_numbered_list(std::string_view text) {
  std::vector<std::string> items;
  std::istringstream is{std::string(text)};
  for (std::string line; std::getline(is, line);) {
    std::smatch m;
    if (!std::regex_search(line, m, marker_regex())) continue;
    std::string item = line;
    while (std::regex_search(item, m, marker_regex())) item = m.suffix().str();
    item = trim(item);
    if (!item.empty()) items.push_back(std::move(item));
  }
  if (items.empty()) throw ParseError("no list items found in completion");
  return items;
}

std::string join_numbered_list(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    out += std::to_string(i + 1) + ". " + items[i] + "\n";
  }
  return out;
}

std::optional<std::string> normalize_descriptor_line(std::string_view line) {
  static const std::regex placeholder(R"([\[\{]\s*class\s*[\]\}])", std::regex::icase);
  std::string s = std::regex_replace(std::string(line), placeholder, "\x01");
  s = to_lower(s);
  // Strip wrapping quotes and trailing sentence punctuation.
  const auto strip = [&s]() {
    bool changed = true;
    while (changed) {
      changed = false;
      s = trim(s);
      for (std::string_view q : {"\"", "'", "\xe2\x80\x9c", "\xe2\x80\x9d"}) {
        if (s.size() >= q.size() && s.compare(0, q.size(), q) == 0) { s.erase(0, q.size()); changed = true; }
        if (s.size() >= q.size() && s.compare(s.size() - q.size(), q.size(), q) == 0) {
          s.erase(s.size() - q.size()); changed = true;
        }
      }
      while (!s.empty() && (s.back() == '.' || s.back() == ',' || s.back() == ';')) { s.pop_back(); changed = true; }
    }
  };
  strip();
  if (s.rfind(kSpuriousPrefix, 0) == 0) s.erase(0, kSpuriousPrefix.size());
  strip();
  if (std::count(s.begin(), s.end(), '\x01') != 1) return std::nullopt;
  s.replace(s.find('\x01'), 1, kClassPlaceholder);
  return s;
}

// ---- clients -------------------------------------------------------------------

std::optional<HttpClientConfig> HttpClientConfig::from_env() {
  const char* url = std::getenv("LM_BASE_URL");
  if (url == nullptr || *url == '\0') return std::nullopt;
  HttpClientConfig cfg;
  cfg.base_url = url;
  if (const char* key = std::getenv("LM_API_KEY")) cfg.api_key = key;
  if (const char* model = std::getenv("LM_MODEL")) cfg.model = model;
  return cfg;
}

HttpChatClient::HttpChatClient(HttpClientConfig config) : config_(std::move(config)) {
  if (config_.base_url.empty()) throw UsageError("HttpChatClient: base URL is empty (set LM_BASE_URL)");
}

nlohmann::json HttpChatClient::request_body(const ChatRequest& request) {
  if (request.message.empty()) throw ValidationError("chat request: empty message");
  return {{"model", request.model},
          {"messages", nlohmann::json::array({{{"role", "user"}, {"content", request.message}}})},
          {"temperature", request.temperature},
          {"max_tokens", request.max_tokens}};
}

ChatResponse HttpChatClient::parse_response(const std::string& body) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("chat response is not JSON: ") + e.what());
  }
  ChatResponse r;
  if (j.contains("choices") && j["choices"].is_array() && !j["choices"].empty()) {
    const auto& c = j["choices"][0];
    if (c.contains("message") && c["message"].contains("content") && c["message"]["content"].is_string()) {
      r.text = c["message"]["content"].get<std::string>();
    } else if (c.contains("text") && c["text"].is_string()) {
      r.text = c["text"].get<std::string>();
    } else {
      throw ParseError("chat response: choices[0] has no message content");
    }
    if (c.contains("finish_reason") && c["finish_reason"].is_string()) {
      r.finish_reason = c["finish_reason"].get<std::string>();
    }
    return r;
  }
  if (j.contains("completion") && j["completion"].is_string()) {
    r.text = j["completion"].get<std::string>();
    return r;
  }
  throw ParseError("chat response: no completion text found");
}

ChatResponse HttpChatClient::complete(const ChatRequest& request) {
  static const std::regex url_re(R"(^(https?://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(config_.base_url, m, url_re)) {
    throw UsageError("LM_BASE_URL '" + config_.base_url + "' is not an http(s) URL");
  }
  std::string path = m[2].str();
  while (!path.empty() && path.back() == '/') path.pop_back();
  path += "/chat/completions";

  ChatRequest req = request;
  if (req.model.empty()) req.model = config_.model;
  const std::string body = request_body(req).dump();

  httplib::Client cli(m[1].str());
  cli.set_connection_timeout(config_.timeout);
  cli.set_read_timeout(config_.timeout);
  httplib::Headers headers;
  if (!config_.api_key.empty()) headers.emplace("Authorization", "Bearer " + config_.api_key);

  std::string last_error;
  auto backoff = config_.initial_backoff;
  for (int attempt = 0; attempt <= config_.retries; ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(backoff);
      backoff *= 2;
    }
    auto res = cli.Post(path, headers, body, "application/json");
    if (!res) {
      last_error = "transport error: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status == 200) return parse_response(res->body);
    last_error = "HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 200);
    if (res->status != 429 && res->status < 500) break;
  }
  throw TransportError("chat completion failed after retries (" + last_error + ")");
}

void ScriptedChatClient::add(int stage, int run, std::string prompt, std::string completion) {
  script_[Key{stage, run, std::move(prompt)}] = std::move(completion);
}

void ScriptedChatClient::add_failure(int stage, int run, std::string prompt) {
  script_[Key{stage, run, std::move(prompt)}] = std::nullopt;
}

ScriptedChatClient ScriptedChatClient::from_audit_jsonl(const std::string& jsonl) {
  ScriptedChatClient client;
  std::istringstream is(jsonl);
  std::size_t lineno = 0;
  for (std::string line; std::getline(is, line);) {
    ++lineno;
    if (trim(line).empty()) continue;
    GenerationAudit a;
    try {
      a = GenerationAudit::from_json(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("audit log line " + std::to_string(lineno) + ": " + e.what());
    }
    if (a.error.empty()) {
      client.add(a.stage, a.run, a.prompt, a.completion);
    } else {
      client.add_failure(a.stage, a.run, a.prompt);
    }
  }
  return client;
}

ChatResponse ScriptedChatClient::complete(const ChatRequest& request) {
  const auto it = script_.find(Key{request.stage, request.run, request.message});
  if (it == script_.end()) {
    throw TransportError("scripted client: no completion recorded for stage " +
                         std::to_string(request.stage) + " run " + std::to_string(request.run));
  }
  if (!it->second) throw TransportError("scripted client: recorded failure");
  return ChatResponse{*it->second, "stop"};
}

// ---- audit ---------------------------------------------------------------------

nlohmann::json GenerationAudit::to_json() const {
  nlohmann::json j = {{"stage", stage},       {"run", run},       {"concept", concept_name},
                      {"prompt", prompt},     {"completion", completion},
                      {"parsed", parsed},     {"rejected", rejected},
                      {"timestamp", timestamp}};
  if (!error.empty()) j["error"] = error;
  return j;
}

GenerationAudit GenerationAudit::from_json(const nlohmann::json& j) {
  GenerationAudit a;
  a.stage = j.at("stage").get<int>();
  a.run = j.value("run", 0);
  a.concept_name = j.value("concept", "");
  a.prompt = j.at("prompt").get<std::string>();
  a.completion = j.value("completion", "");
  a.parsed = j.value("parsed", std::vector<std::string>{});
  a.rejected = j.value("rejected", std::vector<std::string>{});
  a.error = j.value("error", "");
  a.timestamp = j.value("timestamp", "");
  return a;
}

void AuditLog::append(GenerationAudit entry) {
  std::lock_guard lock(mutex_);
  entries_.push_back(std::move(entry));
}

std::vector<GenerationAudit> AuditLog::entries() const {
  std::lock_guard lock(mutex_);
  return entries_;
}

std::string AuditLog::to_jsonl() const {
  std::lock_guard lock(mutex_);
  std::string out;
  for (const auto& e : entries_) out += e.to_json().dump() + "\n";
  return out;
}

// ---- stages --------------------------------------------------------------------

namespace {

struct Outcome {
  std::optional<ChatResponse> response;
  std::string error;
};

// Issues the requests with at most `bound` in flight. Results keep request order.
std::vector<Outcome> run_requests(ChatClient& client, const std::vector<ChatRequest>& requests, int bound) {
  std::vector<Outcome> out(requests.size());
  std::atomic<std::size_t> next{0};
  const auto worker = [&]() {
    for (std::size_t i = next++; i < requests.size(); i = next++) {
      try {
        out[i].response = client.complete(requests[i]);
      } catch (const std::exception& e) {
        out[i].error = e.what();
      }
    }
  };
  const std::size_t n_threads = std::min<std::size_t>(static_cast<std::size_t>(std::max(bound, 1)), requests.size());
  if (n_threads <= 1) {
    worker();
    return out;
  }
  std::vector<std::thread> threads;
  for (std::size_t t = 0; t < n_threads; ++t) threads.emplace_back(worker);
  for (auto& t : threads) t.join();
  return out;
}

ChatRequest make_request(const SpurgenConfig& cfg, std::string message, int stage, int run) {
  ChatRequest r;
  r.model = cfg.model;
  r.message = std::move(message);
  r.temperature = cfg.temperature;
  r.max_tokens = cfg.max_tokens;
  r.stage = stage;
  r.run = run;
  return r;
}

void record(AuditLog* audit, const ChatRequest& req, std::string_view concept_name, const Outcome& o,
            std::vector<std::string> parsed, std::vector<std::string> rejected, std::string error) {
  if (audit == nullptr) return;
  GenerationAudit a;
  a.stage = req.stage;
  a.run = req.run;
  a.concept_name = std::string(concept_name);
  a.prompt = req.message;
  if (o.response) a.completion = o.response->text;
  a.parsed = std::move(parsed);
  a.rejected = std::move(rejected);
  a.error = std::move(error);
  a.timestamp = now_utc();
  audit->append(std::move(a));
}

// Prompts end on an open "-" item, so the completion continues that item.
std::vector<std::string> parse_completion(const std::string& completion) {
  return parse_numbered_list("-" + completion);
}

std::string single_word(const std::string& item) {
  std::string w = to_lower(item);
  const auto junk = [](char c) { return std::ispunct(static_cast<unsigned char>(c)) != 0; };
  while (!w.empty() && junk(w.back())) w.pop_back();
  while (!w.empty() && junk(w.front())) w.erase(0, 1);
  w = trim(w);
  if (w.empty() || w.find_first_of(" \t") != std::string::npos) return "";
  return w;
}

std::vector<std::string> merge_keyword_runs(std::string_view concept_name,
                                            const std::vector<ChatRequest>& requests,
                                            const std::vector<Outcome>& outcomes, AuditLog* audit) {
  std::vector<std::string> keywords;
  std::set<std::string> seen;
  int successes = 0;
  std::string last_error;
  for (std::size_t r = 0; r < requests.size(); ++r) {
    const Outcome& o = outcomes[r];
    if (!o.response) {
      last_error = o.error;
      record(audit, requests[r], concept_name, o, {}, {}, o.error);
      continue;
    }
    std::vector<std::string> items;
    try {
      items = parse_completion(o.response->text);
    } catch (const ParseError& e) {
      last_error = e.what();
      record(audit, requests[r], concept_name, o, {}, {}, e.what());
      continue;
    }
    ++successes;
    for (auto& item : items) {
      std::string k = trim(to_lower(item));
      while (!k.empty() && (k.back() == '.' || k.back() == ',')) k.pop_back();
      if (!k.empty() && seen.insert(k).second) keywords.push_back(k);
    }
    record(audit, requests[r], concept_name, o, items, {}, "");
  }
  if (successes == 0) {
    throw TransportError("stage 2: every keyword run failed for concept '" + std::string(concept_name) +
                         "' (" + last_error + ")");
  }
  return keywords;
}

std::vector<DescriptorTemplate> collect_descriptors(std::string_view concept_name,
                                                    const std::vector<ChatRequest>& requests,
                                                    const std::vector<Outcome>& outcomes, AuditLog* audit) {
  std::vector<DescriptorTemplate> out;
  std::set<std::string> seen;
  std::string last_error;
  for (std::size_t r = 0; r < requests.size(); ++r) {
    const Outcome& o = outcomes[r];
    if (!o.response) {
      last_error = o.error;
      record(audit, requests[r], concept_name, o, {}, {}, o.error);
      continue;
    }
    std::vector<std::string> items;
    try {
      items = parse_completion(o.response->text);
    } catch (const ParseError& e) {
      last_error = e.what();
      record(audit, requests[r], concept_name, o, {}, {}, e.what());
      continue;
    }
    std::vector<std::string> accepted, rejected;
    for (const auto& item : items) {
      const auto norm = normalize_descriptor_line(item);
      if (!norm) {
        rejected.push_back(item);
        continue;
      }
      try {
        DescriptorTemplate d(*norm, std::string(concept_name));
        accepted.push_back(item);
        if (seen.insert(*norm).second) out.push_back(std::move(d));
      } catch (const ValidationError&) {
        rejected.push_back(item);
      }
    }
    record(audit, requests[r], concept_name, o, accepted, rejected, "");
  }
  if (out.empty()) {
    throw ValidationError("stage 3: no usable descriptor lines for concept '" + std::string(concept_name) + "'" +
                          (last_error.empty() ? "" : " (" + last_error + ")"));
  }
  return out;
}

std::vector<ChatRequest> keyword_requests(std::string_view concept_name, const SpurgenConfig& cfg) {
  if (concept_name.empty()) throw ValidationError("stage 2: empty concept");
  if (cfg.keyword_runs < 1) throw ValidationError("stage 2: keyword_runs must be at least 1");
  std::vector<ChatRequest> reqs;
  for (int r = 0; r < cfg.keyword_runs; ++r) reqs.push_back(make_request(cfg, stage2_prompt(concept_name), 2, r));
  return reqs;
}

std::vector<ChatRequest> descriptor_requests(const std::vector<std::string>& keywords, const SpurgenConfig& cfg) {
  if (keywords.empty()) throw ValidationError("stage 3: no keywords");
  const std::size_t chunk = cfg.keywords_per_prompt > 0 ? static_cast<std::size_t>(cfg.keywords_per_prompt)
                                                        : keywords.size();
  std::vector<ChatRequest> reqs;
  for (std::size_t i = 0; i < keywords.size(); i += chunk) {
    const auto end = std::min(keywords.size(), i + chunk);
    std::vector<std::string> part(keywords.begin() + static_cast<std::ptrdiff_t>(i),
                                  keywords.begin() + static_cast<std::ptrdiff_t>(end));
    reqs.push_back(make_request(cfg, stage3_prompt(part), 3, static_cast<int>(reqs.size())));
  }
  return reqs;
}

}  // namespace

std::vector<std::string> stage1_concepts(ChatClient& client, const SpurgenConfig& cfg, AuditLog* audit) {
  const ChatRequest req = make_request(cfg, stage1_prompt(), 1, 0);
  Outcome o;
  try {
    o.response = client.complete(req);
  } catch (const TransportError& e) {
    record(audit, req, "", o, {}, {}, e.what());
    throw;
  }
  std::vector<std::string> items;
  try {
    items = parse_completion(o.response->text);
  } catch (const ParseError& e) {
    record(audit, req, "", o, {}, {}, e.what());
    throw ParseError(std::string("stage 1: ") + e.what());
  }
  std::vector<std::string> concepts, rejected;
  std::set<std::string> seen;
  for (const auto& item : items) {
    const std::string w = single_word(item);
    if (w.empty()) {
      rejected.push_back(item);
    } else if (seen.insert(w).second) {
      concepts.push_back(w);
    }
  }
  record(audit, req, "", o, concepts, rejected, "");
  if (concepts.empty()) throw ParseError("stage 1: completion named no single-word concepts");
  return concepts;
}

std::vector<std::string> stage2_keywords(ChatClient& client, std::string_view concept_name,
                                         const SpurgenConfig& cfg, AuditLog* audit) {
  const auto reqs = keyword_requests(concept_name, cfg);
  return merge_keyword_runs(concept_name, reqs, run_requests(client, reqs, cfg.max_in_flight), audit);
}

std::vector<DescriptorTemplate> stage3_descriptors(ChatClient& client, std::string_view concept_name,
                                                   const std::vector<std::string>& keywords,
                                                   const SpurgenConfig& cfg, AuditLog* audit) {
  const auto reqs = descriptor_requests(keywords, cfg);
  return collect_descriptors(concept_name, reqs, run_requests(client, reqs, cfg.max_in_flight), audit);
}

ConceptBank build_bank(ChatClient* client, const SpurgenConfig& cfg, AuditLog* audit) {
  if (client == nullptr) return bundled_bank();
  std::vector<std::string> concepts;
  try {
    concepts = stage1_concepts(*client, cfg, audit);
  } catch (const ParseError& e) {
    throw ParseError(std::string(e.what()) + "; the bundled bank is available with --bundled");
  }

  // Stage 2 for every concept at once, then stage 3 likewise.
  std::vector<ChatRequest> kw_reqs;
  std::vector<std::size_t> kw_owner;
  for (std::size_t c = 0; c < concepts.size(); ++c) {
    for (auto& r : keyword_requests(concepts[c], cfg)) {
      kw_reqs.push_back(std::move(r));
      kw_owner.push_back(c);
    }
  }
  const auto kw_out = run_requests(*client, kw_reqs, cfg.max_in_flight);
  std::vector<std::vector<std::string>> keywords(concepts.size());
  for (std::size_t c = 0; c < concepts.size(); ++c) {
    std::vector<ChatRequest> reqs;
    std::vector<Outcome> outs;
    for (std::size_t i = 0; i < kw_reqs.size(); ++i) {
      if (kw_owner[i] == c) {
        reqs.push_back(kw_reqs[i]);
        outs.push_back(kw_out[i]);
      }
    }
    keywords[c] = merge_keyword_runs(concepts[c], reqs, outs, audit);
  }

  std::vector<ChatRequest> d_reqs;
  std::vector<std::size_t> d_owner;
  for (std::size_t c = 0; c < concepts.size(); ++c) {
    for (auto& r : descriptor_requests(keywords[c], cfg)) {
      d_reqs.push_back(std::move(r));
      d_owner.push_back(c);
    }
  }
  const auto d_out = run_requests(*client, d_reqs, cfg.max_in_flight);
  std::vector<std::pair<std::string, std::vector<std::string>>> assembled;
  for (std::size_t c = 0; c < concepts.size(); ++c) {
    std::vector<ChatRequest> reqs;
    std::vector<Outcome> outs;
    for (std::size_t i = 0; i < d_reqs.size(); ++i) {
      if (d_owner[i] == c) {
        reqs.push_back(d_reqs[i]);
        outs.push_back(d_out[i]);
      }
    }
    std::vector<std::string> texts;
    for (const auto& d : collect_descriptors(concepts[c], reqs, outs, audit)) texts.push_back(d.text());
    assembled.emplace_back(concepts[c], std::move(texts));
  }
  return ConceptBank(assembled);
}

}  // namespace starft
