// SPDX-License-Identifier: Apache-2.0
//
// Language-model pipeline that names spurious concepts, expands them into
// keywords and turns the keywords into descriptor templates.
#pragma once

#include <chrono>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "starft/prompts.hpp"

namespace starft {

struct ChatRequest {
  std::string model;
  std::string message;
  double temperature = 0.7;
  int max_tokens = 1024;
  // Bookkeeping only; never sent to the endpoint.
  int stage = 0;
  int run = 0;
};

struct ChatResponse {
  std::string text;
  std::string finish_reason;
};

class ChatClient {
 public:
  virtual ~ChatClient() = default;
  /// Throws TransportError when no completion could be obtained.
  virtual ChatResponse complete(const ChatRequest& request) = 0;
};

struct HttpClientConfig {
  std::string base_url;  // e.g. https://api.example.com/v1
  std::string api_key;
  std::string model;
  int retries = 3;
  std::chrono::milliseconds initial_backoff{500};
  std::chrono::seconds timeout{60};

  /// Reads LM_BASE_URL, LM_API_KEY and LM_MODEL. Empty when LM_BASE_URL is unset.
  static std::optional<HttpClientConfig> from_env();
};

/// POSTs {model, messages, temperature, max_tokens} to <base_url>/chat/completions
/// and reads choices[0].message.content.
class HttpChatClient : public ChatClient {
 public:
  explicit HttpChatClient(HttpClientConfig config);
  ChatResponse complete(const ChatRequest& request) override;

  /// Extracts the completion from a response body; exposed for tests.
  static ChatResponse parse_response(const std::string& body);
  static nlohmann::json request_body(const ChatRequest& request);

 private:
  HttpClientConfig config_;
};

/// Answers from a fixed table keyed by (stage, run, prompt). Used for fixtures
/// and for replaying an audit log offline.
class ScriptedChatClient : public ChatClient {
 public:
  void add(int stage, int run, std::string prompt, std::string completion);
  /// Fails `run` of `prompt` with a TransportError.
  void add_failure(int stage, int run, std::string prompt);
  static ScriptedChatClient from_audit_jsonl(const std::string& jsonl);

  ChatResponse complete(const ChatRequest& request) override;

 private:
  using Key = std::tuple<int, int, std::string>;
  // Read-only once populated, so concurrent lookups need no lock.
  std::map<Key, std::optional<std::string>> script_;
};

struct GenerationAudit {
  int stage = 0;
  int run = 0;
  std::string concept_name;
  std::string prompt;
  std::string completion;
  std::vector<std::string> parsed;
  std::vector<std::string> rejected;
  std::string error;
  std::string timestamp;

  nlohmann::json to_json() const;
  static GenerationAudit from_json(const nlohmann::json& j);
};

/// Append-only audit trail; appends are serialized.
class AuditLog {
 public:
  void append(GenerationAudit entry);
  std::vector<GenerationAudit> entries() const;
  std::string to_jsonl() const;

 private:
  mutable std::mutex mutex_;
  std::vector<GenerationAudit> entries_;
};

struct SpurgenConfig {
  std::string model;
  double temperature = 0.7;
  int max_tokens = 1024;
  int keyword_runs = 3;
  int max_in_flight = 4;
  /// Keywords per stage-3 prompt; 0 sends all of a concept's keywords at once.
  int keywords_per_prompt = 0;
};

std::string stage1_prompt();
std::string stage2_prompt(std::string_view concept_name);
std::string stage3_prompt(const std::vector<std::string>& keywords);

/// Items of a "1." / "1)" / "-" list. Unmarked lines are ignored; markers are
/// stripped repeatedly so parsing its own output is a no-op.
std::vector<std::string> parse_numbered_list(std::string_view text);
std::string join_numbered_list(const std::vector<std::string>& items);

/// Rewrites one stage-3 line into a descriptor template, or nullopt when the
/// line carries no class placeholder.
std::optional<std::string> normalize_descriptor_line(std::string_view line);

std::vector<std::string> stage1_concepts(ChatClient& client, const SpurgenConfig& cfg, AuditLog* audit = nullptr);
std::vector<std::string> stage2_keywords(ChatClient& client, std::string_view concept_name,
                                         const SpurgenConfig& cfg, AuditLog* audit = nullptr);
std::vector<DescriptorTemplate> stage3_descriptors(ChatClient& client, std::string_view concept_name,
                                                   const std::vector<std::string>& keywords,
                                                   const SpurgenConfig& cfg, AuditLog* audit = nullptr);

/// Runs the three stages. With no client, returns the bundled bank.
ConceptBank build_bank(ChatClient* client, const SpurgenConfig& cfg, AuditLog* audit = nullptr);

}  // namespace starft
