#ifndef DYMO_SEMANTIC_GRAPH_H_
#define DYMO_SEMANTIC_GRAPH_H_

#include <chrono>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "dymo/events.h"
#include "dymo/grammar.h"
#include "dymo/text.h"
#include "json.hpp"

namespace dymo {

// A word span of the prompt and the token positions it is bound to.
struct GraphNode {
  std::string text;
  std::vector<int> tokens;

  friend bool operator==(const GraphNode&, const GraphNode&) = default;
};

struct GraphEntity {
  GraphNode node;
  std::vector<GraphNode> attributes;

  friend bool operator==(const GraphEntity&, const GraphEntity&) = default;
};

struct SemanticGraph {
  std::string prompt;
  std::string source;  // "rules", "llm" or "file"
  std::vector<GraphEntity> entities;
  // (entity, attribute index within that entity).
  std::vector<std::pair<int, int>> s_pos;
  // Unordered entity pairs, stored with first < second.
  std::vector<std::pair<int, int>> s_neg;

  int entity_count() const { return static_cast<int>(entities.size()); }
  bool bound() const;

  friend bool operator==(const SemanticGraph&, const SemanticGraph&) = default;
};

struct GraphOptions {
  int max_entities = 8;
};

// Fills s_pos and s_neg from the entity list.
void build_edges(SemanticGraph& graph);

// Deterministic parser for the closed caption grammar. A grammar noun opens
// an entity; the color/size words since the previous noun or determiner are
// its attributes. The result is already bound to the prompt's tokens.
SemanticGraph extract_graph_rules(const std::string& prompt, const Grammar& grammar,
                                  EventLog* events = nullptr, const GraphOptions& opts = {});

// Binds every node to token positions of `text`. Repeated entity words take
// successive unused occurrences; an attribute binds to the occurrence nearest
// its entity that no entity owns. Unbindable nodes are dropped with a warning
// event and the edges rebuilt.
SemanticGraph bind_tokens(SemanticGraph graph, const TextEncoding& text, EventLog* events = nullptr);
SemanticGraph bind_tokens(SemanticGraph graph, const std::vector<std::string>& words,
                          EventLog* events = nullptr);

// Appendix-style JSON with a "bindings" extension block.
nlohmann::ordered_json graph_to_json(const SemanticGraph& graph);
SemanticGraph graph_from_json(const nlohmann::ordered_json& j);

// Parses the LLM reply shape {"prompt": ..., "Graph": [{entity: [attrs]}]}.
// Throws FormatError on anything else.
SemanticGraph parse_graph_reply(const std::string& prompt, const std::string& reply);

class LlmError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class LlmClient {
 public:
  virtual ~LlmClient() = default;
  // Returns the raw reply text. Throws LlmError once retries are exhausted.
  virtual std::string send(const std::string& instruction, const std::string& prompt) = 0;
};

// Replays canned replies keyed by prompt. Unknown prompts, or prompts mapped
// to kTimeout, raise LlmError.
class StubLlmClient : public LlmClient {
 public:
  static constexpr const char* kTimeout = "<timeout>";

  StubLlmClient() = default;
  explicit StubLlmClient(std::map<std::string, std::string> replies) : replies_(std::move(replies)) {}

  void set(const std::string& prompt, const std::string& reply) { replies_[prompt] = reply; }
  std::string send(const std::string& instruction, const std::string& prompt) override;
  int calls() const { return calls_; }

 private:
  std::map<std::string, std::string> replies_;
  int calls_ = 0;
};

struct HttpLlmOptions {
  std::string endpoint;  // e.g. http://localhost:8080/v1/chat/completions
  std::string api_key;
  std::string model = "gpt-4";
  std::chrono::seconds timeout{30};
  int retries = 2;
};

// OpenAI-style chat-completions client.
class HttpLlmClient : public LlmClient {
 public:
  explicit HttpLlmClient(HttpLlmOptions opts);
  std::string send(const std::string& instruction, const std::string& prompt) override;

 private:
  HttpLlmOptions opts_;
};

// Disk cache in front of another client, keyed by (instruction hash, prompt).
// Entries are written to a temporary file and renamed into place.
class CachingLlmClient : public LlmClient {
 public:
  CachingLlmClient(std::shared_ptr<LlmClient> inner, std::string dir);
  std::string send(const std::string& instruction, const std::string& prompt) override;

  std::string entry_path(const std::string& instruction, const std::string& prompt) const;

 private:
  std::shared_ptr<LlmClient> inner_;
  std::string dir_;
};

// Reads DYMO_LLM_ENDPOINT, DYMO_LLM_API_KEY and DYMO_LLM_MODEL. Returns null
// when no endpoint is configured. With a cache_dir the client is cached.
std::shared_ptr<LlmClient> llm_client_from_env(const std::string& cache_dir = "");

// Sends the shipped instruction template. Malformed replies and client
// failures fall back to the rule parser and log an "llm_fallback" event.
SemanticGraph extract_graph_llm(const std::string& prompt, LlmClient& client, const Grammar& grammar,
                                EventLog* events = nullptr, const GraphOptions& opts = {});

const std::string& graph_instruction();

}  // namespace dymo

#endif  // DYMO_SEMANTIC_GRAPH_H_
