#include "dymo/semantic_graph.h"

#include <algorithm>
#include <cstdlib>

#include "dymo/assets.h"
#include "dymo/errors.h"

namespace dymo {
namespace {

void log(EventLog* events, std::string kind, std::string message) {
  if (events) events->push_back({std::move(kind), std::move(message)});
}

// Start positions where `span` occurs contiguously in `words`.
std::vector<int> occurrences(const std::vector<std::string>& words, const std::vector<std::string>& span) {
  std::vector<int> out;
  if (span.empty() || span.size() > words.size()) return out;
  for (size_t p = 0; p + span.size() <= words.size(); ++p) {
    if (std::equal(span.begin(), span.end(), words.begin() + static_cast<long>(p))) {
      out.push_back(static_cast<int>(p));
    }
  }
  return out;
}

bool any_owned(const std::vector<char>& owned, int start, int len) {
  for (int i = start; i < start + len; ++i) {
    if (owned[static_cast<size_t>(i)]) return true;
  }
  return false;
}

std::vector<int> range(int start, int len) {
  std::vector<int> r(static_cast<size_t>(len));
  for (int i = 0; i < len; ++i) r[static_cast<size_t>(i)] = start + i;
  return r;
}

void truncate_entities(SemanticGraph& g, const GraphOptions& opts, EventLog* events) {
  if (opts.max_entities < 0) throw ConfigError("max_entities must be >= 0");
  if (g.entity_count() > opts.max_entities) {
    log(events, "graph_truncated",
        std::to_string(g.entity_count()) + " entities, keeping " + std::to_string(opts.max_entities));
    g.entities.resize(static_cast<size_t>(opts.max_entities));
    build_edges(g);
  }
}

}  // namespace

bool SemanticGraph::bound() const {
  for (const GraphEntity& e : entities) {
    if (e.node.tokens.empty()) return false;
    for (const GraphNode& a : e.attributes) {
      if (a.tokens.empty()) return false;
    }
  }
  return true;
}

void build_edges(SemanticGraph& graph) {
  graph.s_pos.clear();
  graph.s_neg.clear();
  const int n = graph.entity_count();
  for (int i = 0; i < n; ++i) {
    const int na = static_cast<int>(graph.entities[static_cast<size_t>(i)].attributes.size());
    for (int j = 0; j < na; ++j) graph.s_pos.emplace_back(i, j);
  }
  for (int i = 0; i < n; ++i) {
    for (int m = i + 1; m < n; ++m) graph.s_neg.emplace_back(i, m);
  }
}

SemanticGraph extract_graph_rules(const std::string& prompt, const Grammar& grammar, EventLog* events,
                                  const GraphOptions& opts) {
  SemanticGraph g;
  g.prompt = prompt;
  g.source = "rules";
  const std::vector<std::string> words = normalize_words(prompt);
  std::vector<GraphNode> pending;
  for (int p = 0; p < static_cast<int>(words.size()); ++p) {
    const std::string& w = words[static_cast<size_t>(p)];
    if (grammar.is_noun(w)) {
      g.entities.push_back({GraphNode{w, {p}}, std::move(pending)});
      pending.clear();
    } else if (grammar.is_determiner(w)) {
      pending.clear();
    } else if (grammar.is_adjective(w)) {
      pending.push_back(GraphNode{w, {p}});
    }
  }
  build_edges(g);
  truncate_entities(g, opts, events);
  return g;
}

SemanticGraph bind_tokens(SemanticGraph graph, const TextEncoding& text, EventLog* events) {
  return bind_tokens(std::move(graph), text.words, events);
}

SemanticGraph bind_tokens(SemanticGraph graph, const std::vector<std::string>& words, EventLog* events) {
  std::vector<char> owned(words.size(), 0);
  std::vector<GraphEntity> kept;
  for (GraphEntity& e : graph.entities) {
    const std::vector<std::string> span = normalize_words(e.node.text);
    int start = -1;
    for (int p : occurrences(words, span)) {
      if (!any_owned(owned, p, static_cast<int>(span.size()))) {
        start = p;
        break;
      }
    }
    if (start < 0) {
      log(events, "node_dropped", "entity '" + e.node.text + "' not found in prompt");
      continue;
    }
    e.node.tokens = range(start, static_cast<int>(span.size()));
    for (int tok : e.node.tokens) owned[static_cast<size_t>(tok)] = 1;
    kept.push_back(std::move(e));
  }

  for (GraphEntity& e : kept) {
    const int anchor = e.node.tokens.front();
    std::vector<GraphNode> attrs;
    for (GraphNode& a : e.attributes) {
      const std::vector<std::string> span = normalize_words(a.text);
      const int len = static_cast<int>(span.size());
      int best = -1;
      for (int p : occurrences(words, span)) {
        if (any_owned(owned, p, len)) continue;
        if (best < 0) {
          best = p;
          continue;
        }
        const int d = std::abs(p - anchor), bd = std::abs(best - anchor);
        if (d < bd || (d == bd && p < best)) best = p;
      }
      if (best < 0) {
        log(events, "node_dropped",
            "attribute '" + a.text + "' of '" + e.node.text + "' not found in prompt");
        continue;
      }
      a.tokens = range(best, len);
      attrs.push_back(std::move(a));
    }
    e.attributes = std::move(attrs);
  }
  graph.entities = std::move(kept);
  build_edges(graph);
  return graph;
}

nlohmann::ordered_json graph_to_json(const SemanticGraph& graph) {
  nlohmann::ordered_json j;
  j["prompt"] = graph.prompt;
  nlohmann::ordered_json nodes = nlohmann::ordered_json::array();
  nlohmann::ordered_json binds = nlohmann::ordered_json::array();
  for (const GraphEntity& e : graph.entities) {
    nlohmann::ordered_json attrs = nlohmann::ordered_json::array();
    nlohmann::ordered_json attr_tokens = nlohmann::ordered_json::array();
    for (const GraphNode& a : e.attributes) {
      attrs.push_back(a.text);
      attr_tokens.push_back(a.tokens);
    }
    nlohmann::ordered_json entry;
    entry[e.node.text] = attrs;
    nodes.push_back(entry);
    binds.push_back({{"entity", e.node.tokens}, {"attributes", attr_tokens}});
  }
  j["Graph"] = nodes;
  j["bindings"] = {{"source", graph.source}, {"tokens", binds}};
  return j;
}

SemanticGraph graph_from_json(const nlohmann::ordered_json& j) {
  try {
    SemanticGraph g;
    g.prompt = j.at("prompt").get<std::string>();
    g.source = "file";
    const auto& nodes = j.at("Graph");
    if (!nodes.is_array()) throw FormatError("\"Graph\" must be an array");
    for (const auto& entry : nodes) {
      if (!entry.is_object() || entry.size() != 1) {
        throw FormatError("each \"Graph\" entry must be a single-key object");
      }
      GraphEntity e;
      e.node.text = entry.begin().key();
      for (const auto& a : entry.begin().value()) e.attributes.push_back({a.get<std::string>(), {}});
      if (e.node.text.empty()) throw FormatError("empty entity name");
      g.entities.push_back(std::move(e));
    }
    if (j.contains("bindings")) {
      const auto& binds = j["bindings"].at("tokens");
      if (binds.size() != g.entities.size()) throw FormatError("bindings do not match \"Graph\"");
      for (size_t i = 0; i < binds.size(); ++i) {
        GraphEntity& e = g.entities[i];
        e.node.tokens = binds[i].at("entity").get<std::vector<int>>();
        const auto& at = binds[i].at("attributes");
        if (at.size() != e.attributes.size()) throw FormatError("attribute bindings do not match");
        for (size_t a = 0; a < at.size(); ++a) e.attributes[a].tokens = at[a].get<std::vector<int>>();
      }
    }
    build_edges(g);
    return g;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("graph json: ") + e.what());
  }
}

SemanticGraph parse_graph_reply(const std::string& prompt, const std::string& reply) {
  const size_t open = reply.find('{');
  const size_t close = reply.rfind('}');
  if (open == std::string::npos || close == std::string::npos || close < open) {
    throw FormatError("reply contains no JSON object");
  }
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(reply.substr(open, close - open + 1));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("reply is not valid JSON: ") + e.what());
  }
  if (!j.is_object() || !j.contains("Graph")) throw FormatError("reply has no \"Graph\" field");
  nlohmann::ordered_json clean;
  clean["prompt"] = prompt;
  clean["Graph"] = j["Graph"];
  for (const auto& entry : clean["Graph"]) {
    if (!entry.is_object() || entry.size() != 1 || !entry.begin().value().is_array()) {
      throw FormatError("malformed \"Graph\" entry");
    }
    for (const auto& a : entry.begin().value()) {
      if (!a.is_string()) throw FormatError("attribute is not a string");
    }
  }
  return graph_from_json(clean);
}

const std::string& graph_instruction() {
  static const std::string s = assets::kGraphInstruction;
  return s;
}

std::string StubLlmClient::send(const std::string&, const std::string& prompt) {
  ++calls_;
  auto it = replies_.find(prompt);
  if (it == replies_.end()) throw LlmError("stub has no reply for prompt");
  if (it->second == kTimeout) throw LlmError("timed out");
  return it->second;
}

SemanticGraph extract_graph_llm(const std::string& prompt, LlmClient& client, const Grammar& grammar,
                                EventLog* events, const GraphOptions& opts) {
  std::string failure;
  try {
    const std::string reply = client.send(graph_instruction(), prompt);
    SemanticGraph g = bind_tokens(parse_graph_reply(prompt, reply), normalize_words(prompt), events);
    g.source = "llm";
    truncate_entities(g, opts, events);
    return g;
  } catch (const LlmError& e) {
    failure = std::string("client failed: ") + e.what();
  } catch (const FormatError& e) {
    failure = std::string("malformed reply: ") + e.what();
  }
  log(events, "llm_fallback", failure + "; using rule parser");
  return extract_graph_rules(prompt, grammar, events, opts);
}

}  // namespace dymo
