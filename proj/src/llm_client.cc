#include "httplib.h"

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <regex>
#include <thread>
#include <unistd.h>

#include "dymo/errors.h"
#include "dymo/hashing.h"
#include "dymo/semantic_graph.h"

namespace dymo {
namespace fs = std::filesystem;

HttpLlmClient::HttpLlmClient(HttpLlmOptions opts) : opts_(std::move(opts)) {
  if (opts_.endpoint.empty()) throw ConfigError("llm endpoint is empty");
  if (opts_.retries < 0) throw ConfigError("llm retries must be >= 0");
}

std::string HttpLlmClient::send(const std::string& instruction, const std::string& prompt) {
  static const std::regex kUrl(R"((https?://[^/]+)(/.*)?)");
  std::smatch m;
  if (!std::regex_match(opts_.endpoint, m, kUrl)) throw ConfigError("llm endpoint is not a URL: " + opts_.endpoint);
  const std::string base = m[1];
  const std::string path = m[2].matched ? std::string(m[2]) : "/";

  const nlohmann::json body = {
      {"model", opts_.model},
      {"temperature", 0},
      {"messages", {{{"role", "system"}, {"content", instruction}}, {{"role", "user"}, {"content", prompt}}}}};
  httplib::Headers headers;
  if (!opts_.api_key.empty()) headers.emplace("Authorization", "Bearer " + opts_.api_key);

  std::string last_error;
  for (int attempt = 0; attempt <= opts_.retries; ++attempt) {
    if (attempt > 0) std::this_thread::sleep_for(std::chrono::milliseconds(500 << (attempt - 1)));
    httplib::Client cli(base);
    cli.set_connection_timeout(opts_.timeout);
    cli.set_read_timeout(opts_.timeout);
    auto res = cli.Post(path, headers, body.dump(), "application/json");
    if (!res) {
      last_error = httplib::to_string(res.error());
      continue;
    }
    if (res->status != 200) {
      last_error = "HTTP " + std::to_string(res->status);
      if (res->status < 500 && res->status != 429) break;
      continue;
    }
    try {
      const auto reply = nlohmann::json::parse(res->body);
      return reply.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      last_error = std::string("unexpected response body: ") + e.what();
    }
  }
  throw LlmError("llm request failed: " + last_error);
}

CachingLlmClient::CachingLlmClient(std::shared_ptr<LlmClient> inner, std::string dir)
    : inner_(std::move(inner)), dir_(std::move(dir)) {
  fs::create_directories(dir_);
}

std::string CachingLlmClient::entry_path(const std::string& instruction, const std::string& prompt) const {
  return (fs::path(dir_) / (sha256_hex(sha256_hex(instruction) + "\n" + prompt) + ".json")).string();
}

std::string CachingLlmClient::send(const std::string& instruction, const std::string& prompt) {
  const std::string path = entry_path(instruction, prompt);
  if (std::ifstream in(path); in) {
    try {
      const auto j = nlohmann::json::parse(in);
      if (j.at("prompt") == prompt) return j.at("reply").get<std::string>();
    } catch (const nlohmann::json::exception&) {
      // Unreadable entry: refetch and overwrite.
    }
  }
  const std::string reply = inner_->send(instruction, prompt);
  const nlohmann::json entry = {
      {"instruction_sha256", sha256_hex(instruction)}, {"prompt", prompt}, {"reply", reply}};
  static std::atomic<unsigned> counter{0};
  const std::string tmp = path + ".tmp." + std::to_string(::getpid()) + "." + std::to_string(counter++);
  {
    std::ofstream out(tmp, std::ios::binary);
    out << entry.dump(2) << "\n";
    if (!out) throw std::runtime_error("cannot write llm cache entry " + tmp);
  }
  fs::rename(tmp, path);
  return reply;
}

std::shared_ptr<LlmClient> llm_client_from_env(const std::string& cache_dir) {
  const char* endpoint = std::getenv("DYMO_LLM_ENDPOINT");
  if (!endpoint || !*endpoint) return nullptr;
  HttpLlmOptions opts;
  opts.endpoint = endpoint;
  if (const char* key = std::getenv("DYMO_LLM_API_KEY")) opts.api_key = key;
  if (const char* model = std::getenv("DYMO_LLM_MODEL"); model && *model) opts.model = model;
  std::shared_ptr<LlmClient> client = std::make_shared<HttpLlmClient>(opts);
  if (!cache_dir.empty()) client = std::make_shared<CachingLlmClient>(client, cache_dir);
  return client;
}

}  // namespace dymo
