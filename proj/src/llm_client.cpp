#include "idiolex/features.h"

#include "idiolex/log.h"
#include "httplib.h"
#include "json.hpp"

#include <atomic>
#include <exception>
#include <mutex>
#include <thread>

namespace idiolex::features {

FeatureVector extract_llm(const corpus::SentenceRecord& sentence, const FeatureInventory& inv,
                          CompletionClient& client, const ClientPolicy& policy) {
  const std::string prompt = build_prompt(inv, sentence.text);
  std::string last_error;
  for (int attempt = 0; attempt <= policy.max_retries; ++attempt) {
    if (attempt > 0) std::this_thread::sleep_for(policy.base_backoff * (1 << (attempt - 1)));
    try {
      return parse_llm_response(client.complete(prompt), inv);
    } catch (const TransportError& e) {
      last_error = e.what();
      logger()->warn("feature extraction for {}: attempt {} failed: {}", sentence.id, attempt + 1,
                     last_error);
    }
  }
  throw ExtractionError("feature extraction for " + sentence.id + " failed after " +
                        std::to_string(policy.max_retries + 1) + " attempts: " + last_error);
}

std::vector<FeatureVector> extract_llm_batch(std::span<const corpus::SentenceRecord> sentences,
                                             const FeatureInventory& inv, CompletionClient& client,
                                             const ClientPolicy& policy) {
  std::vector<FeatureVector> out(sentences.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;

  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= sentences.size()) return;
      {
        std::lock_guard lock(failure_mu);
        if (failure) return;
      }
      try {
        out[i] = extract_llm(sentences[i], inv, client, policy);
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
        return;
      }
    }
  };

  const std::size_t n_threads =
      std::min<std::size_t>(static_cast<std::size_t>(std::max(1, policy.max_in_flight)), sentences.size());
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
  return out;
}

HttpCompletionClient::HttpCompletionClient(std::string base_url, std::string model, std::string api_key,
                                           std::string path)
    : base_url_(std::move(base_url)), model_(std::move(model)), api_key_(std::move(api_key)),
      path_(std::move(path)) {}

std::string HttpCompletionClient::complete(const std::string& prompt) {
  using json = nlohmann::json;
  httplib::Client cli(base_url_);
  cli.set_connection_timeout(10);
  cli.set_read_timeout(120);
  if (!api_key_.empty()) cli.set_bearer_token_auth(api_key_);

  json body;
  body["model"] = model_;
  body["messages"] = json::array({json{{"role", "user"}, {"content", prompt}}});

  auto res = cli.Post(path_, body.dump(), "application/json");
  if (!res) throw TransportError("request failed: " + httplib::to_string(res.error()));
  if (res->status < 200 || res->status >= 300)
    throw TransportError("HTTP status " + std::to_string(res->status));

  // A well-formed envelope with odd content is the model's problem, not the
  // transport's: hand back whatever text is there for parse_llm_response.
  json env = json::parse(res->body, nullptr, false);
  if (!env.is_object()) return res->body;
  try {
    return env.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const json::exception&) {
    return res->body;
  }
}

}  // namespace idiolex::features
