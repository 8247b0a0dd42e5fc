#pragma once

#include "idiolex/common.h"
#include "idiolex/corpus.h"

#include <chrono>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace idiolex::features {

enum class Source : std::uint8_t { llm, rules, ground_truth, zero_fallback };

std::string_view to_string(Source s);
Source source_from_string(std::string_view s);

/// Ordered, unique list of binary feature names. Order defines bit positions.
class FeatureInventory {
 public:
  FeatureInventory() = default;
  FeatureInventory(std::vector<std::string> names, std::string language_tag);

  const std::vector<std::string>& names() const { return names_; }
  const std::string& language_tag() const { return language_tag_; }
  std::size_t size() const { return names_.size(); }
  std::optional<std::size_t> index_of(std::string_view name) const;
  const std::string& fingerprint() const { return fingerprint_; }

  /// Text format: one name per line; `@language <tag>` sets the tag; `#` comments.
  static FeatureInventory parse(std::string_view text);
  static FeatureInventory load(const std::string& path);
  std::string serialize() const;

 private:
  std::vector<std::string> names_;
  std::string language_tag_;
  std::string fingerprint_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct FeatureVector {
  std::vector<std::uint8_t> bits;
  Source source = Source::rules;
  std::string inventory_fingerprint;

  std::size_t popcount() const;
  bool operator==(const FeatureVector&) const = default;
};

FeatureVector zero_vector(const FeatureInventory& inv, Source source);

/// |u and v| / |u or v|; two all-zero vectors score 0.
double jaccard(const FeatureVector& u, const FeatureVector& v);

// ---- rule engine ----
using Predicate = std::function<bool(std::string_view text)>;
using Rulebook = std::unordered_map<std::string, Predicate>;

/// Predicates for every inventory name this engine understands: synthetic
/// `contains marker FEAT_k` names, orthographic cues and a few lexical
/// families (explicit subjects, diminutive suffixes, negators, pronouns).
/// Names it cannot interpret are left out.
Rulebook default_rulebook(const FeatureInventory& inv);

FeatureVector extract_rules(const corpus::SentenceRecord& sentence, const FeatureInventory& inv,
                            const Rulebook& rulebook);

// ---- LLM extraction ----
class TransportError : public Error {
 public:
  using Error::Error;
};

/// Extraction failed for a reason other than a bad model response.
class ExtractionError : public DataError {
 public:
  using DataError::DataError;
};

/// Sends one prompt, returns the model's text. Throws TransportError.
class CompletionClient {
 public:
  virtual ~CompletionClient() = default;
  virtual std::string complete(const std::string& prompt) = 0;
};

struct ClientPolicy {
  int max_retries = 3;
  int max_in_flight = 4;
  std::chrono::milliseconds base_backoff{250};
};

extern const char* const kPromptTemplate;

std::string build_prompt(const FeatureInventory& inv, std::string_view sentence);

/// Parses a model reply. Unusable replies give a zero vector with
/// source=zero_fallback; keys absent from a usable reply read as 0.
FeatureVector parse_llm_response(std::string_view reply, const FeatureInventory& inv);

FeatureVector extract_llm(const corpus::SentenceRecord& sentence, const FeatureInventory& inv,
                          CompletionClient& client, const ClientPolicy& policy = {});

/// Runs extract_llm over many sentences with at most policy.max_in_flight
/// concurrent requests. Results are in input order.
std::vector<FeatureVector> extract_llm_batch(std::span<const corpus::SentenceRecord> sentences,
                                             const FeatureInventory& inv, CompletionClient& client,
                                             const ClientPolicy& policy = {});

/// OpenAI-compatible chat-completions endpoint.
class HttpCompletionClient : public CompletionClient {
 public:
  /// `base_url` like "https://api.openai.com"; the API key is sent as a bearer token.
  HttpCompletionClient(std::string base_url, std::string model, std::string api_key,
                       std::string path = "/v1/chat/completions");
  std::string complete(const std::string& prompt) override;

 private:
  std::string base_url_;
  std::string model_;
  std::string api_key_;
  std::string path_;
};

// ---- cache ----
class FeatureCache {
 public:
  FeatureCache() = default;
  explicit FeatureCache(const FeatureInventory& inv);

  const std::string& fingerprint() const { return fingerprint_; }
  std::size_t feature_count() const { return size_; }
  std::size_t size() const { return order_.size(); }

  /// Inserts or replaces. The vector must belong to this cache's inventory.
  void put(const std::string& id, FeatureVector v);
  const FeatureVector* find(std::string_view id) const;
  bool contains(std::string_view id) const { return find(id) != nullptr; }
  const std::vector<std::string>& ids() const { return order_; }

  std::string serialize() const;
  static FeatureCache parse(std::string_view text);
  void save(const std::string& path) const;
  static FeatureCache load(const std::string& path);
  /// Loads and checks that the cache was built for `inv`.
  static FeatureCache load(const std::string& path, const FeatureInventory& inv);

 private:
  std::string fingerprint_;
  std::size_t size_ = 0;
  std::vector<std::string> order_;
  std::unordered_map<std::string, FeatureVector> vectors_;
};

}  // namespace idiolex::features
