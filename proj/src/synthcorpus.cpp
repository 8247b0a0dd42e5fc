#include "idiolex/synthcorpus.h"

#include <algorithm>
#include <cmath>

namespace idiolex::synth {

namespace {

constexpr double kCommentShareProbability = 0.5;
constexpr double kProbClamp = 1e-6;

double logit(double p) {
  p = std::clamp(p, kProbClamp, 1.0 - kProbClamp);
  return std::log(p / (1.0 - p));
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

bool bernoulli(Rng& rng, double p) { return uniform_real(rng) < p; }

std::string pad2(std::size_t i) { return (i < 10 ? "0" : "") + std::to_string(i); }

}  // namespace

std::vector<std::vector<double>> signature_priors(std::size_t n_communities, std::size_t n_features,
                                                  std::size_t signature_per_community, double high,
                                                  double low) {
  std::vector<std::vector<double>> priors(n_communities, std::vector<double>(n_features, low));
  if (n_features == 0) return priors;
  for (std::size_t c = 0; c < n_communities; ++c)
    for (std::size_t k = 0; k < signature_per_community; ++k)
      priors[c][(c * signature_per_community + k) % n_features] = high;
  return priors;
}

void validate(const SynthConfig& cfg) {
  auto at_least_two = [](std::size_t v, const char* name) {
    if (v < 2) throw ConfigError(std::string("synth config: ") + name + " must be at least 2");
  };
  if (cfg.n_communities == 0) throw ConfigError("synth config: n_communities must be positive");
  at_least_two(cfg.authors_per_community, "authors_per_community");
  at_least_two(cfg.comments_per_author, "comments_per_author");
  at_least_two(cfg.sentences_per_comment, "sentences_per_comment");
  if (cfg.feature_inventory_size == 0) throw ConfigError("synth config: feature_inventory_size must be positive");
  if (cfg.vocab_size == 0) throw ConfigError("synth config: vocab_size must be positive");
  if (cfg.min_filler_tokens > cfg.max_filler_tokens)
    throw ConfigError("synth config: min_filler_tokens exceeds max_filler_tokens");
  if (cfg.author_perturbation < 0.0 || !std::isfinite(cfg.author_perturbation))
    throw ConfigError("synth config: author_perturbation must be a finite nonnegative number");
  if (cfg.community_feature_priors.size() != cfg.n_communities)
    throw ConfigError("synth config: expected " + std::to_string(cfg.n_communities) +
                      " prior rows, got " + std::to_string(cfg.community_feature_priors.size()));
  for (const auto& row : cfg.community_feature_priors) {
    if (row.size() != cfg.feature_inventory_size)
      throw ConfigError("synth config: prior row has " + std::to_string(row.size()) +
                        " entries but feature_inventory_size is " +
                        std::to_string(cfg.feature_inventory_size));
    for (double p : row)
      if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("synth config: prior outside [0,1]");
  }
}

SynthConfig synth_config_from(const KeyValueConfig& kv) {
  SynthConfig cfg;
  auto count = [&kv](const char* key, std::size_t fallback) {
    const long long v = kv.get_int(key, static_cast<long long>(fallback));
    if (v < 0) throw ConfigError(std::string("synth config: ") + key + " must be nonnegative");
    return static_cast<std::size_t>(v);
  };
  cfg.n_communities = count("n_communities", cfg.n_communities);
  cfg.authors_per_community = count("authors_per_community", cfg.authors_per_community);
  cfg.comments_per_author = count("comments_per_author", cfg.comments_per_author);
  cfg.sentences_per_comment = count("sentences_per_comment", cfg.sentences_per_comment);
  cfg.feature_inventory_size = count("feature_inventory_size", cfg.feature_inventory_size);
  cfg.vocab_size = count("vocab_size", cfg.vocab_size);
  cfg.min_filler_tokens = count("min_filler_tokens", cfg.min_filler_tokens);
  cfg.max_filler_tokens = count("max_filler_tokens", cfg.max_filler_tokens);
  cfg.author_perturbation = kv.get_double("author_perturbation", cfg.author_perturbation);
  cfg.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<long long>(cfg.seed)));

  if (kv.has("community_feature_priors")) {
    const std::string all = kv.get_string("community_feature_priors", "");
    std::size_t start = 0;
    while (start <= all.size()) {
      std::size_t end = all.find(';', start);
      if (end == std::string::npos) end = all.size();
      KeyValueConfig row;
      row.set("row", all.substr(start, end - start));
      cfg.community_feature_priors.push_back(row.get_doubles("row"));
      start = end + 1;
    }
  } else {
    cfg.community_feature_priors =
        signature_priors(cfg.n_communities, cfg.feature_inventory_size,
                         count("signature_features", 3), kv.get_double("prior_high", 0.6),
                         kv.get_double("prior_low", 0.05));
  }
  return cfg;
}

std::string marker_token(std::size_t feature) { return "FEAT_" + std::to_string(feature); }

features::FeatureInventory synthetic_inventory(std::size_t n_features) {
  std::vector<std::string> names;
  names.reserve(n_features);
  for (std::size_t f = 0; f < n_features; ++f) names.push_back("contains marker " + marker_token(f));
  return features::FeatureInventory(std::move(names), "synthetic");
}

SynthCorpus generate_corpus(const SynthConfig& cfg) {
  validate(cfg);
  Rng rng(cfg.seed);
  const std::size_t F = cfg.feature_inventory_size;
  SynthCorpus out{corpus::CorpusSplit(), synthetic_inventory(F), features::FeatureCache()};
  out.ground_truth = features::FeatureCache(out.inventory);

  std::vector<corpus::SentenceRecord> records;
  std::vector<double> author_p(F);
  std::vector<int> shared_bit(F);  // -1: drawn per sentence

  for (std::size_t c = 0; c < cfg.n_communities; ++c) {
    const std::string community = "c" + std::to_string(c);
    for (std::size_t a = 0; a < cfg.authors_per_community; ++a) {
      const std::string author = community + "_a" + pad2(a);
      for (std::size_t f = 0; f < F; ++f)
        author_p[f] = sigmoid(logit(cfg.community_feature_priors[c][f]) +
                              cfg.author_perturbation * standard_normal(rng));

      for (std::size_t k = 0; k < cfg.comments_per_author; ++k) {
        const std::string comment = author + "_k" + pad2(k);
        for (std::size_t f = 0; f < F; ++f)
          shared_bit[f] = bernoulli(rng, kCommentShareProbability) ? (bernoulli(rng, author_p[f]) ? 1 : 0) : -1;

        for (std::size_t s = 0; s < cfg.sentences_per_comment; ++s) {
          features::FeatureVector fv = features::zero_vector(out.inventory, features::Source::ground_truth);
          std::vector<std::string> tokens;
          for (std::size_t f = 0; f < F; ++f) {
            const bool on = shared_bit[f] >= 0 ? shared_bit[f] == 1 : bernoulli(rng, author_p[f]);
            if (on) {
              fv.bits[f] = 1;
              tokens.push_back(marker_token(f));
            }
          }
          std::size_t fillers = cfg.min_filler_tokens +
                                uniform_index(rng, cfg.max_filler_tokens - cfg.min_filler_tokens + 1);
          if (tokens.size() + fillers < corpus::kMinSentenceTokens)
            fillers = corpus::kMinSentenceTokens - tokens.size();
          for (std::size_t i = 0; i < fillers; ++i)
            tokens.push_back("w" + std::to_string(uniform_index(rng, cfg.vocab_size)));
          for (std::size_t i = tokens.size(); i > 1; --i)
            std::swap(tokens[i - 1], tokens[uniform_index(rng, i)]);

          std::string text;
          for (const auto& t : tokens) {
            if (!text.empty()) text += ' ';
            text += t;
          }
          const std::string id = comment + "_s" + pad2(s);
          out.ground_truth.put(id, std::move(fv));
          records.push_back(corpus::SentenceRecord{id, std::move(text), author, comment, community,
                                                   corpus::Split::pretrain});
        }
      }
    }
  }
  out.corpus = corpus::CorpusSplit(std::move(records));
  return out;
}

}  // namespace idiolex::synth
