#pragma once

#include "idiolex/config.h"
#include "idiolex/corpus.h"
#include "idiolex/features.h"

#include <cstdint>
#include <vector>

namespace idiolex::synth {

struct SynthConfig {
  std::size_t n_communities = 5;
  std::size_t authors_per_community = 20;
  std::size_t comments_per_author = 4;
  std::size_t sentences_per_comment = 4;
  std::size_t feature_inventory_size = 16;
  /// One row of F probabilities per community.
  std::vector<std::vector<double>> community_feature_priors;
  /// Std-dev of the per-author, per-feature logit offset.
  double author_perturbation = 1.0;
  std::size_t vocab_size = 200;
  std::size_t min_filler_tokens = 3;
  std::size_t max_filler_tokens = 6;
  std::uint64_t seed = 1;
};

/// Priors where each community owns a block of `signature_per_community`
/// features at probability `high`; everything else sits at `low`. Blocks wrap
/// around the inventory when it is too small to keep them disjoint.
std::vector<std::vector<double>> signature_priors(std::size_t n_communities, std::size_t n_features,
                                                  std::size_t signature_per_community, double high,
                                                  double low);

/// Throws ConfigError on inconsistent sizes, per-author/comment counts below 2, no
/// communities, or probabilities outside [0,1].
void validate(const SynthConfig& cfg);

/// Reads a SynthConfig from key=value settings. When `community_feature_priors`
/// (rows separated by ';') is absent, signature priors are built from
/// `signature_features`, `prior_high`, `prior_low`.
SynthConfig synth_config_from(const KeyValueConfig& kv);

std::string marker_token(std::size_t feature);
features::FeatureInventory synthetic_inventory(std::size_t n_features);

struct SynthCorpus {
  corpus::CorpusSplit corpus;
  features::FeatureInventory inventory;
  features::FeatureCache ground_truth;
};

/// Deterministic given cfg.seed. Each active feature appears in the text as
/// its FEAT_k marker; filler words w0..w{V-1} pad every sentence to at least
/// five tokens. Within a comment each feature is, with probability 0.5, drawn
/// once and shared by all sentences; otherwise each sentence draws it alone.
SynthCorpus generate_corpus(const SynthConfig& cfg);

}  // namespace idiolex::synth
