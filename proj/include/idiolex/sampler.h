#pragma once

#include "idiolex/corpus.h"
#include "idiolex/objectives.h"

#include <array>
#include <cstdint>
#include <vector>

namespace idiolex::sampler {

inline constexpr std::size_t kGroupSize = 16;
/// Sentences per proximity level relative to the seed anchor, indexed by score 0..3.
inline constexpr std::array<std::size_t, 4> kSeedCounts = {8, 4, 2, 1};
inline constexpr int kMaxAnchorAttempts = 100;

struct ProximityBatch {
  std::vector<std::size_t> indices;  // positions in the source CorpusSplit; [0] is the seed anchor
  std::vector<corpus::SentenceRecord> sentences;
  objectives::ProximityMatrix proximity;  // diagonal holds -1
  std::array<std::size_t, 4> seed_counts{};
};

/// One anchor group drawn by uniform hierarchical sampling. Anchors whose
/// neighbourhood cannot supply the required counts are redrawn, up to
/// kMaxAnchorAttempts times; after that a DataError is thrown.
ProximityBatch sample_anchor_group(const corpus::CorpusSplit& corpus, Rng& rng);
ProximityBatch sample_anchor_group(const corpus::CorpusSplit& corpus, std::uint64_t rng_seed);

/// `groups_per_batch` independent groups.
std::vector<ProximityBatch> assemble_training_batch(const corpus::CorpusSplit& corpus,
                                                    std::size_t groups_per_batch, Rng& rng);
std::vector<ProximityBatch> assemble_training_batch(const corpus::CorpusSplit& corpus,
                                                    std::size_t groups_per_batch, std::uint64_t rng_seed);

/// Pairwise proximity_score over `sentences`, diagonal -1.
objectives::ProximityMatrix proximity_matrix(const std::vector<corpus::SentenceRecord>& sentences);

}  // namespace idiolex::sampler
