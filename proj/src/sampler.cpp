#include "idiolex/sampler.h"

#include <functional>
#include <unordered_set>

namespace idiolex::sampler {

namespace {

using corpus::AuthorIndex;
using corpus::CommentIndex;
using corpus::CommunityIndex;

constexpr int kMaxDrawsPerSentence = 1000;

/// Uniform pick among [0, n) other than `skip`. n must be at least 2.
std::size_t index_except(Rng& rng, std::size_t n, std::size_t skip) {
  std::size_t i = uniform_index(rng, n - 1);
  return i >= skip ? i + 1 : i;
}

std::size_t sentence_in(Rng& rng, const CommentIndex& comment) {
  return comment.sentences[uniform_index(rng, comment.sentences.size())];
}

std::size_t sentence_in(Rng& rng, const AuthorIndex& author) {
  return sentence_in(rng, author.comments[uniform_index(rng, author.comments.size())]);
}

std::size_t sentence_in(Rng& rng, const CommunityIndex& community) {
  return sentence_in(rng, community.authors[uniform_index(rng, community.authors.size())]);
}

/// Adds `count` new distinct sentences produced by `draw`. Returns false when
/// the draws keep colliding with sentences already taken.
bool draw_distinct(std::size_t count, const std::function<std::size_t()>& draw,
                   std::unordered_set<std::size_t>& taken, std::vector<std::size_t>& out) {
  for (std::size_t n = 0; n < count; ++n) {
    int tries = 0;
    std::size_t s = draw();
    while (taken.count(s) > 0) {
      if (++tries > kMaxDrawsPerSentence) return false;
      s = draw();
    }
    taken.insert(s);
    out.push_back(s);
  }
  return true;
}

std::size_t sentences_excluding(const CommunityIndex& community, std::size_t author) {
  std::size_t n = 0;
  for (std::size_t a = 0; a < community.authors.size(); ++a)
    if (a != author) n += community.authors[a].sentence_count();
  return n;
}

std::size_t sentences_excluding(const AuthorIndex& author, std::size_t comment) {
  std::size_t n = 0;
  for (std::size_t k = 0; k < author.comments.size(); ++k)
    if (k != comment) n += author.comments[k].sentences.size();
  return n;
}

}  // namespace

objectives::ProximityMatrix proximity_matrix(const std::vector<corpus::SentenceRecord>& sentences) {
  const auto n = static_cast<Eigen::Index>(sentences.size());
  objectives::ProximityMatrix m(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    m(i, i) = -1;
    for (Eigen::Index j = i + 1; j < n; ++j)
      m(i, j) = m(j, i) = corpus::proximity_score(sentences[static_cast<std::size_t>(i)],
                                                  sentences[static_cast<std::size_t>(j)]);
  }
  return m;
}

ProximityBatch sample_anchor_group(const corpus::CorpusSplit& corpus, Rng& rng) {
  const auto& communities = corpus.index();
  if (communities.size() < 2)
    throw DataError("sampler: need at least 2 communities, corpus has " + std::to_string(communities.size()));

  std::size_t total = 0;
  for (const auto& c : communities)
    for (const auto& a : c.authors) total += a.sentence_count();

  for (int attempt = 0; attempt < kMaxAnchorAttempts; ++attempt) {
    const std::size_t ci = uniform_index(rng, communities.size());
    const CommunityIndex& community = communities[ci];
    const std::size_t ai = uniform_index(rng, community.authors.size());
    const AuthorIndex& author = community.authors[ai];
    const std::size_t ki = uniform_index(rng, author.comments.size());
    const CommentIndex& comment = author.comments[ki];
    const std::size_t anchor = sentence_in(rng, comment);

    const std::size_t community_total = sentences_excluding(community, ai) + author.sentence_count();
    if (comment.sentences.size() < 1 + kSeedCounts[3] || sentences_excluding(author, ki) < kSeedCounts[2] ||
        sentences_excluding(community, ai) < kSeedCounts[1] || total - community_total < kSeedCounts[0])
      continue;

    std::unordered_set<std::size_t> taken{anchor};
    std::vector<std::size_t> picked{anchor};
    const bool ok =
        draw_distinct(kSeedCounts[3], [&] { return sentence_in(rng, comment); }, taken, picked) &&
        draw_distinct(kSeedCounts[2],
                      [&] { return sentence_in(rng, author.comments[index_except(rng, author.comments.size(), ki)]); },
                      taken, picked) &&
        draw_distinct(kSeedCounts[1],
                      [&] { return sentence_in(rng, community.authors[index_except(rng, community.authors.size(), ai)]); },
                      taken, picked) &&
        draw_distinct(kSeedCounts[0],
                      [&] { return sentence_in(rng, communities[index_except(rng, communities.size(), ci)]); },
                      taken, picked);
    if (!ok) continue;

    ProximityBatch batch;
    batch.indices = std::move(picked);
    for (std::size_t i : batch.indices) batch.sentences.push_back(corpus.at(i));
    batch.proximity = proximity_matrix(batch.sentences);
    for (Eigen::Index j = 1; j < batch.proximity.cols(); ++j)
      ++batch.seed_counts[static_cast<std::size_t>(batch.proximity(0, j))];
    return batch;
  }
  throw DataError("sampler: no anchor with enough same-comment, same-author, same-community and "
                  "other-community sentences after " + std::to_string(kMaxAnchorAttempts) + " attempts");
}

ProximityBatch sample_anchor_group(const corpus::CorpusSplit& corpus, std::uint64_t rng_seed) {
  Rng rng(rng_seed);
  return sample_anchor_group(corpus, rng);
}

std::vector<ProximityBatch> assemble_training_batch(const corpus::CorpusSplit& corpus,
                                                    std::size_t groups_per_batch, Rng& rng) {
  if (groups_per_batch < 1) throw UsageError("assemble_training_batch: groups_per_batch must be at least 1");
  std::vector<ProximityBatch> groups;
  groups.reserve(groups_per_batch);
  for (std::size_t g = 0; g < groups_per_batch; ++g) groups.push_back(sample_anchor_group(corpus, rng));
  return groups;
}

std::vector<ProximityBatch> assemble_training_batch(const corpus::CorpusSplit& corpus,
                                                    std::size_t groups_per_batch, std::uint64_t rng_seed) {
  Rng rng(rng_seed);
  return assemble_training_batch(corpus, groups_per_batch, rng);
}

}  // namespace idiolex::sampler
