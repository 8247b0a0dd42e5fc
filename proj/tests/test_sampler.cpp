#include "doctest.h"
#include "support/testing.h"

#include "idiolex/sampler.h"
#include "idiolex/synthcorpus.h"

#include <map>
#include <set>

using namespace idiolex;
using namespace idiolex::sampler;

namespace {

const corpus::CorpusSplit& synthetic() {
  static const corpus::CorpusSplit c = [] {
    synth::SynthConfig cfg;
    cfg.n_communities = 5;
    cfg.authors_per_community = 20;
    cfg.community_feature_priors = synth::signature_priors(5, 16, 3, 0.6, 0.05);
    return synth::generate_corpus(cfg).corpus;
  }();
  return c;
}

corpus::SentenceRecord rec(const std::string& id, const std::string& author, const std::string& comment,
                           const std::string& community) {
  return {id, "uno dos tres cuatro cinco", author, comment, community, corpus::Split::pretrain};
}

/// Community sizes differ; authors a{c}_{i} with 2 comments of 2 sentences.
std::vector<corpus::SentenceRecord> uneven(std::size_t small_authors, std::size_t big_authors) {
  std::vector<corpus::SentenceRecord> out;
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t a = 0; a < (c == 0 ? small_authors : big_authors); ++a)
      for (int k = 0; k < 2; ++k)
        for (int s = 0; s < 2; ++s) {
          const std::string author = "a" + std::to_string(c) + "_" + std::to_string(a);
          const std::string comment = author + "k" + std::to_string(k);
          out.push_back(rec(comment + "s" + std::to_string(s), author, comment, "c" + std::to_string(c)));
        }
  return out;
}

}  // namespace

TEST_CASE("every sampled group has the designed composition") {
  const corpus::CorpusSplit& c = synthetic();
  Rng rng(1);
  for (int g = 0; g < 1000; ++g) {
    const ProximityBatch b = sample_anchor_group(c, rng);
    REQUIRE(b.sentences.size() == kGroupSize);
    CHECK(b.seed_counts == std::array<std::size_t, 4>{8, 4, 2, 1});

    std::array<std::size_t, 4> recount{};
    for (std::size_t j = 1; j < b.sentences.size(); ++j)
      ++recount[static_cast<std::size_t>(corpus::proximity_score(b.sentences[0], b.sentences[j]))];
    CHECK(recount == std::array<std::size_t, 4>{8, 4, 2, 1});

    std::set<std::string> ids;
    for (const auto& s : b.sentences) ids.insert(s.id);
    CHECK(ids.size() == kGroupSize);

    for (Eigen::Index i = 0; i < 16; ++i) {
      CHECK(b.proximity(i, i) == -1);
      CHECK(b.sentences[static_cast<std::size_t>(i)].id == c.at(b.indices[static_cast<std::size_t>(i)]).id);
      for (Eigen::Index j = 0; j < 16; ++j)
        if (i != j)
          CHECK(b.proximity(i, j) == corpus::proximity_score(b.sentences[static_cast<std::size_t>(i)],
                                                             b.sentences[static_cast<std::size_t>(j)]));
    }
  }
}

TEST_CASE("every member shares a category with another member") {
  const corpus::CorpusSplit& c = synthetic();
  Rng rng(2);
  for (int g = 0; g < 200; ++g) {
    const ProximityBatch b = sample_anchor_group(c, rng);
    for (Eigen::Index i = 1; i < 16; ++i) {
      // The same-comment sentence pairs with the anchor; the rest with a peer in their level.
      const int r = b.proximity(0, i);
      bool partner = r == 3;
      for (Eigen::Index j = 1; j < 16 && !partner; ++j)
        if (j != i && b.proximity(0, j) == r) partner = true;
      CHECK(partner);
    }
  }
}

TEST_CASE("sampling is seeded") {
  const corpus::CorpusSplit& c = synthetic();
  const ProximityBatch a = sample_anchor_group(c, std::uint64_t{42});
  const ProximityBatch b = sample_anchor_group(c, std::uint64_t{42});
  CHECK(a.indices == b.indices);
  CHECK(sample_anchor_group(c, std::uint64_t{43}).indices != a.indices);
}

TEST_CASE("training batches are independent groups") {
  const corpus::CorpusSplit& c = synthetic();
  const auto two = assemble_training_batch(c, 2, std::uint64_t{7});
  REQUIRE(two.size() == 2);
  CHECK(two[0].sentences.size() + two[1].sentences.size() == 32);
  CHECK(assemble_training_batch(c, 1, std::uint64_t{7}).front().indices == two[0].indices);
  CHECK_THROWS_AS(assemble_training_batch(c, 0, std::uint64_t{7}), UsageError);
}

TEST_CASE("anchor communities are drawn uniformly, not by size") {
  const corpus::CorpusSplit c(uneven(10, 40));
  Rng rng(3);
  int small = 0;
  const int n = 4000;
  for (int g = 0; g < n; ++g)
    if (sample_anchor_group(c, rng).sentences[0].community_id == "c0") ++small;
  CHECK(std::abs(small / static_cast<double>(n) - 0.5) < 0.04);
}

TEST_CASE("anchors without enough material are redrawn") {
  auto rows = uneven(6, 6);
  // An author with a single one-sentence comment cannot anchor a group.
  rows.push_back(rec("lone", "lonely", "lonely_k", "c0"));
  const corpus::CorpusSplit c(rows);
  Rng rng(4);
  int lonely_seen_as_anchor = 0;
  for (int g = 0; g < 500; ++g) {
    const ProximityBatch b = sample_anchor_group(c, rng);
    CHECK(b.seed_counts == std::array<std::size_t, 4>{8, 4, 2, 1});
    if (b.sentences[0].author_id == "lonely") ++lonely_seen_as_anchor;
  }
  CHECK(lonely_seen_as_anchor == 0);
}

TEST_CASE("too little material is a data error") {
  CHECK_THROWS_AS(sample_anchor_group(corpus::CorpusSplit(uneven(3, 0)), std::uint64_t{1}), DataError);
  // One author per community: nobody else in the community can fill the same-community slots.
  CHECK_THROWS_AS(sample_anchor_group(corpus::CorpusSplit(uneven(1, 1)), std::uint64_t{1}), DataError);
}
