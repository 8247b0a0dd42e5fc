#pragma once

#include "idiolex/common.h"

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace idiolex::corpus {

enum class Split : std::uint8_t { pretrain, train, dev, test };

std::string_view to_string(Split s);
Split split_from_string(std::string_view s);

struct SentenceRecord {
  std::string id;
  std::string text;
  std::string author_id;
  std::string comment_id;
  std::string community_id;  // dialect label proxy
  Split split = Split::pretrain;
};

/// A row as read from disk, before validation. Missing fields stay empty.
struct RawRecord {
  std::optional<std::string> id;
  std::optional<std::string> text;
  std::optional<std::string> author_id;
  std::optional<std::string> comment_id;
  std::optional<std::string> community_id;
  std::optional<std::string> split;
};

struct CommentIndex {
  std::string comment_id;
  std::vector<std::size_t> sentences;  // positions into CorpusSplit::records()
};

struct AuthorIndex {
  std::string author_id;
  std::vector<CommentIndex> comments;
  std::size_t sentence_count() const;
};

struct CommunityIndex {
  std::string community_id;
  std::vector<AuthorIndex> authors;
};

/// Where one sentence sits in the community -> author -> comment hierarchy.
struct Location {
  std::size_t community = 0;
  std::size_t author = 0;
  std::size_t comment = 0;
};

/// Immutable set of sentences plus its hierarchy index (ordered by id at
/// every level, so iteration order is deterministic).
///
/// Construction checks that ids are unique, that each comment belongs to one
/// author and one community, and that each author writes in one community.
/// It does not enforce the filter thresholds; ingest_and_filter does.
class CorpusSplit {
 public:
  CorpusSplit() = default;
  explicit CorpusSplit(std::vector<SentenceRecord> records);

  const std::vector<SentenceRecord>& records() const { return records_; }
  const std::vector<CommunityIndex>& index() const { return index_; }
  const SentenceRecord& at(std::size_t i) const { return records_.at(i); }
  const Location& location(std::size_t i) const { return locations_.at(i); }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }

  std::optional<std::size_t> find(std::string_view id) const;

  /// Records whose split tag is one of `splits`, re-indexed.
  CorpusSplit select(std::initializer_list<Split> splits) const;

  std::size_t author_count() const;

 private:
  std::vector<SentenceRecord> records_;
  std::vector<CommunityIndex> index_;
  std::vector<Location> locations_;
  std::unordered_map<std::string, std::size_t> by_id_;
};

/// Whitespace-delimited tokens (maximal runs of non-whitespace bytes).
std::vector<std::string_view> tokenize_whitespace(std::string_view text);
std::size_t count_tokens(std::string_view text);

inline constexpr std::size_t kMinSentenceTokens = 5;
inline constexpr std::size_t kMinCommentSentences = 2;
inline constexpr std::size_t kMinAuthorComments = 2;

bool is_reserved_author(std::string_view author_id);

/// Applies the filter cascade: reserved authors, short sentences, thin
/// comments, thin authors. Rows missing a required field are skipped.
CorpusSplit ingest_and_filter(const std::vector<RawRecord>& raw);
CorpusSplit ingest_and_filter(const CorpusSplit& corpus);

/// 3 same comment, 2 same author, 1 same community, 0 otherwise.
int proximity_score(const SentenceRecord& a, const SentenceRecord& b);

/// Tags dev/test/pretrain/train per community with author-disjoint holdouts.
CorpusSplit split_by_author(const CorpusSplit& corpus, std::size_t heldout_per_dialect,
                            std::size_t train_authors_cap, std::uint64_t seed);

// ---- JSON-lines I/O ----
/// Parses corpus JSON-lines. Unparseable lines become empty RawRecords.
std::vector<RawRecord> parse_corpus_jsonl(std::string_view text);
std::vector<RawRecord> read_corpus_jsonl(const std::string& path);
std::string corpus_to_jsonl(const CorpusSplit& corpus);
/// Loads a corpus file that is already clean (no filtering, split tags kept).
CorpusSplit load_corpus(const std::string& path);

}  // namespace idiolex::corpus
