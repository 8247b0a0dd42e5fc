#include "idiolex/corpus.h"

#include "json.hpp"

#include <algorithm>
#include <array>
#include <map>
#include <set>
#include <sstream>

namespace idiolex::corpus {

using json = nlohmann::ordered_json;

std::string_view to_string(Split s) {
  switch (s) {
    case Split::pretrain: return "pretrain";
    case Split::train: return "train";
    case Split::dev: return "dev";
    case Split::test: return "test";
  }
  return "pretrain";
}

Split split_from_string(std::string_view s) {
  if (s == "pretrain") return Split::pretrain;
  if (s == "train") return Split::train;
  if (s == "dev") return Split::dev;
  if (s == "test") return Split::test;
  throw DataError("unknown split tag: " + std::string(s));
}

std::size_t AuthorIndex::sentence_count() const {
  std::size_t n = 0;
  for (const auto& c : comments) n += c.sentences.size();
  return n;
}

CorpusSplit::CorpusSplit(std::vector<SentenceRecord> records) : records_(std::move(records)) {
  // community -> author -> comment -> positions, ordered by id.
  std::map<std::string, std::map<std::string, std::map<std::string, std::vector<std::size_t>>>> tree;
  std::unordered_map<std::string, std::pair<std::string, std::string>> comment_owner;
  std::unordered_map<std::string, std::string> author_home;

  for (std::size_t i = 0; i < records_.size(); ++i) {
    const SentenceRecord& r = records_[i];
    if (!by_id_.emplace(r.id, i).second) throw DataError("duplicate sentence id: " + r.id);

    auto [cit, fresh] = comment_owner.emplace(r.comment_id, std::make_pair(r.author_id, r.community_id));
    if (!fresh && (cit->second.first != r.author_id || cit->second.second != r.community_id))
      throw DataError("comment " + r.comment_id + " maps to more than one author/community");

    auto [ait, afresh] = author_home.emplace(r.author_id, r.community_id);
    if (!afresh && ait->second != r.community_id)
      throw DataError("author " + r.author_id + " appears in more than one community");

    tree[r.community_id][r.author_id][r.comment_id].push_back(i);
  }

  locations_.resize(records_.size());
  for (auto& [community_id, authors] : tree) {
    CommunityIndex ci{community_id, {}};
    for (auto& [author_id, comments] : authors) {
      AuthorIndex ai{author_id, {}};
      for (auto& [comment_id, sentences] : comments) {
        for (std::size_t pos : sentences)
          locations_[pos] = Location{index_.size(), ci.authors.size(), ai.comments.size()};
        ai.comments.push_back(CommentIndex{comment_id, std::move(sentences)});
      }
      ci.authors.push_back(std::move(ai));
    }
    index_.push_back(std::move(ci));
  }
}

std::optional<std::size_t> CorpusSplit::find(std::string_view id) const {
  auto it = by_id_.find(std::string(id));
  if (it == by_id_.end()) return std::nullopt;
  return it->second;
}

CorpusSplit CorpusSplit::select(std::initializer_list<Split> splits) const {
  std::vector<SentenceRecord> kept;
  for (const auto& r : records_)
    if (std::find(splits.begin(), splits.end(), r.split) != splits.end()) kept.push_back(r);
  return CorpusSplit(std::move(kept));
}

std::size_t CorpusSplit::author_count() const {
  std::size_t n = 0;
  for (const auto& c : index_) n += c.authors.size();
  return n;
}

std::vector<std::string_view> tokenize_whitespace(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  auto is_space = [](char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f';
  };
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    const std::size_t start = i;
    while (i < text.size() && !is_space(text[i])) ++i;
    if (i > start) out.push_back(text.substr(start, i - start));
  }
  return out;
}

std::size_t count_tokens(std::string_view text) { return tokenize_whitespace(text).size(); }

bool is_reserved_author(std::string_view author_id) {
  static constexpr std::array<std::string_view, 3> kReserved = {"[deleted]", "[removed]",
                                                                "AutoModerator"};
  return std::find(kReserved.begin(), kReserved.end(), author_id) != kReserved.end();
}

namespace {

std::vector<SentenceRecord> filter_records(std::vector<SentenceRecord> rows) {
  // 1. reserved authors, 2. short sentences
  std::erase_if(rows, [](const SentenceRecord& r) {
    return is_reserved_author(r.author_id) || count_tokens(r.text) < kMinSentenceTokens;
  });

  // 3. comments with too few surviving sentences
  std::map<std::string, std::size_t> per_comment;
  for (const auto& r : rows) ++per_comment[r.comment_id];
  std::erase_if(rows, [&](const SentenceRecord& r) {
    return per_comment[r.comment_id] < kMinCommentSentences;
  });

  // 4. authors (within their community) with too few surviving comments
  std::map<std::pair<std::string, std::string>, std::set<std::string>> per_author;
  for (const auto& r : rows) per_author[{r.community_id, r.author_id}].insert(r.comment_id);
  std::erase_if(rows, [&](const SentenceRecord& r) {
    return per_author[{r.community_id, r.author_id}].size() < kMinAuthorComments;
  });
  return rows;
}

}  // namespace

CorpusSplit ingest_and_filter(const std::vector<RawRecord>& raw) {
  std::vector<SentenceRecord> rows;
  rows.reserve(raw.size());
  for (const auto& r : raw) {
    if (!r.id || !r.text || !r.author_id || !r.comment_id || !r.community_id) continue;
    SentenceRecord s{*r.id, *r.text, *r.author_id, *r.comment_id, *r.community_id, Split::pretrain};
    if (r.split) {
      try {
        s.split = split_from_string(*r.split);
      } catch (const DataError&) {
        continue;
      }
    }
    rows.push_back(std::move(s));
  }
  return CorpusSplit(filter_records(std::move(rows)));
}

CorpusSplit ingest_and_filter(const CorpusSplit& corpus) {
  return CorpusSplit(filter_records(corpus.records()));
}

int proximity_score(const SentenceRecord& a, const SentenceRecord& b) {
  if (a.id == b.id) throw UsageError("proximity_score: self-proximity is undefined (" + a.id + ")");
  if (a.comment_id == b.comment_id) return 3;
  if (a.author_id == b.author_id) return 2;
  if (a.community_id == b.community_id) return 1;
  return 0;
}

CorpusSplit split_by_author(const CorpusSplit& corpus, std::size_t heldout_per_dialect,
                            std::size_t train_authors_cap, std::uint64_t seed) {
  Rng rng(seed);
  std::unordered_map<std::string, Split> assignment;
  for (const auto& community : corpus.index()) {
    const std::size_t n = community.authors.size();
    if (n < 2 * heldout_per_dialect)
      throw DataError("community " + community.community_id + " has " + std::to_string(n) +
                      " authors; holding out " + std::to_string(heldout_per_dialect) +
                      " for each of dev and test needs " + std::to_string(2 * heldout_per_dialect));
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);

    std::size_t k = 0;
    for (; k < heldout_per_dialect; ++k) assignment[community.authors[order[k]].author_id] = Split::dev;
    for (; k < 2 * heldout_per_dialect; ++k)
      assignment[community.authors[order[k]].author_id] = Split::test;
    const std::size_t train_end = k + std::min(train_authors_cap, n - k);
    for (; k < train_end; ++k) assignment[community.authors[order[k]].author_id] = Split::train;
    for (; k < n; ++k) assignment[community.authors[order[k]].author_id] = Split::pretrain;
  }
  std::vector<SentenceRecord> out = corpus.records();
  for (auto& r : out) r.split = assignment.at(r.author_id);
  return CorpusSplit(std::move(out));
}

std::vector<RawRecord> parse_corpus_jsonl(std::string_view text) {
  std::vector<RawRecord> out;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    start = end + 1;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;

    RawRecord rec;
    json j = json::parse(line, nullptr, /*allow_exceptions=*/false);
    if (j.is_object()) {
      auto field = [&j](const char* key) -> std::optional<std::string> {
        auto it = j.find(key);
        if (it == j.end() || !it->is_string()) return std::nullopt;
        return it->get<std::string>();
      };
      rec.id = field("id");
      rec.text = field("text");
      rec.author_id = field("author_id");
      rec.comment_id = field("comment_id");
      rec.community_id = field("community_id");
      rec.split = field("split");
    }
    out.push_back(std::move(rec));
  }
  return out;
}

std::vector<RawRecord> read_corpus_jsonl(const std::string& path) {
  return parse_corpus_jsonl(read_file(path));
}

std::string corpus_to_jsonl(const CorpusSplit& corpus) {
  std::string out;
  for (const auto& r : corpus.records()) {
    json j;
    j["id"] = r.id;
    j["text"] = r.text;
    j["author_id"] = r.author_id;
    j["comment_id"] = r.comment_id;
    j["community_id"] = r.community_id;
    j["split"] = std::string(to_string(r.split));
    out += j.dump();
    out += '\n';
  }
  return out;
}

CorpusSplit load_corpus(const std::string& path) {
  std::vector<SentenceRecord> rows;
  std::size_t line_no = 0;
  for (const auto& r : read_corpus_jsonl(path)) {
    ++line_no;
    if (!r.id || !r.text || !r.author_id || !r.comment_id || !r.community_id)
      throw DataError(path + ": record " + std::to_string(line_no) + " is missing a required field");
    rows.push_back(SentenceRecord{*r.id, *r.text, *r.author_id, *r.comment_id, *r.community_id,
                                  r.split ? split_from_string(*r.split) : Split::pretrain});
  }
  return CorpusSplit(std::move(rows));
}

}  // namespace idiolex::corpus
