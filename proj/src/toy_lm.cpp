#include "idiolex/align.h"

#include <cmath>
#include <set>

namespace idiolex::align {

namespace {

const std::vector<std::string>& reserved() {
  static const std::vector<std::string> r = {"[BOS]", "[SEP]", "[EOS]", "[UNK]"};
  return r;
}

std::vector<std::string> code_points(std::string_view text) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < text.size();) {
    std::size_t j = i + 1;
    while (j < text.size() && (static_cast<unsigned char>(text[j]) & 0xC0) == 0x80) ++j;
    out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

}  // namespace

CharVocab::CharVocab() : CharVocab(reserved()) {}

CharVocab::CharVocab(std::vector<std::string> symbols) : symbols_(std::move(symbols)) {
  if (symbols_.size() < reserved().size() || !std::equal(reserved().begin(), reserved().end(), symbols_.begin()))
    throw DataError("character vocabulary must start with the reserved symbols");
  for (std::size_t i = 0; i < symbols_.size(); ++i)
    if (!ids_.emplace(symbols_[i], static_cast<int>(i)).second)
      throw DataError("character vocabulary: duplicate symbol");
}

CharVocab CharVocab::build(std::span<const std::string> texts) {
  std::set<std::string> seen;
  for (const auto& t : texts)
    for (auto& c : code_points(t)) seen.insert(std::move(c));
  std::vector<std::string> symbols = reserved();
  for (const auto& s : seen)
    if (std::find(symbols.begin(), symbols.end(), s) == symbols.end()) symbols.push_back(s);
  return CharVocab(std::move(symbols));
}

std::vector<int> CharVocab::encode(std::string_view text) const {
  std::vector<int> out;
  for (const auto& c : code_points(text)) {
    auto it = ids_.find(c);
    out.push_back(it == ids_.end() ? kUnk : it->second);
  }
  return out;
}

std::vector<bool> SftSequence::response_mask() const {
  std::vector<bool> m(ids.size(), false);
  for (std::size_t t = response_start; t + 1 < ids.size(); ++t) m[t] = true;
  return m;
}

SftSequence make_sequence(const CharVocab& vocab, std::string_view prompt, std::string_view response,
                          std::size_t max_len) {
  const std::vector<int> p = vocab.encode(prompt);
  const std::vector<int> r = vocab.encode(response);
  if (r.empty()) throw DataError("alignment sample has an empty response");
  SftSequence s;
  s.ids.push_back(CharVocab::kBos);
  s.ids.insert(s.ids.end(), p.begin(), p.end());
  s.ids.push_back(CharVocab::kSep);
  s.response_start = s.ids.size();
  s.ids.insert(s.ids.end(), r.begin(), r.end());
  s.ids.push_back(CharVocab::kEos);
  if (s.ids.size() > max_len)
    throw DataError("alignment sample of " + std::to_string(s.ids.size()) + " symbols exceeds max_len " +
                    std::to_string(max_len));
  return s;
}

ToyLM::ToyLM(CharVocab vocab, ToyLmConfig cfg, Rng& rng) : vocab_(std::move(vocab)), cfg_(cfg) {
  if (cfg_.hidden < 2 || cfg_.n_layers < 1 || cfg_.max_len < 4) throw ConfigError("toy LM: bad sizes");
  const Eigen::Index h = cfg_.hidden;
  const auto v = static_cast<Eigen::Index>(vocab_.size());
  token_embedding_ = ag::Parameter("lm.token_embedding", random_normal(v, h, 1.0, rng));
  position_embedding_ = ag::Parameter("lm.position_embedding", random_normal(cfg_.max_len, h, 0.1, rng));
  for (long l = 0; l < cfg_.n_layers; ++l) blocks_.emplace_back("lm.block" + std::to_string(l), h, 2 * h, rng);
  final_norm_ = nn::LayerNorm("lm.final_norm", h);
  lm_head_ = nn::Linear("lm.head", h, v, 1.0 / std::sqrt(static_cast<double>(h)), rng);
}

std::vector<ag::Parameter*> ToyLM::parameters() {
  std::vector<ag::Parameter*> out{&token_embedding_, &position_embedding_};
  for (auto& b : blocks_) b.collect(out);
  final_norm_.collect(out);
  lm_head_.collect(out);
  return out;
}

ag::Var ToyLM::hidden(ag::Binder& bind, std::span<const int> ids) {
  if (ids.empty()) throw DataError("toy LM: empty sequence");
  if (static_cast<long>(ids.size()) > cfg_.max_len) throw UsageError("toy LM: sequence exceeds max_len");
  ag::Var h = ag::add(ag::gather_rows(bind(token_embedding_), ids),
                      ag::slice_rows(bind(position_embedding_), 0, static_cast<Eigen::Index>(ids.size())));
  for (auto& b : blocks_) h = b(bind, h, /*causal=*/true);
  return final_norm_(bind, h);
}

ag::Var ToyLM::logits(ag::Binder& bind, const ag::Var& hidden) { return lm_head_(bind, hidden); }

ag::Var ToyLM::response_cross_entropy(ag::Binder& bind, const ag::Var& hidden, const SftSequence& seq) {
  const auto t = static_cast<Eigen::Index>(seq.ids.size());
  ag::Var z = logits(bind, ag::slice_rows(hidden, 0, t - 1));
  std::vector<int> targets(seq.ids.begin() + 1, seq.ids.end());
  std::vector<double> weights(targets.size(), 0.0);
  for (std::size_t i = 0; i < targets.size(); ++i) weights[i] = i + 1 >= seq.response_start ? 1.0 : 0.0;
  return ag::cross_entropy_rows(z, targets, weights);
}

}  // namespace idiolex::align
