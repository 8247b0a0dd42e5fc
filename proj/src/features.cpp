#include "idiolex/features.h"

#include "idiolex/log.h"
#include "json.hpp"

#include <algorithm>
#include <cctype>
#include <regex>
#include <set>

namespace idiolex::features {

using json = nlohmann::ordered_json;

std::string_view to_string(Source s) {
  switch (s) {
    case Source::llm: return "llm";
    case Source::rules: return "rules";
    case Source::ground_truth: return "ground_truth";
    case Source::zero_fallback: return "zero_fallback";
  }
  return "rules";
}

Source source_from_string(std::string_view s) {
  if (s == "llm") return Source::llm;
  if (s == "rules") return Source::rules;
  if (s == "ground_truth") return Source::ground_truth;
  if (s == "zero_fallback") return Source::zero_fallback;
  throw DataError("unknown feature source: " + std::string(s));
}

FeatureInventory::FeatureInventory(std::vector<std::string> names, std::string language_tag)
    : names_(std::move(names)), language_tag_(std::move(language_tag)) {
  std::string canonical = language_tag_ + '\n';
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i].empty()) throw ConfigError("feature inventory: empty feature name");
    if (!index_.emplace(names_[i], i).second)
      throw ConfigError("feature inventory: duplicate name '" + names_[i] + "'");
    canonical += names_[i];
    canonical += '\n';
  }
  fingerprint_ = fnv1a_hex(canonical);
}

std::optional<std::size_t> FeatureInventory::index_of(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

FeatureInventory FeatureInventory::parse(std::string_view text) {
  std::vector<std::string> names;
  std::string tag;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string line(text.substr(start, end - start));
    start = end + 1;
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ' || line.back() == '\t'))
      line.pop_back();
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos) continue;
    line = line.substr(first);
    if (line[0] == '#') continue;
    if (line.rfind("@language", 0) == 0) {
      tag = line.substr(9);
      tag.erase(0, tag.find_first_not_of(" \t"));
      continue;
    }
    names.push_back(line);
  }
  return FeatureInventory(std::move(names), std::move(tag));
}

FeatureInventory FeatureInventory::load(const std::string& path) { return parse(read_file(path)); }

std::string FeatureInventory::serialize() const {
  std::string out = "@language " + language_tag_ + "\n";
  for (const auto& n : names_) out += n + "\n";
  return out;
}

std::size_t FeatureVector::popcount() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

FeatureVector zero_vector(const FeatureInventory& inv, Source source) {
  return FeatureVector{std::vector<std::uint8_t>(inv.size(), 0), source, inv.fingerprint()};
}

double jaccard(const FeatureVector& u, const FeatureVector& v) {
  if (u.bits.size() != v.bits.size() || u.inventory_fingerprint != v.inventory_fingerprint)
    throw UsageError("jaccard: feature vectors come from different inventories");
  std::size_t inter = 0;
  std::size_t uni = 0;
  for (std::size_t i = 0; i < u.bits.size(); ++i) {
    inter += (u.bits[i] & v.bits[i]);
    uni += (u.bits[i] | v.bits[i]);
  }
  if (uni == 0) return 0.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

// ---------------------------------------------------------------------------
// Rule engine

namespace {

std::vector<char32_t> decode_utf8(std::string_view s) {
  std::vector<char32_t> out;
  for (std::size_t i = 0; i < s.size();) {
    const auto c = static_cast<unsigned char>(s[i]);
    int len = 1;
    char32_t cp = c;
    if (c >= 0xF0) {
      len = 4;
      cp = c & 0x07;
    } else if (c >= 0xE0) {
      len = 3;
      cp = c & 0x0F;
    } else if (c >= 0xC0) {
      len = 2;
      cp = c & 0x1F;
    }
    if (i + static_cast<std::size_t>(len) > s.size()) break;
    for (int k = 1; k < len; ++k) cp = (cp << 6) | (static_cast<unsigned char>(s[i + k]) & 0x3F);
    out.push_back(cp);
    i += static_cast<std::size_t>(len);
  }
  return out;
}

bool is_ascii_alpha(char c) { return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z'); }

std::string lower_ascii(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

// Token stripped of leading/trailing ASCII punctuation, lowercased.
std::vector<std::string> normalized_words(std::string_view text) {
  std::vector<std::string> out;
  for (auto tok : corpus::tokenize_whitespace(text)) {
    std::size_t b = 0;
    std::size_t e = tok.size();
    while (b < e && std::ispunct(static_cast<unsigned char>(tok[b]))) ++b;
    while (e > b && std::ispunct(static_cast<unsigned char>(tok[e - 1]))) --e;
    // Also strip Spanish opening marks (two-byte UTF-8).
    while (e - b >= 2 && (tok.substr(b, 2) == "\xC2\xBF" || tok.substr(b, 2) == "\xC2\xA1")) b += 2;
    if (e > b) out.push_back(lower_ascii(tok.substr(b, e - b)));
  }
  return out;
}

bool has_all_caps_word(std::string_view text) {
  for (auto tok : corpus::tokenize_whitespace(text)) {
    std::size_t letters = 0;
    bool lower = false;
    for (char c : tok) {
      if (!is_ascii_alpha(c)) continue;
      ++letters;
      if (c >= 'a' && c <= 'z') lower = true;
    }
    if (letters >= 2 && !lower) return true;
  }
  return false;
}

bool has_repeated_punctuation(std::string_view text) {
  static constexpr std::string_view kPunct = "!?.,;:";
  for (std::size_t i = 1; i < text.size(); ++i)
    if (text[i] == text[i - 1] && kPunct.find(text[i]) != std::string_view::npos) return true;
  return false;
}

bool has_letter_lengthening(std::string_view text) {
  auto cps = decode_utf8(text);
  for (std::size_t i = 2; i < cps.size(); ++i) {
    const char32_t c = cps[i];
    const bool letter = (c < 0x80 && is_ascii_alpha(static_cast<char>(c))) || (c >= 0x0621 && c <= 0x064A);
    if (letter && c == cps[i - 1] && c == cps[i - 2]) return true;
  }
  return false;
}

bool has_laughter(std::string_view text) {
  static const std::regex kLaugh("^((ha){2,}h?|(ja){2,}j?|(je){2,}j?|(ji){2,}j?|lol+|xd+)$");
  for (const auto& w : normalized_words(text))
    if (std::regex_match(w, kLaugh)) return true;
  // Arabic "hhh" laughter: three or more consecutive heh characters.
  auto cps = decode_utf8(text);
  for (std::size_t i = 2; i < cps.size(); ++i)
    if (cps[i] == 0x0647 && cps[i - 1] == 0x0647 && cps[i - 2] == 0x0647) return true;
  return false;
}

Predicate contains_substring(std::string needle) {
  return [needle = std::move(needle)](std::string_view text) {
    return text.find(needle) != std::string_view::npos;
  };
}

Predicate contains_token(std::string token) {
  return [token = std::move(token)](std::string_view text) {
    for (auto t : corpus::tokenize_whitespace(text))
      if (t == token) return true;
    return false;
  };
}

Predicate contains_any_word(std::vector<std::string> words) {
  return [words = std::move(words)](std::string_view text) {
    for (const auto& w : normalized_words(text))
      if (std::find(words.begin(), words.end(), w) != words.end()) return true;
    return false;
  };
}

Predicate contains_any_suffix(std::vector<std::string> suffixes) {
  return [suffixes = std::move(suffixes)](std::string_view text) {
    for (const auto& w : normalized_words(text))
      for (const auto& s : suffixes)
        if (w.size() >= s.size() + 2 && w.compare(w.size() - s.size(), s.size(), s) == 0) return true;
    return false;
  };
}

std::vector<std::string> split_alternatives(const std::string& tail) {
  std::vector<std::string> out;
  std::regex sep("\\s+or\\s+");
  for (std::sregex_token_iterator it(tail.begin(), tail.end(), sep, -1), end; it != end; ++it)
    if (!it->str().empty()) out.push_back(lower_ascii(it->str()));
  return out;
}

std::optional<Predicate> resolve(const std::string& name) {
  static const std::regex kMarker("^contains marker (FEAT_[0-9]+)$");
  static const std::regex kSubject("^contains explicit subject (.+)$");
  static const std::regex kDiminutive("^contains diminutive suffix ([a-z]+(?: or [a-z]+)?)$");
  static const std::regex kNegator("^contains negator ([a-z0-9]+(?: or [a-z0-9]+)?)$");
  static const std::regex kPronoun("^contains pronoun ([a-z]+)$");

  std::smatch m;
  if (std::regex_match(name, m, kMarker)) return contains_token(m[1].str());
  if (name == "contains inverted question mark") return contains_substring("\xC2\xBF");
  if (name == "contains inverted exclamation mark") return contains_substring("\xC2\xA1");
  if (name == "contains all caps word") return Predicate(has_all_caps_word);
  if (name == "contains repeated punctuation") return Predicate(has_repeated_punctuation);
  if (name == "contains question mark") return contains_substring("?");
  if (name == "contains exclamation mark !") return contains_substring("!");
  if (name == "contains arabic question mark") return contains_substring("\xD8\x9F");
  if (name == "contains tatweel") return contains_substring("\xD9\x80");
  if (name == "contains letter lengthening") return Predicate(has_letter_lengthening);
  if (name == "contains laughter token") return Predicate(has_laughter);
  if (name == "contains ellipsis") {
    return Predicate([](std::string_view t) {
      return t.find("...") != std::string_view::npos || t.find("\xE2\x80\xA6") != std::string_view::npos;
    });
  }
  if (std::regex_match(name, m, kSubject)) return contains_any_word(split_alternatives(m[1].str()));
  if (std::regex_match(name, m, kDiminutive)) return contains_any_suffix(split_alternatives(m[1].str()));
  if (std::regex_match(name, m, kNegator)) return contains_any_word(split_alternatives(m[1].str()));
  if (std::regex_match(name, m, kPronoun)) return contains_any_word({m[1].str()});
  return std::nullopt;
}

}  // namespace

Rulebook default_rulebook(const FeatureInventory& inv) {
  Rulebook book;
  for (const auto& name : inv.names())
    if (auto p = resolve(name)) book.emplace(name, std::move(*p));
  return book;
}

FeatureVector extract_rules(const corpus::SentenceRecord& sentence, const FeatureInventory& inv,
                            const Rulebook& rulebook) {
  FeatureVector v = zero_vector(inv, Source::rules);
  for (std::size_t i = 0; i < inv.size(); ++i) {
    auto it = rulebook.find(inv.names()[i]);
    if (it == rulebook.end())
      throw ConfigError("rulebook has no predicate for feature '" + inv.names()[i] + "'");
    v.bits[i] = it->second(sentence.text) ? 1 : 0;
  }
  return v;
}

// ---------------------------------------------------------------------------
// LLM prompt and reply parsing

const char* const kPromptTemplate =
    "You are a deterministic feature extractor.\n"
    "\n"
    "Task: For each feature key, output 1 if the sentence contains an explicit surface cue "
    "described by that feature; otherwise, output 0.\n"
    "\n"
    "Use a recall-oriented policy: if the cue is reasonably present, set 1.\n"
    "Return VALID JSON ONLY with exactly one top-level key: 'features'.\n"
    "\n"
    "'features' maps each feature string EXACTLY (copy verbatim) to 0 or 1.\n"
    "\n"
    "Feature keys: {features}\n"
    "Sentence: {sentence}";

namespace {

void replace_once(std::string& s, std::string_view slot, std::string_view value) {
  const auto pos = s.find(slot);
  if (pos != std::string::npos) s.replace(pos, slot.size(), value);
}

std::optional<int> as_bit(const json& v) {
  if (v.is_boolean()) return v.get<bool>() ? 1 : 0;
  if (v.is_number_integer() || v.is_number_unsigned()) {
    const auto x = v.get<long long>();
    if (x == 0 || x == 1) return static_cast<int>(x);
    return std::nullopt;
  }
  if (v.is_number_float()) {
    const double x = v.get<double>();
    if (x == 0.0 || x == 1.0) return static_cast<int>(x);
    return std::nullopt;
  }
  if (v.is_string()) {
    const auto s = v.get<std::string>();
    if (s == "0") return 0;
    if (s == "1") return 1;
  }
  return std::nullopt;
}

}  // namespace

std::string build_prompt(const FeatureInventory& inv, std::string_view sentence) {
  std::string prompt = kPromptTemplate;
  // Sentence goes in first so a literal "{features}" inside it is never substituted.
  replace_once(prompt, "{sentence}", sentence);
  replace_once(prompt, "{features}", json(inv.names()).dump());
  return prompt;
}

FeatureVector parse_llm_response(std::string_view reply, const FeatureInventory& inv) {
  const auto open = reply.find('{');
  const auto close = reply.rfind('}');
  json doc;
  if (open != std::string_view::npos && close != std::string_view::npos && close > open)
    doc = json::parse(reply.substr(open, close - open + 1), nullptr, false);

  const json* features = nullptr;
  if (doc.is_object()) {
    auto it = doc.find("features");
    if (it != doc.end() && it->is_object()) features = &*it;
  }
  if (!features) {
    logger()->warn("feature extraction: unusable model reply, marking every feature as 0");
    return zero_vector(inv, Source::zero_fallback);
  }

  FeatureVector v = zero_vector(inv, Source::llm);
  std::size_t missing = 0;
  for (std::size_t i = 0; i < inv.size(); ++i) {
    auto it = features->find(inv.names()[i]);
    if (it == features->end()) {
      ++missing;
      continue;
    }
    if (auto bit = as_bit(*it)) {
      v.bits[i] = static_cast<std::uint8_t>(*bit);
    } else {
      logger()->warn("feature extraction: non-binary value for '{}', reading as 0", inv.names()[i]);
    }
  }
  if (missing > 0)
    logger()->warn("feature extraction: {} feature key(s) missing from reply, reading as 0", missing);
  return v;
}

// ---------------------------------------------------------------------------
// Cache

FeatureCache::FeatureCache(const FeatureInventory& inv)
    : fingerprint_(inv.fingerprint()), size_(inv.size()) {}

void FeatureCache::put(const std::string& id, FeatureVector v) {
  if (v.bits.size() != size_ || v.inventory_fingerprint != fingerprint_)
    throw UsageError("FeatureCache::put: vector for '" + id + "' belongs to another inventory");
  auto [it, fresh] = vectors_.insert_or_assign(id, std::move(v));
  if (fresh) order_.push_back(id);
}

const FeatureVector* FeatureCache::find(std::string_view id) const {
  auto it = vectors_.find(std::string(id));
  return it == vectors_.end() ? nullptr : &it->second;
}

std::string FeatureCache::serialize() const {
  json header;
  header["inventory_fingerprint"] = fingerprint_;
  header["size"] = size_;
  std::string out = header.dump() + "\n";
  for (const auto& id : order_) {
    const FeatureVector& v = vectors_.at(id);
    json row;
    row["id"] = id;
    row["bits"] = v.bits;
    row["source"] = std::string(to_string(v.source));
    out += row.dump();
    out += '\n';
  }
  return out;
}

FeatureCache FeatureCache::parse(std::string_view text) {
  FeatureCache cache;
  bool have_header = false;
  std::size_t start = 0;
  std::size_t line_no = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    json j = json::parse(line, nullptr, false);
    if (!j.is_object()) throw DataError("feature cache: line " + std::to_string(line_no) + " is not a JSON object");
    if (!have_header) {
      if (!j.contains("inventory_fingerprint") || !j.contains("size"))
        throw DataError("feature cache: missing header line");
      cache.fingerprint_ = j["inventory_fingerprint"].get<std::string>();
      cache.size_ = j["size"].get<std::size_t>();
      have_header = true;
      continue;
    }
    try {
      FeatureVector v;
      v.bits = j.at("bits").get<std::vector<std::uint8_t>>();
      v.source = source_from_string(j.at("source").get<std::string>());
      v.inventory_fingerprint = cache.fingerprint_;
      for (auto b : v.bits)
        if (b > 1) throw DataError("non-binary bit");
      if (v.bits.size() != cache.size_) throw DataError("bit count differs from header size");
      cache.put(j.at("id").get<std::string>(), std::move(v));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("feature cache: line " + std::to_string(line_no) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError("feature cache: line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!have_header) throw DataError("feature cache: missing header line");
  return cache;
}

void FeatureCache::save(const std::string& path) const { write_file(path, serialize()); }

FeatureCache FeatureCache::load(const std::string& path) { return parse(read_file(path)); }

FeatureCache FeatureCache::load(const std::string& path, const FeatureInventory& inv) {
  FeatureCache cache = load(path);
  if (cache.fingerprint() != inv.fingerprint() || cache.feature_count() != inv.size())
    throw DataError("feature cache " + path + " was built for a different inventory (fingerprint " +
                    cache.fingerprint() + ", expected " + inv.fingerprint() + ")");
  return cache;
}

}  // namespace idiolex::features
