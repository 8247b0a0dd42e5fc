#include "idiolex/encoder.h"

#include "idiolex/corpus.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <set>

namespace idiolex::encoder {

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary() : Vocabulary(std::vector<std::string>{std::string(kUnknownToken)}) {}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  if (tokens_.empty() || tokens_[0] != kUnknownToken)
    throw DataError("vocabulary must start with the [UNK] token");
  for (std::size_t i = 0; i < tokens_.size(); ++i)
    if (!ids_.emplace(tokens_[i], static_cast<int>(i)).second)
      throw DataError("vocabulary: duplicate token '" + tokens_[i] + "'");
}

Vocabulary Vocabulary::build(std::span<const std::string> texts) {
  std::set<std::string> seen;
  for (const auto& t : texts)
    for (auto tok : corpus::tokenize_whitespace(t)) seen.emplace(tok);
  seen.erase(std::string(kUnknownToken));
  std::vector<std::string> tokens{std::string(kUnknownToken)};
  tokens.insert(tokens.end(), seen.begin(), seen.end());
  return Vocabulary(std::move(tokens));
}

int Vocabulary::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  return it == ids_.end() ? kUnknown : it->second;
}

std::vector<int> Vocabulary::encode(std::string_view text, std::size_t max_tokens) const {
  std::vector<int> out;
  for (auto tok : corpus::tokenize_whitespace(text)) {
    if (out.size() >= max_tokens) break;
    out.push_back(id(tok));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reference encoder

void validate(const EncoderConfig& cfg) {
  if (cfg.n_layers < 1) throw ConfigError("encoder: n_layers must be at least 1");
  if (cfg.hidden_dim < 2) throw ConfigError("encoder: hidden_dim must be at least 2");
  if (cfg.max_tokens < 1) throw ConfigError("encoder: max_tokens must be positive");
  if (cfg.vocab_size < 1) throw ConfigError("encoder: vocab_size must be positive");
}

ReferenceEncoder::ReferenceEncoder(EncoderConfig cfg, Rng& rng) : cfg_(cfg) {
  validate(cfg_);
  const auto d = static_cast<Eigen::Index>(cfg_.hidden_dim);
  token_embedding_ = ag::Parameter("encoder.token_embedding",
                                   random_normal(static_cast<Eigen::Index>(cfg_.vocab_size), d, 1.0, rng));
  position_embedding_ = ag::Parameter(
      "encoder.position_embedding", random_normal(static_cast<Eigen::Index>(cfg_.max_tokens), d, 0.1, rng));
  for (std::size_t l = 0; l < cfg_.n_layers; ++l)
    blocks_.emplace_back("encoder.block" + std::to_string(l), d, 2 * d, rng);
}

std::vector<ag::Parameter*> ReferenceEncoder::parameters() {
  std::vector<ag::Parameter*> out{&token_embedding_, &position_embedding_};
  for (auto& b : blocks_) b.collect(out);
  return out;
}

std::vector<ag::Var> ReferenceEncoder::forward(ag::Binder& bind, std::span<const int> ids) {
  if (ids.empty()) throw DataError("encoder: empty token sequence");
  if (ids.size() > cfg_.max_tokens)
    throw UsageError("encoder: sequence of " + std::to_string(ids.size()) + " tokens exceeds max_tokens " +
                     std::to_string(cfg_.max_tokens));
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size)
      throw DataError("encoder: token id " + std::to_string(id) + " outside the vocabulary");

  ag::Var tok = ag::gather_rows(bind(token_embedding_), ids);
  ag::Var pos = ag::slice_rows(bind(position_embedding_), 0, static_cast<Eigen::Index>(ids.size()));
  std::vector<ag::Var> states{ag::add(tok, pos)};
  for (auto& block : blocks_) states.push_back(block(bind, states.back(), /*causal=*/false));
  return states;
}

LayerStates encode_layers(LayerEncoder& enc, std::span<const int> ids) {
  ag::Tape tape;
  ag::Binder bind(tape, /*trainable=*/false);
  LayerStates out;
  for (const auto& v : enc.forward(bind, ids)) out.states.push_back(v.value());
  out.mask.assign(ids.size(), true);
  return out;
}

// ---------------------------------------------------------------------------
// Layer attention pooling

RowVec softmax(const RowVec& logits) {
  if (logits.size() == 0) throw UsageError("softmax: empty logits");
  RowVec e = (logits.array() - logits.maxCoeff()).exp();
  return e / e.sum();
}

namespace {

void check_pool_inputs(std::span<const Mat> states, std::span<const bool> mask, Eigen::Index n_logits) {
  if (states.empty()) throw UsageError("layer_attention_pool: no layers");
  if (static_cast<Eigen::Index>(states.size()) != n_logits)
    throw UsageError("layer_attention_pool: need one logit per layer");
  for (const auto& s : states)
    if (s.rows() != static_cast<Eigen::Index>(mask.size()) || s.cols() != states[0].cols())
      throw UsageError("layer_attention_pool: state shapes disagree with the mask");
  if (std::none_of(mask.begin(), mask.end(), [](bool b) { return b; }))
    throw DataError("layer_attention_pool: every token is masked");
}

RowVec masked_mean(const Mat& h, std::span<const bool> mask) {
  RowVec acc = RowVec::Zero(h.cols());
  double n = 0.0;
  for (Eigen::Index t = 0; t < h.rows(); ++t) {
    if (!mask[static_cast<std::size_t>(t)]) continue;
    acc += h.row(t);
    n += 1.0;
  }
  return acc / n;
}

}  // namespace

RowVec layer_attention_pool(std::span<const Mat> states, std::span<const bool> mask, const RowVec& logits) {
  check_pool_inputs(states, mask, logits.size());
  const RowVec alpha = softmax(logits);
  RowVec out = RowVec::Zero(states[0].cols());
  for (std::size_t l = 0; l < states.size(); ++l) out += alpha(static_cast<Eigen::Index>(l)) * masked_mean(states[l], mask);
  return out;
}

PoolGradient layer_attention_pool_backward(std::span<const Mat> states, std::span<const bool> mask,
                                           const RowVec& logits, const RowVec& grad_out) {
  check_pool_inputs(states, mask, logits.size());
  const RowVec alpha = softmax(logits);
  const double n = static_cast<double>(std::count(mask.begin(), mask.end(), true));

  PoolGradient g;
  // d/dw_k = alpha_k (g . m_k - sum_l alpha_l g . m_l)
  RowVec gm(logits.size());
  for (std::size_t l = 0; l < states.size(); ++l)
    gm(static_cast<Eigen::Index>(l)) = grad_out.dot(masked_mean(states[l], mask));
  const double avg = alpha.dot(gm);
  g.logits = alpha.array() * (gm.array() - avg);

  for (std::size_t l = 0; l < states.size(); ++l) {
    Mat d = Mat::Zero(states[l].rows(), states[l].cols());
    const double w = alpha(static_cast<Eigen::Index>(l)) / n;
    for (Eigen::Index t = 0; t < d.rows(); ++t)
      if (mask[static_cast<std::size_t>(t)]) d.row(t) = w * grad_out;
    g.states.push_back(std::move(d));
  }
  return g;
}

ag::Var layer_attention_pool(std::span<const ag::Var> states, std::span<const bool> mask,
                             const ag::Var& logits) {
  if (states.empty()) throw UsageError("layer_attention_pool: no layers");
  ag::Tape& tape = *logits.tape();
  std::vector<Mat> values;
  for (const auto& s : states) values.push_back(s.value());
  const RowVec w = logits.value().row(0);
  Mat out = layer_attention_pool(values, mask, w);

  std::vector<ag::Var> inputs(states.begin(), states.end());
  inputs.push_back(logits);
  std::vector<bool> m(mask.begin(), mask.end());
  std::vector<ag::Var> kept(states.begin(), states.end());
  return tape.record(std::move(out), inputs, [&tape, kept, logits, m, w](const Mat& g) {
    std::vector<Mat> values;
    for (const auto& s : kept) values.push_back(s.value());
    std::vector<char> mc(m.begin(), m.end());
    std::span<const bool> mspan(reinterpret_cast<const bool*>(mc.data()), mc.size());
    PoolGradient pg = layer_attention_pool_backward(values, mspan, w, g.row(0));
    tape.accumulate(logits, Mat(pg.logits));
    for (std::size_t l = 0; l < kept.size(); ++l) tape.accumulate(kept[l], pg.states[l]);
  });
}

// ---------------------------------------------------------------------------
// Centering and normalization

RunningMean::RunningMean(std::size_t dim, double m) : mu(RowVec::Zero(static_cast<Eigen::Index>(dim))), momentum(m) {
  if (!(m > 0.0 && m < 1.0)) throw ConfigError("running mean momentum must lie in (0, 1)");
}

void RunningMean::update(const RowVec& batch_mean) {
  if (batch_mean.size() != mu.size()) throw UsageError("RunningMean::update: dimension mismatch");
  mu = (1.0 - momentum) * mu + momentum * batch_mean;
}

StyleEmbedding center_and_normalize(const RowVec& v, RunningMean& mean, bool training) {
  Mat row = v;
  Mat out = center_and_normalize_batch(row, mean, training);
  return StyleEmbedding{out.row(0)};
}

Mat center_and_normalize_batch(const Mat& rows, RunningMean& mean, bool training) {
  if (!rows.allFinite()) throw NumericError("center_and_normalize: non-finite input");
  if (rows.cols() != mean.mu.size()) throw UsageError("center_and_normalize: dimension mismatch");
  Mat out = rows.rowwise() - mean.mu;
  for (Eigen::Index i = 0; i < out.rows(); ++i) out.row(i) /= (out.row(i).norm() + kNormEpsilon);
  if (training && rows.rows() > 0) mean.update(rows.colwise().mean());
  return out;
}

// ---------------------------------------------------------------------------
// Style encoder

StyleEncoder::StyleEncoder(Vocabulary v, EncoderConfig cfg, Rng& rng) : vocab(std::move(v)) {
  cfg.vocab_size = vocab.size();
  encoder = std::make_unique<ReferenceEncoder>(cfg, rng);
  layer_logits = ag::Parameter("layer_attention.logits", Mat::Zero(1, static_cast<Eigen::Index>(cfg.n_layers + 1)));
  mean = RunningMean(cfg.hidden_dim, kDefaultMomentum);
}

std::vector<ag::Parameter*> StyleEncoder::parameters() {
  auto out = encoder->parameters();
  out.push_back(&layer_logits);
  return out;
}

std::vector<int> StyleEncoder::token_ids(std::string_view text) const {
  return vocab.encode(text, config().max_tokens);
}

ag::Var StyleEncoder::pooled(ag::Binder& bind, std::string_view text) {
  const std::vector<int> ids = token_ids(text);
  std::vector<ag::Var> states = encoder->forward(bind, ids);
  std::vector<char> mask_storage(ids.size(), 1);
  std::span<const bool> mask(reinterpret_cast<const bool*>(mask_storage.data()), mask_storage.size());
  return layer_attention_pool(states, mask, bind(layer_logits));
}

Mat StyleEncoder::embed(std::span<const std::string> texts) {
  Mat raw(static_cast<Eigen::Index>(texts.size()), static_cast<Eigen::Index>(dim()));
  for (std::size_t i = 0; i < texts.size(); ++i) {
    ag::Tape tape;
    ag::Binder bind(tape, /*trainable=*/false);
    raw.row(static_cast<Eigen::Index>(i)) = pooled(bind, texts[i]).value().row(0);
  }
  RunningMean frozen = mean;
  return center_and_normalize_batch(raw, frozen, /*training=*/false);
}

StyleEmbedding StyleEncoder::embed(std::string_view text) {
  const std::string s(text);
  Mat m = embed(std::span<const std::string>(&s, 1));
  return StyleEmbedding{m.row(0)};
}

// ---------------------------------------------------------------------------
// Embedding export

namespace {

constexpr char kMagic[4] = {'I', 'D', 'L', 'X'};
constexpr std::uint8_t kEmbeddingVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t get_u32(std::string_view in, std::size_t pos) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return v;
}

void put_f32(std::string& out, float f) {
  std::uint32_t bits = 0;
  std::memcpy(&bits, &f, sizeof bits);
  put_u32(out, bits);
}

float get_f32(std::string_view in, std::size_t pos) {
  const std::uint32_t bits = get_u32(in, pos);
  float f = 0.0F;
  std::memcpy(&f, &bits, sizeof f);
  return f;
}

}  // namespace

std::string serialize_embeddings(const Mat& rows) {
  std::string out(kMagic, 4);
  out.push_back(static_cast<char>(kEmbeddingVersion));
  put_u32(out, static_cast<std::uint32_t>(rows.rows()));
  put_u32(out, static_cast<std::uint32_t>(rows.cols()));
  out.reserve(out.size() + static_cast<std::size_t>(rows.size()) * 4);
  for (Eigen::Index i = 0; i < rows.rows(); ++i)
    for (Eigen::Index j = 0; j < rows.cols(); ++j) put_f32(out, static_cast<float>(rows(i, j)));
  return out;
}

Mat parse_embeddings(std::string_view bytes) {
  if (bytes.size() < 13 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw DataError("embedding file: bad magic");
  if (static_cast<std::uint8_t>(bytes[4]) != kEmbeddingVersion)
    throw DataError("embedding file: unsupported version " + std::to_string(static_cast<int>(bytes[4])));
  const std::uint32_t count = get_u32(bytes, 5);
  const std::uint32_t dim = get_u32(bytes, 9);
  const std::size_t expected = 13 + static_cast<std::size_t>(count) * dim * 4;
  if (bytes.size() != expected)
    throw DataError("embedding file: expected " + std::to_string(expected) + " bytes, found " +
                    std::to_string(bytes.size()));
  Mat rows(count, dim);
  std::size_t pos = 13;
  for (std::uint32_t i = 0; i < count; ++i)
    for (std::uint32_t j = 0; j < dim; ++j, pos += 4) rows(i, j) = get_f32(bytes, pos);
  return rows;
}

void write_embeddings(const std::string& bin_path, const std::string& ids_path,
                      std::span<const std::string> ids, const Mat& rows) {
  if (static_cast<Eigen::Index>(ids.size()) != rows.rows())
    throw UsageError("write_embeddings: id count differs from row count");
  std::string id_text;
  for (const auto& id : ids) {
    if (id.find('\n') != std::string::npos) throw DataError("write_embeddings: id contains a newline");
    id_text += id;
    id_text += '\n';
  }
  write_file(bin_path, serialize_embeddings(rows));
  write_file(ids_path, id_text);
}

EmbeddingTable read_embeddings(const std::string& bin_path, const std::string& ids_path) {
  EmbeddingTable t;
  t.rows = parse_embeddings(read_file(bin_path));
  const std::string text = read_file(ids_path);
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    t.ids.emplace_back(text.substr(start, end - start));
    start = end + 1;
  }
  if (static_cast<Eigen::Index>(t.ids.size()) != t.rows.rows())
    throw DataError("embedding ids file " + ids_path + " lists " + std::to_string(t.ids.size()) +
                    " ids for " + std::to_string(t.rows.rows()) + " vectors");
  return t;
}

std::string ids_path_for(const std::string& bin_path) {
  std::filesystem::path p(bin_path);
  p.replace_extension(".ids");
  return p.string();
}

}  // namespace idiolex::encoder
