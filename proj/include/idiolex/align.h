#pragma once

#include "idiolex/autograd.h"
#include "idiolex/encoder.h"
#include "idiolex/layers.h"

#include <cstdint>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

namespace idiolex::align {

// ---- toy decoder language model ----

/// Character (code point) vocabulary with four reserved ids.
class CharVocab {
 public:
  static constexpr int kBos = 0;
  static constexpr int kSep = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;

  CharVocab();
  static CharVocab build(std::span<const std::string> texts);
  explicit CharVocab(std::vector<std::string> symbols);

  std::vector<int> encode(std::string_view text) const;
  std::size_t size() const { return symbols_.size(); }
  const std::vector<std::string>& symbols() const { return symbols_; }

 private:
  std::vector<std::string> symbols_;
  std::map<std::string, int> ids_;
};

struct ToyLmConfig {
  long hidden = 64;
  long n_layers = 2;
  long max_len = 160;
};

/// [BOS] prompt [SEP] response [EOS]; response_start is the index of the
/// first response token.
struct SftSequence {
  std::vector<int> ids;
  std::size_t response_start = 0;

  /// True at response token positions (EOS excluded).
  std::vector<bool> response_mask() const;
};

SftSequence make_sequence(const CharVocab& vocab, std::string_view prompt, std::string_view response,
                          std::size_t max_len);

/// Causal transformer over characters.
class ToyLM {
 public:
  ToyLM() = default;
  ToyLM(CharVocab vocab, ToyLmConfig cfg, Rng& rng);

  const CharVocab& vocab() const { return vocab_; }
  const ToyLmConfig& config() const { return cfg_; }
  std::vector<ag::Parameter*> parameters();

  /// Final-layer states, T x H.
  ag::Var hidden(ag::Binder& bind, std::span<const int> ids);
  ag::Var logits(ag::Binder& bind, const ag::Var& hidden);

  /// Mean next-token cross-entropy over targets inside the response (EOS included).
  ag::Var response_cross_entropy(ag::Binder& bind, const ag::Var& hidden, const SftSequence& seq);

 private:
  CharVocab vocab_;
  ToyLmConfig cfg_;
  ag::Parameter token_embedding_;
  ag::Parameter position_embedding_;
  std::vector<nn::TransformerBlock> blocks_;
  nn::LayerNorm final_norm_;
  nn::Linear lm_head_;
};

// ---- alignment objective ----

/// Linear(H, H) -> ReLU -> Linear(H, d), output unit-normalized.
struct ProjectionHead {
  nn::Linear hidden;
  nn::Linear out;

  ProjectionHead() = default;
  ProjectionHead(Eigen::Index lm_width, Eigen::Index style_dim, Rng& rng);

  RowVec apply(const RowVec& h_bar) const;
  void collect(std::vector<ag::Parameter*>& params);
};

/// Mean of the rows of `hidden` where `response_mask` is true.
RowVec pooled_response_state(const Mat& hidden, std::span<const bool> response_mask);
ag::Var pooled_response_state(const ag::Var& hidden, std::span<const bool> response_mask);

struct AlignmentGradient {
  double loss = 0.0;
  RowVec h_bar;    // dL/dh_bar
  Mat hidden_w;    // dL/d head.hidden.weight
  Mat hidden_b;
  Mat out_w;
  Mat out_b;
};

/// 1 - cos(g(h_bar), e), with its hand-derived gradient.
AlignmentGradient alignment_loss_grad(const RowVec& h_bar, const RowVec& e, const ProjectionHead& head);
double alignment_loss(const RowVec& h_bar, const RowVec& e, const ProjectionHead& head);
/// Tape version; gradients reach h_bar and the head's parameters.
ag::Var alignment_loss(ag::Binder& bind, const ag::Var& h_bar, const RowVec& e, ProjectionHead& head);

/// ce + alpha * align
double combined_sft_loss(double ce, double align, double alpha);

// ---- data ----

struct AlignmentSample {
  std::string id;
  std::string prompt;
  std::string response;
};

std::string samples_to_jsonl(std::span<const AlignmentSample> samples);
std::vector<AlignmentSample> parse_samples_jsonl(std::string_view text);
std::vector<AlignmentSample> load_samples(const std::string& path);

/// Target style embeddings by sample id, stored in the embedding export format.
class EmbeddingCache {
 public:
  EmbeddingCache() = default;
  EmbeddingCache(std::vector<std::string> ids, Mat rows);

  const RowVec* find(std::string_view id) const;
  std::size_t size() const { return ids_.size(); }
  const std::vector<std::string>& ids() const { return ids_; }
  const Mat& rows() const { return rows_; }

  /// Writes `path` and the parallel .ids file.
  void save(const std::string& path) const;
  static EmbeddingCache load(const std::string& path);

 private:
  std::vector<std::string> ids_;
  Mat rows_;
  std::map<std::string, RowVec, std::less<>> by_id_;
};

/// One frozen-encoder embedding per (id, text) response.
EmbeddingCache build_embedding_cache(std::span<const std::pair<std::string, std::string>> responses,
                                     encoder::StyleEncoder& model);

/// response_mean pools the response states before projecting; per_position
/// projects each response state and averages the per-position losses.
enum class AlignPooling { response_mean, per_position };

std::string_view to_string(AlignPooling p);
AlignPooling align_pooling_from_string(std::string_view s);

struct SftConfig {
  double alpha = 0.5;
  AlignPooling pooling = AlignPooling::response_mean;
  double learning_rate = 1e-3;
  long epochs = 2;
  long batch_size = 16;
  std::uint64_t seed = 1;
};

struct SftStep {
  long step = 0;
  double ce = 0.0;
  double align = 0.0;
  double total = 0.0;
};

struct HeldOutMetrics {
  double mean_cosine = 0.0;
  double cross_entropy = 0.0;
};

struct SftResult {
  HeldOutMetrics before;
  HeldOutMetrics after;
  std::vector<SftStep> steps;
};

HeldOutMetrics evaluate_alignment(ToyLM& lm, const ProjectionHead& head, std::span<const AlignmentSample> samples,
                                  const EmbeddingCache& cache, AlignPooling pooling = AlignPooling::response_mean);

/// Trains the LM and head jointly on ce + alpha * align. Every sample id must
/// be in the cache.
SftResult run_alignment_sft(ToyLM& lm, ProjectionHead& head, std::span<const AlignmentSample> train,
                            std::span<const AlignmentSample> heldout, const EmbeddingCache& cache,
                            const SftConfig& cfg, std::ostream* log = nullptr);

}  // namespace idiolex::align
