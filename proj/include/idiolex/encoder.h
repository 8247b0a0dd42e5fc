#pragma once

#include "idiolex/autograd.h"
#include "idiolex/layers.h"

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace idiolex::encoder {

/// Whitespace-token vocabulary. Id 0 is reserved for unknown tokens.
class Vocabulary {
 public:
  static constexpr int kUnknown = 0;
  static constexpr std::string_view kUnknownToken = "[UNK]";

  Vocabulary();
  explicit Vocabulary(std::vector<std::string> tokens);  // tokens[0] must be [UNK]

  /// Every distinct token in `texts`, sorted, after [UNK].
  static Vocabulary build(std::span<const std::string> texts);

  int id(std::string_view token) const;
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  /// Token ids of `text`, truncated to `max_tokens`.
  std::vector<int> encode(std::string_view text, std::size_t max_tokens) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

struct EncoderConfig {
  std::size_t n_layers = 2;
  std::size_t hidden_dim = 32;
  std::size_t max_tokens = 64;
  std::size_t vocab_size = 0;
};

void validate(const EncoderConfig& cfg);

/// Per-layer hidden states of one sequence: states[l] is T x d for
/// l = 0 (embedding layer) .. L. mask[t] is true for real (non-pad) tokens.
struct LayerStates {
  std::vector<Mat> states;
  std::vector<bool> mask;
};

/// A multi-layer encoder whose every layer output can be pooled.
class LayerEncoder {
 public:
  virtual ~LayerEncoder() = default;
  virtual const EncoderConfig& config() const = 0;
  virtual std::vector<ag::Parameter*> parameters() = 0;
  /// Records the forward pass; returns L+1 Vars, each T x d.
  virtual std::vector<ag::Var> forward(ag::Binder& bind, std::span<const int> ids) = 0;
};

/// Learned token and position embeddings followed by `n_layers` transformer blocks.
class ReferenceEncoder : public LayerEncoder {
 public:
  ReferenceEncoder(EncoderConfig cfg, Rng& rng);

  const EncoderConfig& config() const override { return cfg_; }
  std::vector<ag::Parameter*> parameters() override;
  std::vector<ag::Var> forward(ag::Binder& bind, std::span<const int> ids) override;

 private:
  EncoderConfig cfg_;
  ag::Parameter token_embedding_;
  ag::Parameter position_embedding_;
  std::vector<nn::TransformerBlock> blocks_;
};

/// Runs the encoder without recording gradients.
LayerStates encode_layers(LayerEncoder& enc, std::span<const int> ids);

// ---- layer attention pooling ----

/// softmax(w) with the usual max shift.
RowVec softmax(const RowVec& logits);

/// sum_l softmax(w)_l * h_l, then mean over unmasked token rows.
RowVec layer_attention_pool(std::span<const Mat> states, std::span<const bool> mask,
                            const RowVec& logits);

struct PoolGradient {
  RowVec logits;            // d out / d w, contracted with grad_out
  std::vector<Mat> states;  // d out / d h_l, contracted with grad_out
};

/// Hand-derived vector-Jacobian product of layer_attention_pool.
PoolGradient layer_attention_pool_backward(std::span<const Mat> states, std::span<const bool> mask,
                                           const RowVec& logits, const RowVec& grad_out);

/// Tape version; backward uses layer_attention_pool_backward.
ag::Var layer_attention_pool(std::span<const ag::Var> states, std::span<const bool> mask,
                             const ag::Var& logits);

// ---- centering and normalization ----

inline constexpr double kNormEpsilon = 1e-12;
inline constexpr double kDefaultMomentum = 0.01;

struct RunningMean {
  RowVec mu;
  double momentum = kDefaultMomentum;

  RunningMean() = default;
  RunningMean(std::size_t dim, double m);

  /// mu <- (1 - m) mu + m * batch_mean
  void update(const RowVec& batch_mean);
};

struct StyleEmbedding {
  RowVec values;
  double norm() const { return values.norm(); }
};

/// (v - mu) / (||v - mu|| + eps). In training mode mu is updated with v
/// after it has been used.
StyleEmbedding center_and_normalize(const RowVec& v, RunningMean& mean, bool training);

/// Batch form: every row is centered with the same mu; in training mode mu
/// then moves toward the batch mean once.
Mat center_and_normalize_batch(const Mat& rows, RunningMean& mean, bool training);

// ---- full style encoder ----

/// Encoder + layer attention + running mean: text in, StyleEmbedding out.
struct StyleEncoder {
  Vocabulary vocab;
  std::unique_ptr<ReferenceEncoder> encoder;
  ag::Parameter layer_logits;  // 1 x (L+1)
  RunningMean mean;

  StyleEncoder() = default;
  StyleEncoder(Vocabulary v, EncoderConfig cfg, Rng& rng);

  const EncoderConfig& config() const { return encoder->config(); }
  std::size_t dim() const { return config().hidden_dim; }
  std::vector<ag::Parameter*> parameters();

  /// Pooled (uncentered) 1 x d vector for one sentence, recorded on the tape.
  ag::Var pooled(ag::Binder& bind, std::string_view text);
  std::vector<int> token_ids(std::string_view text) const;

  /// Inference with the frozen running mean. One row per text.
  Mat embed(std::span<const std::string> texts);
  StyleEmbedding embed(std::string_view text);
};

// ---- embedding export ----

/// "IDLX", version byte, u32 count, u32 dim, count*dim little-endian float32.
std::string serialize_embeddings(const Mat& rows);
Mat parse_embeddings(std::string_view bytes);

/// Writes `bin_path` plus a parallel id list (one id per line) at `ids_path`.
void write_embeddings(const std::string& bin_path, const std::string& ids_path,
                      std::span<const std::string> ids, const Mat& rows);

struct EmbeddingTable {
  std::vector<std::string> ids;
  Mat rows;
};
EmbeddingTable read_embeddings(const std::string& bin_path, const std::string& ids_path);

/// "<stem>.ids" next to an embeddings file.
std::string ids_path_for(const std::string& bin_path);

}  // namespace idiolex::encoder
