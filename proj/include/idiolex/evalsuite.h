#pragma once

#include "idiolex/common.h"

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace idiolex::encoder {
struct StyleEncoder;
}

namespace idiolex::eval {

inline constexpr const char* kUnknownLabel = "UNK";

struct EvalReport {
  std::string task;
  std::map<std::string, double> metrics;
  std::string config_fingerprint;
  std::uint64_t seed = 0;
  std::vector<std::string> predictions;  // optional, per test item

  /// {"task", "metrics", "config_fingerprint", "seed"[, "predictions"]}
  std::string to_json() const;
};

// ---- similarity ----

/// Normalized dot product. A zero vector scores 0 (with a warning).
double cosine_similarity(const RowVec& a, const RowVec& b);

/// Sample Pearson correlation. Needs >= 3 points and spread in both coordinates.
double pearson(std::span<const double> x, std::span<const double> y);

struct CorrelationPair {
  std::string pair_id;
  double style_sim = 0.0;
  double semantic_sim = 0.0;
  int proximity = 0;
};

struct CorrelationReport {
  double pearson_r = 0.0;
  /// Header pair_id, style_sim, semantic_sim, proximity; tab separated.
  std::string scatter_tsv;
};

CorrelationReport correlation_report(std::span<const CorrelationPair> pairs);

// ---- metrics ----

/// Per-class F1 averaged over every label seen in gold or predictions.
double macro_f1(std::span<const std::string> gold, std::span<const std::string> predicted);
double accuracy(std::span<const std::string> gold, std::span<const std::string> predicted);

using LabelSet = std::vector<std::string>;
/// Multi-label macro F1 over the union of labels, and exact-match accuracy.
double macro_f1_multi(std::span<const LabelSet> gold, std::span<const LabelSet> predicted);
double exact_match(std::span<const LabelSet> gold, std::span<const LabelSet> predicted);

/// Sorted distinct labels.
std::vector<std::string> label_set(std::span<const std::string> labels);

// ---- embedding baselines ----

struct Classification {
  std::vector<std::string> predicted;
  EvalReport report;
};

/// Nearest Euclidean class centroid; ties go to the smaller label. With
/// `test_labels` the report carries accuracy and macro_f1.
Classification centroid_classify(const Mat& train, std::span<const std::string> train_labels, const Mat& test,
                                 std::span<const std::string> test_labels = {});

struct KMeansResult {
  Mat centroids;
  std::vector<std::size_t> assignment;
  int iterations = 0;
};

/// k-means++ seeding, then Lloyd iterations until centroids move less than
/// `tol` (Frobenius) or `max_iter` is reached.
KMeansResult kmeans(const Mat& points, std::size_t k, std::uint64_t seed, int max_iter = 300, double tol = 1e-4);
std::size_t nearest_centroid(const Mat& centroids, const RowVec& x);

/// Fits on train, assigns test, maps each cluster to its most frequent test
/// label (ties to the smaller label). k = 0 uses the number of distinct test labels.
EvalReport kmeans_cluster_eval(const Mat& train, const Mat& test, std::span<const std::string> test_labels,
                               std::size_t k, std::uint64_t seed);

/// Fraction of trials where all 3 same-label candidates are strictly more
/// similar to the anchor than all 3 other-label candidates.
double retrieval_accuracy(const Mat& embeddings, std::span<const std::string> labels, std::size_t trials,
                          std::uint64_t seed);

// ---- classification heads ----

/// Index of the top class, or nullopt (UNK) when top - second < threshold.
std::optional<std::size_t> open_set_predict(const RowVec& probabilities, double threshold);

/// omega * p_lex + (1 - omega) * p_neural
Mat ensemble_predict(const Mat& p_lex, const Mat& p_neural, double omega);

// ---- lexical baseline ----

struct LexicalConfig {
  int ngram_min = 2;
  int ngram_max = 5;
  double c = 1.0;  // inverse L2 strength
  double tolerance = 1e-4;
  int max_iterations = 1000;
  std::uint64_t seed = 0;
};

/// Character n-gram TF-IDF with multinomial logistic regression. Classes
/// are the sorted distinct train labels.
class LexicalClassifier {
 public:
  explicit LexicalClassifier(LexicalConfig cfg = {}) : cfg_(cfg) {}

  void fit(std::span<const std::string> texts, std::span<const std::string> labels);
  Mat predict_proba(std::span<const std::string> texts) const;
  const std::vector<std::string>& classes() const { return classes_; }
  /// Final mean training loss, including the regularizer.
  double training_loss() const { return loss_; }

  using SparseRow = std::vector<std::pair<int, double>>;
  SparseRow features(const std::string& text) const;

 private:
  LexicalConfig cfg_;
  std::vector<std::string> classes_;
  std::map<std::string, int> ngram_index_;
  std::vector<double> idf_;
  Mat weights_;  // n_features x C
  RowVec bias_;
  double loss_ = 0.0;
};

Mat lexical_classifier(std::span<const std::string> train_texts, std::span<const std::string> train_labels,
                       std::span<const std::string> test_texts, const LexicalConfig& cfg = {});

/// Character n-grams of `text` (Unicode code points) for n in [n_min, n_max].
std::vector<std::string> char_ngrams(const std::string& text, int n_min, int n_max);

// ---- probes ----

enum class ProbeMode { single_label, multi_label };

struct ProbeConfig {
  ProbeMode mode = ProbeMode::single_label;
  double learning_rate = 1e-2;
  double weight_decay = 0.01;
  double label_smoothing = 0.0;
  int max_epochs = 100;
  int batch_size = 32;
  double warmup_ratio = 0.1;
  int patience = 3;
  double threshold = 0.5;  // multi-label assignment
  double encoder_learning_rate = 1e-4;  // fine_tune_probe only
  std::uint64_t seed = 0;
};

/// Linear head over frozen embeddings. Classes are the sorted distinct labels
/// over every item's label set.
struct Probe {
  std::vector<std::string> classes;
  Mat weight;  // d x C
  RowVec bias;
  ProbeMode mode = ProbeMode::single_label;
  double threshold = 0.5;
  std::vector<double> epoch_losses;

  /// Softmax (single-label) or sigmoid (multi-label) probabilities.
  Mat predict_proba(const Mat& x) const;
  std::vector<LabelSet> predict(const Mat& x) const;
};

struct ProbeData {
  Mat x;
  std::vector<LabelSet> labels;
};

/// Trains on `train`, early-stopping on dev macro F1 (patience in epochs).
Probe train_probe(const ProbeData& train, const ProbeData& dev, const ProbeConfig& cfg);

/// Like train_probe, but the encoder is trained too, in place; its running
/// mean stays frozen. The probe reads embeddings from the updated encoder,
/// which is left at the best-dev epoch.
Probe fine_tune_probe(encoder::StyleEncoder& encoder, std::span<const std::string> train_texts,
                      std::span<const LabelSet> train_labels, std::span<const std::string> dev_texts,
                      std::span<const LabelSet> dev_labels, const ProbeConfig& cfg);

struct OpenSetTuning {
  double threshold = 0.0;
  double omega = 0.0;
  double macro_f1 = 0.0;
};

/// Grid-searches the UNK threshold (21 points in [0, 1]) and, when p_lex is
/// given, the ensemble weight omega (same grid) for the best macro F1.
OpenSetTuning tune_open_set(const Mat& p_neural, const Mat* p_lex, std::span<const std::string> classes,
                            std::span<const std::string> gold);

std::vector<std::string> open_set_labels(const Mat& probabilities, std::span<const std::string> classes,
                                         double threshold);

}  // namespace idiolex::eval
