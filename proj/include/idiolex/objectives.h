#pragma once

#include "idiolex/autograd.h"
#include "idiolex/config.h"
#include "idiolex/features.h"
#include "idiolex/layers.h"

#include <optional>
#include <span>
#include <string>

namespace idiolex::objectives {

using ProximityMatrix = Eigen::MatrixXi;

struct LossConfig {
  double margin_final = 0.5;
  long margin_warm_steps = 0;  // 0: warm over the whole first stage
  double alpha = 0.5;
  double bce_weight = 0.25;
  double tau = 0.07;
  long topk_positives = 5;
  double var_weight = 1.0;
  double cov_weight = 0.04;
};

void validate(const LossConfig& cfg);
/// Reads the LossConfig field names from a key=value config, keeping defaults.
LossConfig loss_config_from(const KeyValueConfig& kv);

enum class Stage { pretrain, feature };
std::string_view to_string(Stage s);
Stage stage_from_string(std::string_view s);

struct LossBreakdown {
  double mrl = 0.0;
  double supcon = 0.0;
  double bce = 0.0;
  double var = 0.0;
  double cov = 0.0;
  double total = 0.0;
};

/// lambda = margin_final * min(1, step / warm_steps)
double margin_schedule(long step, long warm_steps, double margin_final);

/// A scalar loss with its gradient w.r.t. the input matrix.
struct LossGrad {
  double value = 0.0;
  Mat grad;
};

/// Margin ranking loss over every anchor a and ordered pair (i, j) with
/// r(a,i) > r(a,j). Similarities are cosines of the rows of `embeddings`.
/// Pairs with equal proximity contribute nothing.
LossGrad margin_ranking_loss(const Mat& embeddings, const ProximityMatrix& proximity, double lambda);

/// Jaccard weights with, per row, only the `topk` largest off-diagonal
/// entries kept (ties go to the lower index). Diagonal is zero.
Mat supcon_weights(std::span<const features::FeatureVector> features, long topk);

/// Weighted supervised contrastive loss for a given weight matrix. Self is
/// excluded from the softmax denominator; the sum is divided by the number
/// of rows with any nonzero weight.
LossGrad supcon_loss(const Mat& projections, const Mat& weights, double tau);
LossGrad supcon_loss(const Mat& projections, std::span<const features::FeatureVector> features,
                     const LossConfig& cfg);

/// Mean binary cross-entropy with logits over all B x F entries.
LossGrad feature_bce_loss(const Mat& logits, const Mat& targets);

struct VarCovLoss {
  double var = 0.0;
  double cov = 0.0;
  Mat grad_var;
  Mat grad_cov;
};

/// var = mean_d max(0, 1 - std_d), cov = (1/d) sum_{p != q} C_pq^2, both over the batch.
VarCovLoss variance_decorrelation_loss(const Mat& embeddings);

/// Whatever a training step measured. Unset parts were not computed.
struct LossParts {
  std::optional<double> mrl;
  std::optional<double> supcon;
  std::optional<double> bce;
  std::optional<double> var;
  std::optional<double> cov;
};

/// Coefficient of each part in the stage's total.
struct StageWeights {
  double mrl = 0.0;
  double supcon = 0.0;
  double bce = 0.0;
  double var = 0.0;
  double cov = 0.0;
};

StageWeights stage_weights(const LossConfig& cfg, Stage stage);

/// pretrain: mrl + regularizers.
/// feature:  (1 - alpha) mrl + alpha (bce_weight bce + supcon) + regularizers.
LossBreakdown combined_objective(const LossParts& parts, const LossConfig& cfg, Stage stage);

// ---- tape adapters ----
ag::Var margin_ranking_loss(const ag::Var& embeddings, const ProximityMatrix& proximity, double lambda);
ag::Var supcon_loss(const ag::Var& projections, const Mat& weights, double tau);
ag::Var feature_bce_loss(const ag::Var& logits, const Mat& targets);
/// Returns (var, cov).
std::pair<ag::Var, ag::Var> variance_decorrelation_loss(const ag::Var& embeddings);

// ---- heads ----

/// Linear(d, 2d) -> ReLU -> Linear(2d, F); outputs logits.
struct FeatureHead {
  nn::Linear hidden;
  nn::Linear out;

  FeatureHead() = default;
  FeatureHead(Eigen::Index dim, Eigen::Index n_features, Rng& rng);

  ag::Var operator()(ag::Binder& bind, const ag::Var& x);
  Mat apply(const Mat& x) const;
  void collect(std::vector<ag::Parameter*>& out_params);
};

inline constexpr Eigen::Index kProjectionDim = 256;

/// Linear(d, d) -> ReLU -> Linear(d, P), rows unit-normalized.
struct ProjectionHead {
  nn::Linear hidden;
  nn::Linear out;

  ProjectionHead() = default;
  ProjectionHead(Eigen::Index dim, Eigen::Index projection_dim, Rng& rng);

  ag::Var operator()(ag::Binder& bind, const ag::Var& x);
  void collect(std::vector<ag::Parameter*>& out_params);
};

}  // namespace idiolex::objectives
