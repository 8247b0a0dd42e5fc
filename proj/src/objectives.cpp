#include "idiolex/objectives.h"

#include "idiolex/log.h"

#include <algorithm>
#include <cmath>
#include <limits>

namespace idiolex::objectives {

void validate(const LossConfig& cfg) {
  if (!(cfg.tau > 0.0)) throw ConfigError("loss config: tau must be positive");
  if (!(cfg.alpha >= 0.0 && cfg.alpha <= 1.0)) throw ConfigError("loss config: alpha must lie in [0, 1]");
  if (!(cfg.margin_final >= 0.0)) throw ConfigError("loss config: margin_final must be nonnegative");
  if (cfg.margin_warm_steps < 0) throw ConfigError("loss config: margin_warm_steps must be nonnegative");
  if (cfg.topk_positives < 1) throw ConfigError("loss config: topk_positives must be at least 1");
  if (cfg.bce_weight < 0.0 || cfg.var_weight < 0.0 || cfg.cov_weight < 0.0)
    throw ConfigError("loss config: loss weights must be nonnegative");
}

LossConfig loss_config_from(const KeyValueConfig& kv) {
  LossConfig cfg;
  cfg.margin_final = kv.get_double("margin_final", cfg.margin_final);
  cfg.margin_warm_steps = kv.get_int("margin_warm_steps", cfg.margin_warm_steps);
  cfg.alpha = kv.get_double("alpha", cfg.alpha);
  cfg.bce_weight = kv.get_double("bce_weight", cfg.bce_weight);
  cfg.tau = kv.get_double("tau", cfg.tau);
  cfg.topk_positives = kv.get_int("topk_positives", cfg.topk_positives);
  cfg.var_weight = kv.get_double("var_weight", cfg.var_weight);
  cfg.cov_weight = kv.get_double("cov_weight", cfg.cov_weight);
  validate(cfg);
  return cfg;
}

std::string_view to_string(Stage s) { return s == Stage::pretrain ? "pretrain" : "feature"; }

Stage stage_from_string(std::string_view s) {
  if (s == "pretrain") return Stage::pretrain;
  if (s == "feature") return Stage::feature;
  throw UsageError("unknown stage '" + std::string(s) + "' (expected pretrain or feature)");
}

double margin_schedule(long step, long warm_steps, double margin_final) {
  if (step < 0) throw UsageError("margin_schedule: negative step");
  if (warm_steps < 1) throw UsageError("margin_schedule: warm_steps must be at least 1");
  return margin_final * std::min(1.0, static_cast<double>(step) / static_cast<double>(warm_steps));
}

namespace {

constexpr double kUnitTolerance = 1e-5;

/// Rows scaled to unit length, plus the original norms.
Mat unit_rows(const Mat& x, Vec& norms) {
  norms = x.rowwise().norm();
  Mat u = x;
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    if (norms(i) > 0.0) u.row(i) /= norms(i);
  return u;
}

/// Pulls a gradient on unit rows back through the row normalization.
Mat through_normalization(const Mat& u, const Vec& norms, const Mat& grad_u) {
  Mat g = Mat::Zero(u.rows(), u.cols());
  for (Eigen::Index i = 0; i < u.rows(); ++i) {
    if (norms(i) <= 0.0) continue;
    const double along = u.row(i).dot(grad_u.row(i));
    g.row(i) = (grad_u.row(i) - along * u.row(i)) / norms(i);
  }
  return g;
}

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

LossGrad margin_ranking_loss(const Mat& embeddings, const ProximityMatrix& proximity, double lambda) {
  const Eigen::Index B = embeddings.rows();
  if (proximity.rows() != B || proximity.cols() != B)
    throw UsageError("margin_ranking_loss: proximity must be B x B");
  Vec norms;
  const Mat u = unit_rows(embeddings, norms);
  if (((norms.array() - 1.0).abs() > kUnitTolerance).any())
    logger()->warn("margin_ranking_loss: embeddings are not unit norm; using cosine similarity");

  const Mat s = u * u.transpose();
  Mat g_s = Mat::Zero(B, B);  // dL/ds(a, i), one-sided: s(a, i) read from row a
  double loss = 0.0;
  for (Eigen::Index a = 0; a < B; ++a) {
    for (Eigen::Index i = 0; i < B; ++i) {
      if (i == a) continue;
      for (Eigen::Index j = 0; j < B; ++j) {
        if (j == a || j == i) continue;
        const int dr = proximity(a, i) - proximity(a, j);
        if (dr <= 0) continue;
        const double h = -dr * (s(a, i) - s(a, j)) + lambda;
        if (h <= 0.0) continue;
        loss += h;
        g_s(a, i) -= dr;
        g_s(a, j) += dr;
      }
    }
  }
  const Mat g_u = (g_s + g_s.transpose()) * u;
  return {loss, through_normalization(u, norms, g_u)};
}

Mat supcon_weights(std::span<const features::FeatureVector> feats, long topk) {
  const auto B = static_cast<Eigen::Index>(feats.size());
  if (topk < 1) throw UsageError("supcon_weights: topk must be at least 1");
  Mat full = Mat::Zero(B, B);
  for (Eigen::Index i = 0; i < B; ++i)
    for (Eigen::Index j = i + 1; j < B; ++j)
      full(i, j) = full(j, i) = features::jaccard(feats[static_cast<std::size_t>(i)], feats[static_cast<std::size_t>(j)]);

  Mat kept = Mat::Zero(B, B);
  std::vector<Eigen::Index> order;
  for (Eigen::Index i = 0; i < B; ++i) {
    order.clear();
    for (Eigen::Index j = 0; j < B; ++j)
      if (j != i) order.push_back(j);
    std::stable_sort(order.begin(), order.end(),
                     [&](Eigen::Index x, Eigen::Index y) { return full(i, x) > full(i, y); });
    const auto keep = std::min<std::size_t>(order.size(), static_cast<std::size_t>(topk));
    for (std::size_t r = 0; r < keep; ++r) kept(i, order[r]) = full(i, order[r]);
  }
  return kept;
}

LossGrad supcon_loss(const Mat& z, const Mat& w, double tau) {
  const Eigen::Index B = z.rows();
  if (B < 2) throw UsageError("supcon_loss: batch size must be at least 2");
  if (w.rows() != B || w.cols() != B) throw UsageError("supcon_loss: weights must be B x B");
  if (!(tau > 0.0)) throw UsageError("supcon_loss: tau must be positive");

  const Mat s = (z * z.transpose()) / tau;
  Mat g_s = Mat::Zero(B, B);
  double loss = 0.0;
  long active = 0;
  for (Eigen::Index i = 0; i < B; ++i) {
    double row_weight = 0.0;
    for (Eigen::Index j = 0; j < B; ++j)
      if (j != i) row_weight += w(i, j);
    if (row_weight == 0.0) continue;
    ++active;

    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index k = 0; k < B; ++k)
      if (k != i) mx = std::max(mx, s(i, k));
    double denom = 0.0;
    for (Eigen::Index k = 0; k < B; ++k)
      if (k != i) denom += std::exp(s(i, k) - mx);
    const double lse = mx + std::log(denom);

    for (Eigen::Index j = 0; j < B; ++j) {
      if (j == i) continue;
      loss -= w(i, j) * (s(i, j) - lse);
      g_s(i, j) = -w(i, j) + row_weight * std::exp(s(i, j) - lse);
    }
  }
  if (active == 0) return {0.0, Mat::Zero(z.rows(), z.cols())};
  const double scale = 1.0 / static_cast<double>(active);
  const Mat g_z = (g_s + g_s.transpose()) * z * (scale / tau);
  return {loss * scale, g_z};
}

LossGrad supcon_loss(const Mat& projections, std::span<const features::FeatureVector> feats,
                     const LossConfig& cfg) {
  if (static_cast<Eigen::Index>(feats.size()) != projections.rows())
    throw UsageError("supcon_loss: one feature vector per projection required");
  for (const auto& f : feats)
    if (f.inventory_fingerprint != feats[0].inventory_fingerprint)
      throw UsageError("supcon_loss: feature vectors come from different inventories");
  return supcon_loss(projections, supcon_weights(feats, cfg.topk_positives), cfg.tau);
}

LossGrad feature_bce_loss(const Mat& logits, const Mat& targets) {
  if (logits.rows() != targets.rows() || logits.cols() != targets.cols())
    throw UsageError("feature_bce_loss: logits and targets differ in shape");
  if (logits.size() == 0) throw UsageError("feature_bce_loss: empty input");
  const double n = static_cast<double>(logits.size());
  double loss = 0.0;
  Mat g(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i)
    for (Eigen::Index f = 0; f < logits.cols(); ++f) {
      const double x = logits(i, f);
      const double t = targets(i, f);
      loss += softplus(x) - t * x;
      g(i, f) = (sigmoid(x) - t) / n;
    }
  return {loss / n, g};
}

VarCovLoss variance_decorrelation_loss(const Mat& e) {
  const Eigen::Index B = e.rows();
  const Eigen::Index d = e.cols();
  if (B < 2) throw UsageError("variance_decorrelation_loss: batch size must be at least 2");
  const double denom = static_cast<double>(B - 1);
  const Mat x = e.rowwise() - e.colwise().mean();
  const Mat c = x.transpose() * x / denom;

  VarCovLoss out;
  out.grad_var = Mat::Zero(B, d);
  for (Eigen::Index p = 0; p < d; ++p) {
    const double sd = std::sqrt(std::max(c(p, p), 0.0));
    if (sd >= 1.0) continue;
    out.var += 1.0 - sd;
    if (sd > 0.0) out.grad_var.col(p) = -x.col(p) / (denom * sd * static_cast<double>(d));
  }
  out.var /= static_cast<double>(d);

  Mat off = c;
  off.diagonal().setZero();
  out.cov = off.squaredNorm() / static_cast<double>(d);
  // dcov/dC = 2 off / d; C = x^T x / (B - 1); column means of x are zero,
  // so the centering step adds nothing to this gradient.
  out.grad_cov = x * off * (4.0 / (static_cast<double>(d) * denom));
  return out;
}

StageWeights stage_weights(const LossConfig& cfg, Stage stage) {
  StageWeights w;
  w.var = cfg.var_weight;
  w.cov = cfg.cov_weight;
  if (stage == Stage::pretrain) {
    w.mrl = 1.0;
  } else {
    w.mrl = 1.0 - cfg.alpha;
    w.supcon = cfg.alpha;
    w.bce = cfg.alpha * cfg.bce_weight;
  }
  return w;
}

LossBreakdown combined_objective(const LossParts& parts, const LossConfig& cfg, Stage stage) {
  if (!parts.mrl) throw UsageError("combined_objective: the mrl part is required");
  if (stage == Stage::pretrain && (parts.supcon || parts.bce))
    throw UsageError("combined_objective: the pretrain stage takes no supcon or bce part");
  if (stage == Stage::feature && (!parts.supcon || !parts.bce))
    throw UsageError("combined_objective: the feature stage needs supcon and bce parts");

  const StageWeights w = stage_weights(cfg, stage);
  LossBreakdown b;
  b.mrl = *parts.mrl;
  b.supcon = parts.supcon.value_or(0.0);
  b.bce = parts.bce.value_or(0.0);
  b.var = parts.var.value_or(0.0);
  b.cov = parts.cov.value_or(0.0);
  b.total = w.mrl * b.mrl + w.supcon * b.supcon + w.bce * b.bce + w.var * b.var + w.cov * b.cov;
  return b;
}

// ---- tape adapters ----

ag::Var margin_ranking_loss(const ag::Var& embeddings, const ProximityMatrix& proximity, double lambda) {
  LossGrad l = margin_ranking_loss(embeddings.value(), proximity, lambda);
  return ag::attach_scalar(embeddings, l.value, std::move(l.grad));
}

ag::Var supcon_loss(const ag::Var& projections, const Mat& weights, double tau) {
  LossGrad l = supcon_loss(projections.value(), weights, tau);
  return ag::attach_scalar(projections, l.value, std::move(l.grad));
}

ag::Var feature_bce_loss(const ag::Var& logits, const Mat& targets) {
  LossGrad l = feature_bce_loss(logits.value(), targets);
  return ag::attach_scalar(logits, l.value, std::move(l.grad));
}

std::pair<ag::Var, ag::Var> variance_decorrelation_loss(const ag::Var& embeddings) {
  VarCovLoss l = variance_decorrelation_loss(embeddings.value());
  return {ag::attach_scalar(embeddings, l.var, std::move(l.grad_var)),
          ag::attach_scalar(embeddings, l.cov, std::move(l.grad_cov))};
}

// ---- heads ----

FeatureHead::FeatureHead(Eigen::Index dim, Eigen::Index n_features, Rng& rng)
    : hidden("feature_head.hidden", dim, 2 * dim, 1.0 / std::sqrt(static_cast<double>(dim)), rng),
      out("feature_head.out", 2 * dim, n_features, 1.0 / std::sqrt(static_cast<double>(2 * dim)), rng) {}

ag::Var FeatureHead::operator()(ag::Binder& bind, const ag::Var& x) {
  return out(bind, ag::relu(hidden(bind, x)));
}

Mat FeatureHead::apply(const Mat& x) const { return out.apply(hidden.apply(x).cwiseMax(0.0)); }

void FeatureHead::collect(std::vector<ag::Parameter*>& out_params) {
  hidden.collect(out_params);
  out.collect(out_params);
}

ProjectionHead::ProjectionHead(Eigen::Index dim, Eigen::Index projection_dim, Rng& rng)
    : hidden("projection_head.hidden", dim, dim, 1.0 / std::sqrt(static_cast<double>(dim)), rng),
      out("projection_head.out", dim, projection_dim, 1.0 / std::sqrt(static_cast<double>(dim)), rng) {}

ag::Var ProjectionHead::operator()(ag::Binder& bind, const ag::Var& x) {
  return ag::normalize_rows(out(bind, ag::relu(hidden(bind, x))));
}

void ProjectionHead::collect(std::vector<ag::Parameter*>& out_params) {
  hidden.collect(out_params);
  out.collect(out_params);
}

}  // namespace idiolex::objectives
