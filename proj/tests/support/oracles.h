#pragma once

// Brute-force reference computations and randomized gradient checks shared
// by the unit tests and the acceptance runner.

#include "support/testing.h"

#include "idiolex/align.h"
#include "idiolex/encoder.h"
#include "idiolex/features.h"
#include "idiolex/objectives.h"

#include <algorithm>
#include <cmath>
#include <vector>

namespace idiolex::testing {

inline double cosine(const RowVec& a, const RowVec& b) { return a.dot(b) / (a.norm() * b.norm()); }

/// Enumerates every (a, i, j) triple directly.
inline double brute_force_mrl(const Mat& e, const objectives::ProximityMatrix& r, double lambda) {
  double total = 0.0;
  const Eigen::Index n = e.rows();
  for (Eigen::Index a = 0; a < n; ++a)
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j) {
        if (i == a || j == a || i == j || r(a, i) <= r(a, j)) continue;
        const double term = -(r(a, i) - r(a, j)) * (cosine(e.row(a), e.row(i)) - cosine(e.row(a), e.row(j))) + lambda;
        total += std::max(0.0, term);
      }
  return total;
}

/// Random proximity matrix built from random comment/author/community labels.
inline objectives::ProximityMatrix random_proximity(Eigen::Index n, Rng& rng) {
  std::vector<int> community(static_cast<std::size_t>(n)), author(static_cast<std::size_t>(n)),
      comment(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    community[k] = static_cast<int>(uniform_index(rng, 3));
    author[k] = community[k] * 10 + static_cast<int>(uniform_index(rng, 2));
    comment[k] = author[k] * 10 + static_cast<int>(uniform_index(rng, 2));
  }
  objectives::ProximityMatrix r(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) {
      const auto a = static_cast<std::size_t>(i), b = static_cast<std::size_t>(j);
      r(i, j) = i == j                          ? -1
                : comment[a] == comment[b]     ? 3
                : author[a] == author[b]       ? 2
                : community[a] == community[b] ? 1
                                               : 0;
    }
  return r;
}

inline std::vector<features::FeatureVector> random_features(std::size_t n, std::size_t f, Rng& rng) {
  std::vector<features::FeatureVector> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::uint8_t> bits(f);
    for (auto& b : bits) b = uniform_real(rng) < 0.4 ? 1 : 0;
    out.push_back(bits_vector(bits));
  }
  return out;
}

/// Jaccard from explicit index sets.
inline double set_jaccard(const features::FeatureVector& u, const features::FeatureVector& v) {
  std::vector<std::size_t> a, b, inter, uni;
  for (std::size_t i = 0; i < u.bits.size(); ++i) {
    if (u.bits[i]) a.push_back(i);
    if (v.bits[i]) b.push_back(i);
  }
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(inter));
  std::set_union(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(uni));
  return uni.empty() ? 0.0 : static_cast<double>(inter.size()) / static_cast<double>(uni.size());
}

/// Term-by-term weighted log-softmax with self excluded, top-k by repeated
/// selection of the largest remaining weight (lowest index on ties).
inline double brute_force_supcon(const Mat& z, const std::vector<features::FeatureVector>& feats, long topk,
                                 double tau) {
  const auto n = static_cast<std::size_t>(z.rows());
  double total = 0.0;
  int active = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> w(n, 0.0);
    std::vector<bool> used(n, false);
    used[i] = true;
    for (long pick = 0; pick < topk; ++pick) {
      std::size_t best = n;
      for (std::size_t j = 0; j < n; ++j)
        if (!used[j] && (best == n || set_jaccard(feats[i], feats[j]) > set_jaccard(feats[i], feats[best]))) best = j;
      if (best == n) break;
      used[best] = true;
      w[best] = set_jaccard(feats[i], feats[best]);
    }
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i || w[j] == 0.0) continue;
      any = true;
      double denom = 0.0;
      for (std::size_t k = 0; k < n; ++k)
        if (k != i)
          denom += std::exp(z.row(static_cast<Eigen::Index>(i)).dot(z.row(static_cast<Eigen::Index>(k))) / tau);
      const double num = std::exp(z.row(static_cast<Eigen::Index>(i)).dot(z.row(static_cast<Eigen::Index>(j))) / tau);
      total -= w[j] * std::log(num / denom);
    }
    if (any) ++active;
  }
  return active == 0 ? 0.0 : total / active;
}

// ---- randomized gradient checks: each returns the worst relative error ----

inline double mrl_gradient_check(int instances, Rng& rng) {
  double worst = 0.0;
  for (int done = 0; done < instances;) {
    const auto b = 3 + static_cast<Eigen::Index>(uniform_index(rng, 14));  // 3..16
    const auto d = 2 + static_cast<Eigen::Index>(uniform_index(rng, 7));   // 2..8
    const Mat e = random_unit_rows(b, d, rng);
    const auto r = random_proximity(b, rng);
    const double lambda = 0.5 * uniform_real(rng);
    // Skip instances with a hinge argument near its kink.
    bool near_kink = false;
    const Mat s = e * e.transpose();
    for (Eigen::Index a = 0; a < b && !near_kink; ++a)
      for (Eigen::Index i = 0; i < b && !near_kink; ++i)
        for (Eigen::Index j = 0; j < b; ++j) {
          if (i == a || j == a || i == j || r(a, i) <= r(a, j)) continue;
          if (std::abs(-(r(a, i) - r(a, j)) * (s(a, i) - s(a, j)) + lambda) < 1e-3) {
            near_kink = true;
            break;
          }
        }
    if (near_kink) continue;
    const Mat analytic = objectives::margin_ranking_loss(e, r, lambda).grad;
    const Mat numeric = numeric_gradient([&](const Mat& x) { return objectives::margin_ranking_loss(x, r, lambda).value; }, e);
    worst = std::max(worst, relative_error(analytic, numeric));
    ++done;
  }
  return worst;
}

inline double supcon_gradient_check(int instances, Rng& rng) {
  double worst = 0.0;
  for (int n = 0; n < instances; ++n) {
    const auto b = 2 + static_cast<Eigen::Index>(uniform_index(rng, 15));
    const auto d = 2 + static_cast<Eigen::Index>(uniform_index(rng, 7));
    const Mat z = random_unit_rows(b, d, rng);
    const auto feats = random_features(static_cast<std::size_t>(b), 6, rng);
    const Mat w = objectives::supcon_weights(feats, 1 + static_cast<long>(uniform_index(rng, 6)));
    const double tau = 0.07 + 0.5 * uniform_real(rng);
    const Mat analytic = objectives::supcon_loss(z, w, tau).grad;
    const Mat numeric = numeric_gradient([&](const Mat& x) { return objectives::supcon_loss(x, w, tau).value; }, z);
    worst = std::max(worst, relative_error(analytic, numeric));
  }
  return worst;
}

inline double bce_gradient_check(int instances, Rng& rng) {
  double worst = 0.0;
  for (int n = 0; n < instances; ++n) {
    const auto b = 1 + static_cast<Eigen::Index>(uniform_index(rng, 16));
    const auto f = 1 + static_cast<Eigen::Index>(uniform_index(rng, 8));
    const Mat logits = random_normal(b, f, 2.0, rng);
    Mat targets(b, f);
    for (Eigen::Index i = 0; i < targets.size(); ++i) targets(i) = uniform_real(rng) < 0.5 ? 1.0 : 0.0;
    const Mat analytic = objectives::feature_bce_loss(logits, targets).grad;
    const Mat numeric = numeric_gradient([&](const Mat& x) { return objectives::feature_bce_loss(x, targets).value; }, logits);
    worst = std::max(worst, relative_error(analytic, numeric));
  }
  return worst;
}

/// Checks the var and cov gradients separately.
inline double varcov_gradient_check(int instances, Rng& rng) {
  double worst = 0.0;
  for (int done = 0; done < instances;) {
    const auto b = 2 + static_cast<Eigen::Index>(uniform_index(rng, 15));
    const auto d = 2 + static_cast<Eigen::Index>(uniform_index(rng, 7));
    const Mat e = random_normal(b, d, 0.3 + 1.2 * uniform_real(rng), rng);
    const Mat x = e.rowwise() - e.colwise().mean();
    const RowVec sd = (x.colwise().squaredNorm() / static_cast<double>(b - 1)).cwiseSqrt();
    if (((sd.array() - 1.0).abs() < 1e-3).any() || (sd.array() < 1e-3).any()) continue;
    const auto out = objectives::variance_decorrelation_loss(e);
    const Mat num_var = numeric_gradient([](const Mat& m) { return objectives::variance_decorrelation_loss(m).var; }, e);
    const Mat num_cov = numeric_gradient([](const Mat& m) { return objectives::variance_decorrelation_loss(m).cov; }, e);
    worst = std::max({worst, relative_error(out.grad_var, num_var), relative_error(out.grad_cov, num_cov)});
    ++done;
  }
  return worst;
}

/// Gradient of the pooled output w.r.t. the layer logits and the states.
inline double pooling_gradient_check(int instances, Rng& rng) {
  double worst = 0.0;
  for (int n = 0; n < instances; ++n) {
    const auto layers = 1 + static_cast<Eigen::Index>(uniform_index(rng, 4));
    const auto t = 1 + static_cast<Eigen::Index>(uniform_index(rng, 4));
    const auto d = 2 + static_cast<Eigen::Index>(uniform_index(rng, 7));
    std::vector<Mat> states;
    for (Eigen::Index l = 0; l < layers; ++l) states.push_back(random_normal(t, d, 1.0, rng));
    std::vector<char> mask_bytes(static_cast<std::size_t>(t));
    for (auto& m : mask_bytes) m = uniform_real(rng) < 0.7;
    mask_bytes[uniform_index(rng, mask_bytes.size())] = 1;
    const std::span<const bool> mask(reinterpret_cast<const bool*>(mask_bytes.data()), mask_bytes.size());
    const RowVec w = random_normal(1, layers, 1.0, rng);
    const RowVec g = random_normal(1, d, 1.0, rng);
    const auto pg = encoder::layer_attention_pool_backward(states, mask, w, g);
    const Mat num_w = numeric_gradient(
        [&](const Mat& x) { return encoder::layer_attention_pool(states, mask, RowVec(x)).dot(g); }, w);
    worst = std::max(worst, relative_error(pg.logits, num_w));
    for (Eigen::Index l = 0; l < layers; ++l) {
      const Mat num_h = numeric_gradient(
          [&](const Mat& x) {
            std::vector<Mat> s = states;
            s[static_cast<std::size_t>(l)] = x;
            return encoder::layer_attention_pool(s, mask, w).dot(g);
          },
          states[static_cast<std::size_t>(l)]);
      worst = std::max(worst, relative_error(pg.states[static_cast<std::size_t>(l)], num_h));
    }
  }
  return worst;
}

/// Gradient of 1 - cos(g(h), e) w.r.t. h and every head parameter. ReLU
/// kinks are avoided by skipping instances with a hidden pre-activation near 0.
inline double alignment_gradient_check(int instances, Rng& rng) {
  double worst = 0.0;
  for (int done = 0; done < instances;) {
    const auto h_dim = 2 + static_cast<Eigen::Index>(uniform_index(rng, 7));
    const auto d = 2 + static_cast<Eigen::Index>(uniform_index(rng, 7));
    align::ProjectionHead head(h_dim, d, rng);
    const RowVec h = random_normal(1, h_dim, 1.0, rng);
    const RowVec e = random_unit_rows(1, d, rng);
    const RowVec pre = h * head.hidden.weight.value + head.hidden.bias.value;
    if ((pre.array().abs() < 1e-3).any() || (pre.array() <= 0.0).all()) continue;

    const auto g = align::alignment_loss_grad(h, e, head);
    worst = std::max(worst, relative_error(g.h_bar, numeric_gradient(
                                                        [&](const Mat& x) { return align::alignment_loss(RowVec(x), e, head); }, h)));
    auto check_param = [&](ag::Parameter& p, const Mat& analytic) {
      const Mat saved = p.value;
      const Mat numeric = numeric_gradient(
          [&](const Mat& x) {
            p.value = x;
            return align::alignment_loss(h, e, head);
          },
          saved);
      p.value = saved;
      worst = std::max(worst, relative_error(analytic, numeric));
    };
    check_param(head.hidden.weight, g.hidden_w);
    check_param(head.hidden.bias, g.hidden_b);
    check_param(head.out.weight, g.out_w);
    check_param(head.out.bias, g.out_b);
    ++done;
  }
  return worst;
}

}  // namespace idiolex::testing
