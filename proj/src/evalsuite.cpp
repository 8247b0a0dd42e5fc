#include "idiolex/evalsuite.h"

#include "idiolex/log.h"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <sstream>

namespace idiolex::eval {

std::string EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["task"] = task;
  j["metrics"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : metrics) j["metrics"][k] = v;
  j["config_fingerprint"] = config_fingerprint;
  j["seed"] = seed;
  if (!predictions.empty()) j["predictions"] = predictions;
  return j.dump();
}

// ---------------------------------------------------------------------------
// Similarity

double cosine_similarity(const RowVec& a, const RowVec& b) {
  if (a.size() != b.size()) throw UsageError("cosine_similarity: dimension mismatch");
  if (!a.allFinite() || !b.allFinite()) throw NumericError("cosine_similarity: non-finite input");
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) {
    logger()->warn("cosine_similarity: zero vector, similarity defined as 0");
    return 0.0;
  }
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw UsageError("pearson: inputs differ in length");
  if (x.size() < 3) throw UsageError("pearson: need at least 3 points");
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw NumericError("pearson: correlation undefined for zero variance");
  return sxy / std::sqrt(sxx * syy);
}

CorrelationReport correlation_report(std::span<const CorrelationPair> pairs) {
  std::vector<double> style, semantic;
  std::ostringstream tsv;
  tsv.precision(17);
  tsv << "pair_id\tstyle_sim\tsemantic_sim\tproximity\n";
  for (const auto& p : pairs) {
    style.push_back(p.style_sim);
    semantic.push_back(p.semantic_sim);
    tsv << p.pair_id << '\t' << p.style_sim << '\t' << p.semantic_sim << '\t' << p.proximity << '\n';
  }
  return {pearson(style, semantic), tsv.str()};
}

// ---------------------------------------------------------------------------
// Metrics

std::vector<std::string> label_set(std::span<const std::string> labels) {
  std::set<std::string> s(labels.begin(), labels.end());
  return {s.begin(), s.end()};
}

double macro_f1(std::span<const std::string> gold, std::span<const std::string> predicted) {
  std::vector<LabelSet> g, p;
  for (const auto& x : gold) g.push_back({x});
  for (const auto& x : predicted) p.push_back({x});
  return macro_f1_multi(g, p);
}

double accuracy(std::span<const std::string> gold, std::span<const std::string> predicted) {
  if (gold.size() != predicted.size()) throw UsageError("accuracy: length mismatch");
  if (gold.empty()) throw UsageError("accuracy: no items");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) hit += gold[i] == predicted[i];
  return static_cast<double>(hit) / static_cast<double>(gold.size());
}

double macro_f1_multi(std::span<const LabelSet> gold, std::span<const LabelSet> predicted) {
  if (gold.size() != predicted.size()) throw UsageError("macro_f1: length mismatch");
  if (gold.empty()) throw UsageError("macro_f1: no items");
  struct Counts {
    double tp = 0, fp = 0, fn = 0;
  };
  std::map<std::string, Counts> per;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    const std::set<std::string> g(gold[i].begin(), gold[i].end());
    const std::set<std::string> p(predicted[i].begin(), predicted[i].end());
    for (const auto& l : p) (g.count(l) ? per[l].tp : per[l].fp) += 1;
    for (const auto& l : g)
      if (!p.count(l)) per[l].fn += 1;
  }
  if (per.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& [label, c] : per) sum += 2 * c.tp / (2 * c.tp + c.fp + c.fn);
  return sum / static_cast<double>(per.size());
}

double exact_match(std::span<const LabelSet> gold, std::span<const LabelSet> predicted) {
  if (gold.size() != predicted.size()) throw UsageError("exact_match: length mismatch");
  if (gold.empty()) throw UsageError("exact_match: no items");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    const std::set<std::string> g(gold[i].begin(), gold[i].end());
    const std::set<std::string> p(predicted[i].begin(), predicted[i].end());
    hit += g == p;
  }
  return static_cast<double>(hit) / static_cast<double>(gold.size());
}

namespace {

void add_label_metrics(EvalReport& r, std::span<const std::string> gold, std::span<const std::string> predicted) {
  r.metrics["accuracy"] = accuracy(gold, predicted);
  r.metrics["macro_f1"] = macro_f1(gold, predicted);
}

}  // namespace

// ---------------------------------------------------------------------------
// Centroids and clustering

Classification centroid_classify(const Mat& train, std::span<const std::string> train_labels, const Mat& test,
                                 std::span<const std::string> test_labels) {
  if (train.rows() == 0) throw UsageError("centroid_classify: no training embeddings");
  if (static_cast<Eigen::Index>(train_labels.size()) != train.rows())
    throw UsageError("centroid_classify: one label per training row required");
  if (test.cols() != train.cols()) throw UsageError("centroid_classify: dimension mismatch");
  if (!test_labels.empty() && static_cast<Eigen::Index>(test_labels.size()) != test.rows())
    throw UsageError("centroid_classify: one label per test row required");

  const std::vector<std::string> classes = label_set(train_labels);
  Mat centroids = Mat::Zero(static_cast<Eigen::Index>(classes.size()), train.cols());
  std::vector<double> counts(classes.size(), 0.0);
  for (Eigen::Index i = 0; i < train.rows(); ++i) {
    const auto c = static_cast<std::size_t>(
        std::lower_bound(classes.begin(), classes.end(), train_labels[static_cast<std::size_t>(i)]) - classes.begin());
    centroids.row(static_cast<Eigen::Index>(c)) += train.row(i);
    counts[c] += 1.0;
  }
  for (std::size_t c = 0; c < classes.size(); ++c) centroids.row(static_cast<Eigen::Index>(c)) /= counts[c];

  Classification out;
  out.report.task = "centroid";
  for (Eigen::Index i = 0; i < test.rows(); ++i)
    out.predicted.push_back(classes[nearest_centroid(centroids, test.row(i))]);
  if (!test_labels.empty()) add_label_metrics(out.report, test_labels, out.predicted);
  out.report.predictions = out.predicted;
  return out;
}

std::size_t nearest_centroid(const Mat& centroids, const RowVec& x) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index c = 0; c < centroids.rows(); ++c) {
    const double d = (centroids.row(c) - x).squaredNorm();
    if (d < best_d) {  // strict: ties keep the lower index
      best_d = d;
      best = static_cast<std::size_t>(c);
    }
  }
  return best;
}

KMeansResult kmeans(const Mat& points, std::size_t k, std::uint64_t seed, int max_iter, double tol) {
  const auto n = static_cast<std::size_t>(points.rows());
  if (k < 1) throw UsageError("kmeans: k must be at least 1");
  if (k > n) throw UsageError("kmeans: k = " + std::to_string(k) + " exceeds " + std::to_string(n) + " points");

  Rng rng(seed);
  KMeansResult r;
  r.centroids.resize(static_cast<Eigen::Index>(k), points.cols());
  r.centroids.row(0) = points.row(static_cast<Eigen::Index>(uniform_index(rng, n)));
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], (points.row(static_cast<Eigen::Index>(i)) - r.centroids.row(static_cast<Eigen::Index>(c - 1))).squaredNorm());
      total += d2[i];
    }
    std::size_t pick = 0;
    if (total > 0.0) {
      double u = uniform_real(rng) * total;
      for (pick = 0; pick + 1 < n; ++pick) {
        u -= d2[pick];
        if (u < 0.0) break;
      }
    } else {
      pick = uniform_index(rng, n);
    }
    r.centroids.row(static_cast<Eigen::Index>(c)) = points.row(static_cast<Eigen::Index>(pick));
  }

  r.assignment.assign(n, 0);
  for (r.iterations = 1; r.iterations <= max_iter; ++r.iterations) {
    for (std::size_t i = 0; i < n; ++i) r.assignment[i] = nearest_centroid(r.centroids, points.row(static_cast<Eigen::Index>(i)));
    Mat next = Mat::Zero(r.centroids.rows(), r.centroids.cols());
    std::vector<double> counts(k, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      next.row(static_cast<Eigen::Index>(r.assignment[i])) += points.row(static_cast<Eigen::Index>(i));
      counts[r.assignment[i]] += 1.0;
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] > 0) next.row(static_cast<Eigen::Index>(c)) /= counts[c];
      else next.row(static_cast<Eigen::Index>(c)) = r.centroids.row(static_cast<Eigen::Index>(c));
    }
    const double shift = (next - r.centroids).norm();
    r.centroids = std::move(next);
    if (shift < tol) break;
  }
  r.iterations = std::min(r.iterations, max_iter);
  for (std::size_t i = 0; i < n; ++i) r.assignment[i] = nearest_centroid(r.centroids, points.row(static_cast<Eigen::Index>(i)));
  return r;
}

EvalReport kmeans_cluster_eval(const Mat& train, const Mat& test, std::span<const std::string> test_labels,
                               std::size_t k, std::uint64_t seed) {
  if (train.rows() == 0) throw UsageError("kmeans_cluster_eval: no training embeddings");
  if (static_cast<Eigen::Index>(test_labels.size()) != test.rows())
    throw UsageError("kmeans_cluster_eval: one label per test row required");
  if (k == 0) k = label_set(test_labels).size();
  const KMeansResult km = kmeans(train, k, seed);

  std::vector<std::size_t> cluster(test_labels.size());
  std::vector<std::map<std::string, std::size_t>> votes(k);
  for (std::size_t i = 0; i < test_labels.size(); ++i) {
    cluster[i] = nearest_centroid(km.centroids, test.row(static_cast<Eigen::Index>(i)));
    ++votes[cluster[i]][test_labels[i]];
  }
  std::vector<std::string> mapped(k);
  for (std::size_t c = 0; c < k; ++c) {
    std::size_t best = 0;
    for (const auto& [label, n] : votes[c])  // map order: ties keep the smaller label
      if (n > best) {
        best = n;
        mapped[c] = label;
      }
  }

  EvalReport r;
  r.task = "cluster";
  r.seed = seed;
  for (std::size_t i = 0; i < test_labels.size(); ++i) r.predictions.push_back(mapped[cluster[i]]);
  add_label_metrics(r, test_labels, r.predictions);
  r.metrics["k"] = static_cast<double>(k);
  return r;
}

// ---------------------------------------------------------------------------
// Retrieval

namespace {

/// `count` distinct entries of `pool`, uniformly, by partial Fisher-Yates.
std::vector<std::size_t> sample_without_replacement(std::vector<std::size_t> pool, std::size_t count, Rng& rng) {
  for (std::size_t i = 0; i < count; ++i) std::swap(pool[i], pool[i + uniform_index(rng, pool.size() - i)]);
  pool.resize(count);
  return pool;
}

}  // namespace

double retrieval_accuracy(const Mat& embeddings, std::span<const std::string> labels, std::size_t trials,
                          std::uint64_t seed) {
  constexpr std::size_t kPerSide = 3;
  if (static_cast<Eigen::Index>(labels.size()) != embeddings.rows())
    throw UsageError("retrieval_accuracy: one label per embedding required");
  if (trials == 0) throw UsageError("retrieval_accuracy: trials must be positive");

  std::map<std::string, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < labels.size(); ++i) members[labels[i]].push_back(i);
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const std::size_t same = members[labels[i]].size();
    if (same >= kPerSide + 1 && labels.size() - same >= kPerSide) eligible.push_back(i);
  }
  if (eligible.empty()) throw DataError("retrieval_accuracy: no anchor has 3 same-label and 3 other-label candidates");

  Rng rng(seed);
  std::size_t successes = 0;
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t a = eligible[uniform_index(rng, eligible.size())];
    std::vector<std::size_t> same, other;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (i == a) continue;
      (labels[i] == labels[a] ? same : other).push_back(i);
    }
    const auto pos = sample_without_replacement(std::move(same), kPerSide, rng);
    const auto neg = sample_without_replacement(std::move(other), kPerSide, rng);
    const RowVec anchor = embeddings.row(static_cast<Eigen::Index>(a));
    double min_pos = std::numeric_limits<double>::infinity();
    double max_neg = -std::numeric_limits<double>::infinity();
    for (std::size_t p : pos) min_pos = std::min(min_pos, cosine_similarity(anchor, embeddings.row(static_cast<Eigen::Index>(p))));
    for (std::size_t q : neg) max_neg = std::max(max_neg, cosine_similarity(anchor, embeddings.row(static_cast<Eigen::Index>(q))));
    successes += min_pos > max_neg;
  }
  return static_cast<double>(successes) / static_cast<double>(trials);
}

// ---------------------------------------------------------------------------
// Open set and ensembling

std::optional<std::size_t> open_set_predict(const RowVec& p, double threshold) {
  if (p.size() == 0) throw UsageError("open_set_predict: empty probability vector");
  if (std::abs(p.sum() - 1.0) > 1e-6) throw UsageError("open_set_predict: probabilities do not sum to 1");
  Eigen::Index top = 0;
  for (Eigen::Index i = 1; i < p.size(); ++i)
    if (p(i) > p(top)) top = i;
  double second = 0.0;
  bool have_second = false;
  for (Eigen::Index i = 0; i < p.size(); ++i)
    if (i != top && (!have_second || p(i) > second)) {
      second = p(i);
      have_second = true;
    }
  if (have_second && p(top) - second < threshold) return std::nullopt;
  return static_cast<std::size_t>(top);
}

Mat ensemble_predict(const Mat& p_lex, const Mat& p_neural, double omega) {
  if (p_lex.rows() != p_neural.rows() || p_lex.cols() != p_neural.cols())
    throw UsageError("ensemble_predict: probability matrices differ in shape");
  if (!(omega >= 0.0 && omega <= 1.0)) throw UsageError("ensemble_predict: omega must lie in [0, 1]");
  if (omega == 0.0) return p_neural;
  if (omega == 1.0) return p_lex;
  return omega * p_lex + (1.0 - omega) * p_neural;
}

std::vector<std::string> open_set_labels(const Mat& probabilities, std::span<const std::string> classes,
                                         double threshold) {
  if (static_cast<Eigen::Index>(classes.size()) != probabilities.cols())
    throw UsageError("open_set_labels: one class name per column required");
  std::vector<std::string> out;
  for (Eigen::Index i = 0; i < probabilities.rows(); ++i) {
    const auto top = open_set_predict(probabilities.row(i), threshold);
    out.push_back(top ? classes[*top] : kUnknownLabel);
  }
  return out;
}

OpenSetTuning tune_open_set(const Mat& p_neural, const Mat* p_lex, std::span<const std::string> classes,
                            std::span<const std::string> gold) {
  constexpr int kGrid = 21;
  OpenSetTuning best;
  best.macro_f1 = -1.0;
  const int omega_points = p_lex ? kGrid : 1;
  for (int w = 0; w < omega_points; ++w) {
    const double omega = p_lex ? static_cast<double>(w) / (kGrid - 1) : 0.0;
    const Mat p = p_lex ? ensemble_predict(*p_lex, p_neural, omega) : p_neural;
    for (int t = 0; t < kGrid; ++t) {
      const double threshold = static_cast<double>(t) / (kGrid - 1);
      const double f1 = macro_f1(gold, open_set_labels(p, classes, threshold));
      if (f1 > best.macro_f1) best = {threshold, omega, f1};
    }
  }
  return best;
}

}  // namespace idiolex::eval
