#include "idiolex/evalsuite.h"

#include <ceres/gradient_problem.h>
#include <ceres/gradient_problem_solver.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

namespace idiolex::eval {

std::vector<std::string> char_ngrams(const std::string& text, int n_min, int n_max) {
  if (n_min < 1 || n_max < n_min) throw UsageError("char_ngrams: bad n-gram range");
  std::vector<std::size_t> starts;  // byte offset of each code point
  for (std::size_t i = 0; i < text.size(); ++i)
    if ((static_cast<unsigned char>(text[i]) & 0xC0) != 0x80) starts.push_back(i);
  starts.push_back(text.size());

  std::vector<std::string> out;
  const std::size_t chars = starts.size() - 1;
  for (int n = n_min; n <= n_max; ++n)
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= chars; ++i)
      out.emplace_back(text.substr(starts[i], starts[i + static_cast<std::size_t>(n)] - starts[i]));
  return out;
}

LexicalClassifier::SparseRow LexicalClassifier::features(const std::string& text) const {
  std::map<int, double> tf;
  for (const auto& g : char_ngrams(text, cfg_.ngram_min, cfg_.ngram_max)) {
    auto it = ngram_index_.find(g);
    if (it != ngram_index_.end()) tf[it->second] += 1.0;
  }
  SparseRow row;
  double norm = 0.0;
  for (const auto& [j, count] : tf) {
    const double v = count * idf_[static_cast<std::size_t>(j)];
    row.emplace_back(j, v);
    norm += v * v;
  }
  norm = std::sqrt(norm);
  if (norm > 0.0)
    for (auto& e : row) e.second /= norm;
  return row;
}

namespace {

/// Mean softmax cross-entropy plus ||W||^2 / (2 C n); parameters are W
/// (row-major, features x classes) followed by the class biases.
class SoftmaxObjective : public ceres::FirstOrderFunction {
 public:
  SoftmaxObjective(const std::vector<LexicalClassifier::SparseRow>& rows, const std::vector<int>& y,
                   int n_features, int n_classes, double c)
      : rows_(rows), y_(y), f_(n_features), k_(n_classes), c_(c) {}

  int NumParameters() const override { return f_ * k_ + k_; }

  bool Evaluate(const double* w, double* cost, double* gradient) const override {
    const double n = static_cast<double>(rows_.size());
    const double* b = w + static_cast<std::ptrdiff_t>(f_) * k_;
    double loss = 0.0;
    if (gradient) std::fill(gradient, gradient + NumParameters(), 0.0);
    std::vector<double> z(static_cast<std::size_t>(k_));
    for (std::size_t i = 0; i < rows_.size(); ++i) {
      for (int c = 0; c < k_; ++c) z[c] = b[c];
      for (const auto& [j, v] : rows_[i])
        for (int c = 0; c < k_; ++c) z[c] += v * w[j * k_ + c];
      const double mx = *std::max_element(z.begin(), z.end());
      double sum = 0.0;
      for (int c = 0; c < k_; ++c) sum += std::exp(z[c] - mx);
      const double lse = mx + std::log(sum);
      loss += lse - z[static_cast<std::size_t>(y_[i])];
      if (!gradient) continue;
      for (int c = 0; c < k_; ++c) {
        const double d = (std::exp(z[c] - lse) - (c == y_[i] ? 1.0 : 0.0)) / n;
        gradient[f_ * k_ + c] += d;
        for (const auto& [j, v] : rows_[i]) gradient[j * k_ + c] += d * v;
      }
    }
    double reg = 0.0;
    const double lambda = 1.0 / (c_ * n);
    for (int p = 0; p < f_ * k_; ++p) {
      reg += w[p] * w[p];
      if (gradient) gradient[p] += lambda * w[p];
    }
    *cost = loss / n + 0.5 * lambda * reg;
    return std::isfinite(*cost);
  }

 private:
  const std::vector<LexicalClassifier::SparseRow>& rows_;
  const std::vector<int>& y_;
  int f_;
  int k_;
  double c_;
};

}  // namespace

void LexicalClassifier::fit(std::span<const std::string> texts, std::span<const std::string> labels) {
  if (texts.size() != labels.size()) throw UsageError("lexical classifier: one label per text required");
  classes_ = label_set(labels);
  if (classes_.size() < 2) throw UsageError("lexical classifier: training data needs at least 2 classes");
  if (!(cfg_.c > 0.0)) throw UsageError("lexical classifier: c must be positive");

  ngram_index_.clear();
  std::map<std::string, double> df;
  for (const auto& t : texts) {
    const auto grams = char_ngrams(t, cfg_.ngram_min, cfg_.ngram_max);
    const std::set<std::string> distinct(grams.begin(), grams.end());
    for (const auto& g : distinct) df[g] += 1.0;
  }
  const double n_docs = static_cast<double>(texts.size());
  idf_.clear();
  for (const auto& [g, d] : df) {
    ngram_index_.emplace(g, static_cast<int>(idf_.size()));
    idf_.push_back(std::log((1.0 + n_docs) / (1.0 + d)) + 1.0);
  }

  std::vector<SparseRow> rows;
  std::vector<int> y;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    rows.push_back(features(texts[i]));
    y.push_back(static_cast<int>(std::lower_bound(classes_.begin(), classes_.end(), labels[i]) - classes_.begin()));
  }

  const int f = static_cast<int>(idf_.size());
  const int k = static_cast<int>(classes_.size());
  std::vector<double> params(static_cast<std::size_t>(f * k + k), 0.0);
  ceres::GradientProblem problem(new SoftmaxObjective(rows, y, f, k, cfg_.c));
  ceres::GradientProblemSolver::Options options;
  options.line_search_direction_type = ceres::LBFGS;
  options.max_num_iterations = cfg_.max_iterations;
  options.gradient_tolerance = cfg_.tolerance;
  options.function_tolerance = 1e-12;
  options.parameter_tolerance = 1e-12;
  options.logging_type = ceres::SILENT;
  ceres::GradientProblemSolver::Summary summary;
  ceres::Solve(options, problem, params.data(), &summary);
  if (summary.termination_type == ceres::FAILURE)
    throw NumericError("lexical classifier: optimizer failed: " + summary.message);
  loss_ = summary.final_cost;

  weights_.resize(f, k);
  for (int j = 0; j < f; ++j)
    for (int c = 0; c < k; ++c) weights_(j, c) = params[static_cast<std::size_t>(j * k + c)];
  bias_.resize(k);
  for (int c = 0; c < k; ++c) bias_(c) = params[static_cast<std::size_t>(f * k + c)];
}

Mat LexicalClassifier::predict_proba(std::span<const std::string> texts) const {
  if (classes_.empty()) throw UsageError("lexical classifier: predict before fit");
  Mat p(static_cast<Eigen::Index>(texts.size()), static_cast<Eigen::Index>(classes_.size()));
  for (std::size_t i = 0; i < texts.size(); ++i) {
    RowVec z = bias_;
    for (const auto& [j, v] : features(texts[i])) z += v * weights_.row(j);
    z = (z.array() - z.maxCoeff()).exp();
    p.row(static_cast<Eigen::Index>(i)) = z / z.sum();
  }
  return p;
}

Mat lexical_classifier(std::span<const std::string> train_texts, std::span<const std::string> train_labels,
                       std::span<const std::string> test_texts, const LexicalConfig& cfg) {
  LexicalClassifier clf(cfg);
  clf.fit(train_texts, train_labels);
  return clf.predict_proba(test_texts);
}

}  // namespace idiolex::eval
