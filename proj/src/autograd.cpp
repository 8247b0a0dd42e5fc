#include "idiolex/autograd.h"

#include <cmath>
#include <limits>

namespace idiolex::ag {

Parameter::Parameter(std::string n, Mat v) : name(std::move(n)), value(std::move(v)) {
  grad = Mat::Zero(value.rows(), value.cols());
}

void Parameter::zero_grad() { grad = Mat::Zero(value.rows(), value.cols()); }

const Mat& Var::value() const {
  if (!tape_) throw UsageError("Var::value on an unbound Var");
  return tape_->value(id_);
}

double Var::scalar() const {
  const Mat& v = value();
  if (v.rows() != 1 || v.cols() != 1) throw UsageError("Var::scalar on a non-scalar Var");
  return v(0, 0);
}

Var Tape::constant(Mat value) {
  nodes_.push_back(Node{std::move(value), Mat(), nullptr, nullptr, false});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::param(Parameter& p) {
  nodes_.push_back(Node{p.value, Mat(), nullptr, &p, true});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::record(Mat value, std::span<const Var> inputs, BackwardFn backward) {
  bool needs = false;
  for (const Var& in : inputs) {
    if (in.tape() != this) throw UsageError("Tape::record: input belongs to another tape");
    needs = needs || nodes_[static_cast<std::size_t>(in.id())].needs_grad;
  }
  nodes_.push_back(Node{std::move(value), Mat(), needs ? std::move(backward) : nullptr,
                        nullptr, needs});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

bool Tape::needs_grad(const Var& v) const {
  return nodes_[static_cast<std::size_t>(v.id())].needs_grad;
}

void Tape::accumulate(const Var& v, const Mat& g) {
  Node& n = nodes_[static_cast<std::size_t>(v.id())];
  if (!n.needs_grad) return;
  if (n.grad.size() == 0)
    n.grad = g;
  else
    n.grad += g;
}

void Tape::backward(const Var& root) {
  if (root.tape() != this) throw UsageError("Tape::backward: root belongs to another tape");
  Node& r = nodes_[static_cast<std::size_t>(root.id())];
  if (r.value.rows() != 1 || r.value.cols() != 1)
    throw UsageError("Tape::backward: root must be a scalar");
  if (!r.needs_grad) return;
  r.grad = Mat::Ones(1, 1);
  for (int i = root.id(); i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.grad.size() == 0) continue;
    if (n.param) {
      n.param->grad += n.grad;
    } else if (n.backward) {
      // The callback may touch other nodes' grads but never this one's.
      const Mat g = n.grad;
      n.backward(g);
    }
  }
}

Var Binder::operator()(Parameter& p) {
  for (const auto& [ptr, v] : bound_)
    if (ptr == &p) return v;
  Var v = trainable_ ? tape_.param(p) : tape_.constant(p.value);
  bound_.emplace_back(&p, v);
  return v;
}

namespace {

Tape& tape_of(const Var& a) {
  if (!a.tape()) throw UsageError("operation on an unbound Var");
  return *a.tape();
}

void require_same_shape(const Mat& a, const Mat& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw UsageError(std::string(op) + ": shape mismatch");
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  Tape& t = tape_of(a);
  if (a.cols() != b.rows()) throw UsageError("matmul: inner dimensions differ");
  Mat out = a.value() * b.value();
  const Var ins[] = {a, b};
  return t.record(std::move(out), ins, [&t, a, b](const Mat& g) {
    if (t.needs_grad(a)) t.accumulate(a, g * b.value().transpose());
    if (t.needs_grad(b)) t.accumulate(b, a.value().transpose() * g);
  });
}

Var transpose(const Var& a) {
  Tape& t = tape_of(a);
  const Var ins[] = {a};
  return t.record(a.value().transpose(), ins,
                  [&t, a](const Mat& g) { t.accumulate(a, g.transpose()); });
}

Var add(const Var& a, const Var& b) {
  Tape& t = tape_of(a);
  require_same_shape(a.value(), b.value(), "add");
  const Var ins[] = {a, b};
  return t.record(a.value() + b.value(), ins, [&t, a, b](const Mat& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var sub(const Var& a, const Var& b) {
  Tape& t = tape_of(a);
  require_same_shape(a.value(), b.value(), "sub");
  const Var ins[] = {a, b};
  return t.record(a.value() - b.value(), ins, [&t, a, b](const Mat& g) {
    t.accumulate(a, g);
    if (t.needs_grad(b)) t.accumulate(b, -g);
  });
}

Var hadamard(const Var& a, const Var& b) {
  Tape& t = tape_of(a);
  require_same_shape(a.value(), b.value(), "hadamard");
  const Var ins[] = {a, b};
  return t.record(a.value().cwiseProduct(b.value()), ins, [&t, a, b](const Mat& g) {
    if (t.needs_grad(a)) t.accumulate(a, g.cwiseProduct(b.value()));
    if (t.needs_grad(b)) t.accumulate(b, g.cwiseProduct(a.value()));
  });
}

Var scale(const Var& a, double s) {
  Tape& t = tape_of(a);
  const Var ins[] = {a};
  return t.record(a.value() * s, ins, [&t, a, s](const Mat& g) { t.accumulate(a, g * s); });
}

Var add_row(const Var& a, const Var& row) {
  Tape& t = tape_of(a);
  if (row.rows() != 1 || row.cols() != a.cols()) throw UsageError("add_row: bad row shape");
  Mat out = a.value().rowwise() + row.value().row(0);
  const Var ins[] = {a, row};
  return t.record(std::move(out), ins, [&t, a, row](const Mat& g) {
    t.accumulate(a, g);
    if (t.needs_grad(row)) t.accumulate(row, g.colwise().sum());
  });
}

Var relu(const Var& a) {
  Tape& t = tape_of(a);
  Mat out = a.value().cwiseMax(0.0);
  const Var ins[] = {a};
  return t.record(std::move(out), ins, [&t, a](const Mat& g) {
    Mat mask = (a.value().array() > 0.0).cast<double>().matrix();
    t.accumulate(a, g.cwiseProduct(mask));
  });
}

Var tanh(const Var& a) {
  Tape& t = tape_of(a);
  Mat out = a.value().array().tanh().matrix();
  Mat deriv = (1.0 - out.array().square()).matrix();
  const Var ins[] = {a};
  return t.record(std::move(out), ins, [&t, a, deriv](const Mat& g) {
    t.accumulate(a, g.cwiseProduct(deriv));
  });
}

Var softmax_rows(const Var& a, bool causal) {
  Tape& t = tape_of(a);
  const Mat& x = a.value();
  if (causal && x.rows() != x.cols()) throw UsageError("softmax_rows: causal mask needs a square input");
  Mat y = Mat::Zero(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Eigen::Index width = causal ? i + 1 : x.cols();
    const double m = x.row(i).head(width).maxCoeff();
    double z = 0.0;
    for (Eigen::Index j = 0; j < width; ++j) {
      y(i, j) = std::exp(x(i, j) - m);
      z += y(i, j);
    }
    y.row(i).head(width) /= z;
  }
  const Var ins[] = {a};
  Mat p = y;
  return t.record(std::move(y), ins, [&t, a, p](const Mat& g) {
    Mat gp = g.cwiseProduct(p);
    Vec dot = gp.rowwise().sum();
    Mat dx = gp - p.cwiseProduct(dot.replicate(1, p.cols()));
    t.accumulate(a, dx);
  });
}

Var layer_norm_rows(const Var& a, const Var& gamma, const Var& beta, double eps) {
  Tape& t = tape_of(a);
  const Mat& x = a.value();
  const Eigen::Index n = x.cols();
  if (gamma.cols() != n || beta.cols() != n) throw UsageError("layer_norm_rows: bad affine shape");
  Mat xhat(x.rows(), n);
  Vec inv_std(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double mean = x.row(i).mean();
    const double var = (x.row(i).array() - mean).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (x.row(i).array() - mean) * inv_std(i);
  }
  Mat y = (xhat.array().rowwise() * gamma.value().row(0).array()).matrix();
  y.rowwise() += beta.value().row(0);
  const Var ins[] = {a, gamma, beta};
  return t.record(std::move(y), ins, [&t, a, gamma, beta, xhat, inv_std](const Mat& g) {
    if (t.needs_grad(gamma))
      t.accumulate(gamma, g.cwiseProduct(xhat).colwise().sum());
    if (t.needs_grad(beta)) t.accumulate(beta, g.colwise().sum());
    if (t.needs_grad(a)) {
      Mat dxhat = (g.array().rowwise() * gamma.value().row(0).array()).matrix();
      Mat dx(dxhat.rows(), dxhat.cols());
      for (Eigen::Index i = 0; i < dxhat.rows(); ++i) {
        const double m1 = dxhat.row(i).mean();
        const double m2 = dxhat.row(i).cwiseProduct(xhat.row(i)).mean();
        dx.row(i) = inv_std(i) * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2);
      }
      t.accumulate(a, dx);
    }
  });
}

Var normalize_rows(const Var& a, double eps) {
  Tape& t = tape_of(a);
  const Mat& x = a.value();
  Vec norms = x.rowwise().norm();
  Mat y(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) y.row(i) = x.row(i) / (norms(i) + eps);
  const Var ins[] = {a};
  return t.record(std::move(y), ins, [&t, a, norms, eps](const Mat& g) {
    const Mat& x = a.value();
    Mat dx(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const double n = norms(i);
      const double c = n + eps;
      dx.row(i) = g.row(i) / c;
      if (n > 0.0) dx.row(i) -= x.row(i) * (x.row(i).dot(g.row(i)) / (n * c * c));
    }
    t.accumulate(a, dx);
  });
}

Var gather_rows(const Var& table, std::span<const int> ids) {
  Tape& t = tape_of(table);
  const Mat& w = table.value();
  Mat out(static_cast<Eigen::Index>(ids.size()), w.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= w.rows()) throw DataError("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = w.row(ids[i]);
  }
  std::vector<int> idx(ids.begin(), ids.end());
  const Var ins[] = {table};
  return t.record(std::move(out), ins, [&t, table, idx](const Mat& g) {
    Mat d = Mat::Zero(table.rows(), table.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) d.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
    t.accumulate(table, d);
  });
}

Var slice_rows(const Var& a, Eigen::Index begin, Eigen::Index count) {
  Tape& t = tape_of(a);
  if (begin < 0 || count < 0 || begin + count > a.rows()) throw UsageError("slice_rows: out of range");
  const Var ins[] = {a};
  return t.record(a.value().middleRows(begin, count), ins, [&t, a, begin, count](const Mat& g) {
    Mat d = Mat::Zero(a.rows(), a.cols());
    d.middleRows(begin, count) = g;
    t.accumulate(a, d);
  });
}

Var vstack(std::span<const Var> parts) {
  if (parts.empty()) throw UsageError("vstack: no inputs");
  Tape& t = tape_of(parts[0]);
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts[0].cols();
  for (const Var& p : parts) {
    if (p.cols() != cols) throw UsageError("vstack: column mismatch");
    rows += p.rows();
  }
  Mat out(rows, cols);
  Eigen::Index r = 0;
  for (const Var& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  std::vector<Var> kept(parts.begin(), parts.end());
  return t.record(std::move(out), parts, [&t, kept](const Mat& g) {
    Eigen::Index r = 0;
    for (const Var& p : kept) {
      t.accumulate(p, g.middleRows(r, p.rows()));
      r += p.rows();
    }
  });
}

Var sum(const Var& a) {
  Tape& t = tape_of(a);
  Mat out(1, 1);
  out(0, 0) = a.value().sum();
  const Var ins[] = {a};
  return t.record(std::move(out), ins, [&t, a](const Mat& g) {
    t.accumulate(a, Mat::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

Var mean_rows_masked(const Var& a, std::span<const bool> mask) {
  Tape& t = tape_of(a);
  if (static_cast<Eigen::Index>(mask.size()) != a.rows())
    throw UsageError("mean_rows_masked: mask length differs from row count");
  std::vector<bool> m(mask.begin(), mask.end());
  Eigen::Index n = 0;
  Mat out = Mat::Zero(1, a.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    if (!m[static_cast<std::size_t>(i)]) continue;
    out += a.value().row(i);
    ++n;
  }
  if (n == 0) throw DataError("mean_rows_masked: every row is masked");
  out /= static_cast<double>(n);
  const Var ins[] = {a};
  return t.record(std::move(out), ins, [&t, a, m, n](const Mat& g) {
    Mat d = Mat::Zero(a.rows(), a.cols());
    for (Eigen::Index i = 0; i < a.rows(); ++i)
      if (m[static_cast<std::size_t>(i)]) d.row(i) = g.row(0) / static_cast<double>(n);
    t.accumulate(a, d);
  });
}

Var cross_entropy_rows(const Var& logits, std::span<const int> targets,
                       std::span<const double> weights) {
  Tape& t = tape_of(logits);
  const Mat& z = logits.value();
  if (static_cast<Eigen::Index>(targets.size()) != z.rows() || weights.size() != targets.size())
    throw UsageError("cross_entropy_rows: target/weight length mismatch");
  double wsum = 0.0;
  double loss = 0.0;
  Mat probs(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const double m = z.row(i).maxCoeff();
    probs.row(i) = (z.row(i).array() - m).exp();
    const double s = probs.row(i).sum();
    probs.row(i) /= s;
    const double w = weights[static_cast<std::size_t>(i)];
    if (w <= 0.0) continue;
    const int y = targets[static_cast<std::size_t>(i)];
    if (y < 0 || y >= z.cols()) throw DataError("cross_entropy_rows: target out of range");
    loss += w * (m + std::log(s) - z(i, y));
    wsum += w;
  }
  if (wsum <= 0.0) throw DataError("cross_entropy_rows: no weighted rows");
  Mat out(1, 1);
  out(0, 0) = loss / wsum;
  std::vector<int> tg(targets.begin(), targets.end());
  std::vector<double> wt(weights.begin(), weights.end());
  const Var ins[] = {logits};
  return t.record(std::move(out), ins, [&t, logits, probs, tg, wt, wsum](const Mat& g) {
    Mat d = Mat::Zero(probs.rows(), probs.cols());
    for (Eigen::Index i = 0; i < probs.rows(); ++i) {
      const double w = wt[static_cast<std::size_t>(i)];
      if (w <= 0.0) continue;
      d.row(i) = probs.row(i) * (w / wsum);
      d(i, tg[static_cast<std::size_t>(i)]) -= w / wsum;
    }
    t.accumulate(logits, d * g(0, 0));
  });
}

Var attach_scalar(const Var& input, double value, Mat grad_wrt_input) {
  Tape& t = tape_of(input);
  require_same_shape(input.value(), grad_wrt_input, "attach_scalar");
  Mat out(1, 1);
  out(0, 0) = value;
  const Var ins[] = {input};
  return t.record(std::move(out), ins, [&t, input, grad = std::move(grad_wrt_input)](const Mat& g) {
    t.accumulate(input, grad * g(0, 0));
  });
}

}  // namespace idiolex::ag
