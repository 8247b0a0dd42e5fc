#pragma once

// Minimal reverse-mode differentiation over dense double matrices.
//
// A Tape records every operation of one forward pass. Values are held by the
// tape; Var is a cheap handle into it. Calling backward() on a 1x1 Var walks
// the tape in reverse and accumulates gradients into the Parameters that were
// bound with Tape::param().

#include "idiolex/common.h"

#include <functional>
#include <utility>
#include <span>
#include <string>
#include <vector>

namespace idiolex::ag {

struct Parameter {
  std::string name;
  Mat value;
  Mat grad;

  Parameter() = default;
  Parameter(std::string n, Mat v);

  void zero_grad();
};

class Tape;

class Var {
 public:
  Var() = default;

  const Mat& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;

  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  // Receives the gradient of the root with respect to the op's output.
  using BackwardFn = std::function<void(const Mat& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Mat value);
  Var param(Parameter& p);

  /// Records an op. `inputs` decide whether the output needs a gradient.
  Var record(Mat value, std::span<const Var> inputs, BackwardFn backward);

  /// Adds `g` into the gradient slot of `v` if `v` takes part in backprop.
  void accumulate(const Var& v, const Mat& g);
  bool needs_grad(const Var& v) const;

  const Mat& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }

  /// Seeds d(root)/d(root) = 1 and propagates to every bound Parameter.
  void backward(const Var& root);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool needs_grad = false;
  };
  std::vector<Node> nodes_;
};

/// Binds each Parameter to a tape at most once, so one forward pass can use
/// the same weights many times without copying them again.
class Binder {
 public:
  /// With `trainable` false, parameters enter the tape as constants.
  explicit Binder(Tape& tape, bool trainable = true) : tape_(tape), trainable_(trainable) {}
  Var operator()(Parameter& p);
  Tape& tape() { return tape_; }

 private:
  Tape& tape_;
  bool trainable_;
  std::vector<std::pair<const Parameter*, Var>> bound_;
};

// ---- elementwise and linear algebra ----
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var hadamard(const Var& a, const Var& b);
Var scale(const Var& a, double s);
/// Broadcasts a 1 x n row over every row of `a`.
Var add_row(const Var& a, const Var& row);
Var relu(const Var& a);
Var tanh(const Var& a);

// ---- row-wise ops ----
/// Softmax over each row; with `causal`, entry (i, j) for j > i is masked out.
Var softmax_rows(const Var& a, bool causal = false);
Var layer_norm_rows(const Var& a, const Var& gamma, const Var& beta, double eps = 1e-5);
/// Divides each row by (its l2 norm + eps).
Var normalize_rows(const Var& a, double eps = 1e-12);

// ---- structural ops ----
Var gather_rows(const Var& table, std::span<const int> ids);
Var slice_rows(const Var& a, Eigen::Index begin, Eigen::Index count);
Var vstack(std::span<const Var> parts);
Var sum(const Var& a);
/// Mean over the rows whose mask entry is true; returns 1 x cols.
Var mean_rows_masked(const Var& a, std::span<const bool> mask);

/// Mean token cross-entropy over rows with weight > 0 (weights act as a mask).
Var cross_entropy_rows(const Var& logits, std::span<const int> targets,
                       std::span<const double> weights);

/// Attaches an externally computed scalar with a known gradient w.r.t. `input`.
Var attach_scalar(const Var& input, double value, Mat grad_wrt_input);

}  // namespace idiolex::ag
