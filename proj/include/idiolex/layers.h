#pragma once

// Small trainable building blocks shared by the reference encoder, the
// objective heads and the toy language model.

#include "idiolex/autograd.h"

#include <string>
#include <vector>

namespace idiolex::nn {

struct Linear {
  ag::Parameter weight;  // in x out
  ag::Parameter bias;    // 1 x out

  Linear() = default;
  Linear(const std::string& name, Eigen::Index in, Eigen::Index out, double init_std, Rng& rng);

  ag::Var operator()(ag::Binder& bind, const ag::Var& x);
  /// Plain-matrix forward, no tape.
  Mat apply(const Mat& x) const;
  void collect(std::vector<ag::Parameter*>& out);
};

struct LayerNorm {
  ag::Parameter gamma;
  ag::Parameter beta;

  LayerNorm() = default;
  LayerNorm(const std::string& name, Eigen::Index dim);

  ag::Var operator()(ag::Binder& bind, const ag::Var& x);
  void collect(std::vector<ag::Parameter*>& out);
};

/// Pre-norm single-head self-attention block followed by a ReLU feed-forward
/// layer, both residual.
struct TransformerBlock {
  LayerNorm ln_attn;
  Linear query, key, value, out;
  LayerNorm ln_ffn;
  Linear ffn_in, ffn_out;

  TransformerBlock() = default;
  TransformerBlock(const std::string& name, Eigen::Index dim, Eigen::Index ffn_dim, Rng& rng);

  ag::Var operator()(ag::Binder& bind, const ag::Var& h, bool causal);
  void collect(std::vector<ag::Parameter*>& out);
};

}  // namespace idiolex::nn
