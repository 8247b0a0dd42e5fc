#include "idiolex/layers.h"

#include <cmath>

namespace idiolex::nn {

Linear::Linear(const std::string& name, Eigen::Index in, Eigen::Index out, double init_std, Rng& rng)
    : weight(name + ".weight", random_normal(in, out, init_std, rng)),
      bias(name + ".bias", Mat::Zero(1, out)) {}

ag::Var Linear::operator()(ag::Binder& bind, const ag::Var& x) {
  return ag::add_row(ag::matmul(x, bind(weight)), bind(bias));
}

Mat Linear::apply(const Mat& x) const {
  Mat y = x * weight.value;
  y.rowwise() += bias.value.row(0);
  return y;
}

void Linear::collect(std::vector<ag::Parameter*>& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

LayerNorm::LayerNorm(const std::string& name, Eigen::Index dim)
    : gamma(name + ".gamma", Mat::Ones(1, dim)), beta(name + ".beta", Mat::Zero(1, dim)) {}

ag::Var LayerNorm::operator()(ag::Binder& bind, const ag::Var& x) {
  return ag::layer_norm_rows(x, bind(gamma), bind(beta));
}

void LayerNorm::collect(std::vector<ag::Parameter*>& out) {
  out.push_back(&gamma);
  out.push_back(&beta);
}

TransformerBlock::TransformerBlock(const std::string& name, Eigen::Index dim, Eigen::Index ffn_dim,
                                   Rng& rng)
    : ln_attn(name + ".ln_attn", dim),
      query(name + ".query", dim, dim, 1.0 / std::sqrt(static_cast<double>(dim)), rng),
      key(name + ".key", dim, dim, 1.0 / std::sqrt(static_cast<double>(dim)), rng),
      value(name + ".value", dim, dim, 1.0 / std::sqrt(static_cast<double>(dim)), rng),
      out(name + ".out", dim, dim, 0.5 / std::sqrt(static_cast<double>(dim)), rng),
      ln_ffn(name + ".ln_ffn", dim),
      ffn_in(name + ".ffn_in", dim, ffn_dim, 1.0 / std::sqrt(static_cast<double>(dim)), rng),
      ffn_out(name + ".ffn_out", ffn_dim, dim, 0.5 / std::sqrt(static_cast<double>(ffn_dim)), rng) {}

ag::Var TransformerBlock::operator()(ag::Binder& bind, const ag::Var& h, bool causal) {
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(h.cols()));
  ag::Var x = ln_attn(bind, h);
  ag::Var q = query(bind, x);
  ag::Var k = key(bind, x);
  ag::Var v = value(bind, x);
  ag::Var scores = ag::scale(ag::matmul(q, ag::transpose(k)), inv_sqrt_d);
  ag::Var attn = ag::matmul(ag::softmax_rows(scores, causal), v);
  ag::Var h1 = ag::add(h, out(bind, attn));
  ag::Var y = ffn_out(bind, ag::relu(ffn_in(bind, ln_ffn(bind, h1))));
  return ag::add(h1, y);
}

void TransformerBlock::collect(std::vector<ag::Parameter*>& out_params) {
  ln_attn.collect(out_params);
  query.collect(out_params);
  key.collect(out_params);
  value.collect(out_params);
  out.collect(out_params);
  ln_ffn.collect(out_params);
  ffn_in.collect(out_params);
  ffn_out.collect(out_params);
}

}  // namespace idiolex::nn
