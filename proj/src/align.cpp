#include "idiolex/align.h"

#include "idiolex/optim.h"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace idiolex::align {

// ---------------------------------------------------------------------------
// Projection head and alignment loss

ProjectionHead::ProjectionHead(Eigen::Index lm_width, Eigen::Index style_dim, Rng& rng)
    : hidden("align_head.hidden", lm_width, lm_width, 1.0 / std::sqrt(static_cast<double>(lm_width)), rng),
      out("align_head.out", lm_width, style_dim, 1.0 / std::sqrt(static_cast<double>(lm_width)), rng) {}

RowVec ProjectionHead::apply(const RowVec& h_bar) const {
  const RowVec o = out.apply(hidden.apply(h_bar).cwiseMax(0.0)).row(0);
  const double n = o.norm();
  if (!o.allFinite() || n == 0.0) throw NumericError("alignment head produced a non-finite or zero output");
  return o / n;
}

void ProjectionHead::collect(std::vector<ag::Parameter*>& params) {
  hidden.collect(params);
  out.collect(params);
}

RowVec pooled_response_state(const Mat& hidden, std::span<const bool> response_mask) {
  if (static_cast<Eigen::Index>(response_mask.size()) != hidden.rows())
    throw UsageError("pooled_response_state: mask length differs from sequence length");
  RowVec acc = RowVec::Zero(hidden.cols());
  double n = 0.0;
  for (Eigen::Index t = 0; t < hidden.rows(); ++t)
    if (response_mask[static_cast<std::size_t>(t)]) {
      acc += hidden.row(t);
      n += 1.0;
    }
  if (n == 0.0) throw DataError("pooled_response_state: empty response mask");
  return acc / n;
}

ag::Var pooled_response_state(const ag::Var& hidden, std::span<const bool> response_mask) {
  if (std::none_of(response_mask.begin(), response_mask.end(), [](bool b) { return b; }))
    throw DataError("pooled_response_state: empty response mask");
  return ag::mean_rows_masked(hidden, response_mask);
}

AlignmentGradient alignment_loss_grad(const RowVec& h_bar, const RowVec& e, const ProjectionHead& head) {
  if (!h_bar.allFinite() || !e.allFinite()) throw NumericError("alignment_loss: non-finite input");
  const double e_norm = e.norm();
  if (e_norm == 0.0) throw NumericError("alignment_loss: zero target embedding");

  const RowVec a = head.hidden.apply(h_bar).row(0);
  const RowVec r = a.cwiseMax(0.0);
  const RowVec o = head.out.apply(r).row(0);
  const double n = o.norm();
  if (!o.allFinite() || n == 0.0) throw NumericError("alignment head produced a non-finite or zero output");
  const RowVec o_hat = o / n;
  const RowVec e_hat = e / e_norm;
  const double c = std::clamp(o_hat.dot(e_hat), -1.0, 1.0);

  AlignmentGradient g;
  g.loss = 1.0 - c;
  const RowVec d_o = -(e_hat - c * o_hat) / n;
  g.out_w = r.transpose() * d_o;
  g.out_b = d_o;
  const RowVec d_r = d_o * head.out.weight.value.transpose();
  const RowVec d_a = d_r.array() * (a.array() > 0.0).cast<double>();
  g.hidden_w = h_bar.transpose() * d_a;
  g.hidden_b = d_a;
  g.h_bar = d_a * head.hidden.weight.value.transpose();
  return g;
}

double alignment_loss(const RowVec& h_bar, const RowVec& e, const ProjectionHead& head) {
  const RowVec g = head.apply(h_bar);
  const double e_norm = e.norm();
  if (!e.allFinite() || e_norm == 0.0) throw NumericError("alignment_loss: bad target embedding");
  return 1.0 - std::clamp(g.dot(e) / e_norm, -1.0, 1.0);
}

ag::Var alignment_loss(ag::Binder& bind, const ag::Var& h_bar, const RowVec& e, ProjectionHead& head) {
  ag::Tape& tape = bind.tape();
  const ag::Var hw = bind(head.hidden.weight);
  const ag::Var hb = bind(head.hidden.bias);
  const ag::Var ow = bind(head.out.weight);
  const ag::Var ob = bind(head.out.bias);
  AlignmentGradient g = alignment_loss_grad(h_bar.value().row(0), e, head);
  Mat value(1, 1);
  value(0, 0) = g.loss;
  const ag::Var ins[] = {h_bar, hw, hb, ow, ob};
  return tape.record(std::move(value), ins, [&tape, h_bar, hw, hb, ow, ob, g = std::move(g)](const Mat& up) {
    const double s = up(0, 0);
    tape.accumulate(h_bar, Mat(g.h_bar * s));
    tape.accumulate(hw, g.hidden_w * s);
    tape.accumulate(hb, g.hidden_b * s);
    tape.accumulate(ow, g.out_w * s);
    tape.accumulate(ob, g.out_b * s);
  });
}

double combined_sft_loss(double ce, double align, double alpha) {
  if (alpha < 0.0) throw UsageError("combined_sft_loss: alpha must be nonnegative");
  return ce + alpha * align;
}

// ---------------------------------------------------------------------------
// Samples

std::string samples_to_jsonl(std::span<const AlignmentSample> samples) {
  std::string out;
  for (const auto& s : samples) {
    nlohmann::ordered_json j;
    j["id"] = s.id;
    j["prompt"] = s.prompt;
    j["response"] = s.response;
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::vector<AlignmentSample> parse_samples_jsonl(std::string_view text) {
  std::vector<AlignmentSample> out;
  std::size_t start = 0;
  std::size_t line_no = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    const std::string_view line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("id").get<std::string>(), j.at("prompt").get<std::string>(),
                     j.at("response").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw DataError("alignment samples line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

std::vector<AlignmentSample> load_samples(const std::string& path) { return parse_samples_jsonl(read_file(path)); }

// ---------------------------------------------------------------------------
// Embedding cache

EmbeddingCache::EmbeddingCache(std::vector<std::string> ids, Mat rows)
    : ids_(std::move(ids)), rows_(rows.cast<float>().cast<double>()) {
  if (static_cast<Eigen::Index>(ids_.size()) != rows_.rows())
    throw UsageError("embedding cache: one id per row required");
  for (std::size_t i = 0; i < ids_.size(); ++i)
    if (!by_id_.emplace(ids_[i], rows_.row(static_cast<Eigen::Index>(i))).second)
      throw DataError("embedding cache: duplicate id " + ids_[i]);
}

const RowVec* EmbeddingCache::find(std::string_view id) const {
  auto it = by_id_.find(id);
  return it == by_id_.end() ? nullptr : &it->second;
}

void EmbeddingCache::save(const std::string& path) const {
  encoder::write_embeddings(path, encoder::ids_path_for(path), ids_, rows_);
}

EmbeddingCache EmbeddingCache::load(const std::string& path) {
  encoder::EmbeddingTable t = encoder::read_embeddings(path, encoder::ids_path_for(path));
  return EmbeddingCache(std::move(t.ids), std::move(t.rows));
}

EmbeddingCache build_embedding_cache(std::span<const std::pair<std::string, std::string>> responses,
                                     encoder::StyleEncoder& model) {
  if (!model.encoder) throw UsageError("build_embedding_cache: no trained encoder loaded");
  std::vector<std::string> ids, texts;
  for (const auto& [id, text] : responses) {
    ids.push_back(id);
    texts.push_back(text);
  }
  Mat rows = texts.empty() ? Mat(0, 0) : model.embed(texts);
  return EmbeddingCache(std::move(ids), std::move(rows));
}

// ---------------------------------------------------------------------------
// Alignment fine-tuning

namespace {

struct Prepared {
  SftSequence seq;
  std::vector<char> mask;  // response positions
  const RowVec* target = nullptr;
};

std::vector<Prepared> prepare(const ToyLM& lm, std::span<const AlignmentSample> samples, const EmbeddingCache& cache) {
  std::vector<Prepared> out;
  for (const auto& s : samples) {
    Prepared p;
    p.target = cache.find(s.id);
    if (!p.target) throw DataError("embedding cache has no entry for sample " + s.id);
    p.seq = make_sequence(lm.vocab(), s.prompt, s.response, static_cast<std::size_t>(lm.config().max_len));
    const auto m = p.seq.response_mask();
    p.mask.assign(m.begin(), m.end());
    out.push_back(std::move(p));
  }
  return out;
}

std::span<const bool> as_bools(const std::vector<char>& v) {
  return {reinterpret_cast<const bool*>(v.data()), v.size()};
}

double sample_alignment(const Mat& h, const Prepared& p, const ProjectionHead& head, AlignPooling pooling) {
  if (pooling == AlignPooling::response_mean) return alignment_loss(pooled_response_state(h, as_bools(p.mask)), *p.target, head);
  double sum = 0.0;
  double n = 0.0;
  for (Eigen::Index t = 0; t < h.rows(); ++t) {
    if (!p.mask[static_cast<std::size_t>(t)]) continue;
    sum += alignment_loss(h.row(t), *p.target, head);
    n += 1.0;
  }
  return sum / n;
}

ag::Var sample_alignment(ag::Binder& bind, const ag::Var& h, const Prepared& p, ProjectionHead& head,
                         AlignPooling pooling) {
  if (pooling == AlignPooling::response_mean)
    return alignment_loss(bind, pooled_response_state(h, as_bools(p.mask)), *p.target, head);
  std::vector<ag::Var> terms;
  for (Eigen::Index t = 0; t < h.rows(); ++t)
    if (p.mask[static_cast<std::size_t>(t)]) terms.push_back(alignment_loss(bind, ag::slice_rows(h, t, 1), *p.target, head));
  return ag::scale(ag::sum(ag::vstack(terms)), 1.0 / static_cast<double>(terms.size()));
}

}  // namespace

std::string_view to_string(AlignPooling p) {
  return p == AlignPooling::response_mean ? "response_mean" : "per_position";
}

AlignPooling align_pooling_from_string(std::string_view s) {
  if (s == "response_mean") return AlignPooling::response_mean;
  if (s == "per_position") return AlignPooling::per_position;
  throw ConfigError("unknown alignment pooling '" + std::string(s) + "' (response_mean or per_position)");
}

HeldOutMetrics evaluate_alignment(ToyLM& lm, const ProjectionHead& head, std::span<const AlignmentSample> samples,
                                  const EmbeddingCache& cache, AlignPooling pooling) {
  const auto prepared = prepare(lm, samples, cache);
  HeldOutMetrics m;
  if (prepared.empty()) return m;
  for (const auto& p : prepared) {
    ag::Tape tape;
    ag::Binder bind(tape, /*trainable=*/false);
    const ag::Var h = lm.hidden(bind, p.seq.ids);
    m.cross_entropy += lm.response_cross_entropy(bind, h, p.seq).scalar();
    m.mean_cosine += 1.0 - sample_alignment(h.value(), p, head, pooling);
  }
  m.cross_entropy /= static_cast<double>(prepared.size());
  m.mean_cosine /= static_cast<double>(prepared.size());
  return m;
}

SftResult run_alignment_sft(ToyLM& lm, ProjectionHead& head, std::span<const AlignmentSample> train,
                            std::span<const AlignmentSample> heldout, const EmbeddingCache& cache,
                            const SftConfig& cfg, std::ostream* log) {
  if (cfg.alpha < 0.0) throw UsageError("alignment SFT: alpha must be nonnegative");
  if (cfg.batch_size < 1 || cfg.epochs < 0 || !(cfg.learning_rate > 0.0))
    throw UsageError("alignment SFT: bad batch size, epoch count or learning rate");
  const auto samples = prepare(lm, train, cache);
  if (samples.empty()) throw DataError("alignment SFT: no training samples");

  SftResult result;
  result.before = evaluate_alignment(lm, head, heldout, cache, cfg.pooling);

  std::vector<ag::Parameter*> params = lm.parameters();
  head.collect(params);
  optim::Adam adam(params);
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  long step = 0;

  for (long epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const double inv = 1.0 / static_cast<double>(end - start);
      adam.zero_grad();
      SftStep rec;
      rec.step = ++step;
      for (std::size_t k = start; k < end; ++k) {
        const Prepared& p = samples[order[k]];
        ag::Tape tape;
        ag::Binder bind(tape);
        const ag::Var h = lm.hidden(bind, p.seq.ids);
        const ag::Var ce = lm.response_cross_entropy(bind, h, p.seq);
        const ag::Var al = sample_alignment(bind, h, p, head, cfg.pooling);
        rec.ce += ce.scalar() * inv;
        rec.align += al.scalar() * inv;
        ag::Var total = cfg.alpha > 0.0 ? ag::add(ce, ag::scale(al, cfg.alpha)) : ce;
        tape.backward(ag::scale(total, inv));
      }
      rec.total = combined_sft_loss(rec.ce, rec.align, cfg.alpha);
      if (!std::isfinite(rec.total)) throw NumericError("alignment SFT diverged at step " + std::to_string(step));
      adam.step(cfg.learning_rate);
      result.steps.push_back(rec);
      if (log) {
        nlohmann::ordered_json j;
        j["step"] = rec.step;
        j["ce"] = rec.ce;
        j["align"] = rec.align;
        j["total"] = rec.total;
        *log << j.dump() << '\n';
      }
    }
  }
  result.after = evaluate_alignment(lm, head, heldout, cache, cfg.pooling);
  return result;
}

}  // namespace idiolex::align
