#include "idiolex/trainer.h"

#include "idiolex/log.h"
#include "idiolex/optim.h"
#include "idiolex/sampler.h"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <set>

namespace idiolex::trainer {

using json = nlohmann::json;
using objectives::LossBreakdown;
using objectives::LossParts;

namespace {

constexpr long kMaxWarmup = 25000;
constexpr std::uint64_t kDevSeedSalt = 0x646576;  // fixed dev groups, independent of training draws

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      "learning_rate", "warmup_steps",   "pretrain_epochs", "feature_epochs",    "validate_every",
      "patience",      "groups_per_batch", "rng_seed",      "steps_per_epoch",   "dev_groups",
      "n_layers",      "hidden_dim",     "max_tokens",      "projection_dim",    "margin_final",
      "margin_warm_steps", "alpha",      "bce_weight",      "tau",               "topk_positives",
      "var_weight",    "cov_weight"};
  return keys;
}

}  // namespace

void validate(const TrainConfig& cfg) {
  if (!(cfg.learning_rate > 0.0)) throw ConfigError("train config: learning_rate must be positive");
  if (cfg.warmup_steps < 0) throw ConfigError("train config: warmup_steps must be nonnegative");
  if (cfg.pretrain_epochs < 0 || cfg.feature_epochs < 0)
    throw ConfigError("train config: epoch counts must be nonnegative");
  if (cfg.validate_every < 1) throw ConfigError("train config: validate_every must be positive");
  if (cfg.patience < 1) throw ConfigError("train config: patience must be positive");
  if (cfg.groups_per_batch < 1) throw ConfigError("train config: groups_per_batch must be positive");
  if (cfg.steps_per_epoch < 0) throw ConfigError("train config: steps_per_epoch must be nonnegative");
  if (cfg.dev_groups < 1) throw ConfigError("train config: dev_groups must be positive");
  if (cfg.projection_dim < 1) throw ConfigError("train config: projection_dim must be positive");
  if (cfg.n_layers < 1 || cfg.hidden_dim < 2 || cfg.max_tokens < 1)
    throw ConfigError("train config: encoder sizes must be positive");
  objectives::validate(cfg.loss);
}

TrainConfig train_config_from(const KeyValueConfig& kv) {
  kv.require_known(known_keys());
  TrainConfig cfg;
  cfg.learning_rate = kv.get_double("learning_rate", cfg.learning_rate);
  cfg.warmup_steps = kv.get_int("warmup_steps", cfg.warmup_steps);
  cfg.pretrain_epochs = kv.get_int("pretrain_epochs", cfg.pretrain_epochs);
  cfg.feature_epochs = kv.get_int("feature_epochs", cfg.feature_epochs);
  cfg.validate_every = kv.get_int("validate_every", cfg.validate_every);
  cfg.patience = kv.get_int("patience", cfg.patience);
  cfg.groups_per_batch = kv.get_int("groups_per_batch", cfg.groups_per_batch);
  cfg.rng_seed = static_cast<std::uint64_t>(kv.get_int("rng_seed", static_cast<long long>(cfg.rng_seed)));
  cfg.steps_per_epoch = kv.get_int("steps_per_epoch", cfg.steps_per_epoch);
  cfg.dev_groups = kv.get_int("dev_groups", cfg.dev_groups);
  cfg.n_layers = kv.get_int("n_layers", cfg.n_layers);
  cfg.hidden_dim = kv.get_int("hidden_dim", cfg.hidden_dim);
  cfg.max_tokens = kv.get_int("max_tokens", cfg.max_tokens);
  cfg.projection_dim = kv.get_int("projection_dim", cfg.projection_dim);
  cfg.loss = objectives::loss_config_from(kv);
  validate(cfg);
  return cfg;
}

KeyValueConfig to_key_values(const TrainConfig& cfg) {
  KeyValueConfig kv;
  auto i = [&kv](const char* k, long long v) { kv.set(k, std::to_string(v)); };
  auto d = [&kv](const char* k, double v) { kv.set(k, format_double(v)); };
  d("learning_rate", cfg.learning_rate);
  i("warmup_steps", cfg.warmup_steps);
  i("pretrain_epochs", cfg.pretrain_epochs);
  i("feature_epochs", cfg.feature_epochs);
  i("validate_every", cfg.validate_every);
  i("patience", cfg.patience);
  i("groups_per_batch", cfg.groups_per_batch);
  i("rng_seed", static_cast<long long>(cfg.rng_seed));
  i("steps_per_epoch", cfg.steps_per_epoch);
  i("dev_groups", cfg.dev_groups);
  i("n_layers", cfg.n_layers);
  i("hidden_dim", cfg.hidden_dim);
  i("max_tokens", cfg.max_tokens);
  i("projection_dim", cfg.projection_dim);
  d("margin_final", cfg.loss.margin_final);
  i("margin_warm_steps", cfg.loss.margin_warm_steps);
  d("alpha", cfg.loss.alpha);
  d("bce_weight", cfg.loss.bce_weight);
  d("tau", cfg.loss.tau);
  i("topk_positives", cfg.loss.topk_positives);
  d("var_weight", cfg.loss.var_weight);
  d("cov_weight", cfg.loss.cov_weight);
  return kv;
}

std::string fingerprint(const TrainConfig& cfg) {
  std::string text;
  const KeyValueConfig kv = to_key_values(cfg);
  for (const auto& [k, v] : kv.values()) text += k + "=" + v + "\n";
  return fnv1a_hex(text);
}

// ---------------------------------------------------------------------------
// Model

std::vector<ag::Parameter*> IdiolexModel::parameters() {
  auto out = encoder.parameters();
  if (feature_count > 0) feature_head.collect(out);
  projection_head.collect(out);
  return out;
}

Mat IdiolexModel::predict_features(std::span<const std::string> texts) {
  if (feature_count == 0) throw UsageError("model has no feature head");
  Mat logits = feature_head.apply(encoder.embed(texts));
  return logits.unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
}

namespace {

encoder::EncoderConfig encoder_config(const TrainConfig& cfg) {
  encoder::EncoderConfig e;
  e.n_layers = static_cast<std::size_t>(cfg.n_layers);
  e.hidden_dim = static_cast<std::size_t>(cfg.hidden_dim);
  e.max_tokens = static_cast<std::size_t>(cfg.max_tokens);
  return e;
}

IdiolexModel build_model(encoder::Vocabulary vocab, const TrainConfig& cfg, std::size_t feature_count,
                         std::string inventory_fingerprint) {
  Rng rng(cfg.rng_seed);
  IdiolexModel m;
  m.encoder = encoder::StyleEncoder(std::move(vocab), encoder_config(cfg), rng);
  const auto d = static_cast<Eigen::Index>(cfg.hidden_dim);
  m.feature_count = feature_count;
  m.inventory_fingerprint = std::move(inventory_fingerprint);
  if (feature_count > 0) m.feature_head = objectives::FeatureHead(d, static_cast<Eigen::Index>(feature_count), rng);
  m.projection_head = objectives::ProjectionHead(d, cfg.projection_dim, rng);
  return m;
}

}  // namespace

TrainState initial_state(const corpus::CorpusSplit& corpus, const TrainConfig& cfg,
                         const features::FeatureInventory* inventory) {
  validate(cfg);
  std::vector<std::string> texts;
  for (const auto& r : corpus.records())
    if (r.split == corpus::Split::pretrain || r.split == corpus::Split::train) texts.push_back(r.text);
  TrainState st;
  st.model = build_model(encoder::Vocabulary::build(texts), cfg, inventory ? inventory->size() : 0,
                         inventory ? inventory->fingerprint() : std::string());
  return st;
}

StagePlan plan(const corpus::CorpusSplit& corpus, const TrainConfig& cfg) {
  auto per_epoch = [&cfg](std::size_t sentences) {
    if (cfg.steps_per_epoch > 0) return cfg.steps_per_epoch;
    const auto batch = static_cast<std::size_t>(cfg.groups_per_batch) * sampler::kGroupSize;
    return static_cast<long>((sentences + batch - 1) / batch);
  };
  std::size_t stage1 = 0;
  std::size_t stage2 = 0;
  for (const auto& r : corpus.records()) {
    if (r.split == corpus::Split::pretrain || r.split == corpus::Split::train) ++stage1;
    if (r.split == corpus::Split::train) ++stage2;
  }
  StagePlan p;
  p.pretrain_steps = cfg.pretrain_epochs * per_epoch(stage1);
  p.feature_steps = cfg.feature_epochs * per_epoch(stage2);
  const long total = p.pretrain_steps + p.feature_steps;
  p.warmup_steps = cfg.warmup_steps > 0 ? cfg.warmup_steps : std::max(1L, std::min(kMaxWarmup, total / 10));
  p.margin_warm_steps = cfg.loss.margin_warm_steps > 0 ? cfg.loss.margin_warm_steps : std::max(1L, p.pretrain_steps);
  return p;
}

// ---------------------------------------------------------------------------
// Forward pass over a batch of anchor groups

namespace {

struct Forward {
  ag::Var total;
  LossParts parts;  // mrl summed over groups; supcon and bce averaged
  Mat raw;          // pooled rows before centering
};

Mat feature_targets(const std::vector<corpus::SentenceRecord>& sentences, const features::FeatureCache& cache,
                    const IdiolexModel& model, std::vector<features::FeatureVector>& vectors) {
  Mat t(static_cast<Eigen::Index>(sentences.size()), static_cast<Eigen::Index>(model.feature_count));
  vectors.clear();
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    const features::FeatureVector* v = cache.find(sentences[i].id);
    if (!v) throw DataError("feature stage: no cached features for sentence " + sentences[i].id);
    if (v->bits.size() != model.feature_count)
      throw DataError("feature stage: features of " + sentences[i].id + " have the wrong width");
    for (std::size_t f = 0; f < model.feature_count; ++f)
      t(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(f)) = v->bits[f];
    vectors.push_back(*v);
  }
  return t;
}

Forward forward_batch(IdiolexModel& model, ag::Binder& bind, const std::vector<sampler::ProximityBatch>& groups,
                      const features::FeatureCache* cache, const objectives::LossConfig& loss, Stage stage,
                      double lambda) {
  ag::Tape& tape = bind.tape();
  std::vector<ag::Var> rows;
  for (const auto& g : groups)
    for (const auto& s : g.sentences) rows.push_back(model.encoder.pooled(bind, s.text));
  ag::Var raw = ag::vstack(rows);
  ag::Var centered = ag::add_row(raw, tape.constant(-model.encoder.mean.mu));
  ag::Var unit = ag::normalize_rows(centered, encoder::kNormEpsilon);

  Forward f;
  f.raw = raw.value();
  const objectives::StageWeights w = objectives::stage_weights(loss, stage);
  auto [var, cov] = objectives::variance_decorrelation_loss(centered);
  f.parts.var = var.scalar();
  f.parts.cov = cov.scalar();

  ag::Var mrl_sum, supcon_sum, bce_sum;
  Eigen::Index offset = 0;
  for (const auto& g : groups) {
    const auto n = static_cast<Eigen::Index>(g.sentences.size());
    ag::Var group = ag::slice_rows(unit, offset, n);
    offset += n;
    ag::Var mrl = objectives::margin_ranking_loss(group, g.proximity, lambda);
    mrl_sum = mrl_sum.valid() ? ag::add(mrl_sum, mrl) : mrl;
    if (stage != Stage::feature) continue;

    std::vector<features::FeatureVector> vectors;
    const Mat targets = feature_targets(g.sentences, *cache, model, vectors);
    ag::Var bce = objectives::feature_bce_loss(model.feature_head(bind, group), targets);
    ag::Var z = model.projection_head(bind, group);
    ag::Var supcon = objectives::supcon_loss(z, objectives::supcon_weights(vectors, loss.topk_positives), loss.tau);
    bce_sum = bce_sum.valid() ? ag::add(bce_sum, bce) : bce;
    supcon_sum = supcon_sum.valid() ? ag::add(supcon_sum, supcon) : supcon;
  }

  f.parts.mrl = mrl_sum.scalar();
  ag::Var total = ag::add(ag::scale(mrl_sum, w.mrl), ag::add(ag::scale(var, w.var), ag::scale(cov, w.cov)));
  if (stage == Stage::feature) {
    const double inv = 1.0 / static_cast<double>(groups.size());
    ag::Var bce_mean = ag::scale(bce_sum, inv);
    ag::Var supcon_mean = ag::scale(supcon_sum, inv);
    f.parts.bce = bce_mean.scalar();
    f.parts.supcon = supcon_mean.scalar();
    total = ag::add(total, ag::add(ag::scale(bce_mean, w.bce), ag::scale(supcon_mean, w.supcon)));
  }
  f.total = total;
  return f;
}

struct Snapshot {
  std::vector<Mat> values;
  RowVec mu;
};

Snapshot take_snapshot(IdiolexModel& m) {
  Snapshot s;
  for (auto* p : m.parameters()) s.values.push_back(p->value);
  s.mu = m.encoder.mean.mu;
  return s;
}

void restore(IdiolexModel& m, const Snapshot& s) {
  auto params = m.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = s.values[i];
  m.encoder.mean.mu = s.mu;
}

double layer_weight_sum(IdiolexModel& m) { return encoder::softmax(m.encoder.layer_logits.value.row(0)).sum(); }

void write_step_log(std::ostream& os, const TrainState& st, double lambda, double lr, const LossBreakdown& b,
                    double layer_sum) {
  json rec = {{"type", "step"}, {"step", st.step}, {"stage", objectives::to_string(st.stage)},
              {"lambda", lambda}, {"lr", lr},  {"mrl", b.mrl},
              {"supcon", b.supcon}, {"bce", b.bce}, {"var", b.var},
              {"cov", b.cov},     {"total", b.total}, {"layer_weight_sum", layer_sum}};
  os << rec.dump() << '\n';
}

void write_validation_log(std::ostream& os, const TrainState& st, const DevMetrics& m, bool improved) {
  json rec = {{"type", "validation"}, {"step", st.step}, {"stage", objectives::to_string(st.stage)},
              {"dev_mrl", m.mrl}, {"metric", m.metric}, {"improved", improved}};
  if (m.feat) rec["dev_feat"] = *m.feat;
  if (m.feature_f1) rec["dev_feature_f1"] = *m.feature_f1;
  os << rec.dump() << '\n';
}

bool grads_finite(const std::vector<ag::Parameter*>& params) {
  return std::all_of(params.begin(), params.end(), [](const ag::Parameter* p) { return p->grad.allFinite(); });
}

void run_stage(TrainState& st, const corpus::CorpusSplit& train, const corpus::CorpusSplit& dev,
               const features::FeatureCache* cache, const TrainConfig& cfg, Stage stage, long steps,
               const StagePlan& p, const TrainOptions& opts) {
  st.stage = stage;
  st.best_dev_metric = std::numeric_limits<double>::infinity();
  st.validations_since_best = 0;
  if (steps <= 0) return;

  auto params = st.model.parameters();
  optim::Adam adam(params);
  std::seed_seq seq{cfg.rng_seed, static_cast<std::uint64_t>(stage == Stage::pretrain ? 1 : 2)};
  Rng rng(seq);
  std::optional<Snapshot> best;

  for (long s = 1; s <= steps; ++s) {
    const double lr = optim::warmup_constant_lr(cfg.learning_rate, st.step + 1, p.warmup_steps);
    const double lambda = stage == Stage::pretrain
                              ? objectives::margin_schedule(s - 1, p.margin_warm_steps, cfg.loss.margin_final)
                              : cfg.loss.margin_final;
    const auto groups = sampler::assemble_training_batch(train, static_cast<std::size_t>(cfg.groups_per_batch), rng);

    adam.zero_grad();
    ag::Tape tape;
    ag::Binder bind(tape);
    Forward f = forward_batch(st.model, bind, groups, cache, cfg.loss, stage, lambda);
    const double total = f.total.scalar();
    if (std::isfinite(total)) tape.backward(f.total);
    if (!std::isfinite(total) || !grads_finite(params)) {
      if (!opts.failure_checkpoint.empty()) save_checkpoint(opts.failure_checkpoint, st, cfg);
      throw NumericError("training diverged at step " + std::to_string(st.step + 1) +
                         " (non-finite loss or gradient)");
    }
    adam.step(lr);
    st.model.encoder.mean.update(f.raw.colwise().mean());
    ++st.step;

    if (opts.log) {
      const LossBreakdown b = objectives::combined_objective(f.parts, cfg.loss, stage);
      write_step_log(*opts.log, st, lambda, lr, b, layer_weight_sum(st.model));
    }

    if (s % cfg.validate_every == 0 || s == steps) {
      const DevMetrics m = validate(st, dev, cache, cfg, stage);
      const bool improved = m.metric < st.best_dev_metric;
      if (improved) {
        st.best_dev_metric = m.metric;
        st.validations_since_best = 0;
        best = take_snapshot(st.model);
      } else {
        ++st.validations_since_best;
      }
      if (opts.log) write_validation_log(*opts.log, st, m, improved);
      if (st.validations_since_best >= cfg.patience) {
        logger()->info("early stopping at step {} ({} validations without improvement)", st.step,
                       st.validations_since_best);
        break;
      }
    }
  }
  if (best) restore(st.model, *best);
}

}  // namespace

// ---------------------------------------------------------------------------
// Stages

TrainState run_pretrain_stage(const corpus::CorpusSplit& corpus, const TrainConfig& cfg,
                              const features::FeatureInventory* inventory, const TrainOptions& opts) {
  TrainState st = initial_state(corpus, cfg, inventory);
  run_pretrain_stage(st, corpus, cfg, opts);
  return st;
}

void run_pretrain_stage(TrainState& state, const corpus::CorpusSplit& corpus, const TrainConfig& cfg,
                        const TrainOptions& opts) {
  validate(cfg);
  const corpus::CorpusSplit train = corpus.select({corpus::Split::pretrain, corpus::Split::train});
  if (train.empty()) throw DataError("pretrain stage: no pretrain sentences");
  const corpus::CorpusSplit dev = corpus.select({corpus::Split::dev});
  const StagePlan p = plan(corpus, cfg);
  run_stage(state, train, dev, nullptr, cfg, Stage::pretrain, p.pretrain_steps, p, opts);
}

void run_feature_stage(TrainState& state, const corpus::CorpusSplit& corpus, const features::FeatureCache& cache,
                       const TrainConfig& cfg, const TrainOptions& opts) {
  validate(cfg);
  if (state.model.feature_count == 0) throw ConfigError("feature stage: the model was built without a feature inventory");
  if (cache.fingerprint() != state.model.inventory_fingerprint)
    throw DataError("feature stage: feature cache was built for a different inventory");
  const corpus::CorpusSplit train = corpus.select({corpus::Split::train});
  if (train.empty()) throw DataError("feature stage: no train sentences");
  const corpus::CorpusSplit dev = corpus.select({corpus::Split::dev});
  const StagePlan p = plan(corpus, cfg);
  run_stage(state, train, dev, &cache, cfg, Stage::feature, p.feature_steps, p, opts);
}

std::vector<sampler::ProximityBatch> dev_groups(const corpus::CorpusSplit& dev, const TrainConfig& cfg) {
  Rng rng(cfg.rng_seed ^ kDevSeedSalt);
  return sampler::assemble_training_batch(dev, static_cast<std::size_t>(cfg.dev_groups), rng);
}

double feature_macro_f1(const Mat& probabilities, const Mat& targets) {
  if (probabilities.rows() != targets.rows() || probabilities.cols() != targets.cols())
    throw UsageError("feature_macro_f1: shape mismatch");
  double sum = 0.0;
  int classes = 0;
  for (Eigen::Index f = 0; f < targets.cols(); ++f) {
    double tp = 0, fp = 0, fn = 0;
    for (Eigen::Index i = 0; i < targets.rows(); ++i) {
      const bool pred = probabilities(i, f) > 0.5;
      const bool gold = targets(i, f) > 0.5;
      tp += pred && gold;
      fp += pred && !gold;
      fn += !pred && gold;
    }
    if (tp + fp + fn == 0) continue;  // feature absent from both gold and predictions
    sum += 2 * tp / (2 * tp + fp + fn);
    ++classes;
  }
  return classes == 0 ? 0.0 : sum / classes;
}

DevMetrics validate(TrainState& state, const corpus::CorpusSplit& dev, const features::FeatureCache* cache,
                    const TrainConfig& cfg, Stage stage) {
  if (dev.empty()) throw UsageError("validate: empty dev split");
  const auto groups = dev_groups(dev, cfg);
  IdiolexModel& model = state.model;

  DevMetrics m;
  bool have_features = stage == Stage::feature && cache && model.feature_count > 0;
  if (have_features)
    for (const auto& g : groups)
      for (const auto& s : g.sentences) have_features = have_features && cache->contains(s.id);

  ag::Tape tape;
  ag::Binder bind(tape, /*trainable=*/false);
  const Forward f = forward_batch(model, bind, groups, have_features ? cache : nullptr, cfg.loss,
                                  have_features ? Stage::feature : Stage::pretrain, cfg.loss.margin_final);
  m.mrl = *f.parts.mrl / static_cast<double>(groups.size());
  m.metric = m.mrl;
  if (have_features) {
    m.feat = cfg.loss.bce_weight * *f.parts.bce + *f.parts.supcon;
    m.metric = (1.0 - cfg.loss.alpha) * m.mrl + cfg.loss.alpha * *m.feat;
  }

  if (cache && model.feature_count > 0) {
    std::vector<std::string> texts;
    std::vector<const features::FeatureVector*> gold;
    for (const auto& r : dev.records())
      if (const auto* v = cache->find(r.id)) {
        texts.push_back(r.text);
        gold.push_back(v);
      }
    if (!texts.empty()) {
      Mat targets(static_cast<Eigen::Index>(gold.size()), static_cast<Eigen::Index>(model.feature_count));
      for (std::size_t i = 0; i < gold.size(); ++i)
        for (std::size_t k = 0; k < model.feature_count; ++k)
          targets(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = gold[i]->bits.at(k);
      m.feature_f1 = feature_macro_f1(model.predict_features(texts), targets);
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kCheckpointMagic[8] = {'I', 'D', 'L', 'X', 'C', 'K', 'P', 'T'};
constexpr std::uint8_t kCheckpointVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t get_u32(std::string_view in, std::size_t pos) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return v;
}

struct Tensor {
  std::string name;
  Mat* value;
};

std::vector<Tensor> tensors(TrainState& st) {
  std::vector<Tensor> out;
  for (auto* p : st.model.parameters()) out.push_back({p->name, &p->value});
  return out;
}

}  // namespace

std::string serialize_checkpoint(TrainState& st, const TrainConfig& cfg) {
  json header;
  json config = json::object();
  const KeyValueConfig kv = to_key_values(cfg);
  for (const auto& [k, v] : kv.values()) config[k] = v;
  header["config"] = config;
  header["config_fingerprint"] = fingerprint(cfg);
  header["vocab"] = st.model.encoder.vocab.tokens();
  header["feature_count"] = st.model.feature_count;
  header["inventory_fingerprint"] = st.model.inventory_fingerprint;
  header["momentum"] = st.model.encoder.mean.momentum;
  header["step"] = st.step;
  header["stage"] = objectives::to_string(st.stage);
  header["best_dev_metric"] = std::isfinite(st.best_dev_metric) ? json(st.best_dev_metric) : json(nullptr);
  header["validations_since_best"] = st.validations_since_best;

  Mat mu = st.model.encoder.mean.mu;
  std::vector<Tensor> blocks = tensors(st);
  blocks.push_back({"running_mean", &mu});
  json shapes = json::array();
  for (const auto& t : blocks) shapes.push_back({{"name", t.name}, {"rows", t.value->rows()}, {"cols", t.value->cols()}});
  header["tensors"] = shapes;

  const std::string head = header.dump();
  std::string out(kCheckpointMagic, 8);
  out.push_back(static_cast<char>(kCheckpointVersion));
  put_u32(out, static_cast<std::uint32_t>(head.size()));
  out += head;
  for (const auto& t : blocks)
    for (Eigen::Index i = 0; i < t.value->rows(); ++i)
      for (Eigen::Index j = 0; j < t.value->cols(); ++j) {
        const float f = static_cast<float>((*t.value)(i, j));
        std::uint32_t bits = 0;
        std::memcpy(&bits, &f, sizeof bits);
        put_u32(out, bits);
      }
  return out;
}

void save_checkpoint(const std::string& path, TrainState& state, const TrainConfig& cfg) {
  write_file(path, serialize_checkpoint(state, cfg));
}

Checkpoint parse_checkpoint(std::string_view bytes) {
  if (bytes.size() < 13 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw DataError("checkpoint: bad magic");
  if (static_cast<std::uint8_t>(bytes[8]) != kCheckpointVersion)
    throw DataError("checkpoint: unsupported version " + std::to_string(static_cast<int>(bytes[8])));
  const std::size_t head_len = get_u32(bytes, 9);
  if (13 + head_len > bytes.size()) throw DataError("checkpoint: truncated header");

  json header;
  try {
    header = json::parse(bytes.substr(13, head_len));
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint: unreadable header: ") + e.what());
  }

  Checkpoint ck;
  try {
    KeyValueConfig kv;
    for (const auto& [k, v] : header.at("config").items()) kv.set(k, v.get<std::string>());
    ck.config = train_config_from(kv);
    if (header.at("config_fingerprint").get<std::string>() != fingerprint(ck.config))
      throw DataError("checkpoint: config fingerprint does not match its stored config");

    TrainState& st = ck.state;
    st.model = build_model(encoder::Vocabulary(header.at("vocab").get<std::vector<std::string>>()), ck.config,
                           header.at("feature_count").get<std::size_t>(),
                           header.at("inventory_fingerprint").get<std::string>());
    st.model.encoder.mean.momentum = header.at("momentum").get<double>();
    st.step = header.at("step").get<long>();
    st.stage = objectives::stage_from_string(header.at("stage").get<std::string>());
    st.best_dev_metric = header.at("best_dev_metric").is_null() ? std::numeric_limits<double>::infinity()
                                                                 : header.at("best_dev_metric").get<double>();
    st.validations_since_best = header.at("validations_since_best").get<long>();

    Mat mu = st.model.encoder.mean.mu;
    std::vector<Tensor> blocks = tensors(st);
    blocks.push_back({"running_mean", &mu});
    const json& shapes = header.at("tensors");
    if (shapes.size() != blocks.size()) throw DataError("checkpoint: tensor list does not match the model");

    std::size_t pos = 13 + head_len;
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      const json& s = shapes[b];
      Mat& m = *blocks[b].value;
      if (s.at("name").get<std::string>() != blocks[b].name || s.at("rows").get<Eigen::Index>() != m.rows() ||
          s.at("cols").get<Eigen::Index>() != m.cols())
        throw DataError("checkpoint: tensor " + s.at("name").get<std::string>() + " does not match the model");
      if (pos + static_cast<std::size_t>(m.size()) * 4 > bytes.size()) throw DataError("checkpoint: truncated tensor data");
      for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j, pos += 4) {
          const std::uint32_t bits = get_u32(bytes, pos);
          float f = 0.0F;
          std::memcpy(&f, &bits, sizeof f);
          m(i, j) = f;
        }
    }
    if (pos != bytes.size()) throw DataError("checkpoint: trailing bytes after tensor data");
    st.model.encoder.mean.mu = mu;
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint: malformed header: ") + e.what());
  }
  return ck;
}

Checkpoint load_checkpoint(const std::string& path) { return parse_checkpoint(read_file(path)); }

}  // namespace idiolex::trainer
