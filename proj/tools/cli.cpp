#include "idiolex/cli.h"

#include "idiolex/align.h"
#include "idiolex/config.h"
#include "idiolex/corpus.h"
#include "idiolex/encoder.h"
#include "idiolex/evalsuite.h"
#include "idiolex/features.h"
#include "idiolex/log.h"
#include "idiolex/synthcorpus.h"
#include "idiolex/trainer.h"

#include "CLI11.hpp"
#include "json.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace idiolex::cli {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

constexpr const char* kApiKeyVariable = "IDIOLEX_API_KEY";

struct Flags {
  std::string config;
  std::uint64_t seed = 0;
  std::string out;
  std::string corpus;
  std::string features;
  std::string inventory;
  std::string checkpoint;
  std::string embeddings;
  std::string labels;
  std::string pairs;
  std::string samples;
  std::string cache;
  std::string mode;
  std::string stage;
  std::string split = "test";
  std::string label_key = "community_id";
  std::string endpoint = "https://api.openai.com";
  std::string model = "gpt-4o";
  std::size_t trials = 1000;
  bool fine_tune = false;
};

std::string out_path(const Flags& f, const std::string& name) {
  if (f.out.empty()) throw UsageError("--out is required");
  return (fs::path(f.out) / name).string();
}

/// Identifies an eval result by the embedding bytes and the settings, not by file paths.
std::string eval_fingerprint(const Flags& f, const std::string& settings) {
  return fnv1a_hex(fnv1a_hex(read_file(f.embeddings)) + "|" + f.label_key + "|" + settings);
}

KeyValueConfig load_config(const Flags& f) { return f.config.empty() ? KeyValueConfig() : KeyValueConfig::load(f.config); }

// ---- synth ----

void cmd_synth(const Flags& f, std::ostream& out) {
  KeyValueConfig kv = load_config(f);
  kv.require_known({"n_communities", "authors_per_community", "comments_per_author", "sentences_per_comment",
                    "feature_inventory_size", "community_feature_priors", "signature_features", "prior_high",
                    "prior_low", "author_perturbation", "vocab_size", "min_filler_tokens", "max_filler_tokens",
                    "seed", "heldout_per_dialect", "train_authors_cap", "align_samples"});
  kv.set("seed", std::to_string(f.seed));
  const synth::SynthConfig cfg = synth::synth_config_from(kv);
  const auto heldout = static_cast<std::size_t>(kv.get_int("heldout_per_dialect", 3));
  const auto cap = static_cast<std::size_t>(kv.get_int("train_authors_cap", 200));
  const auto n_align = static_cast<std::size_t>(kv.get_int("align_samples", 2000));

  synth::SynthCorpus sc = synth::generate_corpus(cfg);
  const corpus::CorpusSplit split = corpus::split_by_author(sc.corpus, heldout, cap, f.seed);

  // Alignment pairs: a short filler prompt answered by a corpus sentence.
  Rng rng(f.seed ^ 0x616c69676eULL);
  std::vector<align::AlignmentSample> samples;
  for (std::size_t i = 0; i < n_align; ++i) {
    const auto& r = split.at(uniform_index(rng, split.size()));
    std::string prompt = "reply to:";
    for (int w = 0; w < 3; ++w) prompt += " w" + std::to_string(uniform_index(rng, cfg.vocab_size));
    char id[32];
    std::snprintf(id, sizeof id, "align_%05zu", i);
    samples.push_back({id, prompt, r.text});
  }

  write_file(out_path(f, "corpus.jsonl"), corpus::corpus_to_jsonl(split));
  sc.ground_truth.save(out_path(f, "features.jsonl"));
  write_file(out_path(f, "inventory.txt"), sc.inventory.serialize());
  write_file(out_path(f, "align_samples.jsonl"), align::samples_to_jsonl(samples));
  out << "wrote " << split.size() << " sentences, " << samples.size() << " alignment samples to " << f.out << '\n';
}

// ---- features ----

void cmd_features(const Flags& f, std::ostream& out) {
  if (f.corpus.empty() || f.inventory.empty()) throw UsageError("features needs --corpus and --inventory");
  const corpus::CorpusSplit c = corpus::load_corpus(f.corpus);
  const features::FeatureInventory inv = features::FeatureInventory::load(f.inventory);
  features::FeatureCache cache(inv);
  if (f.mode == "rules") {
    const features::Rulebook rules = features::default_rulebook(inv);
    for (const auto& r : c.records()) cache.put(r.id, features::extract_rules(r, inv, rules));
  } else if (f.mode == "llm") {
    const char* key = std::getenv(kApiKeyVariable);
    if (!key || !*key) throw ConfigError(std::string("features --mode llm needs the ") + kApiKeyVariable + " variable");
    features::HttpCompletionClient client(f.endpoint, f.model, key);
    const auto vectors = features::extract_llm_batch(c.records(), inv, client);
    for (std::size_t i = 0; i < vectors.size(); ++i) cache.put(c.at(i).id, vectors[i]);
  } else {
    throw UsageError("features --mode must be rules or llm");
  }
  cache.save(out_path(f, "features.jsonl"));
  out << "wrote features for " << cache.size() << " sentences\n";
}

// ---- train ----

void cmd_train(const Flags& f, std::ostream& out) {
  if (f.corpus.empty()) throw UsageError("train needs --corpus");
  KeyValueConfig kv = load_config(f);
  kv.set("rng_seed", std::to_string(f.seed));
  const trainer::TrainConfig cfg = trainer::train_config_from(kv);
  const corpus::CorpusSplit c = corpus::load_corpus(f.corpus);

  std::ostringstream log;
  trainer::TrainOptions opts;
  opts.log = &log;
  opts.failure_checkpoint = out_path(f, "checkpoint.failed.bin");
  trainer::TrainState state;

  const objectives::Stage stage = objectives::stage_from_string(f.stage);
  if (stage == objectives::Stage::pretrain) {
    std::optional<features::FeatureInventory> inv;
    if (!f.inventory.empty()) inv = features::FeatureInventory::load(f.inventory);
    state = trainer::initial_state(c, cfg, inv ? &*inv : nullptr);
    try {
      trainer::run_pretrain_stage(state, c, cfg, opts);
    } catch (...) {
      write_file(out_path(f, "train_log.jsonl"), log.str());
      throw;
    }
  } else {
    if (f.checkpoint.empty() || f.features.empty())
      throw UsageError("train --stage feature needs --checkpoint and --features");
    trainer::Checkpoint ck = trainer::load_checkpoint(f.checkpoint);
    state = std::move(ck.state);
    const features::FeatureCache cache = features::FeatureCache::load(f.features);
    try {
      trainer::run_feature_stage(state, c, cache, cfg, opts);
    } catch (...) {
      write_file(out_path(f, "train_log.jsonl"), log.str());
      throw;
    }
  }
  write_file(out_path(f, "train_log.jsonl"), log.str());
  trainer::save_checkpoint(out_path(f, "checkpoint.bin"), state, cfg);
  out << "trained " << objectives::to_string(stage) << " stage to step " << state.step << '\n';
}

// ---- embed ----

void cmd_embed(const Flags& f, std::ostream& out) {
  if (f.checkpoint.empty() || f.corpus.empty()) throw UsageError("embed needs --checkpoint and --corpus");
  trainer::Checkpoint ck = trainer::load_checkpoint(f.checkpoint);
  const corpus::CorpusSplit c = corpus::load_corpus(f.corpus);
  std::vector<std::string> ids, texts;
  std::string labels;
  for (const auto& r : c.records()) {
    if (f.split != "all" && corpus::to_string(r.split) != f.split) continue;
    ids.push_back(r.id);
    texts.push_back(r.text);
    json j;
    j["id"] = r.id;
    j["community_id"] = r.community_id;
    j["author_id"] = r.author_id;
    j["split"] = std::string(corpus::to_string(r.split));
    labels += j.dump() + "\n";
  }
  if (ids.empty()) throw DataError("embed: no sentences in split '" + f.split + "'");
  const Mat rows = ck.state.model.encoder.embed(texts);
  const std::string bin = out_path(f, "embeddings.bin");
  encoder::write_embeddings(bin, encoder::ids_path_for(bin), ids, rows);
  write_file(out_path(f, "labels.jsonl"), labels);
  out << "embedded " << ids.size() << " sentences\n";
}

// ---- eval ----

struct LabelRow {
  std::string community_id;
  std::string author_id;
  std::string split;
};

std::map<std::string, LabelRow> load_labels(const std::string& path) {
  std::map<std::string, LabelRow> out;
  std::istringstream in(read_file(path));
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out[j.at("id").get<std::string>()] = {j.at("community_id").get<std::string>(), j.value("author_id", ""),
                                            j.value("split", "")};
    } catch (const nlohmann::json::exception& e) {
      throw DataError("labels file " + path + ": " + e.what());
    }
  }
  return out;
}

struct LabeledTable {
  encoder::EmbeddingTable table;
  std::vector<LabelRow> rows;
  std::vector<std::string> labels;  // by --label-key
};

LabeledTable load_labeled(const Flags& f) {
  if (f.embeddings.empty() || f.labels.empty()) throw UsageError("this command needs --embeddings and --labels");
  if (f.label_key != "community_id" && f.label_key != "author_id")
    throw UsageError("--label-key must be community_id or author_id");
  LabeledTable t;
  t.table = encoder::read_embeddings(f.embeddings, encoder::ids_path_for(f.embeddings));
  const auto labels = load_labels(f.labels);
  for (const auto& id : t.table.ids) {
    auto it = labels.find(id);
    if (it == labels.end()) throw DataError("no label for embedding id " + id);
    t.rows.push_back(it->second);
    t.labels.push_back(f.label_key == "community_id" ? it->second.community_id : it->second.author_id);
  }
  return t;
}

struct Subset {
  Mat x;
  std::vector<std::string> labels;
  std::vector<std::size_t> index;
};

Subset subset(const LabeledTable& t, const std::set<std::string>& splits) {
  Subset s;
  for (std::size_t i = 0; i < t.rows.size(); ++i)
    if (splits.count(t.rows[i].split)) s.index.push_back(i);
  s.x.resize(static_cast<Eigen::Index>(s.index.size()), t.table.rows.cols());
  for (std::size_t k = 0; k < s.index.size(); ++k) {
    s.x.row(static_cast<Eigen::Index>(k)) = t.table.rows.row(static_cast<Eigen::Index>(s.index[k]));
    s.labels.push_back(t.labels[s.index[k]]);
  }
  return s;
}

const std::set<std::string> kTrainSplits = {"pretrain", "train"};

std::string read_text_for(const std::map<std::string, std::string>& texts, const std::string& id) {
  auto it = texts.find(id);
  if (it == texts.end()) throw DataError("corpus has no sentence " + id);
  return it->second;
}

void eval_classify(const Flags& f, std::ostream& out) {
  const LabeledTable t = load_labeled(f);
  const Subset train = subset(t, kTrainSplits);
  const Subset test = subset(t, {"test"});
  if (train.index.empty() || test.index.empty())
    throw DataError("classify needs train/pretrain and test items in the labels file");

  eval::EvalReport report;
  const std::string mode = f.mode.empty() ? "centroid" : f.mode;
  if (mode == "centroid") {
    report = eval::centroid_classify(train.x, train.labels, test.x, test.labels).report;
  } else if (mode == "probe") {
    const Subset dev = subset(t, {"dev"});
    if (dev.index.size() < 2) throw DataError("probe mode needs at least 2 dev items");
    Subset half_a, half_b;
    std::vector<Eigen::Index> rows_a, rows_b;
    for (std::size_t k = 0; k < dev.index.size(); ++k) (k % 2 == 0 ? rows_a : rows_b).push_back(static_cast<Eigen::Index>(k));
    auto take = [&dev](const std::vector<Eigen::Index>& rows, Subset& s) {
      s.x.resize(static_cast<Eigen::Index>(rows.size()), dev.x.cols());
      for (std::size_t k = 0; k < rows.size(); ++k) {
        s.x.row(static_cast<Eigen::Index>(k)) = dev.x.row(rows[k]);
        s.labels.push_back(dev.labels[static_cast<std::size_t>(rows[k])]);
        s.index.push_back(dev.index[static_cast<std::size_t>(rows[k])]);
      }
    };
    take(rows_a, half_a);
    take(rows_b, half_b);
    auto to_sets = [](const std::vector<std::string>& v) {
      std::vector<eval::LabelSet> s;
      for (const auto& l : v) s.push_back({l});
      return s;
    };
    eval::ProbeConfig pcfg;
    pcfg.seed = f.seed;

    std::map<std::string, std::string> texts;
    if (!f.corpus.empty()) {
      const corpus::CorpusSplit c = corpus::load_corpus(f.corpus);
      for (const auto& r : c.records()) texts[r.id] = r.text;
    }
    auto texts_of = [&](const Subset& s) {
      std::vector<std::string> v;
      for (std::size_t i : s.index) v.push_back(read_text_for(texts, t.table.ids[i]));
      return v;
    };

    eval::Probe probe;
    Mat x_b = half_b.x, x_test = test.x;
    if (f.fine_tune) {
      if (f.checkpoint.empty() || f.corpus.empty()) throw UsageError("--fine-tune needs --checkpoint and --corpus");
      trainer::Checkpoint ck = trainer::load_checkpoint(f.checkpoint);
      encoder::StyleEncoder& enc = ck.state.model.encoder;
      probe = eval::fine_tune_probe(enc, texts_of(train), to_sets(train.labels), texts_of(half_a),
                                    to_sets(half_a.labels), pcfg);
      x_b = enc.embed(texts_of(half_b));
      x_test = enc.embed(texts_of(test));
    } else {
      probe = eval::train_probe({train.x, to_sets(train.labels)}, {half_a.x, to_sets(half_a.labels)}, pcfg);
    }

    std::optional<Mat> lex_b, lex_test;
    if (!f.corpus.empty()) {
      eval::LexicalConfig lcfg;
      lcfg.seed = f.seed;
      eval::LexicalClassifier lex(lcfg);
      lex.fit(texts_of(train), train.labels);
      lex_b = lex.predict_proba(texts_of(half_b));
      lex_test = lex.predict_proba(texts_of(test));
    }
    const eval::OpenSetTuning tuned =
        eval::tune_open_set(probe.predict_proba(x_b), lex_b ? &*lex_b : nullptr, probe.classes, half_b.labels);
    Mat p = probe.predict_proba(x_test);
    if (lex_test) p = eval::ensemble_predict(*lex_test, p, tuned.omega);
    report.predictions = eval::open_set_labels(p, probe.classes, tuned.threshold);
    report.metrics["accuracy"] = eval::accuracy(test.labels, report.predictions);
    report.metrics["exact_match"] = report.metrics["accuracy"];
    report.metrics["macro_f1"] = eval::macro_f1(test.labels, report.predictions);
    report.metrics["unk_threshold"] = tuned.threshold;
    report.metrics["omega"] = tuned.omega;
  } else {
    throw UsageError("eval classify --mode must be centroid or probe");
  }
  report.task = "classify_" + mode;
  report.seed = f.seed;
  report.config_fingerprint = eval_fingerprint(f, mode + (f.fine_tune ? "|fine-tune" : ""));
  out << report.to_json() << '\n';
}

void eval_cluster(const Flags& f, std::ostream& out) {
  const LabeledTable t = load_labeled(f);
  const Subset train = subset(t, kTrainSplits);
  const Subset test = subset(t, {"test"});
  if (train.index.empty() || test.index.empty())
    throw DataError("cluster needs train/pretrain and test items in the labels file");
  eval::EvalReport r = eval::kmeans_cluster_eval(train.x, test.x, test.labels, 0, f.seed);
  r.config_fingerprint = eval_fingerprint(f, "cluster");
  out << r.to_json() << '\n';
}

void eval_retrieval(const Flags& f, std::ostream& out) {
  const LabeledTable t = load_labeled(f);
  eval::EvalReport r;
  r.task = "retrieval";
  r.seed = f.seed;
  r.metrics["accuracy_star"] = eval::retrieval_accuracy(t.table.rows, t.labels, f.trials, f.seed);
  r.metrics["trials"] = static_cast<double>(f.trials);
  r.config_fingerprint = eval_fingerprint(f, "retrieval|" + std::to_string(f.trials));
  out << r.to_json() << '\n';
}

/// Tab-separated lines "id_a id_b [semantic_sim]"; '#' lines are skipped.
std::vector<std::vector<std::string>> read_tsv(const std::string& path) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(read_file(path));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cols;
    std::size_t start = 0;
    while (true) {
      const std::size_t tab = line.find('\t', start);
      cols.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    rows.push_back(std::move(cols));
  }
  return rows;
}

std::map<std::string, Eigen::Index> row_index(const encoder::EmbeddingTable& t) {
  std::map<std::string, Eigen::Index> idx;
  for (std::size_t i = 0; i < t.ids.size(); ++i) idx[t.ids[i]] = static_cast<Eigen::Index>(i);
  return idx;
}

Eigen::Index lookup(const std::map<std::string, Eigen::Index>& idx, const std::string& id) {
  auto it = idx.find(id);
  if (it == idx.end()) throw DataError("no embedding for id " + id);
  return it->second;
}

void eval_sim(const Flags& f, std::ostream& out) {
  if (f.embeddings.empty() || f.pairs.empty()) throw UsageError("eval sim needs --embeddings and --pairs");
  const encoder::EmbeddingTable t = encoder::read_embeddings(f.embeddings, encoder::ids_path_for(f.embeddings));
  const auto idx = row_index(t);
  eval::EvalReport r;
  r.task = "sim";
  double sum = 0.0;
  const auto rows = read_tsv(f.pairs);
  for (const auto& cols : rows) {
    if (cols.size() < 2) throw DataError("pairs file: need two ids per line");
    const double s = eval::cosine_similarity(t.rows.row(lookup(idx, cols[0])), t.rows.row(lookup(idx, cols[1])));
    sum += s;
    std::ostringstream v;
    v.precision(17);
    v << s;
    r.predictions.push_back(v.str());
  }
  if (rows.empty()) throw DataError("pairs file is empty");
  r.metrics["mean_cosine"] = sum / static_cast<double>(rows.size());
  r.metrics["pairs"] = static_cast<double>(rows.size());
  r.config_fingerprint = eval_fingerprint(f, "sim");
  out << r.to_json() << '\n';
}

void eval_correlation(const Flags& f, std::ostream& out) {
  if (f.embeddings.empty() || f.pairs.empty() || f.labels.empty())
    throw UsageError("eval correlation needs --embeddings, --labels and --pairs (id_a, id_b, semantic_sim)");
  const encoder::EmbeddingTable t = encoder::read_embeddings(f.embeddings, encoder::ids_path_for(f.embeddings));
  const auto idx = row_index(t);
  const auto labels = load_labels(f.labels);
  std::vector<eval::CorrelationPair> pairs;
  for (const auto& cols : read_tsv(f.pairs)) {
    if (cols.size() < 3) throw DataError("pairs file: need id_a, id_b and semantic_sim per line");
    eval::CorrelationPair p;
    p.pair_id = cols[0] + "|" + cols[1];
    p.style_sim = eval::cosine_similarity(t.rows.row(lookup(idx, cols[0])), t.rows.row(lookup(idx, cols[1])));
    try {
      p.semantic_sim = std::stod(cols[2]);
    } catch (const std::exception&) {
      throw DataError("pairs file: bad semantic similarity '" + cols[2] + "'");
    }
    const auto a = labels.find(cols[0]);
    const auto b = labels.find(cols[1]);
    if (a == labels.end() || b == labels.end()) throw DataError("pairs file: id without a label in " + p.pair_id);
    corpus::SentenceRecord ra{cols[0], "", a->second.author_id, "", a->second.community_id, corpus::Split::test};
    corpus::SentenceRecord rb{cols[1], "", b->second.author_id, "", b->second.community_id, corpus::Split::test};
    // Comment ids are not exported, so same-author pairs top out at 2 here.
    ra.comment_id = ra.id;
    rb.comment_id = rb.id;
    p.proximity = corpus::proximity_score(ra, rb);
    pairs.push_back(std::move(p));
  }
  const eval::CorrelationReport c = eval::correlation_report(pairs);
  write_file(out_path(f, "scatter.tsv"), c.scatter_tsv);
  eval::EvalReport r;
  r.task = "correlation";
  r.metrics["pearson_r"] = c.pearson_r;
  r.metrics["pairs"] = static_cast<double>(pairs.size());
  r.config_fingerprint = eval_fingerprint(f, "correlation");
  out << r.to_json() << '\n';
}

// ---- align ----

void cmd_align_cache(const Flags& f, std::ostream& out) {
  if (f.checkpoint.empty()) throw UsageError("align cache needs --checkpoint (a trained encoder)");
  if (f.samples.empty()) throw UsageError("align cache needs --samples");
  trainer::Checkpoint ck = trainer::load_checkpoint(f.checkpoint);
  std::vector<std::pair<std::string, std::string>> responses;
  for (const auto& s : align::load_samples(f.samples)) responses.emplace_back(s.id, s.response);
  const align::EmbeddingCache cache = align::build_embedding_cache(responses, ck.state.model.encoder);
  cache.save(out_path(f, "cache.bin"));
  out << "cached " << cache.size() << " response embeddings\n";
}

void cmd_align_sft(const Flags& f, std::ostream& out) {
  if (f.samples.empty() || f.cache.empty()) throw UsageError("align sft needs --samples and --cache");
  KeyValueConfig kv = load_config(f);
  kv.require_known({"alpha", "pooling", "learning_rate", "epochs", "batch_size", "heldout_fraction", "hidden", "n_layers",
                    "max_len"});
  align::SftConfig cfg;
  cfg.alpha = kv.get_double("alpha", cfg.alpha);
  cfg.learning_rate = kv.get_double("learning_rate", cfg.learning_rate);
  cfg.epochs = kv.get_int("epochs", cfg.epochs);
  cfg.batch_size = kv.get_int("batch_size", cfg.batch_size);
  cfg.pooling = align::align_pooling_from_string(kv.get_string("pooling", "response_mean"));
  cfg.seed = f.seed;
  align::ToyLmConfig lcfg;
  lcfg.hidden = kv.get_int("hidden", lcfg.hidden);
  lcfg.n_layers = kv.get_int("n_layers", lcfg.n_layers);
  lcfg.max_len = kv.get_int("max_len", lcfg.max_len);
  const double heldout_fraction = kv.get_double("heldout_fraction", 0.1);
  if (!(heldout_fraction > 0.0 && heldout_fraction < 1.0)) throw ConfigError("heldout_fraction must lie in (0, 1)");

  const auto samples = align::load_samples(f.samples);
  const align::EmbeddingCache cache = align::EmbeddingCache::load(f.cache);
  if (cache.size() == 0) throw DataError("embedding cache is empty");
  const auto n_held = static_cast<std::size_t>(heldout_fraction * static_cast<double>(samples.size()));
  if (n_held == 0 || n_held >= samples.size()) throw DataError("too few samples for a held-out split");
  const std::span<const align::AlignmentSample> all(samples);
  const auto train = all.subspan(0, samples.size() - n_held);
  const auto held = all.subspan(samples.size() - n_held);

  std::vector<std::string> texts;
  for (const auto& s : samples) {
    texts.push_back(s.prompt);
    texts.push_back(s.response);
  }
  Rng rng(f.seed);
  align::ToyLM lm(align::CharVocab::build(texts), lcfg, rng);
  align::ProjectionHead head(lcfg.hidden, cache.rows().cols(), rng);
  std::ostringstream log;
  const align::SftResult res = align::run_alignment_sft(lm, head, train, held, cache, cfg, &log);
  write_file(out_path(f, "sft_log.jsonl"), log.str());

  eval::EvalReport r;
  r.task = "align_sft";
  r.seed = f.seed;
  r.metrics["heldout_cosine_before"] = res.before.mean_cosine;
  r.metrics["heldout_cosine_after"] = res.after.mean_cosine;
  r.metrics["heldout_ce_before"] = res.before.cross_entropy;
  r.metrics["heldout_ce_after"] = res.after.cross_entropy;
  r.metrics["alpha"] = cfg.alpha;
  std::string cfg_text;
  for (const auto& [k, v] : kv.values()) cfg_text += k + "=" + v + "\n";
  r.config_fingerprint = fnv1a_hex(cfg_text);
  write_file(out_path(f, "sft_report.json"), r.to_json() + "\n");
  out << r.to_json() << '\n';
}

// ---- dispatch ----

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const UsageError*>(&e)) return 1;
  if (dynamic_cast<const NumericError*>(&e)) return 3;
  return 2;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"idiolex: sentence-level style embeddings from weak proximity supervision", "idiolex"};
  app.require_subcommand(1);
  Flags f;

  auto seed_opt = [&f](CLI::App* c, bool required) {
    auto* o = c->add_option("--seed", f.seed, "Seed for every random choice");
    if (required) o->required();
  };
  auto out_opt = [&f](CLI::App* c) { c->add_option("--out", f.out, "Output directory")->required(); };
  auto cfg_opt = [&f](CLI::App* c) { c->add_option("--config", f.config, "key = value configuration file")->check(CLI::ExistingFile); };

  CLI::App* synth = app.add_subcommand("synth", "Generate a synthetic corpus with ground-truth features");
  cfg_opt(synth);
  seed_opt(synth, true);
  out_opt(synth);

  CLI::App* feats = app.add_subcommand("features", "Extract binary features for every sentence");
  feats->add_option("--mode", f.mode, "rules or llm")->required()->check(CLI::IsMember({"rules", "llm"}));
  feats->add_option("--corpus", f.corpus, "Corpus JSON-lines file")->required();
  feats->add_option("--inventory", f.inventory, "Feature inventory file")->required();
  feats->add_option("--endpoint", f.endpoint, "Chat-completions base URL (llm mode)");
  feats->add_option("--model", f.model, "Model name (llm mode)");
  out_opt(feats);

  CLI::App* train = app.add_subcommand("train", "Train one stage of the style encoder");
  train->add_option("--stage", f.stage, "pretrain or feature")->required()->check(CLI::IsMember({"pretrain", "feature"}));
  train->add_option("--corpus", f.corpus, "Split-tagged corpus file")->required();
  train->add_option("--features", f.features, "Feature cache (feature stage)");
  train->add_option("--inventory", f.inventory, "Feature inventory; sizes the feature head (pretrain stage)");
  train->add_option("--checkpoint", f.checkpoint, "Checkpoint to continue from (feature stage)");
  cfg_opt(train);
  seed_opt(train, true);
  out_opt(train);

  CLI::App* embed = app.add_subcommand("embed", "Embed corpus sentences with a trained checkpoint");
  embed->add_option("--checkpoint", f.checkpoint, "Trained checkpoint")->required();
  embed->add_option("--corpus", f.corpus, "Corpus file")->required();
  embed->add_option("--split", f.split, "Split to embed, or all")->check(CLI::IsMember({"pretrain", "train", "dev", "test", "all"}));
  out_opt(embed);

  CLI::App* ev = app.add_subcommand("eval", "Evaluate exported embeddings");
  ev->require_subcommand(1);
  auto labeled = [&f](CLI::App* c) {
    c->add_option("--embeddings", f.embeddings, "embeddings.bin (ids read from the sibling .ids file)")->required();
    c->add_option("--labels", f.labels, "labels.jsonl from embed")->required();
    c->add_option("--label-key", f.label_key, "community_id or author_id");
  };
  CLI::App* sim = ev->add_subcommand("sim", "Cosine similarity for id pairs");
  sim->add_option("--embeddings", f.embeddings, "embeddings.bin")->required();
  sim->add_option("--pairs", f.pairs, "TSV of id_a, id_b")->required();
  CLI::App* classify = ev->add_subcommand("classify", "Centroid or probe classification of the test split");
  labeled(classify);
  classify->add_option("--mode", f.mode, "centroid or probe");
  classify->add_option("--corpus", f.corpus, "Corpus with texts; adds the lexical ensemble in probe mode");
  classify->add_flag("--fine-tune", f.fine_tune, "Probe mode: train the encoder along with the probe");
  classify->add_option("--checkpoint", f.checkpoint, "Encoder checkpoint for --fine-tune");
  seed_opt(classify, false);
  CLI::App* cluster = ev->add_subcommand("cluster", "k-means clustering of the test split");
  labeled(cluster);
  seed_opt(cluster, true);
  CLI::App* retrieval = ev->add_subcommand("retrieval", "3-vs-3 retrieval accuracy");
  labeled(retrieval);
  retrieval->add_option("--trials", f.trials, "Number of trials");
  seed_opt(retrieval, true);
  CLI::App* corr = ev->add_subcommand("correlation", "Style vs semantic similarity correlation");
  labeled(corr);
  corr->add_option("--pairs", f.pairs, "TSV of id_a, id_b, semantic_sim")->required();
  out_opt(corr);

  CLI::App* al = app.add_subcommand("align", "Embedding-aligned fine-tuning of a toy language model");
  al->require_subcommand(1);
  CLI::App* acache = al->add_subcommand("cache", "Precompute target embeddings for responses");
  acache->add_option("--checkpoint", f.checkpoint, "Trained encoder checkpoint")->required();
  acache->add_option("--samples", f.samples, "Samples JSON-lines (id, prompt, response)")->required();
  out_opt(acache);
  CLI::App* asft = al->add_subcommand("sft", "Fine-tune the toy LM with the alignment loss");
  asft->add_option("--samples", f.samples, "Samples JSON-lines")->required();
  asft->add_option("--cache", f.cache, "cache.bin from align cache")->required();
  cfg_opt(asft);
  seed_opt(asft, true);
  out_opt(asft);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (*synth) cmd_synth(f, out);
    else if (*feats) cmd_features(f, out);
    else if (*train) cmd_train(f, out);
    else if (*embed) cmd_embed(f, out);
    else if (*sim) eval_sim(f, out);
    else if (*classify) eval_classify(f, out);
    else if (*cluster) eval_cluster(f, out);
    else if (*retrieval) eval_retrieval(f, out);
    else if (*corr) eval_correlation(f, out);
    else if (*acache) cmd_align_cache(f, out);
    else if (*asft) cmd_align_sft(f, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
  return 0;
}

}  // namespace idiolex::cli
