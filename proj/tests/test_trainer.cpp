#include "doctest.h"
#include "support/testing.h"

#include "idiolex/optim.h"
#include "idiolex/synthcorpus.h"
#include "idiolex/trainer.h"

#include "json.hpp"

#include <fstream>
#include <sstream>

using namespace idiolex;
using namespace idiolex::trainer;
using json = nlohmann::json;

namespace {

struct Fixture {
  corpus::CorpusSplit corpus;
  features::FeatureInventory inventory;
  features::FeatureCache features;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    synth::SynthConfig cfg;
    cfg.n_communities = 5;
    cfg.authors_per_community = 20;
    cfg.community_feature_priors = synth::signature_priors(5, 16, 3, 0.6, 0.05);
    synth::SynthCorpus sc = synth::generate_corpus(cfg);
    return Fixture{corpus::split_by_author(sc.corpus, 3, 200, 1), sc.inventory, sc.ground_truth};
  }();
  return f;
}

TrainConfig small_config() {
  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.n_layers = 1;
  cfg.hidden_dim = 16;
  cfg.max_tokens = 32;
  cfg.projection_dim = 32;
  cfg.steps_per_epoch = 10;
  cfg.pretrain_epochs = 1;
  cfg.feature_epochs = 1;
  cfg.validate_every = 5;
  cfg.dev_groups = 4;
  return cfg;
}

std::vector<json> records(const std::string& log, const std::string& type) {
  std::vector<json> out;
  std::istringstream in(log);
  for (std::string line; std::getline(in, line);) {
    const json j = json::parse(line);
    if (j.at("type") == type) out.push_back(j);
  }
  return out;
}

std::vector<Mat> values(IdiolexModel& m) {
  std::vector<Mat> out;
  for (auto* p : m.parameters()) out.push_back(p->value);
  return out;
}

}  // namespace

TEST_CASE("train config parsing, validation and fingerprint") {
  const TrainConfig cfg = train_config_from(KeyValueConfig::parse("learning_rate = 0.01\nalpha = 0.2\npatience = 3\n"));
  CHECK(cfg.learning_rate == 0.01);
  CHECK(cfg.loss.alpha == 0.2);
  CHECK(cfg.patience == 3);
  CHECK(train_config_from(to_key_values(cfg)).learning_rate == 0.01);
  CHECK(fingerprint(cfg) == fingerprint(train_config_from(to_key_values(cfg))));
  CHECK(fingerprint(cfg) != fingerprint(TrainConfig{}));
  CHECK_THROWS_AS(train_config_from(KeyValueConfig::parse("learnin_rate = 0.01\n")), ConfigError);
  CHECK_THROWS_AS(train_config_from(KeyValueConfig::parse("learning_rate = 0\n")), ConfigError);
  CHECK_THROWS_AS(train_config_from(KeyValueConfig::parse("patience = 0\n")), ConfigError);
}

TEST_CASE("warmup then constant learning rate") {
  CHECK(optim::warmup_constant_lr(1e-3, 1, 10) == doctest::Approx(1e-4));
  CHECK(optim::warmup_constant_lr(1e-3, 10, 10) == doctest::Approx(1e-3));
  CHECK(optim::warmup_constant_lr(1e-3, 500, 10) == doctest::Approx(1e-3));
}

TEST_CASE("warmup defaults to a tenth of the planned steps") {
  TrainConfig cfg = small_config();
  cfg.pretrain_epochs = 30;
  cfg.feature_epochs = 20;
  const StagePlan p = plan(fixture().corpus, cfg);
  CHECK(p.pretrain_steps == 300);
  CHECK(p.feature_steps == 200);
  CHECK(p.warmup_steps == 50);
  CHECK(p.margin_warm_steps == 300);
}

TEST_CASE("zero configured steps leave the parameters at initialization") {
  TrainConfig cfg = small_config();
  cfg.pretrain_epochs = 0;
  TrainState fresh = initial_state(fixture().corpus, cfg, &fixture().inventory);
  TrainState trained = run_pretrain_stage(fixture().corpus, cfg, &fixture().inventory);
  CHECK(trained.step == 0);
  CHECK(values(trained.model) == values(fresh.model));
}

TEST_CASE("pretrain logs carry no feature losses and follow the schedules") {
  TrainConfig cfg = small_config();
  cfg.warmup_steps = 4;
  std::ostringstream log;
  TrainOptions opts;
  opts.log = &log;
  run_pretrain_stage(fixture().corpus, cfg, &fixture().inventory, opts);
  const auto steps = records(log.str(), "step");
  REQUIRE(steps.size() == 10);
  long prev = 0;
  for (const auto& s : steps) {
    const long t = s.at("step").get<long>();
    CHECK(t == prev + 1);
    prev = t;
    CHECK(s.at("stage") == "pretrain");
    CHECK(s.at("supcon").get<double>() == 0.0);
    CHECK(s.at("bce").get<double>() == 0.0);
    CHECK(s.at("lr").get<double>() == doctest::Approx(1e-3 * std::min(1.0, t / 4.0)));
    CHECK(s.at("lambda").get<double>() == doctest::Approx(0.5 * (t - 1) / 10.0));
    CHECK(s.at("layer_weight_sum").get<double>() == doctest::Approx(1.0));
    CHECK(s.at("total").get<double>() == doctest::Approx(s.at("mrl").get<double>() + s.at("var").get<double>() +
                                                         0.04 * s.at("cov").get<double>()));
  }
  CHECK(records(log.str(), "validation").size() == 2);
}

TEST_CASE("200 pretrain steps lower the dev ranking loss") {
  TrainConfig cfg = small_config();
  cfg.steps_per_epoch = 200;
  cfg.validate_every = 50;
  cfg.patience = 100;
  const Fixture& f = fixture();
  const corpus::CorpusSplit dev = f.corpus.select({corpus::Split::dev});
  TrainState st = initial_state(f.corpus, cfg, nullptr);
  const double before = validate(st, dev, nullptr, cfg, Stage::pretrain).mrl;
  run_pretrain_stage(st, f.corpus, cfg);
  const double after = validate(st, dev, nullptr, cfg, Stage::pretrain).mrl;
  MESSAGE("dev MRL " << before << " -> " << after);
  CHECK(after < before);
}

TEST_CASE("validation is deterministic and agrees with the objectives module") {
  TrainConfig cfg = small_config();
  const Fixture& f = fixture();
  const corpus::CorpusSplit dev = f.corpus.select({corpus::Split::dev});
  TrainState st = initial_state(f.corpus, cfg, &f.inventory);
  st.model.encoder.mean.mu = RowVec::Constant(16, 0.05);
  const std::vector<Mat> before = values(st.model);

  const DevMetrics a = validate(st, dev, &f.features, cfg, Stage::feature);
  const DevMetrics b = validate(st, dev, &f.features, cfg, Stage::feature);
  CHECK(a.mrl == b.mrl);
  CHECK(a.metric == b.metric);
  CHECK(a.feature_f1 == b.feature_f1);
  CHECK(values(st.model) == before);
  CHECK(st.model.encoder.mean.mu == RowVec::Constant(16, 0.05));

  double expected = 0.0;
  const auto groups = dev_groups(dev, cfg);
  for (const auto& g : groups) {
    std::vector<std::string> texts;
    for (const auto& s : g.sentences) texts.push_back(s.text);
    expected += objectives::margin_ranking_loss(st.model.encoder.embed(texts), g.proximity, cfg.loss.margin_final).value;
  }
  CHECK(a.mrl == doctest::Approx(expected / static_cast<double>(groups.size())).epsilon(1e-6));
  CHECK_THROWS_AS(validate(st, corpus::CorpusSplit{}, nullptr, cfg, Stage::pretrain), UsageError);
}

TEST_CASE("early stopping restores the best validated parameters") {
  TrainConfig cfg = small_config();
  cfg.learning_rate = 3e-2;
  cfg.steps_per_epoch = 60;
  cfg.validate_every = 2;
  cfg.patience = 2;
  const Fixture& f = fixture();
  std::ostringstream log;
  TrainOptions opts;
  opts.log = &log;
  TrainState st = run_pretrain_stage(f.corpus, cfg, nullptr, opts);
  const auto checks = records(log.str(), "validation");
  REQUIRE_FALSE(checks.empty());
  double best = std::numeric_limits<double>::infinity();
  for (const auto& v : checks) best = std::min(best, v.at("metric").get<double>());
  CHECK(st.best_dev_metric == best);
  const corpus::CorpusSplit dev = f.corpus.select({corpus::Split::dev});
  CHECK(validate(st, dev, nullptr, cfg, Stage::pretrain).metric == doctest::Approx(best).epsilon(1e-12));
  if (st.validations_since_best >= cfg.patience) CHECK(st.step < 60);
}

TEST_CASE("feature stage adds the feature losses") {
  TrainConfig cfg = small_config();
  const Fixture& f = fixture();
  TrainState st = run_pretrain_stage(f.corpus, cfg, &f.inventory);
  const long after_pretrain = st.step;
  std::ostringstream log;
  TrainOptions opts;
  opts.log = &log;
  run_feature_stage(st, f.corpus, f.features, cfg, opts);
  const auto steps = records(log.str(), "step");
  REQUIRE(steps.size() == 10);
  CHECK(steps.front().at("step").get<long>() == after_pretrain + 1);
  for (const auto& s : steps) {
    CHECK(s.at("stage") == "feature");
    CHECK(s.at("bce").get<double>() > 0.0);
    CHECK(s.at("supcon").get<double>() > 0.0);
    CHECK(s.at("lambda").get<double>() == 0.5);
  }
  for (const auto& v : records(log.str(), "validation")) CHECK(v.contains("dev_feature_f1"));
}

TEST_CASE("alpha zero reduces the feature stage to the pretrain composition") {
  TrainConfig cfg = small_config();
  cfg.loss.alpha = 0.0;
  const Fixture& f = fixture();
  TrainState st = run_pretrain_stage(f.corpus, cfg, &f.inventory);
  std::ostringstream log;
  TrainOptions opts;
  opts.log = &log;
  run_feature_stage(st, f.corpus, f.features, cfg, opts);
  for (const auto& s : records(log.str(), "step"))
    CHECK(s.at("total").get<double>() == doctest::Approx(s.at("mrl").get<double>() + s.at("var").get<double>() +
                                                         0.04 * s.at("cov").get<double>()).epsilon(1e-12));
}

TEST_CASE("feature training improves dev feature F1") {
  TrainConfig cfg = small_config();
  cfg.learning_rate = 3e-3;
  cfg.hidden_dim = 32;
  cfg.n_layers = 2;
  cfg.steps_per_epoch = 35;
  cfg.feature_epochs = 10;
  cfg.validate_every = 50;
  cfg.patience = 100;
  const Fixture& f = fixture();
  const corpus::CorpusSplit dev = f.corpus.select({corpus::Split::dev});
  TrainState st = run_pretrain_stage(f.corpus, cfg, &f.inventory);
  const double before = *validate(st, dev, &f.features, cfg, Stage::feature).feature_f1;
  run_feature_stage(st, f.corpus, f.features, cfg);
  const double after = *validate(st, dev, &f.features, cfg, Stage::feature).feature_f1;
  MESSAGE("dev feature F1 " << before << " -> " << after);
  CHECK(after > before);
}

TEST_CASE("feature stage needs features for train sentences only") {
  TrainConfig cfg = small_config();
  const Fixture& f = fixture();
  features::FeatureCache train_only(f.inventory);
  features::FeatureCache missing(f.inventory);
  std::string dropped;
  for (const auto& r : f.corpus.records()) {
    if (r.split != corpus::Split::train) continue;
    train_only.put(r.id, *f.features.find(r.id));
    if (dropped.empty()) {
      dropped = r.id;
      continue;
    }
    missing.put(r.id, *f.features.find(r.id));
  }
  TrainState st = run_pretrain_stage(f.corpus, cfg, &f.inventory);
  TrainState copy = run_pretrain_stage(f.corpus, cfg, &f.inventory);
  CHECK_NOTHROW(run_feature_stage(st, f.corpus, train_only, cfg));

  cfg.steps_per_epoch = 400;
  try {
    run_feature_stage(copy, f.corpus, missing, cfg);
    FAIL("expected a DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find(dropped) != std::string::npos);
  }

  TrainState no_head = run_pretrain_stage(f.corpus, small_config(), nullptr);
  CHECK_THROWS_AS(run_feature_stage(no_head, f.corpus, f.features, cfg), ConfigError);
}

TEST_CASE("checkpoints round-trip byte for byte") {
  TrainConfig cfg = small_config();
  const Fixture& f = fixture();
  TrainState st = run_pretrain_stage(f.corpus, cfg, &f.inventory);
  testing::TempDir dir;
  save_checkpoint(dir.file("a.bin"), st, cfg);
  Checkpoint back = load_checkpoint(dir.file("a.bin"));
  save_checkpoint(dir.file("b.bin"), back.state, back.config);
  CHECK(read_file(dir.file("a.bin")) == read_file(dir.file("b.bin")));
  CHECK(read_file(dir.file("a.bin")).rfind("IDLXCKPT", 0) == 0);
  CHECK(back.state.step == st.step);
  CHECK(back.state.model.feature_count == 16);
  CHECK(fingerprint(back.config) == fingerprint(cfg));

  const std::string bytes = read_file(dir.file("a.bin"));
  CHECK_THROWS_AS(parse_checkpoint("IDLXCKPX" + bytes.substr(8)), DataError);
  CHECK_THROWS_AS(parse_checkpoint(bytes.substr(0, bytes.size() - 3)), DataError);
}

TEST_CASE("a fixed seed reproduces the run") {
  TrainConfig cfg = small_config();
  const Fixture& f = fixture();
  auto run = [&] {
    std::ostringstream log;
    TrainOptions opts;
    opts.log = &log;
    TrainState st = run_pretrain_stage(f.corpus, cfg, &f.inventory, opts);
    run_feature_stage(st, f.corpus, f.features, cfg, opts);
    return log.str() + serialize_checkpoint(st, cfg);
  };
  CHECK(run() == run());
}
