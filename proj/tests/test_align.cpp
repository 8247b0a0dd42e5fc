#include "doctest.h"
#include "support/oracles.h"

#include "idiolex/align.h"

#include <sstream>

using namespace idiolex;
using namespace idiolex::align;
using namespace idiolex::testing;

namespace {

std::span<const bool> as_span(const std::vector<char>& v) {
  return {reinterpret_cast<const bool*>(v.data()), v.size()};
}

/// A head whose output is exactly `target` direction: hidden = identity on
/// a positive input, out maps it onto `target`.
ProjectionHead pointing_head(const RowVec& target) {
  Rng rng(1);
  ProjectionHead head(2, target.size(), rng);
  head.hidden.weight.value = Mat::Identity(2, 2);
  head.hidden.bias.value = RowVec::Zero(2);
  head.out.weight.value = Mat::Zero(2, target.size());
  head.out.weight.value.row(0) = target;
  head.out.bias.value = RowVec::Zero(target.size());
  return head;
}

/// False when every hidden ReLU is off, so the head output is zero.
bool has_active_unit(const ProjectionHead& head, const RowVec& x) {
  return ((x * head.hidden.weight.value + head.hidden.bias.value).array() > 0.0).any();
}

std::vector<AlignmentSample> toy_samples(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<AlignmentSample> out;
  const std::vector<std::string> styles = {"aaa bab", "xyx yyx", "mno nom"};
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t s = uniform_index(rng, styles.size());
    out.push_back({"s" + std::to_string(i), "q" + std::to_string(uniform_index(rng, 10)), styles[s]});
  }
  return out;
}

/// Targets: one fixed unit vector per response text.
EmbeddingCache toy_cache(const std::vector<AlignmentSample>& samples, Eigen::Index d) {
  std::map<std::string, RowVec> by_text;
  Rng rng(99);
  std::vector<std::string> ids;
  Mat rows(static_cast<Eigen::Index>(samples.size()), d);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    auto it = by_text.find(samples[i].response);
    if (it == by_text.end()) it = by_text.emplace(samples[i].response, random_unit_rows(1, d, rng)).first;
    rows.row(static_cast<Eigen::Index>(i)) = it->second;
    ids.push_back(samples[i].id);
  }
  return EmbeddingCache(ids, rows);
}

struct ToySetup {
  std::vector<AlignmentSample> train, heldout;
  EmbeddingCache cache;
  ToyLM lm;
  ProjectionHead head;
};

ToySetup toy_setup(std::uint64_t seed) {
  ToySetup s;
  auto all = toy_samples(60, 3);
  s.train.assign(all.begin(), all.begin() + 48);
  s.heldout.assign(all.begin() + 48, all.end());
  s.cache = toy_cache(all, 4);
  std::vector<std::string> texts;
  for (const auto& a : all) {
    texts.push_back(a.prompt);
    texts.push_back(a.response);
  }
  ToyLmConfig cfg;
  cfg.hidden = 16;
  cfg.n_layers = 1;
  cfg.max_len = 32;
  Rng rng(seed);
  s.lm = ToyLM(CharVocab::build(texts), cfg, rng);
  s.head = ProjectionHead(16, 4, rng);
  return s;
}

}  // namespace

TEST_CASE("character vocabulary and SFT sequences") {
  const std::vector<std::string> texts = {"hola", "ñu"};
  const CharVocab v = CharVocab::build(texts);
  CHECK(v.symbols().front() == "[BOS]");
  CHECK(v.size() == 4 + 6);
  CHECK(v.encode("ñ?").back() == CharVocab::kUnk);

  const SftSequence s = make_sequence(v, "ho", "la", 16);
  CHECK(s.ids.size() == 1 + 2 + 1 + 2 + 1);
  CHECK(s.response_start == 4);
  CHECK(s.ids[3] == CharVocab::kSep);
  CHECK(s.response_mask() == std::vector<bool>{false, false, false, false, true, true, false});
  CHECK_THROWS_AS(make_sequence(v, "ho", "", 16), DataError);
  CHECK_THROWS_AS(make_sequence(v, "hola", "hola", 8), DataError);
}

TEST_CASE("pooled response state") {
  const Mat h = (Mat(4, 2) << 100, 100, 1, 2, 3, 4, 5, 9).finished();
  const std::vector<char> three = {0, 1, 1, 1};
  const RowVec mean = pooled_response_state(h, as_span(three));
  CHECK(mean(0) == doctest::Approx(3.0));
  CHECK(mean(1) == doctest::Approx(5.0));

  const std::vector<char> one = {0, 0, 1, 0};
  CHECK(pooled_response_state(h, as_span(one)) == h.row(2));

  Mat perturbed = h;
  perturbed.row(0) *= -7.0;
  CHECK(pooled_response_state(perturbed, as_span(three)) == mean);

  const std::vector<char> none = {0, 0, 0, 0};
  CHECK_THROWS_AS(pooled_response_state(h, as_span(none)), DataError);
}

TEST_CASE("alignment loss examples") {
  const RowVec e = (RowVec(3) << 0.0, 0.6, 0.8).finished();
  const RowVec h = (RowVec(2) << 1.0, 0.0).finished();
  CHECK(alignment_loss(h, e, pointing_head(e)) == doctest::Approx(0.0));
  CHECK(alignment_loss(h, e, pointing_head(-e)) == doctest::Approx(2.0));
  CHECK(alignment_loss(h, e, pointing_head((RowVec(3) << 1, 0, 0).finished())) == doctest::Approx(1.0));
  CHECK_THROWS_AS(alignment_loss(RowVec::Zero(2), e, pointing_head(e)), NumericError);

  Rng rng(4);
  for (int t = 0; t < 100; ++t) {
    ProjectionHead head(5, 3, rng);
    const RowVec x = random_normal(1, 5, 1.0, rng);
    if (!has_active_unit(head, x)) continue;
    const double l = alignment_loss(x, random_unit_rows(1, 3, rng), head);
    CHECK(l >= 0.0);
    CHECK(l <= 2.0);
  }
}

TEST_CASE("projection head output is unit norm") {
  Rng rng(5);
  ProjectionHead head(6, 4, rng);
  for (int t = 0; t < 50; ++t) {
    const RowVec x = random_normal(1, 6, 1.0, rng);
    if (has_active_unit(head, x)) CHECK(std::abs(head.apply(x).norm() - 1.0) < 1e-5);
  }
}

TEST_CASE("alignment loss gradients match finite differences") {
  Rng rng(6);
  CHECK(alignment_gradient_check(50, rng) < 1e-4);
}

TEST_CASE("tape alignment loss agrees with the hand-derived gradient") {
  Rng rng(7);
  ProjectionHead head(5, 3, rng);
  const RowVec e = random_unit_rows(1, 3, rng);
  ag::Parameter h("h", random_normal(1, 5, 1.0, rng));
  ag::Tape tape;
  ag::Binder bind(tape);
  std::vector<ag::Parameter*> params;
  head.collect(params);
  for (auto* p : params) p->zero_grad();
  const ag::Var loss = alignment_loss(bind, bind(h), e, head);
  tape.backward(loss);
  const AlignmentGradient g = alignment_loss_grad(h.value, e, head);
  CHECK(loss.scalar() == doctest::Approx(g.loss));
  CHECK(relative_error(h.grad, g.h_bar) < 1e-10);
  CHECK(relative_error(head.hidden.weight.grad, g.hidden_w) < 1e-10);
  CHECK(relative_error(head.out.bias.grad, g.out_b) < 1e-10);
}

TEST_CASE("combined SFT loss") {
  CHECK(combined_sft_loss(2.0, 1.0, 0.5) == 2.5);
  CHECK(combined_sft_loss(2.0, 1.7, 0.0) == 2.0);
  CHECK(SftConfig{}.alpha == 0.5);
  CHECK_THROWS_AS(combined_sft_loss(1.0, 1.0, -0.1), UsageError);
  CHECK(combined_sft_loss(2.0, 1.2, 0.5) >= combined_sft_loss(1.9, 1.2, 0.5));
  CHECK(combined_sft_loss(2.0, 1.2, 0.5) >= combined_sft_loss(2.0, 1.1, 0.5));
}

TEST_CASE("sample files round trip") {
  const auto samples = toy_samples(5, 1);
  const auto back = parse_samples_jsonl(samples_to_jsonl(samples));
  REQUIRE(back.size() == 5);
  CHECK(back[3].id == samples[3].id);
  CHECK(back[3].response == samples[3].response);
  CHECK_THROWS_AS(parse_samples_jsonl("{\"id\": \"a\"}\n"), DataError);
}

TEST_CASE("embedding cache") {
  Rng rng(8);
  const Mat rows = random_unit_rows(3, 4, rng);
  const EmbeddingCache cache({"a", "b", "c"}, rows);
  testing::TempDir dir;
  cache.save(dir.file("cache.bin"));
  const EmbeddingCache back = EmbeddingCache::load(dir.file("cache.bin"));
  CHECK(back.ids() == cache.ids());
  // Stored as 32-bit floats: a second round trip is exact.
  back.save(dir.file("again.bin"));
  CHECK(EmbeddingCache::load(dir.file("again.bin")).rows() == back.rows());
  CHECK(read_file(dir.file("again.bin")) == read_file(dir.file("cache.bin")));
  CHECK((*back.find("b") - rows.row(1)).cwiseAbs().maxCoeff() < 1e-6);
  CHECK(back.find("zzz") == nullptr);

  const EmbeddingCache empty;
  empty.save(dir.file("empty.bin"));
  CHECK(read_file(dir.file("empty.bin")).rfind("IDLX", 0) == 0);
  CHECK(EmbeddingCache::load(dir.file("empty.bin")).size() == 0);

  CHECK_THROWS_AS(EmbeddingCache({"a", "a"}, random_unit_rows(2, 4, rng)), DataError);
}

TEST_CASE("cache entries equal direct encoding") {
  const std::vector<std::string> texts = {"a b c d e", "b c d", "e a"};
  encoder::EncoderConfig cfg;
  cfg.n_layers = 2;
  cfg.hidden_dim = 8;
  Rng rng(9);
  encoder::StyleEncoder enc(encoder::Vocabulary::build(texts), cfg, rng);
  const std::vector<std::pair<std::string, std::string>> responses = {{"r1", texts[0]}, {"r2", texts[2]}};
  const EmbeddingCache cache = build_embedding_cache(responses, enc);
  // Entries are held at 32-bit precision.
  CHECK(*cache.find("r1") == RowVec(enc.embed(std::string_view(texts[0])).values.cast<float>().cast<double>()));
  CHECK(*cache.find("r2") == RowVec(enc.embed(std::string_view(texts[2])).values.cast<float>().cast<double>()));
  CHECK(build_embedding_cache({}, enc).size() == 0);

  encoder::StyleEncoder no_model;
  CHECK_THROWS_AS(build_embedding_cache(responses, no_model), UsageError);
}

TEST_CASE("pooling mode names") {
  CHECK(align_pooling_from_string("per_position") == AlignPooling::per_position);
  CHECK(to_string(AlignPooling::response_mean) == "response_mean");
  CHECK_THROWS_AS(align_pooling_from_string("mean"), ConfigError);
}

TEST_CASE("alignment SFT raises held-out cosine and is reproducible") {
  SftConfig cfg;
  cfg.learning_rate = 3e-3;
  cfg.epochs = 4;
  cfg.batch_size = 8;
  auto run = [&] {
    ToySetup s = toy_setup(11);
    std::ostringstream log;
    const SftResult r = run_alignment_sft(s.lm, s.head, s.train, s.heldout, s.cache, cfg, &log);
    return std::make_pair(r, log.str());
  };
  const auto [a, log_a] = run();
  const auto [b, log_b] = run();
  MESSAGE("held-out cosine " << a.before.mean_cosine << " -> " << a.after.mean_cosine);
  CHECK(a.after.mean_cosine > a.before.mean_cosine);
  CHECK(a.steps.size() == 4 * 6);
  CHECK(log_a == log_b);
  CHECK(a.after.mean_cosine == b.after.mean_cosine);
  for (const auto& st : a.steps) CHECK(st.total == doctest::Approx(st.ce + 0.5 * st.align));
}

TEST_CASE("alpha zero logs the alignment term but never trains the head") {
  SftConfig cfg;
  cfg.alpha = 0.0;
  cfg.epochs = 1;
  cfg.batch_size = 8;
  ToySetup s = toy_setup(12);
  const Mat head_before = s.head.out.weight.value;
  const SftResult r = run_alignment_sft(s.lm, s.head, s.train, s.heldout, s.cache, cfg);
  for (const auto& st : r.steps) {
    CHECK(st.align > 0.0);
    CHECK(st.total == st.ce);
  }
  CHECK(s.head.out.weight.value == head_before);
}

TEST_CASE("per-position pooling trains too") {
  SftConfig cfg;
  cfg.pooling = AlignPooling::per_position;
  cfg.learning_rate = 3e-3;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  ToySetup s = toy_setup(13);
  const SftResult r = run_alignment_sft(s.lm, s.head, s.train, s.heldout, s.cache, cfg);
  CHECK(r.after.mean_cosine > r.before.mean_cosine);
}

TEST_CASE("a cache miss names the sample") {
  ToySetup s = toy_setup(14);
  std::vector<AlignmentSample> train = s.train;
  train[2].id = "missing_id";
  try {
    run_alignment_sft(s.lm, s.head, train, s.heldout, s.cache, SftConfig{});
    FAIL("expected a DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("missing_id") != std::string::npos);
  }
}
