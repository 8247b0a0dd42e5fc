#include "doctest.h"
#include "support/testing.h"

#include "idiolex/encoder.h"

#include <algorithm>
#include <fstream>

using namespace idiolex;
using namespace idiolex::encoder;
using idiolex::testing::numeric_gradient;
using idiolex::testing::relative_error;

namespace {

std::span<const bool> as_span(const std::vector<char>& v) {
  return {reinterpret_cast<const bool*>(v.data()), v.size()};
}

StyleEncoder small_encoder(std::uint64_t seed = 1) {
  const std::vector<std::string> texts = {"a b c d e", "FEAT_1 b c w1 w2", "x y z"};
  EncoderConfig cfg;
  cfg.n_layers = 2;
  cfg.hidden_dim = 8;
  cfg.max_tokens = 6;
  Rng rng(seed);
  return StyleEncoder(Vocabulary::build(texts), cfg, rng);
}

}  // namespace

TEST_CASE("vocabulary reserves the unknown id and truncates") {
  const std::vector<std::string> texts = {"b a c", "a d"};
  const Vocabulary v = Vocabulary::build(texts);
  CHECK(v.tokens() == std::vector<std::string>{"[UNK]", "a", "b", "c", "d"});
  CHECK(v.id("zzz") == Vocabulary::kUnknown);
  CHECK(v.encode("a b zzz c", 3) == std::vector<int>{1, 2, 0});
  CHECK(v.encode("   ", 3).empty());
}

TEST_CASE("encoder validation and errors") {
  EncoderConfig bad;
  bad.n_layers = 0;
  bad.vocab_size = 3;
  CHECK_THROWS_AS(validate(bad), ConfigError);
  bad.n_layers = 1;
  bad.hidden_dim = 1;
  CHECK_THROWS_AS(validate(bad), ConfigError);

  StyleEncoder enc = small_encoder();
  CHECK_THROWS_AS(enc.embed(std::string_view("   ")), DataError);
  const std::vector<int> out_of_vocab = {1, 99};
  CHECK_THROWS_AS(encode_layers(*enc.encoder, out_of_vocab), DataError);
  const std::vector<int> too_long(7, 1);
  CHECK_THROWS_AS(encode_layers(*enc.encoder, too_long), UsageError);
}

TEST_CASE("encode_layers is deterministic and sensitive to parameters") {
  StyleEncoder enc = small_encoder();
  const std::vector<int> ids = {1, 2, 3};
  const LayerStates a = encode_layers(*enc.encoder, ids);
  const LayerStates b = encode_layers(*enc.encoder, ids);
  REQUIRE(a.states.size() == 3);
  for (std::size_t l = 0; l < a.states.size(); ++l) {
    CHECK(a.states[l].rows() == 3);
    CHECK(a.states[l].cols() == 8);
    CHECK(a.states[l] == b.states[l]);
  }
  ag::Parameter* first = enc.encoder->parameters().front();
  first->value(1, 0) += 1e-3;
  const LayerStates c = encode_layers(*enc.encoder, ids);
  CHECK((c.states.back() - a.states.back()).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("layer attention pooling examples") {
  const std::vector<Mat> states = {(Mat(2, 2) << 1, 2, 3, 4).finished(), (Mat(2, 2) << 5, 6, 7, 8).finished()};
  const std::vector<char> all = {1, 1};

  SUBCASE("equal logits average the per-layer masked means") {
    const RowVec out = layer_attention_pool(states, as_span(all), RowVec::Zero(2));
    CHECK(out(0) == doctest::Approx(0.5 * (2.0 + 6.0)));
    CHECK(out(1) == doctest::Approx(0.5 * (3.0 + 7.0)));
  }
  SUBCASE("logits (0, ln 3) weight the layers 1/4 and 3/4") {
    const RowVec w = (RowVec(2) << 0.0, std::log(3.0)).finished();
    const RowVec alpha = softmax(w);
    CHECK(alpha(0) == doctest::Approx(0.25));
    CHECK(alpha(1) == doctest::Approx(0.75));
    const RowVec out = layer_attention_pool(states, as_span(all), w);
    // mean rows: layer 0 -> (2, 3), layer 1 -> (6, 7)
    CHECK(out(0) == doctest::Approx(0.25 * 2.0 + 0.75 * 6.0));
    CHECK(out(1) == doctest::Approx(0.25 * 3.0 + 0.75 * 7.0));
  }
  SUBCASE("a single layer returns its masked mean") {
    const std::vector<Mat> one = {states[1]};
    const std::vector<char> first_only = {1, 0};
    const RowVec out = layer_attention_pool(one, as_span(first_only), RowVec::Constant(1, 4.2));
    CHECK(out(0) == doctest::Approx(5.0));
    CHECK(out(1) == doctest::Approx(6.0));
  }
  SUBCASE("all tokens masked is a data error") {
    const std::vector<char> none = {0, 0};
    CHECK_THROWS_AS(layer_attention_pool(states, as_span(none), RowVec::Zero(2)), DataError);
  }
}

TEST_CASE("layer weights form a distribution for any logits") {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const RowVec w = random_normal(1, 1 + static_cast<Eigen::Index>(uniform_index(rng, 6)), 10.0, rng);
    const RowVec a = softmax(w);
    CHECK(a.minCoeff() >= 0.0);
    CHECK(std::abs(a.sum() - 1.0) < 1e-6);
  }
}

TEST_CASE("pooling is invariant to permuting unmasked tokens") {
  Rng rng(8);
  std::vector<Mat> states;
  for (int l = 0; l < 3; ++l) states.push_back(random_normal(4, 5, 1.0, rng));
  const RowVec w = random_normal(1, 3, 1.0, rng);
  const std::vector<char> mask = {1, 1, 0, 1};
  std::vector<Mat> permuted = states;
  const std::vector<char> permuted_mask = {1, 1, 0, 1};
  for (auto& s : permuted) {
    s.row(0).swap(s.row(3));
    s.row(1).swap(s.row(3));
  }
  const RowVec a = layer_attention_pool(states, as_span(mask), w);
  const RowVec b = layer_attention_pool(permuted, as_span(permuted_mask), w);
  CHECK((a - b).norm() < 1e-12);
}

TEST_CASE("pooling gradients match finite differences") {
  Rng rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    const auto n_layers = 1 + static_cast<Eigen::Index>(uniform_index(rng, 4));
    const auto t = 1 + static_cast<Eigen::Index>(uniform_index(rng, 4));
    const auto d = 1 + static_cast<Eigen::Index>(uniform_index(rng, 8));
    std::vector<Mat> states;
    for (Eigen::Index l = 0; l < n_layers; ++l) states.push_back(random_normal(t, d, 1.0, rng));
    std::vector<char> mask(static_cast<std::size_t>(t));
    for (auto& m : mask) m = uniform_real(rng) < 0.7;
    mask[0] = 1;
    const RowVec w = random_normal(1, n_layers, 1.0, rng);
    const RowVec g = random_normal(1, d, 1.0, rng);

    const PoolGradient pg = layer_attention_pool_backward(states, as_span(mask), w, g);
    const Mat num_w = numeric_gradient(
        [&](const Mat& x) { return layer_attention_pool(states, as_span(mask), RowVec(x)).dot(g); }, w);
    CHECK(relative_error(pg.logits, num_w) < 1e-4);
    for (Eigen::Index l = 0; l < n_layers; ++l) {
      const Mat num_h = numeric_gradient(
          [&](const Mat& x) {
            std::vector<Mat> s = states;
            s[static_cast<std::size_t>(l)] = x;
            return layer_attention_pool(s, as_span(mask), w).dot(g);
          },
          states[static_cast<std::size_t>(l)]);
      CHECK(relative_error(pg.states[static_cast<std::size_t>(l)], num_h) < 1e-4);
    }
  }
}

TEST_CASE("center_and_normalize examples") {
  RunningMean mean(2, 0.1);
  const StyleEmbedding e = center_and_normalize((RowVec(2) << 3.0, 4.0).finished(), mean, false);
  CHECK(e.values(0) == doctest::Approx(0.6));
  CHECK(e.values(1) == doctest::Approx(0.8));
  CHECK(mean.mu.norm() == 0.0);

  mean.mu = (RowVec(2) << 1.0, -2.0).finished();
  const StyleEmbedding zero = center_and_normalize(mean.mu, mean, false);
  CHECK(zero.norm() < 1e-6);
  CHECK(zero.values.allFinite());

  RunningMean m2(2, 0.1);
  m2.mu = (RowVec(2) << 1.0, 1.0).finished();
  const Mat batch = (Mat(3, 2) << 5.0, -3.0, 5.0, -3.0, 5.0, -3.0).finished();
  center_and_normalize_batch(batch, m2, true);
  CHECK(m2.mu(0) == doctest::Approx(1.0 + 0.1 * (5.0 - 1.0)));
  CHECK(m2.mu(1) == doctest::Approx(1.0 + 0.1 * (-3.0 - 1.0)));

  RowVec bad(2);
  bad << 1.0, std::nan("");
  CHECK_THROWS_AS(center_and_normalize(bad, m2, false), NumericError);
  CHECK_THROWS_AS(RunningMean(2, 1.0), ConfigError);
}

TEST_CASE("emitted style embeddings are unit norm") {
  StyleEncoder enc = small_encoder(3);
  enc.mean.mu = RowVec::Constant(8, 0.3);
  const std::vector<std::string> texts = {"a b c", "x y z a", "FEAT_1 w1", "unknown words only"};
  const Mat e = enc.embed(texts);
  for (Eigen::Index i = 0; i < e.rows(); ++i) CHECK(std::abs(e.row(i).norm() - 1.0) < 1e-5);
  CHECK(enc.mean.mu == RowVec::Constant(8, 0.3));
}

TEST_CASE("embedding export round trip") {
  Rng rng(2);
  const Mat rows = random_normal(3, 4, 1.0, rng);
  const std::string bytes = serialize_embeddings(rows);
  CHECK(bytes.substr(0, 4) == "IDLX");
  CHECK(bytes.size() == 4 + 1 + 4 + 4 + 3 * 4 * 4);
  const Mat back = parse_embeddings(bytes);
  CHECK((back - rows).cwiseAbs().maxCoeff() < 1e-6);
  CHECK(serialize_embeddings(back) == bytes);

  testing::TempDir dir;
  const std::vector<std::string> ids = {"s1", "s2", "s3"};
  const std::string bin = dir.file("e.bin");
  CHECK(ids_path_for(bin) == dir.file("e.ids"));
  write_embeddings(bin, ids_path_for(bin), ids, rows);
  const EmbeddingTable t = read_embeddings(bin, ids_path_for(bin));
  CHECK(t.ids == ids);
  CHECK(t.rows == back);

  CHECK_THROWS_AS(parse_embeddings("IDLY"), DataError);
  CHECK_THROWS_AS(parse_embeddings(bytes.substr(0, bytes.size() - 1)), DataError);
  write_file(ids_path_for(bin), "s1\ns2\n");
  CHECK_THROWS_AS(read_embeddings(bin, ids_path_for(bin)), DataError);
}
