#include "doctest.h"
#include "support/testing.h"

#include "idiolex/cli.h"
#include "idiolex/features.h"

#include "httplib.h"
#include "json.hpp"

#include <cstdlib>
#include <sstream>
#include <thread>

using namespace idiolex;
using idiolex::testing::TempDir;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

const char* kSynthConfig =
    "n_communities = 3\n"
    "authors_per_community = 8\n"
    "comments_per_author = 3\n"
    "sentences_per_comment = 3\n"
    "heldout_per_dialect = 2\n"
    "align_samples = 60\n";

const char* kTrainConfig =
    "learning_rate = 0.003\n"
    "pretrain_epochs = 1\n"
    "feature_epochs = 1\n"
    "steps_per_epoch = 4\n"
    "validate_every = 2\n"
    "dev_groups = 2\n"
    "n_layers = 1\n"
    "hidden_dim = 8\n"
    "max_tokens = 24\n"
    "projection_dim = 8\n";

/// synth, features, both training stages and embed into `dir`.
void build_pipeline(const TempDir& dir) {
  write_file(dir.file("synth.cfg"), kSynthConfig);
  write_file(dir.file("train.cfg"), kTrainConfig);
  REQUIRE(run({"synth", "--config", dir.file("synth.cfg"), "--seed", "1", "--out", dir.file("data")}).code == 0);
  REQUIRE(run({"features", "--mode", "rules", "--corpus", dir.file("data/corpus.jsonl"), "--inventory",
               dir.file("data/inventory.txt"), "--out", dir.file("rules")})
              .code == 0);
  REQUIRE(run({"train", "--stage", "pretrain", "--corpus", dir.file("data/corpus.jsonl"), "--inventory",
               dir.file("data/inventory.txt"), "--config", dir.file("train.cfg"), "--seed", "3", "--out",
               dir.file("pre")})
              .code == 0);
  REQUIRE(run({"train", "--stage", "feature", "--corpus", dir.file("data/corpus.jsonl"), "--features",
               dir.file("data/features.jsonl"), "--checkpoint", dir.file("pre/checkpoint.bin"), "--config",
               dir.file("train.cfg"), "--seed", "3", "--out", dir.file("feat")})
              .code == 0);
  REQUIRE(run({"embed", "--checkpoint", dir.file("feat/checkpoint.bin"), "--corpus", dir.file("data/corpus.jsonl"),
               "--split", "all", "--out", dir.file("emb")})
              .code == 0);
}

}  // namespace

TEST_CASE("unknown commands and flags are usage errors") {
  const Run r = run({"frobnicate"});
  CHECK(r.code == 1);
  CHECK(r.err.find("synth") != std::string::npos);
  CHECK(run({"synth", "--seed", "1", "--out", "x", "--bogus"}).code == 1);
  CHECK(run({}).code == 1);
  CHECK(run({"synth", "--out", "x"}).code == 1);
  CHECK(run({"eval"}).code == 1);
}

TEST_CASE("every command documents its flags") {
  const std::vector<std::vector<std::string>> commands = {
      {"synth"}, {"features"}, {"train"}, {"embed"}, {"eval"}, {"eval", "sim"}, {"eval", "classify"},
      {"eval", "cluster"}, {"eval", "retrieval"}, {"eval", "correlation"}, {"align"}, {"align", "cache"},
      {"align", "sft"}};
  for (auto args : commands) {
    args.push_back("--help");
    const Run r = run(args);
    CAPTURE(args.front());
    CHECK(r.code == 0);
    CHECK(r.out.find("--") != std::string::npos);
  }
  CHECK(run({"synth", "--help"}).out.find("--seed") != std::string::npos);
  CHECK(run({"eval", "retrieval", "--help"}).out.find("--trials") != std::string::npos);
  CHECK(run({"--help"}).code == 0);
}

TEST_CASE("synth is byte-identical across runs") {
  TempDir dir;
  write_file(dir.file("c.cfg"), kSynthConfig);
  for (const char* d : {"a", "b"})
    REQUIRE(run({"synth", "--config", dir.file("c.cfg"), "--seed", "1", "--out", dir.file(d)}).code == 0);
  for (const char* f : {"corpus.jsonl", "features.jsonl", "inventory.txt", "align_samples.jsonl"})
    CHECK(read_file(dir.file(std::string("a/") + f)) == read_file(dir.file(std::string("b/") + f)));

  REQUIRE(run({"synth", "--config", dir.file("c.cfg"), "--seed", "2", "--out", dir.file("c")}).code == 0);
  CHECK(read_file(dir.file("a/corpus.jsonl")) != read_file(dir.file("c/corpus.jsonl")));
}

TEST_CASE("bad configuration is a data/config error") {
  TempDir dir;
  write_file(dir.file("c.cfg"), "n_communities = -2\n");
  CHECK(run({"synth", "--config", dir.file("c.cfg"), "--seed", "1", "--out", dir.file("o")}).code == 2);
  write_file(dir.file("u.cfg"), "no_such_key = 1\n");
  CHECK(run({"synth", "--config", dir.file("u.cfg"), "--seed", "1", "--out", dir.file("o")}).code == 2);
  CHECK(run({"embed", "--checkpoint", dir.file("missing.bin"), "--corpus", dir.file("missing.jsonl"), "--out",
             dir.file("o")})
            .code == 2);
}

TEST_CASE("pipeline end to end") {
  TempDir dir;
  build_pipeline(dir);
  const std::string corpus_before = read_file(dir.file("data/corpus.jsonl"));

  const Run r = run({"eval", "retrieval", "--embeddings", dir.file("emb/embeddings.bin"), "--labels",
                     dir.file("emb/labels.jsonl"), "--trials", "1000", "--seed", "7"});
  REQUIRE(r.code == 0);
  const auto report = nlohmann::json::parse(r.out);
  CHECK(report.at("task") == "retrieval");
  const double acc = report.at("metrics").at("accuracy_star").get<double>();
  CHECK(acc >= 0.0);
  CHECK(acc <= 1.0);
  CHECK(run({"eval", "retrieval", "--embeddings", dir.file("emb/embeddings.bin"), "--labels",
             dir.file("emb/labels.jsonl"), "--trials", "1000", "--seed", "7"})
            .out == r.out);

  const Run cls = run({"eval", "classify", "--embeddings", dir.file("emb/embeddings.bin"), "--labels",
                       dir.file("emb/labels.jsonl")});
  REQUIRE(cls.code == 0);
  CHECK(nlohmann::json::parse(cls.out).at("metrics").contains("accuracy"));

  const Run probe = run({"eval", "classify", "--mode", "probe", "--embeddings", dir.file("emb/embeddings.bin"),
                         "--labels", dir.file("emb/labels.jsonl"), "--corpus", dir.file("data/corpus.jsonl"),
                         "--seed", "2"});
  REQUIRE(probe.code == 0);
  CHECK(nlohmann::json::parse(probe.out).at("metrics").contains("omega"));

  const std::vector<std::string> tuned = {"eval", "classify", "--mode", "probe", "--fine-tune", "--embeddings",
                                          dir.file("emb/embeddings.bin"), "--labels", dir.file("emb/labels.jsonl"),
                                          "--corpus", dir.file("data/corpus.jsonl"), "--checkpoint",
                                          dir.file("feat/checkpoint.bin"), "--seed", "2"};
  const Run fine = run(tuned);
  REQUIRE(fine.code == 0);
  CHECK(nlohmann::json::parse(fine.out).at("config_fingerprint") !=
        nlohmann::json::parse(probe.out).at("config_fingerprint"));
  CHECK(run(tuned).out == fine.out);
  CHECK(run({"eval", "classify", "--mode", "probe", "--fine-tune", "--embeddings", dir.file("emb/embeddings.bin"),
             "--labels", dir.file("emb/labels.jsonl"), "--seed", "2"})
            .code == 1);

  CHECK(run({"eval", "cluster", "--embeddings", dir.file("emb/embeddings.bin"), "--labels",
             dir.file("emb/labels.jsonl"), "--seed", "4"})
            .code == 0);

  // Pair up the first few exported ids.
  std::istringstream ids(read_file(dir.file("emb/embeddings.ids")));
  std::vector<std::string> id;
  for (std::string line; std::getline(ids, line) && id.size() < 6;) id.push_back(line);
  REQUIRE(id.size() == 6);
  write_file(dir.file("pairs.tsv"), id[0] + "\t" + id[1] + "\t0.5\n" + id[2] + "\t" + id[3] + "\t0.1\n" + id[4] +
                                        "\t" + id[5] + "\t0.9\n");
  const Run sim = run({"eval", "sim", "--embeddings", dir.file("emb/embeddings.bin"), "--pairs", dir.file("pairs.tsv")});
  REQUIRE(sim.code == 0);
  CHECK(nlohmann::json::parse(sim.out).at("predictions").size() == 3);
  CHECK(run({"eval", "correlation", "--embeddings", dir.file("emb/embeddings.bin"), "--labels",
             dir.file("emb/labels.jsonl"), "--pairs", dir.file("pairs.tsv"), "--out", dir.file("corr")})
            .code == 0);
  CHECK(read_file(dir.file("corr/scatter.tsv")).find('\t') != std::string::npos);

  write_file(dir.file("bad_pairs.tsv"), id[0] + "\tnope\n");
  CHECK(run({"eval", "sim", "--embeddings", dir.file("emb/embeddings.bin"), "--pairs", dir.file("bad_pairs.tsv")})
            .code == 2);

  CHECK(read_file(dir.file("data/corpus.jsonl")) == corpus_before);
}

TEST_CASE("training, embedding and alignment repeat byte for byte") {
  TempDir a, b;
  build_pipeline(a);
  build_pipeline(b);
  for (const char* f : {"rules/features.jsonl", "pre/checkpoint.bin", "pre/train_log.jsonl", "feat/checkpoint.bin",
                        "feat/train_log.jsonl", "emb/embeddings.bin", "emb/embeddings.ids", "emb/labels.jsonl"}) {
    CAPTURE(f);
    CHECK(read_file(a.file(f)) == read_file(b.file(f)));
  }

  write_file(a.file("sft.cfg"), "epochs = 1\nhidden = 8\nn_layers = 1\nmax_len = 96\nbatch_size = 8\n");
  std::vector<std::string> reports;
  for (const char* out : {"sft1", "sft2"}) {
    REQUIRE(run({"align", "cache", "--checkpoint", a.file("feat/checkpoint.bin"), "--samples",
                 a.file("data/align_samples.jsonl"), "--out", a.file(std::string(out) + "_cache")})
                .code == 0);
    const Run r = run({"align", "sft", "--samples", a.file("data/align_samples.jsonl"), "--cache",
                       a.file(std::string(out) + "_cache/cache.bin"), "--config", a.file("sft.cfg"), "--seed", "5",
                       "--out", a.file(out)});
    REQUIRE(r.code == 0);
    reports.push_back(read_file(a.file(std::string(out) + "/sft_report.json")));
  }
  CHECK(reports[0] == reports[1]);
  CHECK(read_file(a.file("sft1_cache/cache.bin")) == read_file(a.file("sft2_cache/cache.bin")));
  CHECK(read_file(a.file("sft1/sft_log.jsonl")) == read_file(a.file("sft2/sft_log.jsonl")));
}

TEST_CASE("feature stage without a checkpoint is a usage error") {
  TempDir dir;
  write_file(dir.file("c.cfg"), kSynthConfig);
  REQUIRE(run({"synth", "--config", dir.file("c.cfg"), "--seed", "1", "--out", dir.file("d")}).code == 0);
  CHECK(run({"train", "--stage", "feature", "--corpus", dir.file("d/corpus.jsonl"), "--seed", "1", "--out",
             dir.file("o")})
            .code == 1);
}

TEST_CASE("llm feature extraction talks to a chat-completions endpoint") {
  TempDir dir;
  write_file(dir.file("c.cfg"), kSynthConfig);
  REQUIRE(run({"synth", "--config", dir.file("c.cfg"), "--seed", "1", "--out", dir.file("d")}).code == 0);
  const features::FeatureInventory inv = features::FeatureInventory::load(dir.file("d/inventory.txt"));

  ::unsetenv("IDIOLEX_API_KEY");
  const std::vector<std::string> args = {"features", "--mode", "llm", "--corpus", dir.file("d/corpus.jsonl"),
                                         "--inventory", dir.file("d/inventory.txt"), "--out", dir.file("llm")};
  CHECK(run(args).code == 2);

  // Answers every request with the even-indexed features switched on.
  httplib::Server server;
  std::atomic<int> authorized{0}, requests{0};
  server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    ++requests;
    if (req.get_header_value("Authorization") == "Bearer test-key") ++authorized;
    const auto body = nlohmann::json::parse(req.body);
    const std::string prompt = body.at("messages").at(0).at("content").get<std::string>();
    nlohmann::json feats;
    for (std::size_t i = 0; i < inv.size(); ++i) feats[inv.names()[i]] = (i % 2 == 0) ? 1 : 0;
    nlohmann::json reply;
    reply["choices"] = nlohmann::json::array(
        {{{"message", {{"role", "assistant"}, {"content", nlohmann::json{{"features", feats}}.dump()}}}}});
    res.set_content(reply.dump(), "application/json");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread serving([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  ::setenv("IDIOLEX_API_KEY", "test-key", 1);
  std::vector<std::string> with_endpoint = args;
  with_endpoint.insert(with_endpoint.end(), {"--endpoint", "http://127.0.0.1:" + std::to_string(port)});
  const Run r = run(with_endpoint);
  ::unsetenv("IDIOLEX_API_KEY");
  server.stop();
  serving.join();

  REQUIRE(r.code == 0);
  CHECK(requests.load() > 0);
  CHECK(authorized.load() == requests.load());
  const features::FeatureCache cache = features::FeatureCache::load(dir.file("llm/features.jsonl"));
  CHECK(cache.size() == static_cast<std::size_t>(requests.load()));
  const std::string text = read_file(dir.file("llm/features.jsonl"));
  CHECK(text.find("\"llm\"") != std::string::npos);
}
