#pragma once

#include "idiolex/config.h"
#include "idiolex/corpus.h"
#include "idiolex/encoder.h"
#include "idiolex/features.h"
#include "idiolex/objectives.h"
#include "idiolex/sampler.h"

#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <string>

namespace idiolex::trainer {

using objectives::Stage;

struct TrainConfig {
  double learning_rate = 1e-5;
  long warmup_steps = 0;  // 0: min(25000, 10% of the planned steps)
  long pretrain_epochs = 3;
  long feature_epochs = 10;
  long validate_every = 250;
  long patience = 25;
  long groups_per_batch = 2;
  std::uint64_t rng_seed = 1;
  long steps_per_epoch = 0;  // 0: one pass over the stage's sentences
  long dev_groups = 8;       // fixed anchor groups drawn from dev for validation
  long n_layers = 2;
  long hidden_dim = 32;
  long max_tokens = 64;
  long projection_dim = objectives::kProjectionDim;
  objectives::LossConfig loss;
};

void validate(const TrainConfig& cfg);
/// Reads TrainConfig and LossConfig field names; unknown keys are a ConfigError.
TrainConfig train_config_from(const KeyValueConfig& kv);
KeyValueConfig to_key_values(const TrainConfig& cfg);
std::string fingerprint(const TrainConfig& cfg);

/// Encoder, layer attention, running mean and both heads.
struct IdiolexModel {
  encoder::StyleEncoder encoder;
  objectives::FeatureHead feature_head;  // present when feature_count > 0
  objectives::ProjectionHead projection_head;
  std::size_t feature_count = 0;
  std::string inventory_fingerprint;

  std::vector<ag::Parameter*> parameters();
  /// Feature-head probabilities, one row per text.
  Mat predict_features(std::span<const std::string> texts);
};

struct TrainState {
  long step = 0;
  Stage stage = Stage::pretrain;
  IdiolexModel model;
  double best_dev_metric = std::numeric_limits<double>::infinity();
  long validations_since_best = 0;
};

/// Fresh model whose vocabulary covers the pretrain and train sentences.
TrainState initial_state(const corpus::CorpusSplit& corpus, const TrainConfig& cfg,
                         const features::FeatureInventory* inventory);

struct StagePlan {
  long pretrain_steps = 0;
  long feature_steps = 0;
  long warmup_steps = 1;
  long margin_warm_steps = 1;
};
StagePlan plan(const corpus::CorpusSplit& corpus, const TrainConfig& cfg);

struct TrainOptions {
  std::ostream* log = nullptr;        // JSON-lines step and validation records
  std::string failure_checkpoint;     // written with the last good state on a numeric failure
};

/// Optimizes MRL plus regularizers over the pretrain and train splits,
/// early-stopping on dev.
TrainState run_pretrain_stage(const corpus::CorpusSplit& corpus, const TrainConfig& cfg,
                              const features::FeatureInventory* inventory = nullptr,
                              const TrainOptions& opts = {});
void run_pretrain_stage(TrainState& state, const corpus::CorpusSplit& corpus, const TrainConfig& cfg,
                        const TrainOptions& opts = {});

/// Adds the feature losses and trains on the train split.
void run_feature_stage(TrainState& state, const corpus::CorpusSplit& corpus,
                       const features::FeatureCache& cache, const TrainConfig& cfg,
                       const TrainOptions& opts = {});

struct DevMetrics {
  double mrl = 0.0;
  std::optional<double> feat;        // bce_weight * bce + supcon
  std::optional<double> feature_f1;  // macro F1 of the feature head
  double metric = 0.0;               // what early stopping minimizes
};

/// The fixed dev anchor groups validate() scores, drawn from cfg.rng_seed.
std::vector<sampler::ProximityBatch> dev_groups(const corpus::CorpusSplit& dev, const TrainConfig& cfg);

/// Evaluates on fixed dev anchor groups. Does not modify the model.
DevMetrics validate(TrainState& state, const corpus::CorpusSplit& dev, const features::FeatureCache* cache,
                    const TrainConfig& cfg, Stage stage);

/// Multi-label macro F1 over features, from probabilities thresholded at 0.5.
double feature_macro_f1(const Mat& probabilities, const Mat& targets);

// ---- checkpoints ----
void save_checkpoint(const std::string& path, TrainState& state, const TrainConfig& cfg);
std::string serialize_checkpoint(TrainState& state, const TrainConfig& cfg);

struct Checkpoint {
  TrainState state;
  TrainConfig config;
};
Checkpoint parse_checkpoint(std::string_view bytes);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace idiolex::trainer
