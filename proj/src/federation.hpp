#pragma once

#include <optional>
#include <string>
#include <vector>

#include "attacks.hpp"
#include "data.hpp"
#include "lora.hpp"
#include "model.hpp"

namespace fedlora {

struct FederationConfig {
  int clients = 20;
  int sample_per_round = 5;
  long rounds = 300;
  int local_epochs = 2;
  double local_lr = 0.01;
  int batch_size = 16;
  double server_lr = 1.0;
  double clip_tau = 1.0;
  std::vector<int> attacker_ids = {0, 1};
  long window_start = 0;
  long window_end = 30;  // half-open [start, end)
  double partition_alpha = 0.9;
  double partition_lo = 0.005;  // client share bounds of the global dataset
  double partition_hi = 0.15;

  void validate() const;  // throws ConfigError
};

struct LoraSettings {
  bool enabled = true;
  int rank = 2;
  std::string targets = "qv";  // qv | qv_mlp | hidden
  std::string init = "pissa";  // pissa | standard

  void validate() const;
};

struct PretrainSettings {
  int epochs = 12;
  double lr = 0.05;
  int batch_size = 32;
  double accuracy_floor = 0.90;
  int per_class = 150;      // pretext training samples per class
  int val_per_class = 40;   // pretext validation samples per class

  void validate() const;
};

struct TriggerSettings {
  int row = 0, col = 0;
  int height = 5, width = 5;
  std::vector<double> color = {1.0, 0.0, 0.0};  // solid fill; A3FL starts grey
  int target = 2;
};

struct EvalSettings {
  int dense_until = 60;  // evaluate every round before this
  int period = 5;        // cadence afterwards
  int sigma_period = 10;
  int sigma_lag = 50;

  void validate() const;
};

struct ExperimentConfig {
  std::string name = "experiment";
  ModelConfig model;
  SynthConfig synth;        // synth.per_class = train samples per class
  int test_per_class = 100;
  PretrainSettings pretrain;
  LoraSettings lora;
  TriggerSettings trigger;
  AttackParams attack;
  FederationConfig fed;
  ResetSchedule reset;
  EvalSettings eval;
  // When set, the pretrained backbone is cached here keyed by a content
  // digest, so runs sharing (model, synth, pretrain, seed) skip pretraining.
  std::string pretrain_cache_dir;

  void validate() const;
  TriggerSpec build_trigger() const;
};

struct RoundRecord {
  long round = 0;
  std::vector<int> selected;  // sorted client ids
  int attackers_selected = 0;
  std::optional<double> acc;
  std::optional<double> asr;
  std::optional<double> sigma;
  double wall_seconds = 0.0;
};

struct ExperimentResult {
  std::vector<RoundRecord> records;
  ModelParams final_params;
  std::optional<LoraAdapterSet> final_adapters;
  TriggerSpec final_trigger;
  double pretrain_accuracy = 0.0;
  bool pretrain_floor_reached = false;
  size_t trainable_dim = 0;
};

// Uniform sample without replacement of `sample_per_round` client ids,
// returned sorted.
std::vector<int> select_clients(long round, const FederationConfig& cfg, const RngStream& root);

// One benign client's round: copy the snapshot, run local SGD, return the
// trainable-layout difference.
std::vector<double> local_train(const ModelParams& global, const LoraAdapterSet* adapters,
                                const TrainableLayout& layout, const Dataset& local, int epochs,
                                double lr, int batch_size, RngStream rng);

// Norm clipping: delta * min(1, tau/||delta||2).
std::vector<double> clip_update(std::vector<double> delta, double tau);

// theta + (server_lr/updates.size()) * sum(updates), compensated summation in
// the given (sorted) order.
std::vector<double> aggregate(const std::vector<double>& theta,
                              const std::vector<std::vector<double>>& updates, double server_lr);

// Population standard deviation of theta_t - theta_lag.
double update_sigma(const std::vector<double>& theta_t, const std::vector<double>& theta_lag);

// Full experiment: synth data, pretrain, adapter init, T federated rounds
// with attacks/defenses, periodic evaluation. Deterministic for (cfg, seed)
// and any worker count.
ExperimentResult run_experiment(const ExperimentConfig& cfg, uint64_t seed, int workers = 1);

// Round telemetry with the documented header; empty fields for skipped
// evaluations, selected ids semicolon-joined.
void write_telemetry_csv(const std::string& path, const std::vector<RoundRecord>& records);
std::vector<RoundRecord> read_telemetry_csv(const std::string& path);

}  // namespace fedlora
