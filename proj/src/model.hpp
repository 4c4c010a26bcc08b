#pragma once

#include <optional>
#include <string>
#include <vector>

#include "lora.hpp"
#include "numkit.hpp"

namespace fedlora {

enum class Backbone { kTinyTransformer, kMlp };

struct ModelConfig {
  Backbone backbone = Backbone::kTinyTransformer;
  int image_h = 16;
  int image_w = 16;
  int channels = 3;
  int patch = 4;  // transformer only
  int dim = 32;
  int heads = 4;
  int blocks = 1;
  int mlp_ratio = 4;
  std::vector<int> mlp_hidden = {32, 32};  // mlp backbone only
  int classes = 5;
  std::string activation = "gelu_tanh";
  // Trainable-set switches for adapter mode; ignored under full fine-tuning.
  bool train_head = true;
  bool train_layernorm = false;

  void validate() const;  // throws ConfigError
  int tokens() const { return (image_h / patch) * (image_w / patch); }
  int patch_dim() const { return patch * patch * channels; }
  int pixels() const { return image_h * image_w * channels; }
};

struct NamedTensor {
  std::string name;
  Matrix value;
};

// Named parameter tensors in a canonical order fixed at build time. The flat
// layouts used for aggregation, masking and σ all follow this order.
struct ModelParams {
  ModelConfig config;
  std::vector<NamedTensor> tensors;

  int index_of(const std::string& name) const;  // -1 when absent
  const Matrix& tensor(const std::string& name) const;
  Matrix& tensor(const std::string& name);
  size_t total_count() const;

  std::vector<double> flatten() const;
  void unflatten(const std::vector<double>& flat);
};

struct Batch {
  std::vector<double> images;  // n * H * W * C, values in [0,1]
  std::vector<int> labels;
  int n = 0;

  void validate(const ModelConfig& cfg) const;
};

struct ForwardResult {
  Matrix logits;    // n x classes
  Matrix features;  // n x feature dim (penultimate layer output)
};

// Which parameters the flat trainable layout covers. Full fine-tuning spans
// every tensor; adapter mode spans A/B factors plus the configured extras.
struct TrainableLayout {
  enum class Kind { kBase, kLoraA, kLoraB };
  struct Segment {
    Kind kind;
    int index;  // tensor index (kBase) or adapter index (kLoraA/kLoraB)
    size_t offset;
    size_t count;
  };
  std::vector<Segment> segments;
  size_t dim = 0;

  static TrainableLayout make(const ModelParams& params, const LoraAdapterSet* adapters);
  std::vector<double> gather(const ModelParams& params, const LoraAdapterSet* adapters) const;
  void scatter(const std::vector<double>& flat, ModelParams& params, LoraAdapterSet* adapters) const;
};

ModelParams build(const ModelConfig& config, RngStream rng);

// Expands an adapter target spec ("qv", "qv_mlp" for the transformer, "hidden"
// for the mlp backbone) into concrete tensor names in canonical order.
std::vector<std::string> lora_target_names(const ModelConfig& config, const std::string& targets_spec);

ForwardResult forward(const ModelParams& params, const LoraAdapterSet* adapters, const Batch& batch);

struct LossGrad {
  double loss = 0.0;
  std::vector<double> grad;  // over the trainable layout
};

LossGrad loss_and_grad(const ModelParams& params, const LoraAdapterSet* adapters, const Batch& batch,
                       const TrainableLayout& layout);

// Mean cross-entropy toward `target_label`, differentiated w.r.t. the input
// pixels. Returns one gradient image per batch sample, flattened like Batch.
std::vector<double> input_grad(const ModelParams& params, const LoraAdapterSet* adapters,
                               const Batch& batch, int target_label);

double eval_loss(const ModelParams& params, const LoraAdapterSet* adapters, const Batch& batch);
double eval_loss_toward(const ModelParams& params, const LoraAdapterSet* adapters, const Batch& batch,
                        int target_label);

// Plain minibatch SGD over the trainable layout: `epochs` passes with seeded
// shuffling. Mutates params/adapters in place.
void sgd_train(ModelParams& params, LoraAdapterSet* adapters, const TrainableLayout& layout,
               const Batch& data, int epochs, double lr, int batch_size, RngStream rng);

struct PretrainResult {
  ModelParams params;
  double val_accuracy = 0.0;
  bool floor_reached = false;
};

// Plain SGD on a pretext task; keeps the epoch snapshot with the best
// validation accuracy. Falls back to a warning (floor_reached=false) when the
// budget is too small, still returning the best parameters seen.
PretrainResult pretrain(const ModelConfig& config, const Batch& train, const Batch& val, int epochs,
                        double lr, int batch_size, double accuracy_floor, RngStream rng);

// Flat binary checkpoint: header (magic, version, config digest) then tensors
// in canonical order, 64-bit little-endian. Adapters ride along after the base
// tensors when present.
void save_checkpoint(const std::string& path, const ModelParams& params,
                     const LoraAdapterSet* adapters, uint64_t config_digest);
struct Checkpoint {
  ModelParams params;
  std::optional<LoraAdapterSet> adapters;
  uint64_t config_digest = 0;
};
Checkpoint load_checkpoint(const std::string& path, const ModelConfig& config);

}  // namespace fedlora
