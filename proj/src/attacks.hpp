#pragma once

#include <array>
#include <string>
#include <vector>

#include "data.hpp"
#include "model.hpp"
#include "numkit.hpp"

namespace fedlora {

enum class AttackId { kNone, kBaseline, kDba, kNeurotoxin, kA3fl };

AttackId attack_id_from_string(const std::string& s);  // throws ConfigError
std::string to_string(AttackId id);

struct AttackParams {
  AttackId kind = AttackId::kNone;
  double poison_ratio = 0.25;     // share of the local dataset poisoned
  double mask_share = 0.05;       // neurotoxin top-p%
  double a3fl_alpha = 0.5;        // adversarial loss weight
  int a3fl_trigger_steps = 20;    // trigger descent steps per refresh
  double a3fl_trigger_lr = 0.1;
  int a3fl_adv_steps = 10;        // adversarial-model SGD steps per refresh
  double a3fl_adv_lr = 0.01;

  void validate() const;  // throws ConfigError
};

struct NeurotoxinMask {
  std::vector<uint8_t> masked;  // over the trainable flat layout
  size_t count = 0;
};

// Marks the ceil(p*dim) coordinates where |theta_t - theta_prev| is largest;
// ties broken toward the lower index. The attacker then avoids exactly those
// coordinates.
NeurotoxinMask neurotoxin_mask(const std::vector<double>& theta_t, const std::vector<double>& theta_prev,
                               double p_mask);

// Zeroes the masked coordinates of the update, leaving the rest unchanged.
std::vector<double> mask_update(const std::vector<double>& delta, const NeurotoxinMask& m);

// Uniform seeded choice among the four quadrants, independent per
// (attacker, round).
const TriggerSpec& dba_round_trigger(int attacker_ordinal, long round, RngStream rng,
                                     const std::array<TriggerSpec, 4>& quadrants);

// Gradient descent on the patch pixels of the combined loss
// L(x+trigger, y*; theta) + alpha * L(x+trigger, y*; theta_adv), pixels
// clamped to [0,1]. A halving line search (max 5) keeps the combined loss
// non-increasing; a step that still increases it is rejected.
TriggerSpec a3fl_optimize(const TriggerSpec& t, const ModelParams& theta, const LoraAdapterSet* adapters,
                          const ModelParams& theta_adv, const LoraAdapterSet* adapters_adv,
                          const Dataset& local, double alpha, int steps, double lr);

// `steps` full-batch gradient steps driving triggered inputs back toward
// their TRUE labels; operates on copies (the caller's model is untouched).
void a3fl_adv_train(ModelParams& theta, LoraAdapterSet* adapters, const TrainableLayout& layout,
                    const TriggerSpec& t, const Dataset& local, int steps, double lr);

// Shared mutable attack state, updated by at most one writer per round.
struct AttackState {
  TriggerSpec trigger;
  std::array<TriggerSpec, 4> quadrants;  // populated for DBA
  bool has_prev_global = false;
  std::vector<double> prev_global;  // trainable flat of the last received global
};

struct AttackerContext {
  int client_id = 0;
  int attacker_ordinal = 0;  // index within the attacker set
  long round = 0;
  const Dataset* local_data = nullptr;
  double poison_ratio = 0.25;
  int local_epochs = 2;
  double local_lr = 0.01;
  int batch_size = 16;
  bool refresh_trigger = false;  // this attacker refreshes shared A3FL state
  RngStream rng{0};              // derived for (round, client) by the caller
};

// One attacker's local round: poison a local copy per `kind`, train on the
// global snapshot, post-process the update (Neurotoxin). Returns the flat
// update over the trainable layout.
std::vector<double> attacker_round(const AttackParams& params, const ModelParams& global,
                                   const LoraAdapterSet* adapters, const TrainableLayout& layout,
                                   const AttackerContext& ctx, AttackState& state);

// Binary PPM (P6) export of the trigger patch for inspection.
void export_trigger_ppm(const TriggerSpec& t, const std::string& path);

}  // namespace fedlora
