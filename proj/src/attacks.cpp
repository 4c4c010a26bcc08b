#include "attacks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace fedlora {

AttackId attack_id_from_string(const std::string& s) {
  if (s == "none") return AttackId::kNone;
  if (s == "baseline") return AttackId::kBaseline;
  if (s == "dba") return AttackId::kDba;
  if (s == "neurotoxin") return AttackId::kNeurotoxin;
  if (s == "a3fl") return AttackId::kA3fl;
  throw ConfigError("attack.kind: unknown attack " + s);
}

std::string to_string(AttackId id) {
  switch (id) {
    case AttackId::kNone: return "none";
    case AttackId::kBaseline: return "baseline";
    case AttackId::kDba: return "dba";
    case AttackId::kNeurotoxin: return "neurotoxin";
    case AttackId::kA3fl: return "a3fl";
  }
  return "?";
}

void AttackParams::validate() const {
  if (poison_ratio < 0.0 || poison_ratio > 1.0)
    throw ConfigError("attack.poison_ratio must be in [0,1]");
  if (kind == AttackId::kNeurotoxin && (mask_share <= 0.0 || mask_share >= 1.0))
    throw ConfigError("attack.mask_share must be in (0,1)");
  if (a3fl_alpha < 0.0) throw ConfigError("attack.a3fl_alpha must be >= 0");
  if (a3fl_trigger_steps < 0 || a3fl_adv_steps < 0)
    throw ConfigError("attack.a3fl step counts must be >= 0");
  if (a3fl_trigger_lr <= 0.0 || a3fl_adv_lr <= 0.0)
    throw ConfigError("attack.a3fl learning rates must be > 0");
}

NeurotoxinMask neurotoxin_mask(const std::vector<double>& theta_t, const std::vector<double>& theta_prev,
                               double p_mask) {
  NeurotoxinMask m;
  m.masked.assign(theta_t.size(), 0);
  if (theta_prev.empty()) return m;  // no history yet: degenerate (baseline) round
  if (theta_prev.size() != theta_t.size())
    throw InvalidInputError("neurotoxin_mask: parameter dimension mismatch");
  if (p_mask <= 0.0 || p_mask >= 1.0) throw ConfigError("neurotoxin_mask: p_mask must be in (0,1)");
  const size_t dim = theta_t.size();
  const size_t count = static_cast<size_t>(std::ceil(p_mask * static_cast<double>(dim)));
  std::vector<size_t> order(dim);
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return std::abs(theta_t[a] - theta_prev[a]) > std::abs(theta_t[b] - theta_prev[b]);
  });
  for (size_t i = 0; i < count; ++i) m.masked[order[i]] = 1;
  m.count = count;
  return m;
}

std::vector<double> mask_update(const std::vector<double>& delta, const NeurotoxinMask& m) {
  if (m.masked.size() != delta.size()) throw InvalidInputError("mask_update: dimension mismatch");
  std::vector<double> out = delta;
  for (size_t i = 0; i < out.size(); ++i)
    if (m.masked[i]) out[i] = 0.0;
  return out;
}

const TriggerSpec& dba_round_trigger(int attacker_ordinal, long round, RngStream rng,
                                     const std::array<TriggerSpec, 4>& quadrants) {
  RngStream pick = rng.derive(
      {kRngDbaChoice, static_cast<uint64_t>(round), static_cast<uint64_t>(attacker_ordinal)});
  return quadrants[pick.next_below(4)];
}

// ---------------------------------------------------------------------------
// A3FL

namespace {

Batch triggered_batch(const Dataset& local, const TriggerSpec& t) {
  Batch b = local.batch();
  const size_t px = local.pixel_count();
  std::vector<double> img(px);
  for (int i = 0; i < b.n; ++i) {
    std::copy(b.images.begin() + i * px, b.images.begin() + (i + 1) * px, img.begin());
    apply_trigger(img, local.h, local.w, local.c, t);
    std::copy(img.begin(), img.end(), b.images.begin() + i * px);
  }
  return b;
}

// d(mean loss)/d(patch pixel): every sample shares the patch values, so the
// per-sample pixel gradients add up at each patch coordinate.
std::vector<double> trigger_grad(const ModelParams& theta, const LoraAdapterSet* adapters,
                                 const Dataset& local, const Batch& triggered, const TriggerSpec& t) {
  const std::vector<double> g = input_grad(theta, adapters, triggered, t.target);
  const size_t px = local.pixel_count();
  std::vector<double> out(t.pixels.size(), 0.0);
  for (int s = 0; s < triggered.n; ++s) {
    const double* gs = &g[static_cast<size_t>(s) * px];
    for (int dy = 0; dy < t.height; ++dy)
      for (int dx = 0; dx < t.width; ++dx)
        for (int ch = 0; ch < local.c; ++ch)
          out[(static_cast<size_t>(dy) * t.width + dx) * local.c + ch] +=
              gs[((static_cast<size_t>(t.row) + dy) * local.w + (t.col + dx)) * local.c + ch];
  }
  return out;
}

}  // namespace

TriggerSpec a3fl_optimize(const TriggerSpec& t, const ModelParams& theta, const LoraAdapterSet* adapters,
                          const ModelParams& theta_adv, const LoraAdapterSet* adapters_adv,
                          const Dataset& local, double alpha, int steps, double lr) {
  t.validate(local.h, local.w, local.c);
  if (local.n == 0 || steps == 0) return t;
  TriggerSpec cur = t;

  auto combined_loss = [&](const TriggerSpec& trig) {
    const Batch b = triggered_batch(local, trig);
    double loss = eval_loss_toward(theta, adapters, b, trig.target);
    if (alpha > 0.0) loss += alpha * eval_loss_toward(theta_adv, adapters_adv, b, trig.target);
    return loss;
  };

  double cur_loss = combined_loss(cur);
  for (int step = 0; step < steps; ++step) {
    const Batch b = triggered_batch(local, cur);
    std::vector<double> g = trigger_grad(theta, adapters, local, b, cur);
    if (alpha > 0.0) {
      const std::vector<double> ga = trigger_grad(theta_adv, adapters_adv, local, b, cur);
      for (size_t i = 0; i < g.size(); ++i) g[i] += alpha * ga[i];
    }
    double step_lr = lr;
    bool accepted = false;
    for (int halving = 0; halving <= 5; ++halving) {
      TriggerSpec cand = cur;
      for (size_t i = 0; i < cand.pixels.size(); ++i)
        cand.pixels[i] = std::clamp(cur.pixels[i] - step_lr * g[i], 0.0, 1.0);
      const double cand_loss = combined_loss(cand);
      if (cand_loss <= cur_loss) {
        cur = std::move(cand);
        cur_loss = cand_loss;
        accepted = true;
        break;
      }
      step_lr *= 0.5;
    }
    if (!accepted) break;  // stuck at a local floor; keep the current trigger
  }
  return cur;
}

void a3fl_adv_train(ModelParams& theta, LoraAdapterSet* adapters, const TrainableLayout& layout,
                    const TriggerSpec& t, const Dataset& local, int steps, double lr) {
  if (local.n == 0 || steps == 0) return;
  Batch b = triggered_batch(local, t);
  b.labels = local.labels;  // true labels: unlearn the shortcut, keep the task
  for (int step = 0; step < steps; ++step) {
    LossGrad lg = loss_and_grad(theta, adapters, b, layout);
    std::vector<double> flat = layout.gather(theta, adapters);
    for (size_t i = 0; i < flat.size(); ++i) flat[i] -= lr * lg.grad[i];
    layout.scatter(flat, theta, adapters);
  }
}

// ---------------------------------------------------------------------------
// Per-round attacker behavior

std::vector<double> attacker_round(const AttackParams& params, const ModelParams& global,
                                   const LoraAdapterSet* adapters, const TrainableLayout& layout,
                                   const AttackerContext& ctx, AttackState& state) {
  params.validate();
  const Dataset& local = *ctx.local_data;

  if (params.kind == AttackId::kA3fl && ctx.refresh_trigger && local.n > 0) {
    ModelParams adv = global;
    LoraAdapterSet adv_adapters;
    LoraAdapterSet* adv_ptr = nullptr;
    if (adapters) {
      adv_adapters = *adapters;
      adv_ptr = &adv_adapters;
    }
    a3fl_adv_train(adv, adv_ptr, layout, state.trigger, local, params.a3fl_adv_steps,
                   params.a3fl_adv_lr);
    state.trigger = a3fl_optimize(state.trigger, global, adapters, adv, adv_ptr, local,
                                  params.a3fl_alpha, params.a3fl_trigger_steps, params.a3fl_trigger_lr);
  }

  Dataset train_data;
  switch (params.kind) {
    case AttackId::kNone:
      train_data = local;
      break;
    case AttackId::kDba: {
      const TriggerSpec& quad =
          dba_round_trigger(ctx.attacker_ordinal, ctx.round, ctx.rng, state.quadrants);
      train_data = poison(local, quad, ctx.poison_ratio, ctx.rng);
      break;
    }
    case AttackId::kBaseline:
    case AttackId::kNeurotoxin:
    case AttackId::kA3fl:
      train_data = poison(local, state.trigger, ctx.poison_ratio, ctx.rng);
      break;
  }

  ModelParams model = global;
  LoraAdapterSet local_adapters;
  LoraAdapterSet* local_ptr = nullptr;
  if (adapters) {
    local_adapters = *adapters;
    local_ptr = &local_adapters;
  }
  const std::vector<double> before = layout.gather(global, adapters);
  sgd_train(model, local_ptr, layout, train_data.batch(), ctx.local_epochs, ctx.local_lr,
            ctx.batch_size, ctx.rng);
  std::vector<double> delta = layout.gather(model, local_ptr);
  for (size_t i = 0; i < delta.size(); ++i) delta[i] -= before[i];

  if (params.kind == AttackId::kNeurotoxin && state.has_prev_global) {
    const NeurotoxinMask m = neurotoxin_mask(before, state.prev_global, params.mask_share);
    delta = mask_update(delta, m);
  }
  return delta;
}

void export_trigger_ppm(const TriggerSpec& t, const std::string& path) {
  if (t.channels != 1 && t.channels != 3)
    throw ConfigError("trigger export: only 1- or 3-channel patches supported");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open trigger image for writing: " + path);
  os << "P6\n" << t.width << " " << t.height << "\n255\n";
  for (int dy = 0; dy < t.height; ++dy) {
    for (int dx = 0; dx < t.width; ++dx) {
      for (int ch = 0; ch < 3; ++ch) {
        const int src_ch = t.channels == 3 ? ch : 0;
        const double v = t.pixels[(static_cast<size_t>(dy) * t.width + dx) * t.channels + src_ch];
        os.put(static_cast<char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
      }
    }
  }
  if (!os) throw FormatError("short write on trigger image: " + path);
}

}  // namespace fedlora
