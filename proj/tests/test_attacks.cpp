#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "attacks.hpp"
#include "data.hpp"
#include "model.hpp"
#include "numkit.hpp"
#include "oracles.hpp"

using namespace fedlora;

namespace {

ModelConfig tiny_cfg() {
  ModelConfig cfg;
  cfg.backbone = Backbone::kTinyTransformer;
  cfg.image_h = 8;
  cfg.image_w = 8;
  cfg.channels = 3;
  cfg.patch = 4;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.mlp_ratio = 2;
  cfg.classes = 3;
  return cfg;
}

Dataset tiny_data(uint64_t seed, int per_class = 12) {
  SynthConfig cfg;
  cfg.classes = 3;
  cfg.per_class = per_class;
  cfg.image_h = 8;
  cfg.image_w = 8;
  cfg.channels = 3;
  return synth_generate(cfg, RngStream(seed));
}

TriggerSpec red_patch() { return TriggerSpec::solid(0, 0, 3, 3, {1.0, 0.0, 0.0}, 2); }

}  // namespace

TEST_CASE("attack ids parse and print") {
  CHECK(attack_id_from_string("none") == AttackId::kNone);
  CHECK(attack_id_from_string("baseline") == AttackId::kBaseline);
  CHECK(attack_id_from_string("dba") == AttackId::kDba);
  CHECK(attack_id_from_string("neurotoxin") == AttackId::kNeurotoxin);
  CHECK(attack_id_from_string("a3fl") == AttackId::kA3fl);
  CHECK_THROWS_AS(attack_id_from_string("bogus"), ConfigError);
  for (auto id : {AttackId::kNone, AttackId::kBaseline, AttackId::kDba, AttackId::kNeurotoxin,
                  AttackId::kA3fl})
    CHECK(attack_id_from_string(to_string(id)) == id);
}

TEST_CASE("neurotoxin mask picks the largest-drift coordinates with low-index ties") {
  const std::vector<double> prev = {0, 0, 0, 0, 0, 0};
  const std::vector<double> now = {0.5, -0.9, 0.9, 0.1, -0.5, 0.0};
  const NeurotoxinMask m = neurotoxin_mask(now, prev, 0.5);  // ceil(3)
  CHECK(m.count == 3);
  // |diff| = .5 .9 .9 .1 .5 0 -> top3 = {1, 2 (tie to lower first), 0 or 4?}
  // sorted: idx1(.9), idx2(.9), then idx0(.5) before idx4(.5).
  CHECK(m.masked[0] == 1);
  CHECK(m.masked[1] == 1);
  CHECK(m.masked[2] == 1);
  CHECK(m.masked[3] == 0);
  CHECK(m.masked[4] == 0);
  CHECK(m.masked[5] == 0);

  const std::vector<double> delta = {1, 2, 3, 4, 5, 6};
  const auto masked = mask_update(delta, m);
  CHECK(masked == std::vector<double>{0, 0, 0, 4, 5, 6});
}

TEST_CASE("neurotoxin mask matches the sort oracle on random vectors") {
  RngStream rng(200);
  for (int trial = 0; trial < 100; ++trial) {
    const int dim = 5 + static_cast<int>(rng.next_below(60));
    std::vector<double> now(dim), prev(dim);
    for (int i = 0; i < dim; ++i) {
      now[i] = rng.next_normal();
      prev[i] = rng.next_normal();
      if (rng.next_below(4) == 0 && i > 0) now[i] = now[i - 1] - prev[i - 1] + prev[i];  // forced ties
    }
    const double p = rng.next_double();
    const NeurotoxinMask m = neurotoxin_mask(now, prev, p);
    const size_t want = static_cast<size_t>(std::ceil(p * dim));
    CHECK(m.count == want);

    const auto oracle = oracles::topk_by_abs_diff(now, prev, want);
    size_t marked = 0;
    for (int i = 0; i < dim; ++i) marked += m.masked[i] ? 1 : 0;
    CHECK(marked == want);
    for (size_t idx : oracle) CHECK(m.masked[idx] == 1);
  }
}

TEST_CASE("mask edge shares") {
  const std::vector<double> now = {1, 2, 3};
  const std::vector<double> prev = {0, 0, 0};
  CHECK_THROWS_AS(neurotoxin_mask(now, prev, 0.0), ConfigError);
  CHECK_THROWS_AS(neurotoxin_mask(now, prev, 1.0), ConfigError);
  CHECK(neurotoxin_mask(now, prev, 0.001).count == 1);  // ceil rounds up
  CHECK(neurotoxin_mask(now, prev, 0.999).count == 3);
  CHECK_THROWS_AS(neurotoxin_mask(now, {0, 0}, 0.5), InvalidInputError);
}

TEST_CASE("dba round trigger is deterministic and covers all quadrants") {
  const auto quads = dba_split(TriggerSpec::solid(0, 0, 5, 5, {1, 0, 0}, 2));
  const RngStream root(300);

  std::set<const TriggerSpec*> seen;
  for (long round = 0; round < 40; ++round) {
    const TriggerSpec& a = dba_round_trigger(0, round, root, quads);
    const TriggerSpec& b = dba_round_trigger(0, round, root, quads);
    CHECK(&a == &b);  // same choice on replay
    seen.insert(&a);
    const TriggerSpec& other = dba_round_trigger(1, round, root, quads);
    bool is_quadrant = false;
    for (const auto& q : quads) is_quadrant = is_quadrant || &other == &q;
    CHECK(is_quadrant);
  }
  CHECK(seen.size() == 4);  // all quadrants appear over 40 rounds
}

TEST_CASE("a3fl trigger optimization lowers the combined loss and stays in range") {
  RngStream rng(400);
  const ModelConfig cfg = tiny_cfg();
  const ModelParams theta = build(cfg, rng.derive(0));
  ModelParams theta_adv = build(cfg, rng.derive(1));
  const Dataset local = tiny_data(401);

  TriggerSpec t = TriggerSpec::solid(0, 0, 3, 3, {0.5, 0.5, 0.5}, 2);
  auto combined = [&](const TriggerSpec& tr) {
    Dataset stamped = local;
    const size_t px = stamped.pixel_count();
    for (int i = 0; i < stamped.n; ++i) {
      std::vector<double> img(stamped.images.begin() + i * px, stamped.images.begin() + (i + 1) * px);
      apply_trigger(img, stamped.h, stamped.w, stamped.c, tr);
      std::copy(img.begin(), img.end(), stamped.images.begin() + i * px);
    }
    const Batch b = stamped.batch();
    return eval_loss_toward(theta, nullptr, b, tr.target) +
           0.5 * eval_loss_toward(theta_adv, nullptr, b, tr.target);
  };

  const double before = combined(t);
  const TriggerSpec opt = a3fl_optimize(t, theta, nullptr, theta_adv, nullptr, local, 0.5, 10, 0.1);
  const double after = combined(opt);
  CHECK(after <= before + 1e-12);
  CHECK(opt.height == t.height);
  CHECK(opt.width == t.width);
  for (double v : opt.pixels) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("a3fl adversarial training pushes triggered inputs back to true labels") {
  RngStream rng(500);
  const ModelConfig cfg = tiny_cfg();
  ModelParams theta = build(cfg, rng.derive(0));
  const Dataset local = tiny_data(501);
  const TriggerSpec t = red_patch();
  const TrainableLayout layout = TrainableLayout::make(theta, nullptr);

  Dataset stamped = local;
  const size_t px = stamped.pixel_count();
  for (int i = 0; i < stamped.n; ++i) {
    std::vector<double> img(stamped.images.begin() + i * px, stamped.images.begin() + (i + 1) * px);
    apply_trigger(img, stamped.h, stamped.w, stamped.c, t);
    std::copy(img.begin(), img.end(), stamped.images.begin() + i * px);
  }
  const Batch triggered_true = stamped.batch();

  const double before = eval_loss(theta, nullptr, triggered_true);
  a3fl_adv_train(theta, nullptr, layout, t, local, 10, 0.05);
  CHECK(eval_loss(theta, nullptr, triggered_true) < before);
}

TEST_CASE("attacker rounds emit layout-shaped deterministic updates") {
  RngStream rng(600);
  const ModelConfig mcfg = tiny_cfg();
  const ModelParams global = build(mcfg, rng.derive(0));
  const TrainableLayout layout = TrainableLayout::make(global, nullptr);
  const Dataset local = tiny_data(601, 16);

  AttackParams params;
  params.kind = AttackId::kBaseline;
  params.poison_ratio = 0.25;

  AttackState state;
  state.trigger = red_patch();

  AttackerContext ctx;
  ctx.client_id = 0;
  ctx.attacker_ordinal = 0;
  ctx.round = 3;
  ctx.local_data = &local;
  ctx.poison_ratio = params.poison_ratio;
  ctx.local_epochs = 1;
  ctx.local_lr = 0.05;
  ctx.batch_size = 8;
  ctx.rng = RngStream(600).derive({kRngClient, 3, 0});

  const auto delta = attacker_round(params, global, nullptr, layout, ctx, state);
  REQUIRE(delta.size() == layout.dim);
  CHECK(l2_norm(delta) > 0.0);

  AttackState state2;
  state2.trigger = red_patch();
  const auto delta2 = attacker_round(params, global, nullptr, layout, ctx, state2);
  CHECK(delta2 == delta);

  // A benign pass over the same data gives a different update.
  ModelParams copy = global;
  sgd_train(copy, nullptr, layout, local.batch(), ctx.local_epochs, ctx.local_lr, ctx.batch_size,
            ctx.rng.derive({kRngShuffle}));
  const auto benign_flat = layout.gather(copy, nullptr);
  const auto global_flat = layout.gather(global, nullptr);
  std::vector<double> benign(benign_flat.size());
  for (size_t i = 0; i < benign.size(); ++i) benign[i] = benign_flat[i] - global_flat[i];
  CHECK(benign != delta);
}

TEST_CASE("neurotoxin attacker avoids the top-drift coordinates") {
  RngStream rng(700);
  const ModelConfig mcfg = tiny_cfg();
  const ModelParams global = build(mcfg, rng.derive(0));
  const TrainableLayout layout = TrainableLayout::make(global, nullptr);
  const Dataset local = tiny_data(701, 16);

  AttackParams params;
  params.kind = AttackId::kNeurotoxin;
  params.poison_ratio = 0.25;
  params.mask_share = 0.10;

  AttackState state;
  state.trigger = red_patch();
  state.has_prev_global = true;
  state.prev_global = layout.gather(global, nullptr);
  for (double& v : state.prev_global) v += 0.01 * std::sin(v * 100.0);  // synthetic drift

  AttackerContext ctx;
  ctx.client_id = 1;
  ctx.round = 5;
  ctx.local_data = &local;
  ctx.poison_ratio = params.poison_ratio;
  ctx.local_epochs = 1;
  ctx.local_lr = 0.05;
  ctx.batch_size = 8;
  ctx.rng = RngStream(700).derive({kRngClient, 5, 1});

  const auto delta = attacker_round(params, global, nullptr, layout, ctx, state);
  const auto mask =
      neurotoxin_mask(layout.gather(global, nullptr), state.prev_global, params.mask_share);
  CHECK(mask.count > 0);
  for (size_t i = 0; i < delta.size(); ++i)
    if (mask.masked[i]) CHECK(delta[i] == 0.0);

  // Without history the update is unmasked.
  AttackState fresh;
  fresh.trigger = red_patch();
  const auto raw = attacker_round(params, global, nullptr, layout, ctx, fresh);
  size_t zeros_at_masked = 0;
  for (size_t i = 0; i < raw.size(); ++i)
    if (mask.masked[i] && raw[i] == 0.0) ++zeros_at_masked;
  CHECK(zeros_at_masked < mask.count);
}

TEST_CASE("trigger ppm export writes a well-formed P6 file") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "fedlora_test_attacks";
  fs::create_directories(dir);
  const std::string path = (dir / "trigger.ppm").string();

  const TriggerSpec t = red_patch();
  export_trigger_ppm(t, path);

  std::ifstream is(path, std::ios::binary);
  REQUIRE(is.good());
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  is >> magic >> w >> h >> maxval;
  CHECK(magic == "P6");
  CHECK(w == t.width);
  CHECK(h == t.height);
  CHECK(maxval == 255);
  is.get();  // single whitespace after header
  std::vector<char> body(static_cast<size_t>(w) * h * 3);
  is.read(body.data(), static_cast<std::streamsize>(body.size()));
  CHECK(is.gcount() == static_cast<std::streamsize>(body.size()));
  CHECK(static_cast<unsigned char>(body[0]) == 255);  // red
  CHECK(static_cast<unsigned char>(body[1]) == 0);
  CHECK(static_cast<unsigned char>(body[2]) == 0);
}

TEST_CASE("attack params validate their ranges") {
  AttackParams p;
  p.poison_ratio = 1.5;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p = AttackParams{};
  p.kind = AttackId::kNeurotoxin;
  p.mask_share = -0.1;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p = AttackParams{};
  p.a3fl_trigger_steps = -1;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p = AttackParams{};
  p.a3fl_alpha = -2.0;
  CHECK_THROWS_AS(p.validate(), ConfigError);
}
