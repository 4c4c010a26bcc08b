#include "federation.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <sstream>
#include <thread>

#include "metrics.hpp"

namespace fedlora {

void FederationConfig::validate() const {
  if (clients < 1) throw ConfigError("fed.clients must be >= 1");
  if (sample_per_round < 1 || sample_per_round > clients)
    throw ConfigError("fed.sample_per_round must be in [1, clients]");
  if (rounds < 1) throw ConfigError("fed.rounds must be >= 1");
  if (local_epochs < 0) throw ConfigError("fed.local_epochs must be >= 0");
  if (local_lr < 0.0) throw ConfigError("fed.local_lr must be >= 0");
  if (batch_size < 1) throw ConfigError("fed.batch_size must be >= 1");
  if (server_lr <= 0.0) throw ConfigError("fed.server_lr must be > 0");
  if (clip_tau <= 0.0) throw ConfigError("fed.clip_tau must be > 0");
  if (window_start < 0 || window_end < window_start || window_end > rounds)
    throw ConfigError("fed.window must satisfy 0 <= start <= end <= rounds");
  std::vector<int> ids = attacker_ids;
  std::sort(ids.begin(), ids.end());
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= clients) throw ConfigError("fed.attacker_ids out of range");
    if (i > 0 && ids[i] == ids[i - 1]) throw ConfigError("fed.attacker_ids must be unique");
  }
  if (partition_alpha <= 0.0) throw ConfigError("fed.partition_alpha must be > 0");
  if (partition_lo < 0.0 || partition_hi < partition_lo)
    throw ConfigError("fed.partition bounds must satisfy 0 <= lo <= hi");
}

void LoraSettings::validate() const {
  if (!enabled) return;
  if (rank < 1) throw ConfigError("lora.rank must be >= 1");
  if (init != "pissa" && init != "standard")
    throw ConfigError("lora.init must be pissa or standard, got " + init);
}

void PretrainSettings::validate() const {
  if (epochs < 0) throw ConfigError("pretrain.epochs must be >= 0");
  if (lr < 0.0) throw ConfigError("pretrain.lr must be >= 0");
  if (batch_size < 1) throw ConfigError("pretrain.batch_size must be >= 1");
  if (accuracy_floor < 0.0 || accuracy_floor > 1.0)
    throw ConfigError("pretrain.accuracy_floor must be in [0,1]");
  if (per_class < 1 || val_per_class < 1)
    throw ConfigError("pretrain sample counts must be >= 1");
}

void EvalSettings::validate() const {
  if (dense_until < 0) throw ConfigError("eval.dense_until must be >= 0");
  if (period < 1) throw ConfigError("eval.period must be >= 1");
  if (sigma_period < 1) throw ConfigError("eval.sigma_period must be >= 1");
  if (sigma_lag < 1) throw ConfigError("eval.sigma_lag must be >= 1");
}

TriggerSpec ExperimentConfig::build_trigger() const {
  TriggerSpec t = TriggerSpec::solid(trigger.row, trigger.col, trigger.height, trigger.width,
                                     trigger.color, trigger.target);
  if (attack.kind == AttackId::kA3fl)
    std::fill(t.pixels.begin(), t.pixels.end(), 0.5);  // uniform grey start
  return t;
}

void ExperimentConfig::validate() const {
  model.validate();
  fed.validate();
  lora.validate();
  pretrain.validate();
  attack.validate();
  reset.validate();
  eval.validate();
  if (name.empty()) throw ConfigError("experiment.name must not be empty");
  for (char ch : name)
    if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_'))
      throw ConfigError("experiment.name must be alphanumeric/-/_");
  if (synth.classes != model.classes) throw ConfigError("synth.classes must match model.classes");
  if (synth.image_h != model.image_h || synth.image_w != model.image_w ||
      synth.channels != model.channels)
    throw ConfigError("synth image shape must match the model");
  if (test_per_class < 1) throw ConfigError("data.test_per_class must be >= 1");
  if (static_cast<int>(trigger.color.size()) != model.channels)
    throw ConfigError("trigger.color length must match model.channels");
  if (trigger.target < 0 || trigger.target >= model.classes)
    throw ConfigError("trigger.target out of class range");
  build_trigger().validate(model.image_h, model.image_w, model.channels);
  if (attack.kind == AttackId::kDba && (trigger.height < 2 || trigger.width < 2))
    throw ConfigError("attack.kind=dba needs a trigger of at least 2x2");
  if (lora.enabled) lora_target_names(model, lora.targets);  // throws on bad targets
  if (reset.enabled && !lora.enabled)
    throw ConfigError("reset defense requires lora.enabled=true");
}

// ---------------------------------------------------------------------------
// Round primitives

std::vector<int> select_clients(long round, const FederationConfig& cfg, const RngStream& root) {
  RngStream rng = root.derive({kRngSelect, static_cast<uint64_t>(round)});
  std::vector<int> ids = rng.sample_without_replacement(cfg.clients, cfg.sample_per_round);
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::vector<double> local_train(const ModelParams& global, const LoraAdapterSet* adapters,
                                const TrainableLayout& layout, const Dataset& local, int epochs,
                                double lr, int batch_size, RngStream rng) {
  ModelParams model = global;
  LoraAdapterSet local_adapters;
  LoraAdapterSet* ptr = nullptr;
  if (adapters) {
    local_adapters = *adapters;
    ptr = &local_adapters;
  }
  const std::vector<double> before = layout.gather(global, adapters);
  if (local.n > 0) sgd_train(model, ptr, layout, local.batch(), epochs, lr, batch_size, rng);
  std::vector<double> delta = layout.gather(model, ptr);
  for (size_t i = 0; i < delta.size(); ++i) delta[i] -= before[i];
  return delta;
}

std::vector<double> clip_update(std::vector<double> delta, double tau) {
  if (tau <= 0.0) throw ConfigError("clip: tau must be > 0");
  const double norm = l2_norm(delta);
  if (norm > tau) {
    const double scale = tau / norm;
    for (double& v : delta) v *= scale;
  }
  return delta;
}

std::vector<double> aggregate(const std::vector<double>& theta,
                              const std::vector<std::vector<double>>& updates, double server_lr) {
  if (updates.empty()) throw InvalidInputError("aggregate: no updates");
  for (const auto& u : updates)
    if (u.size() != theta.size()) throw InvalidInputError("aggregate: dimension mismatch");
  const double scale = server_lr / static_cast<double>(updates.size());
  std::vector<double> out(theta.size());
  for (size_t i = 0; i < theta.size(); ++i) {
    KahanAccumulator acc;
    for (const auto& u : updates) acc.add(u[i]);
    out[i] = theta[i] + scale * acc.total();
  }
  return out;
}

double update_sigma(const std::vector<double>& theta_t, const std::vector<double>& theta_lag) {
  if (theta_t.size() != theta_lag.size() || theta_t.empty())
    throw InvalidInputError("sigma: dimension mismatch");
  double mean = 0.0;
  for (size_t i = 0; i < theta_t.size(); ++i) mean += theta_t[i] - theta_lag[i];
  mean /= static_cast<double>(theta_t.size());
  double var = 0.0;
  for (size_t i = 0; i < theta_t.size(); ++i) {
    const double d = theta_t[i] - theta_lag[i] - mean;
    var += d * d;
  }
  return std::sqrt(var / static_cast<double>(theta_t.size()));
}

// ---------------------------------------------------------------------------
// Experiment driver

namespace {

// 64-bit FNV-1a over a string; keys the pretrain cache.
uint64_t fnv1a(const std::string& s) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string pretrain_cache_key(const ExperimentConfig& cfg, uint64_t seed) {
  std::ostringstream os;
  os << (cfg.model.backbone == Backbone::kTinyTransformer ? "vit" : "mlp") << "|" << cfg.model.image_h
     << "x" << cfg.model.image_w << "x" << cfg.model.channels << "|p" << cfg.model.patch << "|d"
     << cfg.model.dim << "|h" << cfg.model.heads << "|b" << cfg.model.blocks << "|r"
     << cfg.model.mlp_ratio << "|k" << cfg.model.classes << "|";
  for (int h : cfg.model.mlp_hidden) os << h << "_";
  os << "|synth:" << cfg.synth.noise << "," << cfg.synth.strength << "|pre:" << cfg.pretrain.epochs
     << "," << cfg.pretrain.lr << "," << cfg.pretrain.batch_size << "," << cfg.pretrain.per_class << ","
     << cfg.pretrain.val_per_class << "|seed:" << seed;
  return os.str();
}

// Flat view of the global model state as the server stores it: every base
// tensor (frozen ones included, since they are still part of the model) plus
// the trainable low-rank factors. The frozen residual copy is skipped; it
// mirrors a base tensor and would double-weight coordinates that never move.
std::vector<double> state_flatten(const ModelParams& params, const LoraAdapterSet* adapters) {
  std::vector<double> out = params.flatten();
  if (adapters) {
    for (const auto& a : adapters->adapters) {
      out.insert(out.end(), a.a.data.begin(), a.a.data.end());
      out.insert(out.end(), a.b.data.begin(), a.b.data.end());
    }
  }
  return out;
}

// Split a class-major synthetic set into leading/trailing samples per class.
void split_per_class(const Dataset& all, int per_class_total, int head_count,
                     std::vector<int>& head_idx, std::vector<int>& tail_idx) {
  for (int k = 0; k * per_class_total < all.n; ++k) {
    for (int s = 0; s < per_class_total; ++s) {
      const int idx = k * per_class_total + s;
      (s < head_count ? head_idx : tail_idx).push_back(idx);
    }
  }
}

ModelParams pretrained_backbone(const ExperimentConfig& cfg, uint64_t seed, RngStream root,
                                double* out_acc, bool* out_floor) {
  const uint64_t key = fnv1a(pretrain_cache_key(cfg, seed));

  SynthConfig px = cfg.synth;
  px.variant = 1;
  px.per_class = cfg.pretrain.per_class + cfg.pretrain.val_per_class;
  const Dataset pretext = synth_generate(px, root);
  std::vector<int> train_idx, val_idx;
  split_per_class(pretext, px.per_class, cfg.pretrain.per_class, train_idx, val_idx);

  std::string cache_path;
  if (!cfg.pretrain_cache_dir.empty()) {
    std::filesystem::create_directories(cfg.pretrain_cache_dir);
    char name[64];
    std::snprintf(name, sizeof name, "pretrain_%016llx.ckpt", static_cast<unsigned long long>(key));
    cache_path = cfg.pretrain_cache_dir + "/" + name;
    if (std::filesystem::exists(cache_path)) {
      Checkpoint ck = load_checkpoint(cache_path, cfg.model);
      if (ck.config_digest == key) {
        // The checkpoint holds the best-epoch snapshot, so evaluating it
        // reproduces the best validation accuracy seen during pretraining.
        *out_acc = accuracy(ck.params, nullptr, pretext.batch(val_idx));
        *out_floor = *out_acc >= cfg.pretrain.accuracy_floor;
        return std::move(ck.params);
      }
    }
  }

  const PretrainResult pre =
      pretrain(cfg.model, pretext.batch(train_idx), pretext.batch(val_idx), cfg.pretrain.epochs,
               cfg.pretrain.lr, cfg.pretrain.batch_size, cfg.pretrain.accuracy_floor, root);
  *out_acc = pre.val_accuracy;
  *out_floor = pre.floor_reached;
  if (!cache_path.empty()) {
    // Temp-then-rename so concurrent runs sharing the cache never observe a
    // half-written checkpoint.
    const std::string tmp =
        cache_path + "." +
        std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id())) + ".tmp";
    save_checkpoint(tmp, pre.params, nullptr, key);
    std::error_code ec;
    std::filesystem::rename(tmp, cache_path, ec);
    if (ec) std::filesystem::remove(tmp, ec);
  }
  return pre.params;
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg, uint64_t seed, int workers) {
  cfg.validate();
  RngStream root(seed);

  // Task data: one synthetic pool, leading samples per class train, rest test.
  SynthConfig combined = cfg.synth;
  combined.per_class = cfg.synth.per_class + cfg.test_per_class;
  const Dataset pool = synth_generate(combined, root);
  std::vector<int> train_idx, test_idx;
  split_per_class(pool, combined.per_class, cfg.synth.per_class, train_idx, test_idx);
  const Dataset train = pool.subset(train_idx);
  const Dataset test = pool.subset(test_idx);

  ExperimentResult result;
  ModelParams params =
      pretrained_backbone(cfg, seed, root, &result.pretrain_accuracy, &result.pretrain_floor_reached);

  // Fresh task head on the pretrained backbone.
  {
    RngStream head_rng = root.derive({kRngModelInit, 1});
    Matrix& hw = params.tensor("head.w");
    const double scale = 1.0 / std::sqrt(static_cast<double>(hw.rows));
    for (double& v : hw.data) v = head_rng.next_normal() * scale;
    Matrix& hb = params.tensor("head.b");
    std::fill(hb.data.begin(), hb.data.end(), 0.0);
  }

  LoraAdapterSet adapters;
  LoraAdapterSet* aptr = nullptr;
  if (cfg.lora.enabled) {
    const std::vector<std::string> targets = lora_target_names(cfg.model, cfg.lora.targets);
    for (size_t i = 0; i < targets.size(); ++i) {
      const Matrix& w0 = params.tensor(targets[i]);
      adapters.adapters.push_back(
          cfg.lora.init == "pissa"
              ? pissa_init(targets[i], w0, cfg.lora.rank)
              : standard_init(targets[i], w0, cfg.lora.rank,
                              root.derive({kRngLoraInit, static_cast<uint64_t>(i)})));
    }
    aptr = &adapters;
  }
  const TrainableLayout layout = TrainableLayout::make(params, aptr);
  result.trainable_dim = layout.dim;

  const Partition part = dirichlet_partition(train, cfg.fed.clients, cfg.fed.partition_alpha,
                                             cfg.fed.partition_lo, cfg.fed.partition_hi, root);
  std::vector<Dataset> client_data;
  client_data.reserve(cfg.fed.clients);
  for (const auto& idx : part.clients) client_data.push_back(train.subset(idx));

  std::vector<char> is_attacker(cfg.fed.clients, 0);
  std::vector<int> attacker_sorted = cfg.fed.attacker_ids;
  std::sort(attacker_sorted.begin(), attacker_sorted.end());
  for (int id : attacker_sorted) is_attacker[id] = 1;
  auto attacker_ordinal = [&](int id) {
    return static_cast<int>(std::lower_bound(attacker_sorted.begin(), attacker_sorted.end(), id) -
                            attacker_sorted.begin());
  };

  AttackState state;
  state.trigger = cfg.build_trigger();
  if (cfg.attack.kind == AttackId::kDba) state.quadrants = dba_split(state.trigger);

  const Batch test_batch = test.batch();
  PoisonedTestset poisoned = build_poisoned_testset(test, state.trigger);
  std::vector<double> poisoned_pixels = state.trigger.pixels;

  const int lag = cfg.eval.sigma_lag;
  std::vector<std::vector<double>> history(static_cast<size_t>(lag) + 1);

  for (long t = 0; t < cfg.fed.rounds; ++t) {
    const auto t0 = std::chrono::steady_clock::now();
    try {
      const std::vector<int> selected = select_clients(t, cfg.fed, root);
      const bool window_active = t >= cfg.fed.window_start && t < cfg.fed.window_end;

      int writer_slot = -1;  // A3FL: lowest acting attacker refreshes the trigger
      if (cfg.attack.kind == AttackId::kA3fl && window_active) {
        for (size_t s = 0; s < selected.size(); ++s) {
          if (is_attacker[selected[s]]) {
            writer_slot = static_cast<int>(s);
            break;
          }
        }
      }

      const std::vector<double> before = layout.gather(params, aptr);
      std::vector<std::vector<double>> updates(selected.size());

      auto run_slot = [&](size_t slot) {
        const int cid = selected[slot];
        RngStream crng = root.derive(
            {kRngClient, static_cast<uint64_t>(t), static_cast<uint64_t>(cid)});
        std::vector<double> delta;
        if (window_active && is_attacker[cid] && cfg.attack.kind != AttackId::kNone) {
          AttackerContext ctx;
          ctx.client_id = cid;
          ctx.attacker_ordinal = attacker_ordinal(cid);
          ctx.round = t;
          ctx.local_data = &client_data[cid];
          ctx.poison_ratio = cfg.attack.poison_ratio;
          ctx.local_epochs = cfg.fed.local_epochs;
          ctx.local_lr = cfg.fed.local_lr;
          ctx.batch_size = cfg.fed.batch_size;
          ctx.refresh_trigger = static_cast<int>(slot) == writer_slot;
          ctx.rng = crng;
          delta = attacker_round(cfg.attack, params, aptr, layout, ctx, state);
        } else {
          delta = local_train(params, aptr, layout, client_data[cid], cfg.fed.local_epochs,
                              cfg.fed.local_lr, cfg.fed.batch_size, crng);
        }
        delta = clip_update(std::move(delta), cfg.fed.clip_tau);
        if (l2_norm(delta) > cfg.fed.clip_tau * (1.0 + 1e-9))
          throw InvalidInputError("clipped update exceeds tau");
        updates[slot] = std::move(delta);
      };

      std::vector<size_t> pending;
      if (writer_slot >= 0) {
        run_slot(static_cast<size_t>(writer_slot));
        for (size_t s = 0; s < selected.size(); ++s)
          if (static_cast<int>(s) != writer_slot) pending.push_back(s);
      } else {
        for (size_t s = 0; s < selected.size(); ++s) pending.push_back(s);
      }
      if (workers <= 1 || pending.size() <= 1) {
        for (size_t s : pending) run_slot(s);
      } else {
        std::atomic<size_t> next{0};
        std::exception_ptr first_error;
        std::mutex error_mutex;
        auto drain = [&] {
          for (;;) {
            const size_t i = next.fetch_add(1);
            if (i >= pending.size()) break;
            try {
              run_slot(pending[i]);
            } catch (...) {
              std::lock_guard<std::mutex> lock(error_mutex);
              if (!first_error) first_error = std::current_exception();
            }
          }
        };
        std::vector<std::thread> pool;
        const size_t n_threads = std::min<size_t>(workers, pending.size());
        pool.reserve(n_threads);
        for (size_t i = 0; i < n_threads; ++i) pool.emplace_back(drain);
        for (auto& th : pool) th.join();
        if (first_error) std::rethrow_exception(first_error);
      }

      std::vector<double> next_flat = aggregate(before, updates, cfg.fed.server_lr);
      layout.scatter(next_flat, params, aptr);

      if (cfg.attack.kind == AttackId::kNeurotoxin && window_active) {
        bool attacker_acted = false;
        for (int cid : selected) attacker_acted = attacker_acted || is_attacker[cid];
        if (attacker_acted) {
          state.prev_global = before;
          state.has_prev_global = true;
        }
      }

      if (cfg.reset.enabled && aptr) {
        for (size_t i = 0; i < adapters.adapters.size(); ++i)
          apply_reset(adapters.adapters[i], cfg.reset, t,
                      root.derive({kRngResetOrder, static_cast<uint64_t>(i)}));
      }

      RoundRecord rec;
      rec.round = t;
      rec.selected = selected;
      for (int cid : selected) rec.attackers_selected += is_attacker[cid] ? 1 : 0;

      const bool eval_now =
          t < cfg.eval.dense_until || t % cfg.eval.period == 0 || t == cfg.fed.rounds - 1;
      if (eval_now) {
        rec.acc = accuracy(params, aptr, test_batch);
        if (state.trigger.pixels != poisoned_pixels) {
          poisoned = build_poisoned_testset(test, state.trigger);
          poisoned_pixels = state.trigger.pixels;
        }
        rec.asr = attack_success_rate(params, aptr, poisoned);
      }

      std::vector<double> snapshot = state_flatten(params, aptr);
      if (t >= lag && t % cfg.eval.sigma_period == 0) {
        const std::vector<double>& old = history[static_cast<size_t>((t - lag) % (lag + 1))];
        if (!old.empty()) rec.sigma = update_sigma(snapshot, old);
      }
      history[static_cast<size_t>(t % (lag + 1))] = std::move(snapshot);

      rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      result.records.push_back(std::move(rec));
    } catch (const std::exception& e) {
      throw std::runtime_error("round " + std::to_string(t) + ": " + e.what());
    }
  }

  result.final_params = std::move(params);
  if (aptr) result.final_adapters = std::move(adapters);
  result.final_trigger = state.trigger;
  return result;
}

// ---------------------------------------------------------------------------
// Telemetry IO

void write_telemetry_csv(const std::string& path, const std::vector<RoundRecord>& records) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot open telemetry file for writing: " + path);
  os << "round,acc,asr,sigma,n_attackers_selected,selected_ids\n";
  char buf[40];
  auto field = [&](const std::optional<double>& v) {
    if (!v) return std::string();
    std::snprintf(buf, sizeof buf, "%.17g", *v);
    return std::string(buf);
  };
  for (const auto& r : records) {
    os << r.round << "," << field(r.acc) << "," << field(r.asr) << "," << field(r.sigma) << ","
       << r.attackers_selected << ",";
    for (size_t i = 0; i < r.selected.size(); ++i) os << (i ? ";" : "") << r.selected[i];
    os << "\n";
  }
  if (!os) throw FormatError("short write on telemetry file: " + path);
}

std::vector<RoundRecord> read_telemetry_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open telemetry file: " + path);
  std::string line;
  if (!std::getline(is, line) || line != "round,acc,asr,sigma,n_attackers_selected,selected_ids")
    throw FormatError(path + ": line 1: bad telemetry header");
  std::vector<RoundRecord> out;
  long line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    size_t start = 0;
    for (size_t i = 0; i <= line.size(); ++i) {
      if (i == line.size() || line[i] == ',') {
        cells.push_back(line.substr(start, i - start));
        start = i + 1;
      }
    }
    if (cells.size() != 6)
      throw FormatError(path + ": line " + std::to_string(line_no) + ": expected 6 fields");
    try {
      RoundRecord r;
      r.round = std::stol(cells[0]);
      auto opt = [](const std::string& s) {
        return s.empty() ? std::optional<double>() : std::optional<double>(std::stod(s));
      };
      r.acc = opt(cells[1]);
      r.asr = opt(cells[2]);
      r.sigma = opt(cells[3]);
      r.attackers_selected = std::stoi(cells[4]);
      if (!cells[5].empty()) {
        size_t p = 0;
        while (p <= cells[5].size()) {
          const size_t q = cells[5].find(';', p);
          const std::string tok = cells[5].substr(p, q == std::string::npos ? q : q - p);
          r.selected.push_back(std::stoi(tok));
          if (q == std::string::npos) break;
          p = q + 1;
        }
      }
      out.push_back(std::move(r));
    } catch (const std::exception&) {
      throw FormatError(path + ": line " + std::to_string(line_no) + ": malformed row");
    }
  }
  return out;
}

}  // namespace fedlora
