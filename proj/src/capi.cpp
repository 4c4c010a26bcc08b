#include "fedlora.h"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "attacks.hpp"
#include "config.hpp"
#include "federation.hpp"
#include "metrics.hpp"
#include "plot.hpp"

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

struct fedlora_config {
  fedlora::ExperimentConfig cfg;
};

namespace {

constexpr const char* kVersion = "1.0.0";

thread_local std::string g_error;

void set_error(const std::string& msg) { g_error = msg; }

bool io_message(const char* what) {
  const std::string s = what;
  return s.find("cannot open") != std::string::npos || s.find("short write") != std::string::npos ||
         s.find("cannot create") != std::string::npos;
}

int map_current_exception() {
  try {
    throw;
  } catch (const fedlora::ConfigError& e) {
    set_error(e.what());
    return FEDLORA_ERR_CONFIG;
  } catch (const fedlora::FormatError& e) {
    set_error(e.what());
    return io_message(e.what()) ? FEDLORA_ERR_IO : FEDLORA_ERR_PARSE;
  } catch (const fedlora::InvalidInputError& e) {
    set_error(e.what());
    return FEDLORA_ERR_INVALID_ARG;
  } catch (const std::exception& e) {
    set_error(e.what());
    return FEDLORA_ERR_RUNTIME;
  } catch (...) {
    set_error("unknown error");
    return FEDLORA_ERR_RUNTIME;
  }
}

template <typename F>
int guarded(F&& fn) {
  g_error.clear();
  try {
    return fn();
  } catch (...) {
    return map_current_exception();
  }
}

template <typename F>
fedlora_config* guarded_config(F&& fn) {
  g_error.clear();
  try {
    return fn();
  } catch (...) {
    map_current_exception();
    return nullptr;
  }
}

int require(bool ok, const char* msg) {
  if (ok) return FEDLORA_OK;
  set_error(msg);
  return FEDLORA_ERR_INVALID_ARG;
}

std::string digest_hex(uint64_t d) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(d));
  return buf;
}

fedlora::CensoredRound shift_past_window(const fedlora::CensoredRound& c, long aw_end) {
  using State = fedlora::CensoredRound::State;
  switch (c.state) {
    case State::kAt: return fedlora::CensoredRound::at(c.round - aw_end);
    case State::kCensored: return fedlora::CensoredRound::censored(c.horizon - aw_end);
    default: return fedlora::CensoredRound::absent();
  }
}

fedlora::MetricSeries series_of(const std::vector<fedlora::RoundRecord>& records, long horizon,
                                std::optional<double> fedlora::RoundRecord::* field) {
  fedlora::MetricSeries s;
  s.horizon = horizon;
  for (const auto& r : records)
    if ((r.*field).has_value()) s.points.emplace_back(r.round, *(r.*field));
  return s;
}

fedlora::SummaryRow summarize_run(const fedlora::ExperimentConfig& cfg,
                                  const std::vector<fedlora::RoundRecord>& records) {
  const long horizon = cfg.fed.rounds;
  const auto acc = series_of(records, horizon, &fedlora::RoundRecord::acc);
  const auto asr = series_of(records, horizon, &fedlora::RoundRecord::asr);
  fedlora::SummaryRow row;
  row.attack = fedlora::to_string(cfg.attack.kind);
  row.rank = cfg.lora.enabled ? std::to_string(cfg.lora.rank) : "full";
  row.aw_end = cfg.fed.window_end;
  row.tc95_acc = fedlora::convergence_time(acc, 0.95);
  row.tc95_asr = fedlora::convergence_time(asr, 0.95);
  row.lifespan60_abs = fedlora::lifespan(asr, 0.60);
  row.lifespan60_post_aw = shift_past_window(row.lifespan60_abs, cfg.fed.window_end);
  return row;
}

std::optional<double> last_present(const std::vector<fedlora::RoundRecord>& records,
                                   std::optional<double> fedlora::RoundRecord::* field) {
  for (auto it = records.rbegin(); it != records.rend(); ++it)
    if ((*it.*field).has_value()) return *(*it.*field);
  return std::nullopt;
}

// A completed matching run: manifest parses, digest and seed agree, artifacts
// are on disk.
bool resume_hit(const fs::path& dir, uint64_t digest, uint64_t seed, fedlora_run_stats* stats) {
  std::ifstream is(dir / "manifest");
  if (!is) return false;
  ordered_json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception&) {
    return false;
  }
  if (!j.is_object() || j.value("config_digest", "") != digest_hex(digest)) return false;
  if (!j.contains("seeds") || !j["seeds"].is_array() || j["seeds"].size() != 1 ||
      j["seeds"][0] != seed)
    return false;
  for (const char* name : {"telemetry.csv", "summary.csv", "final.ckpt"})
    if (!fs::exists(dir / name)) return false;
  if (stats) {
    stats->final_acc = j.value("final_acc", 0.0);
    stats->final_asr = j.value("final_asr", 0.0);
    stats->pretrain_accuracy = j.value("pretrain_accuracy", 0.0);
    stats->pretrain_floor_reached = j.value("pretrain_floor_reached", false) ? 1 : 0;
    stats->trainable_dim = j.value("trainable_dim", uint64_t{0});
    stats->resumed = 1;
  }
  return true;
}

}  // namespace

extern "C" {

const char* fedlora_version(void) { return kVersion; }

const char* fedlora_last_error(void) { return g_error.c_str(); }

fedlora_config* fedlora_config_create(void) {
  return guarded_config([] { return new fedlora_config{}; });
}

fedlora_config* fedlora_config_load(const char* path) {
  return guarded_config([&]() -> fedlora_config* {
    if (!path) throw fedlora::InvalidInputError("config_load: null path");
    return new fedlora_config{fedlora::load_config(path)};
  });
}

fedlora_config* fedlora_config_parse(const char* text) {
  return guarded_config([&]() -> fedlora_config* {
    if (!text) throw fedlora::InvalidInputError("config_parse: null text");
    return new fedlora_config{fedlora::parse_config(text)};
  });
}

fedlora_config* fedlora_config_clone(const fedlora_config* cfg) {
  return guarded_config([&]() -> fedlora_config* {
    if (!cfg) throw fedlora::InvalidInputError("config_clone: null config");
    return new fedlora_config{cfg->cfg};
  });
}

void fedlora_config_free(fedlora_config* cfg) { delete cfg; }

int fedlora_config_set(fedlora_config* cfg, const char* key, const char* value) {
  if (int rc = require(cfg && key && value, "config_set: null argument")) return rc;
  return guarded([&] {
    fedlora::set_config_value(cfg->cfg, key, value);
    return FEDLORA_OK;
  });
}

int fedlora_config_get(const fedlora_config* cfg, const char* key, char* buf, size_t cap) {
  if (int rc = require(cfg && key && buf, "config_get: null argument")) return rc;
  return guarded([&] {
    const std::string value = fedlora::get_config_value(cfg->cfg, key);
    if (value.size() + 1 > cap) throw fedlora::InvalidInputError("config_get: buffer too small");
    std::memcpy(buf, value.c_str(), value.size() + 1);
    return FEDLORA_OK;
  });
}

int fedlora_config_validate(const fedlora_config* cfg) {
  if (int rc = require(cfg != nullptr, "config_validate: null config")) return rc;
  return guarded([&] {
    cfg->cfg.validate();
    return FEDLORA_OK;
  });
}

int fedlora_config_digest(const fedlora_config* cfg, uint64_t* out_digest) {
  if (int rc = require(cfg && out_digest, "config_digest: null argument")) return rc;
  return guarded([&] {
    *out_digest = fedlora::config_digest(cfg->cfg);
    return FEDLORA_OK;
  });
}

int fedlora_config_save(const fedlora_config* cfg, const char* path) {
  if (int rc = require(cfg && path, "config_save: null argument")) return rc;
  return guarded([&] {
    std::ofstream os(path);
    if (!os) throw fedlora::FormatError(std::string("cannot open config file for writing: ") + path);
    os << fedlora::serialize_config(cfg->cfg);
    if (!os) throw fedlora::FormatError(std::string("short write on config file: ") + path);
    return FEDLORA_OK;
  });
}

int fedlora_run(const fedlora_config* cfg, uint64_t seed, const char* out_dir, int workers,
                int resume, fedlora_run_stats* stats) {
  if (int rc = require(cfg && out_dir, "run: null argument")) return rc;
  return guarded([&] {
    if (stats) *stats = fedlora_run_stats{};
    cfg->cfg.validate();
    const uint64_t digest = fedlora::config_digest(cfg->cfg);
    const fs::path dir(out_dir);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw fedlora::FormatError("cannot create output directory: " + dir.string());

    if (resume && resume_hit(dir, digest, seed, stats)) return FEDLORA_OK;

    {
      std::ofstream os(dir / "config.cfg");
      if (!os) throw fedlora::FormatError("cannot open config file for writing: " + (dir / "config.cfg").string());
      os << fedlora::serialize_config(cfg->cfg);
    }

    const fedlora::ExperimentResult res =
        fedlora::run_experiment(cfg->cfg, seed, workers < 1 ? 1 : workers);

    fedlora::write_telemetry_csv((dir / "telemetry.csv").string(), res.records);
    const fedlora::SummaryRow row = summarize_run(cfg->cfg, res.records);
    fedlora::write_summary_csv((dir / "summary.csv").string(), {row});
    fedlora::save_checkpoint((dir / "final.ckpt").string(), res.final_params,
                             res.final_adapters ? &*res.final_adapters : nullptr, digest);
    if (cfg->cfg.attack.kind == fedlora::AttackId::kA3fl)
      fedlora::export_trigger_ppm(res.final_trigger, (dir / "trigger.ppm").string());

    const auto final_acc = last_present(res.records, &fedlora::RoundRecord::acc);
    const auto final_asr = last_present(res.records, &fedlora::RoundRecord::asr);

    ordered_json manifest;
    manifest["version"] = kVersion;
    manifest["config_digest"] = digest_hex(digest);
    manifest["seeds"] = {seed};
    manifest["layout"] = dir.generic_string();
    manifest["final_acc"] = final_acc.value_or(0.0);
    manifest["final_asr"] = final_asr.value_or(0.0);
    manifest["pretrain_accuracy"] = res.pretrain_accuracy;
    manifest["pretrain_floor_reached"] = res.pretrain_floor_reached;
    manifest["trainable_dim"] = static_cast<uint64_t>(res.trainable_dim);
    {
      std::ofstream os(dir / "manifest");
      if (!os) throw fedlora::FormatError("cannot open manifest for writing: " + (dir / "manifest").string());
      os << manifest.dump(2) << "\n";
      if (!os) throw fedlora::FormatError("short write on manifest: " + (dir / "manifest").string());
    }

    if (stats) {
      stats->final_acc = final_acc.value_or(0.0);
      stats->final_asr = final_asr.value_or(0.0);
      stats->pretrain_accuracy = res.pretrain_accuracy;
      stats->pretrain_floor_reached = res.pretrain_floor_reached ? 1 : 0;
      stats->trainable_dim = res.trainable_dim;
      stats->resumed = 0;
    }
    return FEDLORA_OK;
  });
}

int fedlora_plot(const char* const* csv_paths, const char* const* labels, int count,
                 const char* metric, const char* title, int log_y, double aw_marker,
                 double x_split, const char* out_svg) {
  if (int rc = require(csv_paths && labels && metric && out_svg && count > 0,
                       "plot: null argument or empty input set"))
    return rc;
  return guarded([&] {
    const std::string m = metric;
    std::optional<double> fedlora::RoundRecord::* field = nullptr;
    if (m == "acc")
      field = &fedlora::RoundRecord::acc;
    else if (m == "asr")
      field = &fedlora::RoundRecord::asr;
    else if (m == "sigma")
      field = &fedlora::RoundRecord::sigma;
    else
      throw fedlora::InvalidInputError("plot: unknown metric '" + m + "' (want acc|asr|sigma)");

    std::vector<fedlora::PlotSeries> series;
    for (int i = 0; i < count; ++i) {
      if (!csv_paths[i] || !labels[i]) throw fedlora::InvalidInputError("plot: null path or label");
      const auto records = fedlora::read_telemetry_csv(csv_paths[i]);
      fedlora::PlotSeries s;
      s.label = labels[i];
      for (const auto& r : records)
        if ((r.*field).has_value()) s.points.emplace_back(static_cast<double>(r.round), *(r.*field));
      series.push_back(std::move(s));
    }

    fedlora::PlotOptions opt;
    opt.title = title ? title : "";
    opt.y_label = m;
    opt.log_y = log_y != 0;
    opt.aw_marker = aw_marker;
    opt.x_split = x_split;
    fedlora::write_plot_svg(out_svg, series, opt);
    return FEDLORA_OK;
  });
}

int fedlora_combine_summaries(const char* const* csv_paths, int count, const char* out_csv) {
  if (int rc = require(csv_paths && out_csv && count > 0, "combine: null argument or empty input set"))
    return rc;
  return guarded([&] {
    std::vector<fedlora::SummaryRow> rows;
    for (int i = 0; i < count; ++i) {
      if (!csv_paths[i]) throw fedlora::InvalidInputError("combine: null path");
      auto part = fedlora::read_summary_csv(csv_paths[i]);
      rows.insert(rows.end(), part.begin(), part.end());
    }
    fedlora::write_summary_csv(out_csv, fedlora::combine_with_medians(rows));
    return FEDLORA_OK;
  });
}

}  // extern "C"
