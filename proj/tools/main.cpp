// Command-line front end. Everything goes through the C API in fedlora.h; the
// core library is never linked directly.

#include <atomic>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "fedlora.h"

namespace fs = std::filesystem;

namespace {

struct ConfigDeleter {
  void operator()(fedlora_config* p) const { fedlora_config_free(p); }
};
using ConfigPtr = std::unique_ptr<fedlora_config, ConfigDeleter>;

[[noreturn]] void die(int status, const std::string& msg) {
  std::fprintf(stderr, "error: %s\n", msg.c_str());
  std::exit(status ? status : 1);
}

std::pair<std::string, std::string> split_kv(const std::string& spec, const char* what) {
  const size_t eq = spec.find('=');
  if (eq == std::string::npos || eq == 0)
    die(FEDLORA_ERR_INVALID_ARG, std::string(what) + " must look like key=value: " + spec);
  return {spec.substr(0, eq), spec.substr(eq + 1)};
}

ConfigPtr build_config(const std::string& path, const std::vector<std::string>& sets) {
  ConfigPtr cfg(path.empty() ? fedlora_config_create() : fedlora_config_load(path.c_str()));
  if (!cfg) die(FEDLORA_ERR_IO, fedlora_last_error());
  for (const auto& spec : sets) {
    const auto [key, value] = split_kv(spec, "--set");
    if (int rc = fedlora_config_set(cfg.get(), key.c_str(), value.c_str()))
      die(rc, fedlora_last_error());
  }
  if (int rc = fedlora_config_validate(cfg.get())) die(rc, fedlora_last_error());
  return cfg;
}

std::string cfg_get(const fedlora_config* cfg, const std::string& key) {
  char buf[512];
  if (int rc = fedlora_config_get(cfg, key.c_str(), buf, sizeof buf))
    die(rc, fedlora_last_error());
  return buf;
}

uint64_t cfg_digest(const fedlora_config* cfg) {
  uint64_t d = 0;
  if (int rc = fedlora_config_digest(cfg, &d)) die(rc, fedlora_last_error());
  return d;
}

// "7", "1,2,5", or "1..5" (inclusive).
std::vector<uint64_t> parse_seeds(const std::string& spec) {
  std::vector<uint64_t> seeds;
  try {
    const size_t dots = spec.find("..");
    if (dots != std::string::npos) {
      const uint64_t a = std::stoull(spec.substr(0, dots));
      const uint64_t b = std::stoull(spec.substr(dots + 2));
      if (b < a) die(FEDLORA_ERR_INVALID_ARG, "--seeds range is empty: " + spec);
      for (uint64_t s = a; s <= b; ++s) seeds.push_back(s);
      return seeds;
    }
    size_t pos = 0;
    while (pos <= spec.size()) {
      const size_t comma = spec.find(',', pos);
      seeds.push_back(std::stoull(spec.substr(pos, comma - pos)));
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
  } catch (const std::logic_error&) {
    die(FEDLORA_ERR_INVALID_ARG, "cannot parse --seeds value: " + spec);
  }
  return seeds;
}

std::string output_root(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("FEDLORA_OUT"); env && *env) return env;
  return "out";
}

void print_run_line(const std::string& dir, const fedlora_run_stats& s) {
  std::printf("%s %s: acc=%.4f asr=%.4f pretrain_acc=%.4f trainable=%llu\n",
              s.resumed ? "resumed" : "done", dir.c_str(), s.final_acc, s.final_asr,
              s.pretrain_accuracy, static_cast<unsigned long long>(s.trainable_dim));
  if (!s.pretrain_floor_reached)
    std::fprintf(stderr, "warning: pretraining missed the accuracy floor in %s\n", dir.c_str());
}

struct SweepAxis {
  std::string key;
  std::vector<std::string> values;
};

struct SweepJob {
  std::vector<std::pair<std::string, std::string>> cell;  // key=value overrides
  std::string cell_label;
  uint64_t seed = 0;
  std::string dir;
};

int cmd_run(const std::string& config_path, const std::vector<std::string>& sets,
            const std::string& out_flag, uint64_t seed, int jobs, bool resume) {
  const ConfigPtr cfg = build_config(config_path, sets);
  const fs::path dir =
      fs::path(output_root(out_flag)) / cfg_get(cfg.get(), "experiment.name") / "base" /
      std::to_string(seed);
  fedlora_run_stats stats{};
  if (int rc = fedlora_run(cfg.get(), seed, dir.string().c_str(), jobs, resume ? 1 : 0, &stats))
    die(rc, fedlora_last_error());
  print_run_line(dir.string(), stats);
  return 0;
}

int cmd_sweep(const std::string& config_path, const std::vector<std::string>& sets,
              const std::vector<std::string>& axis_specs, const std::string& seeds_spec,
              const std::string& out_flag, int jobs, bool resume) {
  const ConfigPtr base = build_config(config_path, sets);
  const std::string name = cfg_get(base.get(), "experiment.name");
  const fs::path root = fs::path(output_root(out_flag)) / name;

  std::vector<SweepAxis> axes;
  for (const auto& spec : axis_specs) {
    const auto [key, joined] = split_kv(spec, "--axis");
    SweepAxis axis{key, {}};
    size_t pos = 0;
    while (pos <= joined.size()) {
      const size_t comma = joined.find(',', pos);
      axis.values.push_back(joined.substr(pos, comma - pos));
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    if (axis.values.empty()) die(FEDLORA_ERR_INVALID_ARG, "--axis has no values: " + spec);
    // Fail fast on a bad key before spawning runs.
    ConfigPtr probe(fedlora_config_clone(base.get()));
    if (!probe) die(FEDLORA_ERR_RUNTIME, fedlora_last_error());
    if (int rc = fedlora_config_set(probe.get(), axis.key.c_str(), axis.values[0].c_str()))
      die(rc, fedlora_last_error());
    axes.push_back(std::move(axis));
  }
  const std::vector<uint64_t> seeds = parse_seeds(seeds_spec);

  // Cartesian product, first axis outermost.
  std::vector<std::vector<std::pair<std::string, std::string>>> cells{{}};
  for (const auto& axis : axes) {
    std::vector<std::vector<std::pair<std::string, std::string>>> next;
    for (const auto& cell : cells)
      for (const auto& value : axis.values) {
        auto grown = cell;
        grown.emplace_back(axis.key, value);
        next.push_back(std::move(grown));
      }
    cells = std::move(next);
  }

  std::vector<SweepJob> plan;
  for (const auto& cell : cells) {
    std::string label;
    for (const auto& [k, v] : cell) label += (label.empty() ? "" : ",") + k + "=" + v;
    if (label.empty()) label = "base";
    for (uint64_t seed : seeds) {
      SweepJob job;
      job.cell = cell;
      job.cell_label = label;
      job.seed = seed;
      job.dir = (root / label / std::to_string(seed)).string();
      plan.push_back(std::move(job));
    }
  }

  std::atomic<size_t> cursor{0};
  std::mutex io_mutex;
  std::vector<std::string> failures;
  const int pool = std::max(1, std::min<int>(jobs, static_cast<int>(plan.size())));
  auto worker = [&] {
    while (true) {
      const size_t i = cursor.fetch_add(1);
      if (i >= plan.size()) return;
      const SweepJob& job = plan[i];
      ConfigPtr cfg(fedlora_config_clone(base.get()));
      std::string err;
      if (!cfg) err = fedlora_last_error();
      for (const auto& [k, v] : job.cell) {
        if (!err.empty()) break;
        if (fedlora_config_set(cfg.get(), k.c_str(), v.c_str())) err = fedlora_last_error();
      }
      fedlora_run_stats stats{};
      if (err.empty() && fedlora_run(cfg.get(), job.seed, job.dir.c_str(), 1, resume ? 1 : 0, &stats))
        err = fedlora_last_error();
      std::lock_guard<std::mutex> lock(io_mutex);
      if (err.empty())
        print_run_line(job.dir, stats);
      else
        failures.push_back(job.dir + ": " + err);
    }
  };
  if (pool == 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (int i = 0; i < pool; ++i) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }
  if (!failures.empty()) {
    for (const auto& f : failures) std::fprintf(stderr, "error: %s\n", f.c_str());
    return 1;
  }

  std::vector<std::string> summary_paths;
  std::vector<const char*> summary_ptrs;
  for (const auto& job : plan) summary_paths.push_back(job.dir + "/summary.csv");
  for (const auto& p : summary_paths) summary_ptrs.push_back(p.c_str());
  const std::string combined = (root / "combined.csv").string();
  if (int rc = fedlora_combine_summaries(summary_ptrs.data(), static_cast<int>(summary_ptrs.size()),
                                         combined.c_str()))
    die(rc, fedlora_last_error());
  std::printf("combined %zu runs into %s\n", plan.size(), combined.c_str());
  return 0;
}

int cmd_plot(const std::vector<std::string>& csvs, std::vector<std::string> labels,
             const std::string& metric, const std::string& title, const std::string& out,
             bool log_y, double aw_marker, double x_split) {
  if (labels.size() > csvs.size())
    die(FEDLORA_ERR_INVALID_ARG, "more --label values than --csv inputs");
  while (labels.size() < csvs.size()) {
    const fs::path p = csvs[labels.size()];
    // Directory name is the more telling default: telemetry files share a name.
    labels.push_back(p.has_parent_path() ? p.parent_path().filename().string()
                                         : p.stem().string());
  }
  std::vector<const char*> csv_ptrs, label_ptrs;
  for (const auto& c : csvs) csv_ptrs.push_back(c.c_str());
  for (const auto& l : labels) label_ptrs.push_back(l.c_str());
  if (int rc = fedlora_plot(csv_ptrs.data(), label_ptrs.data(), static_cast<int>(csvs.size()),
                            metric.c_str(), title.c_str(), log_y ? 1 : 0, aw_marker, x_split,
                            out.c_str()))
    die(rc, fedlora_last_error());
  std::printf("wrote %s\n", out.c_str());
  return 0;
}

int cmd_validate(const std::string& config_path, const std::vector<std::string>& sets) {
  const ConfigPtr cfg = build_config(config_path, sets);
  std::printf("ok name=%s digest=%016llx\n", cfg_get(cfg.get(), "experiment.name").c_str(),
              static_cast<unsigned long long>(cfg_digest(cfg.get())));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{std::string("fedlora ") + fedlora_version() +
               " - deterministic federated LoRA backdoor simulator"};
  app.require_subcommand(1);

  std::string config_path, out_flag, seeds_spec = "1", metric = "asr", title, plot_out = "plot.svg";
  std::vector<std::string> sets, axis_specs, csvs, labels;
  uint64_t seed = 1;
  int jobs = 1;
  bool resume = false, log_y = false;
  double aw_marker = -1.0, x_split = -1.0;

  auto add_config_flags = [&](CLI::App* cmd, bool config_required) {
    auto* opt = cmd->add_option("--config", config_path, "experiment config file (INI)");
    if (config_required) opt->required();
    cmd->add_option("--set", sets, "override a config key, e.g. --set lora.rank=8")
        ->take_all();
  };

  CLI::App* run = app.add_subcommand("run", "run one experiment");
  add_config_flags(run, true);
  run->add_option("--seed", seed, "experiment seed");
  run->add_option("--out", out_flag, "output root (default $FEDLORA_OUT or ./out)");
  run->add_option("--jobs", jobs, "client-round worker threads")->check(CLI::PositiveNumber);
  run->add_flag("--resume", resume, "skip when a matching completed run exists");

  CLI::App* sweep = app.add_subcommand("sweep", "run a grid of experiments");
  add_config_flags(sweep, true);
  sweep->add_option("--axis", axis_specs,
                    "sweep axis as key=v1,v2,... (repeatable, Cartesian product)")
      ->take_all();
  sweep->add_option("--seeds", seeds_spec, "seeds: N, a..b, or comma list (default 1)");
  sweep->add_option("--out", out_flag, "output root (default $FEDLORA_OUT or ./out)");
  sweep->add_option("--jobs", jobs, "parallel runs")->check(CLI::PositiveNumber);
  sweep->add_flag("--resume", resume, "skip completed matching runs");

  CLI::App* plot = app.add_subcommand("plot", "render telemetry CSVs as an SVG");
  plot->add_option("--csv", csvs, "telemetry CSV (repeatable)")->required()->take_all();
  plot->add_option("--label", labels, "series label (repeatable, defaults to run dir)")
      ->take_all();
  plot->add_option("--metric", metric, "acc | asr | sigma")
      ->check(CLI::IsMember({"acc", "asr", "sigma"}));
  plot->add_option("--title", title, "plot title");
  plot->add_option("--out", plot_out, "output SVG path");
  plot->add_flag("--log-y", log_y, "logarithmic y axis");
  plot->add_option("--aw-marker", aw_marker, "vertical marker round (attack-window end)");
  plot->add_option("--x-split", x_split, "compress rounds after this x (piecewise axis)");

  CLI::App* validate = app.add_subcommand("validate", "check a config and print its digest");
  add_config_flags(validate, true);

  CLI11_PARSE(app, argc, argv);

  if (run->parsed()) return cmd_run(config_path, sets, out_flag, seed, jobs, resume);
  if (sweep->parsed())
    return cmd_sweep(config_path, sets, axis_specs, seeds_spec, out_flag, jobs, resume);
  if (plot->parsed())
    return cmd_plot(csvs, labels, metric, title, plot_out, log_y, aw_marker, x_split);
  return cmd_validate(config_path, sets);
}
