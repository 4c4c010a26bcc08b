#pragma once

#include <array>
#include <string>
#include <vector>

#include "model.hpp"
#include "numkit.hpp"

namespace fedlora {

// Flat image classification dataset, pixel values in [0,1].
struct Dataset {
  int h = 0, w = 0, c = 0;
  int classes = 0;
  int n = 0;
  std::vector<double> images;  // n * h * w * c
  std::vector<int> labels;

  size_t pixel_count() const { return static_cast<size_t>(h) * w * c; }
  void validate() const;  // throws InvalidInputError

  Batch batch() const;
  Batch batch(const std::vector<int>& idx) const;
  Dataset subset(const std::vector<int>& idx) const;
};

// Synthetic task: each class is a distinct low-frequency spatial pattern plus
// per-sample pixel noise, quantized to 8-bit levels so IDX export round-trips
// exactly. `variant` selects an independent pattern family (pretext tasks).
struct SynthConfig {
  int classes = 5;
  int per_class = 400;
  int image_h = 16;
  int image_w = 16;
  int channels = 3;
  double noise = 0.18;     // per-pixel gaussian noise std
  double strength = 0.22;  // pattern amplitude around mid-grey
  uint64_t variant = 0;
};

Dataset synth_generate(const SynthConfig& cfg, RngStream rng);

// IDX-format ingest/export (magic 0x00000803 images / 0x00000801 labels,
// big-endian dims, unsigned bytes). Multi-channel images fold channels into
// the last dimension on disk; pass `channels` to unfold on ingest.
Dataset ingest_idx(const std::string& image_path, const std::string& label_path, int channels = 1);
void export_idx(const Dataset& ds, const std::string& image_path, const std::string& label_path);

struct Partition {
  std::vector<std::vector<int>> clients;  // per-client index lists, disjoint, covering
};

// Per-class proportions drawn Dirichlet(alpha) across clients; whole-partition
// resampling (1000-attempt cap) until every client's share of the global
// dataset lies in [lo_share, hi_share].
Partition dirichlet_partition(const Dataset& ds, int n_clients, double alpha, double lo_share,
                              double hi_share, RngStream rng);

// Square pixel patch stamped over the image at (row, col); target label y*.
struct TriggerSpec {
  int row = 0, col = 0;
  int height = 5, width = 5;
  int channels = 3;
  std::vector<double> pixels;  // height * width * channels
  int target = 2;

  static TriggerSpec solid(int row, int col, int height, int width, const std::vector<double>& color,
                           int target);
  void validate(int image_h, int image_w, int image_c) const;  // throws ConfigError
};

// In-place stamp of the patch; pixels outside the patch untouched.
void apply_trigger(std::vector<double>& image, int image_h, int image_w, int image_c,
                   const TriggerSpec& t);

// Copy of `ds` with a seeded round(ratio*n)-subset triggered and relabeled y*.
Dataset poison(const Dataset& ds, const TriggerSpec& t, double ratio, RngStream rng);

// Quadrant decomposition, ceiling split (top-left gets the larger share).
std::array<TriggerSpec, 4> dba_split(const TriggerSpec& t);

// Triggered copies of every test sample whose true label differs from y*;
// labels keep the TRUE class (the attack succeeds when y* is predicted).
struct PoisonedTestset {
  Dataset data;
  int target = 0;
};
PoisonedTestset build_poisoned_testset(const Dataset& test, const TriggerSpec& t);

}  // namespace fedlora
