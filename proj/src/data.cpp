#include "data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>

namespace fedlora {

void Dataset::validate() const {
  if (h < 1 || w < 1 || c < 1 || classes < 1) throw InvalidInputError("dataset: bad shape");
  if (images.size() != static_cast<size_t>(n) * pixel_count())
    throw InvalidInputError("dataset: image buffer size mismatch");
  if (labels.size() != static_cast<size_t>(n)) throw InvalidInputError("dataset: label count mismatch");
  for (int y : labels)
    if (y < 0 || y >= classes) throw InvalidInputError("dataset: label out of range");
  for (double v : images)
    if (v < 0.0 || v > 1.0) throw InvalidInputError("dataset: pixel out of [0,1]");
}

Batch Dataset::batch() const {
  Batch b;
  b.images = images;
  b.labels = labels;
  b.n = n;
  return b;
}

Batch Dataset::batch(const std::vector<int>& idx) const {
  Batch b;
  const size_t px = pixel_count();
  b.n = static_cast<int>(idx.size());
  b.images.resize(idx.size() * px);
  b.labels.resize(idx.size());
  for (size_t i = 0; i < idx.size(); ++i) {
    std::copy(images.begin() + idx[i] * px, images.begin() + (idx[i] + 1) * px, b.images.begin() + i * px);
    b.labels[i] = labels[idx[i]];
  }
  return b;
}

Dataset Dataset::subset(const std::vector<int>& idx) const {
  Dataset out;
  out.h = h;
  out.w = w;
  out.c = c;
  out.classes = classes;
  out.n = static_cast<int>(idx.size());
  const size_t px = pixel_count();
  out.images.resize(idx.size() * px);
  out.labels.resize(idx.size());
  for (size_t i = 0; i < idx.size(); ++i) {
    std::copy(images.begin() + idx[i] * px, images.begin() + (idx[i] + 1) * px,
              out.images.begin() + i * px);
    out.labels[i] = labels[idx[i]];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic task

namespace {

// Low-frequency field from a 3x3 grid of random cos/sin coefficients, higher
// frequencies damped. Standardized to zero mean / unit std over the image.
std::vector<double> class_pattern(const SynthConfig& cfg, RngStream rng) {
  const int H = cfg.image_h, W = cfg.image_w, C = cfg.channels;
  std::vector<double> field(static_cast<size_t>(H) * W * C, 0.0);
  constexpr int kFreq = 3;
  constexpr double kTau = 6.283185307179586;
  for (int ch = 0; ch < C; ++ch) {
    for (int i = 0; i < kFreq; ++i) {
      for (int j = 0; j < kFreq; ++j) {
        const double damp = 1.0 / (1.0 + i + j);
        const double a = rng.next_normal() * damp;
        const double b = rng.next_normal() * damp;
        if (i == 0 && j == 0) continue;  // skip the DC term, keep draw order stable
        for (int y = 0; y < H; ++y) {
          for (int x = 0; x < W; ++x) {
            const double phase = kTau * (i * static_cast<double>(x) / W + j * static_cast<double>(y) / H);
            field[(static_cast<size_t>(y) * W + x) * C + ch] += a * std::cos(phase) + b * std::sin(phase);
          }
        }
      }
    }
  }
  double mean = 0.0;
  for (double v : field) mean += v;
  mean /= static_cast<double>(field.size());
  double var = 0.0;
  for (double v : field) var += (v - mean) * (v - mean);
  var /= static_cast<double>(field.size());
  const double inv = var > 0.0 ? 1.0 / std::sqrt(var) : 0.0;
  for (double& v : field) v = (v - mean) * inv;
  return field;
}

inline double quantize8(double v) {
  v = std::clamp(v, 0.0, 1.0);
  return std::round(v * 255.0) / 255.0;
}

}  // namespace

Dataset synth_generate(const SynthConfig& cfg, RngStream rng) {
  if (cfg.classes < 2) throw ConfigError("synth: class count must be >= 2");
  if (cfg.per_class < 1) throw ConfigError("synth: per_class must be >= 1");
  if (cfg.noise < 0.0) throw ConfigError("synth: noise must be >= 0");
  Dataset ds;
  ds.h = cfg.image_h;
  ds.w = cfg.image_w;
  ds.c = cfg.channels;
  ds.classes = cfg.classes;
  ds.n = cfg.classes * cfg.per_class;
  const size_t px = ds.pixel_count();
  ds.images.resize(static_cast<size_t>(ds.n) * px);
  ds.labels.resize(ds.n);

  RngStream root = rng.derive({kRngSynth, cfg.variant});
  for (int k = 0; k < cfg.classes; ++k) {
    const std::vector<double> pattern = class_pattern(cfg, root.derive({0, static_cast<uint64_t>(k)}));
    for (int s = 0; s < cfg.per_class; ++s) {
      const int sample = k * cfg.per_class + s;
      RngStream noise_rng = root.derive({1, static_cast<uint64_t>(k), static_cast<uint64_t>(s)});
      double* img = &ds.images[static_cast<size_t>(sample) * px];
      for (size_t i = 0; i < px; ++i)
        img[i] = quantize8(0.5 + cfg.strength * pattern[i] + cfg.noise * noise_rng.next_normal());
      ds.labels[sample] = k;
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// IDX ingest/export

namespace {

constexpr uint32_t kIdxImages = 0x00000803;
constexpr uint32_t kIdxLabels = 0x00000801;

void write_be32(std::ostream& os, uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_be32(std::istream& is, const std::string& path) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw FormatError("truncated IDX file: " + path);
  return (static_cast<uint32_t>(b[0]) << 24) | (static_cast<uint32_t>(b[1]) << 16) |
         (static_cast<uint32_t>(b[2]) << 8) | static_cast<uint32_t>(b[3]);
}

}  // namespace

Dataset ingest_idx(const std::string& image_path, const std::string& label_path, int channels) {
  if (channels < 1) throw InvalidInputError("ingest_idx: channels must be >= 1");
  std::ifstream imgs(image_path, std::ios::binary);
  if (!imgs) throw FormatError("cannot open IDX image file: " + image_path);
  if (read_be32(imgs, image_path) != kIdxImages)
    throw FormatError("bad IDX image magic: " + image_path);
  const uint32_t n = read_be32(imgs, image_path);
  const uint32_t rows = read_be32(imgs, image_path);
  const uint32_t cols = read_be32(imgs, image_path);
  if (cols % channels != 0)
    throw FormatError("IDX column count not divisible by channels: " + image_path);

  std::ifstream labs(label_path, std::ios::binary);
  if (!labs) throw FormatError("cannot open IDX label file: " + label_path);
  if (read_be32(labs, label_path) != kIdxLabels)
    throw FormatError("bad IDX label magic: " + label_path);
  const uint32_t n_labels = read_be32(labs, label_path);
  if (n_labels != n)
    throw FormatError("IDX image/label count mismatch: " + image_path + " vs " + label_path);

  Dataset ds;
  ds.n = static_cast<int>(n);
  ds.h = static_cast<int>(rows);
  ds.w = static_cast<int>(cols) / channels;
  ds.c = channels;
  const size_t total = static_cast<size_t>(n) * rows * cols;
  std::vector<unsigned char> raw(total);
  imgs.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(total));
  if (!imgs) throw FormatError("truncated IDX file: " + image_path);
  ds.images.resize(total);
  for (size_t i = 0; i < total; ++i) ds.images[i] = raw[i] / 255.0;

  std::vector<unsigned char> lraw(n);
  labs.read(reinterpret_cast<char*>(lraw.data()), static_cast<std::streamsize>(n));
  if (!labs) throw FormatError("truncated IDX file: " + label_path);
  ds.labels.resize(n);
  int max_label = 0;
  for (size_t i = 0; i < n; ++i) {
    ds.labels[i] = lraw[i];
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.classes = max_label + 1;
  return ds;
}

void export_idx(const Dataset& ds, const std::string& image_path, const std::string& label_path) {
  std::ofstream imgs(image_path, std::ios::binary);
  if (!imgs) throw FormatError("cannot open IDX image file for writing: " + image_path);
  write_be32(imgs, kIdxImages);
  write_be32(imgs, static_cast<uint32_t>(ds.n));
  write_be32(imgs, static_cast<uint32_t>(ds.h));
  write_be32(imgs, static_cast<uint32_t>(ds.w * ds.c));
  std::vector<unsigned char> raw(ds.images.size());
  for (size_t i = 0; i < ds.images.size(); ++i)
    raw[i] = static_cast<unsigned char>(std::lround(std::clamp(ds.images[i], 0.0, 1.0) * 255.0));
  imgs.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!imgs) throw FormatError("short write on IDX image file: " + image_path);

  std::ofstream labs(label_path, std::ios::binary);
  if (!labs) throw FormatError("cannot open IDX label file for writing: " + label_path);
  write_be32(labs, kIdxLabels);
  write_be32(labs, static_cast<uint32_t>(ds.n));
  std::vector<unsigned char> lraw(ds.labels.size());
  for (size_t i = 0; i < ds.labels.size(); ++i) lraw[i] = static_cast<unsigned char>(ds.labels[i]);
  labs.write(reinterpret_cast<const char*>(lraw.data()), static_cast<std::streamsize>(lraw.size()));
  if (!labs) throw FormatError("short write on IDX label file: " + label_path);
}

// ---------------------------------------------------------------------------
// Dirichlet partition

namespace {

// Marsaglia-Tsang gamma variate; alpha < 1 boosted via G(a) = G(a+1)*U^(1/a).
double sample_gamma(double alpha, RngStream& rng) {
  if (alpha < 1.0) {
    const double u = rng.next_double();
    return sample_gamma(alpha + 1.0, rng) * std::pow(std::max(u, 1e-300), 1.0 / alpha);
  }
  const double d = alpha - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x, v;
    do {
      x = rng.next_normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = rng.next_double();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
    if (std::log(std::max(u, 1e-300)) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
  }
}

std::vector<double> sample_dirichlet(double alpha, int k, RngStream& rng) {
  std::vector<double> w(k);
  double sum = 0.0;
  for (int i = 0; i < k; ++i) {
    w[i] = sample_gamma(alpha, rng);
    sum += w[i];
  }
  for (double& v : w) v /= sum;
  return w;
}

// Largest-remainder apportionment of `total` items by proportions `w`.
std::vector<int> apportion(const std::vector<double>& w, int total) {
  const int k = static_cast<int>(w.size());
  std::vector<int> counts(k);
  std::vector<std::pair<double, int>> rema(k);
  int assigned = 0;
  for (int i = 0; i < k; ++i) {
    const double exact = w[i] * total;
    counts[i] = static_cast<int>(std::floor(exact));
    assigned += counts[i];
    rema[i] = {exact - counts[i], i};
  }
  std::stable_sort(rema.begin(), rema.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (int i = 0; i < total - assigned; ++i) counts[rema[i].second]++;
  return counts;
}

}  // namespace

Partition dirichlet_partition(const Dataset& ds, int n_clients, double alpha, double lo_share,
                              double hi_share, RngStream rng) {
  if (n_clients < 1) throw ConfigError("partition: client count must be >= 1");
  if (alpha <= 0.0) throw ConfigError("partition: alpha must be > 0");
  if (lo_share < 0.0 || hi_share < lo_share) throw ConfigError("partition: bad share bounds");
  if (n_clients * hi_share < 1.0 - 1e-12)
    throw ConfigError("partition: bounds infeasible, N*hi < 100%");
  if (n_clients * lo_share > 1.0 + 1e-12)
    throw ConfigError("partition: bounds infeasible, N*lo > 100%");
  if (ds.n < 1) throw InvalidInputError("partition: empty dataset");

  std::vector<std::vector<int>> by_class(ds.classes);
  for (int i = 0; i < ds.n; ++i) by_class[ds.labels[i]].push_back(i);

  RngStream root = rng.derive(kRngPartition);
  constexpr int kMaxAttempts = 1000;
  double worst_share = -1.0;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    RngStream draw = root.derive(static_cast<uint64_t>(attempt));
    Partition part;
    part.clients.assign(n_clients, {});
    for (int k = 0; k < ds.classes; ++k) {
      RngStream class_rng = draw.derive(static_cast<uint64_t>(k));
      const std::vector<double> w = sample_dirichlet(alpha, n_clients, class_rng);
      const std::vector<int> counts = apportion(w, static_cast<int>(by_class[k].size()));
      std::vector<int> order = class_rng.shuffled_indices(static_cast<int>(by_class[k].size()));
      int pos = 0;
      for (int cl = 0; cl < n_clients; ++cl)
        for (int j = 0; j < counts[cl]; ++j) part.clients[cl].push_back(by_class[k][order[pos++]]);
    }
    bool ok = true;
    for (int cl = 0; cl < n_clients && ok; ++cl) {
      const double share = static_cast<double>(part.clients[cl].size()) / ds.n;
      worst_share = std::max(worst_share, std::abs(share - 0.5 * (lo_share + hi_share)));
      if (share < lo_share - 1e-12 || share > hi_share + 1e-12) ok = false;
    }
    if (ok) {
      for (auto& cl : part.clients) std::sort(cl.begin(), cl.end());
      return part;
    }
  }
  throw ConfigError("partition: retry budget exhausted after 1000 attempts (alpha=" +
                    std::to_string(alpha) + ", bounds [" + std::to_string(lo_share) + "," +
                    std::to_string(hi_share) + "], N=" + std::to_string(n_clients) +
                    "); worst deviation from band center " + std::to_string(worst_share));
}

// ---------------------------------------------------------------------------
// Triggers and poisoning

TriggerSpec TriggerSpec::solid(int row, int col, int height, int width, const std::vector<double>& color,
                               int target) {
  TriggerSpec t;
  t.row = row;
  t.col = col;
  t.height = height;
  t.width = width;
  t.channels = static_cast<int>(color.size());
  t.target = target;
  t.pixels.resize(static_cast<size_t>(height) * width * color.size());
  for (int i = 0; i < height * width; ++i)
    for (size_t ch = 0; ch < color.size(); ++ch) t.pixels[i * color.size() + ch] = color[ch];
  return t;
}

void TriggerSpec::validate(int image_h, int image_w, int image_c) const {
  if (height < 1 || width < 1) throw ConfigError("trigger: patch must be at least 1x1");
  if (row < 0 || col < 0 || row + height > image_h || col + width > image_w)
    throw ConfigError("trigger: patch out of image bounds");
  if (channels != image_c) throw ConfigError("trigger: channel count mismatch");
  if (pixels.size() != static_cast<size_t>(height) * width * channels)
    throw ConfigError("trigger: pattern tensor size mismatch");
  for (double v : pixels)
    if (v < 0.0 || v > 1.0) throw ConfigError("trigger: pixel out of [0,1]");
  if (target < 0) throw ConfigError("trigger: target label must be >= 0");
}

void apply_trigger(std::vector<double>& image, int image_h, int image_w, int image_c,
                   const TriggerSpec& t) {
  t.validate(image_h, image_w, image_c);
  for (int dy = 0; dy < t.height; ++dy)
    for (int dx = 0; dx < t.width; ++dx)
      for (int ch = 0; ch < image_c; ++ch)
        image[((static_cast<size_t>(t.row) + dy) * image_w + (t.col + dx)) * image_c + ch] =
            t.pixels[(static_cast<size_t>(dy) * t.width + dx) * image_c + ch];
}

Dataset poison(const Dataset& ds, const TriggerSpec& t, double ratio, RngStream rng) {
  if (ratio < 0.0 || ratio > 1.0) throw ConfigError("poison: ratio must be in [0,1]");
  t.validate(ds.h, ds.w, ds.c);
  if (t.target < 0 || t.target >= ds.classes) throw ConfigError("poison: target label out of range");
  Dataset out = ds;
  const int count = static_cast<int>(std::llround(ratio * ds.n));
  if (count == 0) return out;
  RngStream pick = rng.derive(kRngPoisonSubset);
  const std::vector<int> subset = pick.sample_without_replacement(ds.n, count);
  const size_t px = ds.pixel_count();
  for (int i : subset) {
    std::vector<double> img(out.images.begin() + i * px, out.images.begin() + (i + 1) * px);
    apply_trigger(img, ds.h, ds.w, ds.c, t);
    std::copy(img.begin(), img.end(), out.images.begin() + i * px);
    out.labels[i] = t.target;
  }
  return out;
}

std::array<TriggerSpec, 4> dba_split(const TriggerSpec& t) {
  if (t.height < 2 || t.width < 2) throw ConfigError("dba_split: patch must be at least 2x2");
  const int h1 = (t.height + 1) / 2, h2 = t.height - h1;
  const int w1 = (t.width + 1) / 2, w2 = t.width - w1;
  auto carve = [&](int r0, int c0, int hh, int ww) {
    TriggerSpec q;
    q.row = t.row + r0;
    q.col = t.col + c0;
    q.height = hh;
    q.width = ww;
    q.channels = t.channels;
    q.target = t.target;
    q.pixels.resize(static_cast<size_t>(hh) * ww * t.channels);
    for (int dy = 0; dy < hh; ++dy)
      for (int dx = 0; dx < ww; ++dx)
        for (int ch = 0; ch < t.channels; ++ch)
          q.pixels[(static_cast<size_t>(dy) * ww + dx) * t.channels + ch] =
              t.pixels[(static_cast<size_t>(r0 + dy) * t.width + (c0 + dx)) * t.channels + ch];
    return q;
  };
  return {carve(0, 0, h1, w1), carve(0, w1, h1, w2), carve(h1, 0, h2, w1), carve(h1, w1, h2, w2)};
}

PoisonedTestset build_poisoned_testset(const Dataset& test, const TriggerSpec& t) {
  t.validate(test.h, test.w, test.c);
  std::vector<int> keep;
  for (int i = 0; i < test.n; ++i)
    if (test.labels[i] != t.target) keep.push_back(i);
  PoisonedTestset out;
  out.target = t.target;
  out.data = test.subset(keep);
  const size_t px = out.data.pixel_count();
  for (int i = 0; i < out.data.n; ++i) {
    std::vector<double> img(out.data.images.begin() + i * px, out.data.images.begin() + (i + 1) * px);
    apply_trigger(img, test.h, test.w, test.c, t);
    std::copy(img.begin(), img.end(), out.data.images.begin() + i * px);
  }
  return out;
}

}  // namespace fedlora
