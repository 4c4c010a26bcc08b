#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <vector>

#include "data.hpp"
#include "numkit.hpp"

using namespace fedlora;

namespace {

SynthConfig small_synth() {
  SynthConfig cfg;
  cfg.classes = 4;
  cfg.per_class = 30;
  cfg.image_h = 8;
  cfg.image_w = 8;
  cfg.channels = 3;
  return cfg;
}

std::filesystem::path work_dir() {
  const auto dir = std::filesystem::temp_directory_path() / "fedlora_test_data";
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("synthetic datasets have documented shape and quantized pixels") {
  const SynthConfig cfg = small_synth();
  const Dataset ds = synth_generate(cfg, RngStream(1));
  CHECK(ds.n == cfg.classes * cfg.per_class);
  CHECK(ds.h == cfg.image_h);
  CHECK(ds.w == cfg.image_w);
  CHECK(ds.c == cfg.channels);
  CHECK(ds.classes == cfg.classes);
  CHECK(ds.images.size() == static_cast<size_t>(ds.n) * ds.pixel_count());
  ds.validate();

  std::vector<int> counts(cfg.classes, 0);
  for (int y : ds.labels) ++counts[y];
  for (int c : counts) CHECK(c == cfg.per_class);

  for (double v : ds.images) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
    const double scaled = v * 255.0;
    CHECK(std::fabs(scaled - std::round(scaled)) <= 1e-9);  // 8-bit levels
  }
}

TEST_CASE("synthetic generation replays per seed and differs across variants") {
  const SynthConfig cfg = small_synth();
  const Dataset a = synth_generate(cfg, RngStream(7));
  const Dataset b = synth_generate(cfg, RngStream(7));
  CHECK(a.images == b.images);
  CHECK(a.labels == b.labels);

  const Dataset c = synth_generate(cfg, RngStream(8));
  CHECK(a.images != c.images);

  SynthConfig pretext = cfg;
  pretext.variant = 1;
  const Dataset d = synth_generate(pretext, RngStream(7));
  CHECK(a.images != d.images);
}

TEST_CASE("classes are separable by their mean patterns") {
  SynthConfig cfg = small_synth();
  cfg.per_class = 60;
  const Dataset ds = synth_generate(cfg, RngStream(3));
  const size_t px = ds.pixel_count();

  // Nearest-centroid on a held-out half.
  std::vector<std::vector<double>> centroid(cfg.classes, std::vector<double>(px, 0.0));
  std::vector<int> train_count(cfg.classes, 0);
  std::vector<int> eval_idx;
  for (int i = 0; i < ds.n; ++i) {
    if (i % 2 == 0) {
      const int y = ds.labels[i];
      ++train_count[y];
      for (size_t j = 0; j < px; ++j) centroid[y][j] += ds.images[i * px + j];
    } else {
      eval_idx.push_back(i);
    }
  }
  for (int y = 0; y < cfg.classes; ++y)
    for (size_t j = 0; j < px; ++j) centroid[y][j] /= train_count[y];

  int correct = 0;
  for (int i : eval_idx) {
    int best = -1;
    double best_d = 0;
    for (int y = 0; y < cfg.classes; ++y) {
      double d = 0;
      for (size_t j = 0; j < px; ++j) {
        const double diff = ds.images[i * px + j] - centroid[y][j];
        d += diff * diff;
      }
      if (best < 0 || d < best_d) {
        best = y;
        best_d = d;
      }
    }
    correct += best == ds.labels[i] ? 1 : 0;
  }
  const double acc = static_cast<double>(correct) / eval_idx.size();
  CHECK(acc > 0.9);  // patterns dominate the noise
}

TEST_CASE("idx files round-trip bit-exactly") {
  const Dataset ds = synth_generate(small_synth(), RngStream(4));
  const auto dir = work_dir();
  const std::string img = (dir / "t.images.idx").string();
  const std::string lab = (dir / "t.labels.idx").string();
  export_idx(ds, img, lab);

  const Dataset back = ingest_idx(img, lab, ds.c);
  CHECK(back.h == ds.h);
  CHECK(back.w == ds.w);
  CHECK(back.c == ds.c);
  CHECK(back.n == ds.n);
  CHECK(back.images == ds.images);
  CHECK(back.labels == ds.labels);

  // Bad magic rejected.
  {
    std::ofstream os(dir / "bad.idx", std::ios::binary);
    const char junk[8] = {0, 0, 9, 9, 0, 0, 0, 1};
    os.write(junk, 8);
  }
  CHECK_THROWS_AS(ingest_idx((dir / "bad.idx").string(), lab, ds.c), FormatError);

  // Truncated image payload rejected.
  {
    std::ifstream is(img, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    bytes.resize(bytes.size() - 10);
    std::ofstream os(dir / "trunc.idx", std::ios::binary);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  CHECK_THROWS_AS(ingest_idx((dir / "trunc.idx").string(), lab, ds.c), FormatError);
  CHECK_THROWS_AS(ingest_idx((dir / "nope.idx").string(), lab, ds.c), FormatError);
}

TEST_CASE("dirichlet partition covers, respects bounds, and replays") {
  SynthConfig cfg = small_synth();
  cfg.per_class = 100;
  const Dataset ds = synth_generate(cfg, RngStream(5));
  const int n_clients = 10;
  const Partition part = dirichlet_partition(ds, n_clients, 0.9, 0.02, 0.3, RngStream(6));
  REQUIRE(part.clients.size() == static_cast<size_t>(n_clients));

  std::set<int> seen;
  for (const auto& idx : part.clients) {
    CHECK(std::is_sorted(idx.begin(), idx.end()));
    const double share = static_cast<double>(idx.size()) / ds.n;
    CHECK(share >= 0.02 - 1e-9);
    CHECK(share <= 0.3 + 1e-9);
    for (int i : idx) {
      CHECK(seen.insert(i).second);  // disjoint
      CHECK(i >= 0);
      CHECK(i < ds.n);
    }
  }
  CHECK(seen.size() == static_cast<size_t>(ds.n));  // covering

  const Partition again = dirichlet_partition(ds, n_clients, 0.9, 0.02, 0.3, RngStream(6));
  CHECK(again.clients == part.clients);
  const Partition other = dirichlet_partition(ds, n_clients, 0.9, 0.02, 0.3, RngStream(7));
  CHECK(other.clients != part.clients);

  // Non-IID: class mixes differ across clients.
  std::vector<double> class0_share;
  for (const auto& idx : part.clients) {
    int c0 = 0;
    for (int i : idx) c0 += ds.labels[i] == 0 ? 1 : 0;
    class0_share.push_back(static_cast<double>(c0) / idx.size());
  }
  const auto [mn, mx] = std::minmax_element(class0_share.begin(), class0_share.end());
  CHECK(*mx - *mn > 0.05);
}

TEST_CASE("infeasible partition bounds fail fast or exhaust") {
  const Dataset ds = synth_generate(small_synth(), RngStream(8));
  // 10 clients capped at 5% each can hold at most half the data.
  CHECK_THROWS_AS(dirichlet_partition(ds, 10, 0.9, 0.0, 0.05, RngStream(1)), ConfigError);
  // Floors of 20% each demand twice the data.
  CHECK_THROWS_AS(dirichlet_partition(ds, 10, 0.9, 0.2, 1.0, RngStream(1)), ConfigError);
  // Legal but statistically unreachable band: a concentrated draw (small
  // alpha) almost never lands all clients inside [9%, 11%], so the 1000
  // resampling attempts run out.
  CHECK_THROWS_AS(dirichlet_partition(ds, 10, 0.05, 0.09, 0.11, RngStream(1)), ConfigError);
}

TEST_CASE("triggers stamp exactly their patch") {
  const TriggerSpec t = TriggerSpec::solid(1, 2, 2, 3, {1.0, 0.0, 0.0}, 2);
  t.validate(8, 8, 3);
  CHECK(t.pixels.size() == static_cast<size_t>(2 * 3 * 3));

  std::vector<double> image(8 * 8 * 3, 0.5);
  apply_trigger(image, 8, 8, 3, t);
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 8; ++c) {
      const bool in_patch = r >= 1 && r < 3 && c >= 2 && c < 5;
      const size_t base = (static_cast<size_t>(r) * 8 + c) * 3;
      if (in_patch) {
        CHECK(image[base + 0] == 1.0);
        CHECK(image[base + 1] == 0.0);
        CHECK(image[base + 2] == 0.0);
      } else {
        CHECK(image[base + 0] == 0.5);
        CHECK(image[base + 1] == 0.5);
        CHECK(image[base + 2] == 0.5);
      }
    }

  CHECK_THROWS_AS(TriggerSpec::solid(6, 6, 5, 5, {1, 0, 0}, 2).validate(8, 8, 3), ConfigError);
  CHECK_THROWS_AS(TriggerSpec::solid(0, 0, 2, 2, {1, 0}, 2).validate(8, 8, 3), ConfigError);
  CHECK_THROWS_AS(TriggerSpec::solid(0, 0, 2, 2, {2.0, 0, 0}, 2).validate(8, 8, 3), ConfigError);
  CHECK_THROWS_AS(TriggerSpec::solid(0, 0, 2, 2, {1, 0, 0}, -1).validate(8, 8, 3), ConfigError);
}

TEST_CASE("poisoning relabels a seeded subset of the requested size") {
  SynthConfig cfg = small_synth();
  const Dataset ds = synth_generate(cfg, RngStream(9));
  const TriggerSpec t = TriggerSpec::solid(0, 0, 3, 3, {1.0, 0.0, 0.0}, 2);

  const Dataset poisoned = poison(ds, t, 0.25, RngStream(10));
  CHECK(poisoned.n == ds.n);

  const size_t px = ds.pixel_count();
  int changed = 0;
  for (int i = 0; i < ds.n; ++i) {
    bool image_changed = false;
    for (size_t j = 0; j < px; ++j)
      image_changed = image_changed || poisoned.images[i * px + j] != ds.images[i * px + j];
    const bool relabeled = poisoned.labels[i] != ds.labels[i];
    if (image_changed) {
      ++changed;
      CHECK(poisoned.labels[i] == t.target);
      // Patch pixels match the trigger.
      for (int r = 0; r < t.height; ++r)
        for (int c = 0; c < t.width; ++c)
          for (int ch = 0; ch < 3; ++ch) {
            const size_t at = i * px + ((static_cast<size_t>(t.row + r) * ds.w) + t.col + c) * 3 + ch;
            CHECK(poisoned.images[at] == t.pixels[(static_cast<size_t>(r) * t.width + c) * 3 + ch]);
          }
    } else {
      // Untouched images keep their labels unless they were already class y*.
      if (relabeled) CHECK(ds.labels[i] == t.target);
      CHECK(poisoned.labels[i] == ds.labels[i]);
    }
  }
  CHECK(changed == static_cast<int>(std::llround(0.25 * ds.n)));

  // Ratio 0 and 1 edge cases.
  const Dataset none = poison(ds, t, 0.0, RngStream(11));
  CHECK(none.images == ds.images);
  const Dataset all = poison(ds, t, 1.0, RngStream(11));
  for (int i = 0; i < all.n; ++i) CHECK(all.labels[i] == t.target);

  // Same stream picks the same subset.
  const Dataset rep = poison(ds, t, 0.25, RngStream(10));
  CHECK(rep.images == poisoned.images);
}

TEST_CASE("dba quadrants partition the patch") {
  const TriggerSpec t = TriggerSpec::solid(0, 0, 5, 5, {1.0, 0.0, 0.0}, 2);
  const auto quads = dba_split(t);
  CHECK(quads[0].height == 3);
  CHECK(quads[0].width == 3);
  CHECK(quads[1].height == 3);
  CHECK(quads[1].width == 2);
  CHECK(quads[2].height == 2);
  CHECK(quads[2].width == 3);
  CHECK(quads[3].height == 2);
  CHECK(quads[3].width == 2);
  CHECK(quads[1].col == 3);
  CHECK(quads[2].row == 3);
  CHECK(quads[3].row == 3);
  CHECK(quads[3].col == 3);
  for (const auto& q : quads) CHECK(q.target == t.target);

  // Footprints are disjoint and their union is the parent patch.
  std::set<std::pair<int, int>> cells;
  for (const auto& q : quads)
    for (int r = q.row; r < q.row + q.height; ++r)
      for (int c = q.col; c < q.col + q.width; ++c) CHECK(cells.emplace(r, c).second);
  CHECK(cells.size() == static_cast<size_t>(t.height * t.width));

  CHECK_THROWS_AS(dba_split(TriggerSpec::solid(0, 0, 1, 5, {1, 0, 0}, 2)), ConfigError);
}

TEST_CASE("poisoned testsets exclude native target samples and keep true labels") {
  SynthConfig cfg = small_synth();
  const Dataset ds = synth_generate(cfg, RngStream(12));
  const TriggerSpec t = TriggerSpec::solid(0, 0, 3, 3, {1.0, 0.0, 0.0}, 2);
  const PoisonedTestset pts = build_poisoned_testset(ds, t);

  CHECK(pts.target == t.target);
  int native = 0;
  for (int y : ds.labels) native += y == t.target ? 1 : 0;
  CHECK(pts.data.n == ds.n - native);
  for (int y : pts.data.labels) CHECK(y != t.target);

  const size_t px = ds.pixel_count();
  for (int i = 0; i < pts.data.n; ++i)
    for (int ch = 0; ch < 3; ++ch)
      CHECK(pts.data.images[i * px + ch] == t.pixels[ch]);  // top-left pixel stamped
}

TEST_CASE("dataset subset and batch select the right rows") {
  const Dataset ds = synth_generate(small_synth(), RngStream(13));
  const std::vector<int> idx = {3, 0, 7};
  const Dataset sub = ds.subset(idx);
  CHECK(sub.n == 3);
  const size_t px = ds.pixel_count();
  for (int k = 0; k < 3; ++k) {
    CHECK(sub.labels[k] == ds.labels[idx[k]]);
    for (size_t j = 0; j < px; ++j) CHECK(sub.images[k * px + j] == ds.images[idx[k] * px + j]);
  }
  const Batch batch = ds.batch(idx);
  CHECK(batch.n == 3);
  CHECK(batch.images == sub.images);
  CHECK(batch.labels == sub.labels);
  CHECK(ds.batch().n == ds.n);
}
