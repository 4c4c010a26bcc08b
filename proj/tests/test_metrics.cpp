#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "data.hpp"
#include "metrics.hpp"
#include "model.hpp"
#include "numkit.hpp"
#include "oracles.hpp"

using namespace fedlora;
namespace fs = std::filesystem;

namespace {

fs::path work_dir() {
  const auto dir = fs::temp_directory_path() / "fedlora_test_metrics";
  fs::create_directories(dir);
  return dir;
}

ModelConfig tiny_cfg() {
  ModelConfig cfg;
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

Dataset tiny_data(uint64_t seed, int per_class = 10) {
  SynthConfig cfg;
  cfg.classes = 3;
  cfg.per_class = per_class;
  cfg.image_h = 8;
  cfg.image_w = 8;
  cfg.channels = 3;
  return synth_generate(cfg, RngStream(seed));
}

int argmax_lowest(const std::vector<double>& logits, size_t row, int classes) {
  int best = 0;
  for (int c = 1; c < classes; ++c)
    if (logits[row * classes + c] > logits[row * classes + best]) best = c;
  return best;
}

MetricSeries series_of(const std::vector<std::pair<long, double>>& pts, long horizon) {
  MetricSeries s;
  s.points = pts;
  s.horizon = horizon;
  return s;
}

}  // namespace

TEST_CASE("accuracy matches a manual argmax sweep") {
  RngStream rng(20);
  const ModelConfig cfg = tiny_cfg();
  const ModelParams params = build(cfg, rng);
  const Dataset data = tiny_data(21);
  const Batch batch = data.batch();

  const ForwardResult fr = forward(params, nullptr, batch);
  int correct = 0;
  for (int i = 0; i < batch.n; ++i)
    if (argmax_lowest(fr.logits.data, static_cast<size_t>(i), cfg.classes) == batch.labels[i])
      ++correct;
  CHECK(accuracy(params, nullptr, batch) ==
        doctest::Approx(static_cast<double>(correct) / batch.n).epsilon(1e-15));
}

TEST_CASE("attack success rate counts only target predictions on hostile samples") {
  RngStream rng(22);
  const ModelConfig cfg = tiny_cfg();
  const ModelParams params = build(cfg, rng);
  const Dataset data = tiny_data(23);
  const TriggerSpec t = TriggerSpec::solid(0, 0, 3, 3, {1, 0, 0}, 2);
  const PoisonedTestset poisoned = build_poisoned_testset(data, t);

  // The poisoned set drops native target-class samples.
  for (int i = 0; i < poisoned.data.n; ++i) CHECK(poisoned.data.labels[i] != t.target);
  CHECK(poisoned.data.n == 20);  // 2 of 3 classes survive

  const ForwardResult fr = forward(params, nullptr, poisoned.data.batch());
  int hits = 0;
  for (int i = 0; i < poisoned.data.n; ++i)
    if (argmax_lowest(fr.logits.data, static_cast<size_t>(i), cfg.classes) == t.target) ++hits;
  CHECK(attack_success_rate(params, nullptr, poisoned) ==
        doctest::Approx(static_cast<double>(hits) / poisoned.data.n).epsilon(1e-15));
}

TEST_CASE("series validation rejects malformed trajectories") {
  CHECK_NOTHROW(series_of({{0, 0.1}, {5, 0.9}}, 10).validate());
  CHECK_NOTHROW(series_of({}, 10).validate());
  CHECK_THROWS_AS(series_of({{5, 0.1}, {5, 0.2}}, 10).validate(), InvalidInputError);
  CHECK_THROWS_AS(series_of({{7, 0.1}, {3, 0.2}}, 10).validate(), InvalidInputError);
  CHECK_THROWS_AS(series_of({{-1, 0.1}}, 10).validate(), InvalidInputError);
  CHECK_THROWS_AS(series_of({{10, 0.1}}, 10).validate(), InvalidInputError);
}

TEST_CASE("lifespan and convergence on hand-built series") {
  const MetricSeries s = series_of({{0, 0.1}, {10, 0.7}, {20, 0.8}, {30, 0.4}, {40, 0.2}}, 50);

  CHECK(convergence_time(s, 0.6) == CensoredRound::at(10));
  CHECK(convergence_time(s, 0.75) == CensoredRound::at(20));
  CHECK(convergence_time(s, 0.9) == CensoredRound::absent());

  CHECK(lifespan(s, 0.6) == CensoredRound::at(20));
  CHECK(lifespan(s, 0.1) == CensoredRound::censored(50));  // final 0.2 > 0.1
  CHECK(lifespan(s, 0.9) == CensoredRound::absent());

  const MetricSeries empty = series_of({}, 50);
  CHECK(lifespan(empty, 0.5) == CensoredRound::absent());
  CHECK(convergence_time(empty, 0.5) == CensoredRound::absent());
}

TEST_CASE("threshold metrics agree with the brute-force scan on random series") {
  RngStream rng(30);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 1 + static_cast<int>(rng.next_below(20));
    std::vector<std::pair<long, double>> pts;
    long round = static_cast<long>(rng.next_below(3));
    for (int i = 0; i < n; ++i) {
      pts.emplace_back(round, rng.next_double());
      round += 1 + static_cast<long>(rng.next_below(7));
    }
    const long horizon = round + static_cast<long>(rng.next_below(5));
    const MetricSeries s = series_of(pts, horizon);
    const double x = rng.next_double();

    const auto ls = oracles::scan_lifespan(pts, horizon, x);
    const auto got_ls = lifespan(s, x);
    if (!ls.exists) {
      CHECK(got_ls == CensoredRound::absent());
    } else if (ls.censored) {
      CHECK(got_ls == CensoredRound::censored(horizon));
    } else {
      CHECK(got_ls == CensoredRound::at(ls.round));
    }

    const auto cv = oracles::scan_convergence(pts, horizon, x);
    const auto got_cv = convergence_time(s, x);
    if (!cv.exists) {
      CHECK(got_cv == CensoredRound::absent());
    } else {
      CHECK(got_cv == CensoredRound::at(cv.round));
    }

    // When both exist as plain rounds, the streak cannot end before it starts.
    if (got_cv.state == CensoredRound::State::kAt && got_ls.state == CensoredRound::State::kAt)
      CHECK(got_ls.round >= got_cv.round);

    // Appending a below-threshold tail converts censoring into a plain round.
    if (got_ls.state == CensoredRound::State::kCensored && x > 0.0) {
      auto extended = pts;
      extended.emplace_back(horizon, 0.0);
      const MetricSeries s2 = series_of(extended, horizon + 1);
      CHECK(lifespan(s2, x) == CensoredRound::at(pts.back().first));
    }
  }
}

TEST_CASE("censored rounds format and parse symmetrically") {
  CHECK(CensoredRound::absent().str() == "none");
  CHECK(CensoredRound::at(42).str() == "42");
  CHECK(CensoredRound::censored(300).str() == ">300");
  for (const auto& v :
       {CensoredRound::absent(), CensoredRound::at(0), CensoredRound::at(123),
        CensoredRound::censored(300)})
    CHECK(parse_censored(v.str()) == v);
  CHECK_THROWS_AS(parse_censored(""), FormatError);
  CHECK_THROWS_AS(parse_censored("abc"), FormatError);
  CHECK_THROWS_AS(parse_censored(">x"), FormatError);
  CHECK_THROWS_AS(parse_censored("12x"), FormatError);

  CHECK(CensoredRound::at(42).numeric() == 42.0);
  CHECK(CensoredRound::censored(300).numeric() == 300.0);
  CHECK_THROWS_AS(CensoredRound::absent().numeric(), InvalidInputError);
}

TEST_CASE("summary csv round-trips") {
  std::vector<SummaryRow> rows;
  SummaryRow r;
  r.attack = "baseline";
  r.rank = "2";
  r.aw_end = 30;
  r.tc95_acc = CensoredRound::at(18);
  r.tc95_asr = CensoredRound::at(7);
  r.lifespan60_abs = CensoredRound::censored(300);
  r.lifespan60_post_aw = CensoredRound::censored(270);
  rows.push_back(r);
  r.attack = "dba";
  r.rank = "full";
  r.tc95_asr = CensoredRound::absent();
  r.lifespan60_abs = CensoredRound::at(55);
  r.lifespan60_post_aw = CensoredRound::at(25);
  rows.push_back(r);

  const auto path = (work_dir() / "summary.csv").string();
  write_summary_csv(path, rows);

  std::ifstream is(path);
  std::string header;
  std::getline(is, header);
  CHECK(header == "attack,rank,aw_end,tc95_acc,tc95_asr,lifespan60_abs,lifespan60_post_aw");

  const auto back = read_summary_csv(path);
  REQUIRE(back.size() == 2);
  for (size_t i = 0; i < 2; ++i) {
    CHECK(back[i].attack == rows[i].attack);
    CHECK(back[i].rank == rows[i].rank);
    CHECK(back[i].aw_end == rows[i].aw_end);
    CHECK(back[i].tc95_acc == rows[i].tc95_acc);
    CHECK(back[i].tc95_asr == rows[i].tc95_asr);
    CHECK(back[i].lifespan60_abs == rows[i].lifespan60_abs);
    CHECK(back[i].lifespan60_post_aw == rows[i].lifespan60_post_aw);
  }
  CHECK_THROWS_AS(read_summary_csv((work_dir() / "missing.csv").string()), FormatError);
}

TEST_CASE("median combination keeps rows and appends group medians") {
  auto row = [](const std::string& attack, const std::string& rank, long aw,
                CensoredRound tc_acc, CensoredRound tc_asr, CensoredRound ls_abs,
                CensoredRound ls_post) {
    SummaryRow r;
    r.attack = attack;
    r.rank = rank;
    r.aw_end = aw;
    r.tc95_acc = tc_acc;
    r.tc95_asr = tc_asr;
    r.lifespan60_abs = ls_abs;
    r.lifespan60_post_aw = ls_post;
    return r;
  };
  using CR = CensoredRound;

  std::vector<SummaryRow> rows = {
      row("baseline", "2", 30, CR::at(10), CR::at(5), CR::at(100), CR::at(70)),
      row("baseline", "2", 30, CR::at(20), CR::absent(), CR::censored(300), CR::censored(270)),
      row("baseline", "2", 30, CR::at(30), CR::at(9), CR::absent(), CR::absent()),
      row("dba", "2", 30, CR::at(11), CR::at(6), CR::at(80), CR::at(50)),
  };

  const auto combined = combine_with_medians(rows);
  REQUIRE(combined.size() == 6);  // 4 originals + 2 group medians
  for (size_t i = 0; i < 4; ++i) CHECK(combined[i].attack == rows[i].attack);

  const SummaryRow& mb = combined[4];
  CHECK(mb.attack == "median:baseline");
  CHECK(mb.rank == "2");
  CHECK(mb.aw_end == 30);
  // tc95_acc sorts 10,20,30 -> median 20.
  CHECK(mb.tc95_acc == CR::at(20));
  // tc95_asr sorts 5,9,none(worst) -> median 9.
  CHECK(mb.tc95_asr == CR::at(9));
  // lifespan_abs sorts none(worst first),100,>300 -> median 100.
  CHECK(mb.lifespan60_abs == CR::at(100));
  CHECK(mb.lifespan60_post_aw == CR::at(70));

  const SummaryRow& md = combined[5];
  CHECK(md.attack == "median:dba");
  CHECK(md.tc95_acc == CR::at(11));

  // Even group size takes the lower middle.
  std::vector<SummaryRow> even = {
      row("a3fl", "8", 15, CR::at(4), CR::at(4), CR::at(40), CR::at(25)),
      row("a3fl", "8", 15, CR::at(8), CR::at(8), CR::censored(300), CR::censored(285)),
  };
  const auto ce = combine_with_medians(even);
  REQUIRE(ce.size() == 3);
  CHECK(ce[2].tc95_acc == CR::at(4));
  CHECK(ce[2].lifespan60_abs == CR::at(40));

  // All-absent medians stay absent.
  std::vector<SummaryRow> gone = {
      row("none", "full", 0, CR::absent(), CR::absent(), CR::absent(), CR::absent()),
  };
  const auto cg = combine_with_medians(gone);
  REQUIRE(cg.size() == 2);
  CHECK(cg[1].tc95_asr == CR::absent());
  CHECK(cg[1].lifespan60_abs == CR::absent());
}

TEST_CASE("feature export writes bit-exact doubles with poison flags") {
  RngStream rng(40);
  const ModelConfig cfg = tiny_cfg();
  const ModelParams params = build(cfg, rng);
  const Dataset data = tiny_data(41, 4);
  const Batch batch = data.batch();
  std::vector<uint8_t> flags(static_cast<size_t>(batch.n), 0);
  flags[1] = 1;
  flags[3] = 1;

  const auto path = (work_dir() / "features.csv").string();
  export_features(params, nullptr, batch, flags, path);

  const ForwardResult fr = forward(params, nullptr, batch);
  const size_t featdim = fr.features.cols;

  std::ifstream is(path);
  REQUIRE(is.good());
  std::string header;
  std::getline(is, header);
  std::stringstream expected;
  expected << "id,label,poisoned";
  for (size_t j = 0; j < featdim; ++j) expected << ",f" << j;
  CHECK(header == expected.str());

  for (int i = 0; i < batch.n; ++i) {
    std::string line;
    REQUIRE(std::getline(is, line));
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    CHECK(std::stol(cell) == i);
    std::getline(ss, cell, ',');
    CHECK(std::stoi(cell) == batch.labels[i]);
    std::getline(ss, cell, ',');
    CHECK(std::stoi(cell) == static_cast<int>(flags[static_cast<size_t>(i)]));
    for (size_t j = 0; j < featdim; ++j) {
      REQUIRE(std::getline(ss, cell, ','));
      CHECK(std::strtod(cell.c_str(), nullptr) == fr.features.at(i, j));
    }
  }
  std::string extra;
  CHECK(!std::getline(is, extra));

  CHECK_THROWS_AS(export_features(params, nullptr, batch, {1}, path), InvalidInputError);
}
