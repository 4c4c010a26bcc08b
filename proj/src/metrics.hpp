#pragma once

#include <string>
#include <vector>

#include "data.hpp"
#include "model.hpp"

namespace fedlora {

// Fraction of argmax-correct predictions; argmax ties resolve to the lowest
// class index.
double accuracy(const ModelParams& params, const LoraAdapterSet* adapters, const Batch& test);

// Fraction of the poisoned test set predicted as the attack target. The set
// already excludes samples whose true label equals the target.
double attack_success_rate(const ModelParams& params, const LoraAdapterSet* adapters,
                           const PoisonedTestset& poisoned);

// Sparse metric trajectory over rounds; step semantics between samples.
struct MetricSeries {
  std::vector<std::pair<long, double>> points;  // (round, value), rounds strictly increasing
  long horizon = 0;                             // total experiment rounds T

  void validate() const;  // throws InvalidInputError
};

// A round index, or "never happened" (absent), or "still true at the end of
// the series" (censored at the horizon).
struct CensoredRound {
  enum class State { kAbsent, kAt, kCensored };
  State state = State::kAbsent;
  long round = 0;    // valid when kAt
  long horizon = 0;  // valid when kCensored

  static CensoredRound absent() { return {}; }
  static CensoredRound at(long r) { return {State::kAt, r, 0}; }
  static CensoredRound censored(long h) { return {State::kCensored, 0, h}; }

  bool operator==(const CensoredRound&) const = default;
  // "none", a round number, or ">horizon"
  std::string str() const;
  // Scalar for medians: round when at, horizon when censored; absent is the
  // caller's problem (throws).
  double numeric() const;
};

// Last round with value > x; censored when the final sample still exceeds x.
CensoredRound lifespan(const MetricSeries& s, double x);

// First round with value > x; absent when never reached.
CensoredRound convergence_time(const MetricSeries& s, double x);

// CSV of (sample id, true label, poisoned flag, feature vector), %.17g so a
// re-import reproduces the doubles bit-exactly.
void export_features(const ModelParams& params, const LoraAdapterSet* adapters, const Batch& data,
                     const std::vector<uint8_t>& poisoned_flags, const std::string& path);

// One line of the experiment summary table.
struct SummaryRow {
  std::string attack;
  std::string rank;  // "2", "8", ... or "full"
  long aw_end = 0;
  CensoredRound tc95_acc;
  CensoredRound tc95_asr;
  CensoredRound lifespan60_abs;
  CensoredRound lifespan60_post_aw;
};

void write_summary_csv(const std::string& path, const std::vector<SummaryRow>& rows);

// Inverse of CensoredRound::str().
CensoredRound parse_censored(const std::string& text);

std::vector<SummaryRow> read_summary_csv(const std::string& path);

// Groups rows by (attack, rank, aw_end) in first-seen order and appends one
// median row per group, marked by an "median:" attack prefix. The median of a
// censored field is the realized observation at the lower-middle sort
// position: absent sorts worst (last for convergence times, first for
// lifespans), censored sorts at its horizon.
std::vector<SummaryRow> combine_with_medians(const std::vector<SummaryRow>& rows);

}  // namespace fedlora
