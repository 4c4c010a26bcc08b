#pragma once

#include <string>
#include <vector>

#include "numkit.hpp"

namespace fedlora {

// Rank-r factorization of the update to one frozen weight matrix:
// effective weight = w_res + a*b. a0/b0 keep the initialization for the
// iterative reset mitigation; w_res, a0, b0 are never modified after init.
struct LoraAdapter {
  std::string target;  // name of the adapted parameter tensor
  int rank = 0;
  Matrix a;      // m x r
  Matrix b;      // r x n
  Matrix w_res;  // m x n, frozen
  Matrix a0;     // frozen copy of initial a
  Matrix b0;     // frozen copy of initial b

  // Reset scheduler state: seeded slice visit order plus per-slice round of
  // the most recent reset (-1 = never), for the cooldown rule.
  std::vector<int> row_order;
  std::vector<int> col_order;
  int row_cursor = 0;
  int col_cursor = 0;
  std::vector<long> row_last_reset;
  std::vector<long> col_last_reset;

  int m() const { return w_res.rows; }
  int n() const { return w_res.cols; }
};

struct LoraAdapterSet {
  std::vector<LoraAdapter> adapters;

  const LoraAdapter* find(const std::string& target) const;
  LoraAdapter* find(const std::string& target);
  bool empty() const { return adapters.empty(); }
};

struct ResetSchedule {
  bool enabled = false;
  int period = 5;           // rounds between reset events
  double fraction = 0.01;   // share of slices restored per event
  long cooldown = 500;      // rounds before a slice is eligible again

  void validate() const;
};

// Principal-singular-triplet initialization: a = U_r * sqrt(S_r),
// b = sqrt(S_r) * V_r^T, w_res = w0 - a*b (so w_res + a*b reproduces w0 to
// roundoff).
LoraAdapter pissa_init(const std::string& target, const Matrix& w0, int rank);

// Classic initialization: b = 0, a ~ normal(0, 1/sqrt(m)), w_res = w0.
LoraAdapter standard_init(const std::string& target, const Matrix& w0, int rank, RngStream rng);

Matrix effective_weight(const LoraAdapter& ad);

// Total trainable entries: sum of r*(m+n) over the set.
size_t trainable_count(const LoraAdapterSet& set);

// Restore the next ceil(fraction*m) rows of a and ceil(fraction*n) columns of
// b to their initial values. Slices are visited in a seeded permutation and
// become eligible again only `cooldown` rounds after their last reset. No-op
// when the schedule is disabled or the round is off-period.
void apply_reset(LoraAdapter& ad, const ResetSchedule& schedule, long round, RngStream rng);

}  // namespace fedlora
