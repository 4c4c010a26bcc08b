#include "lora.hpp"

#include <algorithm>
#include <cmath>

namespace fedlora {

const LoraAdapter* LoraAdapterSet::find(const std::string& target) const {
  for (const auto& ad : adapters)
    if (ad.target == target) return &ad;
  return nullptr;
}

LoraAdapter* LoraAdapterSet::find(const std::string& target) {
  for (auto& ad : adapters)
    if (ad.target == target) return &ad;
  return nullptr;
}

void ResetSchedule::validate() const {
  if (period < 1) throw ConfigError("reset.period must be >= 1");
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("reset.fraction must be in (0,1]");
  if (cooldown < 0) throw ConfigError("reset.cooldown must be >= 0");
}

LoraAdapter pissa_init(const std::string& target, const Matrix& w0, int rank) {
  const int m = w0.rows, n = w0.cols;
  if (rank < 1 || rank > std::min(m, n))
    throw ConfigError("lora.rank out of range for " + target + ": " + std::to_string(rank));

  SvdResult dec = svd(w0);
  LoraAdapter ad;
  ad.target = target;
  ad.rank = rank;
  ad.a = Matrix(m, rank);
  ad.b = Matrix(rank, n);
  for (int j = 0; j < rank; ++j) {
    const double root = std::sqrt(dec.s[j]);
    for (int i = 0; i < m; ++i) ad.a.at(i, j) = dec.u.at(i, j) * root;
    for (int i = 0; i < n; ++i) ad.b.at(j, i) = root * dec.v.at(i, j);
  }
  ad.w_res = w0;
  add_scaled(ad.w_res, matmul(ad.a, ad.b), -1.0);
  ad.a0 = ad.a;
  ad.b0 = ad.b;
  return ad;
}

LoraAdapter standard_init(const std::string& target, const Matrix& w0, int rank, RngStream rng) {
  const int m = w0.rows, n = w0.cols;
  if (rank < 1 || rank > std::min(m, n))
    throw ConfigError("lora.rank out of range for " + target + ": " + std::to_string(rank));

  LoraAdapter ad;
  ad.target = target;
  ad.rank = rank;
  ad.a = Matrix(m, rank);
  const double scale = 1.0 / std::sqrt(static_cast<double>(m));
  for (double& x : ad.a.data) x = rng.next_normal() * scale;
  ad.b = Matrix(rank, n);  // zeros, so the effective weight starts at w0
  ad.w_res = w0;
  ad.a0 = ad.a;
  ad.b0 = ad.b;
  return ad;
}

Matrix effective_weight(const LoraAdapter& ad) {
  Matrix w = ad.w_res;
  matmul_acc(ad.a, ad.b, w);
  return w;
}

size_t trainable_count(const LoraAdapterSet& set) {
  size_t total = 0;
  for (const auto& ad : set.adapters)
    total += static_cast<size_t>(ad.rank) * (static_cast<size_t>(ad.m()) + static_cast<size_t>(ad.n()));
  return total;
}

namespace {

// Walk the permutation from the cursor and pick the next `want` slices whose
// cooldown has expired. One full lap without finding enough means the rest is
// still cooling down; reset only what was found.
std::vector<int> take_eligible(const std::vector<int>& order, int& cursor, std::vector<long>& last_reset,
                               long round, long cooldown, int want) {
  std::vector<int> picked;
  const int n = static_cast<int>(order.size());
  for (int step = 0; step < n && static_cast<int>(picked.size()) < want; ++step) {
    const int pos = (cursor + step) % n;
    const int slice = order[pos];
    if (last_reset[slice] < 0 || round - last_reset[slice] >= cooldown) {
      picked.push_back(slice);
      last_reset[slice] = round;
    }
  }
  cursor = (cursor + static_cast<int>(picked.size())) % n;
  return picked;
}

}  // namespace

void apply_reset(LoraAdapter& ad, const ResetSchedule& schedule, long round, RngStream rng) {
  if (!schedule.enabled) return;
  if (schedule.period < 1 || round % schedule.period != 0) return;

  const int m = ad.m(), n = ad.n();
  if (ad.row_order.empty()) {
    ad.row_order = rng.derive(0).shuffled_indices(m);
    ad.col_order = rng.derive(1).shuffled_indices(n);
    ad.row_last_reset.assign(m, -1);
    ad.col_last_reset.assign(n, -1);
    ad.row_cursor = 0;
    ad.col_cursor = 0;
  }

  const int rows_per_event = static_cast<int>(std::ceil(schedule.fraction * m));
  const int cols_per_event = static_cast<int>(std::ceil(schedule.fraction * n));

  for (int row : take_eligible(ad.row_order, ad.row_cursor, ad.row_last_reset, round,
                               schedule.cooldown, rows_per_event)) {
    for (int j = 0; j < ad.rank; ++j) ad.a.at(row, j) = ad.a0.at(row, j);
  }
  for (int col : take_eligible(ad.col_order, ad.col_cursor, ad.col_last_reset, round,
                               schedule.cooldown, cols_per_event)) {
    for (int j = 0; j < ad.rank; ++j) ad.b.at(j, col) = ad.b0.at(j, col);
  }
}

}  // namespace fedlora
