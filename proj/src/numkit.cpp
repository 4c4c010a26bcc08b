#include "numkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <stdexcept>

namespace fedlora {

Matrix matmul(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows, b.cols);
  matmul_acc(a, b, c);
  return c;
}

void matmul_acc(const Matrix& a, const Matrix& b, Matrix& c) {
  if (a.cols != b.rows || c.rows != a.rows || c.cols != b.cols)
    throw InvalidInputError("matmul: shape mismatch");
  const int m = a.rows, k = a.cols, n = b.cols;
  for (int i = 0; i < m; ++i) {
    const double* arow = &a.data[static_cast<size_t>(i) * k];
    double* crow = &c.data[static_cast<size_t>(i) * n];
    for (int p = 0; p < k; ++p) {
      const double aip = arow[p];
      if (aip == 0.0) continue;
      const double* brow = &b.data[static_cast<size_t>(p) * n];
      for (int j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols != b.cols) throw InvalidInputError("matmul_nt: shape mismatch");
  const int m = a.rows, k = a.cols, n = b.rows;
  Matrix c(m, n);
  for (int i = 0; i < m; ++i) {
    const double* arow = &a.data[static_cast<size_t>(i) * k];
    double* crow = &c.data[static_cast<size_t>(i) * n];
    for (int j = 0; j < n; ++j) {
      const double* brow = &b.data[static_cast<size_t>(j) * k];
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] = acc;
    }
  }
  return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows != b.rows) throw InvalidInputError("matmul_tn: shape mismatch");
  const int k = a.rows, m = a.cols, n = b.cols;
  Matrix c(m, n);
  for (int p = 0; p < k; ++p) {
    const double* arow = &a.data[static_cast<size_t>(p) * m];
    const double* brow = &b.data[static_cast<size_t>(p) * n];
    for (int i = 0; i < m; ++i) {
      const double api = arow[i];
      if (api == 0.0) continue;
      double* crow = &c.data[static_cast<size_t>(i) * n];
      for (int j = 0; j < n; ++j) crow[j] += api * brow[j];
    }
  }
  return c;
}

Matrix transpose(const Matrix& m) {
  Matrix t(m.cols, m.rows);
  for (int i = 0; i < m.rows; ++i)
    for (int j = 0; j < m.cols; ++j) t.at(j, i) = m.at(i, j);
  return t;
}

void add_scaled(Matrix& dst, const Matrix& src, double s) {
  if (!dst.same_shape(src)) throw InvalidInputError("add_scaled: shape mismatch");
  for (size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += s * src.data[i];
}

double frobenius_norm(const Matrix& m) {
  double acc = 0.0;
  for (double x : m.data) acc += x * x;
  return std::sqrt(acc);
}

double max_abs(const Matrix& m) {
  double best = 0.0;
  for (double x : m.data) best = std::max(best, std::fabs(x));
  return best;
}

bool all_finite(const Matrix& m) { return all_finite(m.data); }

bool all_finite(const std::vector<double>& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw InvalidInputError("dot: length mismatch");
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double l2_norm(const std::vector<double>& v) { return std::sqrt(dot(v, v)); }

// ---------------------------------------------------------------------------
// One-sided Jacobi SVD

namespace {

// Orthogonalize columns of w (m x n, m >= n) by Jacobi rotations, accumulating
// the right-hand rotations into v (n x n identity on entry).
void jacobi_orthogonalize(Matrix& w, Matrix& v) {
  const int m = w.rows, n = w.cols;
  const double tol = 1e-12;
  const int max_sweeps = 100;

  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    bool converged = true;
    for (int i = 0; i < n - 1; ++i) {
      for (int j = i + 1; j < n; ++j) {
        double dot_ii = 0.0, dot_jj = 0.0, dot_ij = 0.0;
        for (int r = 0; r < m; ++r) {
          const double wi = w.at(r, i), wj = w.at(r, j);
          dot_ii += wi * wi;
          dot_jj += wj * wj;
          dot_ij += wi * wj;
        }
        if (std::fabs(dot_ij) <= tol * std::sqrt(dot_ii * dot_jj)) continue;
        converged = false;

        const double zeta = (dot_jj - dot_ii) / (2.0 * dot_ij);
        const double t = (zeta >= 0.0 ? 1.0 : -1.0) / (std::fabs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;

        for (int r = 0; r < m; ++r) {
          const double wi = w.at(r, i), wj = w.at(r, j);
          w.at(r, i) = c * wi - s * wj;
          w.at(r, j) = s * wi + c * wj;
        }
        for (int r = 0; r < n; ++r) {
          const double vi = v.at(r, i), vj = v.at(r, j);
          v.at(r, i) = c * vi - s * vj;
          v.at(r, j) = s * vi + c * vj;
        }
      }
    }
    if (converged) break;
  }
}

// Fill u columns flagged as degenerate with vectors orthonormal to the rest.
void complete_orthonormal_columns(Matrix& u, const std::vector<bool>& degenerate) {
  const int m = u.rows, k = u.cols;
  for (int j = 0; j < k; ++j) {
    if (!degenerate[j]) continue;
    double best_norm = -1.0;
    std::vector<double> best(m, 0.0);
    // project each canonical basis vector against the existing columns and
    // keep the candidate with the largest residual
    for (int e = 0; e < m; ++e) {
      std::vector<double> cand(m, 0.0);
      cand[e] = 1.0;
      for (int c = 0; c < k; ++c) {
        if (c == j || (degenerate[c] && c > j)) continue;
        double proj = 0.0;
        for (int r = 0; r < m; ++r) proj += cand[r] * u.at(r, c);
        for (int r = 0; r < m; ++r) cand[r] -= proj * u.at(r, c);
      }
      double nrm = 0.0;
      for (double x : cand) nrm += x * x;
      nrm = std::sqrt(nrm);
      if (nrm > best_norm) {
        best_norm = nrm;
        best = std::move(cand);
        if (best_norm > 0.9) break;
      }
    }
    for (int r = 0; r < m; ++r) u.at(r, j) = best[r] / best_norm;
  }
}

SvdResult svd_tall(const Matrix& input) {
  const int m = input.rows, n = input.cols;  // m >= n, k = n
  Matrix w = input;
  Matrix v(n, n);
  for (int i = 0; i < n; ++i) v.at(i, i) = 1.0;

  jacobi_orthogonalize(w, v);

  std::vector<double> sigma(n, 0.0);
  for (int j = 0; j < n; ++j) {
    double acc = 0.0;
    for (int r = 0; r < m; ++r) acc += w.at(r, j) * w.at(r, j);
    sigma[j] = std::sqrt(acc);
  }

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return sigma[a] > sigma[b]; });

  SvdResult out;
  out.u = Matrix(m, n);
  out.v = Matrix(n, n);
  out.s.resize(n);
  const double sigma_max = sigma[order[0]];
  const double drop_tol = sigma_max * 1e-14 * std::max(m, n);
  std::vector<bool> degenerate(n, false);
  for (int j = 0; j < n; ++j) {
    const int src = order[j];
    out.s[j] = sigma[src];
    for (int r = 0; r < n; ++r) out.v.at(r, j) = v.at(r, src);
    if (sigma[src] <= drop_tol || sigma[src] == 0.0) {
      // numerically null direction: σ is noise, rebuild the column afterwards
      out.s[j] = sigma[src];
      degenerate[j] = true;
    } else {
      for (int r = 0; r < m; ++r) out.u.at(r, j) = w.at(r, src) / sigma[src];
    }
  }
  complete_orthonormal_columns(out.u, degenerate);
  return out;
}

}  // namespace

SvdResult svd(const Matrix& input) {
  if (input.rows < 1 || input.cols < 1) throw InvalidInputError("svd: empty matrix");
  if (!all_finite(input)) throw InvalidInputError("svd: non-finite input");
  if (input.rows >= input.cols) return svd_tall(input);
  SvdResult t = svd_tall(transpose(input));
  SvdResult out;
  out.u = std::move(t.v);
  out.v = std::move(t.u);
  out.s = std::move(t.s);
  return out;
}

// ---------------------------------------------------------------------------
// Counter-based RNG

namespace {

inline uint64_t mix64(uint64_t z) {
  z ^= z >> 30;
  z *= 0xBF58476D1CE4E5B9ULL;
  z ^= z >> 27;
  z *= 0x94D049BB133111EBULL;
  z ^= z >> 31;
  return z;
}

constexpr uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

}  // namespace

RngStream::RngStream(uint64_t root_seed) : key_(mix64(root_seed + kGolden)) {}

RngStream RngStream::derive(uint64_t label) const {
  uint64_t child = mix64(key_ ^ (mix64(label + kGolden) + kGolden + (key_ << 6) + (key_ >> 2)));
  return RngStream(child, 0);
}

RngStream RngStream::derive(std::initializer_list<uint64_t> labels) const {
  RngStream s = *this;
  for (uint64_t l : labels) s = s.derive(l);
  return s;
}

uint64_t RngStream::next_u64() { return mix64(key_ + (++counter_) * kGolden); }

double RngStream::next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double RngStream::next_normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  double u1 = next_double();
  double u2 = next_double();
  if (u1 <= 0.0) u1 = 0x1.0p-53;
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * 3.14159265358979323846 * u2;
  spare_ = r * std::sin(theta);
  have_spare_ = true;
  return r * std::cos(theta);
}

uint64_t RngStream::next_below(uint64_t bound) {
  if (bound == 0) throw InvalidInputError("next_below: bound must be positive");
  const uint64_t threshold = (0 - bound) % bound;
  for (;;) {
    const uint64_t x = next_u64();
    if (x >= threshold) return x % bound;
  }
}

std::vector<int> RngStream::shuffled_indices(int n) {
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (int i = n - 1; i > 0; --i) {
    const int j = static_cast<int>(next_below(static_cast<uint64_t>(i) + 1));
    std::swap(idx[i], idx[j]);
  }
  return idx;
}

std::vector<int> RngStream::sample_without_replacement(int n, int k) {
  if (k > n) throw InvalidInputError("sample_without_replacement: k > n");
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (int i = 0; i < k; ++i) {
    const int j = i + static_cast<int>(next_below(static_cast<uint64_t>(n - i)));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(k);
  return idx;
}

// ---------------------------------------------------------------------------

std::vector<double> finite_diff_grad(const std::function<double(const std::vector<double>&)>& f,
                                     std::vector<double> x, double eps) {
  std::vector<double> g(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + eps;
    const double fp = f(x);
    x[i] = orig - eps;
    const double fm = f(x);
    x[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw InvalidInputError("finite_diff_grad: non-finite function value");
    g[i] = (fp - fm) / (2.0 * eps);
  }
  return g;
}

}  // namespace fedlora
