#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace fedlora {

// Dense row-major matrix of doubles. All model math runs in 64-bit precision.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0) {}
  Matrix(int r, int c, std::vector<double> d) : rows(r), cols(c), data(std::move(d)) {}

  double& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  double at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
  size_t size() const { return data.size(); }

  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

Matrix matmul(const Matrix& a, const Matrix& b);
// c += a*b, c must already have shape a.rows x b.cols
void matmul_acc(const Matrix& a, const Matrix& b, Matrix& c);
// a * b^T and a^T * b without materializing the transpose
Matrix matmul_nt(const Matrix& a, const Matrix& b);
Matrix matmul_tn(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& m);
void add_scaled(Matrix& dst, const Matrix& src, double s);  // dst += s*src

double frobenius_norm(const Matrix& m);
double max_abs(const Matrix& m);
bool all_finite(const Matrix& m);
bool all_finite(const std::vector<double>& v);

double dot(const std::vector<double>& a, const std::vector<double>& b);
double l2_norm(const std::vector<double>& v);

// Neumaier-compensated sum: each coordinate of the aggregate stays exact
// enough for the <=1e-12 contract against a plain mean, including when a
// large partial sum swamps a small addend.
struct KahanAccumulator {
  double sum = 0.0;
  double comp = 0.0;
  void add(double x) {
    const double t = sum + x;
    if ((sum >= 0 ? sum : -sum) >= (x >= 0 ? x : -x))
      comp += (sum - t) + x;
    else
      comp += (x - t) + sum;
    sum = t;
  }
  double total() const { return sum + comp; }
};

struct SvdResult {
  Matrix u;               // m x k
  std::vector<double> s;  // k singular values, non-increasing
  Matrix v;               // n x k
};

// One-sided Jacobi SVD. Tolerance 1e-12 on the off-diagonal mass of the
// implicit Gram matrix, capped at 100 sweeps. Accurate enough for the
// rank-factorization exactness checks downstream (reconstruction <=1e-8).
SvdResult svd(const Matrix& m);

// Counter-based random stream keyed by a hash of (seed, derivation path).
// Same (seed, path) always replays the same draws; distinct paths give
// independent streams, so parallel workers never share mutable RNG state.
class RngStream {
 public:
  explicit RngStream(uint64_t root_seed);

  // Child stream for a labeled sub-scope (round, client id, purpose tag, ...).
  RngStream derive(uint64_t label) const;
  RngStream derive(std::initializer_list<uint64_t> labels) const;

  uint64_t next_u64();
  double next_double();                 // uniform [0,1)
  double next_normal();                 // standard normal (Box-Muller)
  uint64_t next_below(uint64_t bound);  // uniform [0,bound), bound > 0

  // Fisher-Yates shuffle of indices [0,n)
  std::vector<int> shuffled_indices(int n);
  // Uniform sample without replacement of k out of [0,n)
  std::vector<int> sample_without_replacement(int n, int k);

  uint64_t key() const { return key_; }

 private:
  RngStream(uint64_t key, int) : key_(key) {}
  uint64_t key_ = 0;
  uint64_t counter_ = 0;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Central finite differences, (f(x+eps*e_i) - f(x-eps*e_i)) / (2*eps).
// Gradient oracle for the analytic backward passes.
std::vector<double> finite_diff_grad(const std::function<double(const std::vector<double>&)>& f,
                                     std::vector<double> x, double eps);

// Purpose tags used as the leading label of derived streams; fixed values so
// experiment logs replay bit-exactly across versions.
enum RngPurpose : uint64_t {
  kRngSynth = 1,
  kRngPartition = 2,
  kRngSelect = 3,
  kRngShuffle = 4,
  kRngPoisonSubset = 5,
  kRngDbaChoice = 6,
  kRngLoraInit = 7,
  kRngModelInit = 8,
  kRngPretrain = 9,
  kRngResetOrder = 10,
  kRngClient = 11,
};

struct InvalidInputError : std::runtime_error {
  explicit InvalidInputError(const std::string& what) : std::runtime_error(what) {}
};
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};
struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace fedlora
