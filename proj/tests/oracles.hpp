#pragma once

// Independent reference implementations the tests check production code
// against. Everything here is deliberately written the straightforward way
// and shares no code with src/.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "numkit.hpp"

namespace oracles {

// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns eigenvalues
// in non-increasing order and matching eigenvector columns.
struct EigenSym {
  std::vector<double> values;
  fedlora::Matrix vectors;  // n x n, column i pairs with values[i]
};

inline EigenSym jacobi_eigen_sym(fedlora::Matrix a) {
  const int n = a.rows;
  fedlora::Matrix v(n, n);
  for (int i = 0; i < n; ++i) v.at(i, i) = 1.0;

  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) off += a.at(p, q) * a.at(p, q);
    if (off < 1e-24) break;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) {
        const double apq = a.at(p, q);
        if (std::fabs(apq) < 1e-300) continue;
        const double theta = (a.at(q, q) - a.at(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int i = 0; i < n; ++i) {
          const double aip = a.at(i, p), aiq = a.at(i, q);
          a.at(i, p) = c * aip - s * aiq;
          a.at(i, q) = s * aip + c * aiq;
        }
        for (int i = 0; i < n; ++i) {
          const double api = a.at(p, i), aqi = a.at(q, i);
          a.at(p, i) = c * api - s * aqi;
          a.at(q, i) = s * api + c * aqi;
        }
        for (int i = 0; i < n; ++i) {
          const double vip = v.at(i, p), viq = v.at(i, q);
          v.at(i, p) = c * vip - s * viq;
          v.at(i, q) = s * vip + c * viq;
        }
      }
  }

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int i, int j) { return a.at(i, i) > a.at(j, j); });
  EigenSym out;
  out.values.resize(n);
  out.vectors = fedlora::Matrix(n, n);
  for (int k = 0; k < n; ++k) {
    out.values[k] = a.at(order[k], order[k]);
    for (int i = 0; i < n; ++i) out.vectors.at(i, k) = v.at(i, order[k]);
  }
  return out;
}

// Best rank-r approximation of W via projection onto the top-r eigenvectors
// of the Gram matrix W^T W.
inline fedlora::Matrix best_rank_r(const fedlora::Matrix& w, int r) {
  const fedlora::Matrix gram = fedlora::matmul_tn(w, w);
  const EigenSym eig = jacobi_eigen_sym(gram);
  fedlora::Matrix vr(gram.rows, r);
  for (int i = 0; i < gram.rows; ++i)
    for (int k = 0; k < r; ++k) vr.at(i, k) = eig.vectors.at(i, k);
  return fedlora::matmul_nt(fedlora::matmul(w, vr), vr);
}

// Plain-order arithmetic mean update applied to theta.
inline std::vector<double> mean_aggregate(const std::vector<double>& theta,
                                          const std::vector<std::vector<double>>& updates,
                                          double server_lr) {
  std::vector<double> out = theta;
  for (size_t i = 0; i < out.size(); ++i) {
    double sum = 0.0;
    for (const auto& u : updates) sum += u[i];
    out[i] += server_lr / static_cast<double>(updates.size()) * sum;
  }
  return out;
}

// Top-k coordinate selection by |a - b|, ties to the lower index.
inline std::vector<size_t> topk_by_abs_diff(const std::vector<double>& a, const std::vector<double>& b,
                                            size_t k) {
  std::vector<size_t> idx(a.size());
  std::iota(idx.begin(), idx.end(), size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](size_t i, size_t j) {
    return std::fabs(a[i] - b[i]) > std::fabs(a[j] - b[j]);
  });
  idx.resize(std::min(k, idx.size()));
  return idx;
}

// Brute-force threshold scans over a sampled series.
struct ScanResult {
  bool exists = false;
  bool censored = false;
  long round = 0;
};

inline ScanResult scan_lifespan(const std::vector<std::pair<long, double>>& pts, long horizon,
                                double x) {
  ScanResult r;
  if (pts.empty()) return r;
  if (pts.back().second > x) {
    r.exists = r.censored = true;
    r.round = horizon;
    return r;
  }
  for (auto it = pts.rbegin(); it != pts.rend(); ++it)
    if (it->second > x) {
      r.exists = true;
      r.round = it->first;
      return r;
    }
  return r;
}

inline ScanResult scan_convergence(const std::vector<std::pair<long, double>>& pts, long /*horizon*/,
                                   double x) {
  ScanResult r;
  for (const auto& [round, v] : pts)
    if (v > x) {
      r.exists = true;
      r.round = round;
      return r;
    }
  return r;
}

// Minimal strict XML well-formedness check: balanced tags, quoted attribute
// values, known entity references, single root element.
inline bool xml_well_formed(const std::string& text, std::string* why = nullptr) {
  auto fail = [&](const std::string& msg) {
    if (why) *why = msg;
    return false;
  };
  size_t i = 0;
  const size_t n = text.size();
  std::vector<std::string> stack;
  int roots = 0;
  auto skip_ws = [&](size_t& p) {
    while (p < n && (text[p] == ' ' || text[p] == '\t' || text[p] == '\n' || text[p] == '\r')) ++p;
  };
  auto name_char = [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == ':' || c == '.';
  };
  while (i < n) {
    if (text[i] == '<') {
      if (i + 1 < n && text[i + 1] == '?') {  // declaration / PI
        const size_t end = text.find("?>", i);
        if (end == std::string::npos) return fail("unterminated <? ... ?>");
        i = end + 2;
        continue;
      }
      if (text.compare(i, 4, "<!--") == 0) {
        const size_t end = text.find("-->", i);
        if (end == std::string::npos) return fail("unterminated comment");
        i = end + 3;
        continue;
      }
      if (i + 1 < n && text[i + 1] == '/') {  // closing tag
        size_t p = i + 2;
        std::string name;
        while (p < n && name_char(text[p])) name += text[p++];
        skip_ws(p);
        if (p >= n || text[p] != '>') return fail("malformed closing tag");
        if (stack.empty() || stack.back() != name) return fail("mismatched closing tag: " + name);
        stack.pop_back();
        i = p + 1;
        continue;
      }
      // opening tag
      size_t p = i + 1;
      std::string name;
      while (p < n && name_char(text[p])) name += text[p++];
      if (name.empty()) return fail("empty tag name");
      while (true) {
        skip_ws(p);
        if (p >= n) return fail("unterminated tag: " + name);
        if (text[p] == '>') {
          if (stack.empty() && roots++ > 0) return fail("multiple root elements");
          stack.push_back(name);
          ++p;
          break;
        }
        if (text[p] == '/' && p + 1 < n && text[p + 1] == '>') {
          if (stack.empty() && roots++ > 0) return fail("multiple root elements");
          p += 2;
          break;
        }
        std::string attr;
        while (p < n && name_char(text[p])) attr += text[p++];
        if (attr.empty()) return fail("bad attribute in tag: " + name);
        skip_ws(p);
        if (p >= n || text[p] != '=') return fail("attribute without value: " + attr);
        ++p;
        skip_ws(p);
        if (p >= n || (text[p] != '"' && text[p] != '\'')) return fail("unquoted attribute: " + attr);
        const char quote = text[p++];
        while (p < n && text[p] != quote) {
          if (text[p] == '<') return fail("raw '<' inside attribute value");
          ++p;
        }
        if (p >= n) return fail("unterminated attribute value: " + attr);
        ++p;
      }
      i = p;
      continue;
    }
    if (text[i] == '&') {
      const size_t semi = text.find(';', i);
      if (semi == std::string::npos || semi - i > 12) return fail("bare '&'");
      const std::string ent = text.substr(i + 1, semi - i - 1);
      if (ent != "amp" && ent != "lt" && ent != "gt" && ent != "quot" && ent != "apos" &&
          !(ent.size() > 1 && ent[0] == '#'))
        return fail("unknown entity: &" + ent + ";");
      i = semi + 1;
      continue;
    }
    if (text[i] == '>') return fail("raw '>' outside tag");
    if (!stack.empty() || text[i] == ' ' || text[i] == '\n' || text[i] == '\t' || text[i] == '\r') {
      ++i;
      continue;
    }
    return fail("text outside the root element");
  }
  if (!stack.empty()) return fail("unclosed element: " + stack.back());
  if (roots != 1) return fail("expected exactly one root element");
  return true;
}

}  // namespace oracles
