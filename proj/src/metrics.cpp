#include "metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <limits>
#include <tuple>

namespace fedlora {

namespace {

int argmax_row(const Matrix& logits, int r) {
  int best = 0;
  for (int c = 1; c < logits.cols; ++c)
    if (logits.at(r, c) > logits.at(r, best)) best = c;
  return best;
}

}  // namespace

double accuracy(const ModelParams& params, const LoraAdapterSet* adapters, const Batch& test) {
  if (test.n == 0) throw InvalidInputError("accuracy: empty dataset");
  const ForwardResult fr = forward(params, adapters, test);
  int correct = 0;
  for (int r = 0; r < test.n; ++r)
    if (argmax_row(fr.logits, r) == test.labels[r]) ++correct;
  return static_cast<double>(correct) / test.n;
}

double attack_success_rate(const ModelParams& params, const LoraAdapterSet* adapters,
                           const PoisonedTestset& poisoned) {
  if (poisoned.data.n == 0) throw InvalidInputError("attack_success_rate: empty poisoned test set");
  const Batch b = poisoned.data.batch();
  const ForwardResult fr = forward(params, adapters, b);
  int hits = 0;
  for (int r = 0; r < b.n; ++r)
    if (argmax_row(fr.logits, r) == poisoned.target) ++hits;
  return static_cast<double>(hits) / b.n;
}

void MetricSeries::validate() const {
  for (size_t i = 0; i < points.size(); ++i) {
    if (points[i].first < 0 || points[i].first >= horizon)
      throw InvalidInputError("metric series: rounds must be in [0, horizon)");
    if (i > 0 && points[i].first <= points[i - 1].first)
      throw InvalidInputError("metric series: rounds must be strictly increasing");
    if (points[i].second < 0.0 || points[i].second > 1.0)
      throw InvalidInputError("metric series: values must be in [0,1]");
  }
}

std::string CensoredRound::str() const {
  switch (state) {
    case State::kAbsent: return "none";
    case State::kAt: return std::to_string(round);
    case State::kCensored: return ">" + std::to_string(horizon);
  }
  return "?";
}

double CensoredRound::numeric() const {
  switch (state) {
    case State::kAt: return static_cast<double>(round);
    case State::kCensored: return static_cast<double>(horizon);
    case State::kAbsent: break;
  }
  throw InvalidInputError("censored round: absent value has no numeric form");
}

CensoredRound lifespan(const MetricSeries& s, double x) {
  s.validate();
  if (!s.points.empty() && s.points.back().second > x) return CensoredRound::censored(s.horizon);
  long last = -1;
  for (const auto& [round, value] : s.points)
    if (value > x) last = round;
  return last < 0 ? CensoredRound::absent() : CensoredRound::at(last);
}

CensoredRound convergence_time(const MetricSeries& s, double x) {
  s.validate();
  for (const auto& [round, value] : s.points)
    if (value > x) return CensoredRound::at(round);
  return CensoredRound::absent();
}

void export_features(const ModelParams& params, const LoraAdapterSet* adapters, const Batch& data,
                     const std::vector<uint8_t>& poisoned_flags, const std::string& path) {
  if (poisoned_flags.size() != static_cast<size_t>(data.n))
    throw InvalidInputError("export_features: flag count mismatch");
  const ForwardResult fr = forward(params, adapters, data);
  std::ofstream os(path);
  if (!os) throw FormatError("cannot open feature file for writing: " + path);
  os << "id,label,poisoned";
  for (int c = 0; c < fr.features.cols; ++c) os << ",f" << c;
  os << "\n";
  char buf[40];
  for (int r = 0; r < data.n; ++r) {
    os << r << "," << data.labels[r] << "," << static_cast<int>(poisoned_flags[r]);
    for (int c = 0; c < fr.features.cols; ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", fr.features.at(r, c));
      os << "," << buf;
    }
    os << "\n";
  }
  if (!os) throw FormatError("short write on feature file: " + path);
}

void write_summary_csv(const std::string& path, const std::vector<SummaryRow>& rows) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot open summary file for writing: " + path);
  os << "attack,rank,aw_end,tc95_acc,tc95_asr,lifespan60_abs,lifespan60_post_aw\n";
  for (const auto& row : rows) {
    os << row.attack << "," << row.rank << "," << row.aw_end << "," << row.tc95_acc.str() << ","
       << row.tc95_asr.str() << "," << row.lifespan60_abs.str() << "," << row.lifespan60_post_aw.str()
       << "\n";
  }
  if (!os) throw FormatError("short write on summary file: " + path);
}

CensoredRound parse_censored(const std::string& text) {
  if (text == "none") return CensoredRound::absent();
  if (text.empty()) throw FormatError("empty censored-round field");
  const bool censored = text[0] == '>';
  const std::string digits = censored ? text.substr(1) : text;
  size_t used = 0;
  long value = 0;
  try {
    value = std::stol(digits, &used);
  } catch (const std::logic_error&) {
    throw FormatError("bad censored-round field: " + text);
  }
  if (used != digits.size() || value < 0)
    throw FormatError("bad censored-round field: " + text);
  return censored ? CensoredRound::censored(value) : CensoredRound::at(value);
}

std::vector<SummaryRow> read_summary_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open summary file: " + path);
  std::string line;
  if (!std::getline(is, line) || line != "attack,rank,aw_end,tc95_acc,tc95_asr,lifespan60_abs,lifespan60_post_aw")
    throw FormatError("bad summary header in " + path);
  std::vector<SummaryRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    size_t pos = 0;
    while (true) {
      const size_t comma = line.find(',', pos);
      fields.push_back(line.substr(pos, comma == std::string::npos ? comma : comma - pos));
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    if (fields.size() != 7)
      throw FormatError("bad summary row in " + path + ": " + line);
    SummaryRow row;
    row.attack = fields[0];
    row.rank = fields[1];
    try {
      row.aw_end = std::stol(fields[2]);
    } catch (const std::logic_error&) {
      throw FormatError("bad aw_end in " + path + ": " + fields[2]);
    }
    row.tc95_acc = parse_censored(fields[3]);
    row.tc95_asr = parse_censored(fields[4]);
    row.lifespan60_abs = parse_censored(fields[5]);
    row.lifespan60_post_aw = parse_censored(fields[6]);
    rows.push_back(std::move(row));
  }
  return rows;
}

namespace {

// Sort key where absent is the worst outcome for the given metric kind.
double censored_key(const CensoredRound& c, bool absent_is_high) {
  if (c.state == CensoredRound::State::kAbsent)
    return absent_is_high ? std::numeric_limits<double>::infinity()
                          : -std::numeric_limits<double>::infinity();
  return c.numeric();
}

CensoredRound median_censored(std::vector<CensoredRound> vals, bool absent_is_high) {
  std::stable_sort(vals.begin(), vals.end(), [&](const CensoredRound& a, const CensoredRound& b) {
    return censored_key(a, absent_is_high) < censored_key(b, absent_is_high);
  });
  return vals[(vals.size() - 1) / 2];
}

}  // namespace

std::vector<SummaryRow> combine_with_medians(const std::vector<SummaryRow>& rows) {
  std::vector<SummaryRow> out = rows;
  std::vector<std::tuple<std::string, std::string, long>> order;
  for (const auto& row : rows) {
    const auto key = std::make_tuple(row.attack, row.rank, row.aw_end);
    if (std::find(order.begin(), order.end(), key) == order.end()) order.push_back(key);
  }
  for (const auto& key : order) {
    std::vector<CensoredRound> tc_acc, tc_asr, ls_abs, ls_post;
    for (const auto& row : rows) {
      if (std::make_tuple(row.attack, row.rank, row.aw_end) != key) continue;
      tc_acc.push_back(row.tc95_acc);
      tc_asr.push_back(row.tc95_asr);
      ls_abs.push_back(row.lifespan60_abs);
      ls_post.push_back(row.lifespan60_post_aw);
    }
    SummaryRow med;
    med.attack = "median:" + std::get<0>(key);
    med.rank = std::get<1>(key);
    med.aw_end = std::get<2>(key);
    med.tc95_acc = median_censored(tc_acc, true);
    med.tc95_asr = median_censored(tc_asr, true);
    med.lifespan60_abs = median_censored(ls_abs, false);
    med.lifespan60_post_aw = median_censored(ls_post, false);
    out.push_back(std::move(med));
  }
  return out;
}

}  // namespace fedlora
