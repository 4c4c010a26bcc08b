#include "plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

namespace fedlora {

namespace {

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                          "#9467bd", "#8c564b", "#17becf", "#7f7f7f"};
constexpr int kPaletteSize = 8;

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

// Largest 1/2/5 * 10^k not exceeding `raw`.
double nice_step(double raw) {
  if (raw <= 0.0) return 1.0;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  for (double m : {5.0, 2.0, 1.0})
    if (m * mag <= raw) return m * mag;
  return mag;
}

struct Axis {
  double lo = 0.0, hi = 1.0;
  double px0 = 0.0, px1 = 1.0;
};

}  // namespace

void write_plot_svg(const std::string& path, const std::vector<PlotSeries>& series,
                    const PlotOptions& opt) {
  if (series.empty()) throw InvalidInputError("plot: no series");
  const double kLogFloor = 1e-300;

  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
  double ymin = xmin, ymax = -xmin;
  for (const auto& s : series) {
    for (const auto& [x, y] : s.points) {
      if (opt.log_y && y <= 0.0) continue;
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
      const double t = opt.log_y ? std::log10(std::max(y, kLogFloor)) : y;
      ymin = std::min(ymin, t);
      ymax = std::max(ymax, t);
    }
  }
  if (!(xmin <= xmax)) throw InvalidInputError("plot: series contain no drawable points");
  if (xmax == xmin) xmax = xmin + 1.0;
  if (ymax == ymin) {
    ymin -= 1.0;
    ymax += 1.0;
  }
  const double ypad = 0.05 * (ymax - ymin);
  ymin -= ypad;
  ymax += ypad;

  const double ml = 62, mr = 16, mt = 34, mb = 48;
  const double pw = opt.width - ml - mr, ph = opt.height - mt - mb;

  const bool split = opt.x_split > xmin && opt.x_split < xmax;
  const double split_px = 0.6;
  auto x_to_px = [&](double x) {
    double f;
    if (!split) {
      f = (x - xmin) / (xmax - xmin);
    } else if (x <= opt.x_split) {
      f = split_px * (x - xmin) / (opt.x_split - xmin);
    } else {
      f = split_px + (1.0 - split_px) * (x - opt.x_split) / (xmax - opt.x_split);
    }
    return ml + f * pw;
  };
  auto y_to_px = [&](double y) {
    const double t = opt.log_y ? std::log10(std::max(y, kLogFloor)) : y;
    return mt + ph * (1.0 - (t - ymin) / (ymax - ymin));
  };

  std::ofstream os(path);
  if (!os) throw FormatError("cannot open plot file for writing: " + path);
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << opt.width << "\" height=\""
     << opt.height << "\" viewBox=\"0 0 " << opt.width << " " << opt.height << "\">\n";
  os << "<rect x=\"0\" y=\"0\" width=\"" << opt.width << "\" height=\"" << opt.height
     << "\" fill=\"white\"/>\n";
  if (!opt.title.empty())
    os << "<text x=\"" << num(ml + pw / 2) << "\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" "
          "font-size=\"14\">"
       << xml_escape(opt.title) << "</text>\n";

  // frame
  os << "<rect x=\"" << num(ml) << "\" y=\"" << num(mt) << "\" width=\"" << num(pw) << "\" height=\""
     << num(ph) << "\" fill=\"none\" stroke=\"#333333\" stroke-width=\"1\"/>\n";

  // x ticks: per region when split, otherwise over the whole range
  auto draw_x_tick = [&](double x) {
    const double px = x_to_px(x);
    os << "<line x1=\"" << num(px) << "\" y1=\"" << num(mt + ph) << "\" x2=\"" << num(px) << "\" y2=\""
       << num(mt + ph + 5) << "\" stroke=\"#333333\" stroke-width=\"1\"/>\n";
    os << "<text x=\"" << num(px) << "\" y=\"" << num(mt + ph + 18)
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << num(x)
       << "</text>\n";
  };
  auto ticks_over = [&](double lo, double hi, int want) {
    const double step = nice_step((hi - lo) / std::max(1, want));
    for (double x = std::ceil(lo / step) * step; x <= hi + 1e-9 * step; x += step) draw_x_tick(x);
  };
  if (split) {
    ticks_over(xmin, opt.x_split, 4);
    ticks_over(opt.x_split, xmax, 2);
    const double px = x_to_px(opt.x_split);
    os << "<line x1=\"" << num(px) << "\" y1=\"" << num(mt) << "\" x2=\"" << num(px) << "\" y2=\""
       << num(mt + ph) << "\" stroke=\"#bbbbbb\" stroke-width=\"1\" stroke-dasharray=\"2,3\"/>\n";
  } else {
    ticks_over(xmin, xmax, 5);
  }

  // y ticks
  if (opt.log_y) {
    const int d0 = static_cast<int>(std::ceil(ymin));
    const int d1 = static_cast<int>(std::floor(ymax));
    for (int d = d0; d <= d1; ++d) {
      const double py = mt + ph * (1.0 - (d - ymin) / (ymax - ymin));
      os << "<line x1=\"" << num(ml - 5) << "\" y1=\"" << num(py) << "\" x2=\"" << num(ml) << "\" y2=\""
         << num(py) << "\" stroke=\"#333333\" stroke-width=\"1\"/>\n";
      os << "<text x=\"" << num(ml - 8) << "\" y=\"" << num(py + 4)
         << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">1e" << d << "</text>\n";
    }
  } else {
    const double step = nice_step((ymax - ymin) / 5);
    for (double y = std::ceil(ymin / step) * step; y <= ymax + 1e-9 * step; y += step) {
      const double py = mt + ph * (1.0 - (y - ymin) / (ymax - ymin));
      os << "<line x1=\"" << num(ml - 5) << "\" y1=\"" << num(py) << "\" x2=\"" << num(ml) << "\" y2=\""
         << num(py) << "\" stroke=\"#333333\" stroke-width=\"1\"/>\n";
      os << "<text x=\"" << num(ml - 8) << "\" y=\"" << num(py + 4)
         << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << num(y)
         << "</text>\n";
    }
  }

  // axis labels
  os << "<text x=\"" << num(ml + pw / 2) << "\" y=\"" << num(opt.height - 10)
     << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">"
     << xml_escape(opt.x_label) << "</text>\n";
  os << "<text x=\"14\" y=\"" << num(mt + ph / 2)
     << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 14 "
     << num(mt + ph / 2) << ")\">" << xml_escape(opt.y_label) << "</text>\n";

  // attack-window marker
  if (opt.aw_marker >= xmin && opt.aw_marker <= xmax) {
    const double px = x_to_px(opt.aw_marker);
    os << "<line x1=\"" << num(px) << "\" y1=\"" << num(mt) << "\" x2=\"" << num(px) << "\" y2=\""
       << num(mt + ph) << "\" stroke=\"black\" stroke-width=\"1.5\" stroke-dasharray=\"5,4\"/>\n";
    os << "<text x=\"" << num(px + 4) << "\" y=\"" << num(mt + 12)
       << "\" font-family=\"sans-serif\" font-size=\"10\">AW end</text>\n";
  }

  // series
  for (size_t i = 0; i < series.size(); ++i) {
    const char* color = kPalette[i % kPaletteSize];
    std::string pts;
    for (const auto& [x, y] : series[i].points) {
      if (opt.log_y && y <= 0.0) continue;
      if (!pts.empty()) pts += " ";
      pts += num(x_to_px(x)) + "," + num(y_to_px(y));
    }
    if (pts.empty()) continue;
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.6\" points=\"" << pts
       << "\"/>\n";
  }

  // legend
  double ly = mt + 10;
  for (size_t i = 0; i < series.size(); ++i) {
    const char* color = kPalette[i % kPaletteSize];
    const double lx = ml + pw - 150;
    os << "<rect x=\"" << num(lx) << "\" y=\"" << num(ly - 8) << "\" width=\"12\" height=\"3\" fill=\""
       << color << "\"/>\n";
    os << "<text x=\"" << num(lx + 18) << "\" y=\"" << num(ly - 3)
       << "\" font-family=\"sans-serif\" font-size=\"11\">" << xml_escape(series[i].label)
       << "</text>\n";
    ly += 16;
  }

  os << "</svg>\n";
  if (!os) throw FormatError("short write on plot file: " + path);
}

}  // namespace fedlora
