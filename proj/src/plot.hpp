#pragma once

#include <string>
#include <vector>

#include "numkit.hpp"

namespace fedlora {

struct PlotSeries {
  std::string label;
  std::vector<std::pair<double, double>> points;  // (x, y), x ascending
};

struct PlotOptions {
  std::string title;
  std::string x_label = "round";
  std::string y_label = "value";
  bool log_y = false;
  double aw_marker = -1.0;  // vertical line at this x when >= 0
  double x_split = -1.0;    // piecewise x-axis: [0, split] gets 60% of the width
  int width = 720;
  int height = 440;
};

// Self-contained SVG line plot: one polyline per series, ticked axes, legend,
// optional attack-window marker and compressed late-x region.
void write_plot_svg(const std::string& path, const std::vector<PlotSeries>& series,
                    const PlotOptions& options);

}  // namespace fedlora
