#pragma once

#include <string>
#include <vector>

namespace hecomp {

struct Series {
  std::string name;
  std::vector<double> x, y;
  std::vector<double> err;  // optional symmetric error bars
};

struct Arrow {
  double x0, y0, x1, y1;
  bool bold = false;
};

struct BoxGroup {
  std::string name;
  std::vector<double> values;
};

struct PlotLabels {
  std::string title, xlabel, ylabel;
};

// Minimal SVG figures: axes, ticks, series and a legend.
std::string line_plot_svg(const PlotLabels& labels, const std::vector<Series>& series);
std::string scatter_plot_svg(const PlotLabels& labels, const std::vector<Series>& points,
                             const std::vector<Series>& curves = {});
std::string box_plot_svg(const PlotLabels& labels, const std::vector<BoxGroup>& groups);
std::string arrow_plot_svg(const PlotLabels& labels, const std::vector<Arrow>& arrows);

}  // namespace hecomp
