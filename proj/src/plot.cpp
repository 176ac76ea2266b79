#include "hecomp/plot.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

namespace hecomp {

namespace {

constexpr double kW = 640, kH = 420, kLeft = 70, kRight = 150, kTop = 40, kBottom = 55;
const char* const kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

std::string esc(const std::string& s) {
  std::string o;
  for (char c : s) {
    if (c == '<') o += "&lt;";
    else if (c == '>') o += "&gt;";
    else if (c == '&') o += "&amp;";
    else o += c;
  }
  return o;
}

std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(3) << v;
  return os.str();
}

struct Range {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  void add(double v) {
    if (!std::isfinite(v)) return;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  void finish() {
    if (!std::isfinite(lo)) lo = 0, hi = 1;
    if (hi - lo < 1e-12) {
      const double pad = std::max(std::fabs(lo) * 0.1, 1e-3);
      lo -= pad;
      hi += pad;
    }
    const double pad = 0.05 * (hi - lo);
    lo -= pad;
    hi += pad;
  }
};

class Canvas {
 public:
  Canvas(const PlotLabels& labels, Range xr, Range yr) : xr_(xr), yr_(yr) {
    xr_.finish();
    yr_.finish();
    os_ << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
        << "\" font-family=\"sans-serif\" font-size=\"11\">\n"
        << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
        << "<text x=\"" << kW / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << esc(labels.title)
        << "</text>\n";
    const double x0 = kLeft, x1 = kW - kRight, y0 = kH - kBottom, y1 = kTop;
    os_ << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x1 << "\" y2=\"" << y0 << "\" stroke=\"black\"/>\n";
    os_ << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x0 << "\" y2=\"" << y1 << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
      const double xv = xr_.lo + (xr_.hi - xr_.lo) * i / 4.0, yv = yr_.lo + (yr_.hi - yr_.lo) * i / 4.0;
      os_ << "<text x=\"" << px(xv) << "\" y=\"" << y0 + 16 << "\" text-anchor=\"middle\">" << num(xv) << "</text>\n";
      os_ << "<text x=\"" << x0 - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << num(yv) << "</text>\n";
    }
    os_ << "<text x=\"" << (x0 + x1) / 2 << "\" y=\"" << kH - 12 << "\" text-anchor=\"middle\">" << esc(labels.xlabel)
        << "</text>\n";
    os_ << "<text x=\"16\" y=\"" << (y0 + y1) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
        << (y0 + y1) / 2 << ")\">" << esc(labels.ylabel) << "</text>\n";
  }

  double px(double x) const { return kLeft + (x - xr_.lo) / (xr_.hi - xr_.lo) * (kW - kLeft - kRight); }
  double py(double y) const { return kH - kBottom - (y - yr_.lo) / (yr_.hi - yr_.lo) * (kH - kTop - kBottom); }

  void line(double x0, double y0, double x1, double y1, const std::string& color, double width = 1.5) {
    os_ << "<line x1=\"" << px(x0) << "\" y1=\"" << py(y0) << "\" x2=\"" << px(x1) << "\" y2=\"" << py(y1)
        << "\" stroke=\"" << color << "\" stroke-width=\"" << width << "\"/>\n";
  }
  void dot(double x, double y, const std::string& color) {
    os_ << "<circle cx=\"" << px(x) << "\" cy=\"" << py(y) << "\" r=\"3\" fill=\"" << color << "\"/>\n";
  }
  void raw(const std::string& s) { os_ << s; }
  void legend(int i, const std::string& name, const std::string& color) {
    const double y = kTop + 14 * i + 6;
    os_ << "<rect x=\"" << kW - kRight + 12 << "\" y=\"" << y - 8 << "\" width=\"10\" height=\"10\" fill=\"" << color
        << "\"/>\n<text x=\"" << kW - kRight + 26 << "\" y=\"" << y + 1 << "\">" << esc(name) << "</text>\n";
  }
  std::string finish() {
    os_ << "</svg>\n";
    return os_.str();
  }

 private:
  Range xr_, yr_;
  std::ostringstream os_;
};

}  // namespace

std::string line_plot_svg(const PlotLabels& labels, const std::vector<Series>& series) {
  Range xr, yr;
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      xr.add(s.x[i]);
      const double e = i < s.err.size() && std::isfinite(s.err[i]) ? s.err[i] : 0.0;
      yr.add(s.y[i] - e);
      yr.add(s.y[i] + e);
    }
  }
  Canvas c(labels, xr, yr);
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const std::string color = kColors[k % 6];
    for (std::size_t i = 0; i + 1 < s.x.size(); ++i) c.line(s.x[i], s.y[i], s.x[i + 1], s.y[i + 1], color);
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      c.dot(s.x[i], s.y[i], color);
      if (i < s.err.size() && std::isfinite(s.err[i]) && s.err[i] > 0) {
        c.line(s.x[i], s.y[i] - s.err[i], s.x[i], s.y[i] + s.err[i], color, 1.0);
      }
    }
    c.legend(static_cast<int>(k), s.name, color);
  }
  return c.finish();
}

std::string scatter_plot_svg(const PlotLabels& labels, const std::vector<Series>& points,
                             const std::vector<Series>& curves) {
  Range xr, yr;
  for (const auto& s : points) {
    for (double v : s.x) xr.add(v);
    for (double v : s.y) yr.add(v);
  }
  Canvas c(labels, xr, yr);
  for (std::size_t k = 0; k < points.size(); ++k) {
    const std::string color = kColors[k % 6];
    for (std::size_t i = 0; i < points[k].x.size(); ++i) c.dot(points[k].x[i], points[k].y[i], color);
    c.legend(static_cast<int>(k), points[k].name, color);
  }
  for (std::size_t k = 0; k < curves.size(); ++k) {
    const std::string color = kColors[(points.size() + k) % 6];
    const auto& s = curves[k];
    for (std::size_t i = 0; i + 1 < s.x.size(); ++i) c.line(s.x[i], s.y[i], s.x[i + 1], s.y[i + 1], color, 1.0);
    c.legend(static_cast<int>(points.size() + k), s.name, color);
  }
  return c.finish();
}

std::string box_plot_svg(const PlotLabels& labels, const std::vector<BoxGroup>& groups) {
  Range xr, yr;
  xr.add(-0.5);
  xr.add(static_cast<double>(groups.size()) - 0.5);
  for (const auto& g : groups)
    for (double v : g.values) yr.add(v);
  Canvas c(labels, xr, yr);
  for (std::size_t k = 0; k < groups.size(); ++k) {
    std::vector<double> v = groups[k].values;
    const std::string color = kColors[k % 6];
    c.legend(static_cast<int>(k), groups[k].name, color);
    if (v.empty()) continue;
    std::sort(v.begin(), v.end());
    auto q = [&](double p) {
      const double pos = p * (v.size() - 1);
      const std::size_t i = static_cast<std::size_t>(pos);
      return i + 1 < v.size() ? v[i] + (pos - i) * (v[i + 1] - v[i]) : v[i];
    };
    const double x = static_cast<double>(k), w = 0.25;
    std::ostringstream r;
    r << "<rect x=\"" << c.px(x - w) << "\" y=\"" << c.py(q(0.75)) << "\" width=\"" << c.px(x + w) - c.px(x - w)
      << "\" height=\"" << std::max(1.0, c.py(q(0.25)) - c.py(q(0.75))) << "\" fill=\"none\" stroke=\"" << color
      << "\"/>\n";
    c.raw(r.str());
    c.line(x - w, q(0.5), x + w, q(0.5), color, 2.0);
    c.line(x, v.front(), x, q(0.25), color, 1.0);
    c.line(x, q(0.75), x, v.back(), color, 1.0);
    for (double y : v) c.dot(x, y, color);
  }
  return c.finish();
}

std::string arrow_plot_svg(const PlotLabels& labels, const std::vector<Arrow>& arrows) {
  Range xr, yr;
  for (const auto& a : arrows) {
    xr.add(a.x0);
    xr.add(a.x1);
    yr.add(a.y0);
    yr.add(a.y1);
  }
  Canvas c(labels, xr, yr);
  c.raw("<defs><marker id=\"head\" markerWidth=\"8\" markerHeight=\"8\" refX=\"6\" refY=\"3\" orient=\"auto\">"
        "<path d=\"M0,0 L6,3 L0,6 z\" fill=\"black\"/></marker></defs>\n");
  for (const auto& a : arrows) {
    std::ostringstream r;
    r << "<line x1=\"" << c.px(a.x0) << "\" y1=\"" << c.py(a.y0) << "\" x2=\"" << c.px(a.x1) << "\" y2=\""
      << c.py(a.y1) << "\" stroke=\"black\" stroke-opacity=\"" << (a.bold ? 1.0 : 0.25) << "\" stroke-width=\""
      << (a.bold ? 2.0 : 1.0) << "\" marker-end=\"url(#head)\"/>\n";
    c.raw(r.str());
  }
  return c.finish();
}

}  // namespace hecomp
