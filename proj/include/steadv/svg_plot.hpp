#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "steadv/errors.hpp"

namespace steadv {

struct PlotSeries {
  std::string label;
  std::string color;
  std::string marker;     // "circle" | "triangle" | "square"
  std::string dash;       // stroke-dasharray, empty for solid
  std::string css_class;  // marker class, one element per data point
  std::vector<double> values;
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace detail

// Minimal deterministic line plot: series indexed by iteration on x.
inline void write_line_plot_svg(const std::string& path, const std::string& title,
                                const std::vector<PlotSeries>& series,
                                std::optional<double> threshold,
                                const std::string& threshold_label = "zero-accuracy loss") {
  std::ofstream os(path);
  if (!os) throw IoError("svg: cannot open for write: " + path);

  const double width = 640, height = 420;
  const double ml = 64, mr = 16, mt = 36, mb = 44;
  const double pw = width - ml - mr, ph = height - mt - mb;

  std::size_t npts = 0;
  double ymin = 1e300, ymax = -1e300;
  for (const auto& s : series) {
    npts = std::max(npts, s.values.size());
    for (double v : s.values) {
      ymin = std::min(ymin, v);
      ymax = std::max(ymax, v);
    }
  }
  if (threshold) {
    ymin = std::min(ymin, *threshold);
    ymax = std::max(ymax, *threshold);
  }
  if (npts == 0 || ymin > ymax) {
    ymin = 0;
    ymax = 1;
  }
  if (ymax - ymin < 1e-12) ymax = ymin + 1;
  double pad = 0.06 * (ymax - ymin);
  ymin -= pad;
  ymax += pad;

  auto xpos = [&](std::size_t i) {
    return ml + (npts <= 1 ? 0.0 : pw * static_cast<double>(i) / static_cast<double>(npts - 1));
  };
  auto ypos = [&](double v) { return mt + ph * (1.0 - (v - ymin) / (ymax - ymin)); };

  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << width / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">"
     << title << "</text>\n";
  os << "<line x1=\"" << ml << "\" y1=\"" << mt + ph << "\" x2=\"" << ml + pw << "\" y2=\""
     << mt + ph << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << mt + ph
     << "\" stroke=\"black\"/>\n";

  for (int t = 0; t <= 4; ++t) {
    double v = ymin + (ymax - ymin) * t / 4.0;
    os << "<text x=\"" << ml - 6 << "\" y=\"" << detail::fmt_double(ypos(v) + 4)
       << "\" text-anchor=\"end\" font-size=\"10\">" << detail::fmt_double(std::round(v * 1000) / 1000)
       << "</text>\n";
  }
  std::size_t xstep = npts > 8 ? (npts - 1) / 8 + 1 : 1;
  for (std::size_t i = 0; i < npts; i += xstep)
    os << "<text x=\"" << detail::fmt_double(xpos(i)) << "\" y=\"" << mt + ph + 16
       << "\" text-anchor=\"middle\" font-size=\"10\">" << i << "</text>\n";
  os << "<text x=\"" << ml + pw / 2 << "\" y=\"" << height - 8
     << "\" text-anchor=\"middle\" font-size=\"11\">iteration</text>\n";

  if (threshold) {
    double y = ypos(*threshold);
    os << "<line x1=\"" << ml << "\" y1=\"" << detail::fmt_double(y) << "\" x2=\"" << ml + pw
       << "\" y2=\"" << detail::fmt_double(y)
       << "\" stroke=\"cyan\" stroke-dasharray=\"6,4\" stroke-width=\"1.5\"/>\n";
    os << "<text x=\"" << ml + 4 << "\" y=\"" << detail::fmt_double(y - 4)
       << "\" font-size=\"10\" fill=\"darkcyan\">" << threshold_label << "</text>\n";
  }

  double legend_y = mt + 10;
  for (const auto& s : series) {
    os << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.5\"";
    if (!s.dash.empty()) os << " stroke-dasharray=\"" << s.dash << "\"";
    os << " points=\"";
    for (std::size_t i = 0; i < s.values.size(); ++i) {
      if (i) os << " ";
      os << detail::fmt_double(xpos(i)) << "," << detail::fmt_double(ypos(s.values[i]));
    }
    os << "\"/>\n";
    for (std::size_t i = 0; i < s.values.size(); ++i) {
      double x = xpos(i), y = ypos(s.values[i]);
      if (s.marker == "triangle") {
        os << "<polygon class=\"" << s.css_class << "\" fill=\"" << s.color << "\" points=\""
           << detail::fmt_double(x) << "," << detail::fmt_double(y - 3.5) << " "
           << detail::fmt_double(x - 3) << "," << detail::fmt_double(y + 2.5) << " "
           << detail::fmt_double(x + 3) << "," << detail::fmt_double(y + 2.5) << "\"/>\n";
      } else if (s.marker == "square") {
        os << "<rect class=\"" << s.css_class << "\" fill=\"" << s.color << "\" x=\""
           << detail::fmt_double(x - 2.5) << "\" y=\"" << detail::fmt_double(y - 2.5)
           << "\" width=\"5\" height=\"5\"/>\n";
      } else {
        os << "<circle class=\"" << s.css_class << "\" fill=\"" << s.color << "\" cx=\""
           << detail::fmt_double(x) << "\" cy=\"" << detail::fmt_double(y) << "\" r=\"3\"/>\n";
      }
    }
    os << "<text x=\"" << ml + pw - 150 << "\" y=\"" << legend_y << "\" font-size=\"11\" fill=\""
       << s.color << "\">" << s.label << "</text>\n";
    legend_y += 14;
  }
  os << "</svg>\n";
  if (!os) throw IoError("svg: write failed: " + path);
}

}  // namespace steadv
