// Copyright 2025 The depflow Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "depflow/flow.hpp"
#include "depflow/likelihood.hpp"

namespace depflow {

/// Regular evaluation grid over [lo, hi]^2.
struct DensityGridSpec {
  std::size_t cells = 300;
  double lo = -4.0;
  double hi = 4.0;

  double step() const { return (hi - lo) / static_cast<double>(cells); }
  double center(std::size_t i) const { return lo + (static_cast<double>(i) + 0.5) * step(); }
};

/// exp(log_prob) at the cell centers; entry (iy, ix) is the density at
/// (center(ix), center(iy)).
inline DenseMatrix density_grid(const FlowModel& flow, const DensityGridSpec& spec) {
  if (flow.dim() != 2) fail("density_grid: need a 2-D model, got p=", flow.dim());
  const std::size_t c = spec.cells;
  DenseMatrix points(c * c, 2);
  for (std::size_t iy = 0; iy < c; ++iy) {
    for (std::size_t ix = 0; ix < c; ++ix) {
      points(iy * c + ix, 0) = spec.center(ix);
      points(iy * c + ix, 1) = spec.center(iy);
    }
  }
  const std::vector<double> lp = flow.log_prob_iid(points);
  DenseMatrix grid(c, c);
  for (std::size_t iy = 0; iy < c; ++iy)
    for (std::size_t ix = 0; ix < c; ++ix) grid(iy, ix) = std::exp(lp[iy * c + ix]);
  return grid;
}

/// Midpoint-rule mass of a density grid.
inline double grid_mass(const DenseMatrix& grid, const DensityGridSpec& spec) {
  double s = 0.0;
  for (double v : grid.storage()) s += v;
  return s * spec.step() * spec.step();
}

namespace detail {

inline std::string fmt_coord(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

/// White-to-dark-blue ramp quantized to 64 levels for run-length merging.
inline std::string heat_color(double t) {
  const int level = std::min(63, std::max(0, static_cast<int>(t * 64.0)));
  const double f = static_cast<double>(level) / 63.0;
  const int r = static_cast<int>(255.0 + f * (8.0 - 255.0));
  const int g = static_cast<int>(255.0 + f * (48.0 - 255.0));
  const int b = static_cast<int>(255.0 + f * (107.0 - 255.0));
  char buf[8];
  std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", r, g, b);
  return buf;
}

}  // namespace detail

/// Density heatmap plus a fixed-seed sample scatter, written as SVG. Output
/// is byte-identical for identical checkpoints: colors are quantized,
/// coordinates printed with fixed precision, and the scatter uses an
/// internal seed.
inline void render_density_svg(const FlowModel& flow, const DensityGridSpec& spec,
                               const std::string& path, std::size_t scatter_points = 512) {
  if (flow.dim() != 2) fail("render_density_svg: need a 2-D model, got p=", flow.dim());
  const DenseMatrix grid = density_grid(flow, spec);
  double vmax = 0.0;
  for (double v : grid.storage()) vmax = std::max(vmax, v);
  if (vmax <= 0.0) vmax = 1.0;

  const std::size_t c = spec.cells;
  const double px = 600.0 / static_cast<double>(c);
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"600\" height=\"600\" "
         "viewBox=\"0 0 600 600\">\n";
  svg << "<rect width=\"600\" height=\"600\" fill=\"#ffffff\"/>\n";
  // Heatmap rows with run-length merged cells; sqrt stretch lifts the tails.
  for (std::size_t iy = 0; iy < c; ++iy) {
    const double y = 600.0 - static_cast<double>(iy + 1) * px;  // svg y grows downward
    std::size_t run_start = 0;
    int run_level = -1;
    auto flush = [&](std::size_t end) {
      if (run_level <= 0) return;  // level 0 is the white background
      const double x = static_cast<double>(run_start) * px;
      const double w = static_cast<double>(end - run_start) * px;
      svg << "<rect x=\"" << detail::fmt_coord(x) << "\" y=\"" << detail::fmt_coord(y) << "\" width=\""
          << detail::fmt_coord(w) << "\" height=\"" << detail::fmt_coord(px) << "\" fill=\""
          << detail::heat_color(static_cast<double>(run_level) / 63.0) << "\"/>\n";
    };
    for (std::size_t ix = 0; ix < c; ++ix) {
      const double t = std::sqrt(grid(iy, ix) / vmax);
      const int level = std::min(63, std::max(0, static_cast<int>(t * 64.0)));
      if (level != run_level) {
        flush(ix);
        run_start = ix;
        run_level = level;
      }
    }
    flush(c);
  }
  // Sample overlay with a fixed internal stream so files stay reproducible.
  if (scatter_points > 0) {
    Rng rng(0x5caffe);
    const DenseMatrix samples = flow.sample(scatter_points, rng);
    const double span = spec.hi - spec.lo;
    for (std::size_t i = 0; i < samples.rows(); ++i) {
      const double sx = (samples(i, 0) - spec.lo) / span * 600.0;
      const double sy = 600.0 - (samples(i, 1) - spec.lo) / span * 600.0;
      if (sx < 0.0 || sx > 600.0 || sy < 0.0 || sy > 600.0) continue;
      svg << "<circle cx=\"" << detail::fmt_coord(sx) << "\" cy=\"" << detail::fmt_coord(sy)
          << "\" r=\"1.2\" fill=\"#000000\" fill-opacity=\"0.3\"/>\n";
    }
  }
  svg << "</svg>\n";
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("render_density_svg: cannot open ", path);
  out << svg.str();
}

/// Minimal multi-series line chart (used by the sensitivity sweep).
struct LineSeries {
  std::string label;
  std::string color;
  std::vector<double> values;
};

inline void render_line_chart(const std::vector<std::string>& x_labels,
                              const std::vector<LineSeries>& series, const std::string& title,
                              const std::string& path) {
  if (series.empty()) fail("render_line_chart: no series");
  double lo = series[0].values.at(0), hi = lo;
  for (const LineSeries& s : series) {
    if (s.values.size() != x_labels.size()) fail("render_line_chart: series length mismatch");
    for (double v : s.values) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  const double pad = (hi - lo) * 0.1 + 1e-9;
  lo -= pad;
  hi += pad;
  const double w = 640.0, h = 420.0, ml = 70.0, mb = 50.0, mt = 40.0, mr = 20.0;
  auto xpos = [&](std::size_t i) {
    return ml + (w - ml - mr) * static_cast<double>(i) / std::max<std::size_t>(1, x_labels.size() - 1);
  };
  auto ypos = [&](double v) { return mt + (h - mt - mb) * (hi - v) / (hi - lo); };
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"420\" viewBox=\"0 0 640 420\">\n";
  svg << "<rect width=\"640\" height=\"420\" fill=\"#ffffff\"/>\n";
  svg << "<text x=\"320\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">"
      << title << "</text>\n";
  svg << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << (h - mb)
      << "\" stroke=\"#333333\"/>\n";
  svg << "<line x1=\"" << ml << "\" y1=\"" << (h - mb) << "\" x2=\"" << (w - mr) << "\" y2=\"" << (h - mb)
      << "\" stroke=\"#333333\"/>\n";
  for (int tick = 0; tick <= 4; ++tick) {
    const double v = lo + (hi - lo) * tick / 4.0;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3f", v);
    svg << "<text x=\"" << (ml - 6) << "\" y=\"" << detail::fmt_coord(ypos(v) + 4)
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << buf << "</text>\n";
  }
  for (std::size_t i = 0; i < x_labels.size(); ++i) {
    svg << "<text x=\"" << detail::fmt_coord(xpos(i)) << "\" y=\"" << (h - mb + 18)
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << x_labels[i]
        << "</text>\n";
  }
  for (std::size_t si = 0; si < series.size(); ++si) {
    const LineSeries& s = series[si];
    svg << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < s.values.size(); ++i) {
      if (i) svg << ' ';
      svg << detail::fmt_coord(xpos(i)) << ',' << detail::fmt_coord(ypos(s.values[i]));
    }
    svg << "\"/>\n";
    svg << "<text x=\"" << (ml + 10) << "\" y=\"" << (mt + 16 + 16 * static_cast<double>(si))
        << "\" font-family=\"sans-serif\" font-size=\"12\" fill=\"" << s.color << "\">" << s.label
        << "</text>\n";
  }
  svg << "</svg>\n";
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("render_line_chart: cannot open ", path);
  out << svg.str();
}

}  // namespace depflow
