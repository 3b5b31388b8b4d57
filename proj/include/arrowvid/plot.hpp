#pragma once
// Minimal raster plots (PNG): labeled bar charts and multi-series line
// charts.  Text uses an embedded 5x7 bitmap font — no external assets.

#include <string>
#include <vector>

namespace arrowvid {

void bar_chart_png(const std::string& path, const std::string& title,
                   const std::vector<std::string>& labels, const std::vector<double>& values);

struct Series {
  std::string name;
  std::vector<double> y;  // x is the index
};
void line_chart_png(const std::string& path, const std::string& title, const std::vector<Series>& series);

}  // namespace arrowvid
