#include "arrowvid/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>

#include "arrowvid/image_io.hpp"

namespace arrowvid {

namespace {

// Classic 5x7 font, column-wise, LSB = top row, ASCII 32..126.
const uint8_t kFont[95][5] = {
    {0x00, 0x00, 0x00, 0x00, 0x00}, {0x00, 0x00, 0x5F, 0x00, 0x00}, {0x00, 0x07, 0x00, 0x07, 0x00},
    {0x14, 0x7F, 0x14, 0x7F, 0x14}, {0x24, 0x2A, 0x7F, 0x2A, 0x12}, {0x23, 0x13, 0x08, 0x64, 0x62},
    {0x36, 0x49, 0x55, 0x22, 0x50}, {0x00, 0x05, 0x03, 0x00, 0x00}, {0x00, 0x1C, 0x22, 0x41, 0x00},
    {0x00, 0x41, 0x22, 0x1C, 0x00}, {0x08, 0x2A, 0x1C, 0x2A, 0x08}, {0x08, 0x08, 0x3E, 0x08, 0x08},
    {0x00, 0x50, 0x30, 0x00, 0x00}, {0x08, 0x08, 0x08, 0x08, 0x08}, {0x00, 0x60, 0x60, 0x00, 0x00},
    {0x20, 0x10, 0x08, 0x04, 0x02}, {0x3E, 0x51, 0x49, 0x45, 0x3E}, {0x00, 0x42, 0x7F, 0x40, 0x00},
    {0x42, 0x61, 0x51, 0x49, 0x46}, {0x21, 0x41, 0x45, 0x4B, 0x31}, {0x18, 0x14, 0x12, 0x7F, 0x10},
    {0x27, 0x45, 0x45, 0x45, 0x39}, {0x3C, 0x4A, 0x49, 0x49, 0x30}, {0x01, 0x71, 0x09, 0x05, 0x03},
    {0x36, 0x49, 0x49, 0x49, 0x36}, {0x06, 0x49, 0x49, 0x29, 0x1E}, {0x00, 0x36, 0x36, 0x00, 0x00},
    {0x00, 0x56, 0x36, 0x00, 0x00}, {0x00, 0x08, 0x14, 0x22, 0x41}, {0x14, 0x14, 0x14, 0x14, 0x14},
    {0x41, 0x22, 0x14, 0x08, 0x00}, {0x02, 0x01, 0x51, 0x09, 0x06}, {0x32, 0x49, 0x79, 0x41, 0x3E},
    {0x7E, 0x11, 0x11, 0x11, 0x7E}, {0x7F, 0x49, 0x49, 0x49, 0x36}, {0x3E, 0x41, 0x41, 0x41, 0x22},
    {0x7F, 0x41, 0x41, 0x22, 0x1C}, {0x7F, 0x49, 0x49, 0x49, 0x41}, {0x7F, 0x09, 0x09, 0x01, 0x01},
    {0x3E, 0x41, 0x41, 0x51, 0x32}, {0x7F, 0x08, 0x08, 0x08, 0x7F}, {0x00, 0x41, 0x7F, 0x41, 0x00},
    {0x20, 0x40, 0x41, 0x3F, 0x01}, {0x7F, 0x08, 0x14, 0x22, 0x41}, {0x7F, 0x40, 0x40, 0x40, 0x40},
    {0x7F, 0x02, 0x04, 0x02, 0x7F}, {0x7F, 0x04, 0x08, 0x10, 0x7F}, {0x3E, 0x41, 0x41, 0x41, 0x3E},
    {0x7F, 0x09, 0x09, 0x09, 0x06}, {0x3E, 0x41, 0x51, 0x21, 0x5E}, {0x7F, 0x09, 0x19, 0x29, 0x46},
    {0x46, 0x49, 0x49, 0x49, 0x31}, {0x01, 0x01, 0x7F, 0x01, 0x01}, {0x3F, 0x40, 0x40, 0x40, 0x3F},
    {0x1F, 0x20, 0x40, 0x20, 0x1F}, {0x7F, 0x20, 0x18, 0x20, 0x7F}, {0x63, 0x14, 0x08, 0x14, 0x63},
    {0x03, 0x04, 0x78, 0x04, 0x03}, {0x61, 0x51, 0x49, 0x45, 0x43}, {0x00, 0x00, 0x7F, 0x41, 0x41},
    {0x02, 0x04, 0x08, 0x10, 0x20}, {0x41, 0x41, 0x7F, 0x00, 0x00}, {0x04, 0x02, 0x01, 0x02, 0x04},
    {0x40, 0x40, 0x40, 0x40, 0x40}, {0x00, 0x01, 0x02, 0x04, 0x00}, {0x20, 0x54, 0x54, 0x54, 0x78},
    {0x7F, 0x48, 0x44, 0x44, 0x38}, {0x38, 0x44, 0x44, 0x44, 0x20}, {0x38, 0x44, 0x44, 0x48, 0x7F},
    {0x38, 0x54, 0x54, 0x54, 0x18}, {0x08, 0x7E, 0x09, 0x01, 0x02}, {0x08, 0x14, 0x54, 0x54, 0x3C},
    {0x7F, 0x08, 0x04, 0x04, 0x78}, {0x00, 0x44, 0x7D, 0x40, 0x00}, {0x20, 0x40, 0x44, 0x3D, 0x00},
    {0x00, 0x7F, 0x10, 0x28, 0x44}, {0x00, 0x41, 0x7F, 0x40, 0x00}, {0x7C, 0x04, 0x18, 0x04, 0x78},
    {0x7C, 0x08, 0x04, 0x04, 0x78}, {0x38, 0x44, 0x44, 0x44, 0x38}, {0x7C, 0x14, 0x14, 0x14, 0x08},
    {0x08, 0x14, 0x14, 0x18, 0x7C}, {0x7C, 0x08, 0x04, 0x04, 0x08}, {0x48, 0x54, 0x54, 0x54, 0x20},
    {0x04, 0x3F, 0x44, 0x40, 0x20}, {0x3C, 0x40, 0x40, 0x20, 0x7C}, {0x1C, 0x20, 0x40, 0x20, 0x1C},
    {0x3C, 0x40, 0x30, 0x40, 0x3C}, {0x44, 0x28, 0x10, 0x28, 0x44}, {0x0C, 0x50, 0x50, 0x50, 0x3C},
    {0x44, 0x64, 0x54, 0x4C, 0x44}, {0x00, 0x08, 0x36, 0x41, 0x00}, {0x00, 0x00, 0x7F, 0x00, 0x00},
    {0x00, 0x41, 0x36, 0x08, 0x00}, {0x08, 0x08, 0x2A, 0x1C, 0x08},
};

struct Canvas {
  int w, h;
  std::vector<uint8_t> px;
  Canvas(int w_, int h_, uint8_t bg = 250) : w(w_), h(h_), px(static_cast<size_t>(w_) * h_ * 3, bg) {}
  void set(int x, int y, uint8_t r, uint8_t g, uint8_t b) {
    if (x < 0 || x >= w || y < 0 || y >= h) return;
    size_t i = (static_cast<size_t>(y) * w + x) * 3;
    px[i] = r;
    px[i + 1] = g;
    px[i + 2] = b;
  }
  void rect(int x0, int y0, int x1, int y1, uint8_t r, uint8_t g, uint8_t b) {
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) set(x, y, r, g, b);
  }
  void hline(int x0, int x1, int y, uint8_t v = 40) {
    for (int x = x0; x <= x1; ++x) set(x, y, v, v, v);
  }
  void vline(int x, int y0, int y1, uint8_t v = 40) {
    for (int y = y0; y <= y1; ++y) set(x, y, v, v, v);
  }
  void line(int x0, int y0, int x1, int y1, uint8_t r, uint8_t g, uint8_t b) {
    int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1, err = dx + dy;
    while (true) {
      set(x0, y0, r, g, b);
      if (x0 == x1 && y0 == y1) break;
      int e2 = 2 * err;
      if (e2 >= dy) {
        err += dy;
        x0 += sx;
      }
      if (e2 <= dx) {
        err += dx;
        y0 += sy;
      }
    }
  }
  void text(int x, int y, const std::string& s, uint8_t v = 30) {
    for (char ch : s) {
      if (ch < 32 || ch > 126) ch = '?';
      const uint8_t* g = kFont[ch - 32];
      for (int cx = 0; cx < 5; ++cx)
        for (int cy = 0; cy < 7; ++cy)
          if (g[cx] & (1 << cy)) set(x + cx, y + cy, v, v, v);
      x += 6;
    }
  }
};

std::string fmt(double v) {
  char b[32];
  if (std::fabs(v) >= 1000 || (std::fabs(v) < 0.01 && v != 0))
    std::snprintf(b, sizeof(b), "%.2e", v);
  else
    std::snprintf(b, sizeof(b), "%.3g", v);
  return b;
}

const uint8_t kColors[6][3] = {{200, 60, 50}, {50, 90, 190}, {40, 150, 70},
                               {190, 140, 30}, {140, 60, 170}, {60, 160, 170}};

}  // namespace

void bar_chart_png(const std::string& path, const std::string& title,
                   const std::vector<std::string>& labels, const std::vector<double>& values) {
  const int W = std::max(360, 80 + 90 * static_cast<int>(values.size())), H = 360;
  const int l = 60, r = 20, top = 40, bot = 60;
  Canvas c(W, H);
  c.text(l, 12, title);
  double vmax = 0;
  for (double v : values) vmax = std::max(vmax, v);
  if (vmax <= 0) vmax = 1;
  c.vline(l, top, H - bot);
  c.hline(l, W - r, H - bot);
  for (int tick = 0; tick <= 4; ++tick) {
    double tv = vmax * tick / 4;
    int y = H - bot - static_cast<int>((H - bot - top) * tick / 4.0);
    c.hline(l - 3, l, y, 80);
    c.text(4, y - 3, fmt(tv));
  }
  int n = static_cast<int>(values.size());
  int span = (W - l - r) / std::max(1, n);
  for (int i = 0; i < n; ++i) {
    int bw = std::max(8, span * 3 / 5);
    int x0 = l + i * span + (span - bw) / 2;
    int bh = static_cast<int>((H - bot - top) * values[static_cast<size_t>(i)] / vmax);
    const uint8_t* col = kColors[i % 6];
    c.rect(x0, H - bot - bh, x0 + bw, H - bot - 1, col[0], col[1], col[2]);
    c.text(x0, H - bot - bh - 10, fmt(values[static_cast<size_t>(i)]));
    std::string lab = labels[static_cast<size_t>(i)];
    if (static_cast<int>(lab.size()) * 6 > span) lab = lab.substr(0, static_cast<size_t>(span / 6));
    c.text(l + i * span + 2, H - bot + 8 + (i % 2) * 10, lab);
  }
  write_png(path, W, H, c.px);
}

void line_chart_png(const std::string& path, const std::string& title, const std::vector<Series>& series) {
  const int W = 720, H = 400, l = 64, r = 16, top = 36, bot = 40;
  Canvas c(W, H);
  c.text(l, 12, title);
  double lo = 0, hi = 1;
  bool first = true;
  size_t maxn = 1;
  for (const auto& s : series) {
    maxn = std::max(maxn, s.y.size());
    for (double v : s.y) {
      if (!std::isfinite(v)) continue;
      if (first) {
        lo = hi = v;
        first = false;
      }
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  if (hi - lo < 1e-12) hi = lo + 1;
  c.vline(l, top, H - bot);
  c.hline(l, W - r, H - bot);
  for (int tick = 0; tick <= 4; ++tick) {
    double tv = lo + (hi - lo) * tick / 4;
    int y = H - bot - static_cast<int>((H - bot - top) * tick / 4.0);
    c.hline(l - 3, l, y, 80);
    c.text(4, y - 3, fmt(tv));
  }
  for (size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    const uint8_t* col = kColors[si % 6];
    int px = -1, py = -1;
    for (size_t i = 0; i < s.y.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      int x = l + static_cast<int>((W - l - r) * static_cast<double>(i) / std::max<size_t>(1, maxn - 1));
      int y = H - bot - static_cast<int>((H - bot - top) * (s.y[i] - lo) / (hi - lo));
      if (px >= 0) c.line(px, py, x, y, col[0], col[1], col[2]);
      px = x;
      py = y;
    }
    int ly = top + static_cast<int>(si) * 12;
    c.rect(W - r - 96, ly, W - r - 86, ly + 6, col[0], col[1], col[2]);
    c.text(W - r - 82, ly, s.name);
  }
  write_png(path, W, H, c.px);
}

}  // namespace arrowvid
