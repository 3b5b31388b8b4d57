#include "arrowvid/image_io.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <unordered_map>

namespace arrowvid {

namespace {

void be32(std::vector<uint8_t>& v, uint32_t x) {
  v.push_back(static_cast<uint8_t>(x >> 24));
  v.push_back(static_cast<uint8_t>(x >> 16));
  v.push_back(static_cast<uint8_t>(x >> 8));
  v.push_back(static_cast<uint8_t>(x));
}

void png_chunk(std::vector<uint8_t>& out, const char type[4], const std::vector<uint8_t>& data) {
  be32(out, static_cast<uint32_t>(data.size()));
  size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  uint32_t crc = static_cast<uint32_t>(crc32(0L, out.data() + start, static_cast<uInt>(4 + data.size())));
  be32(out, crc);
}

}  // namespace

void write_png(const std::string& path, int w, int h, const std::vector<uint8_t>& rgb) {
  if (rgb.size() != static_cast<size_t>(w) * static_cast<size_t>(h) * 3)
    throw std::runtime_error("write_png: buffer size does not match dimensions");
  std::vector<uint8_t> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  std::vector<uint8_t> ihdr;
  be32(ihdr, static_cast<uint32_t>(w));
  be32(ihdr, static_cast<uint32_t>(h));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(2);   // truecolor
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  png_chunk(out, "IHDR", ihdr);

  std::vector<uint8_t> raw;
  raw.reserve(static_cast<size_t>(h) * (1 + static_cast<size_t>(w) * 3));
  for (int y = 0; y < h; ++y) {
    raw.push_back(0);  // filter: none
    raw.insert(raw.end(), rgb.begin() + static_cast<size_t>(y) * w * 3,
               rgb.begin() + (static_cast<size_t>(y) + 1) * w * 3);
  }
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<uint8_t> comp(bound);
  if (compress2(comp.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw std::runtime_error("write_png: deflate failed");
  comp.resize(bound);
  png_chunk(out, "IDAT", comp);
  png_chunk(out, "IEND", {});

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path);
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("write failed: " + path);
}

static uint8_t to_byte(double v) {
  double b = std::round((v + 1.0) * 127.5);
  return static_cast<uint8_t>(std::min(255.0, std::max(0.0, b)));
}

std::vector<uint8_t> frame_rgb8(const VideoClip& clip, int64_t t) {
  const int64_t C = clip.channels(), H = clip.height(), W = clip.width();
  std::vector<uint8_t> rgb(static_cast<size_t>(H * W * 3));
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x)
      for (int64_t c = 0; c < 3; ++c) {
        int64_t src_c = (C == 1) ? 0 : c;
        rgb[static_cast<size_t>((y * W + x) * 3 + c)] = to_byte(clip.data.at({t, src_c, y, x}));
      }
  return rgb;
}

// ---- GIF89a ----

namespace {

// 6x6x6 color cube + 40 grays.
void build_palette(std::vector<uint8_t>& pal) {
  pal.clear();
  for (int r = 0; r < 6; ++r)
    for (int g = 0; g < 6; ++g)
      for (int b = 0; b < 6; ++b) {
        pal.push_back(static_cast<uint8_t>(r * 51));
        pal.push_back(static_cast<uint8_t>(g * 51));
        pal.push_back(static_cast<uint8_t>(b * 51));
      }
  for (int i = 0; i < 40; ++i) {
    uint8_t v = static_cast<uint8_t>(i * 255 / 39);
    pal.push_back(v);
    pal.push_back(v);
    pal.push_back(v);
  }
}

uint8_t palette_index(uint8_t r, uint8_t g, uint8_t b) {
  if (r == g && g == b) return static_cast<uint8_t>(216 + (r * 39 + 127) / 255);
  auto q = [](uint8_t v) { return (v + 25) / 51 > 5 ? 5 : (v + 25) / 51; };
  return static_cast<uint8_t>(36 * q(r) + 6 * q(g) + q(b));
}

struct BitPacker {
  std::vector<uint8_t> bytes;
  uint32_t acc = 0;
  int nbits = 0;
  void put(uint16_t code, int width) {
    acc |= static_cast<uint32_t>(code) << nbits;
    nbits += width;
    while (nbits >= 8) {
      bytes.push_back(static_cast<uint8_t>(acc & 0xff));
      acc >>= 8;
      nbits -= 8;
    }
  }
  void flush() {
    if (nbits > 0) bytes.push_back(static_cast<uint8_t>(acc & 0xff));
    acc = 0;
    nbits = 0;
  }
};

// Standard GIF LZW with 8-bit min code size.
std::vector<uint8_t> lzw_encode(const std::vector<uint8_t>& idx) {
  const uint16_t kClear = 256, kEoi = 257;
  BitPacker bp;
  std::unordered_map<uint32_t, uint16_t> dict;
  int width = 9;
  uint16_t next = 258;
  bp.put(kClear, width);
  uint32_t cur = idx.empty() ? 0 : idx[0];
  for (size_t i = 1; i < idx.size(); ++i) {
    uint32_t key = (cur << 8) | idx[i];
    auto it = dict.find(key);
    if (it != dict.end()) {
      cur = it->second;
      continue;
    }
    bp.put(static_cast<uint16_t>(cur), width);
    if (next < 4096) {
      dict[key] = next;
      if (next == (1u << width) && width < 12) ++width;
      ++next;
    } else {
      bp.put(kClear, width);
      dict.clear();
      width = 9;
      next = 258;
    }
    cur = idx[i];
  }
  if (!idx.empty()) bp.put(static_cast<uint16_t>(cur), width);
  bp.put(kEoi, width);
  bp.flush();
  return bp.bytes;
}

void le16(std::vector<uint8_t>& v, uint16_t x) {
  v.push_back(static_cast<uint8_t>(x & 0xff));
  v.push_back(static_cast<uint8_t>(x >> 8));
}

}  // namespace

void write_gif(const std::string& path, const VideoClip& clip) {
  const int64_t T = clip.frames(), H = clip.height(), W = clip.width();
  std::vector<uint8_t> out;
  const char* hdr = "GIF89a";
  out.insert(out.end(), hdr, hdr + 6);
  le16(out, static_cast<uint16_t>(W));
  le16(out, static_cast<uint16_t>(H));
  out.push_back(0xF7);  // global table, 8 bits, 256 entries
  out.push_back(0);
  out.push_back(0);
  std::vector<uint8_t> pal;
  build_palette(pal);
  out.insert(out.end(), pal.begin(), pal.end());
  // loop forever
  const uint8_t loop_ext[] = {0x21, 0xFF, 0x0B, 'N', 'E', 'T', 'S', 'C', 'A', 'P', 'E',
                              '2',  '.',  '0',  0x03, 0x01, 0x00, 0x00, 0x00};
  out.insert(out.end(), loop_ext, loop_ext + sizeof(loop_ext));

  uint16_t delay = static_cast<uint16_t>(std::max(2.0, std::round(100.0 / std::max(1.0, clip.fps))));
  for (int64_t t = 0; t < T; ++t) {
    const uint8_t gce[] = {0x21, 0xF9, 0x04, 0x00};
    out.insert(out.end(), gce, gce + 4);
    le16(out, delay);
    out.push_back(0);
    out.push_back(0);
    out.push_back(0x2C);  // image descriptor
    le16(out, 0);
    le16(out, 0);
    le16(out, static_cast<uint16_t>(W));
    le16(out, static_cast<uint16_t>(H));
    out.push_back(0);

    std::vector<uint8_t> rgb = frame_rgb8(clip, t);
    std::vector<uint8_t> idx(static_cast<size_t>(H * W));
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = palette_index(rgb[i * 3], rgb[i * 3 + 1], rgb[i * 3 + 2]);
    out.push_back(8);  // LZW min code size
    std::vector<uint8_t> code = lzw_encode(idx);
    for (size_t off = 0; off < code.size(); off += 255) {
      size_t n = std::min<size_t>(255, code.size() - off);
      out.push_back(static_cast<uint8_t>(n));
      out.insert(out.end(), code.begin() + static_cast<long>(off), code.begin() + static_cast<long>(off + n));
    }
    out.push_back(0);
  }
  out.push_back(0x3B);

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path);
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("write failed: " + path);
}

void write_frame_grid_png(const std::string& path, const std::vector<VideoClip>& clips, int per_row) {
  if (clips.empty()) throw std::runtime_error("write_frame_grid_png: no clips");
  const int64_t H = clips[0].height(), W = clips[0].width();
  const int gap = 2;
  int64_t rows_total = 0;
  for (const auto& c : clips) rows_total += (c.frames() + per_row - 1) / per_row;
  int64_t gw = per_row * (W + gap) + gap;
  int64_t gh = rows_total * (H + gap) + gap;
  std::vector<uint8_t> canvas(static_cast<size_t>(gw * gh * 3), 24);
  int64_t row = 0;
  for (const auto& c : clips) {
    if (c.height() != H || c.width() != W) throw std::runtime_error("write_frame_grid_png: mixed sizes");
    for (int64_t t = 0; t < c.frames(); ++t) {
      int64_t r = row + t / per_row, col = t % per_row;
      std::vector<uint8_t> rgb = frame_rgb8(c, t);
      int64_t y0 = gap + r * (H + gap), x0 = gap + col * (W + gap);
      for (int64_t y = 0; y < H; ++y)
        std::memcpy(canvas.data() + ((y0 + y) * gw + x0) * 3, rgb.data() + y * W * 3,
                    static_cast<size_t>(W * 3));
    }
    row += (c.frames() + per_row - 1) / per_row;
  }
  write_png(path, static_cast<int>(gw), static_cast<int>(gh), canvas);
}

}  // namespace arrowvid
