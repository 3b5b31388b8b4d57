#pragma once
// PNG (RGB8, zlib-deflated) and animated GIF89a writers, plus the frame-grid
// montage used for sample sheets: 8 frames per row, one or more clips
// stacked vertically.

#include <cstdint>
#include <string>
#include <vector>

#include "arrowvid/video.hpp"

namespace arrowvid {

// rgb is row-major, 3 bytes per pixel, W*H*3 total.
void write_png(const std::string& path, int w, int h, const std::vector<uint8_t>& rgb);

// [-1,1] -> [0,255] with rounding and clamping.
std::vector<uint8_t> frame_rgb8(const VideoClip& clip, int64_t t);

// Animated GIF of one clip; delay derives from clip.fps; loops forever.
void write_gif(const std::string& path, const VideoClip& clip);

void write_frame_grid_png(const std::string& path, const std::vector<VideoClip>& clips, int per_row = 8);

}  // namespace arrowvid
