#pragma once
// Binary tensor containers.
//
// .avt   — single tensor + fps: magic "AVTC", version, dtype, dims, payload.
//          dtype u8 packs [-1,1] video as bytes (v = b/127.5 - 1); f64/f32
//          store raw.  Every file ends with a CRC32 of everything before it;
//          loads verify and fail loudly on mismatch.
// .avtl  — ordered list of named f64 tensors (module states, optimizer
//          slots), same integrity treatment.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "arrowvid/tensor.hpp"
#include "arrowvid/video.hpp"

namespace arrowvid {

enum class Dtype : uint8_t { f64 = 0, f32 = 1, u8 = 2 };

void save_clip(const std::string& path, const VideoClip& clip, Dtype dt = Dtype::u8);
VideoClip load_clip(const std::string& path);

void save_tensor(const std::string& path, const Tensor& t, Dtype dt = Dtype::f64);
Tensor load_tensor(const std::string& path);

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;
void save_named_tensors(const std::string& path, const NamedTensors& items);
NamedTensors load_named_tensors(const std::string& path);

}  // namespace arrowvid
