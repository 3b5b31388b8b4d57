#pragma once
// Clip-level primitives: time reversal, frame rotation, order shuffling,
// latent sampling, and (T,C,H,W) <-> batched (N,C,T,H,W) packing.

#include <vector>

#include "arrowvid/rng.hpp"
#include "arrowvid/tensor.hpp"

namespace arrowvid {

// One clip: frames-first {T,C,H,W}, values in [-1,1], C=3 for rendered video.
struct VideoClip {
  Tensor data;
  double fps = 8.0;
  VideoClip() = default;
  explicit VideoClip(Tensor d, double f = 8.0);
  int64_t frames() const { return data.dim(0); }
  int64_t channels() const { return data.dim(1); }
  int64_t height() const { return data.dim(2); }
  int64_t width() const { return data.dim(3); }
};

// out[t] = in[T-1-t]; applying twice restores the input exactly.
VideoClip reverse_time(const VideoClip& v);

// k counter-clockwise quarter turns of every frame: out(i,j) = in(j, W-1-i).
// Odd k on non-square frames is rejected.
VideoClip rotate_frames(const VideoClip& v, int k);

// Frame permutation drawn uniformly from S_T minus {identity, reversal},
// applied to the whole clip.  T<2 has no permutations and T=2 has no
// admissible ones; both are errors.
struct ShuffledClip {
  VideoClip clip;
  std::vector<int> perm;  // out frame t came from in frame perm[t]
};
ShuffledClip shuffle_frames(const VideoClip& v, RngStream& rng);

bool is_identity_perm(const std::vector<int>& p);
bool is_reversal_perm(const std::vector<int>& p);

// Standard normal draws of the given shape.
Tensor sample_latent(Shape shape, RngStream& rng);

// {T,C,H,W} clips -> {N,C,T,H,W} batch and back.
Tensor clips_to_batch(const std::vector<VideoClip>& clips);
std::vector<VideoClip> batch_to_clips(const Tensor& batch, double fps = 8.0);

}  // namespace arrowvid
