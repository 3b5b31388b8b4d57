#include "arrowvid/video.hpp"

#include <algorithm>
#include <stdexcept>

namespace arrowvid {

VideoClip::VideoClip(Tensor d, double f) : data(std::move(d)), fps(f) {
  if (data.ndim() != 4) throw std::runtime_error("clip: expected {T,C,H,W}, got " + shape_str(data.shape()));
}

VideoClip reverse_time(const VideoClip& v) {
  const int64_t T = v.frames(), F = v.data.numel() / v.frames();
  VideoClip out(Tensor(v.data.shape()), v.fps);
  const double* src = v.data.data();
  double* dst = out.data.data();
  for (int64_t t = 0; t < T; ++t) std::copy(src + t * F, src + (t + 1) * F, dst + (T - 1 - t) * F);
  return out;
}

static Tensor rot90_frames_once(const Tensor& d) {
  const int64_t T = d.dim(0), C = d.dim(1), H = d.dim(2), W = d.dim(3);
  Tensor out({T, C, W, H});
  const double* src = d.data();
  double* dst = out.data();
  for (int64_t tc = 0; tc < T * C; ++tc) {
    const double* in = src + tc * H * W;
    double* o = dst + tc * H * W;
    for (int64_t i = 0; i < W; ++i)
      for (int64_t j = 0; j < H; ++j) o[i * H + j] = in[j * W + (W - 1 - i)];
  }
  return out;
}

VideoClip rotate_frames(const VideoClip& v, int k) {
  k = ((k % 4) + 4) % 4;
  if (k % 2 == 1 && v.height() != v.width())
    throw std::runtime_error("rotate_frames: odd quarter turns need square frames, got " +
                             shape_str(v.data.shape()));
  Tensor d = v.data;
  for (int i = 0; i < k; ++i) d = rot90_frames_once(d);
  return VideoClip(std::move(d), v.fps);
}

bool is_identity_perm(const std::vector<int>& p) {
  for (size_t i = 0; i < p.size(); ++i)
    if (p[i] != static_cast<int>(i)) return false;
  return true;
}

bool is_reversal_perm(const std::vector<int>& p) {
  for (size_t i = 0; i < p.size(); ++i)
    if (p[i] != static_cast<int>(p.size() - 1 - i)) return false;
  return true;
}

ShuffledClip shuffle_frames(const VideoClip& v, RngStream& rng) {
  const int64_t T = v.frames();
  if (T < 2) throw std::runtime_error("shuffle_frames: need at least 2 frames, got " + std::to_string(T));
  if (T == 2)
    throw std::runtime_error("shuffle_frames: T=2 leaves only identity and reversal, no admissible order");
  std::vector<int> perm;
  do {
    perm = rng.permutation(static_cast<int>(T));
  } while (is_identity_perm(perm) || is_reversal_perm(perm));
  const int64_t F = v.data.numel() / T;
  VideoClip out(Tensor(v.data.shape()), v.fps);
  const double* src = v.data.data();
  double* dst = out.data.data();
  for (int64_t t = 0; t < T; ++t) {
    int64_t s = perm[static_cast<size_t>(t)];
    std::copy(src + s * F, src + (s + 1) * F, dst + t * F);
  }
  return {std::move(out), std::move(perm)};
}

Tensor sample_latent(Shape shape, RngStream& rng) {
  Tensor t(std::move(shape));
  rng.fill_normal(t);
  return t;
}

Tensor clips_to_batch(const std::vector<VideoClip>& clips) {
  if (clips.empty()) throw std::runtime_error("clips_to_batch: empty");
  const Shape& s = clips[0].data.shape();  // {T,C,H,W}
  const int64_t T = s[0], C = s[1], H = s[2], W = s[3], N = static_cast<int64_t>(clips.size());
  Tensor out({N, C, T, H, W});
  for (int64_t n = 0; n < N; ++n) {
    if (clips[static_cast<size_t>(n)].data.shape() != s)
      throw std::runtime_error("clips_to_batch: inconsistent clip shapes");
    const double* src = clips[static_cast<size_t>(n)].data.data();
    double* dst = out.data() + n * C * T * H * W;
    for (int64_t t = 0; t < T; ++t)
      for (int64_t c = 0; c < C; ++c)
        std::copy(src + (t * C + c) * H * W, src + (t * C + c + 1) * H * W, dst + (c * T + t) * H * W);
  }
  return out;
}

std::vector<VideoClip> batch_to_clips(const Tensor& batch, double fps) {
  if (batch.ndim() != 5) throw std::runtime_error("batch_to_clips: expected {N,C,T,H,W}");
  const int64_t N = batch.dim(0), C = batch.dim(1), T = batch.dim(2), H = batch.dim(3), W = batch.dim(4);
  std::vector<VideoClip> clips;
  clips.reserve(static_cast<size_t>(N));
  for (int64_t n = 0; n < N; ++n) {
    Tensor d({T, C, H, W});
    const double* src = batch.data() + n * C * T * H * W;
    for (int64_t t = 0; t < T; ++t)
      for (int64_t c = 0; c < C; ++c)
        std::copy(src + (c * T + t) * H * W, src + (c * T + t + 1) * H * W, d.data() + (t * C + c) * H * W);
    clips.emplace_back(std::move(d), fps);
  }
  return clips;
}

}  // namespace arrowvid
