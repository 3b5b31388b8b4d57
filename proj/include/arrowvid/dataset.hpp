#pragma once
// Manifest-driven clip streams plus the two frame-geometry pipelines the
// experiments use: 85x64 resize with a central 64x64 crop for unconditional
// runs, straight 96x96 resize (aspect ratio deliberately not preserved) for
// categorical ones.  Manifests are plain text, one `path<TAB>class` line per
// clip, with relative paths resolved against the manifest's directory.

#include <cstdint>
#include <string>
#include <vector>

#include "arrowvid/tensor.hpp"
#include "arrowvid/video.hpp"

namespace arrowvid {

struct ManifestEntry {
  std::string path;
  int class_index = 0;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::string root;  // directory clip paths resolve against
  int num_classes() const;
  std::string resolve(size_t i) const;
};

DatasetManifest load_manifest(const std::string& path);
void save_manifest(const std::string& path, const DatasetManifest& m);

// Non-empty, class indices exactly {0..K-1}, no duplicate paths.
void validate_manifest(const DatasetManifest& m);

// Half-pixel-center bilinear resample of one {C,H,W} frame.
Tensor resize_frame_bilinear(const Tensor& chw, int64_t out_h, int64_t out_w);

// {T,3,*,*} -> {T,3,64,64}: per-frame resize to 85x64, central crop (columns
// 10..73), values clamped to [-1,1].  Already-conformant input passes through
// untouched, so running the pipeline twice equals running it once.  Frames
// with non-finite samples are rejected by index.
VideoClip preprocess_unconditional(const VideoClip& raw);

// {T,3,*,*} -> {T,3,96,96}: per-frame resize, no crop, same passthrough and
// finiteness rules.
VideoClip preprocess_categorical(const VideoClip& raw);

struct BatchCfg {
  int64_t batch_size = 4;
  int64_t clip_len = 16;
  uint64_t seed = 0;
};

// Epoch-scoped batch stream: clip order reshuffles per epoch from
// (seed, epoch), each scheduled slot draws its temporal window start
// uniformly over [0, clip_frames - clip_len] from (seed, epoch, slot).
// Everything is derived, never stored, so seek(epoch, batch) after a restart
// reproduces an uninterrupted run bit for bit.  Clips shorter than clip_len
// are dropped at construction with a logged warning.
class BatchIterator {
 public:
  struct Batch {
    Tensor video;             // {N,C,T,H,W}
    std::vector<int> labels;  // one class per row
  };

  BatchIterator(const DatasetManifest& m, BatchCfg cfg);

  int64_t usable_clips() const { return static_cast<int64_t>(clips_.size()); }
  int64_t batches_per_epoch() const;
  const std::vector<std::string>& skipped() const { return skipped_; }

  void begin_epoch(int64_t epoch);
  bool next(Batch& out);  // false once the epoch is exhausted

  int64_t epoch() const { return epoch_; }
  int64_t batch_index() const { return next_batch_; }  // next batch to yield
  void seek(int64_t epoch, int64_t batch_index);

 private:
  BatchCfg cfg_;
  std::vector<VideoClip> clips_;
  std::vector<int> labels_;
  std::vector<std::string> skipped_;
  std::vector<int> order_;
  int64_t epoch_ = 0;
  int64_t next_batch_ = 0;
};

}  // namespace arrowvid
