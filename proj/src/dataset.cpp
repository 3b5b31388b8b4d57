#include "arrowvid/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "arrowvid/rng.hpp"
#include "arrowvid/tensor_file.hpp"

namespace arrowvid {

int DatasetManifest::num_classes() const {
  int mx = -1;
  for (const auto& e : entries) mx = std::max(mx, e.class_index);
  return mx + 1;
}

std::string DatasetManifest::resolve(size_t i) const {
  const std::string& p = entries[i].path;
  if (!p.empty() && p[0] == '/') return p;
  return root.empty() ? p : root + "/" + p;
}

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path);
  DatasetManifest m;
  m.root = std::filesystem::path(path).parent_path().string();
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    size_t tab = line.find('\t');
    if (tab == std::string::npos)
      throw std::runtime_error("manifest " + path + " line " + std::to_string(lineno) +
                               ": expected path<TAB>class");
    ManifestEntry e;
    e.path = line.substr(0, tab);
    try {
      e.class_index = std::stoi(line.substr(tab + 1));
    } catch (const std::exception&) {
      throw std::runtime_error("manifest " + path + " line " + std::to_string(lineno) +
                               ": bad class index");
    }
    m.entries.push_back(std::move(e));
  }
  return m;
}

void save_manifest(const std::string& path, const DatasetManifest& m) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write manifest " + path);
  for (const auto& e : m.entries) out << e.path << '\t' << e.class_index << '\n';
}

void validate_manifest(const DatasetManifest& m) {
  if (m.entries.empty()) throw std::runtime_error("manifest is empty");
  std::set<std::string> paths;
  std::set<int> classes;
  for (const auto& e : m.entries) {
    if (!paths.insert(e.path).second)
      throw std::runtime_error("manifest: duplicate path " + e.path);
    if (e.class_index < 0)
      throw std::runtime_error("manifest: negative class index on " + e.path);
    classes.insert(e.class_index);
  }
  int k = m.num_classes();
  for (int c = 0; c < k; ++c)
    if (!classes.count(c))
      throw std::runtime_error("manifest: class indices not contiguous (missing " +
                               std::to_string(c) + " of [0," + std::to_string(k) + "))");
}

Tensor resize_frame_bilinear(const Tensor& chw, int64_t out_h, int64_t out_w) {
  if (chw.ndim() != 3) throw std::runtime_error("resize_frame_bilinear: want {C,H,W}");
  int64_t C = chw.dim(0), H = chw.dim(1), W = chw.dim(2);
  Tensor out(Shape{C, out_h, out_w});
  double sy = static_cast<double>(H) / static_cast<double>(out_h);
  double sx = static_cast<double>(W) / static_cast<double>(out_w);
  for (int64_t oy = 0; oy < out_h; ++oy) {
    double fy = std::clamp((static_cast<double>(oy) + 0.5) * sy - 0.5, 0.0, static_cast<double>(H - 1));
    int64_t y0 = static_cast<int64_t>(std::floor(fy));
    int64_t y1 = std::min(y0 + 1, H - 1);
    double wy = fy - static_cast<double>(y0);
    for (int64_t ox = 0; ox < out_w; ++ox) {
      double fx = std::clamp((static_cast<double>(ox) + 0.5) * sx - 0.5, 0.0, static_cast<double>(W - 1));
      int64_t x0 = static_cast<int64_t>(std::floor(fx));
      int64_t x1 = std::min(x0 + 1, W - 1);
      double wx = fx - static_cast<double>(x0);
      for (int64_t c = 0; c < C; ++c) {
        double top = (1 - wx) * chw.at({c, y0, x0}) + wx * chw.at({c, y0, x1});
        double bot = (1 - wx) * chw.at({c, y1, x0}) + wx * chw.at({c, y1, x1});
        out.at({c, oy, ox}) = (1 - wy) * top + wy * bot;
      }
    }
  }
  return out;
}

namespace {

Tensor frame_of(const VideoClip& v, int64_t t) {
  int64_t C = v.channels(), H = v.height(), W = v.width();
  Tensor f(Shape{C, H, W});
  const double* src = v.data.data() + t * C * H * W;
  std::copy(src, src + C * H * W, f.data());
  return f;
}

void want_frame_finite(const Tensor& f, int64_t t) {
  if (!f.all_finite())
    throw std::runtime_error("frame " + std::to_string(t) + ": non-finite sample");
}

VideoClip run_pipeline(const VideoClip& raw, int64_t out_h, int64_t out_w, int64_t resize_h,
                       int64_t resize_w, int64_t crop_left, int64_t crop_top) {
  if (raw.data.ndim() != 4 || raw.channels() != 3)
    throw std::runtime_error("preprocess: want a {T,3,H,W} clip");
  int64_t T = raw.frames();
  if (raw.height() == out_h && raw.width() == out_w) {
    // already conformant; a second pass must be a no-op
    for (int64_t t = 0; t < T; ++t) want_frame_finite(frame_of(raw, t), t);
    VideoClip out = raw;
    for (int64_t i = 0; i < out.data.numel(); ++i)
      out.data.data()[i] = std::clamp(out.data.data()[i], -1.0, 1.0);
    return out;
  }
  Tensor data(Shape{T, 3, out_h, out_w});
  for (int64_t t = 0; t < T; ++t) {
    Tensor f = frame_of(raw, t);
    want_frame_finite(f, t);
    Tensor r = resize_frame_bilinear(f, resize_h, resize_w);
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t y = 0; y < out_h; ++y)
        for (int64_t x = 0; x < out_w; ++x)
          data.at({t, c, y, x}) =
              std::clamp(r.at({c, y + crop_top, x + crop_left}), -1.0, 1.0);
  }
  return VideoClip(std::move(data), raw.fps);
}

}  // namespace

VideoClip preprocess_unconditional(const VideoClip& raw) {
  // 85 wide, 64 tall, then the central 64 columns: left = (85-64)/2 = 10
  return run_pipeline(raw, 64, 64, 64, 85, 10, 0);
}

VideoClip preprocess_categorical(const VideoClip& raw) {
  return run_pipeline(raw, 96, 96, 96, 96, 0, 0);
}

BatchIterator::BatchIterator(const DatasetManifest& m, BatchCfg cfg) : cfg_(cfg) {
  validate_manifest(m);
  if (cfg_.batch_size <= 0) throw std::runtime_error("batch_iterator: batch size must be positive");
  if (cfg_.clip_len <= 0) throw std::runtime_error("batch_iterator: clip length must be positive");
  for (size_t i = 0; i < m.entries.size(); ++i) {
    VideoClip clip = load_clip(m.resolve(i));
    if (clip.frames() < cfg_.clip_len) {
      std::cerr << "warning: skipping " << m.entries[i].path << " (" << clip.frames()
                << " frames < clip length " << cfg_.clip_len << ")\n";
      skipped_.push_back(m.entries[i].path);
      continue;
    }
    clips_.push_back(std::move(clip));
    labels_.push_back(m.entries[i].class_index);
  }
  if (clips_.empty())
    throw std::runtime_error("batch_iterator: no clip in the manifest is long enough");
  begin_epoch(0);
}

int64_t BatchIterator::batches_per_epoch() const {
  int64_t n = usable_clips();
  return (n + cfg_.batch_size - 1) / cfg_.batch_size;
}

void BatchIterator::begin_epoch(int64_t epoch) {
  epoch_ = epoch;
  next_batch_ = 0;
  order_ = RngStream({STREAM_DATA_ORDER, cfg_.seed, static_cast<uint64_t>(epoch)})
               .permutation(static_cast<int>(clips_.size()));
}

bool BatchIterator::next(Batch& out) {
  if (next_batch_ >= batches_per_epoch()) return false;
  int64_t lo = next_batch_ * cfg_.batch_size;
  int64_t hi = std::min<int64_t>(usable_clips(), lo + cfg_.batch_size);
  std::vector<VideoClip> windows;
  out.labels.clear();
  for (int64_t slot = lo; slot < hi; ++slot) {
    int clip_id = order_[static_cast<size_t>(slot)];
    const VideoClip& clip = clips_[static_cast<size_t>(clip_id)];
    int64_t span = clip.frames() - cfg_.clip_len;
    int64_t start = RngStream({STREAM_DATA_WINDOW, cfg_.seed, static_cast<uint64_t>(epoch_),
                               static_cast<uint64_t>(slot)})
                        .uniform_int(span + 1);
    int64_t C = clip.channels(), H = clip.height(), W = clip.width();
    Tensor wdata(Shape{cfg_.clip_len, C, H, W});
    const double* src = clip.data.data() + start * C * H * W;
    std::copy(src, src + cfg_.clip_len * C * H * W, wdata.data());
    windows.emplace_back(std::move(wdata), clip.fps);
    out.labels.push_back(labels_[static_cast<size_t>(clip_id)]);
  }
  out.video = clips_to_batch(windows);
  ++next_batch_;
  return true;
}

void BatchIterator::seek(int64_t epoch, int64_t batch_index) {
  begin_epoch(epoch);
  next_batch_ = std::min(batch_index, batches_per_epoch());
}

}  // namespace arrowvid
