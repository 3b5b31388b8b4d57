#include "arrowvid/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "arrowvid/rng.hpp"
#include "arrowvid/tensor_file.hpp"

namespace arrowvid {

const char* scene_kind_name(SceneKind k) {
  switch (k) {
    case SceneKind::falling_ball: return "falling_ball";
    case SceneKind::growing_shape: return "growing_shape";
    case SceneKind::fading_trail: return "fading_trail";
  }
  throw std::runtime_error("scene_kind_name: bad enum");
}

SceneKind scene_kind_from_name(const std::string& name) {
  if (name == "falling_ball") return SceneKind::falling_ball;
  if (name == "growing_shape") return SceneKind::growing_shape;
  if (name == "fading_trail") return SceneKind::fading_trail;
  throw std::runtime_error("unknown scene kind '" + name +
                           "' (expected falling_ball, growing_shape, or fading_trail)");
}

namespace {

// Soft-edged disc: per-pixel coverage ramps over one pixel at the rim, so
// sub-pixel centers and radii move the rendered mass smoothly.
void stamp_disc(Tensor& data, int64_t t, double cy, double cx, double radius, const double rgb[3]) {
  int64_t h = data.dim(2), w = data.dim(3);
  int64_t r0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(cy - radius - 1)));
  int64_t r1 = std::min<int64_t>(h - 1, static_cast<int64_t>(std::ceil(cy + radius + 1)));
  int64_t c0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(cx - radius - 1)));
  int64_t c1 = std::min<int64_t>(w - 1, static_cast<int64_t>(std::ceil(cx + radius + 1)));
  for (int64_t r = r0; r <= r1; ++r)
    for (int64_t c = c0; c <= c1; ++c) {
      double d = std::hypot(static_cast<double>(r) - cy, static_cast<double>(c) - cx);
      double cov = std::clamp(radius + 0.5 - d, 0.0, 1.0);
      if (cov <= 0) continue;
      for (int64_t ch = 0; ch < 3; ++ch) {
        double v = -1.0 + cov * (rgb[ch] + 1.0);
        double& px = data.at({t, ch, r, c});
        px = std::max(px, v);
      }
    }
}

void pick_color(RngStream& rng, double rgb[3]) {
  for (int i = 0; i < 3; ++i) rgb[i] = 0.3 + 0.7 * rng.uniform();
}

void want_min_res(const SyntheticSceneSpec& s, int64_t need) {
  if (std::min(s.height, s.width) < need)
    throw std::runtime_error("resolution " + std::to_string(s.height) + "x" + std::to_string(s.width) +
                             " too small to render a " + scene_kind_name(s.kind) + " scene (needs >= " +
                             std::to_string(need) + ")");
}

VideoClip render_falling_ball(const SyntheticSceneSpec& s, RngStream& rng) {
  double radius = std::max(2.0, std::min(s.height, s.width) / 12.0);
  want_min_res(s, static_cast<int64_t>(4 * radius));
  // total drop from rest: g * (1 + 2 + ... + (T-1))
  double drop = s.gravity * static_cast<double>((s.frames - 1) * s.frames) / 2.0;
  double y_lo = radius + 1.0, y_hi = static_cast<double>(s.height - 1) - radius - drop;
  if (y_hi < y_lo)
    throw std::runtime_error("resolution too small for the falling_ball trajectory: gravity " +
                             std::to_string(s.gravity) + " over " + std::to_string(s.frames) +
                             " frames needs height >= " +
                             std::to_string(static_cast<int64_t>(std::ceil(drop + 2 * radius + 3))));
  double y0 = y_lo + (y_hi - y_lo) * rng.uniform();
  double x0 = radius + 1.0 + (static_cast<double>(s.width - 1) - 2.0 * (radius + 1.0)) * rng.uniform();
  double rgb[3];
  pick_color(rng, rgb);
  Tensor data(Shape{s.frames, 3, s.height, s.width}, -1.0);
  double y = y0, v = 0.0;
  for (int64_t t = 0; t < s.frames; ++t) {
    stamp_disc(data, t, y, x0, radius, rgb);
    v += s.gravity;
    y += v;
  }
  return VideoClip(std::move(data));
}

VideoClip render_growing_shape(const SyntheticSceneSpec& s, RngStream& rng) {
  double r0 = std::max(2.0, std::min(s.height, s.width) / 16.0);
  double r_end = r0 + s.growth_rate * static_cast<double>(s.frames - 1);
  if (r_end > std::min(s.height, s.width) / 2.0 - 2.0)
    throw std::runtime_error(
        "resolution too small for growing_shape: final radius " + std::to_string(r_end) +
        " will not fit " + std::to_string(s.height) + "x" + std::to_string(s.width));
  double jitter = std::min(s.height, s.width) * 0.05;
  double cy = s.height / 2.0 + jitter * (2.0 * rng.uniform() - 1.0);
  double cx = s.width / 2.0 + jitter * (2.0 * rng.uniform() - 1.0);
  double rgb[3];
  pick_color(rng, rgb);
  Tensor data(Shape{s.frames, 3, s.height, s.width}, -1.0);
  for (int64_t t = 0; t < s.frames; ++t)
    stamp_disc(data, t, cy, cx, r0 + s.growth_rate * static_cast<double>(t), rgb);
  return VideoClip(std::move(data));
}

VideoClip render_fading_trail(const SyntheticSceneSpec& s, RngStream& rng) {
  int64_t side = std::max<int64_t>(3, std::min(s.height, s.width) / 10);
  want_min_res(s, 3 * side);
  // straight-line motion whose whole path stays inside the frame
  double ang = 2.0 * 3.14159265358979323846 * rng.uniform();
  double speed = 1.0 + rng.uniform();
  double vy = speed * std::sin(ang), vx = speed * std::cos(ang);
  auto span = [&](double vel, int64_t extent) {
    double travel = vel * static_cast<double>(s.frames - 1);
    double lo = 1.0 + std::max(0.0, -travel);
    double hi = static_cast<double>(extent - side - 1) - std::max(0.0, travel);
    return std::pair<double, double>(lo, hi);
  };
  auto [ylo, yhi] = span(vy, s.height);
  auto [xlo, xhi] = span(vx, s.width);
  if (yhi < ylo || xhi < xlo) {
    // shrink the stride until the path fits; give up only if even a crawl won't
    double shrink = std::min((yhi >= ylo) ? 1.0 : (static_cast<double>(s.height - side - 2) /
                                                   (std::fabs(vy) * (s.frames - 1))),
                             (xhi >= xlo) ? 1.0 : (static_cast<double>(s.width - side - 2) /
                                                   (std::fabs(vx) * (s.frames - 1))));
    if (!(shrink > 0))
      throw std::runtime_error("resolution too small for a fading_trail path");
    vy *= shrink * 0.95;
    vx *= shrink * 0.95;
    std::tie(ylo, yhi) = span(vy, s.height);
    std::tie(xlo, xhi) = span(vx, s.width);
    if (yhi < ylo || xhi < xlo)
      throw std::runtime_error("resolution too small for a fading_trail path");
  }
  double y = ylo + (yhi - ylo) * rng.uniform();
  double x = xlo + (xhi - xlo) * rng.uniform();
  double rgb[3];
  pick_color(rng, rgb);
  Tensor data(Shape{s.frames, 3, s.height, s.width}, -1.0);
  Tensor trail(Shape{s.height, s.width});
  for (int64_t t = 0; t < s.frames; ++t) {
    for (int64_t i = 0; i < trail.numel(); ++i) trail.data()[i] *= s.trail_decay;
    int64_t ry = static_cast<int64_t>(std::lround(y)), rx = static_cast<int64_t>(std::lround(x));
    for (int64_t r = ry; r < ry + side; ++r)
      for (int64_t c = rx; c < rx + side; ++c)
        if (r >= 0 && r < s.height && c >= 0 && c < s.width) trail.at({r, c}) = 1.0;
    for (int64_t ch = 0; ch < 3; ++ch) {
      double tint = 0.5 + 0.5 * ((rgb[ch] + 1.0) / 2.0);
      for (int64_t r = 0; r < s.height; ++r)
        for (int64_t c = 0; c < s.width; ++c)
          data.at({t, ch, r, c}) = -1.0 + 2.0 * trail.at({r, c}) * tint;
    }
    y += vy;
    x += vx;
  }
  return VideoClip(std::move(data));
}

double luminance(const VideoClip& v, int64_t t, int64_t r, int64_t c) {
  double s = 0;
  for (int64_t ch = 0; ch < 3; ++ch) s += (v.data.at({t, ch, r, c}) + 1.0) / 2.0;
  return s / 3.0;
}

}  // namespace

double aot_probe_statistic(const VideoClip& v, SceneKind kind) {
  int64_t T = v.frames(), H = v.height(), W = v.width();
  if (T < 3) throw std::runtime_error("aot_probe: need at least 3 frames");
  switch (kind) {
    case SceneKind::falling_ball: {
      // mean first difference of the luminance-weighted centroid row.  The
      // curvature (second difference) is even under time reversal — a
      // reversed drop still accelerates downward — so it carries no
      // direction.  What breaks the symmetry here is the construction:
      // balls start at rest and fall, so forward clips always move down.
      std::vector<double> cy(static_cast<size_t>(T));
      for (int64_t t = 0; t < T; ++t) {
        double mass = 0, moment = 0;
        for (int64_t r = 0; r < H; ++r)
          for (int64_t c = 0; c < W; ++c) {
            double l = luminance(v, t, r, c);
            mass += l;
            moment += l * static_cast<double>(r);
          }
        if (mass <= 0) throw std::runtime_error("ambiguous clip: no foreground to track");
        cy[static_cast<size_t>(t)] = moment / mass;
      }
      double acc = 0;
      for (int64_t t = 0; t + 1 < T; ++t) acc += cy[static_cast<size_t>(t + 1)] - cy[static_cast<size_t>(t)];
      return acc / static_cast<double>(T - 1);
    }
    case SceneKind::growing_shape: {
      // mean first difference of the foreground area (luminance above midpoint)
      std::vector<double> area(static_cast<size_t>(T));
      for (int64_t t = 0; t < T; ++t) {
        double a = 0;
        for (int64_t r = 0; r < H; ++r)
          for (int64_t c = 0; c < W; ++c)
            if (luminance(v, t, r, c) > 0.5) a += 1.0;
        area[static_cast<size_t>(t)] = a;
      }
      double acc = 0;
      for (int64_t t = 0; t + 1 < T; ++t) acc += area[static_cast<size_t>(t + 1)] - area[static_cast<size_t>(t)];
      return acc / static_cast<double>(T - 1);
    }
    case SceneKind::fading_trail: {
      // mean first difference of total luminance mass
      double acc = 0, prev = 0;
      for (int64_t t = 0; t < T; ++t) {
        double mass = 0;
        for (int64_t r = 0; r < H; ++r)
          for (int64_t c = 0; c < W; ++c) mass += luminance(v, t, r, c);
        if (t > 0) acc += mass - prev;
        prev = mass;
      }
      return acc / static_cast<double>(T - 1);
    }
  }
  throw std::runtime_error("aot_probe: bad scene kind");
}

AoTLabel aot_probe(const VideoClip& v, SceneKind kind) {
  double s = aot_probe_statistic(v, kind);
  if (s == 0.0) throw std::runtime_error("ambiguous clip: direction statistic is exactly zero");
  return s > 0.0 ? AoTLabel::forward : AoTLabel::backward;
}

VideoClip generate_synthetic_clip(const SyntheticSceneSpec& spec, uint64_t seed) {
  if (spec.frames < 3) throw std::runtime_error("generate_synthetic_clip: need at least 3 frames");
  for (uint64_t attempt = 0; attempt < 8; ++attempt) {
    RngStream rng({STREAM_SYNTH, seed, attempt});
    VideoClip clip;
    switch (spec.kind) {
      case SceneKind::falling_ball: clip = render_falling_ball(spec, rng); break;
      case SceneKind::growing_shape: clip = render_growing_shape(spec, rng); break;
      case SceneKind::fading_trail: clip = render_fading_trail(spec, rng); break;
    }
    try {
      if (aot_probe(clip, spec.kind) == AoTLabel::forward) return clip;
    } catch (const std::runtime_error&) {
      // ambiguous draw; retry with the next sub-seed
    }
  }
  throw std::runtime_error("generate_synthetic_clip: no orientable clip after 8 attempts");
}

SyntheticSceneSpec scaled_scene_spec(SceneKind kind, int64_t frames, int64_t height, int64_t width,
                                     int class_id) {
  SyntheticSceneSpec spec;
  spec.kind = kind;
  spec.frames = frames;
  spec.height = height;
  spec.width = width;
  spec.class_id = class_id;
  double m = static_cast<double>(std::min(height, width));
  if (frames > 1) {
    spec.gravity = 0.9 * static_cast<double>(height) / static_cast<double>(frames * (frames - 1));
    double r0 = std::max(2.0, m / 16.0);
    spec.growth_rate = std::max(0.05, (m / 2.0 - 2.0 - r0) * 0.8 / static_cast<double>(frames - 1));
  }
  return spec;
}

std::string generate_dataset(const std::string& dir, const std::vector<SceneKind>& kinds, int n,
                             int64_t frames, int64_t height, int64_t width, uint64_t seed) {
  if (kinds.empty()) throw std::runtime_error("generate_dataset: no scene kinds given");
  if (n <= 0) throw std::runtime_error("generate_dataset: clip count must be positive");
  std::filesystem::create_directories(dir);
  std::string manifest_path = dir + "/manifest.tsv";
  std::ofstream manifest(manifest_path);
  if (!manifest) throw std::runtime_error("generate_dataset: cannot write " + manifest_path);
  for (int i = 0; i < n; ++i) {
    SyntheticSceneSpec spec =
        scaled_scene_spec(kinds[static_cast<size_t>(i) % kinds.size()], frames, height, width,
                          i % static_cast<int>(kinds.size()));
    VideoClip clip = generate_synthetic_clip(spec, key_from({seed, static_cast<uint64_t>(i)}));
    char name[32];
    std::snprintf(name, sizeof(name), "clip_%05d.avt", i);
    save_clip(dir + "/" + name, clip, Dtype::u8);
    manifest << name << '\t' << spec.class_id << '\n';
  }
  manifest.close();
  return manifest_path;
}

}  // namespace arrowvid
