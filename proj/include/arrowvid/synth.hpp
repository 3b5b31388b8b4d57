#pragma once
// Synthetic temporally-asymmetric clips.  Three scene families whose time
// direction is recoverable from a different cue in each: dynamics
// (falling_ball accelerates under constant gravity), shape statistics
// (growing_shape's area rises monotonically), and texture history
// (fading_trail's wake decays behind the mover).  Every emitted clip is
// checked against the analytic probe below; statically ambiguous scenes are
// regenerated rather than shipped.

#include <cstdint>
#include <string>
#include <vector>

#include "arrowvid/video.hpp"

namespace arrowvid {

enum class SceneKind { falling_ball, growing_shape, fading_trail };

const char* scene_kind_name(SceneKind k);
SceneKind scene_kind_from_name(const std::string& name);

struct SyntheticSceneSpec {
  SceneKind kind = SceneKind::falling_ball;
  int64_t frames = 16;
  int64_t height = 64;
  int64_t width = 64;
  double gravity = 0.25;      // px/frame^2 (falling_ball)
  double growth_rate = 0.6;   // radius px/frame (growing_shape)
  double trail_decay = 0.85;  // per-frame intensity multiplier (fading_trail)
  int class_id = 0;
};

// Deterministic render: same (spec, seed) is bit-identical.  Initial
// positions, velocities, and the object color come from the seed; the
// physics come from the spec.  Clips the probe cannot orient are retried
// with derived sub-seeds (bounded), so the output always carries a
// well-defined direction.  Throws if the resolution cannot fit the object.
VideoClip generate_synthetic_clip(const SyntheticSceneSpec& spec, uint64_t seed);

enum class AoTLabel { forward, backward };

// Handcrafted direction statistic per scene family: mean first difference
// of the centroid row for falling_ball (balls start at rest and fall, so
// forward always moves down; curvature is useless here — it is even under
// reversal), mean first difference of foreground area for growing_shape,
// mean first difference of total luminance for fading_trail.  Positive
// means forward.  Exactly zero is an error ("ambiguous clip") — such clips
// carry no direction to learn.
AoTLabel aot_probe(const VideoClip& v, SceneKind kind);

// The scalar the probe thresholds, exposed for corpus audits.
double aot_probe_statistic(const VideoClip& v, SceneKind kind);

// Physics sized to the frame: gravity spends ~45% of the height over the
// clip, growth spends ~80% of the radius headroom.  Keeps every family
// renderable from desk-scale 16x16 up to full 64x64 without retuning.
SyntheticSceneSpec scaled_scene_spec(SceneKind kind, int64_t frames, int64_t height, int64_t width,
                                     int class_id = 0);

// Renders n clips cycling through the requested kinds, writes
// clip_NNNNN.avt files plus manifest.tsv (path<TAB>class) into dir.
// Class = index into kinds.  Returns the manifest path.
std::string generate_dataset(const std::string& dir, const std::vector<SceneKind>& kinds, int n,
                             int64_t frames, int64_t height, int64_t width, uint64_t seed);

}  // namespace arrowvid
