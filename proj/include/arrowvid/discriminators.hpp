#pragma once
// Arrow discriminators: one shared video feature extractor per family feeding
// independent single-layer heads (realism + arrow-of-time, plus optional
// rotation / frame-shuffle heads for the self-supervision ablations).  Layer
// schedules at 64x64 full width:
//
//   vgan  Noise; [Conv3d(4,2,1) (+BN from stage 2) Noise LReLU] x4,
//         widths 128..1024; Flatten; Linear heads.
//   tgan  [Conv3d(4,2,1) (+BN from stage 2) LReLU] x4, widths 64..512;
//         per-time-slice Conv2d(4,1,0) heads -> {N, T/16} score maps.
//   moco  [Noise Conv3d((4,4,4),(1,2,2),(0,1,1)) (+BN from stage 2) LReLU] x3,
//         widths 64..256, unpadded time (T-3 per stage); Conv3d head ->
//         {N,1,T-12,4,4} patch grids.  A PatchGAN frame discriminator
//         handles per-frame realism.
//
// Map-valued heads are mean-reduced to one score per sample before entering
// scalar loss formulas.  Heads emit raw logits; squashing lives in the loss
// module.  The categorical variant spectrally normalizes every weight and
// scores realism by class projection: psi(phi) + <embed[y], phi>, phi = GAP
// of the final trunk features.
//
// Temporal kernels clamp to the current temporal extent (with padding dropped)
// so reduced desk-scale instantiations stay valid; at 64x64 and T in {16,32}
// the published shapes are reproduced exactly (see `last_shapes`).

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "arrowvid/generators.hpp"
#include "arrowvid/layers.hpp"

namespace arrowvid {

struct DiscCfg {
  Family family = Family::vgan;
  int64_t T = 16, H = 64, W = 64;
  int64_t width_div = 1;
  double noise_weight = 0.1;  // vgan/moco trunks; 0 disables
  bool categorical = false;   // projection realism head + spectral norm
  int64_t classes = 0;
  bool head_aot = true;
  bool head_rot = false;      // 4-way rotation logits
  bool head_shuffle = false;  // binary shuffle logit
};

struct DiscOut {
  Var realism;      // {N} logits
  Var aot;          // {N} logits (undefined Var if head disabled)
  Var rot;          // {N,4}
  Var shuf;         // {N}
  Var phi;          // {N,Cf} pooled features (categorical only)
  Var realism_map;  // pre-reduction head output (tgan/moco map heads)
  Var aot_map;
};

struct ArrowDisc {
  virtual ~ArrowDisc() = default;
  // x {N,3,T,H,W}; labels required iff categorical.  One trunk evaluation
  // feeds every head.
  virtual DiscOut forward(Tape& t, Var x, const std::vector<int>& labels, const PassCtx& ctx) = 0;
  virtual const DiscCfg& cfg() const = 0;
  virtual std::vector<Param*> params() = 0;
  virtual NamedTensors state() const = 0;
  virtual void load(const NamedTensors& in) = 0;
  // layer name -> output shape, recorded by the last forward
  virtual const std::vector<std::pair<std::string, Shape>>& last_shapes() const = 0;
};

std::unique_ptr<ArrowDisc> make_discriminator(const DiscCfg& cfg, uint64_t init_key);

// Class-projection realism score psi(phi) + <emb[y], phi>, phi {N,Cf}.
// Exposed so the score form can be verified directly.
Var projection_score(Tape& t, LinearLayer& psi, Param& emb, Var phi, const std::vector<int>& labels,
                     const PassCtx& ctx);

// PatchGAN frame discriminator: {N,3,H,W} -> 4x4 patch logit grid + per-frame
// mean score.
struct FrameDisc {
  std::vector<Conv2dLayer> convs;
  std::vector<BatchNormLayer> bns;
  Conv2dLayer out_conv;
  Conv2dLayer rot_conv;  // optional 4-way frame-rotation head
  int64_t H = 0, W = 0;
  bool head_rot = false;
  FrameDisc() = default;
  FrameDisc(int64_t h, int64_t w, int64_t width_div, uint64_t init_key, bool with_rot = false);
  Var forward_map(Tape& t, Var frames, const PassCtx& ctx);  // {N,1,4,4}
  Var forward(Tape& t, Var frames, const PassCtx& ctx);      // {N}
  Var forward_rot(Tape& t, Var frames, const PassCtx& ctx);  // {N,4}
  std::vector<Param*> params();
  NamedTensors state() const;
  void load(const NamedTensors& in);

 private:
  Var trunk(Tape& t, Var frames, const PassCtx& ctx);
};

}  // namespace arrowvid
