#pragma once
// Video generators for the three baseline families.
//
//   vgan  — two-stream: a 3D-deconv foreground with a sigmoid mask composited
//           over a 2D-deconv static background, out = m*f + (1-m)*b.
//   tgan  — a 1D temporal deconv stack maps z0 to per-frame latents; a shared
//           2D image generator renders each frame from concat(z0, z1_t).
//   moco  — a content latent plus a GRU-driven motion code per frame, rendered
//           by a shared 2D image generator.
//
// All outputs are tanh-bounded {N,3,T,H,W}.  Spatial stages double 4x4 up to
// HxW (H = W = 4·2^k).  The conditional variant inserts class-conditional
// batch norm before every deconvolution; the unconditional variant uses plain
// batch norm after each hidden deconvolution.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "arrowvid/layers.hpp"

namespace arrowvid {

enum class Family { vgan, tgan, moco };

std::string family_name(Family f);
Family family_from_string(const std::string& s);

struct GenCfg {
  Family family = Family::vgan;
  int64_t T = 16, H = 64, W = 64;
  int64_t latent = 100;    // z dim (vgan), z0 dim (tgan), content dim (moco)
  int64_t width_div = 1;   // divides every channel width (floor 4)
  bool categorical = false;
  int64_t classes = 0;
  int64_t moco_motion = 10, moco_hidden = 10;  // GRU input / hidden dims
};

struct Generator {
  virtual ~Generator() = default;
  // z {N, latent_dim()}; labels required iff categorical.  Output {N,3,T,H,W}.
  virtual Var forward(Tape& t, Var z, const std::vector<int>& labels, const PassCtx& ctx) = 0;
  virtual int64_t latent_dim() const = 0;
  virtual const GenCfg& cfg() const = 0;
  virtual std::vector<Param*> params() = 0;
  virtual NamedTensors state() const = 0;
  virtual void load(const NamedTensors& in) = 0;
};

std::unique_ptr<Generator> make_generator(const GenCfg& cfg, uint64_t init_key);

// 4·2^k = H or throws; shared with the discriminators.
int spatial_stages(int64_t h);
int64_t divw(int64_t w, int64_t div);  // width/div floored at 4

}  // namespace arrowvid
