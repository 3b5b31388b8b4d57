#pragma once
// Network building blocks over the tape.
//
// Every forward takes a PassCtx.  `training` picks batch statistics and
// enables additive noise; `trainable` decides whether params enter the graph
// as differentiable leaves AND whether persistent state (BN running moments,
// spectral-norm power vectors) may be updated — a frozen pass never mutates.
// `noise_key` scopes the per-layer noise draws; the same key replays the
// same noise, which keeps finite-difference checks and resumed runs exact.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "arrowvid/rng.hpp"
#include "arrowvid/tape.hpp"
#include "arrowvid/tensor_file.hpp"

namespace arrowvid {

struct PassCtx {
  bool training = true;
  bool trainable = true;
  uint64_t noise_key = 0;
};

// Stable per-tensor init streams: draw order is construction order.
struct InitCtx {
  uint64_t key = 0;
  uint64_t counter = 0;
  RngStream next() { return RngStream({key, STREAM_PARAM_INIT, counter++}); }
};

Tensor init_normal(Shape s, double mean, double stddev, RngStream r);

// ---- spectral normalization ----
// One-sided power iteration on the (rows = dim0) matrix view of w.
// Returns the current sigma estimate u^T W v after `iters` updates of the
// persistent vectors.  Pure numeric; the graph version divides by a sigma
// node so gradients see u,v as constants.
double spectral_sigma_estimate(const Tensor& w2d, Tensor& u, Tensor& v, int iters);
// w of any rank; sigma floored at 1e-12 so an all-zero matrix stays zero.
Var spectral_normalize(Tape& t, Var w, Tensor& u, Tensor& v, bool update, int iters = 1);

// ---- layers ----

struct LinearLayer {
  std::string name;
  Param w, b;
  bool bias = true, sn = false;
  Tensor sn_u, sn_v;
  LinearLayer() = default;
  LinearLayer(std::string n, int64_t in, int64_t out, InitCtx& init, bool bias = true);
  // Turns on the weight constraint and settles the power vectors, so a fresh
  // layer estimates sigma accurately even before any training pass.
  void enable_sn();
  Var forward(Tape& t, Var x, const PassCtx& ctx);
  void params(std::vector<Param*>& out);
  void state(NamedTensors& out) const;
  void load(const NamedTensors& in, size_t& pos);
};

struct Conv3dLayer {
  std::string name;
  Param w, b;  // w {O,C,kt,kh,kw}
  std::array<int, 3> stride{1, 1, 1}, pad{0, 0, 0};
  bool bias = true, sn = false;
  Tensor sn_u, sn_v;
  Conv3dLayer() = default;
  Conv3dLayer(std::string n, int64_t cin, int64_t cout, std::array<int64_t, 3> k, std::array<int, 3> s,
              std::array<int, 3> p, InitCtx& init, bool bias = true);
  void enable_sn();  // see LinearLayer::enable_sn
  Var forward(Tape& t, Var x, const PassCtx& ctx);  // x {N,C,T,H,W}
  void params(std::vector<Param*>& out);
  void state(NamedTensors& out) const;
  void load(const NamedTensors& in, size_t& pos);
};

// Transposed 3D conv; w {Ci,Co,kt,kh,kw}.
struct TConv3dLayer {
  std::string name;
  Param w, b;
  std::array<int, 3> stride{1, 1, 1}, pad{0, 0, 0};
  bool bias = true;
  TConv3dLayer() = default;
  TConv3dLayer(std::string n, int64_t cin, int64_t cout, std::array<int64_t, 3> k, std::array<int, 3> s,
               std::array<int, 3> p, InitCtx& init, bool bias = true);
  Var forward(Tape& t, Var x, const PassCtx& ctx);
  void params(std::vector<Param*>& out);
  void state(NamedTensors& out) const;
  void load(const NamedTensors& in, size_t& pos);
};

// 2D wrappers: rank-4 tensors {N,C,H,W}, kernels stored rank-4, computed as
// 3D with a unit time extent.
struct Conv2dLayer {
  Conv3dLayer inner;
  Conv2dLayer() = default;
  Conv2dLayer(std::string n, int64_t cin, int64_t cout, std::array<int64_t, 2> k, std::array<int, 2> s,
              std::array<int, 2> p, InitCtx& init, bool bias = true);
  Var forward(Tape& t, Var x, const PassCtx& ctx);
  void params(std::vector<Param*>& out) { inner.params(out); }
  void state(NamedTensors& out) const { inner.state(out); }
  void load(const NamedTensors& in, size_t& pos) { inner.load(in, pos); }
  void enable_sn() { inner.enable_sn(); }
};

struct TConv2dLayer {
  TConv3dLayer inner;
  TConv2dLayer() = default;
  TConv2dLayer(std::string n, int64_t cin, int64_t cout, std::array<int64_t, 2> k, std::array<int, 2> s,
               std::array<int, 2> p, InitCtx& init, bool bias = true);
  Var forward(Tape& t, Var x, const PassCtx& ctx);
  void params(std::vector<Param*>& out) { inner.params(out); }
  void state(NamedTensors& out) const { inner.state(out); }
  void load(const NamedTensors& in, size_t& pos) { inner.load(in, pos); }
};

// 1D temporal (transposed) conv over {N,C,L}.
struct TConv1dLayer {
  TConv3dLayer inner;
  TConv1dLayer() = default;
  TConv1dLayer(std::string n, int64_t cin, int64_t cout, int64_t k, int s, int p, InitCtx& init);
  Var forward(Tape& t, Var x, const PassCtx& ctx);
  void params(std::vector<Param*>& out) { inner.params(out); }
  void state(NamedTensors& out) const { inner.state(out); }
  void load(const NamedTensors& in, size_t& pos) { inner.load(in, pos); }
};

// Per-channel batch normalization over (N, spatial...).  Training uses batch
// moments (biased variance) and, on trainable passes, folds them into the
// running estimates (unbiased variance, momentum 0.1); eval normalizes with
// the running values.
struct BatchNormLayer {
  std::string name;
  Param gamma, beta;
  Tensor run_mean, run_var;
  double momentum = 0.1, eps = 1e-5;
  BatchNormLayer() = default;
  BatchNormLayer(std::string n, int64_t c, InitCtx& init);
  Var forward(Tape& t, Var x, const PassCtx& ctx);
  void params(std::vector<Param*>& out);
  void state(NamedTensors& out) const;
  void load(const NamedTensors& in, size_t& pos);
};

// Class-conditional BN: per-class gamma/beta tables, shared running moments.
struct CondBatchNormLayer {
  std::string name;
  Param gamma_table, beta_table;  // {K,C}
  Tensor run_mean, run_var;
  double momentum = 0.1, eps = 1e-5;
  CondBatchNormLayer() = default;
  CondBatchNormLayer(std::string n, int64_t classes, int64_t c, InitCtx& init);
  Var forward(Tape& t, Var x, const std::vector<int>& labels, const PassCtx& ctx);
  void params(std::vector<Param*>& out);
  void state(NamedTensors& out) const;
  void load(const NamedTensors& in, size_t& pos);
};

// x + weight * eps, eps ~ N(0,1) drawn fresh per pass; identity when eval
// or weight == 0.
struct NoiseLayer {
  double weight = 0.1;
  uint64_t uid = 0;
  NoiseLayer() = default;
  NoiseLayer(double w, uint64_t uid_) : weight(w), uid(uid_) {}
  Var forward(Tape& t, Var x, const PassCtx& ctx) const;
};

// Standard GRU cell (reset gate applied to the hidden candidate projection).
struct GRUCellLayer {
  std::string name;
  Param w_ih, w_hh, b_ih, b_hh;  // {3H,X}, {3H,H}, {3H}, {3H}
  int64_t hidden = 0;
  GRUCellLayer() = default;
  GRUCellLayer(std::string n, int64_t in, int64_t h, InitCtx& init);
  Var forward(Tape& t, Var x, Var h, const PassCtx& ctx);  // {N,X},{N,H} -> {N,H}
  void params(std::vector<Param*>& out);
  void state(NamedTensors& out) const;
  void load(const NamedTensors& in, size_t& pos);
};

// Shared by all load() impls: ordered name/shape-checked restore.
Tensor take_tensor(const NamedTensors& in, size_t& pos, const std::string& name, const Shape& want);

}  // namespace arrowvid
