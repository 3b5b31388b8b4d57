#include "arrowvid/layers.hpp"

#include <cblas.h>

#include <cmath>
#include <stdexcept>

namespace arrowvid {

Tensor init_normal(Shape s, double mean, double stddev, RngStream r) {
  Tensor t(std::move(s));
  r.fill_normal(t);
  double* p = t.data();
  for (int64_t i = 0; i < t.numel(); ++i) p[i] = mean + stddev * p[i];
  return t;
}

Tensor take_tensor(const NamedTensors& in, size_t& pos, const std::string& name, const Shape& want) {
  if (pos >= in.size()) throw std::runtime_error("checkpoint truncated: missing " + name);
  const auto& [got_name, got] = in[pos];
  if (got_name != name)
    throw std::runtime_error("checkpoint mismatch: expected " + name + ", found " + got_name);
  if (got.shape() != want)
    throw std::runtime_error("checkpoint mismatch: " + name + " has shape " + shape_str(got.shape()) +
                             ", expected " + shape_str(want));
  ++pos;
  return got;
}

// ---- spectral normalization ----

static double vec_normalize(double* p, int64_t n) {
  double sq = 0.0;
  for (int64_t i = 0; i < n; ++i) sq += p[i] * p[i];
  double nrm = std::sqrt(sq);
  double d = nrm > 1e-12 ? nrm : 1e-12;
  for (int64_t i = 0; i < n; ++i) p[i] /= d;
  return nrm;
}

double spectral_sigma_estimate(const Tensor& w2d, Tensor& u, Tensor& v, int iters) {
  if (w2d.ndim() != 2) throw std::runtime_error("spectral_sigma_estimate wants a matrix");
  int64_t rows = w2d.shape()[0], cols = w2d.shape()[1];
  if (u.numel() != rows || v.numel() != cols)
    throw std::runtime_error("spectral_sigma_estimate: power vector size mismatch");
  auto M = static_cast<int>(rows);
  auto N = static_cast<int>(cols);
  for (int it = 0; it < iters; ++it) {
    // v <- normalize(W^T u), u <- normalize(W v)
    cblas_dgemv(CblasRowMajor, CblasTrans, M, N, 1.0, w2d.data(), N, u.data(), 1, 0.0, v.data(), 1);
    vec_normalize(v.data(), cols);
    cblas_dgemv(CblasRowMajor, CblasNoTrans, M, N, 1.0, w2d.data(), N, v.data(), 1, 0.0, u.data(), 1);
    vec_normalize(u.data(), rows);
  }
  Tensor wv({rows});
  cblas_dgemv(CblasRowMajor, CblasNoTrans, M, N, 1.0, w2d.data(), N, v.data(), 1, 0.0, wv.data(), 1);
  double s = 0.0;
  for (int64_t i = 0; i < rows; ++i) s += u.data()[i] * wv.data()[i];
  return s;
}

Var spectral_normalize(Tape& t, Var w, Tensor& u, Tensor& v, bool update, int iters) {
  const Shape& s = w.shape();
  int64_t rows = s[0], cols = w.val().numel() / s[0];
  if (update) {
    Tensor w2 = w.val().reshaped({rows, cols});
    spectral_sigma_estimate(w2, u, v, iters);
  }
  // sigma = u^T W v with u,v held constant; gradients flow through W only.
  Var w2v = reshape(w, {rows, cols});
  Var uc = t.constant(u.reshaped({1, rows}));
  Var vc = t.constant(v.reshaped({cols, 1}));
  Var sig = clamp_min(reshape(matmul(matmul(uc, w2v), vc), {1}), 1e-12);
  return div_bscalar(w, sig);
}

// ---- LinearLayer ----

LinearLayer::LinearLayer(std::string n, int64_t in, int64_t out, InitCtx& init, bool bias_)
    : name(std::move(n)), bias(bias_) {
  w = Param(name + ".w", init_normal({out, in}, 0.0, 0.02, init.next()));
  b = Param(name + ".b", Tensor({out}));
  sn_u = init_normal({out}, 0.0, 1.0, init.next());
  vec_normalize(sn_u.data(), out);
  sn_v = init_normal({in}, 0.0, 1.0, init.next());
  vec_normalize(sn_v.data(), in);
}

void LinearLayer::enable_sn() {
  sn = true;
  spectral_sigma_estimate(w.value, sn_u, sn_v, 30);
}

Var LinearLayer::forward(Tape& t, Var x, const PassCtx& ctx) {
  Var wv = t.leaf(w, ctx.trainable);
  if (sn) wv = spectral_normalize(t, wv, sn_u, sn_v, ctx.training && ctx.trainable);
  Var y = matmul(x, transpose2d(wv));
  if (bias) y = add_channel(y, t.leaf(b, ctx.trainable));
  return y;
}

void LinearLayer::params(std::vector<Param*>& out) {
  out.push_back(&w);
  if (bias) out.push_back(&b);
}

void LinearLayer::state(NamedTensors& out) const {
  out.emplace_back(w.name, w.value);
  if (bias) out.emplace_back(b.name, b.value);
  if (sn) {
    out.emplace_back(name + ".u", sn_u);
    out.emplace_back(name + ".v", sn_v);
  }
}

void LinearLayer::load(const NamedTensors& in, size_t& pos) {
  w.value = take_tensor(in, pos, w.name, w.value.shape());
  if (bias) b.value = take_tensor(in, pos, b.name, b.value.shape());
  if (sn) {
    sn_u = take_tensor(in, pos, name + ".u", sn_u.shape());
    sn_v = take_tensor(in, pos, name + ".v", sn_v.shape());
  }
}

// ---- Conv3dLayer ----

Conv3dLayer::Conv3dLayer(std::string n, int64_t cin, int64_t cout, std::array<int64_t, 3> k,
                         std::array<int, 3> s, std::array<int, 3> p, InitCtx& init, bool bias_)
    : name(std::move(n)), stride(s), pad(p), bias(bias_) {
  w = Param(name + ".w", init_normal({cout, cin, k[0], k[1], k[2]}, 0.0, 0.02, init.next()));
  b = Param(name + ".b", Tensor({cout}));
  int64_t cols = cin * k[0] * k[1] * k[2];
  sn_u = init_normal({cout}, 0.0, 1.0, init.next());
  vec_normalize(sn_u.data(), cout);
  sn_v = init_normal({cols}, 0.0, 1.0, init.next());
  vec_normalize(sn_v.data(), cols);
}

void Conv3dLayer::enable_sn() {
  sn = true;
  int64_t rows = w.value.shape()[0];
  Tensor w2 = w.value.reshaped({rows, w.value.numel() / rows});
  spectral_sigma_estimate(w2, sn_u, sn_v, 30);
}

Var Conv3dLayer::forward(Tape& t, Var x, const PassCtx& ctx) {
  Var wv = t.leaf(w, ctx.trainable);
  if (sn) wv = spectral_normalize(t, wv, sn_u, sn_v, ctx.training && ctx.trainable);
  Var y = conv3d(x, wv, stride, pad);
  if (bias) y = add_channel(y, t.leaf(b, ctx.trainable));
  return y;
}

void Conv3dLayer::params(std::vector<Param*>& out) {
  out.push_back(&w);
  if (bias) out.push_back(&b);
}

void Conv3dLayer::state(NamedTensors& out) const {
  out.emplace_back(w.name, w.value);
  if (bias) out.emplace_back(b.name, b.value);
  if (sn) {
    out.emplace_back(name + ".u", sn_u);
    out.emplace_back(name + ".v", sn_v);
  }
}

void Conv3dLayer::load(const NamedTensors& in, size_t& pos) {
  w.value = take_tensor(in, pos, w.name, w.value.shape());
  if (bias) b.value = take_tensor(in, pos, b.name, b.value.shape());
  if (sn) {
    sn_u = take_tensor(in, pos, name + ".u", sn_u.shape());
    sn_v = take_tensor(in, pos, name + ".v", sn_v.shape());
  }
}

// ---- TConv3dLayer ----

TConv3dLayer::TConv3dLayer(std::string n, int64_t cin, int64_t cout, std::array<int64_t, 3> k,
                           std::array<int, 3> s, std::array<int, 3> p, InitCtx& init, bool bias_)
    : name(std::move(n)), stride(s), pad(p), bias(bias_) {
  w = Param(name + ".w", init_normal({cin, cout, k[0], k[1], k[2]}, 0.0, 0.02, init.next()));
  b = Param(name + ".b", Tensor({cout}));
}

Var TConv3dLayer::forward(Tape& t, Var x, const PassCtx& ctx) {
  Var y = tconv3d(x, t.leaf(w, ctx.trainable), stride, pad);
  if (bias) y = add_channel(y, t.leaf(b, ctx.trainable));
  return y;
}

void TConv3dLayer::params(std::vector<Param*>& out) {
  out.push_back(&w);
  if (bias) out.push_back(&b);
}

void TConv3dLayer::state(NamedTensors& out) const {
  out.emplace_back(w.name, w.value);
  if (bias) out.emplace_back(b.name, b.value);
}

void TConv3dLayer::load(const NamedTensors& in, size_t& pos) {
  w.value = take_tensor(in, pos, w.name, w.value.shape());
  if (bias) b.value = take_tensor(in, pos, b.name, b.value.shape());
}

// ---- 2D / 1D wrappers ----

Conv2dLayer::Conv2dLayer(std::string n, int64_t cin, int64_t cout, std::array<int64_t, 2> k,
                         std::array<int, 2> s, std::array<int, 2> p, InitCtx& init, bool bias_)
    : inner(std::move(n), cin, cout, {1, k[0], k[1]}, {1, s[0], s[1]}, {0, p[0], p[1]}, init, bias_) {}

Var Conv2dLayer::forward(Tape& t, Var x, const PassCtx& ctx) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw std::runtime_error(inner.name + ": expected {N,C,H,W}, got " + shape_str(s));
  Var y = inner.forward(t, reshape(x, {s[0], s[1], 1, s[2], s[3]}), ctx);
  const Shape& o = y.shape();
  return reshape(y, {o[0], o[1], o[3], o[4]});
}

TConv2dLayer::TConv2dLayer(std::string n, int64_t cin, int64_t cout, std::array<int64_t, 2> k,
                           std::array<int, 2> s, std::array<int, 2> p, InitCtx& init, bool bias_)
    : inner(std::move(n), cin, cout, {1, k[0], k[1]}, {1, s[0], s[1]}, {0, p[0], p[1]}, init, bias_) {}

Var TConv2dLayer::forward(Tape& t, Var x, const PassCtx& ctx) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw std::runtime_error(inner.name + ": expected {N,C,H,W}, got " + shape_str(s));
  Var y = inner.forward(t, reshape(x, {s[0], s[1], 1, s[2], s[3]}), ctx);
  const Shape& o = y.shape();
  return reshape(y, {o[0], o[1], o[3], o[4]});
}

TConv1dLayer::TConv1dLayer(std::string n, int64_t cin, int64_t cout, int64_t k, int s, int p, InitCtx& init)
    : inner(std::move(n), cin, cout, {k, 1, 1}, {s, 1, 1}, {p, 0, 0}, init, true) {}

Var TConv1dLayer::forward(Tape& t, Var x, const PassCtx& ctx) {
  const Shape& s = x.shape();
  if (s.size() != 3) throw std::runtime_error(inner.name + ": expected {N,C,L}, got " + shape_str(s));
  Var y = inner.forward(t, reshape(x, {s[0], s[1], s[2], 1, 1}), ctx);
  const Shape& o = y.shape();
  return reshape(y, {o[0], o[1], o[2]});
}

// ---- batch norm ----

BatchNormLayer::BatchNormLayer(std::string n, int64_t c, InitCtx& init) : name(std::move(n)) {
  gamma = Param(name + ".g", init_normal({c}, 1.0, 0.02, init.next()));
  beta = Param(name + ".b", Tensor({c}));
  run_mean = Tensor({c});
  run_var = Tensor({c}, 1.0);
}

// Normalized activations with batch stats (training) or running stats (eval);
// on trainable training passes the batch moments fold into the running
// estimates (unbiased variance).  Shared by plain and conditional BN.
static Var bn_normalize(Tape& t, Var x, bool training, bool update, Tensor& run_mean, Tensor& run_var,
                        double momentum, double eps, const std::string& name) {
  const Shape& s = x.shape();
  if (s.size() < 2) throw std::runtime_error(name + ": batch norm wants rank >= 2");
  int64_t c = s[1];
  if (run_mean.numel() != c)
    throw std::runtime_error(name + ": expected " + std::to_string(run_mean.numel()) + " channels, got " +
                             shape_str(s));
  if (training) {
    double cnt = static_cast<double>(x.val().numel() / c);
    Var mean = mulc(channel_sum(x), 1.0 / cnt);
    Var xc = sub(x, bcast_channel(mean, s));
    Var var = mulc(channel_sum(square(xc)), 1.0 / cnt);
    if (update) {
      const Tensor& mv = mean.val();
      const Tensor& vv = var.val();
      double unb = cnt > 1.0 ? cnt / (cnt - 1.0) : 1.0;
      for (int64_t i = 0; i < c; ++i) {
        run_mean.data()[i] = (1.0 - momentum) * run_mean.data()[i] + momentum * mv.data()[i];
        run_var.data()[i] = (1.0 - momentum) * run_var.data()[i] + momentum * unb * vv.data()[i];
      }
    }
    return mul_channel(xc, recip(sqrt_(addc(var, eps))));
  }
  Tensor scale({c}), shift({c});
  for (int64_t i = 0; i < c; ++i) {
    scale.data()[i] = 1.0 / std::sqrt(run_var.data()[i] + eps);
    shift.data()[i] = -run_mean.data()[i] * scale.data()[i];
  }
  return add_channel(mul_channel(x, t.constant(scale)), t.constant(shift));
}

Var BatchNormLayer::forward(Tape& t, Var x, const PassCtx& ctx) {
  Var xn = bn_normalize(t, x, ctx.training, ctx.training && ctx.trainable, run_mean, run_var, momentum,
                        eps, name);
  return add_channel(mul_channel(xn, t.leaf(gamma, ctx.trainable)), t.leaf(beta, ctx.trainable));
}

void BatchNormLayer::params(std::vector<Param*>& out) {
  out.push_back(&gamma);
  out.push_back(&beta);
}

void BatchNormLayer::state(NamedTensors& out) const {
  out.emplace_back(gamma.name, gamma.value);
  out.emplace_back(beta.name, beta.value);
  out.emplace_back(name + ".rm", run_mean);
  out.emplace_back(name + ".rv", run_var);
}

void BatchNormLayer::load(const NamedTensors& in, size_t& pos) {
  gamma.value = take_tensor(in, pos, gamma.name, gamma.value.shape());
  beta.value = take_tensor(in, pos, beta.name, beta.value.shape());
  run_mean = take_tensor(in, pos, name + ".rm", run_mean.shape());
  run_var = take_tensor(in, pos, name + ".rv", run_var.shape());
}

// ---- conditional batch norm ----

CondBatchNormLayer::CondBatchNormLayer(std::string n, int64_t classes, int64_t c, InitCtx& init)
    : name(std::move(n)) {
  gamma_table = Param(name + ".g", init_normal({classes, c}, 1.0, 0.02, init.next()));
  beta_table = Param(name + ".b", Tensor({classes, c}));
  run_mean = Tensor({c});
  run_var = Tensor({c}, 1.0);
}

Var CondBatchNormLayer::forward(Tape& t, Var x, const std::vector<int>& labels, const PassCtx& ctx) {
  const Shape& s = x.shape();
  if (s.size() < 2 || s[0] != static_cast<int64_t>(labels.size()))
    throw std::runtime_error(name + ": labels/batch mismatch for " + shape_str(s));
  int64_t classes = gamma_table.value.shape()[0];
  for (int lb : labels)
    if (lb < 0 || lb >= classes)
      throw std::runtime_error(name + ": label " + std::to_string(lb) + " out of range [0," +
                               std::to_string(classes) + ")");
  Var xn = bn_normalize(t, x, ctx.training, ctx.training && ctx.trainable, run_mean, run_var, momentum,
                        eps, name);
  Var g = select_rows(t.leaf(gamma_table, ctx.trainable), labels);
  Var b = select_rows(t.leaf(beta_table, ctx.trainable), labels);
  return add_nc(mul_nc(xn, g), b);
}

void CondBatchNormLayer::params(std::vector<Param*>& out) {
  out.push_back(&gamma_table);
  out.push_back(&beta_table);
}

void CondBatchNormLayer::state(NamedTensors& out) const {
  out.emplace_back(gamma_table.name, gamma_table.value);
  out.emplace_back(beta_table.name, beta_table.value);
  out.emplace_back(name + ".rm", run_mean);
  out.emplace_back(name + ".rv", run_var);
}

void CondBatchNormLayer::load(const NamedTensors& in, size_t& pos) {
  gamma_table.value = take_tensor(in, pos, gamma_table.name, gamma_table.value.shape());
  beta_table.value = take_tensor(in, pos, beta_table.name, beta_table.value.shape());
  run_mean = take_tensor(in, pos, name + ".rm", run_mean.shape());
  run_var = take_tensor(in, pos, name + ".rv", run_var.shape());
}

// ---- noise ----

Var NoiseLayer::forward(Tape& t, Var x, const PassCtx& ctx) const {
  if (!ctx.training || weight == 0.0) return x;
  Tensor e(x.shape());
  RngStream({ctx.noise_key, uid}).fill_normal(e);
  double* p = e.data();
  for (int64_t i = 0; i < e.numel(); ++i) p[i] *= weight;
  return add(x, t.constant(std::move(e)));
}

// ---- GRU cell ----

GRUCellLayer::GRUCellLayer(std::string n, int64_t in, int64_t h, InitCtx& init)
    : name(std::move(n)), hidden(h) {
  w_ih = Param(name + ".wi", init_normal({3 * h, in}, 0.0, 0.02, init.next()));
  w_hh = Param(name + ".wh", init_normal({3 * h, h}, 0.0, 0.02, init.next()));
  b_ih = Param(name + ".bi", Tensor({3 * h}));
  b_hh = Param(name + ".bh", Tensor({3 * h}));
}

Var GRUCellLayer::forward(Tape& t, Var x, Var h, const PassCtx& ctx) {
  Var gi = add_channel(matmul(x, transpose2d(t.leaf(w_ih, ctx.trainable))), t.leaf(b_ih, ctx.trainable));
  Var gh = add_channel(matmul(h, transpose2d(t.leaf(w_hh, ctx.trainable))), t.leaf(b_hh, ctx.trainable));
  Var r = sigmoid_(add(narrow(gi, 1, 0, hidden), narrow(gh, 1, 0, hidden)));
  Var z = sigmoid_(add(narrow(gi, 1, hidden, hidden), narrow(gh, 1, hidden, hidden)));
  Var n = tanh_(add(narrow(gi, 1, 2 * hidden, hidden), mul(r, narrow(gh, 1, 2 * hidden, hidden))));
  // h' = (1-z)*n + z*h
  return add(n, mul(z, sub(h, n)));
}

void GRUCellLayer::params(std::vector<Param*>& out) {
  out.push_back(&w_ih);
  out.push_back(&w_hh);
  out.push_back(&b_ih);
  out.push_back(&b_hh);
}

void GRUCellLayer::state(NamedTensors& out) const {
  out.emplace_back(w_ih.name, w_ih.value);
  out.emplace_back(w_hh.name, w_hh.value);
  out.emplace_back(b_ih.name, b_ih.value);
  out.emplace_back(b_hh.name, b_hh.value);
}

void GRUCellLayer::load(const NamedTensors& in, size_t& pos) {
  w_ih.value = take_tensor(in, pos, w_ih.name, w_ih.value.shape());
  w_hh.value = take_tensor(in, pos, w_hh.name, w_hh.value.shape());
  b_ih.value = take_tensor(in, pos, b_ih.name, b_ih.value.shape());
  b_hh.value = take_tensor(in, pos, b_hh.name, b_hh.value.shape());
}

}  // namespace arrowvid
