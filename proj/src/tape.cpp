#include "arrowvid/tape.hpp"

#include <cblas.h>

#include <cmath>
#include <stdexcept>

#include "arrowvid/conv_engine.hpp"

namespace arrowvid {

const Tensor& Var::val() const { return tape->value_of(id); }

static void check_same_tape(const char* who, Var a, Var b) {
  if (a.tape != b.tape) throw std::runtime_error(std::string(who) + ": vars from different tapes");
}

Var Tape::input(Tensor v, bool requires_grad) {
  Node n;
  n.value = std::move(v);
  n.rg = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{this, size() - 1};
}

Var Tape::leaf(Param& p, bool trainable) {
  Node n;
  n.value = p.value;
  n.rg = trainable;
  n.bound = &p;
  n.trainable = trainable;
  nodes_.push_back(std::move(n));
  return Var{this, size() - 1};
}

Var Tape::make(Tensor value, std::vector<int> parents, BackFn back) {
  bool rg = false;
  for (int pid : parents) rg = rg || nodes_[static_cast<size_t>(pid)].rg;
  Node n;
  n.value = std::move(value);
  n.parents = std::move(parents);
  n.rg = rg;
  if (rg) n.back = std::move(back);  // dead branches carry no closure
  nodes_.push_back(std::move(n));
  return Var{this, size() - 1};
}

// Reverse sweep from out_id seeded with seed_id; returns per-node adjoint ids
// (-1 where absent).  Backward closures append nodes, so node fields are
// copied out before invoking them (push_back may reallocate).
static std::vector<int> run_sweep(Tape& t, int out_id, int seed_id) {
  std::vector<int> adj(static_cast<size_t>(out_id) + 1, -1);
  adj[static_cast<size_t>(out_id)] = seed_id;
  for (int i = out_id; i >= 0; --i) {
    if (adj[static_cast<size_t>(i)] < 0 || !t.requires_grad(i)) continue;
    auto [back, parents] = t.node_back(i);
    if (!back) continue;
    std::vector<Var> padj(parents.size());
    back(t, Var{&t, i}, Var{&t, adj[static_cast<size_t>(i)]}, padj);
    for (size_t k = 0; k < parents.size(); ++k) {
      int pid = parents[k];
      if (!padj[k].defined() || !t.requires_grad(pid)) continue;
      int& slot = adj[static_cast<size_t>(pid)];
      slot = (slot < 0) ? padj[k].id : add(Var{&t, slot}, padj[k]).id;
    }
  }
  return adj;
}

std::pair<Tape::BackFn, std::vector<int>> Tape::node_back(int id) const {
  const Node& n = nodes_[static_cast<size_t>(id)];
  return {n.back, n.parents};
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw std::runtime_error("backward: var from another tape");
  if (value_of(loss.id).numel() != 1) throw std::runtime_error("backward: loss must be scalar");
  int seed = input(Tensor::scalar(1.0)).id;
  auto adj = run_sweep(*this, loss.id, seed);
  for (int i = 0; i <= loss.id; ++i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (n.bound && n.trainable && adj[static_cast<size_t>(i)] >= 0) {
      const Tensor& g = value_of(adj[static_cast<size_t>(i)]);
      check_same_shape("backward", n.bound->grad, g);
      double* dst = n.bound->grad.data();
      const double* src = g.data();
      for (int64_t j = 0; j < g.numel(); ++j) dst[j] += src[j];
    }
  }
}

std::vector<Var> Tape::grad_graph(Var out, const std::vector<Var>& wrt) {
  if (out.tape != this) throw std::runtime_error("grad_graph: var from another tape");
  int seed = input(Tensor::full(value_of(out.id).shape(), 1.0)).id;
  auto adj = run_sweep(*this, out.id, seed);
  std::vector<Var> res;
  res.reserve(wrt.size());
  for (Var v : wrt) {
    if (v.tape != this) throw std::runtime_error("grad_graph: wrt var from another tape");
    if (v.id <= out.id && adj[static_cast<size_t>(v.id)] >= 0)
      res.push_back(Var{this, adj[static_cast<size_t>(v.id)]});
    else
      res.push_back(input(Tensor(value_of(v.id).shape())));
  }
  return res;
}

// ---------- elementwise ----------

template <class F>
static Tensor ew1(const Tensor& a, F f) {
  Tensor out(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  for (int64_t i = 0; i < a.numel(); ++i) po[i] = f(pa[i]);
  return out;
}

template <class F>
static Tensor ew2(const char* who, const Tensor& a, const Tensor& b, F f) {
  check_same_shape(who, a, b);
  Tensor out(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (int64_t i = 0; i < a.numel(); ++i) po[i] = f(pa[i], pb[i]);
  return out;
}

Var add(Var a, Var b) {
  check_same_tape("add", a, b);
  return a.tape->make(ew2("add", a.val(), b.val(), [](double x, double y) { return x + y; }), {a.id, b.id},
                      [](Tape&, Var, Var g, std::vector<Var>& p) { p[0] = g; p[1] = g; });
}

Var sub(Var a, Var b) {
  check_same_tape("sub", a, b);
  return a.tape->make(ew2("sub", a.val(), b.val(), [](double x, double y) { return x - y; }), {a.id, b.id},
                      [](Tape&, Var, Var g, std::vector<Var>& p) { p[0] = g; p[1] = neg(g); });
}

Var mul(Var a, Var b) {
  check_same_tape("mul", a, b);
  return a.tape->make(ew2("mul", a.val(), b.val(), [](double x, double y) { return x * y; }), {a.id, b.id},
                      [a, b](Tape&, Var, Var g, std::vector<Var>& p) {
                        p[0] = mul(g, b);
                        p[1] = mul(g, a);
                      });
}

Var div_(Var a, Var b) {
  check_same_tape("div", a, b);
  return a.tape->make(ew2("div", a.val(), b.val(), [](double x, double y) { return x / y; }), {a.id, b.id},
                      [b](Tape&, Var self, Var g, std::vector<Var>& p) {
                        p[0] = div_(g, b);
                        p[1] = neg(div_(mul(g, self), b));
                      });
}

Var addc(Var a, double c) {
  return a.tape->make(ew1(a.val(), [c](double x) { return x + c; }), {a.id},
                      [](Tape&, Var, Var g, std::vector<Var>& p) { p[0] = g; });
}

Var mulc(Var a, double c) {
  return a.tape->make(ew1(a.val(), [c](double x) { return x * c; }), {a.id},
                      [c](Tape&, Var, Var g, std::vector<Var>& p) { p[0] = mulc(g, c); });
}

Var neg(Var a) { return mulc(a, -1.0); }

Var exp_(Var a) {
  return a.tape->make(ew1(a.val(), [](double x) { return std::exp(x); }), {a.id},
                      [](Tape&, Var self, Var g, std::vector<Var>& p) { p[0] = mul(g, self); });
}

Var log_(Var a) {
  return a.tape->make(ew1(a.val(), [](double x) { return std::log(x); }), {a.id},
                      [a](Tape&, Var, Var g, std::vector<Var>& p) { p[0] = div_(g, a); });
}

Var sqrt_(Var a) {
  return a.tape->make(ew1(a.val(), [](double x) { return std::sqrt(x); }), {a.id},
                      [](Tape&, Var self, Var g, std::vector<Var>& p) { p[0] = div_(g, mulc(self, 2.0)); });
}

Var recip(Var a) {
  return a.tape->make(ew1(a.val(), [](double x) { return 1.0 / x; }), {a.id},
                      [](Tape&, Var self, Var g, std::vector<Var>& p) { p[0] = neg(mul(g, mul(self, self))); });
}

Var square(Var a) { return mul(a, a); }

Var abs_(Var a) {
  Tensor sign = ew1(a.val(), [](double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
  return a.tape->make(ew1(a.val(), [](double x) { return std::fabs(x); }), {a.id},
                      [sign](Tape& t, Var, Var g, std::vector<Var>& p) { p[0] = mul(g, t.constant(sign)); });
}

Var tanh_(Var a) {
  return a.tape->make(ew1(a.val(), [](double x) { return std::tanh(x); }), {a.id},
                      [](Tape&, Var self, Var g, std::vector<Var>& p) {
                        p[0] = mul(g, addc(mulc(mul(self, self), -1.0), 1.0));
                      });
}

Var sigmoid_(Var a) {
  auto f = [](double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
  };
  return a.tape->make(ew1(a.val(), f), {a.id}, [](Tape&, Var self, Var g, std::vector<Var>& p) {
    p[0] = mul(g, mul(self, addc(mulc(self, -1.0), 1.0)));
  });
}

Var softplus_(Var a) {
  auto f = [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x))); };
  return a.tape->make(ew1(a.val(), f), {a.id},
                      [a](Tape&, Var, Var g, std::vector<Var>& p) { p[0] = mul(g, sigmoid_(a)); });
}

static Var masked_linear_unit(Var a, double slope) {
  Tensor mask = ew1(a.val(), [slope](double x) { return x > 0 ? 1.0 : slope; });
  Tensor out = ew1(a.val(), [slope](double x) { return x > 0 ? x : slope * x; });
  return a.tape->make(std::move(out), {a.id},
                      [mask](Tape& t, Var, Var g, std::vector<Var>& p) { p[0] = mul(g, t.constant(mask)); });
}

Var relu_(Var a) { return masked_linear_unit(a, 0.0); }
Var lrelu(Var a, double slope) { return masked_linear_unit(a, slope); }

Var clamp_min(Var a, double c) {
  Tensor mask = ew1(a.val(), [c](double x) { return x >= c ? 1.0 : 0.0; });
  return a.tape->make(ew1(a.val(), [c](double x) { return std::max(x, c); }), {a.id},
                      [mask](Tape& t, Var, Var g, std::vector<Var>& p) { p[0] = mul(g, t.constant(mask)); });
}

// ---------- shape ----------

Var reshape(Var a, Shape s) {
  Shape orig = a.shape();
  return a.tape->make(a.val().reshaped(std::move(s)), {a.id},
                      [orig](Tape&, Var, Var g, std::vector<Var>& p) { p[0] = reshape(g, orig); });
}

static Shape permuted_shape(const Shape& s, const std::vector<int>& perm) {
  Shape out(s.size());
  for (size_t i = 0; i < s.size(); ++i) out[i] = s[static_cast<size_t>(perm[i])];
  return out;
}

static Tensor permute_val(const Tensor& a, const std::vector<int>& perm) {
  const Shape& s = a.shape();
  int r = a.ndim();
  if (static_cast<int>(perm.size()) != r) throw std::runtime_error("permute: rank mismatch");
  Shape os = permuted_shape(s, perm);
  Tensor out(os);
  std::vector<int64_t> istr(static_cast<size_t>(r), 1), ostr(static_cast<size_t>(r), 1);
  for (int i = r - 2; i >= 0; --i) istr[static_cast<size_t>(i)] = istr[static_cast<size_t>(i + 1)] * s[static_cast<size_t>(i + 1)];
  for (int i = r - 2; i >= 0; --i) ostr[static_cast<size_t>(i)] = ostr[static_cast<size_t>(i + 1)] * os[static_cast<size_t>(i + 1)];
  const double* pa = a.data();
  double* po = out.data();
  std::vector<int64_t> idx(static_cast<size_t>(r), 0);
  for (int64_t o = 0; o < out.numel(); ++o) {
    int64_t rem = o, src = 0;
    for (int i = 0; i < r; ++i) {
      int64_t q = rem / ostr[static_cast<size_t>(i)];
      rem -= q * ostr[static_cast<size_t>(i)];
      src += q * istr[static_cast<size_t>(perm[static_cast<size_t>(i)])];
    }
    po[o] = pa[src];
  }
  return out;
}

Var permute(Var a, const std::vector<int>& perm) {
  std::vector<int> inv(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) inv[static_cast<size_t>(perm[i])] = static_cast<int>(i);
  return a.tape->make(permute_val(a.val(), perm), {a.id},
                      [inv](Tape&, Var, Var g, std::vector<Var>& p) { p[0] = permute(g, inv); });
}

static Tensor flip_val(const Tensor& a, int dim) {
  const Shape& s = a.shape();
  Tensor out(s);
  int64_t outer = 1, inner = 1, d = s[static_cast<size_t>(dim)];
  for (int i = 0; i < dim; ++i) outer *= s[static_cast<size_t>(i)];
  for (int i = dim + 1; i < a.ndim(); ++i) inner *= s[static_cast<size_t>(i)];
  const double* pa = a.data();
  double* po = out.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t j = 0; j < d; ++j)
      std::copy(pa + (o * d + j) * inner, pa + (o * d + j + 1) * inner, po + (o * d + (d - 1 - j)) * inner);
  return out;
}

Var flip(Var a, int dim) {
  if (dim < 0 || dim >= a.val().ndim()) throw std::runtime_error("flip: bad dim");
  return a.tape->make(flip_val(a.val(), dim), {a.id},
                      [dim](Tape&, Var, Var g, std::vector<Var>& p) { p[0] = flip(g, dim); });
}

// One counter-clockwise quarter turn of the last two dims: out(i,j) = in(j, W-1-i).
static Tensor rot90_once(const Tensor& a) {
  const Shape& s = a.shape();
  int r = a.ndim();
  if (r < 2) throw std::runtime_error("rot90: rank < 2");
  int64_t H = s[static_cast<size_t>(r - 2)], W = s[static_cast<size_t>(r - 1)];
  int64_t lead = a.numel() / (H * W);
  Shape os = s;
  os[static_cast<size_t>(r - 2)] = W;
  os[static_cast<size_t>(r - 1)] = H;
  Tensor out(os);
  const double* pa = a.data();
  double* po = out.data();
  for (int64_t l = 0; l < lead; ++l) {
    const double* in = pa + l * H * W;
    double* o = po + l * H * W;
    for (int64_t i = 0; i < W; ++i)
      for (int64_t j = 0; j < H; ++j) o[i * H + j] = in[j * W + (W - 1 - i)];
  }
  return out;
}

Var rot90_hw(Var a, int k) {
  k = ((k % 4) + 4) % 4;
  Tensor v = a.val();
  for (int i = 0; i < k; ++i) v = rot90_once(v);
  int kinv = (4 - k) % 4;
  return a.tape->make(std::move(v), {a.id},
                      [kinv](Tape&, Var, Var g, std::vector<Var>& p) { p[0] = rot90_hw(g, kinv); });
}

static void narrow_dims(const Shape& s, int dim, int64_t& outer, int64_t& inner) {
  outer = 1;
  inner = 1;
  for (int i = 0; i < dim; ++i) outer *= s[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(dim) + 1; i < s.size(); ++i) inner *= s[i];
}

Var narrow(Var a, int dim, int64_t start, int64_t len) {
  const Shape& s = a.shape();
  if (dim < 0 || dim >= a.val().ndim() || start < 0 || start + len > s[static_cast<size_t>(dim)])
    throw std::runtime_error("narrow: bad slice");
  int64_t outer, inner, d = s[static_cast<size_t>(dim)];
  narrow_dims(s, dim, outer, inner);
  Shape os = s;
  os[static_cast<size_t>(dim)] = len;
  Tensor out(os);
  const double* pa = a.val().data();
  double* po = out.data();
  for (int64_t o = 0; o < outer; ++o)
    std::copy(pa + (o * d + start) * inner, pa + (o * d + start + len) * inner, po + o * len * inner);
  int64_t full = d;
  return a.tape->make(std::move(out), {a.id}, [dim, start, full](Tape&, Var, Var g, std::vector<Var>& p) {
    p[0] = embed(g, dim, start, full);
  });
}

Var embed(Var a, int dim, int64_t start, int64_t full) {
  const Shape& s = a.shape();
  int64_t len = s[static_cast<size_t>(dim)];
  if (start < 0 || start + len > full) throw std::runtime_error("embed: bad placement");
  int64_t outer, inner;
  narrow_dims(s, dim, outer, inner);
  Shape os = s;
  os[static_cast<size_t>(dim)] = full;
  Tensor out(os);
  const double* pa = a.val().data();
  double* po = out.data();
  for (int64_t o = 0; o < outer; ++o)
    std::copy(pa + o * len * inner, pa + (o + 1) * len * inner, po + (o * full + start) * inner);
  return a.tape->make(std::move(out), {a.id}, [dim, start, len](Tape&, Var, Var g, std::vector<Var>& p) {
    p[0] = narrow(g, dim, start, len);
  });
}

Var concat(const std::vector<Var>& xs, int dim) {
  if (xs.empty()) throw std::runtime_error("concat: empty");
  Tape* t = xs[0].tape;
  Shape os = xs[0].shape();
  int64_t total = 0;
  for (Var x : xs) {
    check_same_tape("concat", xs[0], x);
    total += x.shape()[static_cast<size_t>(dim)];
  }
  os[static_cast<size_t>(dim)] = total;
  Tensor out(os);
  int64_t outer, inner;
  narrow_dims(os, dim, outer, inner);
  std::vector<int> parents;
  std::vector<int64_t> offs, lens;
  int64_t off = 0;
  for (Var x : xs) {
    const Shape& s = x.shape();
    for (size_t i = 0; i < s.size(); ++i)
      if (static_cast<int>(i) != dim && s[i] != os[i])
        throw std::runtime_error("concat: shape mismatch at dim " + std::to_string(i));
    int64_t len = s[static_cast<size_t>(dim)];
    const double* pa = x.val().data();
    double* po = out.data();
    for (int64_t o = 0; o < outer; ++o)
      std::copy(pa + o * len * inner, pa + (o + 1) * len * inner, po + (o * total + off) * inner);
    parents.push_back(x.id);
    offs.push_back(off);
    lens.push_back(len);
    off += len;
  }
  return t->make(std::move(out), std::move(parents), [dim, offs, lens](Tape&, Var, Var g, std::vector<Var>& p) {
    for (size_t k = 0; k < p.size(); ++k) p[k] = narrow(g, dim, offs[k], lens[k]);
  });
}

Var permute_time(Var a, const std::vector<std::vector<int>>& perms) {
  const Shape& s = a.shape();
  if (a.val().ndim() != 5) throw std::runtime_error("permute_time: expected {N,C,T,H,W}");
  int64_t N = s[0], C = s[1], T = s[2], F = s[3] * s[4];
  if (static_cast<int64_t>(perms.size()) != N) throw std::runtime_error("permute_time: need one permutation per sample");
  Tensor out(s);
  const double* pa = a.val().data();
  double* po = out.data();
  for (int64_t n = 0; n < N; ++n) {
    if (static_cast<int64_t>(perms[static_cast<size_t>(n)].size()) != T)
      throw std::runtime_error("permute_time: permutation length != T");
    for (int64_t c = 0; c < C; ++c)
      for (int64_t t = 0; t < T; ++t) {
        int64_t src = perms[static_cast<size_t>(n)][static_cast<size_t>(t)];
        std::copy(pa + ((n * C + c) * T + src) * F, pa + ((n * C + c) * T + src + 1) * F,
                  po + ((n * C + c) * T + t) * F);
      }
  }
  std::vector<std::vector<int>> inv(perms.size());
  for (size_t n = 0; n < perms.size(); ++n) {
    inv[n].resize(perms[n].size());
    for (size_t t = 0; t < perms[n].size(); ++t) inv[n][static_cast<size_t>(perms[n][t])] = static_cast<int>(t);
  }
  return a.tape->make(std::move(out), {a.id},
                      [inv](Tape&, Var, Var g, std::vector<Var>& p) { p[0] = permute_time(g, inv); });
}

// ---------- linear algebra ----------

static Tensor matmul_val(const Tensor& A, const Tensor& B) {
  int64_t M = A.dim(0), K = A.dim(1), N = B.dim(1);
  Tensor out({M, N});
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(M), static_cast<int>(N),
              static_cast<int>(K), 1.0, A.data(), static_cast<int>(K), B.data(), static_cast<int>(N), 0.0,
              out.data(), static_cast<int>(N));
  return out;
}

Var matmul(Var a, Var b) {
  check_same_tape("matmul", a, b);
  const Tensor& A = a.val();
  const Tensor& B = b.val();
  if (A.ndim() != 2 || B.ndim() != 2 || A.dim(1) != B.dim(0))
    throw std::runtime_error("matmul: bad shapes " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
  Tensor out = matmul_val(A, B);
  return a.tape->make(std::move(out), {a.id, b.id}, [a, b](Tape& t, Var, Var g, std::vector<Var>& p) {
    if (t.requires_grad(a.id)) p[0] = matmul(g, transpose2d(b));
    if (t.requires_grad(b.id)) p[1] = matmul(transpose2d(a), g);
  });
}

Var transpose2d(Var a) {
  const Tensor& A = a.val();
  if (A.ndim() != 2) throw std::runtime_error("transpose2d: rank != 2");
  Tensor out({A.dim(1), A.dim(0)});
  for (int64_t i = 0; i < A.dim(0); ++i)
    for (int64_t j = 0; j < A.dim(1); ++j) out[j * A.dim(0) + i] = A[i * A.dim(1) + j];
  return a.tape->make(std::move(out), {a.id},
                      [](Tape&, Var, Var g, std::vector<Var>& p) { p[0] = transpose2d(g); });
}

// ---------- reductions & broadcasts ----------

Var sum_all(Var a) {
  Shape orig = a.shape();
  return a.tape->make(Tensor::scalar(a.val().sum()), {a.id},
                      [orig](Tape&, Var, Var g, std::vector<Var>& p) { p[0] = bfill(g, orig); });
}

Var mean_all(Var a) { return mulc(sum_all(a), 1.0 / static_cast<double>(a.val().numel())); }

Var bfill(Var s, Shape shape) {
  if (s.val().numel() != 1) throw std::runtime_error("bfill: source not scalar");
  return s.tape->make(Tensor::full(shape, s.val()[0]), {s.id},
                      [](Tape&, Var, Var g, std::vector<Var>& p) { p[0] = sum_all(g); });
}

Var sum_samples(Var a) {
  const Shape& s = a.shape();
  int64_t N = s[0], R = a.val().numel() / N;
  Tensor out({N});
  const double* pa = a.val().data();
  for (int64_t n = 0; n < N; ++n) {
    double acc = 0;
    for (int64_t j = 0; j < R; ++j) acc += pa[n * R + j];
    out[n] = acc;
  }
  Shape orig = s;
  return a.tape->make(std::move(out), {a.id},
                      [orig](Tape&, Var, Var g, std::vector<Var>& p) { p[0] = bcast_samples(g, orig); });
}

Var mean_samples(Var a) {
  int64_t R = a.val().numel() / a.shape()[0];
  return mulc(sum_samples(a), 1.0 / static_cast<double>(R));
}

Var bcast_samples(Var s, Shape shape) {
  if (s.val().ndim() != 1 || s.shape()[0] != shape[0]) throw std::runtime_error("bcast_samples: bad shapes");
  int64_t N = shape[0], R = shape_numel(shape) / N;
  Tensor out(shape);
  double* po = out.data();
  for (int64_t n = 0; n < N; ++n) std::fill(po + n * R, po + (n + 1) * R, s.val()[n]);
  return s.tape->make(std::move(out), {s.id},
                      [](Tape&, Var, Var g, std::vector<Var>& p) { p[0] = sum_samples(g); });
}

static void nc_dims(const Shape& s, int64_t& N, int64_t& C, int64_t& F) {
  if (s.size() < 2) throw std::runtime_error("channel op: rank < 2");
  N = s[0];
  C = s[1];
  F = 1;
  for (size_t i = 2; i < s.size(); ++i) F *= s[i];
}

Var channel_sum(Var a) {
  int64_t N, C, F;
  nc_dims(a.shape(), N, C, F);
  Tensor out({C});
  const double* pa = a.val().data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      double acc = 0;
      const double* s = pa + (n * C + c) * F;
      for (int64_t j = 0; j < F; ++j) acc += s[j];
      out[c] += acc;
    }
  Shape orig = a.shape();
  return a.tape->make(std::move(out), {a.id},
                      [orig](Tape&, Var, Var g, std::vector<Var>& p) { p[0] = bcast_channel(g, orig); });
}

Var bcast_channel(Var s, Shape shape) {
  int64_t N, C, F;
  nc_dims(shape, N, C, F);
  if (s.val().ndim() != 1 || s.shape()[0] != C) throw std::runtime_error("bcast_channel: bad shapes");
  Tensor out(shape);
  double* po = out.data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) std::fill(po + (n * C + c) * F, po + (n * C + c + 1) * F, s.val()[c]);
  return s.tape->make(std::move(out), {s.id},
                      [](Tape&, Var, Var g, std::vector<Var>& p) { p[0] = channel_sum(g); });
}

Var nc_sum(Var a) {
  int64_t N, C, F;
  nc_dims(a.shape(), N, C, F);
  Tensor out({N, C});
  const double* pa = a.val().data();
  for (int64_t nc = 0; nc < N * C; ++nc) {
    double acc = 0;
    for (int64_t j = 0; j < F; ++j) acc += pa[nc * F + j];
    out[nc] = acc;
  }
  Shape orig = a.shape();
  return a.tape->make(std::move(out), {a.id},
                      [orig](Tape&, Var, Var g, std::vector<Var>& p) { p[0] = bcast_nc(g, orig); });
}

Var bcast_nc(Var s, Shape shape) {
  int64_t N, C, F;
  nc_dims(shape, N, C, F);
  if (s.val().ndim() != 2 || s.shape()[0] != N || s.shape()[1] != C)
    throw std::runtime_error("bcast_nc: bad shapes");
  Tensor out(shape);
  double* po = out.data();
  for (int64_t nc = 0; nc < N * C; ++nc) std::fill(po + nc * F, po + (nc + 1) * F, s.val()[nc]);
  return s.tape->make(std::move(out), {s.id},
                      [](Tape&, Var, Var g, std::vector<Var>& p) { p[0] = nc_sum(g); });
}

Var mul_channel(Var a, Var v) {
  check_same_tape("mul_channel", a, v);
  int64_t N, C, F;
  nc_dims(a.shape(), N, C, F);
  if (v.val().ndim() != 1 || v.shape()[0] != C) throw std::runtime_error("mul_channel: bad vector");
  Tensor out(a.shape());
  const double* pa = a.val().data();
  double* po = out.data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      double s = v.val()[c];
      for (int64_t j = 0; j < F; ++j) po[(n * C + c) * F + j] = pa[(n * C + c) * F + j] * s;
    }
  return a.tape->make(std::move(out), {a.id, v.id}, [a, v](Tape& t, Var, Var g, std::vector<Var>& p) {
    if (t.requires_grad(a.id)) p[0] = mul_channel(g, v);
    if (t.requires_grad(v.id)) p[1] = channel_sum(mul(g, a));
  });
}

Var add_channel(Var a, Var v) {
  check_same_tape("add_channel", a, v);
  int64_t N, C, F;
  nc_dims(a.shape(), N, C, F);
  if (v.val().ndim() != 1 || v.shape()[0] != C) throw std::runtime_error("add_channel: bad vector");
  Tensor out(a.shape());
  const double* pa = a.val().data();
  double* po = out.data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      double s = v.val()[c];
      for (int64_t j = 0; j < F; ++j) po[(n * C + c) * F + j] = pa[(n * C + c) * F + j] + s;
    }
  return a.tape->make(std::move(out), {a.id, v.id}, [](Tape&, Var, Var g, std::vector<Var>& p) {
    p[0] = g;
    p[1] = channel_sum(g);
  });
}

Var mul_nc(Var a, Var s) {
  check_same_tape("mul_nc", a, s);
  int64_t N, C, F;
  nc_dims(a.shape(), N, C, F);
  if (s.val().ndim() != 2 || s.shape()[0] != N || s.shape()[1] != C) throw std::runtime_error("mul_nc: bad scale");
  Tensor out(a.shape());
  const double* pa = a.val().data();
  double* po = out.data();
  for (int64_t nc = 0; nc < N * C; ++nc) {
    double v = s.val()[nc];
    for (int64_t j = 0; j < F; ++j) po[nc * F + j] = pa[nc * F + j] * v;
  }
  return a.tape->make(std::move(out), {a.id, s.id}, [a, s](Tape& t, Var, Var g, std::vector<Var>& p) {
    if (t.requires_grad(a.id)) p[0] = mul_nc(g, s);
    if (t.requires_grad(s.id)) p[1] = nc_sum(mul(g, a));
  });
}

Var add_nc(Var a, Var s) {
  check_same_tape("add_nc", a, s);
  int64_t N, C, F;
  nc_dims(a.shape(), N, C, F);
  if (s.val().ndim() != 2 || s.shape()[0] != N || s.shape()[1] != C) throw std::runtime_error("add_nc: bad shift");
  Tensor out(a.shape());
  const double* pa = a.val().data();
  double* po = out.data();
  for (int64_t nc = 0; nc < N * C; ++nc) {
    double v = s.val()[nc];
    for (int64_t j = 0; j < F; ++j) po[nc * F + j] = pa[nc * F + j] + v;
  }
  return a.tape->make(std::move(out), {a.id, s.id}, [](Tape&, Var, Var g, std::vector<Var>& p) {
    p[0] = g;
    p[1] = nc_sum(g);
  });
}

Var mul_samples(Var a, Var w) {
  check_same_tape("mul_samples", a, w);
  const Shape& s = a.shape();
  int64_t N = s[0], R = a.val().numel() / N;
  if (w.val().ndim() != 1 || w.shape()[0] != N) throw std::runtime_error("mul_samples: bad weights");
  Tensor out(s);
  const double* pa = a.val().data();
  double* po = out.data();
  for (int64_t n = 0; n < N; ++n) {
    double v = w.val()[n];
    for (int64_t j = 0; j < R; ++j) po[n * R + j] = pa[n * R + j] * v;
  }
  return a.tape->make(std::move(out), {a.id, w.id}, [a, w](Tape& t, Var, Var g, std::vector<Var>& p) {
    if (t.requires_grad(a.id)) p[0] = mul_samples(g, w);
    if (t.requires_grad(w.id)) p[1] = sum_samples(mul(g, a));
  });
}

Var mul_bscalar(Var a, Var s) {
  check_same_tape("mul_bscalar", a, s);
  if (s.val().numel() != 1) throw std::runtime_error("mul_bscalar: scale not scalar");
  double v = s.val()[0];
  return a.tape->make(ew1(a.val(), [v](double x) { return x * v; }), {a.id, s.id},
                      [a, s](Tape& t, Var, Var g, std::vector<Var>& p) {
                        if (t.requires_grad(a.id)) p[0] = mul_bscalar(g, s);
                        if (t.requires_grad(s.id)) p[1] = sum_all(mul(g, a));
                      });
}

Var div_bscalar(Var a, Var s) {
  check_same_tape("div_bscalar", a, s);
  if (s.val().numel() != 1) throw std::runtime_error("div_bscalar: divisor not scalar");
  double v = s.val()[0];
  return a.tape->make(ew1(a.val(), [v](double x) { return x / v; }), {a.id, s.id},
                      [a, s](Tape& t, Var self, Var g, std::vector<Var>& p) {
                        if (t.requires_grad(a.id)) p[0] = div_bscalar(g, s);
                        if (t.requires_grad(s.id)) p[1] = neg(div_(sum_all(mul(g, self)), s));
                      });
}

// ---------- softmax / indexing ----------

Var log_softmax(Var a) {
  const Tensor& A = a.val();
  if (A.ndim() != 2) throw std::runtime_error("log_softmax: expected {N,K}");
  int64_t N = A.dim(0), K = A.dim(1);
  Tensor out(A.shape());
  for (int64_t n = 0; n < N; ++n) {
    const double* row = A.data() + n * K;
    double m = row[0];
    for (int64_t k = 1; k < K; ++k) m = std::max(m, row[k]);
    double acc = 0;
    for (int64_t k = 0; k < K; ++k) acc += std::exp(row[k] - m);
    double lse = m + std::log(acc);
    for (int64_t k = 0; k < K; ++k) out[n * K + k] = row[k] - lse;
  }
  Shape shape = A.shape();
  return a.tape->make(std::move(out), {a.id}, [shape](Tape&, Var self, Var g, std::vector<Var>& p) {
    p[0] = sub(g, mul(exp_(self), bcast_samples(sum_samples(g), shape)));
  });
}

static Var scatter_rows(Var g, const std::vector<int>& idx, int64_t K);

Var select_rows(Var table, const std::vector<int>& idx) {
  const Tensor& T = table.val();
  if (T.ndim() != 2) throw std::runtime_error("select_rows: expected {K,C}");
  int64_t K = T.dim(0), C = T.dim(1), N = static_cast<int64_t>(idx.size());
  Tensor out({N, C});
  for (int64_t n = 0; n < N; ++n) {
    int r = idx[static_cast<size_t>(n)];
    if (r < 0 || r >= K) throw std::runtime_error("select_rows: index out of range");
    std::copy(T.data() + r * C, T.data() + (r + 1) * C, out.data() + n * C);
  }
  return table.tape->make(std::move(out), {table.id}, [idx, K](Tape&, Var, Var g, std::vector<Var>& p) {
    p[0] = scatter_rows(g, idx, K);
  });
}

static Var scatter_rows(Var g, const std::vector<int>& idx, int64_t K) {
  const Tensor& G = g.val();
  int64_t N = G.dim(0), C = G.dim(1);
  Tensor out({K, C});
  for (int64_t n = 0; n < N; ++n) {
    int r = idx[static_cast<size_t>(n)];
    for (int64_t c = 0; c < C; ++c) out[r * C + c] += G[n * C + c];
  }
  return g.tape->make(std::move(out), {g.id},
                      [idx](Tape&, Var, Var gg, std::vector<Var>& p) { p[0] = select_rows(gg, idx); });
}

static Var scatter_cols(Var g, const std::vector<int>& idx, int64_t K);

Var gather_cols(Var a, const std::vector<int>& idx) {
  const Tensor& A = a.val();
  if (A.ndim() != 2) throw std::runtime_error("gather_cols: expected {N,K}");
  int64_t N = A.dim(0), K = A.dim(1);
  if (static_cast<int64_t>(idx.size()) != N) throw std::runtime_error("gather_cols: index count != N");
  Tensor out({N});
  for (int64_t n = 0; n < N; ++n) {
    int c = idx[static_cast<size_t>(n)];
    if (c < 0 || c >= K) throw std::runtime_error("gather_cols: index out of range");
    out[n] = A[n * K + c];
  }
  return a.tape->make(std::move(out), {a.id}, [idx, K](Tape&, Var, Var g, std::vector<Var>& p) {
    p[0] = scatter_cols(g, idx, K);
  });
}

static Var scatter_cols(Var g, const std::vector<int>& idx, int64_t K) {
  const Tensor& G = g.val();
  int64_t N = G.dim(0);
  Tensor out({N, K});
  for (int64_t n = 0; n < N; ++n) out[n * K + idx[static_cast<size_t>(n)]] = G[n];
  return g.tape->make(std::move(out), {g.id},
                      [idx](Tape&, Var, Var gg, std::vector<Var>& p) { p[0] = gather_cols(gg, idx); });
}

// ---------- convolution ----------

static Var conv_node(Var x, Var w, std::array<int, 3> s, std::array<int, 3> p);
static Var data_node(Var gy, Var w, std::array<int, 3> s, std::array<int, 3> p, std::array<int64_t, 3> in_sz);
static Var gradw_node(Var x, Var gy, std::array<int, 3> s, std::array<int, 3> p, std::array<int64_t, 3> k);

static Var conv_node(Var x, Var w, std::array<int, 3> s, std::array<int, 3> p) {
  Tensor y = conv3d_fwd(x.val(), w.val(), s, p);
  std::array<int64_t, 3> in_sz{x.val().dim(2), x.val().dim(3), x.val().dim(4)};
  std::array<int64_t, 3> k{w.val().dim(2), w.val().dim(3), w.val().dim(4)};
  return x.tape->make(std::move(y), {x.id, w.id}, [x, w, s, p, in_sz, k](Tape& t, Var, Var g, std::vector<Var>& pa) {
    if (t.requires_grad(x.id)) pa[0] = data_node(g, w, s, p, in_sz);
    if (t.requires_grad(w.id)) pa[1] = gradw_node(x, g, s, p, k);
  });
}

static Var data_node(Var gy, Var w, std::array<int, 3> s, std::array<int, 3> p, std::array<int64_t, 3> in_sz) {
  Tensor gx = conv3d_bwd_data(gy.val(), w.val(), s, p, in_sz);
  std::array<int64_t, 3> k{w.val().dim(2), w.val().dim(3), w.val().dim(4)};
  return gy.tape->make(std::move(gx), {gy.id, w.id}, [gy, w, s, p, k](Tape& t, Var, Var g, std::vector<Var>& pa) {
    if (t.requires_grad(gy.id)) pa[0] = conv_node(g, w, s, p);
    if (t.requires_grad(w.id)) pa[1] = gradw_node(g, gy, s, p, k);
  });
}

static Var gradw_node(Var x, Var gy, std::array<int, 3> s, std::array<int, 3> p, std::array<int64_t, 3> k) {
  Tensor gw = conv3d_grad_w(x.val(), gy.val(), s, p, k);
  std::array<int64_t, 3> in_sz{x.val().dim(2), x.val().dim(3), x.val().dim(4)};
  return x.tape->make(std::move(gw), {x.id, gy.id}, [x, gy, s, p, in_sz](Tape& t, Var, Var g, std::vector<Var>& pa) {
    if (t.requires_grad(x.id)) pa[0] = data_node(gy, g, s, p, in_sz);
    if (t.requires_grad(gy.id)) pa[1] = conv_node(x, g, s, p);
  });
}

Var conv3d(Var x, Var w, std::array<int, 3> stride, std::array<int, 3> pad) {
  check_same_tape("conv3d", x, w);
  return conv_node(x, w, stride, pad);
}

void Adam::step(const std::vector<Param*>& params) {
  if (m_.empty()) {
    for (Param* p : params) {
      m_.emplace_back(p->value.shape());
      v_.emplace_back(p->value.shape());
    }
  }
  if (m_.size() != params.size()) throw std::runtime_error("adam: param list size changed");
  ++t_;
  double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (size_t i = 0; i < params.size(); ++i) {
    Param& p = *params[i];
    check_same_shape("adam", p.value, m_[i]);
    double* w = p.value.data();
    double* g = p.grad.data();
    double* m = m_[i].data();
    double* v = v_[i].data();
    for (int64_t j = 0; j < p.value.numel(); ++j) {
      m[j] = b1_ * m[j] + (1.0 - b1_) * g[j];
      v[j] = b2_ * v[j] + (1.0 - b2_) * g[j] * g[j];
      w[j] -= lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
    }
    p.zero_grad();
  }
}

std::vector<Tensor> Adam::state_tensors() const {
  std::vector<Tensor> out;
  for (size_t i = 0; i < m_.size(); ++i) {
    out.push_back(m_[i]);
    out.push_back(v_[i]);
  }
  return out;
}

void Adam::load_state(int64_t t, std::vector<Tensor> tensors) {
  if (tensors.size() % 2 != 0) throw std::runtime_error("adam: odd state tensor count");
  t_ = t;
  m_.clear();
  v_.clear();
  for (size_t i = 0; i < tensors.size(); i += 2) {
    m_.push_back(std::move(tensors[i]));
    v_.push_back(std::move(tensors[i + 1]));
  }
}

Var tconv3d(Var x, Var w, std::array<int, 3> stride, std::array<int, 3> pad) {
  check_same_tape("tconv3d", x, w);
  const Tensor& X = x.val();
  const Tensor& W = w.val();
  if (X.ndim() != 5 || W.ndim() != 5 || X.dim(1) != W.dim(0))
    throw std::runtime_error("tconv3d: bad shapes " + shape_str(X.shape()) + " x " + shape_str(W.shape()));
  std::array<int64_t, 3> out{};
  for (int i = 0; i < 3; ++i) {
    out[static_cast<size_t>(i)] =
        (X.dim(2 + i) - 1) * stride[static_cast<size_t>(i)] - 2 * pad[static_cast<size_t>(i)] + W.dim(2 + i);
    if (out[static_cast<size_t>(i)] < 1) throw std::runtime_error("tconv3d: output extent < 1");
  }
  return data_node(x, w, stride, pad, out);
}

}  // namespace arrowvid
