#pragma once
// Eager reverse-mode autodiff.
//
// Ops execute immediately (values live in tape nodes) and record a backward
// closure.  Backward closures build *new tape nodes* rather than raw tensors,
// so differentiating a gradient (as the Wasserstein gradient penalty needs)
// reuses the same machinery and stays exact for every op whose derivative is
// expressible in the op set — which is the design constraint on the op set.
//
// Shape conventions: batched video {N,C,T,H,W}, frames {N,C,H,W}, matrices
// {rows,cols}.  "channel" ops treat dim 1 as C and reduce/broadcast over all
// other dims; "samples" ops treat dim 0 the same way.

#include <array>
#include <cstdint>
#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "arrowvid/tensor.hpp"

namespace arrowvid {

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool defined() const { return tape != nullptr; }
  // References returned by val()/shape() stay valid for the tape's lifetime
  // (node storage is a deque, so appending ops never relocates them).
  const Tensor& val() const;
  const Shape& shape() const { return val().shape(); }
};

// A trainable tensor.  Lives in a module; the tape binds leaves to it and
// Tape::backward accumulates into grad.
struct Param {
  std::string name;
  Tensor value;
  Tensor grad;
  Param() = default;
  Param(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}
  void zero_grad() { grad = Tensor(value.shape()); }
};

class Tape {
 public:
  // Leaves.
  Var input(Tensor v, bool requires_grad = false);
  Var constant(Tensor v) { return input(std::move(v), false); }
  Var scalar(double v) { return constant(Tensor::scalar(v)); }
  // Bound parameter leaf; trainable=false enters the value as a constant
  // (used when the counterpart network is frozen during a step).
  Var leaf(Param& p, bool trainable = true);

  // Accumulates d(loss)/d(param) into every bound trainable Param's grad.
  // loss must be scalar-shaped ({1}).
  void backward(Var loss);

  // Adjoint graphs of `out` w.r.t. `wrt` (seeded with ones of out's shape).
  // Entries with no dependency come back as zero constants.  The returned
  // Vars are ordinary graph nodes: build more ops on them and call
  // backward() later for second-order gradients.
  std::vector<Var> grad_graph(Var out, const std::vector<Var>& wrt);

  int size() const { return static_cast<int>(nodes_.size()); }
  const Tensor& value_of(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<size_t>(id)].rg; }

  // --- internal node machinery (used by op implementations) ---
  using BackFn = std::function<void(Tape&, Var self, Var gout, std::vector<Var>& parent_adj)>;
  Var make(Tensor value, std::vector<int> parents, BackFn back);
  std::pair<BackFn, std::vector<int>> node_back(int id) const;

 private:
  struct Node {
    Tensor value;
    std::vector<int> parents;
    BackFn back;   // empty for leaves
    bool rg = false;
    Param* bound = nullptr;
    bool trainable = false;
  };
  std::deque<Node> nodes_;  // deque: growing the tape must not move live nodes
};

// ---- elementwise ----
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div_(Var a, Var b);
Var addc(Var a, double c);
Var mulc(Var a, double c);
Var neg(Var a);
Var exp_(Var a);
Var log_(Var a);
Var sqrt_(Var a);
Var recip(Var a);
Var abs_(Var a);
Var square(Var a);
Var tanh_(Var a);
Var sigmoid_(Var a);
Var softplus_(Var a);   // log(1+e^x), stable
Var relu_(Var a);
Var lrelu(Var a, double slope);
Var clamp_min(Var a, double c);

// ---- shape ----
Var reshape(Var a, Shape s);
Var permute(Var a, const std::vector<int>& perm);
Var flip(Var a, int dim);
Var rot90_hw(Var a, int k);  // counter-clockwise k*90° on the last two dims
Var narrow(Var a, int dim, int64_t start, int64_t len);
Var embed(Var a, int dim, int64_t start, int64_t full);  // zero-pad inverse of narrow
Var concat(const std::vector<Var>& xs, int dim);
// Per-sample frame reordering on {N,C,T,H,W}: out[n,:,t] = in[n,:,perm[n][t]].
Var permute_time(Var a, const std::vector<std::vector<int>>& perms);

// ---- linear algebra ----
Var matmul(Var a, Var b);     // {m,k}x{k,n}
Var transpose2d(Var a);

// ---- reductions & broadcasts ----
Var sum_all(Var a);                    // -> {1}
Var mean_all(Var a);                   // -> {1}
Var bfill(Var s, Shape shape);         // {1} -> shape
Var sum_samples(Var a);                // {N,...} -> {N}
Var mean_samples(Var a);               // {N,...} -> {N}
Var bcast_samples(Var s, Shape shape); // {N} -> {N,...}
Var channel_sum(Var a);                // {N,C,...} -> {C}
Var bcast_channel(Var s, Shape shape); // {C} -> {N,C,...}
Var nc_sum(Var a);                     // {N,C,...} -> {N,C}
Var bcast_nc(Var s, Shape shape);      // {N,C} -> {N,C,...}
Var mul_channel(Var a, Var v);         // x * v[c]
Var add_channel(Var a, Var v);         // x + v[c]
Var mul_nc(Var a, Var s);              // x * s[n,c]
Var add_nc(Var a, Var s);              // x + s[n,c]
Var mul_samples(Var a, Var w);         // x * w[n]
Var mul_bscalar(Var a, Var s);         // x * s, s shaped {1}
Var div_bscalar(Var a, Var s);

// ---- softmax / indexing ----
Var log_softmax(Var a);                             // {N,K}, over K
Var select_rows(Var table, const std::vector<int>& idx);  // {K,C},{N} -> {N,C}
Var gather_cols(Var a, const std::vector<int>& idx);      // {N,K},{N} -> {N}

// ---- convolution (3D core; 2D/1D are wrappers in the layer module) ----
// x {N,C,T,H,W}, w {O,C,kt,kh,kw} -> y {N,O,To,Ho,Wo}, o = (i+2p-k)/s + 1.
Var conv3d(Var x, Var w, std::array<int, 3> stride, std::array<int, 3> pad);
// Transposed conv: x {N,Ci,...}, w {Ci,Co,kt,kh,kw} -> o = (i-1)s - 2p + k.
Var tconv3d(Var x, Var w, std::array<int, 3> stride, std::array<int, 3> pad);

// Adam with bias correction.  Slot order follows the param list handed to
// step(), which must be stable across calls (and across save/load).
class Adam {
 public:
  Adam() = default;
  Adam(double lr, double beta1, double beta2, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(const std::vector<Param*>& params);  // applies grads, then zeroes them
  int64_t t() const { return t_; }

  // Serialization hooks: slots flattened in param order (m then v per param).
  std::vector<Tensor> state_tensors() const;
  void load_state(int64_t t, std::vector<Tensor> tensors);

 private:
  double lr_ = 2e-4, b1_ = 0.5, b2_ = 0.999, eps_ = 1e-8;
  int64_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

}  // namespace arrowvid
