#include <doctest.h>

#include <cmath>
#include <functional>

#include "arrowvid/conv_engine.hpp"
#include "arrowvid/rng.hpp"
#include "arrowvid/tape.hpp"

using namespace arrowvid;

namespace {

Tensor randn(Shape s, uint64_t k) {
  Tensor t(std::move(s));
  RngStream r({STREAM_TEST, 1000, k});
  r.fill_normal(t);
  return t;
}

// Scalar function of several tensors, built on a fresh tape per call.
using ScalarFn = std::function<Var(Tape&, std::vector<Var>&)>;

double eval_fn(const ScalarFn& f, const std::vector<Tensor>& xs) {
  Tape t;
  std::vector<Var> vs;
  for (const auto& x : xs) vs.push_back(t.input(x, true));
  Var loss = f(t, vs);
  REQUIRE(loss.val().numel() == 1);
  return loss.val()[0];
}

// Max relative error between tape gradients and central differences.
double fd_max_err(const ScalarFn& f, std::vector<Tensor> xs, double h = 1e-5) {
  Tape t;
  std::vector<Var> vs;
  for (const auto& x : xs) vs.push_back(t.input(x, true));
  Var loss = f(t, vs);
  auto grads = t.grad_graph(loss, vs);
  double worst = 0;
  for (size_t i = 0; i < xs.size(); ++i) {
    for (int64_t j = 0; j < xs[i].numel(); ++j) {
      double keep = xs[i][j];
      xs[i][j] = keep + h;
      double up = eval_fn(f, xs);
      xs[i][j] = keep - h;
      double dn = eval_fn(f, xs);
      xs[i][j] = keep;
      double fd = (up - dn) / (2 * h);
      double an = grads[i].val()[j];
      double err = std::fabs(an - fd);
      if (err > 1e-10) worst = std::max(worst, err / std::max({std::fabs(an), std::fabs(fd), 1e-8}));
    }
  }
  return worst;
}

// Weighted sum against a fixed random tensor makes every output coordinate
// matter in the scalar loss.
Var pin(Tape& t, Var y, uint64_t k) {
  return sum_all(mul(y, t.constant(randn(y.shape(), 500 + k))));
}

}  // namespace

TEST_SUITE("tape") {

TEST_CASE("values: basic ops") {
  Tape t;
  Var a = t.input(Tensor({2}, {1.0, 2.0}));
  Var b = t.input(Tensor({2}, {3.0, 5.0}));
  CHECK(add(a, b).val()[1] == 7.0);
  CHECK(sub(a, b).val()[0] == -2.0);
  CHECK(mul(a, b).val()[1] == 10.0);
  CHECK(div_(b, a).val()[1] == 2.5);
  CHECK(addc(a, 1.5).val()[0] == 2.5);
  CHECK(mulc(a, -2.0).val()[1] == -4.0);
  CHECK(sigmoid_(t.input(Tensor::scalar(0.0))).val()[0] == 0.5);
  CHECK(softplus_(t.input(Tensor::scalar(0.0))).val()[0] == doctest::Approx(std::log(2.0)));
  CHECK(relu_(t.input(Tensor::scalar(-3.0))).val()[0] == 0.0);
  CHECK(lrelu(t.input(Tensor::scalar(-3.0)), 0.2).val()[0] == doctest::Approx(-0.6));
  CHECK(clamp_min(t.input(Tensor::scalar(1e-30)), 1e-12).val()[0] == 1e-12);
}

TEST_CASE("softplus is stable at extremes") {
  Tape t;
  Var big = softplus_(t.input(Tensor::scalar(800.0)));
  Var small = softplus_(t.input(Tensor::scalar(-800.0)));
  CHECK(big.val()[0] == doctest::Approx(800.0));
  CHECK(small.val()[0] == 0.0);
  CHECK(std::isfinite(big.val()[0]));
}

TEST_CASE("gradients: elementwise") {
  auto mk = [](auto op) {
    return [op](Tape& t, std::vector<Var>& v) { return pin(t, op(t, v), 1); };
  };
  std::vector<Tensor> one = {randn({3, 4}, 1)};
  CHECK(fd_max_err(mk([](Tape&, std::vector<Var>& v) { return tanh_(v[0]); }), one) < 1e-6);
  CHECK(fd_max_err(mk([](Tape&, std::vector<Var>& v) { return sigmoid_(v[0]); }), one) < 1e-6);
  CHECK(fd_max_err(mk([](Tape&, std::vector<Var>& v) { return softplus_(v[0]); }), one) < 1e-6);
  CHECK(fd_max_err(mk([](Tape&, std::vector<Var>& v) { return exp_(v[0]); }), one) < 1e-6);
  CHECK(fd_max_err(mk([](Tape&, std::vector<Var>& v) { return square(v[0]); }), one) < 1e-6);
  // keep away from the kinks / singularities
  Tensor pos = randn({3, 4}, 2);
  for (int64_t i = 0; i < pos.numel(); ++i) pos[i] = 1.0 + std::fabs(pos[i]);
  std::vector<Tensor> posv = {pos};
  CHECK(fd_max_err(mk([](Tape&, std::vector<Var>& v) { return log_(v[0]); }), posv) < 1e-6);
  CHECK(fd_max_err(mk([](Tape&, std::vector<Var>& v) { return sqrt_(v[0]); }), posv) < 1e-6);
  CHECK(fd_max_err(mk([](Tape&, std::vector<Var>& v) { return recip(v[0]); }), posv) < 1e-6);
  CHECK(fd_max_err(mk([](Tape&, std::vector<Var>& v) { return abs_(v[0]); }), posv) < 1e-6);
  CHECK(fd_max_err(mk([](Tape&, std::vector<Var>& v) { return relu_(v[0]); }), posv) < 1e-6);
  CHECK(fd_max_err(mk([](Tape&, std::vector<Var>& v) { return lrelu(v[0], 0.2); }), posv) < 1e-6);
  std::vector<Tensor> two = {randn({3, 4}, 3), randn({3, 4}, 4)};
  for (int64_t i = 0; i < two[1].numel(); ++i) two[1][i] = 1.0 + std::fabs(two[1][i]);
  CHECK(fd_max_err([](Tape& t, std::vector<Var>& v) { return pin(t, mul(v[0], v[1]), 2); }, two) < 1e-6);
  CHECK(fd_max_err([](Tape& t, std::vector<Var>& v) { return pin(t, div_(v[0], v[1]), 3); }, two) < 1e-6);
}

TEST_CASE("gradients: shape ops") {
  std::vector<Tensor> x5 = {randn({2, 3, 4, 3, 2}, 5)};
  CHECK(fd_max_err([](Tape& t, std::vector<Var>& v) { return pin(t, permute(v[0], {2, 0, 4, 1, 3}), 4); }, x5) < 1e-6);
  CHECK(fd_max_err([](Tape& t, std::vector<Var>& v) { return pin(t, flip(v[0], 2), 5); }, x5) < 1e-6);
  CHECK(fd_max_err([](Tape& t, std::vector<Var>& v) { return pin(t, rot90_hw(v[0], 1), 6); }, x5) < 1e-6);
  CHECK(fd_max_err([](Tape& t, std::vector<Var>& v) { return pin(t, rot90_hw(v[0], 3), 7); }, x5) < 1e-6);
  CHECK(fd_max_err([](Tape& t, std::vector<Var>& v) { return pin(t, narrow(v[0], 2, 1, 2), 8); }, x5) < 1e-6);
  CHECK(fd_max_err([](Tape& t, std::vector<Var>& v) { return pin(t, embed(v[0], 1, 2, 7), 9); }, x5) < 1e-6);
  CHECK(fd_max_err([](Tape& t, std::vector<Var>& v) { return pin(t, reshape(v[0], {6, 24}), 10); }, x5) < 1e-6);
  std::vector<Tensor> pair = {randn({2, 2, 3}, 6), randn({2, 5, 3}, 7)};
  CHECK(fd_max_err([](Tape& t, std::vector<Var>& v) { return pin(t, concat({v[0], v[1]}, 1), 11); }, pair) < 1e-6);
  std::vector<std::vector<int>> perms = {{2, 0, 3, 1}, {1, 3, 0, 2}};
  std::vector<Tensor> vid = {randn({2, 3, 4, 2, 2}, 8)};
  CHECK(fd_max_err([&](Tape& t, std::vector<Var>& v) { return pin(t, permute_time(v[0], perms), 12); }, vid) < 1e-6);
}

TEST_CASE("rot90 value convention") {
  // One counter-clockwise turn of [[a,b],[c,d]] gives [[b,d],[a,c]].
  Tape t;
  Var x = t.input(Tensor({2, 2}, {1.0, 2.0, 3.0, 4.0}));
  Tensor r = rot90_hw(x, 1).val();
  CHECK(r[0] == 2.0);
  CHECK(r[1] == 4.0);
  CHECK(r[2] == 1.0);
  CHECK(r[3] == 3.0);
  Tensor r4 = rot90_hw(rot90_hw(x, 2), 2).val();
  for (int i = 0; i < 4; ++i) CHECK(r4[i] == x.val()[i]);
}

TEST_CASE("gradients: reductions and broadcasts") {
  std::vector<Tensor> x = {randn({3, 4, 2, 2}, 9)};
  CHECK(fd_max_err([](Tape& t, std::vector<Var>& v) { return sum_all(v[0]); }, x) < 1e-6);
  CHECK(fd_max_err([](Tape& t, std::vector<Var>& v) { return mean_all(square(v[0])); }, x) < 1e-6);
  CHECK(fd_max_err([](Tape& t, std::vector<Var>& v) { return pin(t, sum_samples(v[0]), 13); }, x) < 1e-6);
  CHECK(fd_max_err([](Tape& t, std::vector<Var>& v) { return pin(t, channel_sum(v[0]), 14); }, x) < 1e-6);
  CHECK(fd_max_err([](Tape& t, std::vector<Var>& v) { return pin(t, nc_sum(v[0]), 15); }, x) < 1e-6);
  std::vector<Tensor> sc = {randn({1}, 10)};
  CHECK(fd_max_err([](Tape& t, std::vector<Var>& v) { return pin(t, bfill(v[0], {2, 3}), 16); }, sc) < 1e-6);
  std::vector<Tensor> nv = {randn({3}, 11)};
  CHECK(fd_max_err([](Tape& t, std::vector<Var>& v) { return pin(t, bcast_samples(v[0], {3, 2, 2}), 17); }, nv) < 1e-6);
  CHECK(fd_max_err([](Tape& t, std::vector<Var>& v) { return pin(t, bcast_channel(v[0], {2, 3, 2}), 18); }, nv) < 1e-6);
  std::vector<Tensor> xc = {randn({2, 3, 2, 2}, 12), randn({3}, 13)};
  CHECK(fd_max_err([](Tape& t, std::vector<Var>& v) { return pin(t, mul_channel(v[0], v[1]), 19); }, xc) < 1e-6);
  CHECK(fd_max_err([](Tape& t, std::vector<Var>& v) { return pin(t, add_channel(v[0], v[1]), 20); }, xc) < 1e-6);
  std::vector<Tensor> xnc = {randn({2, 3, 2, 2}, 14), randn({2, 3}, 15)};
  CHECK(fd_max_err([](Tape& t, std::vector<Var>& v) { return pin(t, mul_nc(v[0], v[1]), 21); }, xnc) < 1e-6);
  CHECK(fd_max_err([](Tape& t, std::vector<Var>& v) { return pin(t, add_nc(v[0], v[1]), 22); }, xnc) < 1e-6);
  CHECK(fd_max_err([](Tape& t, std::vector<Var>& v) { return pin(t, bcast_nc(v[1], {2, 3, 2, 2}), 23); }, xnc) < 1e-6);
  std::vector<Tensor> xs = {randn({3, 4}, 16), randn({3}, 17)};
  CHECK(fd_max_err([](Tape& t, std::vector<Var>& v) { return pin(t, mul_samples(v[0], v[1]), 24); }, xs) < 1e-6);
  std::vector<Tensor> xb = {randn({3, 4}, 18), randn({1}, 19)};
  for (int64_t i = 0; i < 1; ++i) xb[1][i] = 2.0 + std::fabs(xb[1][i]);
  CHECK(fd_max_err([](Tape& t, std::vector<Var>& v) { return pin(t, mul_bscalar(v[0], v[1]), 25); }, xb) < 1e-6);
  CHECK(fd_max_err([](Tape& t, std::vector<Var>& v) { return pin(t, div_bscalar(v[0], v[1]), 26); }, xb) < 1e-6);
}

TEST_CASE("gradients: matmul and softmax and indexing") {
  std::vector<Tensor> ab = {randn({3, 4}, 20), randn({4, 2}, 21)};
  CHECK(fd_max_err([](Tape& t, std::vector<Var>& v) { return pin(t, matmul(v[0], v[1]), 27); }, ab) < 1e-6);
  CHECK(fd_max_err([](Tape& t, std::vector<Var>& v) { return pin(t, transpose2d(v[0]), 28); }, ab) < 1e-6);
  std::vector<Tensor> lg = {randn({4, 5}, 22)};
  CHECK(fd_max_err([](Tape& t, std::vector<Var>& v) { return pin(t, log_softmax(v[0]), 29); }, lg) < 1e-6);
  std::vector<int> rows = {2, 0, 1, 2};
  CHECK(fd_max_err([&](Tape& t, std::vector<Var>& v) {
          Var tbl = reshape(v[0], {4, 5});
          return pin(t, select_rows(tbl, rows), 30);
        }, lg) < 1e-6);
  std::vector<int> cols = {1, 4, 0, 3};
  CHECK(fd_max_err([&](Tape& t, std::vector<Var>& v) { return pin(t, gather_cols(v[0], cols), 31); }, lg) < 1e-6);
}

TEST_CASE("log_softmax rows are normalized") {
  Tape t;
  Var x = t.input(randn({3, 7}, 23));
  Tensor ls = log_softmax(x).val();
  for (int64_t n = 0; n < 3; ++n) {
    double s = 0;
    for (int64_t k = 0; k < 7; ++k) s += std::exp(ls[n * 7 + k]);
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
}

// Independent dense reference for the conv engine.
static Tensor conv3d_naive(const Tensor& x, const Tensor& w, std::array<int, 3> s, std::array<int, 3> p) {
  auto out = conv3d_out_sizes({x.dim(2), x.dim(3), x.dim(4)}, {w.dim(2), w.dim(3), w.dim(4)}, s, p);
  int64_t N = x.dim(0), C = x.dim(1), O = w.dim(0);
  Tensor y({N, O, out[0], out[1], out[2]});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t o = 0; o < O; ++o)
      for (int64_t to = 0; to < out[0]; ++to)
        for (int64_t ho = 0; ho < out[1]; ++ho)
          for (int64_t wo = 0; wo < out[2]; ++wo) {
            double acc = 0;
            for (int64_t c = 0; c < C; ++c)
              for (int64_t dt = 0; dt < w.dim(2); ++dt)
                for (int64_t dh = 0; dh < w.dim(3); ++dh)
                  for (int64_t dw = 0; dw < w.dim(4); ++dw) {
                    int64_t t = to * s[0] + dt - p[0], h = ho * s[1] + dh - p[1], ww = wo * s[2] + dw - p[2];
                    if (t < 0 || t >= x.dim(2) || h < 0 || h >= x.dim(3) || ww < 0 || ww >= x.dim(4)) continue;
                    acc += x.at({n, c, t, h, ww}) * w.at({o, c, dt, dh, dw});
                  }
            y.at({n, o, to, ho, wo}) = acc;
          }
  return y;
}

TEST_CASE("conv3d forward matches dense reference") {
  struct Case {
    Shape x, w;
    std::array<int, 3> s, p;
  };
  std::vector<Case> cases = {
      {{2, 3, 6, 8, 8}, {4, 3, 4, 4, 4}, {2, 2, 2}, {1, 1, 1}},
      {{1, 2, 7, 9, 9}, {3, 2, 4, 4, 4}, {1, 2, 2}, {0, 1, 1}},
      {{2, 1, 5, 5, 5}, {2, 1, 3, 3, 3}, {1, 1, 1}, {0, 0, 0}},
      {{1, 2, 4, 6, 5}, {2, 2, 1, 3, 2}, {1, 2, 1}, {0, 1, 0}},
  };
  uint64_t k = 40;
  for (const auto& c : cases) {
    Tensor x = randn(c.x, k++), w = randn(c.w, k++);
    Tensor fast = conv3d_fwd(x, w, c.s, c.p);
    Tensor slow = conv3d_naive(x, w, c.s, c.p);
    REQUIRE(fast.same_shape(slow));
    double worst = 0;
    for (int64_t i = 0; i < fast.numel(); ++i) worst = std::max(worst, std::fabs(fast[i] - slow[i]));
    CHECK(worst < 1e-10);
  }
}

TEST_CASE("conv3d rejects kernels that do not fit") {
  Tensor x = randn({1, 1, 2, 2, 2}, 50), w = randn({1, 1, 4, 4, 4}, 51);
  CHECK_THROWS(conv3d_fwd(x, w, {1, 1, 1}, {0, 0, 0}));
  Tape t;
  CHECK_THROWS(conv3d(t.input(x), t.input(randn({1, 2, 1, 1, 1}, 52)), {1, 1, 1}, {0, 0, 0}));
}

TEST_CASE("gradients: conv3d and tconv3d") {
  std::vector<Tensor> xw = {randn({2, 2, 4, 5, 5}, 60), randn({3, 2, 2, 3, 3}, 61)};
  CHECK(fd_max_err([](Tape& t, std::vector<Var>& v) {
          return pin(t, conv3d(v[0], v[1], {2, 2, 2}, {1, 1, 1}), 32);
        }, xw, 1e-4) < 1e-5);
  CHECK(fd_max_err([](Tape& t, std::vector<Var>& v) {
          return pin(t, conv3d(v[0], v[1], {1, 2, 2}, {0, 1, 1}), 33);
        }, xw, 1e-4) < 1e-5);
  std::vector<Tensor> tw = {randn({2, 3, 2, 3, 3}, 62), randn({3, 2, 2, 4, 4}, 63)};
  CHECK(fd_max_err([](Tape& t, std::vector<Var>& v) {
          return pin(t, tconv3d(v[0], v[1], {2, 2, 2}, {1, 1, 1}), 34);
        }, tw, 1e-4) < 1e-5);
}

TEST_CASE("composed batchnorm expression differentiates cleanly") {
  // Normalize over (N,spatial) per channel, scale/shift — the layer module
  // builds exactly this graph, so the kink-free path is what matters here.
  auto bn = [](Tape& t, std::vector<Var>& v) {
    Var x = v[0], gamma = v[1], beta = v[2];
    int64_t cnt = x.val().numel() / x.shape()[1];
    Var mu = mulc(channel_sum(x), 1.0 / static_cast<double>(cnt));
    Var xc = sub(x, bcast_channel(mu, x.shape()));
    Var var = mulc(channel_sum(square(xc)), 1.0 / static_cast<double>(cnt));
    Var istd = recip(sqrt_(addc(var, 1e-5)));
    Var xh = mul_channel(xc, istd);
    return pin(t, add_channel(mul_channel(xh, gamma), beta), 35);
  };
  std::vector<Tensor> v = {randn({3, 2, 2, 2}, 70), randn({2}, 71), randn({2}, 72)};
  CHECK(fd_max_err(bn, v, 1e-5) < 1e-5);
}

TEST_CASE("second-order: gradient of a gradient norm") {
  // pen(w) = || d/dx sum(conv(x,w)) ||^2 with x held fixed — the gradient
  // penalty pattern.  Checked against finite differences of pen itself.
  Tensor x0 = randn({2, 2, 3, 4, 4}, 80);
  auto pen = [&x0](Tape& t, std::vector<Var>& v) {
    Var x = t.input(x0, true);
    Var y = conv3d(x, v[0], {1, 2, 2}, {1, 1, 1});
    Var s = sum_all(tanh_(y));
    Var g = t.grad_graph(s, {x})[0];
    return sum_all(square(g));
  };
  std::vector<Tensor> w = {randn({2, 2, 3, 3, 3}, 81)};
  CHECK(fd_max_err(pen, w, 1e-4) < 1e-4);
}

TEST_CASE("second-order: interpolated-input norm penalty end to end") {
  Tensor xr = randn({2, 1, 2, 4, 4}, 82), xf = randn({2, 1, 2, 4, 4}, 83);
  auto pen = [&](Tape& t, std::vector<Var>& v) {
    Tensor mixv(xr.shape());
    for (int64_t i = 0; i < mixv.numel(); ++i) mixv[i] = 0.3 * xr[i] + 0.7 * xf[i];
    Var xhat = t.input(mixv, true);
    Var y = conv3d(xhat, v[0], {1, 2, 2}, {0, 1, 1});
    Var score = sum_samples(y);
    Var g = t.grad_graph(sum_all(score), {xhat})[0];
    Var norms = sqrt_(addc(sum_samples(square(g)), 1e-12));
    return mean_all(square(addc(norms, -1.0)));
  };
  std::vector<Tensor> w = {randn({3, 1, 2, 3, 3}, 84)};
  CHECK(fd_max_err(pen, w, 1e-4) < 1e-4);
}

TEST_CASE("backward accumulates into bound params, frozen leaves stay out") {
  Param p("w", Tensor({2}, {1.0, 2.0}));
  Param q("c", Tensor({2}, {3.0, 4.0}));
  Tape t;
  Var wp = t.leaf(p, true);
  Var wq = t.leaf(q, false);
  Var loss = sum_all(mul(wp, wq));
  t.backward(loss);
  CHECK(p.grad[0] == 3.0);
  CHECK(p.grad[1] == 4.0);
  CHECK(q.grad[0] == 0.0);
  // second backward accumulates
  t.backward(loss);
  CHECK(p.grad[0] == 6.0);
}

TEST_CASE("same param bound twice sums both paths") {
  Param p("w", Tensor({1}, {2.0}));
  Tape t;
  Var a = t.leaf(p, true);
  Var b = t.leaf(p, true);
  Var loss = add(sum_all(square(a)), sum_all(mulc(b, 3.0)));  // d/dp = 2p + 3 = 7
  t.backward(loss);
  CHECK(p.grad[0] == doctest::Approx(7.0));
}

TEST_CASE("adam matches a hand-rolled reference step") {
  Param p("w", Tensor({2}, {1.0, -2.0}));
  p.grad = Tensor({2}, {0.5, -1.5});
  Adam opt(0.1, 0.9, 0.99);
  opt.step({&p});
  for (int j = 0; j < 2; ++j) {
    double g = (j == 0) ? 0.5 : -1.5;
    double m = 0.1 * g, v = 0.01 * g * g;
    double mh = m / (1 - 0.9), vh = v / (1 - 0.99);
    double expect = ((j == 0) ? 1.0 : -2.0) - 0.1 * mh / (std::sqrt(vh) + 1e-8);
    CHECK(p.value[j] == doctest::Approx(expect).epsilon(1e-12));
  }
  CHECK(p.grad[0] == 0.0);  // step zeroes grads
}

TEST_CASE("adam state round-trips") {
  Param p("w", Tensor({3}, {1.0, 2.0, 3.0}));
  Adam a(0.01, 0.5, 0.999), b(0.01, 0.5, 0.999);
  for (int i = 0; i < 3; ++i) {
    p.grad = Tensor({3}, {0.1 * (i + 1), -0.2, 0.3});
    a.step({&p});
  }
  Tensor snap = p.value;
  b.load_state(a.t(), a.state_tensors());
  p.grad = Tensor({3}, {0.7, 0.8, 0.9});
  a.step({&p});
  Tensor after_a = p.value;
  p.value = snap;
  p.grad = Tensor({3}, {0.7, 0.8, 0.9});
  b.step({&p});
  for (int j = 0; j < 3; ++j) CHECK(p.value[j] == after_a[j]);
}

}  // TEST_SUITE
