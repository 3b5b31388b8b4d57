#include "arrowvid/conv_engine.hpp"

#include <cblas.h>

#include <cstring>
#include <stdexcept>
#include <vector>

namespace arrowvid {

std::array<int64_t, 3> conv3d_out_sizes(std::array<int64_t, 3> in, std::array<int64_t, 3> k,
                                        std::array<int, 3> s, std::array<int, 3> p) {
  std::array<int64_t, 3> out{};
  for (int i = 0; i < 3; ++i) {
    int64_t o = (in[i] + 2 * p[i] - k[i]) / s[i] + 1;
    if (in[i] + 2 * p[i] < k[i] || o < 1)
      throw std::runtime_error("conv3d: kernel does not fit input (in=" + std::to_string(in[i]) +
                               " k=" + std::to_string(k[i]) + " pad=" + std::to_string(p[i]) + ")");
    out[i] = o;
  }
  return out;
}

// Gather one sample into column layout: col[(c,kt,kh,kw), (to,ho,wo)].
static void im2col(const double* x, int64_t C, const std::array<int64_t, 3>& in,
                   const std::array<int64_t, 3>& k, const std::array<int, 3>& s,
                   const std::array<int, 3>& p, const std::array<int64_t, 3>& out, double* col) {
  const int64_t T = in[0], H = in[1], W = in[2];
  const int64_t To = out[0], Ho = out[1], Wo = out[2];
  const int64_t L = To * Ho * Wo;
  int64_t row = 0;
  for (int64_t c = 0; c < C; ++c)
    for (int64_t dt = 0; dt < k[0]; ++dt)
      for (int64_t dh = 0; dh < k[1]; ++dh)
        for (int64_t dw = 0; dw < k[2]; ++dw, ++row) {
          double* dst = col + row * L;
          for (int64_t to = 0; to < To; ++to) {
            int64_t t = to * s[0] + dt - p[0];
            if (t < 0 || t >= T) {
              std::memset(dst + to * Ho * Wo, 0, sizeof(double) * static_cast<size_t>(Ho * Wo));
              continue;
            }
            for (int64_t ho = 0; ho < Ho; ++ho) {
              int64_t h = ho * s[1] + dh - p[1];
              double* d2 = dst + (to * Ho + ho) * Wo;
              if (h < 0 || h >= H) {
                std::memset(d2, 0, sizeof(double) * static_cast<size_t>(Wo));
                continue;
              }
              const double* src = x + ((c * T + t) * H + h) * W;
              for (int64_t wo = 0; wo < Wo; ++wo) {
                int64_t ww = wo * s[2] + dw - p[2];
                d2[wo] = (ww < 0 || ww >= W) ? 0.0 : src[ww];
              }
            }
          }
        }
}

// Scatter-add column layout back into one sample.
static void col2im(const double* col, int64_t C, const std::array<int64_t, 3>& in,
                   const std::array<int64_t, 3>& k, const std::array<int, 3>& s,
                   const std::array<int, 3>& p, const std::array<int64_t, 3>& out, double* x) {
  const int64_t T = in[0], H = in[1], W = in[2];
  const int64_t To = out[0], Ho = out[1], Wo = out[2];
  const int64_t L = To * Ho * Wo;
  int64_t row = 0;
  for (int64_t c = 0; c < C; ++c)
    for (int64_t dt = 0; dt < k[0]; ++dt)
      for (int64_t dh = 0; dh < k[1]; ++dh)
        for (int64_t dw = 0; dw < k[2]; ++dw, ++row) {
          const double* src = col + row * L;
          for (int64_t to = 0; to < To; ++to) {
            int64_t t = to * s[0] + dt - p[0];
            if (t < 0 || t >= T) continue;
            for (int64_t ho = 0; ho < Ho; ++ho) {
              int64_t h = ho * s[1] + dh - p[1];
              if (h < 0 || h >= H) continue;
              const double* s2 = src + (to * Ho + ho) * Wo;
              double* dst = x + ((c * T + t) * H + h) * W;
              for (int64_t wo = 0; wo < Wo; ++wo) {
                int64_t ww = wo * s[2] + dw - p[2];
                if (ww >= 0 && ww < W) dst[ww] += s2[wo];
              }
            }
          }
        }
}

static std::vector<double>& scratch(size_t n) {
  thread_local std::vector<double> buf;
  if (buf.size() < n) buf.resize(n);
  return buf;
}

static void check_conv_args(const Tensor& x, const Tensor& w) {
  if (x.ndim() != 5 || w.ndim() != 5) throw std::runtime_error("conv3d: expected rank-5 input and weight");
}

Tensor conv3d_fwd(const Tensor& x, const Tensor& w, std::array<int, 3> stride, std::array<int, 3> pad) {
  check_conv_args(x, w);
  const int64_t N = x.dim(0), C = x.dim(1);
  if (w.dim(1) != C)
    throw std::runtime_error("conv3d: input channels " + std::to_string(C) + " vs weight " + std::to_string(w.dim(1)));
  const int64_t O = w.dim(0);
  std::array<int64_t, 3> in{x.dim(2), x.dim(3), x.dim(4)}, k{w.dim(2), w.dim(3), w.dim(4)};
  auto out = conv3d_out_sizes(in, k, stride, pad);
  const int64_t CK = C * k[0] * k[1] * k[2], L = out[0] * out[1] * out[2];
  Tensor y({N, O, out[0], out[1], out[2]});
  auto& col = scratch(static_cast<size_t>(CK * L));
  for (int64_t n = 0; n < N; ++n) {
    im2col(x.data() + n * C * in[0] * in[1] * in[2], C, in, k, stride, pad, out, col.data());
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(O), static_cast<int>(L),
                static_cast<int>(CK), 1.0, w.data(), static_cast<int>(CK), col.data(), static_cast<int>(L), 0.0,
                y.data() + n * O * L, static_cast<int>(L));
  }
  return y;
}

Tensor conv3d_bwd_data(const Tensor& gy, const Tensor& w, std::array<int, 3> stride, std::array<int, 3> pad,
                       std::array<int64_t, 3> in_sizes) {
  check_conv_args(gy, w);
  const int64_t N = gy.dim(0), O = gy.dim(1), C = w.dim(1);
  if (w.dim(0) != O)
    throw std::runtime_error("conv3d_bwd_data: channels " + std::to_string(O) + " vs weight " + std::to_string(w.dim(0)));
  std::array<int64_t, 3> k{w.dim(2), w.dim(3), w.dim(4)};
  auto out = conv3d_out_sizes(in_sizes, k, stride, pad);
  for (int i = 0; i < 3; ++i)
    if (out[i] != gy.dim(2 + i))
      throw std::runtime_error("conv3d_bwd_data: grad extent " + std::to_string(gy.dim(2 + i)) +
                               " inconsistent with input extent " + std::to_string(in_sizes[i]));
  const int64_t CK = C * k[0] * k[1] * k[2], L = out[0] * out[1] * out[2];
  Tensor gx({N, C, in_sizes[0], in_sizes[1], in_sizes[2]});
  auto& col = scratch(static_cast<size_t>(CK * L));
  for (int64_t n = 0; n < N; ++n) {
    cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, static_cast<int>(CK), static_cast<int>(L),
                static_cast<int>(O), 1.0, w.data(), static_cast<int>(CK), gy.data() + n * O * L,
                static_cast<int>(L), 0.0, col.data(), static_cast<int>(L));
    col2im(col.data(), C, in_sizes, k, stride, pad, out, gx.data() + n * C * in_sizes[0] * in_sizes[1] * in_sizes[2]);
  }
  return gx;
}

Tensor conv3d_grad_w(const Tensor& x, const Tensor& gy, std::array<int, 3> stride, std::array<int, 3> pad,
                     std::array<int64_t, 3> ksizes) {
  check_conv_args(x, gy);
  const int64_t N = x.dim(0), C = x.dim(1), O = gy.dim(1);
  if (gy.dim(0) != N) throw std::runtime_error("conv3d_grad_w: batch mismatch");
  std::array<int64_t, 3> in{x.dim(2), x.dim(3), x.dim(4)};
  auto out = conv3d_out_sizes(in, ksizes, stride, pad);
  for (int i = 0; i < 3; ++i)
    if (out[i] != gy.dim(2 + i)) throw std::runtime_error("conv3d_grad_w: grad extent mismatch");
  const int64_t CK = C * ksizes[0] * ksizes[1] * ksizes[2], L = out[0] * out[1] * out[2];
  Tensor gw({O, C, ksizes[0], ksizes[1], ksizes[2]});
  auto& col = scratch(static_cast<size_t>(CK * L));
  for (int64_t n = 0; n < N; ++n) {
    im2col(x.data() + n * C * in[0] * in[1] * in[2], C, in, ksizes, stride, pad, out, col.data());
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, static_cast<int>(O), static_cast<int>(CK),
                static_cast<int>(L), 1.0, gy.data() + n * O * L, static_cast<int>(L), col.data(),
                static_cast<int>(L), 1.0, gw.data(), static_cast<int>(CK));
  }
  return gw;
}

}  // namespace arrowvid
