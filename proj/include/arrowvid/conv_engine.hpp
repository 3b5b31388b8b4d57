#pragma once
// Plain-tensor 3D convolution kernels: im2col + dgemm (OpenBLAS).
// The tape's conv ops are thin graph wrappers over these three, which form a
// closed set under differentiation (each one's partials are again members).

#include <array>

#include "arrowvid/tensor.hpp"

namespace arrowvid {

// out = (in + 2p - k)/s + 1 (floor); throws if any extent would be < 1.
std::array<int64_t, 3> conv3d_out_sizes(std::array<int64_t, 3> in, std::array<int64_t, 3> k,
                                        std::array<int, 3> s, std::array<int, 3> p);

// x {N,C,T,H,W}, w {O,C,kt,kh,kw} -> {N,O,To,Ho,Wo}
Tensor conv3d_fwd(const Tensor& x, const Tensor& w, std::array<int, 3> stride, std::array<int, 3> pad);
// gy {N,O,To,Ho,Wo}, w {O,C,...} -> {N,C,T,H,W}; also the transposed-conv forward.
Tensor conv3d_bwd_data(const Tensor& gy, const Tensor& w, std::array<int, 3> stride, std::array<int, 3> pad,
                       std::array<int64_t, 3> in_sizes);
// x {N,C,...}, gy {N,O,...} -> {O,C,kt,kh,kw}
Tensor conv3d_grad_w(const Tensor& x, const Tensor& gy, std::array<int, 3> stride, std::array<int, 3> pad,
                     std::array<int64_t, 3> ksizes);

}  // namespace arrowvid
