#pragma once
// Deterministic keyed RNG streams.
//
// Every random consumer (param init, latent draws, layer noise, data order,
// window offsets, task transforms, synth scenes) derives its own stream from
// a tuple key: (master seed, purpose, step/epoch, pass, index...).  Streams
// are stateless across steps — resuming at step k replays the same draws as
// an uninterrupted run, and disabling one consumer never shifts another's
// sequence.  splitmix64 under the hood, Box-Muller for normals.

#include <cstdint>
#include <initializer_list>
#include <vector>

#include "arrowvid/tensor.hpp"

namespace arrowvid {

uint64_t mix64(uint64_t x);                                // avalanche finalizer
uint64_t key_from(std::initializer_list<uint64_t> parts);  // order-sensitive combine

// Stream purposes.  Values are part of the checkpoint compatibility surface:
// renumbering them changes every derived random sequence.
enum : uint64_t {
  STREAM_PARAM_INIT = 1,
  STREAM_LATENT = 2,
  STREAM_LAYER_NOISE = 3,
  STREAM_DATA_ORDER = 4,
  STREAM_DATA_WINDOW = 5,
  STREAM_TASK = 6,
  STREAM_SYNTH = 7,
  STREAM_EVAL = 8,
  STREAM_TEST = 100,
};

// Forward/generator pass ids, part of layer-noise stream keys so the same
// layer draws fresh noise on every distinct pass within a step.
enum : uint64_t {
  PASS_D_REAL_FWD = 1,
  PASS_D_REAL_BWD = 2,
  PASS_D_FAKE_FWD = 3,
  PASS_D_FAKE_BWD = 4,
  PASS_D_GEN = 5,       // G forward inside the D step
  PASS_G_GEN = 6,       // G forward inside the G step
  PASS_G_FAKE_FWD = 7,  // D passes inside the G step
  PASS_G_FAKE_BWD = 8,
  PASS_G_GEN2 = 9,      // second latent for the diversity term
  PASS_G_FAKE2 = 10,
  PASS_D_FRAME = 11,
  PASS_G_FRAME = 12,
  PASS_EVAL = 13,
};

class RngStream {
 public:
  explicit RngStream(uint64_t key) : state_(mix64(key ^ 0x6a09e667f3bcc909ull)) {}
  explicit RngStream(std::initializer_list<uint64_t> parts) : RngStream(key_from(parts)) {}

  uint64_t next_u64();
  double uniform();                 // [0,1)
  double normal();                  // N(0,1)
  int64_t uniform_int(int64_t n);   // [0,n)
  void fill_normal(double* p, int64_t n);
  void fill_normal(Tensor& t) { fill_normal(t.data(), t.numel()); }
  void fill_uniform(double* p, int64_t n, double lo, double hi);
  std::vector<int> permutation(int n);  // Fisher-Yates

 private:
  uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace arrowvid
