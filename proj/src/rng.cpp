#include "arrowvid/rng.hpp"

#include <cmath>

namespace arrowvid {

uint64_t mix64(uint64_t x) {
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ull;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebull;
  x ^= x >> 31;
  return x;
}

uint64_t key_from(std::initializer_list<uint64_t> parts) {
  uint64_t k = 0x243f6a8885a308d3ull;  // arbitrary non-zero base
  for (uint64_t p : parts) k = mix64(k + 0x9e3779b97f4a7c15ull * (p + 1));
  return k;
}

uint64_t RngStream::next_u64() {
  state_ += 0x9e3779b97f4a7c15ull;
  return mix64(state_);
}

double RngStream::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  // Box-Muller; u1 kept away from 0 so log stays finite.
  double u1 = 1.0 - uniform();
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double a = 2.0 * M_PI * u2;
  spare_ = r * std::sin(a);
  has_spare_ = true;
  return r * std::cos(a);
}

int64_t RngStream::uniform_int(int64_t n) {
  // Modulo bias is ~n/2^64, irrelevant at the n used here.
  return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
}

void RngStream::fill_normal(double* p, int64_t n) {
  for (int64_t i = 0; i < n; ++i) p[i] = normal();
}

void RngStream::fill_uniform(double* p, int64_t n, double lo, double hi) {
  for (int64_t i = 0; i < n; ++i) p[i] = lo + (hi - lo) * uniform();
}

std::vector<int> RngStream::permutation(int n) {
  std::vector<int> p(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) p[static_cast<size_t>(i)] = i;
  for (int i = n - 1; i > 0; --i) {
    int j = static_cast<int>(uniform_int(i + 1));
    std::swap(p[static_cast<size_t>(i)], p[static_cast<size_t>(j)]);
  }
  return p;
}

}  // namespace arrowvid
