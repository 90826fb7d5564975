#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "hybridlm/tensor.hpp"

namespace hybridlm {

// splitmix64; used to derive independent sub-seeds from one master seed.
inline uint64_t mix_seed(uint64_t seed, uint64_t salt) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline uint64_t mix_seed(uint64_t seed, std::string_view tag) {
  uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a over the tag
  for (char c : tag) {
    h ^= static_cast<uint8_t>(c);
    h *= 0x100000001b3ULL;
  }
  return mix_seed(seed, h);
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  std::mt19937_64& engine() { return engine_; }

  double normal(double mean = 0.0, double stddev = 1.0) {
    std::normal_distribution<double> d(mean, stddev);
    return d(engine_);
  }
  double uniform(double lo = 0.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    return d(engine_);
  }
  int64_t uniform_int(int64_t lo, int64_t hi) {  // inclusive range
    std::uniform_int_distribution<int64_t> d(lo, hi);
    return d(engine_);
  }

  template <class T>
  TensorT<T> normal_tensor(Shape shape, double stddev) {
    TensorT<T> t = TensorT<T>::zeros(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = static_cast<T>(normal(0.0, stddev));
    return t;
  }
  template <class T>
  TensorT<T> uniform_tensor(Shape shape, double lo, double hi) {
    TensorT<T> t = TensorT<T>::zeros(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = static_cast<T>(uniform(lo, hi));
    return t;
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace hybridlm
