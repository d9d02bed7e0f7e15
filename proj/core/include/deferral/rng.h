// Copyright 2026 The Deferral Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef DEFERRAL_RNG_H_
#define DEFERRAL_RNG_H_

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace deferral {

// Seeded generator with distribution code written out by hand so that
// sequences are identical across standard library implementations
// (std::*_distribution output is implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t NextU64() { return engine_(); }
  // Uniform in [0, 1) with 53 random bits.
  double Uniform();
  double Uniform(double lo, double hi) { return lo + (hi - lo) * Uniform(); }
  // Standard normal via Box-Muller (caches the second variate).
  double Normal();
  // Uniform integer in [0, n), rejection sampled.
  std::uint64_t Below(std::uint64_t n);
  // Gamma(shape, 1) via Marsaglia-Tsang; used for Dirichlet draws.
  double Gamma(double shape);
  std::vector<double> Dirichlet(std::size_t k, double alpha);
  // Fisher-Yates permutation of 0..n-1.
  std::vector<std::size_t> Permutation(std::size_t n);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Derives an independent stream seed from a base seed and a label, so that
// e.g. the lr=0.05 run of seed 7 never shares a stream with the lr=0.1 run.
std::uint64_t DeriveSeed(std::uint64_t base, std::string_view label);

// 64-bit FNV-1a over raw bytes.
std::uint64_t Fnv1a64(const void* data, std::size_t size,
                      std::uint64_t basis = 0xcbf29ce484222325ULL);

}  // namespace deferral

#endif  // DEFERRAL_RNG_H_
