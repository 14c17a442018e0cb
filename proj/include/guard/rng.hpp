#pragma once

#include <cstdint>
#include <vector>

#include "guard/tensor.hpp"

namespace guard {

// Counter-based generator: draw i of (seed, stream) is a pure hash of the
// triple, so sequences are reproducible on any platform and streams can be
// forked without sharing state.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t stream = 0) : seed_(seed), stream_(stream) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }
  std::uint64_t counter() const noexcept { return counter_; }

  // Independent child stream; does not advance this generator.
  Rng split(std::uint64_t id) const;

  std::uint64_t next_u64();
  double uniform();  // [0, 1)
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  std::size_t below(std::size_t n);  // [0, n)
  double sign() { return (next_u64() >> 63) ? 1.0 : -1.0; }

  Tensor uniform_tensor(Shape shape, double lo, double hi);
  Tensor normal_tensor(Shape shape, double mean = 0.0, double stddev = 1.0);
  std::vector<std::size_t> permutation(std::size_t n);
  // k distinct indices from [0, n), in draw order.
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
};

}  // namespace guard
