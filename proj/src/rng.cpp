#include "guard/rng.hpp"

#include <cmath>
#include <numbers>
#include <numeric>

#include "guard/errors.hpp"

namespace guard {

namespace {

std::uint64_t mix(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

Rng Rng::split(std::uint64_t id) const {
  return Rng(seed_, mix(stream_ ^ mix(id + 0x632be59bd9b4e019ULL)));
}

std::uint64_t Rng::next_u64() {
  std::uint64_t key = mix(seed_ ^ mix(stream_));
  return mix(key ^ mix(counter_++ * 0xd1b54a32d192ed03ULL));
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::normal() {
  // Box-Muller, one value per pair of draws.
  double u1 = 1.0 - uniform();
  double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::size_t Rng::below(std::size_t n) {
  if (n == 0) throw Error("Rng::below(0)");
  // Lemire-style rejection to avoid modulo bias.
  std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return static_cast<std::size_t>(x % n);
}

Tensor Rng::uniform_tensor(Shape shape, double lo, double hi) {
  Buffer b(shape_numel(shape));
  for (auto& v : b) v = uniform(lo, hi);
  return Tensor(std::move(shape), std::move(b));
}

Tensor Rng::normal_tensor(Shape shape, double mean, double stddev) {
  Buffer b(shape_numel(shape));
  for (auto& v : b) v = mean + stddev * normal();
  return Tensor(std::move(shape), std::move(b));
}

std::vector<std::size_t> Rng::permutation(std::size_t n) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[below(i)]);
  return p;
}

std::vector<std::size_t> Rng::sample_without_replacement(std::size_t n, std::size_t k) {
  if (k > n) throw Error("sample_without_replacement: k > n");
  auto p = permutation(n);
  p.resize(k);
  return p;
}

}  // namespace guard
