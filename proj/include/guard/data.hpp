#pragma once

#include <optional>
#include <string>
#include <vector>

#include "guard/rng.hpp"
#include "guard/tensor.hpp"

namespace guard {

// Training targets: hard class indices, optionally overridden by soft
// probability rows.
struct Targets {
  std::vector<int> hard;
  std::optional<Tensor> soft;

  std::size_t size() const { return soft ? soft->dim(0) : hard.size(); }
  bool is_soft() const { return soft.has_value(); }
  Targets subset(std::span<const std::size_t> idx) const;
};

struct Dataset {
  Tensor inputs;            // (N, ...) in [0, 1]
  std::vector<int> labels;  // hard labels, always present
  std::optional<Tensor> soft;
  std::size_t classes = 0;
  std::string split = "train";

  std::size_t size() const { return labels.size(); }
  Shape sample_shape() const;
  Targets targets() const { return {labels, soft}; }
  Dataset subset(std::span<const std::size_t> idx) const;
  std::vector<std::size_t> class_indices(int c) const;
  // Throws when labels or soft rows are inconsistent.
  void validate() const;
};

struct DatasetPair {
  Dataset train;
  Dataset test;
};

// Two interleaved half circles, scaled into the unit square.
DatasetPair make_two_moons(std::size_t n_train, std::size_t n_test, double noise, Rng& rng);
// Isotropic Gaussian blobs in `dim` dimensions; noise 0 puts every sample on
// its class mean.
DatasetPair make_gauss_mix(std::size_t n_train, std::size_t n_test, std::size_t classes,
                           std::size_t dim, double noise, Rng& rng);
// Rendered digit glyphs (size x size, 1 channel) with jitter and pixel noise.
DatasetPair make_tiny_digits(std::size_t n_train, std::size_t n_test, std::size_t size,
                             double noise, Rng& rng);

// IDX (MNIST-style) image and label files. Pixels are scaled to [0, 1].
Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 std::size_t classes);
// CSV with one sample per row: features..., label. Features must lie in [0, 1].
Dataset load_csv(const std::string& path, std::size_t classes);

// Deterministic class-stratified split.
DatasetPair split_dataset(const Dataset& all, double test_fraction, Rng& rng);

}  // namespace guard
