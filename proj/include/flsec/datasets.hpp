#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "flsec/models.hpp"
#include "flsec/numeric.hpp"

namespace flsec::data {

// The four XOR points with class labels 0/1.
Batch xor_batch();

inline constexpr std::size_t kGlyphSide = 8;
inline constexpr std::size_t kGlyphPixels = kGlyphSide * kGlyphSide;
inline constexpr std::size_t kGlyphClasses = 10;

// Clean 8x8 prototype for class c, pixels in {0, 1}, row-major.
ParamVector glyph_prototype(std::size_t c);

// `count` glyph samples with balanced labels (label i % 10). Each sample is its
// prototype shifted by up to `max_shift` pixels, with Gaussian pixel noise of
// standard deviation `noise`, clamped to [0, 1] and mapped affinely onto
// [-1, 1] so background pixels are -1.
Batch glyph_batch(std::size_t count, double noise, int max_shift, Rng& rng);

struct Dataset {
  std::vector<ParamVector> inputs;
  std::vector<std::size_t> labels;
};
Dataset to_dataset(const Batch& b);
Batch to_batch(const Dataset& d);

// Split `count` examples round-robin across `parts` partitions.
std::vector<Batch> partition(const Batch& b, std::size_t parts);

// Isotropic 2-D Gaussian mixture with equally weighted modes on a circle.
struct GaussianMixture {
  std::vector<std::array<double, 2>> means;
  double sigma = 0.05;

  static GaussianMixture ring(std::size_t modes, double radius, double sigma);
  ParamVector sample(Rng& rng) const;
  // Distance from point (x, y) to the nearest mode mean.
  double nearest_mean_distance(const ParamVector& p) const;
};

// First-order Markov chain over `vocab` tokens. Each row keeps `fanout`
// successors with random weights; the rest have probability zero.
struct MarkovSource {
  std::size_t vocab = 0;
  std::vector<double> transition;  // vocab x vocab, rows sum to 1

  static MarkovSource random(std::size_t vocab, std::size_t fanout, Rng& rng);
  std::vector<std::size_t> sample(std::size_t length, Rng& rng) const;
};

std::vector<std::vector<std::size_t>> markov_corpus(const MarkovSource& src, std::size_t sequences,
                                                    std::size_t length, Rng& rng);

}  // namespace flsec::data
