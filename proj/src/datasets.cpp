#include "flsec/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "flsec/errors.hpp"

namespace flsec::data {

Batch xor_batch() {
  Batch b;
  b.inputs = {ParamVector({0.0, 0.0}), ParamVector({0.0, 1.0}), ParamVector({1.0, 0.0}),
              ParamVector({1.0, 1.0})};
  b.labels = {0, 1, 1, 0};
  return b;
}

namespace {

// Digit-like bitmaps, '#' = ink.
constexpr const char* kGlyphs[kGlyphClasses][kGlyphSide] = {
    {"..####..", ".#....#.", ".#...##.", ".#..#.#.", ".#.#..#.", ".##...#.", ".#....#.", "..####.."},
    {"...##...", "..###...", ".#.##...", "...##...", "...##...", "...##...", "...##...", ".######."},
    {"..####..", ".#....#.", "......#.", ".....#..", "...##...", "..#.....", ".#......", ".######."},
    {"..####..", ".#....#.", "......#.", "...###..", "......#.", "......#.", ".#....#.", "..####.."},
    {"....##..", "...#.#..", "..#..#..", ".#...#..", ".######.", ".....#..", ".....#..", ".....#.."},
    {".######.", ".#......", ".#......", ".#####..", "......#.", "......#.", ".#....#.", "..####.."},
    {"...###..", "..#.....", ".#......", ".#####..", ".#....#.", ".#....#.", ".#....#.", "..####.."},
    {".######.", "......#.", ".....#..", "....#...", "...#....", "...#....", "...#....", "...#...."},
    {"..####..", ".#....#.", ".#....#.", "..####..", ".#....#.", ".#....#.", ".#....#.", "..####.."},
    {"..####..", ".#....#.", ".#....#.", ".#....#.", "..#####.", "......#.", ".....#..", "..###..."},
};

}  // namespace

ParamVector glyph_prototype(std::size_t c) {
  if (c >= kGlyphClasses) throw ParameterError("glyph class out of range");
  ParamVector v(kGlyphPixels);
  for (std::size_t r = 0; r < kGlyphSide; ++r)
    for (std::size_t col = 0; col < kGlyphSide; ++col)
      v[r * kGlyphSide + col] = kGlyphs[c][r][col] == '#' ? 1.0 : 0.0;
  return v;
}

Batch glyph_batch(std::size_t count, double noise, int max_shift, Rng& rng) {
  if (count == 0) throw ParameterError("glyph_batch: count must be positive");
  if (noise < 0.0 || max_shift < 0) throw ParameterError("glyph_batch: negative noise or shift");
  Batch b;
  b.inputs.reserve(count);
  b.labels.reserve(count);
  const int side = static_cast<int>(kGlyphSide);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t c = i % kGlyphClasses;
    const ParamVector proto = glyph_prototype(c);
    const int span = 2 * max_shift + 1;
    const int dx = static_cast<int>(rng.uniform_below(static_cast<std::uint64_t>(span))) - max_shift;
    const int dy = static_cast<int>(rng.uniform_below(static_cast<std::uint64_t>(span))) - max_shift;
    ParamVector x(kGlyphPixels);
    for (int r = 0; r < side; ++r) {
      for (int col = 0; col < side; ++col) {
        const int sr = r - dy, sc = col - dx;
        double v = 0.0;
        if (sr >= 0 && sr < side && sc >= 0 && sc < side) v = proto[static_cast<std::size_t>(sr * side + sc)];
        if (noise > 0.0) v += noise * rng.normal();
        x[static_cast<std::size_t>(r * side + col)] = 2.0 * std::clamp(v, 0.0, 1.0) - 1.0;
      }
    }
    b.inputs.push_back(std::move(x));
    b.labels.push_back(c);
  }
  return b;
}

Dataset to_dataset(const Batch& b) { return Dataset{b.inputs, b.labels}; }

Batch to_batch(const Dataset& d) {
  Batch b;
  b.inputs = d.inputs;
  b.labels = d.labels;
  return b;
}

std::vector<Batch> partition(const Batch& b, std::size_t parts) {
  if (parts == 0 || parts > b.size()) throw ParameterError("partition: need 1 <= parts <= batch size");
  std::vector<Batch> out(parts);
  for (std::size_t i = 0; i < b.size(); ++i) {
    Batch& dst = out[i % parts];
    dst.inputs.push_back(b.inputs[i]);
    if (!b.labels.empty()) dst.labels.push_back(b.labels[i]);
    if (!b.targets.empty()) dst.targets.push_back(b.targets[i]);
  }
  return out;
}

GaussianMixture GaussianMixture::ring(std::size_t modes, double radius, double sigma) {
  if (modes == 0) throw ParameterError("mixture needs at least one mode");
  GaussianMixture g;
  g.sigma = sigma;
  const double two_pi = 2.0 * std::acos(-1.0);
  for (std::size_t m = 0; m < modes; ++m) {
    const double a = two_pi * static_cast<double>(m) / static_cast<double>(modes);
    g.means.push_back({radius * std::cos(a), radius * std::sin(a)});
  }
  return g;
}

ParamVector GaussianMixture::sample(Rng& rng) const {
  const auto& mu = means[rng.uniform_below(means.size())];
  return ParamVector({mu[0] + sigma * rng.normal(), mu[1] + sigma * rng.normal()});
}

double GaussianMixture::nearest_mean_distance(const ParamVector& p) const {
  if (p.dim() != 2) throw ParameterError("mixture points are 2-D");
  double best = std::numeric_limits<double>::infinity();
  for (const auto& mu : means) best = std::min(best, std::hypot(p[0] - mu[0], p[1] - mu[1]));
  return best;
}

MarkovSource MarkovSource::random(std::size_t vocab, std::size_t fanout, Rng& rng) {
  if (vocab == 0 || fanout == 0 || fanout > vocab) {
    throw ParameterError("MarkovSource: need 1 <= fanout <= vocab");
  }
  MarkovSource s;
  s.vocab = vocab;
  s.transition.assign(vocab * vocab, 0.0);
  std::vector<std::size_t> order(vocab);
  for (std::size_t r = 0; r < vocab; ++r) {
    for (std::size_t i = 0; i < vocab; ++i) order[i] = i;
    // Partial Fisher-Yates picks the successors.
    for (std::size_t i = 0; i < fanout; ++i) {
      const std::size_t j = i + rng.uniform_below(vocab - i);
      std::swap(order[i], order[j]);
    }
    double total = 0.0;
    for (std::size_t i = 0; i < fanout; ++i) {
      const double w = 0.2 + rng.uniform01();
      s.transition[r * vocab + order[i]] = w;
      total += w;
    }
    for (std::size_t c = 0; c < vocab; ++c) s.transition[r * vocab + c] /= total;
  }
  return s;
}

std::vector<std::size_t> MarkovSource::sample(std::size_t length, Rng& rng) const {
  std::vector<std::size_t> seq;
  seq.reserve(length);
  if (length == 0) return seq;
  seq.push_back(rng.uniform_below(vocab));
  while (seq.size() < length) {
    const double* row = transition.data() + seq.back() * vocab;
    double u = rng.uniform01();
    std::size_t next = vocab - 1;
    for (std::size_t c = 0; c < vocab; ++c) {
      if (u < row[c]) {
        next = c;
        break;
      }
      u -= row[c];
    }
    // Guard against rounding landing on a zero-probability tail entry.
    while (row[next] == 0.0 && next > 0) --next;
    seq.push_back(next);
  }
  return seq;
}

std::vector<std::vector<std::size_t>> markov_corpus(const MarkovSource& src, std::size_t sequences,
                                                    std::size_t length, Rng& rng) {
  std::vector<std::vector<std::size_t>> out;
  out.reserve(sequences);
  for (std::size_t i = 0; i < sequences; ++i) out.push_back(src.sample(length, rng));
  return out;
}

}  // namespace flsec::data
