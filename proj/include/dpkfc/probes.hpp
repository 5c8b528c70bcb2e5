#pragma once

// Synthetic probe batches for data-free curvature estimation. Nothing in this
// header takes a dataset: the only inputs are a spec and a random stream.

#include <cstdint>
#include <vector>

#include "dpkfc/matrix.hpp"
#include "dpkfc/rng.hpp"

namespace dpkfc {

struct PinkNoiseSpec {
  std::size_t batch = 64;
  std::size_t channels = 1;
  std::size_t height = 28;
  std::size_t width = 28;
  double alpha = 1.0;
  double eps0 = 1e-6;

  void validate() const;
};

/// Spectrally shaped noise, returned as [batch x (channels*height*width)] with
/// each row laid out channel-major (c, y, x). Every channel of every sample is
/// an independent field. Power spectral density falls off as |u|^-alpha; the
/// whole batch is normalised to zero mean and unit variance.
Matrix gen_pink_noise(const PinkNoiseSpec& spec, Rng& rng);

/// Amplitude gain applied to frequency (fy, fx), in integer cycles per grid.
/// The DC bin uses radius 1 so that its gain matches the fundamental.
double pink_filter_gain(double fy, double fx, double alpha, double eps0);

struct TokenNoiseSpec {
  std::size_t batch = 64;
  std::size_t max_len = 32;
  std::size_t vocab = 1000;
  std::int64_t cls_id = 1;
  std::int64_t sep_id = 2;
  std::int64_t pad_id = 0;
  std::size_t min_len = 1;
  bool uses_separator = false;
  /// Payload tokens are drawn with weight (id + 1)^-zipf_exponent; 0 is uniform.
  double zipf_exponent = 0.0;

  void validate() const;
};

struct TokenBatch {
  std::size_t batch = 0;
  std::size_t max_len = 0;
  std::vector<std::int64_t> ids;    // [batch x max_len]
  std::vector<std::uint8_t> mask;   // [batch x max_len]
  std::vector<std::size_t> lengths; // active length per row

  std::int64_t id(std::size_t i, std::size_t t) const { return ids[i * max_len + t]; }
  std::uint8_t masked(std::size_t i, std::size_t t) const { return mask[i * max_len + t]; }
};

/// Structural token sequences: CLS at position 0, random payload, optional SEP
/// right after the active span, PAD elsewhere, prefix-of-ones attention mask.
/// With a separator the active length is drawn from [min_len, max_len - 1] so
/// that the SEP slot exists.
TokenBatch gen_token_noise(const TokenNoiseSpec& spec, Rng& rng);

/// Masked mean of one-hot token encodings: [batch x vocab]. This is how token
/// probes enter models whose first layer is Linear over a vocabulary-sized input.
Matrix token_bag_features(const TokenBatch& tokens, std::size_t vocab);

/// Uniform labels in [0, num_classes).
std::vector<std::int64_t> gen_labels(std::size_t batch, std::size_t num_classes, Rng& rng);

/// Radially averaged power spectrum of a batch of single-channel images.
struct RadialSpectrum {
  std::vector<double> radius;  // integer radii 1..N/2 (cycles per grid)
  std::vector<double> power;   // mean |X|^2 at that radius
  double slope = 0.0;          // least-squares slope of log power vs log radius
};

/// images: [n x (height*width)], power-of-two height and width.
RadialSpectrum radial_power_spectrum(const Matrix& images, std::size_t height, std::size_t width);

/// Least-squares slope of log(y) vs log(x).
double fit_loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace dpkfc
