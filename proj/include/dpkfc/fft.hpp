#pragma once

#include <complex>
#include <cstddef>
#include <vector>

namespace dpkfc {

/// Row-major grid of complex values.
struct ComplexGrid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::complex<double>> values;

  ComplexGrid() = default;
  ComplexGrid(std::size_t h, std::size_t w) : height(h), width(w), values(h * w) {}

  std::complex<double>& at(std::size_t r, std::size_t c) { return values[r * width + c]; }
  const std::complex<double>& at(std::size_t r, std::size_t c) const { return values[r * width + c]; }
};

bool is_power_of_two(std::size_t n);
std::size_t next_power_of_two(std::size_t n);

/// In-place radix-2 FFT of a power-of-two length sequence (unnormalised forward,
/// 1/n-normalised inverse).
void fft_inplace(std::vector<std::complex<double>>& x, bool inverse);

ComplexGrid fft2(const ComplexGrid& g);
ComplexGrid ifft2(const ComplexGrid& g);

}  // namespace dpkfc
