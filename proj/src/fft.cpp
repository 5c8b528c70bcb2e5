#include "dpkfc/fft.hpp"

#include <cmath>
#include <numbers>
#include <string>
#include <utility>

#include "dpkfc/matrix.hpp"

namespace dpkfc {

bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

std::size_t next_power_of_two(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

void fft_inplace(std::vector<std::complex<double>>& x, bool inverse) {
  const std::size_t n = x.size();
  if (!is_power_of_two(n)) throw ContractError("fft: length " + std::to_string(n) + " is not a power of two");

  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(x[i], x[j]);
  }

  const double sign = inverse ? 1.0 : -1.0;
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = sign * 2.0 * std::numbers::pi / static_cast<double>(len);
    const std::size_t half = len / 2;
    for (std::size_t i = 0; i < n; i += len) {
      for (std::size_t k = 0; k < half; ++k) {
        // Direct twiddle evaluation avoids the drift of a running product.
        const std::complex<double> w = std::polar(1.0, ang * static_cast<double>(k));
        const auto u = x[i + k];
        const auto v = x[i + k + half] * w;
        x[i + k] = u + v;
        x[i + k + half] = u - v;
      }
    }
  }
  if (inverse) {
    const double inv = 1.0 / static_cast<double>(n);
    for (auto& v : x) v *= inv;
  }
}

namespace {

ComplexGrid transform2(const ComplexGrid& g, bool inverse) {
  if (!is_power_of_two(g.height) || !is_power_of_two(g.width)) {
    throw ContractError("fft2: grid " + std::to_string(g.height) + "x" + std::to_string(g.width) +
                        " is not power-of-two sized");
  }
  ComplexGrid out = g;
  std::vector<std::complex<double>> line(g.width);
  for (std::size_t r = 0; r < g.height; ++r) {
    for (std::size_t c = 0; c < g.width; ++c) line[c] = out.at(r, c);
    fft_inplace(line, inverse);
    for (std::size_t c = 0; c < g.width; ++c) out.at(r, c) = line[c];
  }
  line.resize(g.height);
  for (std::size_t c = 0; c < g.width; ++c) {
    for (std::size_t r = 0; r < g.height; ++r) line[r] = out.at(r, c);
    fft_inplace(line, inverse);
    for (std::size_t r = 0; r < g.height; ++r) out.at(r, c) = line[r];
  }
  return out;
}

}  // namespace

ComplexGrid fft2(const ComplexGrid& g) { return transform2(g, false); }
ComplexGrid ifft2(const ComplexGrid& g) { return transform2(g, true); }

}  // namespace dpkfc
