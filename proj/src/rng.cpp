#include "dpkfc/rng.hpp"

#include "dpkfc/matrix.hpp"

namespace dpkfc {

namespace {

std::mt19937_64 make_engine(std::uint64_t seed, const std::vector<std::uint64_t>& path) {
  std::vector<std::uint32_t> words;
  words.reserve(2 + 2 * path.size() + 1);
  words.push_back(static_cast<std::uint32_t>(seed));
  words.push_back(static_cast<std::uint32_t>(seed >> 32));
  for (auto p : path) {
    words.push_back(static_cast<std::uint32_t>(p));
    words.push_back(static_cast<std::uint32_t>(p >> 32));
  }
  words.push_back(static_cast<std::uint32_t>(path.size()));
  std::seed_seq seq(words.begin(), words.end());
  return std::mt19937_64(seq);
}

}  // namespace

Rng::Rng(std::uint64_t seed) : Rng(seed, {}) {}

Rng::Rng(std::uint64_t seed, std::vector<std::uint64_t> path)
    : seed_(seed), path_(std::move(path)), engine_(make_engine(seed_, path_)) {}

Rng Rng::split(std::uint64_t stream) const {
  auto path = path_;
  path.push_back(stream);
  return Rng(seed_, std::move(path));
}

double Rng::normal() { return normal_(engine_); }

double Rng::uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }

std::int64_t Rng::uniform_int(std::int64_t lo, std::int64_t hi) {
  if (!(lo < hi)) throw ContractError("uniform_int: requires lo < hi");
  return std::uniform_int_distribution<std::int64_t>(lo, hi - 1)(engine_);
}

bool Rng::bernoulli(double p) { return uniform() < p; }

std::vector<double> standard_normal(Rng& rng, std::size_t n) {
  std::vector<double> out(n);
  for (auto& v : out) v = rng.normal();
  return out;
}

std::int64_t uniform_int(Rng& rng, std::int64_t lo, std::int64_t hi) { return rng.uniform_int(lo, hi); }

}  // namespace dpkfc
