#include "kinetos/rng.hpp"

#include <cmath>
#include <numbers>

namespace kinetos {

std::uint64_t fnv1a64(std::string_view bytes) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

Philox4x32::Key derive_key(std::uint64_t seed, std::string_view label) noexcept {
  const std::uint64_t k = splitmix64(seed ^ splitmix64(fnv1a64(label)));
  return {static_cast<std::uint32_t>(k), static_cast<std::uint32_t>(k >> 32)};
}

double Stream::normal() noexcept {
  if (have_normal_) {
    have_normal_ = false;
    return normal_spare_;
  }
  double u = uniform();
  while (u <= 0.0) u = uniform();
  const double v = uniform();
  const double r = std::sqrt(-2.0 * std::log(u));
  const double phi = 2.0 * std::numbers::pi * v;
  normal_spare_ = r * std::sin(phi);
  have_normal_ = true;
  return r * std::cos(phi);
}

}  // namespace kinetos
