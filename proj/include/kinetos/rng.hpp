#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <string_view>

namespace kinetos {

// Philox4x32-10 (Salmon et al. 2011). Counter based: the output is a pure
// function of (counter, key), which is what makes parallel pair updates
// reproducible independent of scheduling.
struct Philox4x32 {
  using Counter = std::array<std::uint32_t, 4>;
  using Key = std::array<std::uint32_t, 2>;

  static Counter apply(Counter ctr, Key key) noexcept {
    constexpr std::uint32_t m0 = 0xD2511F53u, m1 = 0xCD9E8D57u;
    constexpr std::uint32_t w0 = 0x9E3779B9u, w1 = 0xBB67AE85u;
    for (int round = 0; round < 10; ++round) {
      if (round > 0) {
        key[0] += w0;
        key[1] += w1;
      }
      const std::uint64_t p0 = std::uint64_t{m0} * ctr[0];
      const std::uint64_t p1 = std::uint64_t{m1} * ctr[2];
      const auto hi0 = static_cast<std::uint32_t>(p0 >> 32), lo0 = static_cast<std::uint32_t>(p0);
      const auto hi1 = static_cast<std::uint32_t>(p1 >> 32), lo1 = static_cast<std::uint32_t>(p1);
      ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    }
    return ctr;
  }
};

std::uint64_t fnv1a64(std::string_view bytes) noexcept;
std::uint64_t splitmix64(std::uint64_t x) noexcept;

// Sub-stream key for a fixed label under a master seed.
Philox4x32::Key derive_key(std::uint64_t seed, std::string_view label) noexcept;

inline double to_unit(std::uint64_t bits) noexcept {
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

// Two uniforms in [0,1) at counter (major, minor) of a keyed stream.
inline std::array<double, 2> uniform_pair(const Philox4x32::Key& key, std::uint64_t major,
                                          std::uint64_t minor) noexcept {
  const auto r = Philox4x32::apply({static_cast<std::uint32_t>(major),
                                    static_cast<std::uint32_t>(major >> 32),
                                    static_cast<std::uint32_t>(minor),
                                    static_cast<std::uint32_t>(minor >> 32)},
                                   key);
  return {to_unit((std::uint64_t{r[1]} << 32) | r[0]),
          to_unit((std::uint64_t{r[3]} << 32) | r[2])};
}

// Sequential 64-bit URBG over one Philox sub-stream; usable with <random>.
class Stream {
 public:
  using result_type = std::uint64_t;

  Stream(Philox4x32::Key key, std::uint64_t major) noexcept : key_(key), major_(major) {}
  Stream(std::uint64_t seed, std::string_view label, std::uint64_t major = 0) noexcept
      : Stream(derive_key(seed, label), major) {}

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

  result_type operator()() noexcept {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const auto r = Philox4x32::apply({static_cast<std::uint32_t>(major_),
                                      static_cast<std::uint32_t>(major_ >> 32),
                                      static_cast<std::uint32_t>(minor_),
                                      static_cast<std::uint32_t>(minor_ >> 32)},
                                     key_);
    ++minor_;
    spare_ = (std::uint64_t{r[3]} << 32) | r[2];
    have_spare_ = true;
    return (std::uint64_t{r[1]} << 32) | r[0];
  }

  double uniform() noexcept { return to_unit((*this)()); }

  // Standard normal by Box-Muller; platform independent unlike std::normal_distribution.
  double normal() noexcept;

 private:
  Philox4x32::Key key_;
  std::uint64_t major_;
  std::uint64_t minor_ = 0;
  std::uint64_t spare_ = 0;
  bool have_spare_ = false;
  double normal_spare_ = 0.0;
  bool have_normal_ = false;
};

}  // namespace kinetos
