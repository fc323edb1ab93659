#include <doctest.h>

#include <cmath>
#include <random>
#include <set>

#include "kinetos/rng.hpp"

using namespace kinetos;

TEST_CASE("philox known answers") {
  const auto zero = Philox4x32::apply({0, 0, 0, 0}, {0, 0});
  CHECK(zero == Philox4x32::Counter{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u});
  const auto ones = Philox4x32::apply({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu},
                                      {0xffffffffu, 0xffffffffu});
  CHECK(ones == Philox4x32::Counter{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu});
  const auto pi = Philox4x32::apply({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u},
                                    {0xa4093822u, 0x299f31d0u});
  CHECK(pi == Philox4x32::Counter{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u});
}

TEST_CASE("fnv1a reference values") {
  CHECK(fnv1a64("") == 0xcbf29ce484222325ull);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cull);
}

TEST_CASE("sub-streams are reproducible and label separated") {
  Stream a(42, "collide"), b(42, "collide"), c(42, "init"), d(43, "collide");
  for (int i = 0; i < 100; ++i) {
    const auto x = a();
    CHECK(x == b());
    CHECK(x != c());
    CHECK(x != d());
  }
}

TEST_CASE("uniform_pair is a pure function of its counter") {
  const auto key = derive_key(7, "pairs");
  const auto u = uniform_pair(key, 3, 11);
  const auto v = uniform_pair(key, 3, 11);
  CHECK(u == v);
  CHECK(u != uniform_pair(key, 3, 12));
  CHECK(u[0] >= 0.0);
  CHECK(u[0] < 1.0);
}

TEST_CASE("uniform and normal moments") {
  Stream s(1, "moments");
  const int n = 200000;
  double m1 = 0, m2 = 0, z1 = 0, z2 = 0, z4 = 0;
  for (int i = 0; i < n; ++i) {
    const double u = s.uniform();
    m1 += u;
    m2 += u * u;
    const double z = s.normal();
    z1 += z;
    z2 += z * z;
    z4 += z * z * z * z;
  }
  CHECK(std::abs(m1 / n - 0.5) < 5 * std::sqrt(1.0 / 12 / n));
  CHECK(std::abs(m2 / n - 1.0 / 3) < 5 * std::sqrt(4.0 / 45 / n));
  CHECK(std::abs(z1 / n) < 5 / std::sqrt(double(n)));
  CHECK(std::abs(z2 / n - 1.0) < 5 * std::sqrt(2.0 / n));
  CHECK(std::abs(z4 / n - 3.0) < 5 * std::sqrt(96.0 / n));
}

TEST_CASE("stream works as a standard URBG") {
  Stream s(9, "poisson");
  std::poisson_distribution<long> pd(25.0);
  double mean = 0;
  for (int i = 0; i < 20000; ++i) mean += double(pd(s));
  CHECK(std::abs(mean / 20000 - 25.0) < 5 * std::sqrt(25.0 / 20000));
}
