#pragma once
// Counter-based deterministic randomness. Every draw is a pure function of
// (master seed, domain tag, coordinates), so results are reproducible and
// independent of evaluation order and worker count.

#include <cstdint>
#include <cmath>

namespace pca {

// splitmix64 finalizer; bijective on 64-bit words.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebULL;
  x ^= x >> 31;
  return x;
}

namespace detail {

inline constexpr std::uint64_t golden = 0x9e3779b97f4a7c15ULL;

// Folds one coordinate word into a key. Two mix rounds so that nearby
// coordinates (0,1,2,...) decorrelate.
constexpr std::uint64_t absorb(std::uint64_t key, std::uint64_t w) noexcept {
  return mix64(key ^ mix64(w + golden));
}

}  // namespace detail

// Stream domains. Each domain consumes a fixed coordinate layout at its call
// sites, which keeps keyed draws collision-free across subsystems.
namespace domain {
inline constexpr std::uint64_t init = 1;       // replica, vertex
inline constexpr std::uint64_t update = 2;     // replica, vertex, time
inline constexpr std::uint64_t offspring = 3;  // replica, vertex
inline constexpr std::uint64_t phantom = 4;    // replica, site, time, slot
inline constexpr std::uint64_t graph = 6;      // draw counter
inline constexpr std::uint64_t resample = 7;   // replica, site, time, slot
}  // namespace domain

double inv_normal_cdf(double p);

// Keyed stream: fork() binds a coordinate, bits()/u01()/gauss() finalize.
class stream {
 public:
  explicit stream(std::uint64_t seed) : key_(mix64(seed + detail::golden)) {}

  stream fork(std::uint64_t w) const {
    stream s(*this);
    s.key_ = detail::absorb(key_, w);
    return s;
  }

  std::uint64_t bits(std::uint64_t w) const {
    return mix64(detail::absorb(key_, w) + detail::golden);
  }
  std::uint64_t bits(std::uint64_t a, std::uint64_t b) const { return fork(a).bits(b); }
  std::uint64_t bits(std::uint64_t a, std::uint64_t b, std::uint64_t c) const {
    return fork(a).fork(b).bits(c);
  }
  std::uint64_t bits(std::uint64_t a, std::uint64_t b, std::uint64_t c,
                     std::uint64_t d) const {
    return fork(a).fork(b).fork(c).bits(d);
  }

  // Uniform on [0,1), 53 random bits.
  double u01(std::uint64_t w) const { return to_unit(bits(w)); }
  double u01(std::uint64_t a, std::uint64_t b) const { return to_unit(bits(a, b)); }
  double u01(std::uint64_t a, std::uint64_t b, std::uint64_t c) const {
    return to_unit(bits(a, b, c));
  }
  double u01(std::uint64_t a, std::uint64_t b, std::uint64_t c, std::uint64_t d) const {
    return to_unit(bits(a, b, c, d));
  }

  // Standard normal by inverse CDF on a uniform strictly inside (0,1).
  double gauss(std::uint64_t w) const { return inv_normal_cdf(to_open(bits(w))); }
  double gauss(std::uint64_t a, std::uint64_t b) const {
    return inv_normal_cdf(to_open(bits(a, b)));
  }
  double gauss(std::uint64_t a, std::uint64_t b, std::uint64_t c) const {
    return inv_normal_cdf(to_open(bits(a, b, c)));
  }
  double gauss(std::uint64_t a, std::uint64_t b, std::uint64_t c, std::uint64_t d) const {
    return inv_normal_cdf(to_open(bits(a, b, c, d)));
  }

 private:
  static double to_unit(std::uint64_t x) { return double(x >> 11) * 0x1.0p-53; }
  static double to_open(std::uint64_t x) {
    return (double(x >> 11) + 0.5) * 0x1.0p-53;
  }

  std::uint64_t key_;
};

// Sequential adapter over a stream; satisfies UniformRandomBitGenerator.
class sequence {
 public:
  using result_type = std::uint64_t;
  explicit sequence(stream s) : s_(s) {}
  sequence(std::uint64_t seed, std::uint64_t dom) : s_(stream(seed).fork(dom)) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~result_type(0); }
  result_type operator()() { return s_.bits(n_++); }

  double u01() { return double((*this)() >> 11) * 0x1.0p-53; }
  double gauss() {
    return inv_normal_cdf((double((*this)() >> 11) + 0.5) * 0x1.0p-53);
  }

  // Uniform on {0,...,n-1}; rejection keeps it exactly uniform.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t rej = (-n) % n;  // 2^64 mod n
    for (;;) {
      std::uint64_t x = (*this)();
      if (x >= rej) return x % n;
    }
  }

 private:
  stream s_;
  std::uint64_t n_ = 0;
};

namespace detail {

inline double rational7(const double* num, const double* den, double r) {
  double p = num[7], q = den[7];
  for (int i = 6; i >= 0; --i) {
    p = p * r + num[i];
    q = q * r + den[i];
  }
  return p / q;
}

}  // namespace detail

// Inverse of the standard normal CDF (Wichura's rational approximations,
// relative error ~1e-15 over (0,1)).
inline double inv_normal_cdf(double p) {
  static const double a[8] = {
      3.3871328727963666080e0,  1.3314166789178437745e2, 1.9715909503065514427e3,
      1.3731693765509461125e4,  4.5921953931549871457e4, 6.7265770927008700853e4,
      3.3430575583588128105e4,  2.5090809287301226727e3};
  static const double b[8] = {
      1.0,                      4.2313330701600911252e1, 6.8718700749205790830e2,
      5.3941960214247511077e3,  2.1213794301586595867e4, 3.9307895800092710610e4,
      2.8729085735721942674e4,  5.2264952788528545610e3};
  static const double c[8] = {
      1.42343711074968357734e0, 4.63033784615654529590e0, 5.76949722146069140550e0,
      3.64784832476320460504e0, 1.27045825245236838258e0, 2.41780725177450611770e-1,
      2.27238449892691845833e-2, 7.74545014278341407640e-4};
  static const double d[8] = {
      1.0,                      2.05319162663775882187e0, 1.67638483018380384940e0,
      6.89767334985100004550e-1, 1.48103976427480074590e-1, 1.51986665636164571966e-2,
      5.47593808499534494600e-4, 1.05075007164441684324e-9};
  static const double e[8] = {
      6.65790464350110377720e0, 5.46378491116411436990e0, 1.78482653991729133580e0,
      2.96560571828504891230e-1, 2.65321895265761230930e-2, 1.24266094738807843860e-3,
      2.71155556874348757815e-5, 2.01033439929228813265e-7};
  static const double f[8] = {
      1.0,                      5.99832206555887937690e-1, 1.36929880922735805310e-1,
      1.48753612908506148525e-2, 7.86869131145613259100e-4, 1.84631831751005468180e-5,
      1.42151175831644588870e-7, 2.04426310338993978564e-15};

  const double q = p - 0.5;
  if (std::fabs(q) <= 0.425) {
    const double r = 0.180625 - q * q;
    return q * detail::rational7(a, b, r);
  }
  double r = q < 0 ? p : 1.0 - p;
  r = std::sqrt(-std::log(r));
  double v;
  if (r <= 5.0) {
    v = detail::rational7(c, d, r - 1.6);
  } else {
    v = detail::rational7(e, f, r - 5.0);
  }
  return q < 0 ? -v : v;
}

}  // namespace pca
