#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "wtal/error.hpp"

namespace wtal {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Probabilities are clamped into [kProbEps, 1 - kProbEps] before any log.
inline constexpr double kProbEps = 1e-7;

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  return m.derived().array().isFinite().all();
}

// Saturating score clip: kappa for x > kappa, -kappa for x < -kappa, x otherwise.
template <typename Scalar>
Scalar clip(Scalar x, Scalar kappa) {
  if (!(kappa > Scalar(0))) throw ConfigError("clip: kappa must be positive");
  if (x > kappa) return kappa;
  if (x < -kappa) return -kappa;
  return x;
}

// Subgradient of clip: 1 on the closed interval [-kappa, kappa], 0 outside.
template <typename Scalar>
Scalar clip_grad(Scalar x, Scalar kappa) {
  if (!(kappa > Scalar(0))) throw ConfigError("clip_grad: kappa must be positive");
  return (x >= -kappa && x <= kappa) ? Scalar(1) : Scalar(0);
}

// Logistic function, overflow-safe for |x| up to ~1e3.
template <typename Scalar>
Scalar sigmoid(Scalar x) {
  if (x >= Scalar(0)) {
    return Scalar(1) / (Scalar(1) + std::exp(-x));
  }
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

// Max-subtracted softmax; preserves ordering, output sums to 1.
template <typename Derived>
Vector softmax(const Eigen::MatrixBase<Derived>& v) {
  if (v.size() == 0) throw ConfigError("softmax: empty input");
  const double m = v.maxCoeff();
  Vector e = (v.array() - m).exp().matrix();
  return e / e.sum();
}

inline double clamp_probability(double p) {
  if (p < kProbEps) return kProbEps;
  if (p > 1.0 - kProbEps) return 1.0 - kProbEps;
  return p;
}

// 1 when clamp_probability is the identity at p, 0 in the saturated regions.
inline double clamp_probability_grad(double p) {
  return (p > kProbEps && p < 1.0 - kProbEps) ? 1.0 : 0.0;
}

// Central-difference gradient oracle: (f(t+h e_j) - f(t-h e_j)) / 2h.
template <typename F>
Vector finite_diff_grad(F&& f, const Vector& theta, double h) {
  if (!(h > 0)) throw ConfigError("finite_diff_grad: h must be positive");
  Vector grad(theta.size());
  Vector probe = theta;
  for (Eigen::Index j = 0; j < theta.size(); ++j) {
    probe[j] = theta[j] + h;
    const double fp = f(probe);
    probe[j] = theta[j] - h;
    const double fm = f(probe);
    probe[j] = theta[j];
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("finite_diff_grad: non-finite function value at coordinate " +
                         std::to_string(j));
    }
    grad[j] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

namespace detail {
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}
}  // namespace detail

// Deterministic seeded RNG. Draw functions are implemented by hand (rather
// than via std:: distributions) so streams are identical across standard
// libraries. Substreams derived with split() are independent of each other
// and of draws already made on the parent.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(detail::mix64(seed)) {}

  std::uint64_t seed() const { return seed_; }

  Rng split(std::uint64_t stream) const {
    return Rng(detail::mix64(seed_ ^ (0x9e3779b97f4a7c15ULL * (stream + 1))));
  }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller (uncached; two uniforms per draw).
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // Uniform integer on [0, n), rejection sampling, unbiased.
  std::int64_t uniform_int(std::int64_t n) {
    if (n <= 0) throw ConfigError("uniform_int: n must be positive");
    const std::uint64_t un = static_cast<std::uint64_t>(n);
    const std::uint64_t limit =
        std::numeric_limits<std::uint64_t>::max() -
        std::numeric_limits<std::uint64_t>::max() % un;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return static_cast<std::int64_t>(x % un);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_int(static_cast<std::int64_t>(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace wtal
