#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace morph {

using Index = Eigen::Index;
using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

template <typename Scalar>
using Point2 = Eigen::Matrix<Scalar, 2, 1>;
using Vec2 = Point2<double>;

/// Deterministic generator used everywhere randomness is consumed.
using Rng = std::mt19937_64;

/// Bad dimensions, malformed configuration, inconsistent geometry.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An API used out of order (consumed tape, step after done, empty batch).
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Non-finite values reached a loss, gradient or parameter vector.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kPi = 3.14159265358979323846;

/// Wraps an angle to (-pi, pi].
template <typename Scalar>
Scalar wrap_angle(Scalar angle) {
  using std::remainder;
  Scalar wrapped = remainder(angle, Scalar(2 * kPi));
  if (wrapped <= Scalar(-kPi)) wrapped += Scalar(2 * kPi);
  return wrapped;
}

}  // namespace morph
