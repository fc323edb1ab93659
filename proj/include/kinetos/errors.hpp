#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace kinetos {

// Root of every error the library throws on purpose.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class QuadratureError : public Error {
 public:
  QuadratureError(const std::string& what, double estimate)
      : Error(what), estimate_(estimate) {}
  double estimate() const noexcept { return estimate_; }

 private:
  double estimate_;
};

class IntegratorError : public Error {
 public:
  IntegratorError(const std::string& what, double t_reached, std::size_t steps)
      : Error(what), t_reached_(t_reached), steps_(steps) {}
  double t_reached() const noexcept { return t_reached_; }
  std::size_t steps() const noexcept { return steps_; }

 private:
  double t_reached_;
  std::size_t steps_;
};

class NonSimpleLeading : public Error {
 public:
  using Error::Error;
};

class ComplexLeading : public Error {
 public:
  using Error::Error;
};

// Drift outside the empirically admissible region, or eigen data unusable.
class NonAdmissible : public Error {
 public:
  using Error::Error;
};

class StepTooLarge : public Error {
 public:
  using Error::Error;
};

class GridMismatch : public Error {
 public:
  using Error::Error;
};

class InterpolationOutOfRange : public Error {
 public:
  InterpolationOutOfRange(const std::string& what, std::size_t node)
      : Error(what), node_(node) {}
  std::size_t node() const noexcept { return node_; }

 private:
  std::size_t node_;
};

class UnequalMeans : public Error {
 public:
  using Error::Error;
};

class HypothesisFails : public Error {
 public:
  HypothesisFails(const std::string& what, std::size_t violations)
      : Error(what), violations_(violations) {}
  std::size_t violations() const noexcept { return violations_; }

 private:
  std::size_t violations_;
};

class NoConvergence : public Error {
 public:
  NoConvergence(const std::string& what, double plateau)
      : Error(what), plateau_(plateau) {}
  double plateau() const noexcept { return plateau_; }

 private:
  double plateau_;
};

class RateUnresolvable : public Error {
 public:
  using Error::Error;
};

// Schema violation; path names the offending field, e.g. "numeric.N".
class ConfigError : public Error {
 public:
  ConfigError(std::string path, const std::string& what)
      : Error(path.empty() ? what : path + ": " + what), path_(std::move(path)), message_(what) {}
  const std::string& path() const noexcept { return path_; }
  const std::string& message() const noexcept { return message_; }

 private:
  std::string path_;
  std::string message_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace kinetos
