#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace idiolex {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using RowVec = Eigen::RowVectorXd;

using Rng = std::mt19937_64;

// Error taxonomy. The CLI maps each family onto a fixed exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller violated an API contract (bad argument, wrong shape, missing flag).
class UsageError : public Error {
 public:
  using Error::Error;
};

// Input data cannot support the requested operation.
class DataError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

/// Stable 64-bit FNV-1a hash rendered as 16 lowercase hex digits.
std::string fnv1a_hex(std::string_view bytes);

/// Uniform integer in [0, n). n must be positive.
std::size_t uniform_index(Rng& rng, std::size_t n);

/// Uniform real in [0, 1).
double uniform_real(Rng& rng);

double standard_normal(Rng& rng);

/// Fills a matrix with N(0, stddev^2) draws in column-major order.
Mat random_normal(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng);

bool all_finite(const Mat& m);

/// Reads a whole file; throws DataError when it cannot be opened.
std::string read_file(const std::string& path);

/// Writes bytes to a file, creating parent directories.
void write_file(const std::string& path, std::string_view bytes);

}  // namespace idiolex
