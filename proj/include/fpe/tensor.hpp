// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fpe {

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& shape);
int64_t shape_numel(const Shape& shape);

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Raised for malformed user input; messages name the offending field.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Raised when a tensor produced during sampling contains NaN or Inf.
class NumericError : public Error {
 public:
  NumericError(const std::string& what, int step) : Error(what), step_(step) {}
  int step() const { return step_; }

 private:
  int step_;
};

/// Dense row-major float32 array with value semantics.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> values);

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int axis) const;
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::span<float> values() { return data_; }
  std::span<const float> values() const { return data_; }
  std::vector<float>& storage() { return data_; }
  const std::vector<float>& storage() const { return data_; }

  float& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  float operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // Same data, new shape; element counts must agree.
  Tensor reshaped(Shape shape) const&;
  Tensor reshaped(Shape shape) &&;

  bool all_finite() const;
  bool bit_equal(const Tensor& other) const;

  Tensor& operator+=(const Tensor& other);
  Tensor& operator-=(const Tensor& other);
  Tensor& operator*=(float s);

 private:
  Shape shape_;
  std::vector<float> data_;
};

Tensor operator+(Tensor a, const Tensor& b);
Tensor operator-(Tensor a, const Tensor& b);
Tensor operator*(Tensor a, float s);

float mean_squared_error(const Tensor& a, const Tensor& b);
float l2_distance(const Tensor& a, const Tensor& b);
float max_abs_diff(const Tensor& a, const Tensor& b);

/// Seeded generator. Normal draws use Box-Muller over mt19937_64 so a seed
/// yields the same stream on every standard library.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  double uniform();  // [0, 1)
  float normal();
  uint64_t next_u64() { return engine_(); }
  Tensor randn(const Shape& shape);
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

uint64_t fnv1a64(std::string_view text);

}  // namespace fpe
