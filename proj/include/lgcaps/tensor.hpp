#pragma once

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace lgcaps {

// Error taxonomy. Everything the library throws derives from Error so the
// CLI can map failures onto its exit codes.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct TapeError : Error {
  using Error::Error;
};
struct ParseError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);

// Dense row-major tensor of doubles, rank 0..4. Data is shared between
// copies; once a tensor has been handed to the tape it is treated as
// immutable. Mutation is for construction only.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);  // zero-filled

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, double v);
  static Tensor scalar(double v);
  static Tensor from(Shape shape, std::vector<double> values);

  bool defined() const { return data_ != nullptr; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  const Shape& shape() const { return shape_; }
  std::int64_t numel() const;

  double* data() { return data_->data(); }
  const double* data() const { return data_->data(); }

  double& at(int i) { return (*data_)[static_cast<std::size_t>(i)]; }
  double at(int i) const { return (*data_)[static_cast<std::size_t>(i)]; }
  double& at(int i, int j) { return (*data_)[flat(i, j)]; }
  double at(int i, int j) const { return (*data_)[flat(i, j)]; }
  double& at(int i, int j, int k) { return (*data_)[flat(i, j, k)]; }
  double at(int i, int j, int k) const { return (*data_)[flat(i, j, k)]; }
  double& at(int i, int j, int k, int l) { return (*data_)[flat(i, j, k, l)]; }
  double at(int i, int j, int k, int l) const { return (*data_)[flat(i, j, k, l)]; }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  // Shares data; total element count must match.
  Tensor reshaped(Shape new_shape) const;
  Tensor clone() const;

  bool all_finite() const;

  bool requires_grad = false;

 private:
  std::size_t flat(int i, int j) const {
    return static_cast<std::size_t>(i) * shape_[1] + j;
  }
  std::size_t flat(int i, int j, int k) const {
    return (static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k;
  }
  std::size_t flat(int i, int j, int k, int l) const {
    return ((static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k) * shape_[3] + l;
  }

  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
};

std::int64_t shape_numel(const Shape& s);

void require_same_shape(const Tensor& a, const Tensor& b, const char* op);

}  // namespace lgcaps
