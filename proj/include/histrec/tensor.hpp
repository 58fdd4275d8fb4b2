// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensor. Minimal by design: shapes are small vectors of
// extents, storage is a flat std::vector. The scalar type is a template
// parameter so the gradient-check oracle can run the same code in double;
// the pipeline itself always uses the float alias.
#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "histrec/errors.hpp"
#include "histrec/rng.hpp"

namespace histrec {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

template <typename S>
class TensorT {
 public:
  TensorT() = default;
  explicit TensorT(Shape shape)
      : shape_(std::move(shape)), data_(static_cast<size_t>(shape_numel(shape_)), S(0)) {}
  TensorT(Shape shape, std::vector<S> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<int64_t>(data_.size()) != shape_numel(shape_)) {
      throw ConfigError("tensor: " + std::to_string(data_.size()) + " values do not fill shape " +
                        shape_str(shape_));
    }
  }

  static TensorT zeros(Shape shape) { return TensorT(std::move(shape)); }

  static TensorT full(Shape shape, S v) {
    TensorT t(std::move(shape));
    for (S& x : t.data_) x = v;
    return t;
  }

  static TensorT ones(Shape shape) { return full(std::move(shape), S(1)); }

  static TensorT randn(Rng& rng, Shape shape, S stddev = S(1)) {
    TensorT t(std::move(shape));
    for (S& x : t.data_) x = static_cast<S>(rng.normal()) * stddev;
    return t;
  }

  static TensorT scalar(S v) { return TensorT({1}, {v}); }

  const Shape& shape() const { return shape_; }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  size_t rank() const { return shape_.size(); }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }
  std::vector<S>& values() { return data_; }
  const std::vector<S>& values() const { return data_; }

  S& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  S operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  S& at(int i, int j) { return data_[static_cast<size_t>(i) * dim(1) + j]; }
  S at(int i, int j) const { return data_[static_cast<size_t>(i) * dim(1) + j]; }
  S& at(int i, int j, int k) {
    return data_[(static_cast<size_t>(i) * dim(1) + j) * dim(2) + k];
  }
  S at(int i, int j, int k) const {
    return data_[(static_cast<size_t>(i) * dim(1) + j) * dim(2) + k];
  }

  bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

  // Leading extents collapsed into rows; last extent is the column count.
  int64_t rows() const { return last_dim() ? numel() / last_dim() : 0; }
  int last_dim() const { return shape_.empty() ? 0 : shape_.back(); }

  void fill(S v) {
    for (S& x : data_) x = v;
  }

  bool all_finite() const {
    for (S x : data_) {
      if (!std::isfinite(x)) return false;
    }
    return true;
  }

 private:
  Shape shape_;
  std::vector<S> data_;
};

using Tensor = TensorT<float>;

}  // namespace histrec
