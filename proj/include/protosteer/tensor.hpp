#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ps::numkit {

// Dense rank-N float32 array, row-major. The carrier for all numeric state.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::vector<int64_t> shape, std::vector<float> data);
  explicit Tensor(std::vector<int64_t> shape);  // zero-filled

  static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int64_t> shape, float v);
  static Tensor scalar(float v) { return Tensor({1}, {v}); }
  static Tensor row(std::vector<float> v);

  const std::vector<int64_t>& shape() const { return shape_; }
  int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
  int64_t dim(int64_t i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::vector<float>& vec() { return data_; }
  const std::vector<float>& vec() const { return data_; }

  float& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  float operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }
  // rank-2 accessors
  float& at(int64_t r, int64_t c) { return data_[static_cast<size_t>(r * shape_[1] + c)]; }
  float at(int64_t r, int64_t c) const { return data_[static_cast<size_t>(r * shape_[1] + c)]; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool all_finite() const;

  // Reinterpret with a new shape of equal numel.
  Tensor reshaped(std::vector<int64_t> shape) const;

  std::string shape_str() const;

 private:
  std::vector<int64_t> shape_;
  std::vector<float> data_;
};

std::string shape_to_string(const std::vector<int64_t>& s);

// Raw kernels. The autodiff ops wrap these for their forward values and the
// inference paths call them directly, so both routes produce bit-identical
// numbers.
namespace kernels {

Tensor matmul(const Tensor& a, const Tensor& b);     // (m,k)x(k,n)
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // (m,k)x(n,k)^T -> (m,n)
Tensor matmul_tn(const Tensor& a, const Tensor& b);  // (k,m)^T x(k,n) -> (m,n)
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_rowvec(const Tensor& a, const Tensor& v);  // broadcast v over rows of a
Tensor scale(const Tensor& a, float s);
Tensor relu(const Tensor& a);
Tensor softmax_rows(const Tensor& a);
Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, float eps);
Tensor gather_rows(const Tensor& table, const std::vector<int>& ids);
Tensor concat_cols(const std::vector<const Tensor*>& parts);  // rank-2, same row count
Tensor concat_flat(const std::vector<const Tensor*>& parts);  // rank-1 concat
Tensor mean_rows(const Tensor& a);                            // (m,n) -> (n)
Tensor normalize_columns(const Tensor& a, float eps);         // per-column L2
// Rotates even/odd feature pairs of row p by angle p*theta_i (theta_i =
// base^(-2i/d)); `offset` shifts the position index of row 0.
Tensor rope(const Tensor& a, int64_t offset, float base);
float l1_norm(const Tensor& a);
float l2_norm_sq(const Tensor& a);
float l2_norm(const Tensor& a);
// mean over rows of -log softmax(row)[target]; rows with target < 0 are skipped
float cross_entropy_logits(const Tensor& logits, const std::vector<int>& targets);

}  // namespace kernels

}  // namespace ps::numkit
