#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

namespace kvsink {

/// Row-major float64 tensor. Construction rejects NaN/Inf and any data length
/// that disagrees with the product of `dims`. Zero extents are allowed and
/// represent empty tensors (e.g. a cache layer with no quantized rows).
class DenseTensor {
 public:
  DenseTensor() = default;
  explicit DenseTensor(std::vector<std::size_t> dims);
  DenseTensor(std::vector<std::size_t> dims, std::vector<double> data);

  static DenseTensor matrix(std::size_t rows, std::size_t cols) { return DenseTensor({rows, cols}); }

  const std::vector<std::size_t>& dims() const noexcept { return dims_; }
  std::size_t ndim() const noexcept { return dims_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // 2-D view helpers. Tensors of rank > 2 are viewed as [prod(dims[:-1]), dims[-1]];
  // rank-1 tensors are a single row.
  std::size_t rows() const noexcept;
  std::size_t cols() const noexcept;

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }

  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }

  /// Copy of column `c` of the 2-D view.
  std::vector<double> column(std::size_t c) const;

  /// Rows selected in the given order (duplicates allowed).
  DenseTensor gather_rows(std::span<const std::size_t> indices) const;

  friend bool operator==(const DenseTensor&, const DenseTensor&) = default;

 private:
  std::vector<std::size_t> dims_;
  std::vector<double> data_;
};

std::size_t element_count(std::span<const std::size_t> dims);

/// Throws Numeric error if any value is NaN or infinite. `what` is placed in
/// the error context under "op".
void ensure_finite(std::span<const double> values, const char* what);

/// out[i] = sqrt(sum_j x[i,j]^2). Requires a 2-D tensor.
std::vector<double> l2_norm_per_token(const DenseTensor& x);

double l2_norm(std::span<const double> v);
double dot(std::span<const double> a, std::span<const double> b);

struct CosineResult {
  double value = 0.0;
  bool degenerate = false;  // one operand had zero norm; value is 0
};

CosineResult cosine_similarity_checked(std::span<const double> a, std::span<const double> b);

/// dot(a,b)/(|a||b|); 0 when either norm is 0. Length mismatch is a shape error.
double cosine_similarity(std::span<const double> a, std::span<const double> b);

struct IndexedValue {
  std::size_t index = 0;
  double value = 0.0;
  friend bool operator==(const IndexedValue&, const IndexedValue&) = default;
};

/// The min(k, m) entries of largest |value|, ties broken by lower index,
/// returned in ascending index order.
std::vector<IndexedValue> top_k_abs(std::span<const double> values, std::size_t k);

/// Numerically stable softmax. -inf entries map to 0; an all -inf row is a
/// degenerate-row error.
std::vector<double> softmax_row(std::span<const double> scores);

/// Median of the values (mean of the two middle elements for even counts).
double median(std::vector<double> values);

/// C = A * B for 2-D A [n,k] and B [k,m].
DenseTensor matmul(const DenseTensor& a, const DenseTensor& b);

/// Splits [n, heads*head_dim] into [heads, n, head_dim].
DenseTensor split_heads(const DenseTensor& x, std::size_t heads);

/// Inverse of split_heads.
DenseTensor merge_heads(const DenseTensor& x);

/// Head `h` of a [heads, n, head_dim] tensor as an [n, head_dim] matrix.
DenseTensor head_slice(const DenseTensor& x, std::size_t h);

}  // namespace kvsink
