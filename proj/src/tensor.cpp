#include "kvsink/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <string>

#include "kvsink/error.hpp"

namespace kvsink {

std::size_t element_count(std::span<const std::size_t> dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

void ensure_finite(std::span<const double> values, const char* what) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw Error(ErrorCode::Numeric, std::string("non-finite value produced by ") + what,
                  {{"op", what}, {"index", std::to_string(i)}});
    }
  }
}

DenseTensor::DenseTensor(std::vector<std::size_t> dims)
    : dims_(std::move(dims)), data_(element_count(dims_), 0.0) {
  if (dims_.empty()) throw Error(ErrorCode::Shape, "tensor needs at least one dimension");
}

DenseTensor::DenseTensor(std::vector<std::size_t> dims, std::vector<double> data)
    : dims_(std::move(dims)), data_(std::move(data)) {
  if (dims_.empty()) throw Error(ErrorCode::Shape, "tensor needs at least one dimension");
  if (data_.size() != element_count(dims_)) {
    throw Error(ErrorCode::Shape, "data length does not match dims",
                {{"expected", std::to_string(element_count(dims_))},
                 {"actual", std::to_string(data_.size())}});
  }
  ensure_finite(data_, "tensor construction");
}

std::size_t DenseTensor::rows() const noexcept {
  if (dims_.size() <= 1) return dims_.empty() ? 0 : 1;
  std::size_t r = 1;
  for (std::size_t i = 0; i + 1 < dims_.size(); ++i) r *= dims_[i];
  return r;
}

std::size_t DenseTensor::cols() const noexcept { return dims_.empty() ? 0 : dims_.back(); }

std::vector<double> DenseTensor::column(std::size_t c) const {
  const std::size_t n = rows(), m = cols();
  std::vector<double> out(n);
  for (std::size_t r = 0; r < n; ++r) out[r] = data_[r * m + c];
  return out;
}

DenseTensor DenseTensor::gather_rows(std::span<const std::size_t> indices) const {
  const std::size_t m = cols();
  DenseTensor out({indices.size(), m});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows()) throw Error(ErrorCode::Index, "row index out of range");
    std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(indices[i] * m), m,
                out.data_.begin() + static_cast<std::ptrdiff_t>(i * m));
  }
  return out;
}

std::vector<double> l2_norm_per_token(const DenseTensor& x) {
  if (x.ndim() != 2) throw Error(ErrorCode::Shape, "l2_norm_per_token expects a 2-D tensor");
  std::vector<double> out(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) out[i] = l2_norm(x.row(i));
  return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error(ErrorCode::Shape, "vector length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

CosineResult cosine_similarity_checked(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error(ErrorCode::Shape, "cosine_similarity length mismatch");
  const double na = l2_norm(a), nb = l2_norm(b);
  if (na == 0.0 || nb == 0.0) return {0.0, true};
  const double c = dot(a, b) / (na * nb);
  return {std::clamp(c, -1.0, 1.0), false};
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  return cosine_similarity_checked(a, b).value;
}

std::vector<IndexedValue> top_k_abs(std::span<const double> values, std::size_t k) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t take = std::min(k, values.size());
  auto larger = [&](std::size_t a, std::size_t b) {
    const double ma = std::fabs(values[a]), mb = std::fabs(values[b]);
    return ma != mb ? ma > mb : a < b;
  };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(), larger);
  order.resize(take);
  std::sort(order.begin(), order.end());
  std::vector<IndexedValue> out;
  out.reserve(take);
  for (std::size_t i : order) out.push_back({i, values[i]});
  return out;
}

std::vector<double> softmax_row(std::span<const double> scores) {
  double peak = -std::numeric_limits<double>::infinity();
  for (double s : scores) peak = std::max(peak, s);
  if (scores.empty() || peak == -std::numeric_limits<double>::infinity()) {
    throw Error(ErrorCode::DegenerateRow, "softmax over a fully masked row");
  }
  std::vector<double> out(scores.size());
  double total = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    out[i] = std::isinf(scores[i]) && scores[i] < 0 ? 0.0 : std::exp(scores[i] - peak);
    total += out[i];
  }
  for (double& p : out) p /= total;
  return out;
}

double median(std::vector<double> values) {
  if (values.empty()) return 0.0;
  const std::size_t mid = values.size() / 2;
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid), values.end());
  const double upper = values[mid];
  if (values.size() % 2 == 1) return upper;
  const double lower = *std::max_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lower + upper);
}

DenseTensor matmul(const DenseTensor& a, const DenseTensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows()) {
    throw Error(ErrorCode::Shape, "matmul shape mismatch");
  }
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  DenseTensor c({n, m});
  auto cd = c.data();
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < n; ++i) {
    double* crow = cd.data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ad[i * k + p];
      if (av == 0.0) continue;
      const double* brow = bd.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

DenseTensor split_heads(const DenseTensor& x, std::size_t heads) {
  if (x.ndim() != 2 || heads == 0 || x.cols() % heads != 0) {
    throw Error(ErrorCode::Shape, "split_heads: width not divisible by head count");
  }
  const std::size_t n = x.rows(), hd = x.cols() / heads;
  DenseTensor out({heads, n, hd});
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t j = 0; j < hd; ++j) out.data()[(h * n + t) * hd + j] = x.at(t, h * hd + j);
  return out;
}

DenseTensor merge_heads(const DenseTensor& x) {
  if (x.ndim() != 3) throw Error(ErrorCode::Shape, "merge_heads expects [heads, n, head_dim]");
  const std::size_t heads = x.dims()[0], n = x.dims()[1], hd = x.dims()[2];
  DenseTensor out({n, heads * hd});
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t j = 0; j < hd; ++j) out.at(t, h * hd + j) = x.data()[(h * n + t) * hd + j];
  return out;
}

DenseTensor head_slice(const DenseTensor& x, std::size_t h) {
  if (x.ndim() != 3 || h >= x.dims()[0]) throw Error(ErrorCode::Shape, "head_slice out of range");
  const std::size_t n = x.dims()[1], hd = x.dims()[2];
  auto begin = x.values().begin() + static_cast<std::ptrdiff_t>(h * n * hd);
  return DenseTensor({n, hd}, std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(n * hd)));
}

}  // namespace kvsink
