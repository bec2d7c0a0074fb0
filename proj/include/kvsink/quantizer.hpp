#pragma once

// Group-wise asymmetric integer quantization.
//
//   Q(X)  = clamp(round(X / scale) + zero, 0, 2^n - 1)
//   X'    = scale * (Q(X) - zero)
//   scale = (max - min) / (2^n - 1),  zero = -round(min / scale)
//
// Rounding is round-half-to-even. The zero point is never clamped; only codes
// are. Groups whose (clipped) range is zero are "degenerate" and store their
// constant instead of a scale.
//
// Tensors are viewed as [tokens, channels]. Group layouts:
//   per_token  dynamic : one group per (token, channel segment of group_size)
//   per_token  static  : one group per channel segment, shared by all tokens
//   per_channel dynamic: one group per (channel, token segment of group_size)
//   per_channel static : one group per channel, shared by all tokens
//   per_tensor         : a single group
// A trailing segment smaller than group_size forms its own group.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kvsink/sink_set.hpp"
#include "kvsink/tensor.hpp"

namespace kvsink {

enum class Axis { PerToken, PerChannel, PerTensor };
enum class QuantMode { Dynamic, Static };

/// Bit width that selects lossless pass-through storage (accounted as fp16).
inline constexpr int kPassthroughBits = 16;

struct QuantSpec {
  int bits = 4;
  Axis axis = Axis::PerToken;
  QuantMode mode = QuantMode::Dynamic;
  std::size_t group_size = 128;
  std::optional<double> clip;   // tail mass truncated per side, in [0, 0.5)
  double sparse_fraction = 0.0; // per-vector share kept at full precision

  bool passthrough() const noexcept { return bits == kPassthroughBits; }
  std::uint32_t max_code() const noexcept { return (1u << bits) - 1u; }
  void validate() const;

  static QuantSpec lossless() { QuantSpec s; s.bits = kPassthroughBits; return s; }
};

std::string_view axis_name(Axis a);
std::string_view mode_name(QuantMode m);
Axis parse_axis(std::string_view s);
QuantMode parse_mode(std::string_view s);

struct GroupLayout {
  Axis axis = Axis::PerToken;
  QuantMode mode = QuantMode::Dynamic;
  std::size_t group_size = 1;
  std::size_t rows = 0;  // unused by static layouts
  std::size_t cols = 0;

  static GroupLayout make(const QuantSpec& spec, std::size_t rows, std::size_t cols);

  std::size_t group_count() const;
  std::size_t group_of(std::size_t r, std::size_t c) const;
  /// Position of element (r, c) in the packed code stream: row-major for
  /// per-token and per-tensor layouts, column-major for per-channel.
  std::size_t code_position(std::size_t r, std::size_t c) const;
  /// True when group `g` holds elements of token row `r`.
  bool group_spans_row(std::size_t g, std::size_t r) const;
};

struct GroupParams {
  double scale = 0.0;
  std::int64_t zero = 0;
  bool degenerate = true;
  double constant = 0.0;  // reconstruction value for degenerate groups
  double lo = 0.0;        // effective (clipped) range used for the params
  double hi = 0.0;
};

struct QuantParams {
  GroupLayout layout;
  std::vector<GroupParams> groups;

  std::size_t group_count() const noexcept { return groups.size(); }
};

/// n-bit codes packed contiguously, least-significant bit first within each byte.
class PackedCodes {
 public:
  PackedCodes() = default;
  PackedCodes(int bits, std::size_t count);

  int bits() const noexcept { return bits_; }
  std::size_t count() const noexcept { return count_; }
  const std::vector<std::uint8_t>& bytes() const noexcept { return bytes_; }

  std::uint32_t get(std::size_t i) const;
  void set(std::size_t i, std::uint32_t code);

  static PackedCodes from_bytes(int bits, std::size_t count, std::vector<std::uint8_t> bytes);

 private:
  int bits_ = 0;
  std::size_t count_ = 0;
  std::vector<std::uint8_t> bytes_;
};

struct SparseEntry {
  std::size_t index = 0;  // flat row-major index
  double value = 0.0;
  friend bool operator==(const SparseEntry&, const SparseEntry&) = default;
};

struct QuantizedTensor {
  std::vector<std::size_t> dims;
  QuantSpec spec;
  QuantParams params;
  PackedCodes codes;
  std::vector<SparseEntry> sparse;  // ascending index
  std::vector<double> raw;          // pass-through payload

  std::size_t rows() const noexcept { return params.layout.rows; }
  std::size_t cols() const noexcept { return params.layout.cols; }
  std::uint32_t code_at(std::size_t r, std::size_t c) const {
    return codes.get(params.layout.code_position(r, c));
  }
};

struct CalibrationSet {
  std::vector<DenseTensor> samples;
};

/// Flat indices isolated at full precision by dense-and-sparse selection:
/// the round(f_s * len) largest-|x| entries of every vector (token row for
/// per-token, channel column for per-channel, the whole tensor for
/// per-tensor). Rows flagged in `excluded` are neither candidates nor counted.
std::vector<std::size_t> select_sparse(const DenseTensor& x, const QuantSpec& spec,
                                       const std::vector<bool>& excluded = {});

/// Per-group params from `x` alone. Rows in `exclude` contribute no
/// statistics. In static mode this is calibration on the single sample `x`.
QuantParams compute_params(const DenseTensor& x, const QuantSpec& spec, const SinkSet& exclude = {});

QuantizedTensor quantize(const DenseTensor& x, const QuantParams& params, const QuantSpec& spec);

/// compute_params followed by quantize.
QuantizedTensor quantize(const DenseTensor& x, const QuantSpec& spec);

DenseTensor dequantize(const QuantizedTensor& q);

/// Global per-group min/max over every calibration sample. When
/// `exclude_sinks` is set, rows listed in `sinks_per_sample[i]` of sample i
/// are skipped.
QuantParams calibrate(const CalibrationSet& cal, const QuantSpec& spec, bool exclude_sinks = false,
                      std::span<const SinkSet> sinks_per_sample = {});

struct SchemePreset {
  std::string name;
  QuantSpec key;
  QuantSpec value;
};

/// Presets: pt_kv_static, pt_kv_dynamic, pc_key_pt_value_static,
/// kvquant_like (per-channel static Key, per-token dynamic Value, both with
/// dense-and-sparse isolation, default f_s = 0.01) and passthrough.
SchemePreset make_scheme(std::string_view name, int bits, std::size_t group_size,
                         std::optional<double> sparse_fraction = std::nullopt);
std::vector<std::string> scheme_names();

struct QuantizedPair {
  QuantizedTensor keys;
  QuantizedTensor values;
  std::vector<std::size_t> kept_rows;  // original token index of each quantized row
};

/// Quantizes the non-sink rows of K and V under `scheme`. Sink rows are left
/// out entirely; the cache stores them at full precision. Static components
/// use the supplied params, or are calibrated on the non-sink rows.
QuantizedPair quantize_scheme(const DenseTensor& keys, const DenseTensor& values, const SchemePreset& scheme,
                              const SinkSet& sinks, const QuantParams* key_static = nullptr,
                              const QuantParams* value_static = nullptr);

double mean_squared_error(const DenseTensor& a, const DenseTensor& b);

}  // namespace kvsink
