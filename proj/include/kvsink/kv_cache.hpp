#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "kvsink/quantizer.hpp"
#include "kvsink/sink_set.hpp"
#include "kvsink/tensor.hpp"

namespace kvsink {

/// Byte accounting under the packed code layout. Full-precision rows (sinks,
/// pending per-channel buffers, pass-through payloads) count 16 bits per
/// element; each group's params count 4 bytes (fp16 scale + int16 zero);
/// each sparse outlier counts 6 bytes (uint32 index + fp16 value).
struct Footprint {
  std::uint64_t quantized_bytes = 0;
  std::uint64_t sink_bytes = 0;
  std::uint64_t params_bytes = 0;
  std::uint64_t sparse_bytes = 0;
  std::uint64_t buffer_bytes = 0;

  std::uint64_t total() const noexcept {
    return quantized_bytes + sink_bytes + params_bytes + sparse_bytes + buffer_bytes;
  }
  Footprint& operator+=(const Footprint& o);
  friend Footprint operator+(Footprint a, const Footprint& b) { return a += b; }
  friend bool operator==(const Footprint&, const Footprint&) = default;
};

inline constexpr std::uint64_t kFullPrecisionBytes = 2;
inline constexpr std::uint64_t kGroupParamBytes = 4;
inline constexpr std::uint64_t kSparseEntryBytes = 6;

/// Closed-form footprint of a cache with `tokens` tokens (of which `sinks`
/// are preserved) over `layers` layers of width `width` (Key and Value each).
Footprint estimate_footprint(std::size_t layers, std::size_t tokens, std::size_t width, int bits,
                             std::size_t sinks = 0);

/// Mixed-precision per-layer KV cache. Non-sink rows are quantized under the
/// scheme; sink rows sit verbatim in a position-indexed side table.
///
/// Per-token streams quantize every appended row immediately. Per-channel
/// streams hold decode-time rows at full precision until group_size of them
/// accumulate, then quantize the completed token group. A prefill bulk load
/// quantizes its non-sink block in one pass, exactly like quantize_scheme.
class KVCache {
 public:
  KVCache(std::size_t layers, std::size_t width, SchemePreset scheme);

  std::size_t layer_count() const noexcept { return layers_.size(); }
  std::size_t width() const noexcept { return width_; }
  const SchemePreset& scheme() const noexcept { return scheme_; }

  /// Tokens appended to layer 0.
  std::size_t sequence_length() const noexcept;
  std::size_t token_count(std::size_t layer) const;
  std::size_t sink_count(std::size_t layer) const;
  std::size_t quantized_count(std::size_t layer) const;  // includes pending rows
  SinkSet sink_tokens(std::size_t layer) const;

  void set_static_params(std::size_t layer, QuantParams key, QuantParams value);
  const QuantParams* static_key_params(std::size_t layer) const;
  const QuantParams* static_value_params(std::size_t layer) const;

  void append(std::size_t layer, std::span<const double> key, std::span<const double> value, bool is_sink);

  /// Loads the prefill K/V of an empty layer. Static components without
  /// frozen params are calibrated on the non-sink rows and frozen.
  void bulk_load(std::size_t layer, const DenseTensor& keys, const DenseTensor& values, const SinkSet& sinks);

  /// Dequantized K and V in original token order, sink rows spliced back.
  std::pair<DenseTensor, DenseTensor> reconstruct(std::size_t layer) const;

  Footprint layer_footprint(std::size_t layer) const;
  Footprint memory_footprint() const;

 private:
  struct Stream {
    QuantSpec spec;
    std::vector<QuantizedTensor> blocks;
    std::size_t block_rows = 0;
    std::vector<std::vector<double>> pending;
    std::optional<QuantParams> frozen;
  };
  struct Slot {
    bool sink = false;
    std::size_t index = 0;  // position among non-sink rows
  };
  struct Layer {
    std::vector<Slot> order;
    Stream key, value;
    std::map<std::size_t, std::pair<std::vector<double>, std::vector<double>>> sinks;
    std::size_t non_sink = 0;
  };

  Layer& slot(std::size_t layer);
  const Layer& slot(std::size_t layer) const;
  void push_row(Stream& s, std::span<const double> row);
  void flush_block(Stream& s, const DenseTensor& rows);
  static Footprint stream_footprint(const Stream& s, std::size_t width);
  static std::vector<double> stream_rows(const Stream& s, std::size_t width);

  std::size_t width_;
  SchemePreset scheme_;
  std::vector<Layer> layers_;
};

}  // namespace kvsink
