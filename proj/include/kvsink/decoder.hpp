#pragma once

// Pre-norm transformer decoder without embeddings:
//
//   H'  = MHSA(LN_mhsa(H)) + H
//   H   = (sigma(LN_ffn(H') W_g) * LN_ffn(H') W_u) W_d + H'
//
// with a causal mask, optional grouped-query attention and optional RoPE.
// Every intermediate can be captured per layer, and injection hooks edit the
// down-projection output before the FFN residual add.

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "kvsink/kv_cache.hpp"
#include "kvsink/quantizer.hpp"
#include "kvsink/sink_detector.hpp"
#include "kvsink/tensor.hpp"

namespace kvsink {

enum class Activation { Silu, Gelu };

struct DecoderConfig {
  std::size_t layers = 2;
  std::size_t hidden = 64;
  std::size_t heads = 4;
  std::size_t kv_heads = 4;
  std::size_t ffn = 128;
  Activation activation = Activation::Silu;
  double ln_epsilon = 1e-5;
  bool rope = false;
  double rope_theta = 10000.0;
  std::uint64_t seed = 0;

  std::size_t head_dim() const noexcept { return hidden / heads; }
  std::size_t kv_width() const noexcept { return kv_heads * head_dim(); }
  void validate() const;
};

struct LayerWeights {
  DenseTensor wq, wk, wv, wo;  // [d, d], [d, kv], [d, kv], [d, d]
  DenseTensor wg, wu, wd;      // [d, ffn], [d, ffn], [ffn, d]
  std::vector<double> ln_mhsa_gain, ln_ffn_gain;
};

struct DecoderWeights {
  std::vector<LayerWeights> layers;

  /// Gaussian init with std = scale / sqrt(fan_in), unit LN gains, seeded by cfg.seed.
  static DecoderWeights random(const DecoderConfig& cfg, double scale = 1.0);
  static DecoderWeights zeros(const DecoderConfig& cfg);
  void validate(const DecoderConfig& cfg) const;
};

enum class HookMode {
  AddToFfnOutput,  // X_d_out[t, c] += magnitude
  NegateChannels,  // X_d_out[t, c] -= magnitude * H'[t, c]  (1.0 cancels the residual)
  AddToChannel,    // X_d_out[:, c] += magnitude for every token; `token` is ignored
};

struct HookTarget {
  std::size_t token = 0;
  std::size_t channel = 0;
  double magnitude = 0.0;
};

struct InjectionHook {
  std::size_t layer = 0;
  HookMode mode = HookMode::AddToFfnOutput;
  std::vector<HookTarget> targets;
};

enum class ActivationKind { H, HPrime, XDownIn, XDownOut, Q, K, V, A };

std::string_view activation_kind_name(ActivationKind k);
ActivationKind parse_activation_kind(std::string_view s);
std::span<const ActivationKind> all_activation_kinds();

class CaptureSet {
 public:
  CaptureSet() = default;
  CaptureSet(std::initializer_list<ActivationKind> kinds) {
    for (auto k : kinds) add(k);
  }
  static CaptureSet all() {
    CaptureSet c;
    c.mask_ = 0xFF;
    return c;
  }
  void add(ActivationKind k) { mask_ |= 1u << static_cast<unsigned>(k); }
  bool has(ActivationKind k) const { return (mask_ >> static_cast<unsigned>(k)) & 1u; }
  bool empty() const { return mask_ == 0; }

 private:
  std::uint32_t mask_ = 0;
};

/// Per-layer captured activations. A is stored as [heads, n, n]; the rest are
/// [n, width].
class ActivationDumps {
 public:
  void put(std::size_t layer, ActivationKind kind, DenseTensor t);
  const DenseTensor* find(std::size_t layer, ActivationKind kind) const;
  const DenseTensor& at(std::size_t layer, ActivationKind kind) const;
  std::size_t layer_count() const;
  std::vector<DenseTensor> series(ActivationKind kind) const;
  /// Inputs for classify_stages; requires H, H', X_d_in and X_d_out per layer.
  std::vector<LayerActivations> stage_inputs() const;
  const std::map<std::pair<std::size_t, ActivationKind>, DenseTensor>& entries() const { return entries_; }
  bool empty() const { return entries_.empty(); }

 private:
  std::map<std::pair<std::size_t, ActivationKind>, DenseTensor> entries_;
};

struct ForwardResult {
  DenseTensor output;
  ActivationDumps dumps;
};

ForwardResult decoder_forward(const DenseTensor& h0, const DecoderWeights& weights, const DecoderConfig& cfg,
                              std::span<const InjectionHook> hooks = {}, const CaptureSet& capture = {});

enum class Preservation { KVSink, FirstN, None };
std::string_view preservation_name(Preservation p);
Preservation parse_preservation(std::string_view s);

struct PrefillOptions {
  Preservation mode = Preservation::KVSink;
  std::size_t k = kDefaultSinkCount;  // sink budget, or N for first-N
  std::optional<double> magnitude_ratio;
  CaptureSet capture;
};

struct PrefillResult {
  DenseTensor output;
  KVCache cache;
  SinkSet sinks;
  ActivationDumps dumps;
  double detection_ms = 0.0;
  double prefill_ms = 0.0;
};

/// Prefill where every layer's K/V pass through the mixed-precision cache
/// before attention consumes them. In KVSink mode, sinks are predicted once
/// from the output of the emergence layer and preserved in all later layers.
PrefillResult prefill_with_kvsink(const DenseTensor& h0, const DecoderWeights& weights, const DecoderConfig& cfg,
                                  std::span<const InjectionHook> hooks, const SinkProfile& profile,
                                  const SchemePreset& scheme, const PrefillOptions& options);

struct PlantedOutlier {
  std::size_t token = 0;
  std::size_t channel = 0;
  double magnitude = 0.0;
};

struct SynthesisOptions {
  double weight_scale = 1.0;
  /// Multiplies the rows of W_K and W_V fed by planted channels, so sink
  /// tokens carry atypical K/V rows into the cache.
  double sink_kv_scale = 1.0;
  /// When positive, every token carries a shared offset channel from layer 0
  /// on, and W_Q of layers (emerge, dissipate] maps it onto the planted key
  /// rows, so queries concentrate attention on the planted tokens.
  double sink_attention = 0.0;
  double query_offset = 4.0;
};

struct SinkModelFixture {
  DecoderWeights weights;
  std::vector<InjectionHook> hooks;
};

/// Seeded random weights plus an add hook at `emerge_layer` that plants the
/// outliers and a negating hook at `dissipate_layer` that cancels them. The
/// offset channel used by sink_attention is the lowest unplanted channel.
SinkModelFixture synthesize_sink_model(const DecoderConfig& cfg, std::span<const PlantedOutlier> plants,
                                       std::size_t emerge_layer, std::size_t dissipate_layer,
                                       const SynthesisOptions& options = {});

/// Seeded standard-normal [n, d] input.
DenseTensor random_input(std::size_t tokens, std::size_t hidden, std::uint64_t seed);

}  // namespace kvsink
