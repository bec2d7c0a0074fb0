#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "kvsink/quantizer.hpp"
#include "kvsink/sink_set.hpp"
#include "kvsink/tensor.hpp"

namespace kvsink {

/// Quantization error of one spec, split by whether a group holds sink rows.
/// All values are raw MSEs; display scaling is applied only when formatting.
struct ErrorRow {
  QuantSpec spec;
  double mse_overall = 0.0;
  double mse_without_sink_groups = 0.0;  // groups holding no sink row
  std::optional<double> mse_with_sink_groups;  // dynamic only
  std::size_t elements_without_sink_groups = 0;
  std::size_t elements_with_sink_groups = 0;
  // Static only: error on the non-sink rows, first with sink rows included in
  // calibration, then with them removed from calibration and quantization.
  std::optional<double> mse_non_sink_tokens;
  std::optional<double> mse_sinks_excluded;
};

struct ErrorReport {
  SinkSet sinks;
  std::size_t tokens = 0;
  std::size_t channels = 0;
  std::vector<ErrorRow> rows;
};

/// Static specs need `cal`; its samples use `cal_sinks` (one SinkSet per
/// sample) when excluding sinks, defaulting to `sinks` for every sample.
ErrorReport error_decomposition(const DenseTensor& x, const SinkSet& sinks, std::span<const QuantSpec> specs,
                                const CalibrationSet* cal = nullptr, std::span<const SinkSet> cal_sinks = {});

struct BiasOptions {
  bool centroid = false;      // mean cosine against the mean bias instead of pairwise
  bool keep_vectors = false;
};

struct HeadBias {
  std::size_t layer = 0;
  std::size_t head = 0;
  std::size_t first_token = 0;  // min(S); earlier tokens have no bias
  std::size_t tokens = 0;       // number of bias vectors
  double average_cosine = 0.0;
  std::size_t pairs = 0;
  std::size_t degenerate_pairs = 0;  // pairs touching a zero vector, scored 0
  std::vector<std::vector<double>> vectors;
};

struct BiasReport {
  std::vector<HeadBias> heads;
};

/// Sink contribution b_t = sum_{i in S} A[t, i] V[i] for one head. A is a
/// causal [n, n] matrix, V is [n, d_k].
std::vector<std::vector<double>> bias_vectors(const DenseTensor& a, const DenseTensor& v, const SinkSet& sinks);

HeadBias attention_bias(const DenseTensor& a, const DenseTensor& v, const SinkSet& sinks,
                        const BiasOptions& options = {});

/// All heads of one layer. A is [heads, n, n]; V is [n, kv_heads * d_k]
/// with grouped-query sharing.
BiasReport attention_bias_layer(const DenseTensor& a, const DenseTensor& v, const SinkSet& sinks,
                                std::size_t heads, std::size_t kv_heads, std::size_t layer = 0,
                                const BiasOptions& options = {});

/// Causal softmax(Q K^T / sqrt(d_k)) per head: [heads, n, n].
DenseTensor attention_probabilities(const DenseTensor& q, const DenseTensor& k, std::size_t heads,
                                    std::size_t kv_heads);

struct DisruptionRow {
  QuantSpec spec;
  double bias_l2_delta = 0.0;          // mean over heads and t >= min(S)
  double attention_score_delta = 0.0;  // max |dA| over the sink columns
};

struct DisruptionReport {
  bool sinks_preserved = false;
  std::vector<DisruptionRow> rows;
};

/// Attention and sink bias recomputed from fake-quantized K and V. With
/// `preserve_sinks` the sink rows stay at full precision, as in the mixed
/// cache. Static specs calibrate on the (non-sink) rows being quantized.
DisruptionReport bias_disruption(const DenseTensor& q, const DenseTensor& k, const DenseTensor& v,
                                 const SinkSet& sinks, std::size_t heads, std::size_t kv_heads,
                                 std::span<const QuantSpec> specs, bool preserve_sinks = false);

struct HeadDiagnostics {
  std::size_t head = 0;
  double mean_cosine = 0.0;  // cos(q_t, k_s), t non-sink, s in S, s <= t
  std::size_t pairs = 0;
  double q_norm_ratio = 0.0;  // mean sink row norm / mean non-sink row norm
  double k_norm_ratio = 0.0;
  std::optional<double> v_norm_ratio;
};

struct QkDiagnostics {
  std::vector<HeadDiagnostics> heads;
};

QkDiagnostics qk_sink_diagnostics(const DenseTensor& q, const DenseTensor& k, const DenseTensor* v,
                                  const SinkSet& sinks, std::size_t heads, std::size_t kv_heads);

struct HeadNorms {
  std::size_t head = 0;
  std::vector<double> q, k, v;  // per token
};

struct NormProfile {
  std::size_t layer = 0;
  std::vector<HeadNorms> heads;
};

NormProfile norm_profile(const DenseTensor& q, const DenseTensor& k, const DenseTensor& v, std::size_t heads,
                         std::size_t kv_heads, std::size_t layer = 0);

/// Dequantized copy of x under spec. Rows in `keep` are copied verbatim and
/// take no part in parameter computation.
DenseTensor fake_quantize(const DenseTensor& x, const QuantSpec& spec, const SinkSet& keep = {});

}  // namespace kvsink
