#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kvsink/sink_set.hpp"
#include "kvsink/tensor.hpp"

namespace kvsink {

/// Where stable outliers first appear for a model, and in which hidden channels.
struct SinkProfile {
  std::string model_name;
  std::size_t total_layers = 0;
  std::size_t emergence_layer = 0;
  std::size_t hidden_size = 0;
  std::vector<std::size_t> outlier_channels;

  void validate() const;
  friend bool operator==(const SinkProfile&, const SinkProfile&) = default;
};

inline constexpr std::size_t kDefaultSinkCount = 5;
inline constexpr double kDefaultOutlierRatio = 100.0;

/// Profiles measured on released checkpoints, in registry order.
const std::vector<SinkProfile>& builtin_profiles();
std::optional<SinkProfile> find_builtin_profile(std::string_view model_name);

/// Top-k tokens by |h[i, c]| over the profile's outlier channels. Each token
/// is scored by its largest candidate; ties go to the lower index. With
/// `magnitude_ratio` set, a (token, channel) candidate must also reach
/// ratio * median(|h[:, c]|), so fewer than k tokens may be returned.
SinkSet detect_sinks(const DenseTensor& h, const SinkProfile& profile, std::size_t k = kDefaultSinkCount,
                     std::optional<double> magnitude_ratio = std::nullopt);

/// Offline discovery of emergence layer and outlier channels from per-layer
/// decoder outputs H^l (all [n, d]). Throws DiscoveryFailure when nothing
/// crosses ratio * median.
SinkProfile discover_profile(std::span<const DenseTensor> layer_outputs, double ratio = kDefaultOutlierRatio,
                             std::size_t max_channels = 4, std::string model_name = "discovered");

/// {0, ..., min(n, seq_len) - 1}.
SinkSet preserve_first_n(std::size_t seq_len, std::size_t n);

enum class Stage { Initial, Emergence, Stabilization, Dissipation, Final };
std::string_view stage_name(Stage s);

/// Activations of one decoder layer used by stage classification.
struct LayerActivations {
  DenseTensor x_down_in;   // gated FFN activation, [n, d_ff]
  DenseTensor x_down_out;  // down-projection output, [n, d]
  DenseTensor h_prime;     // residual after attention, [n, d]
  DenseTensor h;           // layer output, [n, d]
};

struct LayerStageStats {
  std::size_t layer = 0;
  double max_x_down_in = 0.0;   // over all entries (d_ff has no channel mapping)
  double max_x_down_out = 0.0;  // remaining maxima: over the outlier channels
  double max_h_prime = 0.0;
  double max_h = 0.0;
  double threshold = 0.0;
  Stage stage = Stage::Initial;
};

struct StageReport {
  std::vector<LayerStageStats> layers;
  bool warning = false;
  std::string warning_message;

  std::optional<std::size_t> first_layer(Stage s) const;
  std::vector<Stage> labels() const;
};

/// Labels every layer initial / emergence / stabilization / dissipation /
/// final. The threshold of layer l is ratio * median(|H^l|) taken over the
/// non-outlier channels.
StageReport classify_stages(std::span<const LayerActivations> layers, const SinkProfile& profile,
                            double ratio = kDefaultOutlierRatio);

}  // namespace kvsink
