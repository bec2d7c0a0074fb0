#include "kvsink/sink_detector.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <numeric>
#include <string>

#include "kvsink/error.hpp"

namespace kvsink {

void SinkProfile::validate() const {
  if (total_layers == 0 || emergence_layer >= total_layers) {
    throw Error(ErrorCode::Config, "profile emergence layer must be < total layers",
                {{"model", model_name}, {"emergence_layer", std::to_string(emergence_layer)},
                 {"total_layers", std::to_string(total_layers)}});
  }
  if (outlier_channels.empty()) throw Error(ErrorCode::Config, "profile needs at least one outlier channel");
  for (std::size_t c : outlier_channels) {
    if (c >= hidden_size) {
      throw Error(ErrorCode::Config, "outlier channel outside hidden size",
                  {{"channel", std::to_string(c)}, {"hidden_size", std::to_string(hidden_size)}});
    }
  }
}

const std::vector<SinkProfile>& builtin_profiles() {
  static const std::vector<SinkProfile> registry = {
      {"LLaMA2-7B", 32, 1, 4096, {2533, 1415}},
      {"LLaMA2-13B", 40, 3, 5120, {4743, 2100}},
      {"Mistral-7B", 32, 1, 4096, {2070, 3398}},
      {"LLaMA3-8B", 32, 1, 4096, {788, 1384, 4062}},
      {"LLaMA3.1-8B-instruct", 32, 1, 4096, {788, 1384, 4062}},
      {"LLaMA3.2-1B", 16, 1, 2048, {400, 698, 2029, 1159}},
      {"LLaMA3.2-3B", 28, 1, 3072, {588, 1016, 3046, 1731}},
  };
  return registry;
}

std::optional<SinkProfile> find_builtin_profile(std::string_view model_name) {
  auto lower = [](std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(), [](unsigned char ch) { return std::tolower(ch); });
    return out;
  };
  for (const auto& p : builtin_profiles())
    if (lower(p.model_name) == lower(model_name)) return p;
  return std::nullopt;
}

SinkSet detect_sinks(const DenseTensor& h, const SinkProfile& profile, std::size_t k,
                     std::optional<double> magnitude_ratio) {
  if (h.ndim() != 2) throw Error(ErrorCode::Shape, "detect_sinks expects the [n, d] emergence-layer output");
  if (h.cols() != profile.hidden_size) {
    throw Error(ErrorCode::Shape, "emergence-layer width does not match profile hidden size",
                {{"width", std::to_string(h.cols())}, {"hidden_size", std::to_string(profile.hidden_size)}});
  }
  for (std::size_t c : profile.outlier_channels)
    if (c >= h.cols()) throw Error(ErrorCode::Shape, "outlier channel outside tensor width");

  SinkSet out;
  out.k_requested = k;
  if (k == 0 || h.rows() == 0) return out;

  const std::size_t n = h.rows();
  std::vector<double> score(n, -1.0);  // -1: no surviving candidate
  for (std::size_t c : profile.outlier_channels) {
    double floor_mag = 0.0;
    if (magnitude_ratio) {
      std::vector<double> mags(n);
      for (std::size_t i = 0; i < n; ++i) mags[i] = std::fabs(h.at(i, c));
      floor_mag = *magnitude_ratio * median(std::move(mags));
    }
    for (std::size_t i = 0; i < n; ++i) {
      const double m = std::fabs(h.at(i, c));
      if (magnitude_ratio && m < floor_mag) continue;
      score[i] = std::max(score[i], m);
    }
  }
  std::vector<std::size_t> cand;
  for (std::size_t i = 0; i < n; ++i)
    if (score[i] >= 0.0) cand.push_back(i);
  const std::size_t take = std::min(k, cand.size());
  std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(take), cand.end(),
                    [&](std::size_t a, std::size_t b) { return score[a] != score[b] ? score[a] > score[b] : a < b; });
  cand.resize(take);
  std::sort(cand.begin(), cand.end());
  out.indices = std::move(cand);
  return out;
}

SinkSet preserve_first_n(std::size_t seq_len, std::size_t n) {
  SinkSet s;
  s.k_requested = n;
  s.indices.resize(std::min(n, seq_len));
  std::iota(s.indices.begin(), s.indices.end(), std::size_t{0});
  return s;
}

namespace {

std::vector<double> column_abs_max(const DenseTensor& x) {
  std::vector<double> out(x.cols(), 0.0);
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) out[c] = std::max(out[c], std::fabs(x.at(r, c)));
  return out;
}

std::vector<double> abs_values(std::span<const double> v) {
  std::vector<double> out(v.size());
  std::transform(v.begin(), v.end(), out.begin(), [](double x) { return std::fabs(x); });
  return out;
}

bool crosses(double magnitude, double threshold) { return magnitude > 0.0 && magnitude >= threshold; }

}  // namespace

SinkProfile discover_profile(std::span<const DenseTensor> layer_outputs, double ratio, std::size_t max_channels,
                             std::string model_name) {
  if (layer_outputs.empty()) throw Error(ErrorCode::Shape, "discover_profile needs at least one layer");
  const auto& dims = layer_outputs.front().dims();
  if (dims.size() != 2) throw Error(ErrorCode::Shape, "layer outputs must be [n, d]");
  for (const auto& h : layer_outputs)
    if (h.dims() != dims) throw Error(ErrorCode::Shape, "layer outputs must share one [n, d] shape");

  const std::size_t num_layers = layer_outputs.size(), d = dims[1];
  std::vector<std::vector<double>> colmax(num_layers);
  std::vector<std::vector<bool>> hot(num_layers, std::vector<bool>(d, false));
  std::optional<std::size_t> first, last;
  for (std::size_t l = 0; l < num_layers; ++l) {
    const double threshold = ratio * median(abs_values(layer_outputs[l].data()));
    colmax[l] = column_abs_max(layer_outputs[l]);
    for (std::size_t c = 0; c < d; ++c) {
      if (crosses(colmax[l][c], threshold)) {
        hot[l][c] = true;
        if (!first) first = l;
        last = l;
      }
    }
  }
  if (!first) {
    throw Error(ErrorCode::DiscoveryFailure, "no channel crosses the outlier threshold",
                {{"ratio", std::to_string(ratio)}});
  }

  // Layers between the first and last crossing stand in for the
  // stabilization stage; a channel must be hot in at least half of them.
  const std::size_t span = *last - *first + 1;
  std::vector<std::size_t> selected;
  std::vector<double> peak(d, 0.0);
  for (std::size_t c = 0; c < d; ++c) {
    std::size_t count = 0;
    for (std::size_t l = *first; l <= *last; ++l) {
      if (hot[l][c]) ++count;
      peak[c] = std::max(peak[c], colmax[l][c]);
    }
    if (count > 0 && 2 * count >= span) selected.push_back(c);
  }
  if (selected.empty()) throw Error(ErrorCode::DiscoveryFailure, "no channel is persistently above threshold");
  std::sort(selected.begin(), selected.end(),
            [&](std::size_t a, std::size_t b) { return peak[a] != peak[b] ? peak[a] > peak[b] : a < b; });
  if (selected.size() > max_channels) selected.resize(max_channels);
  std::sort(selected.begin(), selected.end());

  std::size_t emergence = *first;
  for (std::size_t l = *first; l <= *last; ++l) {
    if (std::any_of(selected.begin(), selected.end(), [&](std::size_t c) { return hot[l][c]; })) {
      emergence = l;
      break;
    }
  }
  SinkProfile p{std::move(model_name), num_layers, emergence, d, std::move(selected)};
  return p;
}

std::string_view stage_name(Stage s) {
  switch (s) {
    case Stage::Initial: return "initial";
    case Stage::Emergence: return "emergence";
    case Stage::Stabilization: return "stabilization";
    case Stage::Dissipation: return "dissipation";
    case Stage::Final: return "final";
  }
  return "?";
}

std::optional<std::size_t> StageReport::first_layer(Stage s) const {
  for (const auto& l : layers)
    if (l.stage == s) return l.layer;
  return std::nullopt;
}

std::vector<Stage> StageReport::labels() const {
  std::vector<Stage> out;
  out.reserve(layers.size());
  for (const auto& l : layers) out.push_back(l.stage);
  return out;
}

StageReport classify_stages(std::span<const LayerActivations> layers, const SinkProfile& profile, double ratio) {
  StageReport report;
  if (layers.empty()) return report;
  const std::size_t n = layers.front().h.rows(), d = layers.front().h.cols();
  for (std::size_t c : profile.outlier_channels)
    if (c >= d) throw Error(ErrorCode::Shape, "outlier channel outside hidden width");
  std::vector<bool> is_outlier(d, false);
  for (std::size_t c : profile.outlier_channels) is_outlier[c] = true;

  const std::size_t num_layers = layers.size();
  std::vector<bool> hot_h(num_layers), hot_out(num_layers);
  for (std::size_t l = 0; l < num_layers; ++l) {
    const LayerActivations& a = layers[l];
    if (a.h.rows() != n || a.h.cols() != d || a.h_prime.dims() != a.h.dims() || a.x_down_out.dims() != a.h.dims() ||
        a.x_down_in.rows() != n) {
      throw Error(ErrorCode::Shape, "per-layer activations are not aligned", {{"layer", std::to_string(l)}});
    }
    std::vector<double> background;
    background.reserve(n * d);
    LayerStageStats s;
    s.layer = l;
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < d; ++c) {
        if (is_outlier[c]) {
          s.max_h = std::max(s.max_h, std::fabs(a.h.at(r, c)));
          s.max_h_prime = std::max(s.max_h_prime, std::fabs(a.h_prime.at(r, c)));
          s.max_x_down_out = std::max(s.max_x_down_out, std::fabs(a.x_down_out.at(r, c)));
        } else {
          background.push_back(std::fabs(a.h.at(r, c)));
        }
      }
    }
    for (double v : a.x_down_in.data()) s.max_x_down_in = std::max(s.max_x_down_in, std::fabs(v));
    s.threshold = ratio * median(std::move(background));
    hot_h[l] = crosses(s.max_h, s.threshold);
    hot_out[l] = crosses(s.max_x_down_out, s.threshold);
    report.layers.push_back(s);
  }

  auto warn = [&](const std::string& msg) {
    report.warning = true;
    if (!report.warning_message.empty()) report.warning_message += "; ";
    report.warning_message += msg;
  };

  std::optional<std::size_t> emergence;
  for (std::size_t l = 0; l < num_layers && !emergence; ++l)
    if (hot_h[l] && hot_out[l]) emergence = l;
  if (!emergence) {
    for (std::size_t l = 0; l < num_layers && !emergence; ++l)
      if (hot_h[l]) emergence = l;
    if (!emergence) return report;  // no outliers: every layer stays initial
    warn("stable outliers appear without a down-projection crossing");
  }

  // Stable-outlier positions and signs at emergence.
  struct Position {
    std::size_t token, channel;
    double sign;
  };
  std::vector<Position> positions;
  const LayerActivations& em = layers[*emergence];
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c : profile.outlier_channels) {
      const double v = em.h.at(r, c);
      if (crosses(std::fabs(v), report.layers[*emergence].threshold)) positions.push_back({r, c, v > 0 ? 1.0 : -1.0});
    }
  auto opposite_recross = [&](std::size_t l) {
    const double threshold = report.layers[l].threshold;
    return std::any_of(positions.begin(), positions.end(), [&](const Position& p) {
      const double v = layers[l].x_down_out.at(p.token, p.channel);
      return crosses(std::fabs(v), threshold) && v * p.sign < 0.0;
    });
  };

  report.layers[*emergence].stage = Stage::Emergence;
  std::size_t l = *emergence + 1;
  while (l < num_layers && hot_h[l] && !opposite_recross(l)) report.layers[l++].stage = Stage::Stabilization;
  if (l < num_layers) {
    if (!opposite_recross(l)) warn("stable outliers vanish without an opposite-sign down-projection spike");
    // Dissipation runs from the re-crossing until H drops below threshold.
    while (l < num_layers) {
      report.layers[l].stage = Stage::Dissipation;
      const bool done = !hot_h[l];
      ++l;
      if (done) break;
    }
  }
  for (; l < num_layers; ++l) {
    report.layers[l].stage = Stage::Final;
    if (hot_h[l]) warn("outliers re-appear after dissipation at layer " + std::to_string(l));
  }
  return report;
}

}  // namespace kvsink
