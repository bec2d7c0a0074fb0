#pragma once

// JSON schemas for profiles, specs, configs and reports, CSV report tables,
// and the on-disk layouts built from KVSD dumps plus JSON manifests.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "kvsink/analysis.hpp"
#include "kvsink/decoder.hpp"
#include "kvsink/error.hpp"
#include "kvsink/kv_cache.hpp"
#include "kvsink/quantizer.hpp"
#include "kvsink/sink_detector.hpp"

namespace kvsink {

using Json = nlohmann::ordered_json;

/// {code, message, context}
Json error_json(const Error& e);
Json error_json(std::string_view code, const std::string& message);

Json to_json(const SinkProfile& p);
SinkProfile profile_from_json(const Json& j);

/// A profile reference is a JSON file path, a file in the profile directory,
/// or a builtin model name (case-insensitive).
SinkProfile load_profile(const std::string& ref);
/// KVSINK_PROFILE_DIR when set, else the profiles shipped with the sources.
std::filesystem::path default_profile_dir();
std::string profile_file_name(const SinkProfile& p);

Json to_json(const SinkSet& s);
/// Accepts a bare index array or an object with a "sinks" array.
SinkSet sinks_from_json(const Json& j);

Json to_json(const QuantSpec& s);
QuantSpec spec_from_json(const Json& j);
Json to_json(const QuantParams& p);
QuantParams params_from_json(const Json& j);

Json to_json(const DecoderConfig& c);
DecoderConfig config_from_json(const Json& j);

/// {"emerge": l, "dissipate": l, "weight_scale": s, "sink_kv_scale": s,
///  "sink_attention": s, "query_offset": s, "plants": [{"token", "channel", "magnitude"}]}
struct PlantSpec {
  std::size_t emerge = 0;
  std::size_t dissipate = 1;
  SynthesisOptions options;
  std::vector<PlantedOutlier> plants;
};
Json to_json(const PlantSpec& p);
PlantSpec plant_from_json(const Json& j);

Json to_json(const Footprint& f);

Json to_json(const ErrorReport& r, double display_scale = 1.0);
Json to_json(const BiasReport& r);
Json to_json(const DisruptionReport& r);
Json to_json(const QkDiagnostics& r);
Json to_json(const NormProfile& r);
Json to_json(const StageReport& r);

std::string to_csv(const ErrorReport& r, double display_scale = 1.0);
std::string to_csv(const BiasReport& r);
std::string to_csv(const DisruptionReport& r);
std::string to_csv(const QkDiagnostics& r);
std::string to_csv(const NormProfile& r);
std::string to_csv(const StageReport& r);

Json parse_json(const std::string& text, const std::string& what);
Json read_json_file(const std::filesystem::path& path);
void write_json_atomic(const std::filesystem::path& path, const Json& j);

// ---------------------------------------------------------------------------
// Activation dumps: one KVSD file per (layer, kind) plus manifest.json with
// entries {model, layer, kind, tokens, hidden, file, dims}.

struct ManifestEntry {
  std::string model;
  std::size_t layer = 0;
  ActivationKind kind = ActivationKind::H;
  std::size_t tokens = 0;
  std::size_t hidden = 0;
  std::string file;
  std::vector<std::size_t> dims;
};

std::vector<ManifestEntry> write_activation_dumps(const std::filesystem::path& dir, const std::string& model,
                                                  const ActivationDumps& dumps);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& dir);
/// Loads every entry; files must exist and match the recorded dims.
ActivationDumps load_activation_dumps(const std::filesystem::path& dir);

// Weights: weights.json {config, tensors: [{role, layer, file, dims}]}.
void save_weights(const std::filesystem::path& dir, const DecoderConfig& cfg, const DecoderWeights& w);
DecoderWeights load_weights(const std::filesystem::path& dir, const DecoderConfig& cfg);

// Cache snapshot: layer<l>.K.kvsd / layer<l>.V.kvsd hold the dequantized
// rows; cache.json records scheme, per-layer sinks and the footprint.
Json write_cache_snapshot(const std::filesystem::path& dir, const KVCache& cache);

// Quantized tensor: <prefix>.codes.bin (packed codes), <prefix>.qparams.json
// (spec, layout, group params, sparse entries) and <prefix>.dequant.kvsd.
Json write_quantized(const std::filesystem::path& prefix, const QuantizedTensor& q);
QuantizedTensor read_quantized(const std::filesystem::path& prefix);

}  // namespace kvsink
