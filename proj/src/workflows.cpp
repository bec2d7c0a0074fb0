#include "kvsink/workflows.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <sstream>

#include "kvsink/dump_io.hpp"

namespace kvsink {

namespace fs = std::filesystem;

namespace {

std::string flag_name(const std::string& key) {
  std::string f = "--" + key;
  std::replace(f.begin(), f.end(), '_', '-');
  return f;
}

// Typed view over a request object. Absent keys and JSON nulls are the same.
class Request {
 public:
  explicit Request(const Json& j) : j_(j) {
    if (!j_.is_object()) throw Error(ErrorCode::Usage, "request must be a JSON object");
  }

  bool has(const std::string& key) const { return j_.contains(key) && !j_.at(key).is_null(); }

  std::string str(const std::string& key) const {
    if (!has(key)) throw Error(ErrorCode::Usage, "missing required option " + flag_name(key), {{"option", key}});
    return get<std::string>(key);
  }
  std::string str(const std::string& key, const std::string& fallback) const {
    return has(key) ? get<std::string>(key) : fallback;
  }
  std::size_t count(const std::string& key, std::size_t fallback) const {
    if (!has(key)) return fallback;
    const Json& v = j_.at(key);
    if (!v.is_number_integer() || v.get<long long>() < 0) {
      throw Error(ErrorCode::Usage, flag_name(key) + " must be a non-negative integer", {{"option", key}});
    }
    return v.get<std::size_t>();
  }
  std::size_t count(const std::string& key) const {
    if (!has(key)) throw Error(ErrorCode::Usage, "missing required option " + flag_name(key), {{"option", key}});
    return count(key, 0);
  }
  double real(const std::string& key, double fallback) const { return has(key) ? get<double>(key) : fallback; }
  std::optional<double> opt_real(const std::string& key) const {
    return has(key) ? std::optional<double>(get<double>(key)) : std::nullopt;
  }
  bool flag(const std::string& key) const { return has(key) && get<bool>(key); }
  std::vector<int> ints(const std::string& key, std::vector<int> fallback) const {
    if (!has(key)) return fallback;
    const Json& v = j_.at(key);
    if (v.is_number_integer()) return {v.get<int>()};
    return get<std::vector<int>>(key);
  }

 private:
  template <class T>
  T get(const std::string& key) const {
    try {
      return j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw Error(ErrorCode::Usage, "invalid value for " + flag_name(key), {{"option", key}});
    }
  }
  const Json& j_;
};

std::string render(const Json& j) { return j.dump(2) + "\n"; }

bool csv_format(const Request& r) {
  const std::string f = r.str("format", "json");
  if (f != "json" && f != "csv") throw Error(ErrorCode::Usage, "--format must be json or csv", {{"format", f}});
  return f == "csv";
}

DenseTensor read_matrix(const std::string& path, const char* what) {
  DenseTensor t = read_dump(path);
  if (t.ndim() != 2) throw Error(ErrorCode::Shape, std::string(what) + " dump must be 2-D", {{"path", path}});
  return t;
}

// A file holding a sink list, or an inline comma-separated index list.
SinkSet resolve_sinks(const std::string& ref) {
  std::error_code ec;
  if (fs::is_regular_file(ref, ec)) return sinks_from_json(read_json_file(ref));
  std::vector<std::size_t> idx;
  std::stringstream in(ref);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item.empty()) continue;
    if (item.find_first_not_of("0123456789") != std::string::npos) {
      throw Error(ErrorCode::Usage, "--sinks must be a JSON file or a comma-separated index list", {{"sinks", ref}});
    }
    idx.push_back(std::stoull(item));
  }
  return SinkSet::from_indices(std::move(idx));
}

SinkSet request_sinks(const Request& r, std::size_t n, bool required) {
  if (r.has("sinks") && r.has("pfn")) throw Error(ErrorCode::Usage, "--sinks and --pfn are mutually exclusive");
  if (r.has("pfn")) return preserve_first_n(n, r.count("pfn"));
  if (r.has("sinks")) return resolve_sinks(r.str("sinks"));
  if (required) throw Error(ErrorCode::Usage, "missing required option --sinks");
  return {};
}

std::vector<QuantSpec> request_specs(const Request& r, std::vector<int> default_bits) {
  std::vector<QuantMode> modes;
  const std::string mode = r.str("mode", "dynamic");
  if (mode == "both") {
    modes = {QuantMode::Dynamic, QuantMode::Static};
  } else {
    modes = {parse_mode(mode)};
  }
  std::vector<QuantSpec> specs;
  for (QuantMode m : modes) {
    for (int bits : r.ints("bits", default_bits)) {
      QuantSpec s;
      s.bits = bits;
      s.axis = parse_axis(r.str("axis", "per_token"));
      s.mode = m;
      s.group_size = r.count("group", 128);
      s.clip = r.opt_real("clip");
      s.sparse_fraction = r.real("sparse", 0.0);
      s.validate();
      specs.push_back(s);
    }
  }
  return specs;
}

SchemePreset request_scheme(const Request& r, const char* default_scheme, int default_bits) {
  const int bits = r.ints("bits", {default_bits}).front();
  return make_scheme(r.str("scheme", default_scheme), bits, r.count("group", 128), r.opt_real("sparse"));
}

// Tensors for Q/K/V-style analyses: explicit files, or a dump directory and layer.
struct QkvInputs {
  DenseTensor q, k, v, a;
  bool has_q = false, has_k = false, has_v = false, has_a = false;
};

QkvInputs request_qkv(const Request& r) {
  QkvInputs in;
  if (r.has("dumps")) {
    const ActivationDumps dumps = load_activation_dumps(r.str("dumps"));
    const std::size_t layer = r.count("layer", 0);
    auto take = [&](ActivationKind kind, DenseTensor& dst, bool& flag) {
      if (const DenseTensor* t = dumps.find(layer, kind)) {
        dst = *t;
        flag = true;
      }
    };
    take(ActivationKind::Q, in.q, in.has_q);
    take(ActivationKind::K, in.k, in.has_k);
    take(ActivationKind::V, in.v, in.has_v);
    take(ActivationKind::A, in.a, in.has_a);
  }
  auto file = [&](const char* key, DenseTensor& dst, bool& flag) {
    if (r.has(key)) {
      dst = read_dump(r.str(key));
      flag = true;
    }
  };
  file("q", in.q, in.has_q);
  file("k", in.k, in.has_k);
  file("v", in.v, in.has_v);
  file("attn", in.a, in.has_a);
  return in;
}

void require_input(bool present, const char* key) {
  if (!present) throw Error(ErrorCode::Usage, std::string("missing required input --") + key);
}

std::pair<std::size_t, std::size_t> request_heads(const Request& r, const QkvInputs& in) {
  std::size_t heads = r.count("heads", 0);
  if (heads == 0 && in.has_a && in.a.ndim() == 3) heads = in.a.dims()[0];
  if (heads == 0) throw Error(ErrorCode::Usage, "missing required option --heads");
  return {heads, r.count("kv_heads", heads)};
}

Json calibration_from_dir(const fs::path& dir, ActivationKind kind, std::size_t width, CalibrationSet& out) {
  std::size_t used = 0;
  for (const auto& [key, t] : load_activation_dumps(dir).entries()) {
    if (key.second != kind || t.ndim() != 2 || t.cols() != width) continue;
    out.samples.push_back(t);
    ++used;
  }
  if (used == 0) {
    throw Error(ErrorCode::Calibration, "calibration directory has no matching dumps",
                {{"dir", dir.string()}, {"kind", std::string(activation_kind_name(kind))}});
  }
  return Json(used);
}

Footprint tensor_footprint(const QuantizedTensor& q) {
  Footprint f;
  if (q.spec.passthrough()) {
    f.quantized_bytes = q.raw.size() * kFullPrecisionBytes;
    return f;
  }
  f.quantized_bytes = q.codes.bytes().size();
  f.params_bytes = q.params.groups.size() * kGroupParamBytes;
  f.sparse_bytes = q.sparse.size() * kSparseEntryBytes;
  return f;
}

// ---------------------------------------------------------------------------
// Model setup shared by simulate, bench and synth.

struct Model {
  DecoderConfig cfg;
  DecoderWeights weights;
  std::vector<InjectionHook> hooks;
  std::optional<PlantSpec> plant;
};

Model request_model(const Request& r) {
  Model m;
  m.cfg = config_from_json(read_json_file(r.str("config")));
  if (r.has("seed")) m.cfg.seed = r.count("seed");
  if (r.has("plant")) {
    m.plant = plant_from_json(read_json_file(r.str("plant")));
    SinkModelFixture f = synthesize_sink_model(m.cfg, m.plant->plants, m.plant->emerge, m.plant->dissipate, m.plant->options);
    m.weights = std::move(f.weights);
    m.hooks = std::move(f.hooks);
  } else if (r.has("weights")) {
    m.weights = load_weights(r.str("weights"), m.cfg);
  } else {
    m.weights = DecoderWeights::random(m.cfg);
  }
  return m;
}

SinkProfile request_profile(const Request& r, const Model& m, bool required) {
  if (r.has("profile")) return load_profile(r.str("profile"));
  if (m.plant) {
    SinkProfile p;
    p.model_name = "planted";
    p.total_layers = m.cfg.layers;
    p.emergence_layer = m.plant->emerge;
    p.hidden_size = m.cfg.hidden;
    for (const auto& o : m.plant->plants)
      if (std::find(p.outlier_channels.begin(), p.outlier_channels.end(), o.channel) == p.outlier_channels.end())
        p.outlier_channels.push_back(o.channel);
    std::sort(p.outlier_channels.begin(), p.outlier_channels.end());
    return p;
  }
  if (required) throw Error(ErrorCode::Usage, "kvsink mode needs --profile or --plant");
  return {};
}

DenseTensor request_input(const Request& r, const Model& m) {
  if (r.has("input")) return read_matrix(r.str("input"), "input");
  return random_input(r.count("tokens", 64), m.cfg.hidden, m.cfg.seed + 1);
}

CaptureSet request_capture(const Request& r) {
  const std::string spec = r.str("capture", "");
  if (spec.empty()) return {};
  if (spec == "all") return CaptureSet::all();
  CaptureSet c;
  std::stringstream in(spec);
  std::string item;
  while (std::getline(in, item, ','))
    if (!item.empty()) c.add(parse_activation_kind(item));
  return c;
}

double distance(const DenseTensor& a, const DenseTensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a.values()[i] - b.values()[i]) * (a.values()[i] - b.values()[i]);
  return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// Commands

std::string cmd_detect(const Request& r) {
  const DenseTensor h = read_matrix(r.str("dump"), "H");
  const SinkProfile p = load_profile(r.str("profile"));
  const std::size_t k = r.count("k", kDefaultSinkCount);
  const SinkSet s = detect_sinks(h, p, k, r.opt_real("ratio"));
  Json out = to_json(s);
  out["profile"] = p.model_name;
  out["emergence_layer"] = p.emergence_layer;
  out["outlier_channels"] = p.outlier_channels;
  out["tokens"] = h.rows();
  return render(out);
}

std::string cmd_quantize(const Request& r) {
  const DenseTensor keys = read_matrix(r.str("keys"), "keys");
  const DenseTensor values = read_matrix(r.str("values"), "values");
  if (keys.dims() != values.dims()) throw Error(ErrorCode::Shape, "keys and values dumps differ in shape");
  const std::string out = r.str("out");
  const SchemePreset scheme = request_scheme(r, "pt_kv_dynamic", 4);
  const SinkSet sinks = request_sinks(r, keys.rows(), false);
  for (std::size_t i : sinks.indices)
    if (i >= keys.rows()) throw Error(ErrorCode::Index, "sink index beyond sequence", {{"index", std::to_string(i)}});

  std::optional<QuantParams> kp, vp;
  Json calib = nullptr;
  if (r.has("calib")) {
    calib = Json::object();
    if (scheme.key.mode == QuantMode::Static && !scheme.key.passthrough()) {
      CalibrationSet cal;
      calib["key_samples"] = calibration_from_dir(r.str("calib"), ActivationKind::K, keys.cols(), cal);
      kp = calibrate(cal, scheme.key);
    }
    if (scheme.value.mode == QuantMode::Static && !scheme.value.passthrough()) {
      CalibrationSet cal;
      calib["value_samples"] = calibration_from_dir(r.str("calib"), ActivationKind::V, values.cols(), cal);
      vp = calibrate(cal, scheme.value);
    }
  }
  const QuantizedPair q = quantize_scheme(keys, values, scheme, sinks, kp ? &*kp : nullptr, vp ? &*vp : nullptr);

  Json files = Json::object();
  if (!q.kept_rows.empty()) {
    files["keys"] = write_quantized(out + ".keys", q.keys);
    files["values"] = write_quantized(out + ".values", q.values);
  }
  if (!sinks.empty()) {
    write_dump(out + ".sink_keys.kvsd", keys.gather_rows(sinks.indices));
    write_dump(out + ".sink_values.kvsd", values.gather_rows(sinks.indices));
    files["sink_keys"] = out + ".sink_keys.kvsd";
    files["sink_values"] = out + ".sink_values.kvsd";
  }
  Footprint f;
  if (!q.kept_rows.empty()) f = tensor_footprint(q.keys) + tensor_footprint(q.values);
  f.sink_bytes = 2ull * sinks.size() * keys.cols() * kFullPrecisionBytes;

  Json report{{"scheme", scheme.name},
              {"key_spec", to_json(scheme.key)},
              {"value_spec", to_json(scheme.value)},
              {"tokens", keys.rows()},
              {"width", keys.cols()},
              {"sinks", sinks.indices},
              {"kept_rows", q.kept_rows.size()},
              {"calibration", calib},
              {"footprint", to_json(f)},
              {"files", files}};
  write_json_atomic(out + ".json", report);
  return render(report);
}

std::string cmd_analyze_error(const Request& r) {
  const DenseTensor x = read_matrix(r.str("input"), "input");
  const SinkSet sinks = request_sinks(r, x.rows(), false);
  const std::vector<QuantSpec> specs = request_specs(r, {2, 3, 4, 8});
  const bool needs_cal = std::any_of(specs.begin(), specs.end(), [](const QuantSpec& s) { return s.mode == QuantMode::Static; });
  CalibrationSet cal;
  std::vector<SinkSet> cal_sinks;
  if (r.has("calib") && r.flag("self_calib")) throw Error(ErrorCode::Usage, "--calib and --self-calib are mutually exclusive");
  if (r.has("calib")) {
    calibration_from_dir(r.str("calib"), parse_activation_kind(r.str("calib_kind", "K")), x.cols(), cal);
  } else if (r.flag("self_calib")) {
    cal.samples.push_back(x);
    cal_sinks.push_back(sinks);
  }
  const ErrorReport rep = error_decomposition(x, sinks, specs, needs_cal && !cal.samples.empty() ? &cal : nullptr, cal_sinks);
  const double scale = r.real("display_scale", 1.0);
  return csv_format(r) ? to_csv(rep, scale) : render(to_json(rep, scale));
}

std::string cmd_analyze_bias(const Request& r) {
  const QkvInputs in = request_qkv(r);
  require_input(in.has_a, "attn");
  require_input(in.has_v, "v");
  const auto [heads, kv_heads] = request_heads(r, in);
  BiasOptions opt;
  opt.centroid = r.flag("centroid");
  opt.keep_vectors = r.flag("keep_vectors");
  const std::size_t n = in.a.ndim() == 3 ? in.a.dims()[1] : in.a.rows();
  const SinkSet sinks = request_sinks(r, n, true);
  const BiasReport rep = attention_bias_layer(in.a, in.v, sinks, heads, kv_heads, r.count("layer", 0), opt);
  return csv_format(r) ? to_csv(rep) : render(to_json(rep));
}

std::string cmd_analyze_disruption(const Request& r) {
  const QkvInputs in = request_qkv(r);
  require_input(in.has_q, "q");
  require_input(in.has_k, "k");
  require_input(in.has_v, "v");
  const auto [heads, kv_heads] = request_heads(r, in);
  const SinkSet sinks = request_sinks(r, in.q.rows(), true);
  const std::vector<QuantSpec> specs = request_specs(r, {2, 3, 4, 8});
  const DisruptionReport rep =
      bias_disruption(in.q, in.k, in.v, sinks, heads, kv_heads, specs, r.flag("preserve_sinks"));
  return csv_format(r) ? to_csv(rep) : render(to_json(rep));
}

std::string cmd_analyze_qk(const Request& r) {
  const QkvInputs in = request_qkv(r);
  require_input(in.has_q, "q");
  require_input(in.has_k, "k");
  const auto [heads, kv_heads] = request_heads(r, in);
  const SinkSet sinks = request_sinks(r, in.q.rows(), true);
  const QkDiagnostics rep = qk_sink_diagnostics(in.q, in.k, in.has_v ? &in.v : nullptr, sinks, heads, kv_heads);
  return csv_format(r) ? to_csv(rep) : render(to_json(rep));
}

std::string cmd_analyze_norms(const Request& r) {
  const QkvInputs in = request_qkv(r);
  require_input(in.has_q, "q");
  require_input(in.has_k, "k");
  require_input(in.has_v, "v");
  const auto [heads, kv_heads] = request_heads(r, in);
  const NormProfile rep = norm_profile(in.q, in.k, in.v, heads, kv_heads, r.count("layer", 0));
  return csv_format(r) ? to_csv(rep) : render(to_json(rep));
}

std::string cmd_analyze_stages(const Request& r) {
  const ActivationDumps dumps = load_activation_dumps(r.str("dumps"));
  const SinkProfile p = load_profile(r.str("profile"));
  const std::vector<LayerActivations> layers = dumps.stage_inputs();
  const StageReport rep = classify_stages(layers, p, r.real("ratio", kDefaultOutlierRatio));
  return csv_format(r) ? to_csv(rep) : render(to_json(rep));
}

PrefillOptions request_prefill_options(const Request& r) {
  PrefillOptions opt;
  opt.mode = parse_preservation(r.str("mode", "kvsink"));
  opt.k = r.count("k", kDefaultSinkCount);
  opt.magnitude_ratio = r.opt_real("ratio");
  return opt;
}

std::string cmd_simulate(const Request& r) {
  PrefillOptions opt = request_prefill_options(r);
  const Model m = request_model(r);
  const SinkProfile profile = request_profile(r, m, opt.mode == Preservation::KVSink);
  const SchemePreset scheme = request_scheme(r, "pt_kv_static", 2);
  const DenseTensor h0 = request_input(r, m);
  const ForwardResult fp = decoder_forward(h0, m.weights, m.cfg, m.hooks);
  opt.capture = request_capture(r);
  const PrefillResult res = prefill_with_kvsink(h0, m.weights, m.cfg, m.hooks, profile, scheme, opt);

  const double err = distance(res.output, fp.output);
  const double ref = l2_norm(fp.output.data());
  Json report{{"mode", std::string(preservation_name(opt.mode))},
              {"scheme", scheme.name},
              {"bits", scheme.key.bits},
              {"group_size", scheme.key.group_size},
              {"k", opt.k},
              {"tokens", h0.rows()},
              {"config", to_json(m.cfg)},
              {"sinks", res.sinks.indices},
              {"l2_error", err},
              {"relative_error", ref == 0.0 ? 0.0 : err / ref},
              {"fp_norm", ref},
              {"footprint", to_json(res.cache.memory_footprint())}};
  if (opt.mode == Preservation::KVSink) report["profile"] = to_json(profile);
  if (r.has("out")) {
    const fs::path dir = r.str("out");
    write_dump(dir / "H_L.kvsd", res.output);
    write_dump(dir / "H_L_fp.kvsd", fp.output);
    write_cache_snapshot(dir / "cache", res.cache);
    if (!res.dumps.empty()) write_activation_dumps(dir / "dumps", "toy", res.dumps);
    write_json_atomic(dir / "report.json", report);
  }
  return render(report);
}

std::string cmd_bench(const Request& r) {
  const std::size_t repeat = r.count("repeat", 11);
  if (repeat == 0) throw Error(ErrorCode::Usage, "--repeat must be at least 1", {{"repeat", "0"}});
  PrefillOptions opt = request_prefill_options(r);
  const Model m = request_model(r);
  const SinkProfile profile = request_profile(r, m, opt.mode == Preservation::KVSink);
  const SchemePreset scheme = request_scheme(r, "pt_kv_static", 2);
  const std::size_t tokens = r.count("tokens", 4096);
  const DenseTensor h0 = random_input(tokens, m.cfg.hidden, m.cfg.seed + 1);

  std::vector<double> prefill, detection;
  Footprint footprint;
  SinkSet sinks;
  for (std::size_t i = 0; i < repeat; ++i) {
    const PrefillResult res = prefill_with_kvsink(h0, m.weights, m.cfg, m.hooks, profile, scheme, opt);
    prefill.push_back(res.prefill_ms);
    detection.push_back(res.detection_ms);
    footprint = res.cache.memory_footprint();
    sinks = res.sinks;
  }
  const double p = median(prefill), d = median(detection);
  Json report{{"prefill_ms", p},
              {"detection_ms", d},
              {"detection_ratio", p == 0.0 ? 0.0 : d / p},
              {"repeat", repeat},
              {"tokens", tokens},
              {"sinks", sinks.indices},
              {"footprint", to_json(footprint)},
              {"config", {{"decoder", to_json(m.cfg)},
                          {"scheme", scheme.name},
                          {"bits", scheme.key.bits},
                          {"group_size", scheme.key.group_size},
                          {"mode", std::string(preservation_name(opt.mode))},
                          {"k", opt.k}}}};
  return render(report);
}

std::string cmd_footprint(const Request& r) {
  std::size_t layers = 0, hidden = 0;
  Json echo = Json::object();
  if (r.has("profile")) {
    const SinkProfile p = load_profile(r.str("profile"));
    layers = p.total_layers;
    hidden = p.hidden_size;
    echo["profile"] = p.model_name;
  }
  layers = r.count("layers", layers);
  hidden = r.count("hidden", hidden);
  if (layers == 0 || hidden == 0) throw Error(ErrorCode::Usage, "footprint needs --profile or --layers and --hidden");
  const std::size_t tokens = r.count("tokens", 4096);
  const int bits = r.ints("bits", {2}).front();
  QuantSpec check;
  check.bits = bits;
  check.validate();
  const std::size_t sinks = r.count("sinks", 0);
  const Footprint base = estimate_footprint(layers, tokens, hidden, bits, 0);
  const Footprint mixed = estimate_footprint(layers, tokens, hidden, bits, sinks);
  const Footprint extra = estimate_footprint(layers, sinks, hidden, kPassthroughBits, 0);
  echo["layers"] = layers;
  echo["hidden"] = hidden;
  echo["tokens"] = tokens;
  echo["bits"] = bits;
  echo["sinks"] = sinks;
  // Sink overhead is reported on top of the full quantized base.
  return render(Json{{"config", echo},
                     {"base", to_json(base)},
                     {"sink_overhead_bytes", extra.quantized_bytes},
                     {"sink_overhead_mb", static_cast<double>(extra.quantized_bytes) / (1024.0 * 1024.0)},
                     {"mixed", to_json(mixed)}});
}

std::string cmd_synth(const Request& r) {
  const Model m = request_model(r);
  const fs::path dir = r.str("out");
  const DenseTensor h0 = request_input(r, m);
  CaptureSet capture = request_capture(r);
  if (capture.empty()) capture = CaptureSet::all();
  const ForwardResult fp = decoder_forward(h0, m.weights, m.cfg, m.hooks, capture);
  save_weights(dir / "weights", m.cfg, m.weights);
  write_dump(dir / "input.kvsd", h0);
  write_dump(dir / "output.kvsd", fp.output);
  const auto entries = write_activation_dumps(dir / "dumps", r.str("model", "toy"), fp.dumps);
  Json report{{"config", to_json(m.cfg)},
              {"tokens", h0.rows()},
              {"dumps", (dir / "dumps").string()},
              {"weights", (dir / "weights").string()},
              {"entries", entries.size()}};
  if (m.plant) report["plant"] = to_json(*m.plant);
  write_json_atomic(dir / "synth.json", report);
  return render(report);
}

std::string cmd_discover(const Request& r) {
  const ActivationDumps dumps = load_activation_dumps(r.str("dumps"));
  const std::vector<DenseTensor> h = dumps.series(ActivationKind::H);
  const SinkProfile p = discover_profile(h, r.real("ratio", kDefaultOutlierRatio), r.count("max_channels", 4),
                                         r.str("name", "discovered"));
  const Json j = to_json(p);
  if (r.has("out")) write_json_atomic(r.str("out"), j);
  return render(j);
}

std::string cmd_profiles_list(const Request& r) {
  Json arr = Json::array();
  const fs::path dir = r.has("dir") ? fs::path(r.str("dir")) : default_profile_dir();
  std::error_code ec;
  if (fs::is_directory(dir, ec)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.path().extension() == ".json") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) arr.push_back(to_json(profile_from_json(read_json_file(f))));
  } else {
    for (const SinkProfile& p : builtin_profiles()) arr.push_back(to_json(p));
  }
  return render(Json{{"profile_dir", dir.string()}, {"profiles", arr}});
}

std::string cmd_profiles_export(const Request& r) {
  const fs::path dir = r.str("out");
  Json files = Json::array();
  for (const SinkProfile& p : builtin_profiles()) {
    write_json_atomic(dir / profile_file_name(p), to_json(p));
    files.push_back((dir / profile_file_name(p)).string());
  }
  return render(Json{{"files", files}});
}

using Command = std::function<std::string(const Request&)>;

const std::map<std::string, Command, std::less<>>& commands() {
  static const std::map<std::string, Command, std::less<>> table = {
      {"detect", cmd_detect},
      {"quantize", cmd_quantize},
      {"analyze.error", cmd_analyze_error},
      {"analyze.bias", cmd_analyze_bias},
      {"analyze.disruption", cmd_analyze_disruption},
      {"analyze.qk", cmd_analyze_qk},
      {"analyze.norms", cmd_analyze_norms},
      {"analyze.stages", cmd_analyze_stages},
      {"simulate", cmd_simulate},
      {"bench", cmd_bench},
      {"footprint", cmd_footprint},
      {"synth", cmd_synth},
      {"discover", cmd_discover},
      {"profiles.list", cmd_profiles_list},
      {"profiles.export", cmd_profiles_export},
  };
  return table;
}

}  // namespace

std::vector<std::string> workflow_names() {
  std::vector<std::string> out;
  for (const auto& [name, fn] : commands()) out.push_back(name);
  return out;
}

std::string run_workflow(std::string_view command, const Json& request) {
  const auto it = commands().find(command);
  if (it == commands().end()) throw Error(ErrorCode::Usage, "unknown command", {{"command", std::string(command)}});
  return it->second(Request(request));
}

}  // namespace kvsink
