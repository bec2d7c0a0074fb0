#include "kvsink/serialization.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <sstream>

#include "kvsink/dump_io.hpp"

namespace kvsink {

namespace fs = std::filesystem;

namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

// Runs a JSON field extraction, converting library exceptions to config errors.
template <class F>
auto guarded(const char* what, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Config, std::string("invalid ") + what + ": " + e.what());
  }
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string opt_num(const std::optional<double>& v) { return v ? num(*v) : ""; }

Json opt_json(const std::optional<double>& v, double scale = 1.0) { return v ? Json(*v * scale) : Json(nullptr); }

Json dims_json(const std::vector<std::size_t>& dims) { return Json(dims); }

std::string spec_label(const QuantSpec& s) {
  std::ostringstream out;
  out << axis_name(s.axis) << '/' << mode_name(s.mode) << '/' << s.bits << "bit";
  return out.str();
}

}  // namespace

Json error_json(const Error& e) {
  Json ctx = Json::object();
  for (const auto& [k, v] : e.context()) ctx[k] = v;
  return Json{{"code", std::string(error_code_name(e.code()))}, {"message", e.what()}, {"context", ctx}};
}

Json error_json(std::string_view code, const std::string& message) {
  return Json{{"code", std::string(code)}, {"message", message}, {"context", Json::object()}};
}

Json parse_json(const std::string& text, const std::string& what) {
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::Format, "malformed JSON in " + what, {{"byte", std::to_string(e.byte)}});
  }
}

Json read_json_file(const fs::path& path) { return parse_json(read_text_file(path), path.string()); }

void write_json_atomic(const fs::path& path, const Json& j) { write_text_atomic(path, j.dump(2) + "\n"); }

// ---------------------------------------------------------------------------
// Profiles

Json to_json(const SinkProfile& p) {
  return Json{{"model", p.model_name},
              {"total_layers", p.total_layers},
              {"emergence_layer", p.emergence_layer},
              {"hidden_size", p.hidden_size},
              {"outlier_channels", p.outlier_channels}};
}

SinkProfile profile_from_json(const Json& j) {
  SinkProfile p = guarded("profile", [&] {
    SinkProfile q;
    q.model_name = j.at("model").get<std::string>();
    q.total_layers = j.at("total_layers").get<std::size_t>();
    q.emergence_layer = j.at("emergence_layer").get<std::size_t>();
    q.hidden_size = j.at("hidden_size").get<std::size_t>();
    q.outlier_channels = j.at("outlier_channels").get<std::vector<std::size_t>>();
    return q;
  });
  p.validate();
  return p;
}

fs::path default_profile_dir() {
  if (const char* env = std::getenv("KVSINK_PROFILE_DIR"); env != nullptr && *env != '\0') return env;
  return KVSINK_PROFILE_SOURCE_DIR;
}

std::string profile_file_name(const SinkProfile& p) { return lower(p.model_name) + ".json"; }

SinkProfile load_profile(const std::string& ref) {
  std::error_code ec;
  if (fs::is_regular_file(ref, ec)) return profile_from_json(read_json_file(ref));
  const fs::path dir = default_profile_dir();
  const fs::path candidate = dir / (lower(ref) + ".json");
  if (fs::is_regular_file(candidate, ec)) return profile_from_json(read_json_file(candidate));
  if (auto p = find_builtin_profile(ref)) return *p;
  throw Error(ErrorCode::Config, "unknown profile", {{"profile", ref}, {"profile_dir", dir.string()}});
}

// ---------------------------------------------------------------------------
// Sinks, specs, params

Json to_json(const SinkSet& s) { return Json{{"sinks", s.indices}, {"k_requested", s.k_requested}}; }

SinkSet sinks_from_json(const Json& j) {
  return guarded("sink list", [&] {
    const Json& arr = j.is_object() ? j.at("sinks") : j;
    return SinkSet::from_indices(arr.get<std::vector<std::size_t>>());
  });
}

Json to_json(const QuantSpec& s) {
  return Json{{"bits", s.bits},
              {"axis", std::string(axis_name(s.axis))},
              {"mode", std::string(mode_name(s.mode))},
              {"group_size", s.group_size},
              {"clip", opt_json(s.clip)},
              {"sparse_fraction", s.sparse_fraction}};
}

QuantSpec spec_from_json(const Json& j) {
  QuantSpec s = guarded("quant spec", [&] {
    QuantSpec q;
    q.bits = j.value("bits", q.bits);
    if (j.contains("axis")) q.axis = parse_axis(j.at("axis").get<std::string>());
    if (j.contains("mode")) q.mode = parse_mode(j.at("mode").get<std::string>());
    q.group_size = j.value("group_size", q.group_size);
    if (j.contains("clip") && !j.at("clip").is_null()) q.clip = j.at("clip").get<double>();
    q.sparse_fraction = j.value("sparse_fraction", 0.0);
    return q;
  });
  s.validate();
  return s;
}

Json to_json(const QuantParams& p) {
  Json groups = Json::array();
  for (const GroupParams& g : p.groups) {
    groups.push_back(Json{{"scale", g.scale},
                          {"zero", g.zero},
                          {"degenerate", g.degenerate},
                          {"constant", g.constant},
                          {"lo", g.lo},
                          {"hi", g.hi}});
  }
  const GroupLayout& l = p.layout;
  return Json{{"layout",
               {{"axis", std::string(axis_name(l.axis))},
                {"mode", std::string(mode_name(l.mode))},
                {"group_size", l.group_size},
                {"rows", l.rows},
                {"cols", l.cols}}},
              {"groups", groups}};
}

QuantParams params_from_json(const Json& j) {
  return guarded("quant params", [&] {
    QuantParams p;
    const Json& l = j.at("layout");
    p.layout.axis = parse_axis(l.at("axis").get<std::string>());
    p.layout.mode = parse_mode(l.at("mode").get<std::string>());
    p.layout.group_size = l.at("group_size").get<std::size_t>();
    p.layout.rows = l.at("rows").get<std::size_t>();
    p.layout.cols = l.at("cols").get<std::size_t>();
    for (const Json& g : j.at("groups")) {
      GroupParams gp;
      gp.scale = g.at("scale").get<double>();
      gp.zero = g.at("zero").get<std::int64_t>();
      gp.degenerate = g.at("degenerate").get<bool>();
      gp.constant = g.at("constant").get<double>();
      gp.lo = g.value("lo", 0.0);
      gp.hi = g.value("hi", 0.0);
      p.groups.push_back(gp);
    }
    return p;
  });
}

// ---------------------------------------------------------------------------
// Decoder config and plants

Json to_json(const DecoderConfig& c) {
  return Json{{"layers", c.layers},
              {"hidden", c.hidden},
              {"heads", c.heads},
              {"kv_heads", c.kv_heads},
              {"ffn", c.ffn},
              {"activation", c.activation == Activation::Silu ? "silu" : "gelu"},
              {"ln_epsilon", c.ln_epsilon},
              {"rope", c.rope},
              {"rope_theta", c.rope_theta},
              {"seed", c.seed}};
}

DecoderConfig config_from_json(const Json& j) {
  DecoderConfig c = guarded("decoder config", [&] {
    DecoderConfig d;
    d.layers = j.value("layers", d.layers);
    d.hidden = j.value("hidden", d.hidden);
    d.heads = j.value("heads", d.heads);
    d.kv_heads = j.value("kv_heads", d.heads);
    d.ffn = j.value("ffn", d.ffn);
    const std::string act = j.value("activation", std::string("silu"));
    if (act == "silu") {
      d.activation = Activation::Silu;
    } else if (act == "gelu") {
      d.activation = Activation::Gelu;
    } else {
      throw Error(ErrorCode::Config, "unknown activation", {{"activation", act}});
    }
    d.ln_epsilon = j.value("ln_epsilon", d.ln_epsilon);
    d.rope = j.value("rope", d.rope);
    d.rope_theta = j.value("rope_theta", d.rope_theta);
    d.seed = j.value("seed", d.seed);
    return d;
  });
  c.validate();
  return c;
}

Json to_json(const PlantSpec& p) {
  Json plants = Json::array();
  for (const auto& o : p.plants) plants.push_back(Json{{"token", o.token}, {"channel", o.channel}, {"magnitude", o.magnitude}});
  return Json{{"emerge", p.emerge},
              {"dissipate", p.dissipate},
              {"weight_scale", p.options.weight_scale},
              {"sink_kv_scale", p.options.sink_kv_scale},
              {"sink_attention", p.options.sink_attention},
              {"query_offset", p.options.query_offset},
              {"plants", plants}};
}

PlantSpec plant_from_json(const Json& j) {
  return guarded("plant spec", [&] {
    PlantSpec p;
    p.emerge = j.at("emerge").get<std::size_t>();
    p.dissipate = j.at("dissipate").get<std::size_t>();
    p.options.weight_scale = j.value("weight_scale", 1.0);
    p.options.sink_kv_scale = j.value("sink_kv_scale", 1.0);
    p.options.sink_attention = j.value("sink_attention", 0.0);
    p.options.query_offset = j.value("query_offset", p.options.query_offset);
    for (const Json& o : j.at("plants")) {
      p.plants.push_back({o.at("token").get<std::size_t>(), o.at("channel").get<std::size_t>(),
                          o.at("magnitude").get<double>()});
    }
    return p;
  });
}

Json to_json(const Footprint& f) {
  return Json{{"quantized_bytes", f.quantized_bytes},
              {"sink_bytes", f.sink_bytes},
              {"params_bytes", f.params_bytes},
              {"sparse_bytes", f.sparse_bytes},
              {"buffer_bytes", f.buffer_bytes},
              {"total_bytes", f.total()},
              {"quantized_mb", static_cast<double>(f.quantized_bytes) / (1024.0 * 1024.0)},
              {"sink_mb", static_cast<double>(f.sink_bytes) / (1024.0 * 1024.0)},
              {"total_mb", static_cast<double>(f.total()) / (1024.0 * 1024.0)}};
}

// ---------------------------------------------------------------------------
// Reports

Json to_json(const ErrorReport& r, double s) {
  Json rows = Json::array();
  for (const ErrorRow& e : r.rows) {
    rows.push_back(Json{{"spec", to_json(e.spec)},
                        {"mse_overall", e.mse_overall * s},
                        {"mse_without_sink_groups", e.mse_without_sink_groups * s},
                        {"mse_with_sink_groups", opt_json(e.mse_with_sink_groups, s)},
                        {"elements_without_sink_groups", e.elements_without_sink_groups},
                        {"elements_with_sink_groups", e.elements_with_sink_groups},
                        {"mse_non_sink_tokens", opt_json(e.mse_non_sink_tokens, s)},
                        {"mse_sinks_excluded", opt_json(e.mse_sinks_excluded, s)}});
  }
  return Json{{"tokens", r.tokens}, {"channels", r.channels}, {"sinks", r.sinks.indices}, {"display_scale", s}, {"rows", rows}};
}

Json to_json(const BiasReport& r) {
  Json heads = Json::array();
  for (const HeadBias& h : r.heads) {
    Json j{{"layer", h.layer},          {"head", h.head},   {"first_token", h.first_token},
           {"tokens", h.tokens},        {"average_cosine", h.average_cosine},
           {"pairs", h.pairs},          {"degenerate_pairs", h.degenerate_pairs}};
    if (!h.vectors.empty()) j["vectors"] = h.vectors;
    heads.push_back(std::move(j));
  }
  return Json{{"heads", heads}};
}

Json to_json(const DisruptionReport& r) {
  Json rows = Json::array();
  for (const DisruptionRow& d : r.rows) {
    rows.push_back(Json{{"spec", to_json(d.spec)},
                        {"bias_l2_delta", d.bias_l2_delta},
                        {"attention_score_delta", d.attention_score_delta}});
  }
  return Json{{"sinks_preserved", r.sinks_preserved}, {"rows", rows}};
}

Json to_json(const QkDiagnostics& r) {
  Json heads = Json::array();
  for (const HeadDiagnostics& h : r.heads) {
    heads.push_back(Json{{"head", h.head},
                         {"mean_cosine", h.mean_cosine},
                         {"pairs", h.pairs},
                         {"q_norm_ratio", h.q_norm_ratio},
                         {"k_norm_ratio", h.k_norm_ratio},
                         {"v_norm_ratio", opt_json(h.v_norm_ratio)}});
  }
  return Json{{"heads", heads}};
}

Json to_json(const NormProfile& r) {
  Json heads = Json::array();
  for (const HeadNorms& h : r.heads) heads.push_back(Json{{"head", h.head}, {"q", h.q}, {"k", h.k}, {"v", h.v}});
  return Json{{"layer", r.layer}, {"heads", heads}};
}

Json to_json(const StageReport& r) {
  Json layers = Json::array();
  for (const LayerStageStats& l : r.layers) {
    layers.push_back(Json{{"layer", l.layer},
                          {"stage", std::string(stage_name(l.stage))},
                          {"max_x_down_in", l.max_x_down_in},
                          {"max_x_down_out", l.max_x_down_out},
                          {"max_h_prime", l.max_h_prime},
                          {"max_h", l.max_h},
                          {"threshold", l.threshold}});
  }
  Json j{{"layers", layers}, {"warning", r.warning}};
  if (r.warning) j["warning_message"] = r.warning_message;
  for (Stage s : {Stage::Emergence, Stage::Dissipation}) {
    const auto first = r.first_layer(s);
    j[std::string(stage_name(s)) + "_layer"] = first ? Json(*first) : Json(nullptr);
  }
  return j;
}

std::string to_csv(const ErrorReport& r, double s) {
  std::ostringstream out;
  out << "axis,mode,bits,group_size,sparse_fraction,mse_overall,mse_without_sink_groups,mse_with_sink_groups,"
         "mse_non_sink_tokens,mse_sinks_excluded\n";
  auto scaled = [s](const std::optional<double>& v) { return v ? std::optional<double>(*v * s) : std::nullopt; };
  for (const ErrorRow& e : r.rows) {
    out << axis_name(e.spec.axis) << ',' << mode_name(e.spec.mode) << ',' << e.spec.bits << ',' << e.spec.group_size
        << ',' << num(e.spec.sparse_fraction) << ',' << num(e.mse_overall * s) << ','
        << num(e.mse_without_sink_groups * s) << ',' << opt_num(scaled(e.mse_with_sink_groups)) << ','
        << opt_num(scaled(e.mse_non_sink_tokens)) << ',' << opt_num(scaled(e.mse_sinks_excluded)) << '\n';
  }
  return out.str();
}

std::string to_csv(const BiasReport& r) {
  std::ostringstream out;
  out << "layer,head,first_token,tokens,average_cosine,pairs,degenerate_pairs\n";
  for (const HeadBias& h : r.heads) {
    out << h.layer << ',' << h.head << ',' << h.first_token << ',' << h.tokens << ',' << num(h.average_cosine) << ','
        << h.pairs << ',' << h.degenerate_pairs << '\n';
  }
  return out.str();
}

std::string to_csv(const DisruptionReport& r) {
  std::ostringstream out;
  out << "spec,bits,bias_l2_delta,attention_score_delta,sinks_preserved\n";
  for (const DisruptionRow& d : r.rows) {
    out << spec_label(d.spec) << ',' << d.spec.bits << ',' << num(d.bias_l2_delta) << ','
        << num(d.attention_score_delta) << ',' << (r.sinks_preserved ? 1 : 0) << '\n';
  }
  return out.str();
}

std::string to_csv(const QkDiagnostics& r) {
  std::ostringstream out;
  out << "head,mean_cosine,pairs,q_norm_ratio,k_norm_ratio,v_norm_ratio\n";
  for (const HeadDiagnostics& h : r.heads) {
    out << h.head << ',' << num(h.mean_cosine) << ',' << h.pairs << ',' << num(h.q_norm_ratio) << ','
        << num(h.k_norm_ratio) << ',' << opt_num(h.v_norm_ratio) << '\n';
  }
  return out.str();
}

std::string to_csv(const NormProfile& r) {
  std::ostringstream out;
  out << "layer,head,token,q_norm,k_norm,v_norm\n";
  for (const HeadNorms& h : r.heads)
    for (std::size_t t = 0; t < h.q.size(); ++t)
      out << r.layer << ',' << h.head << ',' << t << ',' << num(h.q[t]) << ',' << num(h.k[t]) << ',' << num(h.v[t]) << '\n';
  return out.str();
}

std::string to_csv(const StageReport& r) {
  std::ostringstream out;
  out << "layer,stage,max_x_down_in,max_x_down_out,max_h_prime,max_h,threshold\n";
  for (const LayerStageStats& l : r.layers) {
    out << l.layer << ',' << stage_name(l.stage) << ',' << num(l.max_x_down_in) << ',' << num(l.max_x_down_out)
        << ',' << num(l.max_h_prime) << ',' << num(l.max_h) << ',' << num(l.threshold) << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Activation dumps

std::vector<ManifestEntry> write_activation_dumps(const fs::path& dir, const std::string& model,
                                                  const ActivationDumps& dumps) {
  std::vector<ManifestEntry> entries;
  Json arr = Json::array();
  for (const auto& [key, t] : dumps.entries()) {
    ManifestEntry e;
    e.model = model;
    e.layer = key.first;
    e.kind = key.second;
    e.dims = t.dims();
    e.tokens = key.second == ActivationKind::A ? t.dims()[1] : t.rows();
    e.hidden = t.dims().back();
    e.file = "L" + std::to_string(e.layer) + "_" + std::string(activation_kind_name(e.kind)) + ".kvsd";
    write_dump(dir / e.file, t);
    arr.push_back(Json{{"model", e.model},
                       {"layer", e.layer},
                       {"kind", std::string(activation_kind_name(e.kind))},
                       {"tokens", e.tokens},
                       {"hidden", e.hidden},
                       {"file", e.file},
                       {"dims", dims_json(e.dims)}});
    entries.push_back(std::move(e));
  }
  write_json_atomic(dir / "manifest.json", Json{{"entries", arr}});
  return entries;
}

std::vector<ManifestEntry> read_manifest(const fs::path& dir) {
  const Json j = read_json_file(dir / "manifest.json");
  return guarded("manifest", [&] {
    std::vector<ManifestEntry> out;
    for (const Json& e : j.at("entries")) {
      ManifestEntry m;
      m.model = e.value("model", std::string());
      m.layer = e.at("layer").get<std::size_t>();
      m.kind = parse_activation_kind(e.at("kind").get<std::string>());
      m.tokens = e.at("tokens").get<std::size_t>();
      m.hidden = e.at("hidden").get<std::size_t>();
      m.file = e.at("file").get<std::string>();
      if (e.contains("dims")) {
        m.dims = e.at("dims").get<std::vector<std::size_t>>();
      } else {
        m.dims = {m.tokens, m.hidden};
      }
      out.push_back(std::move(m));
    }
    return out;
  });
}

ActivationDumps load_activation_dumps(const fs::path& dir) {
  ActivationDumps dumps;
  for (const ManifestEntry& e : read_manifest(dir)) {
    const fs::path path = dir / e.file;
    if (!fs::exists(path)) throw Error(ErrorCode::Io, "manifest references a missing file", {{"path", path.string()}});
    DenseTensor t = read_dump(path);
    if (t.dims() != e.dims) {
      throw Error(ErrorCode::Format, "dump shape does not match manifest", {{"path", path.string()}});
    }
    dumps.put(e.layer, e.kind, std::move(t));
  }
  return dumps;
}

// ---------------------------------------------------------------------------
// Weights

namespace {

struct RoleRef {
  const char* role;
  DenseTensor LayerWeights::*tensor;
};

constexpr RoleRef kTensorRoles[] = {{"W_Q", &LayerWeights::wq}, {"W_K", &LayerWeights::wk}, {"W_V", &LayerWeights::wv},
                                    {"W_O", &LayerWeights::wo}, {"W_g", &LayerWeights::wg}, {"W_u", &LayerWeights::wu},
                                    {"W_d", &LayerWeights::wd}};

}  // namespace

void save_weights(const fs::path& dir, const DecoderConfig& cfg, const DecoderWeights& w) {
  w.validate(cfg);
  Json tensors = Json::array();
  auto emit = [&](const std::string& role, std::size_t layer, const DenseTensor& t) {
    const std::string file = "L" + std::to_string(layer) + "_" + role + ".kvsd";
    write_dump(dir / file, t);
    tensors.push_back(Json{{"role", role}, {"layer", layer}, {"file", file}, {"dims", dims_json(t.dims())}});
  };
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const LayerWeights& lw = w.layers[l];
    for (const RoleRef& r : kTensorRoles) emit(r.role, l, lw.*r.tensor);
    emit("ln_mhsa", l, DenseTensor({lw.ln_mhsa_gain.size()}, lw.ln_mhsa_gain));
    emit("ln_ffn", l, DenseTensor({lw.ln_ffn_gain.size()}, lw.ln_ffn_gain));
  }
  write_json_atomic(dir / "weights.json", Json{{"config", to_json(cfg)}, {"tensors", tensors}});
}

DecoderWeights load_weights(const fs::path& dir, const DecoderConfig& cfg) {
  const Json j = read_json_file(dir / "weights.json");
  DecoderWeights w = DecoderWeights::zeros(cfg);
  guarded("weights manifest", [&] {
    for (const Json& e : j.at("tensors")) {
      const std::string role = e.at("role").get<std::string>();
      const std::size_t layer = e.at("layer").get<std::size_t>();
      if (layer >= cfg.layers) throw Error(ErrorCode::Index, "weight layer out of range", {{"layer", std::to_string(layer)}});
      DenseTensor t = read_dump(dir / e.at("file").get<std::string>());
      LayerWeights& lw = w.layers[layer];
      if (role == "ln_mhsa") {
        lw.ln_mhsa_gain = t.values();
        continue;
      }
      if (role == "ln_ffn") {
        lw.ln_ffn_gain = t.values();
        continue;
      }
      bool known = false;
      for (const RoleRef& r : kTensorRoles) {
        if (role == r.role) {
          lw.*r.tensor = std::move(t);
          known = true;
          break;
        }
      }
      if (!known) throw Error(ErrorCode::Format, "unknown weight role", {{"role", role}});
    }
    return 0;
  });
  w.validate(cfg);
  return w;
}

// ---------------------------------------------------------------------------
// Cache snapshot and quantized tensors

Json write_cache_snapshot(const fs::path& dir, const KVCache& cache) {
  Json layers = Json::array();
  for (std::size_t l = 0; l < cache.layer_count(); ++l) {
    const auto [k, v] = cache.reconstruct(l);
    Json entry{{"layer", l},
               {"tokens", cache.token_count(l)},
               {"sinks", cache.sink_tokens(l).indices},
               {"footprint", to_json(cache.layer_footprint(l))}};
    if (cache.token_count(l) > 0) {
      const std::string kf = "layer" + std::to_string(l) + ".K.kvsd", vf = "layer" + std::to_string(l) + ".V.kvsd";
      write_dump(dir / kf, k);
      write_dump(dir / vf, v);
      entry["key_file"] = kf;
      entry["value_file"] = vf;
    }
    layers.push_back(std::move(entry));
  }
  const SchemePreset& s = cache.scheme();
  Json j{{"scheme", s.name},
         {"bits", s.key.bits},
         {"group_size", s.key.group_size},
         {"key_spec", to_json(s.key)},
         {"value_spec", to_json(s.value)},
         {"width", cache.width()},
         {"sinks", cache.sink_tokens(cache.layer_count() - 1).indices},
         {"footprint", to_json(cache.memory_footprint())},
         {"layers", layers}};
  write_json_atomic(dir / "cache.json", j);
  return j;
}

Json write_quantized(const fs::path& prefix, const QuantizedTensor& q) {
  const std::string base = prefix.string();
  write_file_atomic(base + ".codes.bin", q.codes.bytes());
  Json sparse = Json::array();
  for (const SparseEntry& e : q.sparse) sparse.push_back(Json{{"index", e.index}, {"value", e.value}});
  Json meta{{"dims", dims_json(q.dims)},
            {"spec", to_json(q.spec)},
            {"params", to_json(q.params)},
            {"code_count", q.codes.count()},
            {"sparse", sparse}};
  write_json_atomic(base + ".qparams.json", meta);
  const DenseTensor dq = dequantize(q);
  if (!dq.empty()) write_dump(base + ".dequant.kvsd", dq);
  return Json{{"codes", base + ".codes.bin"}, {"qparams", base + ".qparams.json"}, {"dequant", base + ".dequant.kvsd"}};
}

QuantizedTensor read_quantized(const fs::path& prefix) {
  const std::string base = prefix.string();
  const Json meta = read_json_file(base + ".qparams.json");
  QuantizedTensor q = guarded("quantized metadata", [&] {
    QuantizedTensor t;
    t.dims = meta.at("dims").get<std::vector<std::size_t>>();
    t.spec = spec_from_json(meta.at("spec"));
    t.params = params_from_json(meta.at("params"));
    for (const Json& e : meta.at("sparse")) t.sparse.push_back({e.at("index").get<std::size_t>(), e.at("value").get<double>()});
    const std::size_t count = meta.at("code_count").get<std::size_t>();
    if (!t.spec.passthrough()) t.codes = PackedCodes::from_bytes(t.spec.bits, count, read_file_bytes(base + ".codes.bin"));
    return t;
  });
  if (q.spec.passthrough()) q.raw = read_dump(base + ".dequant.kvsd").values();
  return q;
}

}  // namespace kvsink
