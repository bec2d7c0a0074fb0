#include "kvsink/kvsink.h"

#include <cstring>
#include <string>

#include "kvsink/decoder.hpp"
#include "kvsink/dump_io.hpp"
#include "kvsink/kv_cache.hpp"
#include "kvsink/serialization.hpp"
#include "kvsink/workflows.hpp"

struct kvsink_tensor {
  kvsink::DenseTensor t;
};
struct kvsink_profile {
  kvsink::SinkProfile p;
};
struct kvsink_qtensor {
  kvsink::QuantizedTensor q;
};
struct kvsink_qparams {
  kvsink::QuantParams p;
};
struct kvsink_cache {
  kvsink::KVCache c;
};
struct kvsink_model {
  kvsink::DecoderConfig cfg;
  kvsink::DecoderWeights weights;
  std::vector<kvsink::InjectionHook> hooks;
};

namespace {

thread_local std::string g_message;
thread_local std::string g_json;

kvsink_status to_status(kvsink::ErrorCode c) {
  return static_cast<kvsink_status>(static_cast<int>(c) + 1);
}

void clear_error() {
  g_message.clear();
  g_json.clear();
}

kvsink_status fail(const kvsink::Error& e) {
  g_message = e.what();
  g_json = kvsink::error_json(e).dump();
  return to_status(e.code());
}

template <class F>
kvsink_status guard(F&& f) {
  clear_error();
  try {
    f();
    return KVSINK_OK;
  } catch (const kvsink::Error& e) {
    return fail(e);
  } catch (const std::bad_alloc&) {
    g_message = "out of memory";
  } catch (const std::exception& e) {
    g_message = e.what();
  }
  g_json = kvsink::error_json("internal_error", g_message).dump();
  return KVSINK_E_INTERNAL;
}

void need(const void* p, const char* what) {
  if (p == nullptr) throw kvsink::Error(kvsink::ErrorCode::Usage, std::string("null argument: ") + what);
}

char* dup_string(const std::string& s) {
  char* out = new char[s.size() + 1];
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

kvsink::QuantSpec to_spec(const kvsink_quant_spec* s) {
  need(s, "spec");
  if (s->axis < 0 || s->axis > 2) throw kvsink::Error(kvsink::ErrorCode::Config, "unknown axis");
  if (s->mode < 0 || s->mode > 1) throw kvsink::Error(kvsink::ErrorCode::Config, "unknown mode");
  kvsink::QuantSpec q;
  q.bits = s->bits;
  q.axis = static_cast<kvsink::Axis>(s->axis);
  q.mode = static_cast<kvsink::QuantMode>(s->mode);
  q.group_size = s->group_size;
  if (s->clip >= 0.0) q.clip = s->clip;
  q.sparse_fraction = s->sparse_fraction;
  q.validate();
  return q;
}

void copy_sinks(const kvsink::SinkSet& s, size_t* out, size_t cap, size_t* count) {
  if (count != nullptr) *count = s.size();
  if (out != nullptr)
    for (size_t i = 0; i < s.size() && i < cap; ++i) out[i] = s.indices[i];
}

kvsink_footprint to_c(const kvsink::Footprint& f) {
  return {f.quantized_bytes, f.sink_bytes, f.params_bytes, f.sparse_bytes, f.buffer_bytes, f.total()};
}

}  // namespace

extern "C" {

const char* kvsink_version(void) { return "0.1.0"; }

const char* kvsink_status_name(kvsink_status status) {
  if (status == KVSINK_OK) return "ok";
  if (status >= KVSINK_E_SHAPE && status <= KVSINK_E_IO) {
    return kvsink::error_code_name(static_cast<kvsink::ErrorCode>(static_cast<int>(status) - 1)).data();
  }
  return "internal_error";
}

const char* kvsink_last_error(void) { return g_message.c_str(); }
const char* kvsink_last_error_json(void) { return g_json.c_str(); }
void kvsink_string_free(char* s) { delete[] s; }

int kvsink_exit_code(kvsink_status status) {
  switch (status) {
    case KVSINK_OK: return 0;
    case KVSINK_E_USAGE:
    case KVSINK_E_CONFIG: return 2;
    case KVSINK_E_FORMAT:
    case KVSINK_E_IO: return 3;
    case KVSINK_E_NUMERIC:
    case KVSINK_E_DEGENERATE_ROW: return 4;
    default: return 1;
  }
}

kvsink_status kvsink_tensor_create(const size_t* dims, size_t ndim, const double* data, kvsink_tensor** out) {
  return guard([&] {
    need(out, "out");
    if (ndim > 0) need(dims, "dims");
    std::vector<std::size_t> d(dims, dims + ndim);
    const std::size_t n = kvsink::element_count(d);
    if (n > 0) need(data, "data");
    *out = new kvsink_tensor{kvsink::DenseTensor(std::move(d), std::vector<double>(data, data + n))};
  });
}

void kvsink_tensor_free(kvsink_tensor* t) { delete t; }
size_t kvsink_tensor_ndim(const kvsink_tensor* t) { return t == nullptr ? 0 : t->t.ndim(); }
size_t kvsink_tensor_dim(const kvsink_tensor* t, size_t axis) {
  return t == nullptr || axis >= t->t.ndim() ? 0 : t->t.dims()[axis];
}
size_t kvsink_tensor_size(const kvsink_tensor* t) { return t == nullptr ? 0 : t->t.size(); }
const double* kvsink_tensor_data(const kvsink_tensor* t) { return t == nullptr ? nullptr : t->t.values().data(); }

kvsink_status kvsink_tensor_read(const char* path, kvsink_tensor** out) {
  return guard([&] {
    need(path, "path");
    need(out, "out");
    *out = new kvsink_tensor{kvsink::read_dump(path)};
  });
}

kvsink_status kvsink_tensor_write(const kvsink_tensor* t, const char* path, int dtype) {
  return guard([&] {
    need(t, "tensor");
    need(path, "path");
    if (dtype != KVSINK_F32 && dtype != KVSINK_F64) throw kvsink::Error(kvsink::ErrorCode::Format, "unknown dtype code");
    kvsink::write_dump(path, t->t, static_cast<kvsink::DType>(dtype));
  });
}

kvsink_status kvsink_profile_load(const char* ref, kvsink_profile** out) {
  return guard([&] {
    need(ref, "ref");
    need(out, "out");
    *out = new kvsink_profile{kvsink::load_profile(ref)};
  });
}

kvsink_status kvsink_profile_create(const char* model, size_t total_layers, size_t emergence_layer, size_t hidden_size,
                                    const size_t* channels, size_t channel_count, kvsink_profile** out) {
  return guard([&] {
    need(model, "model");
    need(out, "out");
    if (channel_count > 0) need(channels, "channels");
    kvsink::SinkProfile p{model, total_layers, emergence_layer, hidden_size,
                          std::vector<std::size_t>(channels, channels + channel_count)};
    p.validate();
    *out = new kvsink_profile{std::move(p)};
  });
}

size_t kvsink_builtin_profile_count(void) { return kvsink::builtin_profiles().size(); }

kvsink_status kvsink_builtin_profile(size_t index, kvsink_profile** out) {
  return guard([&] {
    need(out, "out");
    const auto& all = kvsink::builtin_profiles();
    if (index >= all.size()) throw kvsink::Error(kvsink::ErrorCode::Index, "profile index out of range");
    *out = new kvsink_profile{all[index]};
  });
}

kvsink_status kvsink_profile_to_json(const kvsink_profile* p, char** out) {
  return guard([&] {
    need(p, "profile");
    need(out, "out");
    *out = dup_string(kvsink::to_json(p->p).dump());
  });
}

void kvsink_profile_free(kvsink_profile* p) { delete p; }

kvsink_status kvsink_detect_sinks(const kvsink_tensor* h, const kvsink_profile* p, size_t k, double ratio,
                                  size_t* out, size_t cap, size_t* count) {
  return guard([&] {
    need(h, "h");
    need(p, "profile");
    std::optional<double> r;
    if (ratio > 0.0) r = ratio;
    copy_sinks(kvsink::detect_sinks(h->t, p->p, k, r), out, cap, count);
  });
}

kvsink_quant_spec kvsink_quant_spec_default(void) {
  return {4, KVSINK_PER_TOKEN, KVSINK_DYNAMIC, 128, -1.0, 0.0};
}

kvsink_status kvsink_quantize(const kvsink_tensor* x, const kvsink_quant_spec* spec, kvsink_qtensor** out) {
  return guard([&] {
    need(x, "x");
    need(out, "out");
    *out = new kvsink_qtensor{kvsink::quantize(x->t, to_spec(spec))};
  });
}

kvsink_status kvsink_calibrate(const kvsink_tensor* const* samples, size_t sample_count, const kvsink_quant_spec* spec,
                               kvsink_qparams** out) {
  return guard([&] {
    need(out, "out");
    if (sample_count > 0) need(samples, "samples");
    kvsink::CalibrationSet cal;
    for (size_t i = 0; i < sample_count; ++i) {
      need(samples[i], "sample");
      cal.samples.push_back(samples[i]->t);
    }
    *out = new kvsink_qparams{kvsink::calibrate(cal, to_spec(spec))};
  });
}

kvsink_status kvsink_quantize_with_params(const kvsink_tensor* x, const kvsink_qparams* params,
                                          const kvsink_quant_spec* spec, kvsink_qtensor** out) {
  return guard([&] {
    need(x, "x");
    need(params, "params");
    need(out, "out");
    *out = new kvsink_qtensor{kvsink::quantize(x->t, params->p, to_spec(spec))};
  });
}

kvsink_status kvsink_dequantize(const kvsink_qtensor* q, kvsink_tensor** out) {
  return guard([&] {
    need(q, "qtensor");
    need(out, "out");
    *out = new kvsink_tensor{kvsink::dequantize(q->q)};
  });
}

kvsink_status kvsink_qtensor_codes(const kvsink_qtensor* q, const uint8_t** bytes, size_t* length) {
  return guard([&] {
    need(q, "qtensor");
    need(bytes, "bytes");
    need(length, "length");
    *bytes = q->q.codes.bytes().data();
    *length = q->q.codes.bytes().size();
  });
}

size_t kvsink_qtensor_sparse_count(const kvsink_qtensor* q) { return q == nullptr ? 0 : q->q.sparse.size(); }
void kvsink_qtensor_free(kvsink_qtensor* q) { delete q; }
void kvsink_qparams_free(kvsink_qparams* p) { delete p; }

kvsink_status kvsink_cache_create(size_t layers, size_t width, const char* scheme, int bits, size_t group_size,
                                  double sparse_fraction, kvsink_cache** out) {
  return guard([&] {
    need(scheme, "scheme");
    need(out, "out");
    std::optional<double> fs;
    if (sparse_fraction >= 0.0) fs = sparse_fraction;
    *out = new kvsink_cache{kvsink::KVCache(layers, width, kvsink::make_scheme(scheme, bits, group_size, fs))};
  });
}

kvsink_status kvsink_cache_append(kvsink_cache* c, size_t layer, const double* key, const double* value, size_t width,
                                  int is_sink) {
  return guard([&] {
    need(c, "cache");
    need(key, "key");
    need(value, "value");
    c->c.append(layer, {key, width}, {value, width}, is_sink != 0);
  });
}

kvsink_status kvsink_cache_bulk_load(kvsink_cache* c, size_t layer, const kvsink_tensor* keys,
                                     const kvsink_tensor* values, const size_t* sinks, size_t sink_count) {
  return guard([&] {
    need(c, "cache");
    need(keys, "keys");
    need(values, "values");
    if (sink_count > 0) need(sinks, "sinks");
    c->c.bulk_load(layer, keys->t, values->t,
                   kvsink::SinkSet::from_indices(std::vector<std::size_t>(sinks, sinks + sink_count)));
  });
}

kvsink_status kvsink_cache_reconstruct(const kvsink_cache* c, size_t layer, kvsink_tensor** keys,
                                       kvsink_tensor** values) {
  return guard([&] {
    need(c, "cache");
    need(keys, "keys");
    need(values, "values");
    auto [k, v] = c->c.reconstruct(layer);
    *keys = new kvsink_tensor{std::move(k)};
    *values = new kvsink_tensor{std::move(v)};
  });
}

kvsink_status kvsink_cache_token_count(const kvsink_cache* c, size_t layer, size_t* count) {
  return guard([&] {
    need(c, "cache");
    need(count, "count");
    *count = c->c.token_count(layer);
  });
}

kvsink_status kvsink_cache_footprint(const kvsink_cache* c, kvsink_footprint* out) {
  return guard([&] {
    need(c, "cache");
    need(out, "out");
    *out = to_c(c->c.memory_footprint());
  });
}

void kvsink_cache_free(kvsink_cache* c) { delete c; }

kvsink_status kvsink_estimate_footprint(size_t layers, size_t tokens, size_t width, int bits, size_t sinks,
                                        kvsink_footprint* out) {
  return guard([&] {
    need(out, "out");
    *out = to_c(kvsink::estimate_footprint(layers, tokens, width, bits, sinks));
  });
}

kvsink_status kvsink_model_create(const char* config_json, const char* plant_json, kvsink_model** out) {
  return guard([&] {
    need(config_json, "config_json");
    need(out, "out");
    auto m = std::make_unique<kvsink_model>();
    m->cfg = kvsink::config_from_json(kvsink::parse_json(config_json, "config"));
    if (plant_json != nullptr) {
      const kvsink::PlantSpec p = kvsink::plant_from_json(kvsink::parse_json(plant_json, "plant"));
      kvsink::SinkModelFixture f = kvsink::synthesize_sink_model(m->cfg, p.plants, p.emerge, p.dissipate, p.options);
      m->weights = std::move(f.weights);
      m->hooks = std::move(f.hooks);
    } else {
      m->weights = kvsink::DecoderWeights::random(m->cfg);
    }
    *out = m.release();
  });
}

kvsink_status kvsink_model_forward(const kvsink_model* m, const kvsink_tensor* h0, kvsink_tensor** out) {
  return guard([&] {
    need(m, "model");
    need(h0, "h0");
    need(out, "out");
    *out = new kvsink_tensor{kvsink::decoder_forward(h0->t, m->weights, m->cfg, m->hooks).output};
  });
}

kvsink_status kvsink_model_prefill(const kvsink_model* m, const kvsink_tensor* h0, const kvsink_profile* profile,
                                   const char* scheme, int bits, size_t group_size, const char* mode, size_t k,
                                   kvsink_tensor** out, size_t* sinks, size_t cap, size_t* sink_count) {
  return guard([&] {
    need(m, "model");
    need(h0, "h0");
    need(scheme, "scheme");
    need(mode, "mode");
    need(out, "out");
    kvsink::PrefillOptions opt;
    opt.mode = kvsink::parse_preservation(mode);
    opt.k = k;
    if (opt.mode == kvsink::Preservation::KVSink) need(profile, "profile");
    const kvsink::SinkProfile p = profile != nullptr ? profile->p : kvsink::SinkProfile{};
    kvsink::PrefillResult r = kvsink::prefill_with_kvsink(h0->t, m->weights, m->cfg, m->hooks, p,
                                                          kvsink::make_scheme(scheme, bits, group_size), opt);
    copy_sinks(r.sinks, sinks, cap, sink_count);
    *out = new kvsink_tensor{std::move(r.output)};
  });
}

void kvsink_model_free(kvsink_model* m) { delete m; }

kvsink_status kvsink_random_input(size_t tokens, size_t hidden, uint64_t seed, kvsink_tensor** out) {
  return guard([&] {
    need(out, "out");
    *out = new kvsink_tensor{kvsink::random_input(tokens, hidden, seed)};
  });
}

kvsink_status kvsink_run(const char* command, const char* request_json, char** report) {
  return guard([&] {
    need(command, "command");
    need(report, "report");
    const kvsink::Json req = request_json == nullptr ? kvsink::Json::object()
                                                     : kvsink::parse_json(request_json, "request");
    *report = dup_string(kvsink::run_workflow(command, req));
  });
}

size_t kvsink_command_count(void) { return kvsink::workflow_names().size(); }

const char* kvsink_command_name(size_t index) {
  static const std::vector<std::string> names = kvsink::workflow_names();
  return index < names.size() ? names[index].c_str() : nullptr;
}

}  // extern "C"
