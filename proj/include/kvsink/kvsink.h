#ifndef KVSINK_KVSINK_H
#define KVSINK_KVSINK_H

/*
 * C interface to the kvsink library. Objects are opaque handles released
 * with their *_free function. Every call returns a kvsink_status; on failure
 * kvsink_last_error() and kvsink_last_error_json() describe the error raised
 * on the calling thread. Strings returned through char** are owned by the
 * caller and released with kvsink_string_free().
 */

#include <stddef.h>
#include <stdint.h>

#if defined(KVSINK_BUILDING_LIBRARY)
#define KVSINK_API __attribute__((visibility("default")))
#else
#define KVSINK_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum kvsink_status {
  KVSINK_OK = 0,
  KVSINK_E_SHAPE = 1,
  KVSINK_E_LAYOUT = 2,
  KVSINK_E_CONFIG = 3,
  KVSINK_E_CALIBRATION = 4,
  KVSINK_E_INDEX = 5,
  KVSINK_E_STATE = 6,
  KVSINK_E_FORMAT = 7,
  KVSINK_E_NUMERIC = 8,
  KVSINK_E_BIAS_UNDEFINED = 9,
  KVSINK_E_DISCOVERY = 10,
  KVSINK_E_DEGENERATE_ROW = 11,
  KVSINK_E_USAGE = 12,
  KVSINK_E_IO = 13,
  KVSINK_E_INTERNAL = 99
} kvsink_status;

typedef enum kvsink_axis { KVSINK_PER_TOKEN = 0, KVSINK_PER_CHANNEL = 1, KVSINK_PER_TENSOR = 2 } kvsink_axis;
typedef enum kvsink_mode { KVSINK_DYNAMIC = 0, KVSINK_STATIC = 1 } kvsink_mode;
typedef enum kvsink_dtype { KVSINK_F32 = 1, KVSINK_F64 = 2 } kvsink_dtype;

typedef struct kvsink_tensor kvsink_tensor;
typedef struct kvsink_profile kvsink_profile;
typedef struct kvsink_qtensor kvsink_qtensor;
typedef struct kvsink_qparams kvsink_qparams;
typedef struct kvsink_cache kvsink_cache;
typedef struct kvsink_model kvsink_model;

typedef struct kvsink_quant_spec {
  int bits;               /* 2..8, or 16 for lossless pass-through */
  int axis;               /* kvsink_axis */
  int mode;               /* kvsink_mode */
  size_t group_size;
  double clip;            /* tail mass per side; negative disables clipping */
  double sparse_fraction; /* dense-and-sparse share, 0 disables */
} kvsink_quant_spec;

typedef struct kvsink_footprint {
  uint64_t quantized_bytes;
  uint64_t sink_bytes;
  uint64_t params_bytes;
  uint64_t sparse_bytes;
  uint64_t buffer_bytes;
  uint64_t total_bytes;
} kvsink_footprint;

KVSINK_API const char* kvsink_version(void);
KVSINK_API const char* kvsink_status_name(kvsink_status status);
KVSINK_API const char* kvsink_last_error(void);
KVSINK_API const char* kvsink_last_error_json(void);
KVSINK_API void kvsink_string_free(char* s);

/* Tensors (float64, row-major). */
KVSINK_API kvsink_status kvsink_tensor_create(const size_t* dims, size_t ndim, const double* data, kvsink_tensor** out);
KVSINK_API void kvsink_tensor_free(kvsink_tensor* t);
KVSINK_API size_t kvsink_tensor_ndim(const kvsink_tensor* t);
KVSINK_API size_t kvsink_tensor_dim(const kvsink_tensor* t, size_t axis);
KVSINK_API size_t kvsink_tensor_size(const kvsink_tensor* t);
KVSINK_API const double* kvsink_tensor_data(const kvsink_tensor* t);
KVSINK_API kvsink_status kvsink_tensor_read(const char* path, kvsink_tensor** out);
KVSINK_API kvsink_status kvsink_tensor_write(const kvsink_tensor* t, const char* path, int dtype);

/* Sink profiles. */
KVSINK_API kvsink_status kvsink_profile_load(const char* ref, kvsink_profile** out);
KVSINK_API kvsink_status kvsink_profile_create(const char* model, size_t total_layers, size_t emergence_layer,
                                               size_t hidden_size, const size_t* channels, size_t channel_count,
                                               kvsink_profile** out);
KVSINK_API size_t kvsink_builtin_profile_count(void);
KVSINK_API kvsink_status kvsink_builtin_profile(size_t index, kvsink_profile** out);
KVSINK_API kvsink_status kvsink_profile_to_json(const kvsink_profile* p, char** out);
KVSINK_API void kvsink_profile_free(kvsink_profile* p);

/* Top-k sink prediction on the emergence-layer output h [n, d]. ratio <= 0
 * disables the magnitude filter. Writes up to cap indices; *count receives
 * the number of sinks found. */
KVSINK_API kvsink_status kvsink_detect_sinks(const kvsink_tensor* h, const kvsink_profile* p, size_t k, double ratio,
                                             size_t* out, size_t cap, size_t* count);

/* Quantization. */
KVSINK_API kvsink_quant_spec kvsink_quant_spec_default(void);
KVSINK_API kvsink_status kvsink_quantize(const kvsink_tensor* x, const kvsink_quant_spec* spec, kvsink_qtensor** out);
KVSINK_API kvsink_status kvsink_calibrate(const kvsink_tensor* const* samples, size_t sample_count,
                                          const kvsink_quant_spec* spec, kvsink_qparams** out);
KVSINK_API kvsink_status kvsink_quantize_with_params(const kvsink_tensor* x, const kvsink_qparams* params,
                                                     const kvsink_quant_spec* spec, kvsink_qtensor** out);
KVSINK_API kvsink_status kvsink_dequantize(const kvsink_qtensor* q, kvsink_tensor** out);
KVSINK_API kvsink_status kvsink_qtensor_codes(const kvsink_qtensor* q, const uint8_t** bytes, size_t* length);
KVSINK_API size_t kvsink_qtensor_sparse_count(const kvsink_qtensor* q);
KVSINK_API void kvsink_qtensor_free(kvsink_qtensor* q);
KVSINK_API void kvsink_qparams_free(kvsink_qparams* p);

/* Mixed-precision KV cache. sparse_fraction < 0 keeps the scheme default. */
KVSINK_API kvsink_status kvsink_cache_create(size_t layers, size_t width, const char* scheme, int bits,
                                             size_t group_size, double sparse_fraction, kvsink_cache** out);
KVSINK_API kvsink_status kvsink_cache_append(kvsink_cache* c, size_t layer, const double* key, const double* value,
                                             size_t width, int is_sink);
KVSINK_API kvsink_status kvsink_cache_bulk_load(kvsink_cache* c, size_t layer, const kvsink_tensor* keys,
                                                const kvsink_tensor* values, const size_t* sinks,
                                                size_t sink_count);
KVSINK_API kvsink_status kvsink_cache_reconstruct(const kvsink_cache* c, size_t layer, kvsink_tensor** keys,
                                                  kvsink_tensor** values);
KVSINK_API kvsink_status kvsink_cache_token_count(const kvsink_cache* c, size_t layer, size_t* count);
KVSINK_API kvsink_status kvsink_cache_footprint(const kvsink_cache* c, kvsink_footprint* out);
KVSINK_API void kvsink_cache_free(kvsink_cache* c);
KVSINK_API kvsink_status kvsink_estimate_footprint(size_t layers, size_t tokens, size_t width, int bits, size_t sinks,
                                                   kvsink_footprint* out);

/* Toy decoder. plant_json may be NULL for plain random weights. */
KVSINK_API kvsink_status kvsink_model_create(const char* config_json, const char* plant_json, kvsink_model** out);
KVSINK_API kvsink_status kvsink_model_forward(const kvsink_model* m, const kvsink_tensor* h0, kvsink_tensor** out);
/* mode is "kvsink", "pfn" or "none"; profile may be NULL except in kvsink mode. */
KVSINK_API kvsink_status kvsink_model_prefill(const kvsink_model* m, const kvsink_tensor* h0,
                                              const kvsink_profile* profile, const char* scheme, int bits,
                                              size_t group_size, const char* mode, size_t k, kvsink_tensor** out,
                                              size_t* sinks, size_t cap, size_t* sink_count);
KVSINK_API void kvsink_model_free(kvsink_model* m);
KVSINK_API kvsink_status kvsink_random_input(size_t tokens, size_t hidden, uint64_t seed, kvsink_tensor** out);

/* File-level commands: detect, quantize, analyze.{error,bias,disruption,qk,
 * norms,stages}, simulate, bench, footprint, synth, discover,
 * profiles.{list,export}. request_json is an object keyed by option name. */
KVSINK_API kvsink_status kvsink_run(const char* command, const char* request_json, char** report);
KVSINK_API size_t kvsink_command_count(void);
KVSINK_API const char* kvsink_command_name(size_t index);

/* Process exit status for a failure: 2 usage/config, 3 format/io,
 * 4 numeric, 1 otherwise. */
KVSINK_API int kvsink_exit_code(kvsink_status status);

#ifdef __cplusplus
}
#endif

#endif
