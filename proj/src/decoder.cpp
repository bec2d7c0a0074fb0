#include "kvsink/decoder.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <functional>
#include <random>
#include <string>

#include "kvsink/error.hpp"

namespace kvsink {

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point since) {
  return std::chrono::duration<double, std::milli>(Clock::now() - since).count();
}

void check(const DenseTensor& t, std::size_t layer, const char* op) {
  const auto v = t.data();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw Error(ErrorCode::Numeric, std::string("non-finite value in ") + op + " at layer " + std::to_string(layer),
                  {{"layer", std::to_string(layer)}, {"op", op}, {"index", std::to_string(i)}});
    }
  }
}

DenseTensor layer_norm(const DenseTensor& x, std::span<const double> gain, double eps) {
  const std::size_t n = x.rows(), d = x.cols();
  DenseTensor y({n, d});
  for (std::size_t t = 0; t < n; ++t) {
    auto row = x.row(t);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    auto out = y.row(t);
    for (std::size_t j = 0; j < d; ++j) out[j] = (row[j] - mean) * inv * gain[j];
  }
  return y;
}

double activate(double x, Activation a) {
  if (a == Activation::Silu) return x / (1.0 + std::exp(-x));
  return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
}

void apply_rope(DenseTensor& x, std::size_t heads, std::size_t head_dim, double theta) {
  const std::size_t n = x.rows();
  for (std::size_t t = 0; t < n; ++t) {
    auto row = x.row(t);
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < head_dim / 2; ++i) {
        const double freq = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
        const double angle = static_cast<double>(t) * freq;
        const double c = std::cos(angle), s = std::sin(angle);
        double& a = row[h * head_dim + 2 * i];
        double& b = row[h * head_dim + 2 * i + 1];
        const double a0 = a, b0 = b;
        a = a0 * c - b0 * s;
        b = a0 * s + b0 * c;
      }
    }
  }
}

// Causal multi-head attention; returns the concatenated head outputs [n, d]
// and optionally the probabilities [heads, n, n].
DenseTensor attention(const DenseTensor& q, const DenseTensor& k, const DenseTensor& v, const DecoderConfig& cfg,
                      DenseTensor* probs) {
  const std::size_t n = q.rows(), hd = cfg.head_dim(), group = cfg.heads / cfg.kv_heads;
  const std::size_t qw = q.cols(), kw = k.cols();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  DenseTensor out({n, cfg.hidden});
  auto qd = q.data();
  auto kd = k.data();
  auto vd = v.data();
  auto od = out.data();
  std::vector<double> scores;
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const std::size_t g = h / group;
    for (std::size_t t = 0; t < n; ++t) {
      scores.resize(t + 1);
      const double* qrow = qd.data() + t * qw + h * hd;
      for (std::size_t j = 0; j <= t; ++j) {
        const double* krow = kd.data() + j * kw + g * hd;
        double s = 0.0;
        for (std::size_t e = 0; e < hd; ++e) s += qrow[e] * krow[e];
        scores[j] = s * inv_sqrt;
      }
      const std::vector<double> p = softmax_row(scores);
      double* orow = od.data() + t * cfg.hidden + h * hd;
      for (std::size_t j = 0; j <= t; ++j) {
        const double* vrow = vd.data() + j * kw + g * hd;
        const double pj = p[j];
        for (std::size_t e = 0; e < hd; ++e) orow[e] += pj * vrow[e];
      }
      if (probs != nullptr) std::copy(p.begin(), p.end(), probs->data().begin() + static_cast<std::ptrdiff_t>((h * n + t) * n));
    }
  }
  return out;
}

void apply_hooks(DenseTensor& x_down_out, const DenseTensor& h_prime, std::size_t layer,
                 std::span<const InjectionHook> hooks) {
  for (const auto& hook : hooks) {
    if (hook.layer != layer) continue;
    for (const auto& t : hook.targets) {
      const bool token_ok = hook.mode == HookMode::AddToChannel || t.token < x_down_out.rows();
      if (!token_ok || t.channel >= x_down_out.cols()) {
        throw Error(ErrorCode::Index, "injection hook target out of bounds",
                    {{"layer", std::to_string(layer)}, {"token", std::to_string(t.token)},
                     {"channel", std::to_string(t.channel)}});
      }
      if (hook.mode == HookMode::AddToChannel) {
        for (std::size_t r = 0; r < x_down_out.rows(); ++r) x_down_out.at(r, t.channel) += t.magnitude;
      } else if (hook.mode == HookMode::AddToFfnOutput) {
        x_down_out.at(t.token, t.channel) += t.magnitude;
      } else {
        x_down_out.at(t.token, t.channel) -= t.magnitude * h_prime.at(t.token, t.channel);
      }
    }
  }
}

using KvTransform = std::function<std::pair<DenseTensor, DenseTensor>(std::size_t, const DenseTensor&, const DenseTensor&)>;

DenseTensor run_layer(const DenseTensor& h, const LayerWeights& w, const DecoderConfig& cfg, std::size_t l,
                      std::span<const InjectionHook> hooks, const CaptureSet& capture, ActivationDumps& dumps,
                      const KvTransform& kv_transform) {
  const DenseTensor x = layer_norm(h, w.ln_mhsa_gain, cfg.ln_epsilon);
  check(x, l, "ln_mhsa");
  DenseTensor q = matmul(x, w.wq);
  DenseTensor k = matmul(x, w.wk);
  DenseTensor v = matmul(x, w.wv);
  if (cfg.rope) {
    apply_rope(q, cfg.heads, cfg.head_dim(), cfg.rope_theta);
    apply_rope(k, cfg.kv_heads, cfg.head_dim(), cfg.rope_theta);
  }
  check(q, l, "q_proj");
  check(k, l, "k_proj");
  check(v, l, "v_proj");

  DenseTensor probs;
  const bool want_probs = capture.has(ActivationKind::A);
  if (want_probs) probs = DenseTensor({cfg.heads, h.rows(), h.rows()});
  DenseTensor heads_out;
  if (kv_transform) {
    auto [kq, vq] = kv_transform(l, k, v);
    heads_out = attention(q, kq, vq, cfg, want_probs ? &probs : nullptr);
  } else {
    heads_out = attention(q, k, v, cfg, want_probs ? &probs : nullptr);
  }
  check(heads_out, l, "attention");
  DenseTensor h_prime = matmul(heads_out, w.wo);
  for (std::size_t i = 0; i < h_prime.size(); ++i) h_prime.data()[i] += h.data()[i];
  check(h_prime, l, "o_proj");

  const DenseTensor x2 = layer_norm(h_prime, w.ln_ffn_gain, cfg.ln_epsilon);
  check(x2, l, "ln_ffn");
  DenseTensor gate = matmul(x2, w.wg);
  const DenseTensor up = matmul(x2, w.wu);
  for (std::size_t i = 0; i < gate.size(); ++i) gate.data()[i] = activate(gate.data()[i], cfg.activation) * up.data()[i];
  check(gate, l, "ffn_gate");
  DenseTensor x_down_out = matmul(gate, w.wd);
  apply_hooks(x_down_out, h_prime, l, hooks);
  check(x_down_out, l, "down_proj");
  DenseTensor out = x_down_out;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += h_prime.data()[i];
  check(out, l, "ffn_residual");

  if (capture.has(ActivationKind::Q)) dumps.put(l, ActivationKind::Q, std::move(q));
  if (capture.has(ActivationKind::K)) dumps.put(l, ActivationKind::K, std::move(k));
  if (capture.has(ActivationKind::V)) dumps.put(l, ActivationKind::V, std::move(v));
  if (want_probs) dumps.put(l, ActivationKind::A, std::move(probs));
  if (capture.has(ActivationKind::HPrime)) dumps.put(l, ActivationKind::HPrime, std::move(h_prime));
  if (capture.has(ActivationKind::XDownIn)) dumps.put(l, ActivationKind::XDownIn, std::move(gate));
  if (capture.has(ActivationKind::XDownOut)) dumps.put(l, ActivationKind::XDownOut, std::move(x_down_out));
  if (capture.has(ActivationKind::H)) dumps.put(l, ActivationKind::H, out);
  return out;
}

void check_inputs(const DenseTensor& h0, const DecoderWeights& w, const DecoderConfig& cfg,
                  std::span<const InjectionHook> hooks) {
  cfg.validate();
  w.validate(cfg);
  if (h0.ndim() != 2 || h0.cols() != cfg.hidden) {
    throw Error(ErrorCode::Shape, "decoder input must be [n, hidden]", {{"hidden", std::to_string(cfg.hidden)}});
  }
  if (h0.rows() == 0) throw Error(ErrorCode::Shape, "decoder input has no tokens");
  for (const auto& hook : hooks)
    if (hook.layer >= cfg.layers) throw Error(ErrorCode::Index, "hook layer out of range", {{"layer", std::to_string(hook.layer)}});
}

}  // namespace

void DecoderConfig::validate() const {
  if (layers == 0 || hidden == 0 || heads == 0 || kv_heads == 0 || ffn == 0) {
    throw Error(ErrorCode::Config, "decoder dimensions must be positive");
  }
  if (hidden % heads != 0) throw Error(ErrorCode::Config, "hidden must be divisible by heads");
  if (heads % kv_heads != 0) throw Error(ErrorCode::Config, "kv_heads must divide heads");
  if (rope && head_dim() % 2 != 0) throw Error(ErrorCode::Config, "RoPE needs an even head dimension");
  if (!(ln_epsilon > 0.0)) throw Error(ErrorCode::Config, "ln_epsilon must be positive");
}

DecoderWeights DecoderWeights::random(const DecoderConfig& cfg, double scale) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto gaussian = [&](std::size_t rows, std::size_t cols) {
    DenseTensor t({rows, cols});
    const double sd = scale / std::sqrt(static_cast<double>(rows));
    for (double& v : t.data()) v = sd * normal(rng);
    return t;
  };
  DecoderWeights w;
  w.layers.reserve(cfg.layers);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    LayerWeights lw;
    lw.wq = gaussian(cfg.hidden, cfg.hidden);
    lw.wk = gaussian(cfg.hidden, cfg.kv_width());
    lw.wv = gaussian(cfg.hidden, cfg.kv_width());
    lw.wo = gaussian(cfg.hidden, cfg.hidden);
    lw.wg = gaussian(cfg.hidden, cfg.ffn);
    lw.wu = gaussian(cfg.hidden, cfg.ffn);
    lw.wd = gaussian(cfg.ffn, cfg.hidden);
    lw.ln_mhsa_gain.assign(cfg.hidden, 1.0);
    lw.ln_ffn_gain.assign(cfg.hidden, 1.0);
    w.layers.push_back(std::move(lw));
  }
  return w;
}

DecoderWeights DecoderWeights::zeros(const DecoderConfig& cfg) {
  cfg.validate();
  DecoderWeights w;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    LayerWeights lw;
    lw.wq = DenseTensor({cfg.hidden, cfg.hidden});
    lw.wk = DenseTensor({cfg.hidden, cfg.kv_width()});
    lw.wv = DenseTensor({cfg.hidden, cfg.kv_width()});
    lw.wo = DenseTensor({cfg.hidden, cfg.hidden});
    lw.wg = DenseTensor({cfg.hidden, cfg.ffn});
    lw.wu = DenseTensor({cfg.hidden, cfg.ffn});
    lw.wd = DenseTensor({cfg.ffn, cfg.hidden});
    lw.ln_mhsa_gain.assign(cfg.hidden, 1.0);
    lw.ln_ffn_gain.assign(cfg.hidden, 1.0);
    w.layers.push_back(std::move(lw));
  }
  return w;
}

void DecoderWeights::validate(const DecoderConfig& cfg) const {
  if (layers.size() != cfg.layers) throw Error(ErrorCode::Shape, "weight layer count does not match config");
  const std::size_t d = cfg.hidden, kv = cfg.kv_width(), f = cfg.ffn;
  using Dims = std::vector<std::size_t>;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const LayerWeights& w = layers[l];
    const bool ok = w.wq.dims() == Dims{d, d} && w.wk.dims() == Dims{d, kv} && w.wv.dims() == Dims{d, kv} &&
                    w.wo.dims() == Dims{d, d} && w.wg.dims() == Dims{d, f} && w.wu.dims() == Dims{d, f} &&
                    w.wd.dims() == Dims{f, d} && w.ln_mhsa_gain.size() == d && w.ln_ffn_gain.size() == d;
    if (!ok) throw Error(ErrorCode::Shape, "weight shapes do not match config", {{"layer", std::to_string(l)}});
  }
}

std::string_view activation_kind_name(ActivationKind k) {
  switch (k) {
    case ActivationKind::H: return "H";
    case ActivationKind::HPrime: return "H_prime";
    case ActivationKind::XDownIn: return "X_d_in";
    case ActivationKind::XDownOut: return "X_d_out";
    case ActivationKind::Q: return "Q";
    case ActivationKind::K: return "K";
    case ActivationKind::V: return "V";
    case ActivationKind::A: return "A";
  }
  return "?";
}

std::span<const ActivationKind> all_activation_kinds() {
  static constexpr std::array kinds = {ActivationKind::H, ActivationKind::HPrime, ActivationKind::XDownIn,
                                       ActivationKind::XDownOut, ActivationKind::Q, ActivationKind::K,
                                       ActivationKind::V, ActivationKind::A};
  return kinds;
}

ActivationKind parse_activation_kind(std::string_view s) {
  for (auto k : all_activation_kinds())
    if (activation_kind_name(k) == s) return k;
  throw Error(ErrorCode::Format, "unknown activation kind", {{"kind", std::string(s)}});
}

void ActivationDumps::put(std::size_t layer, ActivationKind kind, DenseTensor t) {
  entries_.insert_or_assign({layer, kind}, std::move(t));
}

const DenseTensor* ActivationDumps::find(std::size_t layer, ActivationKind kind) const {
  auto it = entries_.find({layer, kind});
  return it == entries_.end() ? nullptr : &it->second;
}

const DenseTensor& ActivationDumps::at(std::size_t layer, ActivationKind kind) const {
  const DenseTensor* t = find(layer, kind);
  if (t == nullptr) {
    throw Error(ErrorCode::State, "activation not captured",
                {{"layer", std::to_string(layer)}, {"kind", std::string(activation_kind_name(kind))}});
  }
  return *t;
}

std::size_t ActivationDumps::layer_count() const {
  std::size_t n = 0;
  for (const auto& [key, t] : entries_) n = std::max(n, key.first + 1);
  return n;
}

std::vector<DenseTensor> ActivationDumps::series(ActivationKind kind) const {
  std::vector<DenseTensor> out;
  const std::size_t layers = layer_count();
  for (std::size_t l = 0; l < layers; ++l) out.push_back(at(l, kind));
  return out;
}

std::vector<LayerActivations> ActivationDumps::stage_inputs() const {
  std::vector<LayerActivations> out;
  const std::size_t layers = layer_count();
  for (std::size_t l = 0; l < layers; ++l) {
    out.push_back({at(l, ActivationKind::XDownIn), at(l, ActivationKind::XDownOut), at(l, ActivationKind::HPrime),
                   at(l, ActivationKind::H)});
  }
  return out;
}

ForwardResult decoder_forward(const DenseTensor& h0, const DecoderWeights& weights, const DecoderConfig& cfg,
                              std::span<const InjectionHook> hooks, const CaptureSet& capture) {
  check_inputs(h0, weights, cfg, hooks);
  ForwardResult r;
  DenseTensor h = h0;
  for (std::size_t l = 0; l < cfg.layers; ++l) h = run_layer(h, weights.layers[l], cfg, l, hooks, capture, r.dumps, {});
  r.output = std::move(h);
  return r;
}

std::string_view preservation_name(Preservation p) {
  switch (p) {
    case Preservation::KVSink: return "kvsink";
    case Preservation::FirstN: return "pfn";
    case Preservation::None: return "none";
  }
  return "?";
}

Preservation parse_preservation(std::string_view s) {
  if (s == "kvsink") return Preservation::KVSink;
  if (s == "pfn") return Preservation::FirstN;
  if (s == "none") return Preservation::None;
  throw Error(ErrorCode::Usage, "unknown preservation mode", {{"mode", std::string(s)}});
}

PrefillResult prefill_with_kvsink(const DenseTensor& h0, const DecoderWeights& weights, const DecoderConfig& cfg,
                                  std::span<const InjectionHook> hooks, const SinkProfile& profile,
                                  const SchemePreset& scheme, const PrefillOptions& options) {
  const auto start = Clock::now();
  check_inputs(h0, weights, cfg, hooks);
  if (options.mode == Preservation::KVSink) {
    profile.validate();
    if (profile.emergence_layer >= cfg.layers) {
      throw Error(ErrorCode::Config, "profile emergence layer beyond decoder depth",
                  {{"emergence_layer", std::to_string(profile.emergence_layer)}});
    }
  }
  const std::size_t n = h0.rows();
  PrefillResult r{DenseTensor(), KVCache(cfg.layers, cfg.kv_width(), scheme), SinkSet{}, ActivationDumps{}, 0.0, 0.0};
  SinkSet active;
  if (options.mode == Preservation::FirstN) active = preserve_first_n(n, options.k);
  r.sinks = active;

  const KvTransform through_cache = [&](std::size_t l, const DenseTensor& k, const DenseTensor& v) {
    r.cache.bulk_load(l, k, v, active);
    return r.cache.reconstruct(l);
  };

  DenseTensor h = h0;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    h = run_layer(h, weights.layers[l], cfg, l, hooks, options.capture, r.dumps, through_cache);
    if (options.mode == Preservation::KVSink && l == profile.emergence_layer) {
      const auto t0 = Clock::now();
      active = detect_sinks(h, profile, options.k, options.magnitude_ratio);
      r.detection_ms = elapsed_ms(t0);
      r.sinks = active;
    }
  }
  r.output = std::move(h);
  r.prefill_ms = elapsed_ms(start);
  return r;
}

SinkModelFixture synthesize_sink_model(const DecoderConfig& cfg, std::span<const PlantedOutlier> plants,
                                       std::size_t emerge_layer, std::size_t dissipate_layer,
                                       const SynthesisOptions& options) {
  cfg.validate();
  if (!(emerge_layer < dissipate_layer && dissipate_layer < cfg.layers)) {
    throw Error(ErrorCode::Config, "need emerge_layer < dissipate_layer < layers",
                {{"emerge", std::to_string(emerge_layer)}, {"dissipate", std::to_string(dissipate_layer)}});
  }
  SinkModelFixture f{DecoderWeights::random(cfg, options.weight_scale), {}};
  if (plants.empty()) return f;
  std::vector<std::size_t> channels;
  for (const auto& p : plants) {
    if (p.channel >= cfg.hidden) throw Error(ErrorCode::Index, "planted channel outside hidden size");
    if (std::find(channels.begin(), channels.end(), p.channel) == channels.end()) channels.push_back(p.channel);
  }
  if (options.sink_kv_scale != 1.0) {
    for (auto& lw : f.weights.layers) {
      for (std::size_t c : channels) {
        for (double& v : lw.wk.row(c)) v *= options.sink_kv_scale;
        for (double& v : lw.wv.row(c)) v *= options.sink_kv_scale;
      }
    }
  }
  InjectionHook add{emerge_layer, HookMode::AddToFfnOutput, {}};
  InjectionHook cancel{dissipate_layer, HookMode::NegateChannels, {}};
  for (const auto& p : plants) {
    add.targets.push_back({p.token, p.channel, p.magnitude});
    cancel.targets.push_back({p.token, p.channel, 1.0});
  }
  f.hooks = {std::move(add), std::move(cancel)};
  if (options.sink_attention > 0.0) {
    std::size_t offset = 0;
    while (std::find(channels.begin(), channels.end(), offset) != channels.end()) ++offset;
    if (offset >= cfg.hidden) throw Error(ErrorCode::Config, "no free channel for the query offset");
    f.hooks.push_back({0, HookMode::AddToChannel, {{0, offset, options.query_offset}}});
    // Query columns of head h read key columns of kv head h / group.
    const std::size_t hd = cfg.head_dim(), group = cfg.heads / cfg.kv_heads;
    for (std::size_t l = emerge_layer + 1; l <= dissipate_layer; ++l) {
      LayerWeights& lw = f.weights.layers[l];
      for (std::size_t c : channels) {
        for (std::size_t h = 0; h < cfg.heads; ++h) {
          for (std::size_t e = 0; e < hd; ++e) {
            lw.wq.at(offset, h * hd + e) += options.sink_attention * lw.wk.at(c, (h / group) * hd + e);
          }
        }
      }
    }
  }
  return f;
}

DenseTensor random_input(std::size_t tokens, std::size_t hidden, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  DenseTensor t({tokens, hidden});
  for (double& v : t.data()) v = normal(rng);
  return t;
}

}  // namespace kvsink
