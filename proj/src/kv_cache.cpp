#include "kvsink/kv_cache.hpp"

#include <algorithm>
#include <string>

#include "kvsink/error.hpp"

namespace kvsink {

Footprint& Footprint::operator+=(const Footprint& o) {
  quantized_bytes += o.quantized_bytes;
  sink_bytes += o.sink_bytes;
  params_bytes += o.params_bytes;
  sparse_bytes += o.sparse_bytes;
  buffer_bytes += o.buffer_bytes;
  return *this;
}

Footprint estimate_footprint(std::size_t layers, std::size_t tokens, std::size_t width, int bits,
                             std::size_t sinks) {
  const std::uint64_t kept = tokens > sinks ? tokens - sinks : 0;
  const std::uint64_t preserved = std::min(tokens, sinks);
  const std::uint64_t bits_per_elem = bits == kPassthroughBits ? 8 * kFullPrecisionBytes : static_cast<std::uint64_t>(bits);
  Footprint f;
  f.quantized_bytes = (2ull * layers * kept * width * bits_per_elem + 7) / 8;
  f.sink_bytes = 2ull * layers * preserved * width * kFullPrecisionBytes;
  return f;
}

KVCache::KVCache(std::size_t layers, std::size_t width, SchemePreset scheme)
    : width_(width), scheme_(std::move(scheme)), layers_(layers) {
  if (layers == 0 || width == 0) throw Error(ErrorCode::Config, "cache needs at least one layer and nonzero width");
  scheme_.key.validate();
  scheme_.value.validate();
  for (auto& l : layers_) {
    l.key.spec = scheme_.key;
    l.value.spec = scheme_.value;
  }
}

KVCache::Layer& KVCache::slot(std::size_t layer) {
  if (layer >= layers_.size()) throw Error(ErrorCode::Index, "layer index out of range", {{"layer", std::to_string(layer)}});
  return layers_[layer];
}

const KVCache::Layer& KVCache::slot(std::size_t layer) const {
  if (layer >= layers_.size()) throw Error(ErrorCode::Index, "layer index out of range", {{"layer", std::to_string(layer)}});
  return layers_[layer];
}

std::size_t KVCache::sequence_length() const noexcept { return layers_.front().order.size(); }
std::size_t KVCache::token_count(std::size_t layer) const { return slot(layer).order.size(); }
std::size_t KVCache::sink_count(std::size_t layer) const { return slot(layer).sinks.size(); }
std::size_t KVCache::quantized_count(std::size_t layer) const { return slot(layer).non_sink; }

SinkSet KVCache::sink_tokens(std::size_t layer) const {
  SinkSet s;
  for (const auto& [t, rows] : slot(layer).sinks) s.indices.push_back(t);
  s.k_requested = s.indices.size();
  return s;
}

void KVCache::set_static_params(std::size_t layer, QuantParams key, QuantParams value) {
  Layer& l = slot(layer);
  l.key.frozen = std::move(key);
  l.value.frozen = std::move(value);
}

const QuantParams* KVCache::static_key_params(std::size_t layer) const {
  const auto& f = slot(layer).key.frozen;
  return f ? &*f : nullptr;
}

const QuantParams* KVCache::static_value_params(std::size_t layer) const {
  const auto& f = slot(layer).value.frozen;
  return f ? &*f : nullptr;
}

void KVCache::flush_block(Stream& s, const DenseTensor& rows) {
  if (s.spec.mode == QuantMode::Static && !s.spec.passthrough()) {
    if (!s.frozen) throw Error(ErrorCode::Config, "static scheme used without calibrated params");
    s.blocks.push_back(quantize(rows, *s.frozen, s.spec));
  } else {
    s.blocks.push_back(quantize(rows, s.spec));
  }
  s.block_rows += rows.rows();
}

void KVCache::push_row(Stream& s, std::span<const double> row) {
  if (s.spec.mode == QuantMode::Static && !s.spec.passthrough() && !s.frozen) {
    throw Error(ErrorCode::Config, "static scheme used without calibrated params");
  }
  if (s.spec.axis != Axis::PerChannel || s.spec.passthrough()) {
    flush_block(s, DenseTensor({1, row.size()}, std::vector<double>(row.begin(), row.end())));
    return;
  }
  s.pending.emplace_back(row.begin(), row.end());
  if (s.pending.size() == s.spec.group_size) {
    std::vector<double> flat;
    flat.reserve(s.pending.size() * row.size());
    for (const auto& r : s.pending) flat.insert(flat.end(), r.begin(), r.end());
    const std::size_t count = s.pending.size();
    s.pending.clear();
    flush_block(s, DenseTensor({count, row.size()}, std::move(flat)));
  }
}

void KVCache::append(std::size_t layer, std::span<const double> key, std::span<const double> value, bool is_sink) {
  Layer& l = slot(layer);
  if (key.size() != width_ || value.size() != width_) {
    throw Error(ErrorCode::Shape, "appended row width mismatch",
                {{"expected", std::to_string(width_)}, {"key", std::to_string(key.size())}});
  }
  ensure_finite(key, "cache append");
  ensure_finite(value, "cache append");
  const std::size_t token = l.order.size();
  if (is_sink) {
    l.sinks.emplace(token, std::make_pair(std::vector<double>(key.begin(), key.end()),
                                          std::vector<double>(value.begin(), value.end())));
    l.order.push_back({true, 0});
    return;
  }
  push_row(l.key, key);
  push_row(l.value, value);
  l.order.push_back({false, l.non_sink++});
}

void KVCache::bulk_load(std::size_t layer, const DenseTensor& keys, const DenseTensor& values, const SinkSet& sinks) {
  Layer& l = slot(layer);
  if (!l.order.empty()) throw Error(ErrorCode::State, "bulk_load requires an empty layer", {{"layer", std::to_string(layer)}});
  if (keys.ndim() != 2 || values.dims() != keys.dims() || keys.cols() != width_) {
    throw Error(ErrorCode::Shape, "bulk_load expects K and V of shape [n, width]");
  }
  const std::size_t n = keys.rows();
  for (std::size_t i : sinks.indices) {
    if (i >= n) throw Error(ErrorCode::Index, "sink index beyond sequence", {{"index", std::to_string(i)}, {"n", std::to_string(n)}});
  }
  std::vector<std::size_t> kept;
  for (std::size_t t = 0; t < n; ++t) {
    if (sinks.contains(t)) {
      auto k = keys.row(t), v = values.row(t);
      l.sinks.emplace(t, std::make_pair(std::vector<double>(k.begin(), k.end()), std::vector<double>(v.begin(), v.end())));
      l.order.push_back({true, 0});
    } else {
      l.order.push_back({false, kept.size()});
      kept.push_back(t);
    }
  }
  l.non_sink = kept.size();
  if (kept.empty()) return;
  const DenseTensor k = keys.gather_rows(kept);
  const DenseTensor v = values.gather_rows(kept);
  for (auto [stream, rows] : {std::pair{&l.key, &k}, std::pair{&l.value, &v}}) {
    if (stream->spec.mode == QuantMode::Static && !stream->spec.passthrough() && !stream->frozen) {
      stream->frozen = compute_params(*rows, stream->spec);
    }
    flush_block(*stream, *rows);
  }
}

std::vector<double> KVCache::stream_rows(const Stream& s, std::size_t width) {
  std::vector<double> out;
  out.reserve((s.block_rows + s.pending.size()) * width);
  for (const auto& b : s.blocks) {
    const DenseTensor d = dequantize(b);
    out.insert(out.end(), d.values().begin(), d.values().end());
  }
  for (const auto& r : s.pending) out.insert(out.end(), r.begin(), r.end());
  return out;
}

std::pair<DenseTensor, DenseTensor> KVCache::reconstruct(std::size_t layer) const {
  const Layer& l = slot(layer);
  const std::size_t n = l.order.size();
  const std::vector<double> krows = stream_rows(l.key, width_);
  const std::vector<double> vrows = stream_rows(l.value, width_);
  std::vector<double> kout(n * width_), vout(n * width_);
  for (std::size_t t = 0; t < n; ++t) {
    const Slot& s = l.order[t];
    const double* ksrc;
    const double* vsrc;
    if (s.sink) {
      const auto& rows = l.sinks.at(t);
      ksrc = rows.first.data();
      vsrc = rows.second.data();
    } else {
      ksrc = krows.data() + s.index * width_;
      vsrc = vrows.data() + s.index * width_;
    }
    std::copy_n(ksrc, width_, kout.begin() + static_cast<std::ptrdiff_t>(t * width_));
    std::copy_n(vsrc, width_, vout.begin() + static_cast<std::ptrdiff_t>(t * width_));
  }
  return {DenseTensor({n, width_}, std::move(kout)), DenseTensor({n, width_}, std::move(vout))};
}

Footprint KVCache::stream_footprint(const Stream& s, std::size_t width) {
  // Codes of all blocks form one contiguous packed stream.
  Footprint f;
  std::uint64_t code_bits = 0;
  for (const auto& b : s.blocks) {
    if (b.spec.passthrough()) {
      f.quantized_bytes += b.raw.size() * kFullPrecisionBytes;
      continue;
    }
    code_bits += static_cast<std::uint64_t>(b.codes.count()) * static_cast<std::uint64_t>(b.codes.bits());
    f.sparse_bytes += b.sparse.size() * kSparseEntryBytes;
    if (b.spec.mode == QuantMode::Dynamic) f.params_bytes += b.params.groups.size() * kGroupParamBytes;
  }
  f.quantized_bytes += (code_bits + 7) / 8;
  if (s.frozen) f.params_bytes += s.frozen->groups.size() * kGroupParamBytes;
  f.buffer_bytes += s.pending.size() * width * kFullPrecisionBytes;
  return f;
}

Footprint KVCache::layer_footprint(std::size_t layer) const {
  const Layer& l = slot(layer);
  Footprint f = stream_footprint(l.key, width_) + stream_footprint(l.value, width_);
  f.sink_bytes += 2ull * l.sinks.size() * width_ * kFullPrecisionBytes;
  return f;
}

Footprint KVCache::memory_footprint() const {
  Footprint f;
  for (std::size_t i = 0; i < layers_.size(); ++i) f += layer_footprint(i);
  return f;
}

}  // namespace kvsink
