#include "kvsink/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "kvsink/error.hpp"

namespace kvsink {

namespace {

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

double round_half_even(double x) { return std::nearbyint(x); }

struct GroupAccumulator {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  std::vector<double> values;  // only filled when clipping

  void add(double v, bool keep) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
    if (keep) values.push_back(v);
  }
  bool any() const { return lo <= hi; }
};

GroupParams finalize(GroupAccumulator& acc, const QuantSpec& spec) {
  GroupParams p;
  if (!acc.any()) return p;  // no contributing data: degenerate, constant 0
  double lo = acc.lo, hi = acc.hi;
  if (spec.clip && *spec.clip > 0.0 && acc.values.size() > 1) {
    std::sort(acc.values.begin(), acc.values.end());
    const std::size_t m = acc.values.size();
    const auto cut = static_cast<std::size_t>(std::floor(*spec.clip * static_cast<double>(m - 1)));
    lo = acc.values[cut];
    hi = acc.values[m - 1 - cut];
  }
  p.lo = lo;
  p.hi = hi;
  if (hi == lo) {
    p.degenerate = true;
    p.constant = lo;
    return p;
  }
  p.degenerate = false;
  p.scale = (hi - lo) / static_cast<double>(spec.max_code());
  p.zero = static_cast<std::int64_t>(-round_half_even(lo / p.scale));
  return p;
}

std::vector<bool> sparse_mask(const DenseTensor& x, const QuantSpec& spec, const std::vector<bool>& excluded) {
  std::vector<bool> mask(x.size(), false);
  if (spec.sparse_fraction <= 0.0) return mask;
  for (std::size_t idx : select_sparse(x, spec, excluded)) mask[idx] = true;
  return mask;
}

void check_matrix(const DenseTensor& x) {
  if (x.ndim() == 0) throw Error(ErrorCode::Shape, "quantizer input has no dimensions");
}

// Accumulates the statistics of one sample into `acc`, skipping excluded
// rows and sparse outliers.
void accumulate(const DenseTensor& x, const QuantSpec& spec, const GroupLayout& layout,
                const std::vector<bool>& excluded, std::vector<GroupAccumulator>& acc) {
  const std::vector<bool> sparse = sparse_mask(x, spec, excluded);
  const bool keep = spec.clip.has_value() && *spec.clip > 0.0;
  const std::size_t n = x.rows(), d = x.cols();
  for (std::size_t r = 0; r < n; ++r) {
    if (!excluded.empty() && excluded[r]) continue;
    for (std::size_t c = 0; c < d; ++c) {
      if (sparse[r * d + c]) continue;
      acc[layout.group_of(r, c)].add(x.at(r, c), keep);
    }
  }
}

}  // namespace

void QuantSpec::validate() const {
  if (!(bits >= 2 && bits <= 8) && bits != kPassthroughBits) {
    throw Error(ErrorCode::Config, "bits must be in [2, 8] (or 16 for pass-through)",
                {{"bits", std::to_string(bits)}});
  }
  if (group_size < 1) throw Error(ErrorCode::Config, "group_size must be >= 1");
  if (!(sparse_fraction >= 0.0 && sparse_fraction <= 1.0)) {
    throw Error(ErrorCode::Config, "sparse_fraction must be in [0, 1]");
  }
  if (clip && !(*clip >= 0.0 && *clip < 0.5)) throw Error(ErrorCode::Config, "clip must be in [0, 0.5)");
}

std::string_view axis_name(Axis a) {
  switch (a) {
    case Axis::PerToken: return "per_token";
    case Axis::PerChannel: return "per_channel";
    case Axis::PerTensor: return "per_tensor";
  }
  return "?";
}

std::string_view mode_name(QuantMode m) { return m == QuantMode::Dynamic ? "dynamic" : "static"; }

Axis parse_axis(std::string_view s) {
  if (s == "per_token") return Axis::PerToken;
  if (s == "per_channel") return Axis::PerChannel;
  if (s == "per_tensor") return Axis::PerTensor;
  throw Error(ErrorCode::Config, "unknown quantization axis", {{"axis", std::string(s)}});
}

QuantMode parse_mode(std::string_view s) {
  if (s == "dynamic") return QuantMode::Dynamic;
  if (s == "static") return QuantMode::Static;
  throw Error(ErrorCode::Config, "unknown quantization mode", {{"mode", std::string(s)}});
}

// ---------------------------------------------------------------------------
// GroupLayout

GroupLayout GroupLayout::make(const QuantSpec& spec, std::size_t rows, std::size_t cols) {
  return GroupLayout{spec.axis, spec.mode, spec.group_size, rows, cols};
}

std::size_t GroupLayout::group_count() const {
  switch (axis) {
    case Axis::PerTensor: return 1;
    case Axis::PerToken:
      return mode == QuantMode::Dynamic ? rows * ceil_div(cols, group_size) : ceil_div(cols, group_size);
    case Axis::PerChannel:
      return mode == QuantMode::Dynamic ? cols * ceil_div(rows, group_size) : cols;
  }
  return 0;
}

std::size_t GroupLayout::group_of(std::size_t r, std::size_t c) const {
  switch (axis) {
    case Axis::PerTensor: return 0;
    case Axis::PerToken:
      return mode == QuantMode::Dynamic ? r * ceil_div(cols, group_size) + c / group_size : c / group_size;
    case Axis::PerChannel:
      return mode == QuantMode::Dynamic ? c * ceil_div(rows, group_size) + r / group_size : c;
  }
  return 0;
}

std::size_t GroupLayout::code_position(std::size_t r, std::size_t c) const {
  return axis == Axis::PerChannel ? c * rows + r : r * cols + c;
}

bool GroupLayout::group_spans_row(std::size_t g, std::size_t r) const {
  if (mode == QuantMode::Static || axis == Axis::PerTensor) return true;
  if (axis == Axis::PerToken) return g / ceil_div(cols, group_size) == r;
  return g % ceil_div(rows, group_size) == r / group_size;
}

// ---------------------------------------------------------------------------
// PackedCodes

PackedCodes::PackedCodes(int bits, std::size_t count)
    : bits_(bits), count_(count), bytes_(ceil_div(count * static_cast<std::size_t>(bits), 8), 0) {}

std::uint32_t PackedCodes::get(std::size_t i) const {
  std::uint32_t v = 0;
  std::size_t bit = i * static_cast<std::size_t>(bits_);
  for (int b = 0; b < bits_; ++b, ++bit) v |= static_cast<std::uint32_t>((bytes_[bit >> 3] >> (bit & 7)) & 1u) << b;
  return v;
}

void PackedCodes::set(std::size_t i, std::uint32_t code) {
  std::size_t bit = i * static_cast<std::size_t>(bits_);
  for (int b = 0; b < bits_; ++b, ++bit) {
    const auto m = static_cast<std::uint8_t>(1u << (bit & 7));
    if ((code >> b) & 1u) bytes_[bit >> 3] |= m;
    else bytes_[bit >> 3] &= static_cast<std::uint8_t>(~m);
  }
}

PackedCodes PackedCodes::from_bytes(int bits, std::size_t count, std::vector<std::uint8_t> bytes) {
  PackedCodes p(bits, count);
  if (bytes.size() != p.bytes_.size()) throw Error(ErrorCode::Format, "packed code length mismatch");
  p.bytes_ = std::move(bytes);
  return p;
}

// ---------------------------------------------------------------------------
// Quantization

std::vector<std::size_t> select_sparse(const DenseTensor& x, const QuantSpec& spec,
                                       const std::vector<bool>& excluded) {
  std::vector<std::size_t> out;
  if (spec.sparse_fraction <= 0.0 || x.empty()) return out;
  const std::size_t n = x.rows(), d = x.cols();
  auto is_excluded = [&](std::size_t r) { return !excluded.empty() && excluded[r]; };
  auto pick = [&](const std::vector<double>& vals, const std::vector<std::size_t>& flat) {
    const auto count = static_cast<std::size_t>(std::nearbyint(spec.sparse_fraction * static_cast<double>(vals.size())));
    for (const auto& iv : top_k_abs(vals, count)) out.push_back(flat[iv.index]);
  };
  std::vector<double> vals;
  std::vector<std::size_t> flat;
  switch (spec.axis) {
    case Axis::PerToken:
      for (std::size_t r = 0; r < n; ++r) {
        if (is_excluded(r)) continue;
        vals.assign(x.row(r).begin(), x.row(r).end());
        flat.resize(d);
        for (std::size_t c = 0; c < d; ++c) flat[c] = r * d + c;
        pick(vals, flat);
      }
      break;
    case Axis::PerChannel:
      for (std::size_t c = 0; c < d; ++c) {
        vals.clear();
        flat.clear();
        for (std::size_t r = 0; r < n; ++r) {
          if (is_excluded(r)) continue;
          vals.push_back(x.at(r, c));
          flat.push_back(r * d + c);
        }
        pick(vals, flat);
      }
      break;
    case Axis::PerTensor:
      for (std::size_t r = 0; r < n; ++r) {
        if (is_excluded(r)) continue;
        for (std::size_t c = 0; c < d; ++c) {
          vals.push_back(x.at(r, c));
          flat.push_back(r * d + c);
        }
      }
      pick(vals, flat);
      break;
  }
  std::sort(out.begin(), out.end());
  return out;
}

QuantParams compute_params(const DenseTensor& x, const QuantSpec& spec, const SinkSet& exclude) {
  spec.validate();
  check_matrix(x);
  if (spec.mode == QuantMode::Static) {
    CalibrationSet cal{{x}};
    const SinkSet sinks[] = {exclude};
    return calibrate(cal, spec, !exclude.empty(), sinks);
  }
  for (std::size_t i : exclude.indices) {
    if (i >= x.rows()) throw Error(ErrorCode::Index, "excluded token index out of range");
  }
  QuantParams params{GroupLayout::make(spec, x.rows(), x.cols()), {}};
  if (spec.passthrough()) return params;
  std::vector<GroupAccumulator> acc(params.layout.group_count());
  accumulate(x, spec, params.layout, exclude.mask(x.rows()), acc);
  params.groups.reserve(acc.size());
  for (auto& a : acc) params.groups.push_back(finalize(a, spec));
  return params;
}

QuantParams calibrate(const CalibrationSet& cal, const QuantSpec& spec, bool exclude_sinks,
                      std::span<const SinkSet> sinks_per_sample) {
  spec.validate();
  if (spec.mode != QuantMode::Static) throw Error(ErrorCode::Config, "calibration requires a static spec");
  if (cal.samples.empty()) throw Error(ErrorCode::Calibration, "empty calibration set");
  if (exclude_sinks && !sinks_per_sample.empty() && sinks_per_sample.size() != cal.samples.size()) {
    throw Error(ErrorCode::Calibration, "one sink set per calibration sample is required");
  }
  const std::size_t d = cal.samples.front().cols();
  QuantParams params{GroupLayout::make(spec, 0, d), {}};
  if (spec.passthrough()) return params;
  std::vector<GroupAccumulator> acc(params.layout.group_count());
  for (std::size_t i = 0; i < cal.samples.size(); ++i) {
    const DenseTensor& x = cal.samples[i];
    if (x.cols() != d) throw Error(ErrorCode::Shape, "calibration samples must share trailing dims");
    std::vector<bool> excluded;
    if (exclude_sinks && !sinks_per_sample.empty()) excluded = sinks_per_sample[i].mask(x.rows());
    GroupLayout layout = params.layout;
    layout.rows = x.rows();
    accumulate(x, spec, layout, excluded, acc);
  }
  params.groups.reserve(acc.size());
  for (auto& a : acc) params.groups.push_back(finalize(a, spec));
  return params;
}

QuantizedTensor quantize(const DenseTensor& x, const QuantParams& params, const QuantSpec& spec) {
  spec.validate();
  check_matrix(x);
  const std::size_t n = x.rows(), d = x.cols();
  QuantizedTensor q;
  q.dims = x.dims();
  q.spec = spec;
  q.params = params;
  q.params.layout.rows = n;
  if (spec.passthrough()) {
    q.params.layout.cols = d;
    q.raw = x.values();
    return q;
  }
  const GroupLayout& layout = q.params.layout;
  if (layout.axis != spec.axis || layout.mode != spec.mode || layout.group_size != spec.group_size ||
      layout.cols != d || (spec.mode == QuantMode::Dynamic && params.layout.rows != n) ||
      params.groups.size() != layout.group_count()) {
    throw Error(ErrorCode::Shape, "quantization params do not match tensor layout",
                {{"rows", std::to_string(n)}, {"cols", std::to_string(d)}});
  }
  const std::vector<std::size_t> sparse_idx = select_sparse(x, spec);
  std::vector<bool> is_sparse(x.size(), false);
  for (std::size_t i : sparse_idx) {
    is_sparse[i] = true;
    q.sparse.push_back({i, x.values()[i]});
  }
  q.codes = PackedCodes(spec.bits, x.size());
  const auto top = static_cast<double>(spec.max_code());
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < d; ++c) {
      if (is_sparse[r * d + c]) continue;
      const GroupParams& g = q.params.groups[layout.group_of(r, c)];
      if (g.degenerate) continue;
      const double code = std::clamp(round_half_even(x.at(r, c) / g.scale) + static_cast<double>(g.zero), 0.0, top);
      q.codes.set(layout.code_position(r, c), static_cast<std::uint32_t>(code));
    }
  }
  return q;
}

QuantizedTensor quantize(const DenseTensor& x, const QuantSpec& spec) {
  return quantize(x, compute_params(x, spec), spec);
}

DenseTensor dequantize(const QuantizedTensor& q) {
  if (q.spec.passthrough()) return DenseTensor(q.dims, q.raw);
  const GroupLayout& layout = q.params.layout;
  const std::size_t n = layout.rows, d = layout.cols;
  std::vector<double> out(n * d);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < d; ++c) {
      const GroupParams& g = q.params.groups[layout.group_of(r, c)];
      out[r * d + c] = g.degenerate
                           ? g.constant
                           : g.scale * (static_cast<double>(q.codes.get(layout.code_position(r, c))) -
                                        static_cast<double>(g.zero));
    }
  }
  for (const SparseEntry& s : q.sparse) out[s.index] = s.value;
  return DenseTensor(q.dims, std::move(out));
}

// ---------------------------------------------------------------------------
// Scheme presets

std::vector<std::string> scheme_names() {
  return {"pt_kv_static", "pt_kv_dynamic", "pc_key_pt_value_static", "kvquant_like", "passthrough"};
}

SchemePreset make_scheme(std::string_view name, int bits, std::size_t group_size,
                         std::optional<double> sparse_fraction) {
  QuantSpec base;
  base.bits = bits;
  base.group_size = group_size;
  base.sparse_fraction = sparse_fraction.value_or(0.0);
  SchemePreset s{std::string(name), base, base};
  if (name == "pt_kv_static") {
    s.key.axis = s.value.axis = Axis::PerToken;
    s.key.mode = s.value.mode = QuantMode::Static;
  } else if (name == "pt_kv_dynamic") {
    s.key.axis = s.value.axis = Axis::PerToken;
    s.key.mode = s.value.mode = QuantMode::Dynamic;
  } else if (name == "pc_key_pt_value_static") {
    s.key.axis = Axis::PerChannel;
    s.value.axis = Axis::PerToken;
    s.key.mode = s.value.mode = QuantMode::Static;
  } else if (name == "kvquant_like") {
    s.key.axis = Axis::PerChannel;
    s.key.mode = QuantMode::Static;
    s.value.axis = Axis::PerToken;
    s.value.mode = QuantMode::Dynamic;
    s.key.sparse_fraction = s.value.sparse_fraction = sparse_fraction.value_or(0.01);
  } else if (name == "passthrough") {
    s.key = s.value = QuantSpec::lossless();
  } else {
    throw Error(ErrorCode::Config, "unknown quantization scheme", {{"scheme", std::string(name)}});
  }
  s.key.validate();
  s.value.validate();
  return s;
}

namespace {

QuantizedTensor quantize_component(const DenseTensor& x, const QuantSpec& spec, const QuantParams* frozen) {
  if (spec.mode == QuantMode::Static && frozen != nullptr) return quantize(x, *frozen, spec);
  if (x.rows() == 0) {
    QuantizedTensor q;
    q.dims = x.dims();
    q.spec = spec;
    q.params.layout = GroupLayout::make(spec, 0, x.cols());
    q.codes = PackedCodes(spec.passthrough() ? 0 : spec.bits, 0);
    return q;
  }
  return quantize(x, compute_params(x, spec), spec);
}

}  // namespace

QuantizedPair quantize_scheme(const DenseTensor& keys, const DenseTensor& values, const SchemePreset& scheme,
                              const SinkSet& sinks, const QuantParams* key_static,
                              const QuantParams* value_static) {
  if (keys.ndim() != 2 || values.ndim() != 2 || keys.rows() != values.rows()) {
    throw Error(ErrorCode::Shape, "keys and values must be [n, d] with equal n");
  }
  QuantizedPair out;
  for (std::size_t i : sinks.indices) {
    if (i >= keys.rows()) throw Error(ErrorCode::Index, "sink index out of range", {{"index", std::to_string(i)}});
  }
  for (std::size_t t = 0; t < keys.rows(); ++t)
    if (!sinks.contains(t)) out.kept_rows.push_back(t);
  const DenseTensor k = keys.gather_rows(out.kept_rows);
  const DenseTensor v = values.gather_rows(out.kept_rows);
  out.keys = quantize_component(k, scheme.key, key_static);
  out.values = quantize_component(v, scheme.value, value_static);
  return out;
}

double mean_squared_error(const DenseTensor& a, const DenseTensor& b) {
  if (a.size() != b.size()) throw Error(ErrorCode::Shape, "mse operands differ in size");
  if (a.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double e = a.values()[i] - b.values()[i];
    s += e * e;
  }
  return s / static_cast<double>(a.size());
}

}  // namespace kvsink
