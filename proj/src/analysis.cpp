#include "kvsink/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "kvsink/error.hpp"

namespace kvsink {

namespace {

void require_matrix(const DenseTensor& x, const char* what) {
  if (x.ndim() != 2) throw Error(ErrorCode::Shape, std::string(what) + " must be 2-D");
}

void require_sinks(const SinkSet& sinks, std::size_t n) {
  if (sinks.empty()) throw Error(ErrorCode::BiasUndefined, "sink set is empty");
  if (sinks.indices.back() >= n) {
    throw Error(ErrorCode::Index, "sink index beyond sequence",
                {{"index", std::to_string(sinks.indices.back())}, {"n", std::to_string(n)}});
  }
}

void require_heads(std::size_t width, std::size_t heads, std::size_t kv_heads, std::size_t kv_width) {
  if (heads == 0 || kv_heads == 0 || heads % kv_heads != 0 || width % heads != 0 ||
      kv_width != kv_heads * (width / heads)) {
    throw Error(ErrorCode::Shape, "head configuration does not match tensor widths",
                {{"heads", std::to_string(heads)}, {"kv_heads", std::to_string(kv_heads)}});
  }
}

// Columns [h * dk, (h + 1) * dk) of x as an [n, dk] matrix.
DenseTensor column_block(const DenseTensor& x, std::size_t h, std::size_t dk) {
  const std::size_t n = x.rows();
  DenseTensor out({n, dk});
  for (std::size_t t = 0; t < n; ++t) {
    auto src = x.row(t).subspan(h * dk, dk);
    std::copy(src.begin(), src.end(), out.row(t).begin());
  }
  return out;
}

DenseTensor head_matrix(const DenseTensor& a, std::size_t h) {
  const std::size_t n = a.dims()[1];
  std::vector<double> buf(a.values().begin() + static_cast<std::ptrdiff_t>(h * n * n),
                          a.values().begin() + static_cast<std::ptrdiff_t>((h + 1) * n * n));
  return DenseTensor({n, n}, std::move(buf));
}

double squared(double x) { return x * x; }

}  // namespace

DenseTensor fake_quantize(const DenseTensor& x, const QuantSpec& spec, const SinkSet& keep) {
  require_matrix(x, "tensor");
  if (keep.empty()) return dequantize(quantize(x, spec));
  std::vector<std::size_t> rows;
  for (std::size_t t = 0; t < x.rows(); ++t)
    if (!keep.contains(t)) rows.push_back(t);
  DenseTensor out = x;
  if (rows.empty()) return out;
  const DenseTensor dq = dequantize(quantize(x.gather_rows(rows), spec));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto src = dq.row(i);
    std::copy(src.begin(), src.end(), out.row(rows[i]).begin());
  }
  return out;
}

ErrorReport error_decomposition(const DenseTensor& x, const SinkSet& sinks, std::span<const QuantSpec> specs,
                                const CalibrationSet* cal, std::span<const SinkSet> cal_sinks) {
  require_matrix(x, "error input");
  const std::size_t n = x.rows(), d = x.cols();
  for (std::size_t i : sinks.indices)
    if (i >= n) throw Error(ErrorCode::Index, "sink index beyond sequence", {{"index", std::to_string(i)}});
  const std::vector<bool> sink_row = sinks.mask(n);

  ErrorReport report{sinks, n, d, {}};
  for (const QuantSpec& spec : specs) {
    spec.validate();
    ErrorRow row;
    row.spec = spec;
    if (spec.mode == QuantMode::Static && !spec.passthrough()) {
      if (cal == nullptr || cal->samples.empty()) {
        throw Error(ErrorCode::Config, "static spec requires a calibration set", {{"bits", std::to_string(spec.bits)}});
      }
      const QuantParams with = calibrate(*cal, spec);
      const DenseTensor dq = dequantize(quantize(x, with, spec));
      double sse = 0.0, sse_non_sink = 0.0;
      std::size_t non_sink_elems = 0;
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < d; ++c) {
          const double e = squared(dq.at(r, c) - x.at(r, c));
          sse += e;
          if (!sink_row[r]) {
            sse_non_sink += e;
            ++non_sink_elems;
          }
        }
      }
      row.mse_overall = n * d == 0 ? 0.0 : sse / static_cast<double>(n * d);
      // Every static group spans all rows, so all groups hold sinks when any exist.
      if (sinks.empty()) {
        row.mse_without_sink_groups = row.mse_overall;
        row.elements_without_sink_groups = n * d;
      } else {
        row.elements_with_sink_groups = n * d;
      }
      row.mse_non_sink_tokens = non_sink_elems == 0 ? 0.0 : sse_non_sink / static_cast<double>(non_sink_elems);

      std::vector<SinkSet> per_sample(cal_sinks.begin(), cal_sinks.end());
      if (per_sample.empty()) per_sample.assign(cal->samples.size(), sinks);
      const QuantParams without = calibrate(*cal, spec, true, per_sample);
      std::vector<std::size_t> kept;
      for (std::size_t r = 0; r < n; ++r)
        if (!sink_row[r]) kept.push_back(r);
      if (kept.empty()) {
        row.mse_sinks_excluded = 0.0;
      } else {
        const DenseTensor xs = x.gather_rows(kept);
        row.mse_sinks_excluded = mean_squared_error(dequantize(quantize(xs, without, spec)), xs);
      }
    } else {
      const QuantizedTensor q = quantize(x, spec);
      const DenseTensor dq = dequantize(q);
      const GroupLayout& layout = q.params.layout;
      std::vector<bool> group_has_sink;
      if (!spec.passthrough()) {
        group_has_sink.assign(layout.group_count(), false);
        for (std::size_t g = 0; g < group_has_sink.size(); ++g)
          for (std::size_t s : sinks.indices)
            if (layout.group_spans_row(g, s)) group_has_sink[g] = true;
      }
      double sse_with = 0.0, sse_without = 0.0;
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < d; ++c) {
          const double e = squared(dq.at(r, c) - x.at(r, c));
          const bool with = spec.passthrough() ? sink_row[r] : group_has_sink[layout.group_of(r, c)];
          if (with) {
            sse_with += e;
            ++row.elements_with_sink_groups;
          } else {
            sse_without += e;
            ++row.elements_without_sink_groups;
          }
        }
      }
      row.mse_overall = n * d == 0 ? 0.0 : (sse_with + sse_without) / static_cast<double>(n * d);
      row.mse_without_sink_groups =
          row.elements_without_sink_groups == 0 ? 0.0 : sse_without / static_cast<double>(row.elements_without_sink_groups);
      row.mse_with_sink_groups =
          row.elements_with_sink_groups == 0 ? 0.0 : sse_with / static_cast<double>(row.elements_with_sink_groups);
    }
    report.rows.push_back(std::move(row));
  }
  return report;
}

std::vector<std::vector<double>> bias_vectors(const DenseTensor& a, const DenseTensor& v, const SinkSet& sinks) {
  require_matrix(a, "attention matrix");
  require_matrix(v, "value matrix");
  const std::size_t n = a.rows();
  if (a.cols() != n || v.rows() != n) throw Error(ErrorCode::Shape, "attention must be [n, n] and V [n, d_k]");
  require_sinks(sinks, n);
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t i = t + 1; i < n; ++i)
      if (a.at(t, i) != 0.0) {
        throw Error(ErrorCode::Config, "attention matrix is not causal",
                    {{"row", std::to_string(t)}, {"col", std::to_string(i)}});
      }
  const std::size_t dk = v.cols();
  std::vector<std::vector<double>> out;
  for (std::size_t t = sinks.indices.front(); t < n; ++t) {
    std::vector<double> b(dk, 0.0);
    for (std::size_t i : sinks.indices) {
      if (i > t) break;
      const double p = a.at(t, i);
      auto vi = v.row(i);
      for (std::size_t e = 0; e < dk; ++e) b[e] += p * vi[e];
    }
    out.push_back(std::move(b));
  }
  return out;
}

HeadBias attention_bias(const DenseTensor& a, const DenseTensor& v, const SinkSet& sinks, const BiasOptions& options) {
  std::vector<std::vector<double>> b = bias_vectors(a, v, sinks);
  HeadBias r;
  r.first_token = sinks.indices.front();
  r.tokens = b.size();
  const std::size_t m = b.size(), dk = v.cols();

  std::vector<std::vector<double>> unit(m, std::vector<double>(dk, 0.0));
  std::size_t zeros = 0;
  for (std::size_t t = 0; t < m; ++t) {
    const double norm = l2_norm(b[t]);
    if (norm == 0.0) {
      ++zeros;
      continue;
    }
    for (std::size_t e = 0; e < dk; ++e) unit[t][e] = b[t][e] / norm;
  }

  if (options.centroid) {
    std::vector<double> mean(dk, 0.0);
    for (const auto& bt : b)
      for (std::size_t e = 0; e < dk; ++e) mean[e] += bt[e] / static_cast<double>(m);
    double total = 0.0;
    for (const auto& bt : b) {
      const CosineResult c = cosine_similarity_checked(bt, mean);
      total += c.value;
      if (c.degenerate) ++r.degenerate_pairs;
    }
    r.pairs = m;
    r.average_cosine = m == 0 ? 0.0 : std::clamp(total / static_cast<double>(m), -1.0, 1.0);
  } else {
    r.pairs = m < 2 ? 0 : m * (m - 1) / 2;
    r.degenerate_pairs = zeros * (m - zeros) + (zeros < 2 ? 0 : zeros * (zeros - 1) / 2);
    const bool identical = zeros == 0 && std::all_of(unit.begin(), unit.end(), [&](const auto& u) { return u == unit.front(); });
    if (r.pairs == 0) {
      r.average_cosine = 0.0;
    } else if (identical) {
      r.average_cosine = 1.0;
    } else {
      // sum_{i<j} u_i.u_j = (|sum u|^2 - sum |u|^2) / 2
      std::vector<double> sum(dk, 0.0);
      double self = 0.0;
      for (const auto& u : unit) {
        for (std::size_t e = 0; e < dk; ++e) sum[e] += u[e];
        self += dot(u, u);
      }
      const double cross = dot(sum, sum) - self;
      r.average_cosine = std::clamp(cross / static_cast<double>(m * (m - 1)), -1.0, 1.0);
    }
  }
  if (options.keep_vectors) r.vectors = std::move(b);
  return r;
}

DenseTensor attention_probabilities(const DenseTensor& q, const DenseTensor& k, std::size_t heads,
                                    std::size_t kv_heads) {
  require_matrix(q, "Q");
  require_matrix(k, "K");
  if (q.rows() != k.rows()) throw Error(ErrorCode::Shape, "Q and K token counts differ");
  require_heads(q.cols(), heads, kv_heads, k.cols());
  const std::size_t n = q.rows(), dk = q.cols() / heads, group = heads / kv_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));
  DenseTensor a({heads, n, n});
  auto out = a.data();
  std::vector<double> scores;
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t g = h / group;
    for (std::size_t t = 0; t < n; ++t) {
      scores.assign(t + 1, 0.0);
      auto qt = q.row(t).subspan(h * dk, dk);
      for (std::size_t j = 0; j <= t; ++j) scores[j] = dot(qt, k.row(j).subspan(g * dk, dk)) * inv_sqrt;
      const std::vector<double> p = softmax_row(scores);
      std::copy(p.begin(), p.end(), out.begin() + static_cast<std::ptrdiff_t>((h * n + t) * n));
    }
  }
  return a;
}

BiasReport attention_bias_layer(const DenseTensor& a, const DenseTensor& v, const SinkSet& sinks, std::size_t heads,
                                std::size_t kv_heads, std::size_t layer, const BiasOptions& options) {
  if (a.ndim() != 3 || a.dims()[0] != heads || a.dims()[1] != a.dims()[2]) {
    throw Error(ErrorCode::Shape, "attention tensor must be [heads, n, n]");
  }
  require_matrix(v, "V");
  if (heads == 0 || kv_heads == 0 || heads % kv_heads != 0 || v.cols() % kv_heads != 0) {
    throw Error(ErrorCode::Shape, "head configuration does not match V width");
  }
  const std::size_t dk = v.cols() / kv_heads, group = heads / kv_heads;
  BiasReport report;
  for (std::size_t h = 0; h < heads; ++h) {
    HeadBias hb = attention_bias(head_matrix(a, h), column_block(v, h / group, dk), sinks, options);
    hb.layer = layer;
    hb.head = h;
    report.heads.push_back(std::move(hb));
  }
  return report;
}

DisruptionReport bias_disruption(const DenseTensor& q, const DenseTensor& k, const DenseTensor& v,
                                 const SinkSet& sinks, std::size_t heads, std::size_t kv_heads,
                                 std::span<const QuantSpec> specs, bool preserve_sinks) {
  require_matrix(v, "V");
  if (v.dims() != k.dims()) throw Error(ErrorCode::Shape, "K and V shapes differ");
  const std::size_t n = q.rows();
  require_sinks(sinks, n);
  const DenseTensor a_fp = attention_probabilities(q, k, heads, kv_heads);
  const std::size_t dk = v.cols() / kv_heads, group = heads / kv_heads;

  std::vector<std::vector<std::vector<double>>> b_fp;
  for (std::size_t h = 0; h < heads; ++h) b_fp.push_back(bias_vectors(head_matrix(a_fp, h), column_block(v, h / group, dk), sinks));

  DisruptionReport report;
  report.sinks_preserved = preserve_sinks;
  const SinkSet keep = preserve_sinks ? sinks : SinkSet{};
  for (const QuantSpec& spec : specs) {
    spec.validate();
    const DenseTensor kq = fake_quantize(k, spec, keep);
    const DenseTensor vq = fake_quantize(v, spec, keep);
    const DenseTensor a_q = attention_probabilities(q, kq, heads, kv_heads);
    DisruptionRow row;
    row.spec = spec;
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t h = 0; h < heads; ++h) {
      const auto bq = bias_vectors(head_matrix(a_q, h), column_block(vq, h / group, dk), sinks);
      for (std::size_t t = 0; t < bq.size(); ++t) {
        double s = 0.0;
        for (std::size_t e = 0; e < dk; ++e) s += squared(bq[t][e] - b_fp[h][t][e]);
        total += std::sqrt(s);
        ++count;
      }
      for (std::size_t t = 0; t < n; ++t)
        for (std::size_t s : sinks.indices) {
          if (s > t) break;
          const std::size_t idx = (h * n + t) * n + s;
          row.attention_score_delta = std::max(row.attention_score_delta, std::abs(a_q.values()[idx] - a_fp.values()[idx]));
        }
    }
    row.bias_l2_delta = count == 0 ? 0.0 : total / static_cast<double>(count);
    report.rows.push_back(row);
  }
  return report;
}

QkDiagnostics qk_sink_diagnostics(const DenseTensor& q, const DenseTensor& k, const DenseTensor* v,
                                  const SinkSet& sinks, std::size_t heads, std::size_t kv_heads) {
  require_matrix(q, "Q");
  require_matrix(k, "K");
  if (q.rows() != k.rows()) throw Error(ErrorCode::Shape, "Q and K token counts differ");
  require_heads(q.cols(), heads, kv_heads, k.cols());
  if (v != nullptr && v->dims() != k.dims()) throw Error(ErrorCode::Shape, "K and V shapes differ");
  const std::size_t n = q.rows();
  require_sinks(sinks, n);
  const std::size_t dk = q.cols() / heads, group = heads / kv_heads;
  const std::vector<bool> is_sink = sinks.mask(n);
  if (sinks.size() == n) throw Error(ErrorCode::BiasUndefined, "every token is a sink; no non-sink rows to compare");

  auto ratio = [&](const DenseTensor& x, std::size_t h) {
    double s = 0.0, ns = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
      const double norm = l2_norm(x.row(t).subspan(h * dk, dk));
      (is_sink[t] ? s : ns) += norm;
    }
    s /= static_cast<double>(sinks.size());
    ns /= static_cast<double>(n - sinks.size());
    if (ns == 0.0) throw Error(ErrorCode::Numeric, "non-sink rows have zero norm", {{"head", std::to_string(h)}});
    return s / ns;
  };

  QkDiagnostics out;
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t g = h / group;
    HeadDiagnostics d;
    d.head = h;
    double total = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
      if (is_sink[t]) continue;
      auto qt = q.row(t).subspan(h * dk, dk);
      for (std::size_t s : sinks.indices) {
        if (s > t) break;
        total += cosine_similarity(qt, k.row(s).subspan(g * dk, dk));
        ++d.pairs;
      }
    }
    d.mean_cosine = d.pairs == 0 ? 0.0 : total / static_cast<double>(d.pairs);
    d.q_norm_ratio = ratio(q, h);
    d.k_norm_ratio = ratio(k, g);
    if (v != nullptr) d.v_norm_ratio = ratio(*v, g);
    out.heads.push_back(d);
  }
  return out;
}

NormProfile norm_profile(const DenseTensor& q, const DenseTensor& k, const DenseTensor& v, std::size_t heads,
                         std::size_t kv_heads, std::size_t layer) {
  require_matrix(q, "Q");
  require_matrix(k, "K");
  require_matrix(v, "V");
  if (q.rows() != k.rows() || v.dims() != k.dims()) throw Error(ErrorCode::Shape, "Q, K, V shapes disagree");
  require_heads(q.cols(), heads, kv_heads, k.cols());
  const std::size_t n = q.rows(), dk = q.cols() / heads, group = heads / kv_heads;
  NormProfile p;
  p.layer = layer;
  for (std::size_t h = 0; h < heads; ++h) {
    HeadNorms hn;
    hn.head = h;
    const std::size_t g = h / group;
    for (std::size_t t = 0; t < n; ++t) {
      hn.q.push_back(l2_norm(q.row(t).subspan(h * dk, dk)));
      hn.k.push_back(l2_norm(k.row(t).subspan(g * dk, dk)));
      hn.v.push_back(l2_norm(v.row(t).subspan(g * dk, dk)));
    }
    p.heads.push_back(std::move(hn));
  }
  return p;
}

}  // namespace kvsink
