#include <cmath>
#include <random>

#include "doctest.h"
#include "kvsink/analysis.hpp"
#include "kvsink/error.hpp"
#include "oracle.hpp"

using namespace kvsink;

namespace {

QuantSpec spec(int bits, Axis axis, QuantMode mode, std::size_t g) {
  QuantSpec s;
  s.bits = bits;
  s.axis = axis;
  s.mode = mode;
  s.group_size = g;
  return s;
}

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::Usage;
}

// Random causal attention matrix with rows summing to 1.
DenseTensor causal_attention(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.01, 1.0);
  DenseTensor a({n, n});
  for (std::size_t t = 0; t < n; ++t) {
    double s = 0;
    for (std::size_t j = 0; j <= t; ++j) s += a.at(t, j) = u(rng);
    for (std::size_t j = 0; j <= t; ++j) a.at(t, j) /= s;
  }
  return a;
}

}  // namespace

TEST_CASE("error decomposition on representable input is zero") {
  DenseTensor x({4, 8});
  for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] = static_cast<double>(i % 4);
  const QuantSpec specs[] = {spec(2, Axis::PerToken, QuantMode::Dynamic, 8), spec(2, Axis::PerChannel, QuantMode::Dynamic, 4)};
  const ErrorReport r = error_decomposition(x, SinkSet::from_indices({1}), specs);
  for (const auto& row : r.rows) {
    CHECK(row.mse_overall == 0.0);
    CHECK(row.mse_without_sink_groups == 0.0);
    CHECK(*row.mse_with_sink_groups == 0.0);
  }
}

TEST_CASE("dynamic per-token: planted sink leaves other groups untouched") {
  DenseTensor x = oracle::random_matrix(32, 64, 1);
  const SinkSet sinks = SinkSet::from_indices({3});
  const QuantSpec specs[] = {spec(4, Axis::PerToken, QuantMode::Dynamic, 16)};
  const ErrorReport base = error_decomposition(x, sinks, specs);
  for (double& v : x.row(3)) v *= 1000;
  const ErrorReport planted = error_decomposition(x, sinks, specs);
  CHECK(planted.rows[0].mse_without_sink_groups == base.rows[0].mse_without_sink_groups);
  CHECK(*planted.rows[0].mse_with_sink_groups > 0.0);
}

TEST_CASE("overall MSE recombines the partitions") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    DenseTensor x = oracle::random_matrix(24, 40, rng());
    x.at(5, 7) = 300;
    const SinkSet sinks = SinkSet::from_indices({5, static_cast<std::size_t>(rng() % 24)});
    const QuantSpec specs[] = {spec(3, Axis::PerToken, QuantMode::Dynamic, 1 + rng() % 40),
                               spec(3, Axis::PerChannel, QuantMode::Dynamic, 1 + rng() % 24),
                               spec(2, Axis::PerTensor, QuantMode::Dynamic, 1)};
    for (const auto& row : error_decomposition(x, sinks, specs).rows) {
      const double recombined = (row.mse_without_sink_groups * row.elements_without_sink_groups +
                                 *row.mse_with_sink_groups * row.elements_with_sink_groups) /
                                static_cast<double>(24 * 40);
      CHECK(std::abs(recombined - row.mse_overall) <= 1e-12);
      CHECK(row.mse_overall >= 0.0);
      CHECK(row.elements_with_sink_groups + row.elements_without_sink_groups == 24 * 40);
    }
  }
}

TEST_CASE("static error drops when sinks leave calibration") {
  DenseTensor x = oracle::random_matrix(64, 32, 3);
  for (double& v : x.row(9)) v *= 1000;
  const SinkSet sinks = SinkSet::from_indices({9});
  const QuantSpec specs[] = {spec(4, Axis::PerToken, QuantMode::Static, 32)};
  CHECK(code_of([&] { error_decomposition(x, sinks, specs); }) == ErrorCode::Config);
  const CalibrationSet cal{{x}};
  const ErrorRow row = error_decomposition(x, sinks, specs, &cal).rows[0];
  CHECK(*row.mse_sinks_excluded < row.mse_overall);
  CHECK(*row.mse_sinks_excluded < *row.mse_non_sink_tokens);
  CHECK(!row.mse_with_sink_groups);
}

TEST_CASE("bias vectors match a brute-force double loop") {
  const std::size_t n = 12;
  const DenseTensor a = causal_attention(n, 4);
  const DenseTensor v = oracle::random_matrix(n, 5, 5);
  const SinkSet sinks = SinkSet::from_indices({2, 7});
  const auto b = bias_vectors(a, v, sinks);
  REQUIRE(b.size() == n - 2);
  for (std::size_t t = 2; t < n; ++t)
    for (std::size_t e = 0; e < 5; ++e) {
      double want = 0;
      for (std::size_t i = 0; i < n; ++i)
        if ((i == 2 || i == 7) && i <= t) want += a.at(t, i) * v.at(i, e);
      CHECK(std::abs(b[t - 2][e] - want) <= 1e-12);
    }
}

TEST_CASE("pairwise cosine matches brute force and bounds") {
  const std::size_t n = 15;
  const DenseTensor a = causal_attention(n, 6);
  const DenseTensor v = oracle::random_matrix(n, 4, 7);
  const SinkSet sinks = SinkSet::from_indices({0, 4});
  const HeadBias hb = attention_bias(a, v, sinks, {false, true});
  double total = 0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < hb.vectors.size(); ++i)
    for (std::size_t j = i + 1; j < hb.vectors.size(); ++j) {
      total += cosine_similarity(hb.vectors[i], hb.vectors[j]);
      ++pairs;
    }
  CHECK(hb.pairs == pairs);
  CHECK(std::abs(hb.average_cosine - total / pairs) <= 1e-12);
  CHECK(hb.average_cosine <= 1.0);
  CHECK(hb.average_cosine >= -1.0);
  CHECK(hb.first_token == 0);

  const HeadBias c = attention_bias(a, v, sinks, {true, false});
  CHECK(c.average_cosine <= 1.0);
  CHECK(c.vectors.empty());
}

TEST_CASE("constant bias scores exactly one") {
  const std::size_t n = 10;
  DenseTensor a({n, n});
  for (std::size_t t = 0; t < n; ++t) {
    if (t == 0) {
      a.at(0, 0) = 1.0;
      continue;
    }
    a.at(t, 0) = 0.6;
    for (std::size_t j = 1; j <= t; ++j) a.at(t, j) = 0.4 / static_cast<double>(t);
  }
  DenseTensor v = oracle::random_matrix(n, 6, 8);
  const HeadBias hb = attention_bias(a, v, SinkSet::from_indices({0}));
  CHECK(std::abs(hb.average_cosine - 1.0) <= 1e-12);
  CHECK(hb.tokens == n);
}

TEST_CASE("zero bias is degenerate; empty sinks undefined") {
  const std::size_t n = 6;
  DenseTensor a({n, n});
  for (std::size_t t = 0; t < n; ++t) a.at(t, t) = 1.0;
  a.at(0, 0) = 1.0;
  DenseTensor v = oracle::random_matrix(n, 3, 1);
  for (double& x : v.row(0)) x = 0.0;
  const HeadBias hb = attention_bias(a, v, SinkSet::from_indices({0}));
  CHECK(hb.degenerate_pairs == hb.pairs);
  CHECK(hb.average_cosine == 0.0);
  CHECK(code_of([&] { attention_bias(a, v, {}); }) == ErrorCode::BiasUndefined);
  DenseTensor not_causal = a;
  not_causal.at(1, 3) = 0.5;
  CHECK(code_of([&] { attention_bias(not_causal, v, SinkSet::from_indices({0})); }) == ErrorCode::Config);
}

TEST_CASE("bias is linear in V") {
  const DenseTensor a = causal_attention(9, 9);
  const DenseTensor v = oracle::random_matrix(9, 4, 10);
  DenseTensor v3 = v;
  for (double& x : v3.data()) x *= -2.5;
  const SinkSet s = SinkSet::from_indices({1, 3});
  const auto b = bias_vectors(a, v, s), b3 = bias_vectors(a, v3, s);
  for (std::size_t t = 0; t < b.size(); ++t)
    for (std::size_t e = 0; e < 4; ++e) CHECK(b3[t][e] == doctest::Approx(-2.5 * b[t][e]).epsilon(1e-12));
}

TEST_CASE("layer bias uses grouped value heads") {
  const std::size_t n = 8;
  const DenseTensor q = oracle::random_matrix(n, 16, 1), k = oracle::random_matrix(n, 8, 2), v = oracle::random_matrix(n, 8, 3);
  const DenseTensor a = attention_probabilities(q, k, 4, 2);
  CHECK(a.dims() == std::vector<std::size_t>{4, n, n});
  const BiasReport r = attention_bias_layer(a, v, SinkSet::from_indices({0}), 4, 2, 7);
  REQUIRE(r.heads.size() == 4);
  CHECK(r.heads[3].layer == 7);
  CHECK(code_of([&] { attention_probabilities(q, k, 3, 2); }) == ErrorCode::Shape);
}

TEST_CASE("disruption under lossless and preserved-sink settings") {
  const std::size_t n = 20;
  const DenseTensor q = oracle::random_matrix(n, 16, 11), k = oracle::random_matrix(n, 16, 12),
                    v = oracle::random_matrix(n, 16, 13);
  const SinkSet sinks = SinkSet::from_indices({0, 5});
  QuantSpec sparse_all = spec(2, Axis::PerToken, QuantMode::Dynamic, 4);
  sparse_all.sparse_fraction = 1.0;
  const QuantSpec lossless[] = {QuantSpec::lossless(), sparse_all};
  for (const auto& row : bias_disruption(q, k, v, sinks, 4, 4, lossless).rows) {
    CHECK(row.bias_l2_delta == 0.0);
    CHECK(row.attention_score_delta == 0.0);
  }

  std::vector<std::size_t> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = i;
  const QuantSpec two[] = {spec(2, Axis::PerToken, QuantMode::Dynamic, 4)};
  const DisruptionReport kept = bias_disruption(q, k, v, SinkSet::from_indices(all), 4, 4, two, true);
  CHECK(kept.rows[0].attention_score_delta == 0.0);
  CHECK(kept.rows[0].bias_l2_delta == 0.0);
  CHECK(bias_disruption(q, k, v, sinks, 4, 4, two).rows[0].bias_l2_delta > 0.0);
}

TEST_CASE("qk diagnostics") {
  const std::size_t n = 10, dk = 4;
  DenseTensor q({n, dk}), k({n, dk});
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t e = 0; e < dk; ++e) {
      q.at(t, e) = (t + 1.0) * (e + 1.0);
      k.at(t, e) = t == 0 ? 0.5 * (e + 1.0) : std::cos(static_cast<double>(t * e));
    }
  const SinkSet s = SinkSet::from_indices({0});
  const QkDiagnostics d = qk_sink_diagnostics(q, k, nullptr, s, 1, 1);
  CHECK(d.heads[0].mean_cosine == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(d.heads[0].pairs == n - 1);
  CHECK(!d.heads[0].v_norm_ratio);

  DenseTensor qs = oracle::random_matrix(n, 8, 1), ks = oracle::random_matrix(n, 8, 2), vs = oracle::random_matrix(n, 8, 3);
  for (auto* x : {&qs, &ks, &vs}) {
    for (std::size_t t = 1; t < n; ++t)
      for (std::size_t e = 0; e < 8; ++e) x->at(t, e) = x->at(0, e) * 100;
  }
  const QkDiagnostics r = qk_sink_diagnostics(qs, ks, &vs, s, 2, 2);
  for (const auto& h : r.heads) {
    CHECK(h.q_norm_ratio == doctest::Approx(0.01).epsilon(1e-12));
    CHECK(h.k_norm_ratio == doctest::Approx(0.01).epsilon(1e-12));
    CHECK(*h.v_norm_ratio == doctest::Approx(0.01).epsilon(1e-12));
  }
  CHECK(code_of([&] { qk_sink_diagnostics(q, k, nullptr, {}, 1, 1); }) == ErrorCode::BiasUndefined);
}

TEST_CASE("qk cosine matches brute force and ignores row scale") {
  const std::size_t n = 14;
  DenseTensor q = oracle::random_matrix(n, 12, 21), k = oracle::random_matrix(n, 6, 22);
  const SinkSet s = SinkSet::from_indices({1, 6});
  const QkDiagnostics d = qk_sink_diagnostics(q, k, nullptr, s, 4, 2);
  for (std::size_t h = 0; h < 4; ++h) {
    double total = 0;
    std::size_t pairs = 0;
    for (std::size_t t = 0; t < n; ++t) {
      if (t == 1 || t == 6) continue;
      for (std::size_t sk : {1u, 6u}) {
        if (sk > t) continue;
        total += cosine_similarity(q.row(t).subspan(h * 3, 3), k.row(sk).subspan((h / 2) * 3, 3));
        ++pairs;
      }
    }
    CHECK(std::abs(d.heads[h].mean_cosine - total / pairs) <= 1e-12);
  }
  for (double& x : q.row(9)) x *= 40;
  for (double& x : k.row(6)) x *= 0.2;
  const QkDiagnostics e = qk_sink_diagnostics(q, k, nullptr, s, 4, 2);
  for (std::size_t h = 0; h < 4; ++h) CHECK(std::abs(e.heads[h].mean_cosine - d.heads[h].mean_cosine) <= 1e-12);
}

TEST_CASE("norm profile") {
  const DenseTensor q({1, 4}, {3, 4, 0, 0}), k({1, 2}, {0, 1}), v({1, 2}, {1, 0});
  const NormProfile p = norm_profile(q, k, v, 2, 1);
  CHECK(p.heads[0].q == std::vector<double>{5.0});
  CHECK(p.heads[1].q == std::vector<double>{0.0});
  CHECK(p.heads[1].k == std::vector<double>{1.0});
}

TEST_CASE("fake quantization keeps rows verbatim") {
  const DenseTensor x = oracle::random_matrix(8, 8, 30);
  const DenseTensor y = fake_quantize(x, spec(2, Axis::PerToken, QuantMode::Dynamic, 8), SinkSet::from_indices({2}));
  for (std::size_t j = 0; j < 8; ++j) CHECK(y.at(2, j) == x.at(2, j));
  CHECK(y != x);
}
