// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits nonzero if any criterion fails.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "kvsink/analysis.hpp"
#include "kvsink/decoder.hpp"
#include "kvsink/dump_io.hpp"
#include "kvsink/error.hpp"
#include "kvsink/kv_cache.hpp"
#include "kvsink/serialization.hpp"
#include "kvsink/sink_detector.hpp"
#include "kvsink/workflows.hpp"

using namespace kvsink;
namespace fs = std::filesystem;

namespace {

// A criterion returns an empty string on success, otherwise the reason it failed.
// `note` collects a short summary printed on the PASS/FAIL line either way.
struct Criterion {
  const char* id;
  const char* title;
  std::function<std::string(std::string& note)> run;
};

std::string fmt(const char* f, double a = 0, double b = 0, double c = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

DenseTensor gaussian(std::size_t n, std::size_t d, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> g(0.0, sd);
  std::vector<double> v(n * d);
  for (double& x : v) x = g(rng);
  return DenseTensor({n, d}, std::move(v));
}

DenseTensor uniform(std::size_t n, std::size_t d, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(n * d);
  for (double& x : v) x = u(rng);
  return DenseTensor({n, d}, std::move(v));
}

QuantSpec make_spec(int bits, Axis axis, QuantMode mode, std::size_t g) {
  QuantSpec s;
  s.bits = bits;
  s.axis = axis;
  s.mode = mode;
  s.group_size = g;
  return s;
}

double distance(const DenseTensor& a, const DenseTensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a.values()[i] - b.values()[i]) * (a.values()[i] - b.values()[i]);
  return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// Reference decoder fixture: sinks planted at tokens 0 and 14 on two channels,
// emerging at layer 1 and cancelled at layer 3.

struct Reference {
  DecoderConfig cfg;
  SinkModelFixture model;
  SinkProfile profile;
};

Reference reference_fixture() {
  Reference r;
  r.cfg.layers = 4;
  r.cfg.hidden = 64;
  r.cfg.heads = 4;
  r.cfg.kv_heads = 4;
  r.cfg.ffn = 128;
  const PlantedOutlier plants[] = {{0, 10, 500.0}, {14, 10, 500.0}, {0, 33, 400.0}, {14, 33, 400.0}};
  SynthesisOptions opt;
  opt.sink_kv_scale = 4.0;
  opt.sink_attention = 4.0;
  r.model = synthesize_sink_model(r.cfg, plants, 1, 3, opt);
  r.profile = SinkProfile{"reference", 4, 1, 64, {10, 33}};
  return r;
}

// ---------------------------------------------------------------------------

std::string c1_roundtrip(std::string& note) {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(20240601);
  const int bits[] = {2, 3, 4, 8};
  const Axis axes[] = {Axis::PerToken, Axis::PerChannel, Axis::PerTensor};
  const QuantMode modes[] = {QuantMode::Dynamic, QuantMode::Static};
  const std::size_t groups[] = {16, 128};
  std::size_t elements = 0;
  double worst = -1.0;  // max of |x - x'| - scale/2
  for (int trial = 0; trial < 10000; ++trial) {
    const QuantSpec s = make_spec(bits[trial % 4], axes[(trial / 4) % 3], modes[(trial / 12) % 2], groups[(trial / 24) % 2]);
    const std::size_t n = 1 + rng() % 48, d = 1 + rng() % 160;
    const double sd = std::exp2(static_cast<double>(rng() % 12) - 4.0);
    const DenseTensor x = gaussian(n, d, rng, sd);
    const QuantizedTensor q = quantize(x, s);
    const DenseTensor y = dequantize(q);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < d; ++c) {
        const GroupParams& g = q.params.groups[q.params.layout.group_of(r, c)];
        const double slack = std::abs(x.at(r, c) - y.at(r, c)) - g.scale / 2.0;
        worst = std::max(worst, slack);
        if (slack > 1e-9) {
          return "element (" + std::to_string(r) + "," + std::to_string(c) + ") of trial " + std::to_string(trial) +
                 " exceeds scale/2 by " + fmt("%.3g", slack);
        }
        ++elements;
      }
  }
  const double secs = seconds_since(t0);
  note = std::to_string(elements) + " elements, max excess " + fmt("%.2e", worst) + ", " + fmt("%.2f s", secs);
  if (secs >= 30.0) return "runtime " + fmt("%.2f s", secs) + " not under 30 s";
  return "";
}

std::string c2_error_decomposition(std::string& note) {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(7);
  const DenseTensor base = gaussian(256, 4096, rng);
  const SinkSet sinks = SinkSet::from_indices({0, 14});
  DenseTensor planted = base;
  for (std::size_t t : sinks.indices)
    for (double& v : planted.row(t)) v *= 1000.0;

  // (a) dynamic per-token: groups without sinks are untouched by the plant.
  std::vector<QuantSpec> dyn;
  for (int b : {2, 3, 4, 8}) dyn.push_back(make_spec(b, Axis::PerToken, QuantMode::Dynamic, 128));
  const ErrorReport ra = error_decomposition(base, sinks, dyn);
  const ErrorReport rb = error_decomposition(planted, sinks, dyn);
  for (std::size_t i = 0; i < dyn.size(); ++i) {
    if (std::bit_cast<std::uint64_t>(ra.rows[i].mse_without_sink_groups) !=
        std::bit_cast<std::uint64_t>(rb.rows[i].mse_without_sink_groups)) {
      return "(a) non-sink group MSE changed at " + std::to_string(dyn[i].bits) + " bits";
    }
  }

  // (b) static per-token at 4 bits, calibrated on the tensor itself.
  const QuantSpec st[] = {make_spec(4, Axis::PerToken, QuantMode::Static, 128)};
  const CalibrationSet cal{{planted}};
  const SinkSet cal_sinks[] = {sinks};
  const ErrorRow sb = error_decomposition(planted, sinks, st, &cal, cal_sinks).rows[0];
  if (!sb.mse_non_sink_tokens || !sb.mse_sinks_excluded) return "(b) static row lacks the exclusion columns";
  const double drop = 1.0 - *sb.mse_sinks_excluded / *sb.mse_non_sink_tokens;
  if (!(*sb.mse_sinks_excluded < 0.5 * *sb.mse_non_sink_tokens)) return "(b) drop only " + fmt("%.1f%%", 100 * drop);

  // (c) dynamic per-channel: groups holding sinks carry larger error.
  const QuantSpec pc[] = {make_spec(2, Axis::PerChannel, QuantMode::Dynamic, 128),
                          make_spec(4, Axis::PerChannel, QuantMode::Dynamic, 128)};
  const ErrorReport rc = error_decomposition(planted, sinks, pc);
  double ratio = 0.0;
  for (const ErrorRow& row : rc.rows) {
    if (!row.mse_with_sink_groups || !(*row.mse_with_sink_groups > row.mse_without_sink_groups)) {
      return "(c) sink groups not worse at " + std::to_string(row.spec.bits) + " bits";
    }
    ratio = std::max(ratio, *row.mse_with_sink_groups / row.mse_without_sink_groups);
  }
  const double secs = seconds_since(t0);
  note = "(a) identical at 2/3/4/8 bits, (b) " + fmt("%.4g -> %.4g", *sb.mse_non_sink_tokens, *sb.mse_sinks_excluded) +
         fmt(" (%.1f%% drop), (c) with/without up to %.0fx, ", 100 * drop, ratio) + fmt("%.2f s", secs);
  if (secs >= 10.0) return "runtime " + fmt("%.2f s", secs) + " not under 10 s";
  return "";
}

std::string c3_detection(std::string& note) {
  std::mt19937_64 rng(3);
  std::size_t beyond_pfn = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 32 + rng() % 225, d = 64;
    DenseTensor h = uniform(n, d, rng);
    std::vector<std::size_t> channels;
    const std::size_t c_count = 1 + rng() % 4;
    while (channels.size() < c_count) {
      const std::size_t c = rng() % d;
      if (std::find(channels.begin(), channels.end(), c) == channels.end()) channels.push_back(c);
    }
    const std::size_t k = 1 + rng() % 5;
    std::vector<std::size_t> tokens{21 + rng() % (n - 21)};  // always one beyond every first-N window up to 20
    while (tokens.size() < k) {
      const std::size_t t = rng() % n;
      if (std::find(tokens.begin(), tokens.end(), t) == tokens.end()) tokens.push_back(t);
    }
    for (std::size_t t : tokens) {
      const double mag = 100.0 + static_cast<double>(rng() % 900);
      h.at(t, channels[rng() % channels.size()]) = (rng() % 2 ? mag : -mag);
    }
    std::sort(tokens.begin(), tokens.end());
    const SinkProfile p{"fixture", 8, 1, d, channels};
    const SinkSet got = detect_sinks(h, p, 5, 100.0);
    if (got.indices != tokens) return "trial " + std::to_string(trial) + " returned a different set";
    beyond_pfn += std::count_if(tokens.begin(), tokens.end(), [](std::size_t t) { return t >= 20; });
  }
  note = "200/200 exact, " + std::to_string(beyond_pfn) + " sinks beyond position 20";
  return "";
}

std::string c4_prefill(std::string& note) {
  const Reference r = reference_fixture();
  const SchemePreset scheme = make_scheme("pt_kv_static", 2, 128);
  PrefillOptions kv;
  kv.k = 5;
  PrefillOptions pfn;
  pfn.mode = Preservation::FirstN;
  pfn.k = 5;
  PrefillOptions zero;
  zero.k = 0;
  PrefillOptions none;
  none.mode = Preservation::None;

  int wins = 0;
  double worst = 0.0;
  const int seeds = 10;
  for (int seed = 0; seed < seeds; ++seed) {
    const DenseTensor h0 = random_input(64, r.cfg.hidden, 1000 + seed);
    const DenseTensor fp = decoder_forward(h0, r.model.weights, r.cfg, r.model.hooks).output;
    const PrefillResult a = prefill_with_kvsink(h0, r.model.weights, r.cfg, r.model.hooks, r.profile, scheme, kv);
    const PrefillResult b = prefill_with_kvsink(h0, r.model.weights, r.cfg, r.model.hooks, r.profile, scheme, pfn);
    if (!a.sinks.contains(0) || !a.sinks.contains(14)) return "kvsink missed a planted sink";
    const double ea = distance(a.output, fp), eb = distance(b.output, fp);
    if (ea < eb) ++wins;
    worst = std::max(worst, ea / eb);

    const PrefillResult z = prefill_with_kvsink(h0, r.model.weights, r.cfg, r.model.hooks, r.profile, scheme, zero);
    const PrefillResult n = prefill_with_kvsink(h0, r.model.weights, r.cfg, r.model.hooks, r.profile, scheme, none);
    if (!(z.output == n.output)) return "k=0 output differs from mode=none";
    for (std::size_t l = 0; l < r.cfg.layers; ++l)
      if (!(z.cache.reconstruct(l) == n.cache.reconstruct(l))) return "k=0 cache differs from mode=none";
  }
  note = std::to_string(wins) + "/" + std::to_string(seeds) + " inputs with kvsink error below first-5, worst ratio " +
         fmt("%.3f", worst) + "; k=0 bitwise equal to none";
  if (wins != seeds) return "kvsink did not beat first-5 on every input";
  return "";
}

std::string c5_stages(std::string& note) {
  std::mt19937_64 rng(5);
  std::size_t last_layer_variants = 0;
  for (int trial = 0; trial < 50; ++trial) {
    DecoderConfig c;
    c.layers = 8 + rng() % 33;
    c.hidden = 32;
    c.heads = 4;
    c.kv_heads = 2;
    c.ffn = 48;
    c.seed = rng();
    const std::size_t e = rng() % (c.layers - 2);
    std::size_t dis = e + 1 + rng() % (c.layers - e - 1);
    if (trial % 5 == 0) dis = c.layers - 1;  // no final stage
    if (dis == c.layers - 1) ++last_layer_variants;
    const std::size_t ch = rng() % 32, t1 = rng() % 24;
    std::size_t t2 = rng() % 24;
    if (t2 == t1) t2 = (t1 + 7) % 24;
    const PlantedOutlier plants[] = {{t1, ch, 1500.0 + rng() % 1000}, {t2, ch, -(1200.0 + rng() % 1000)}};
    const SinkModelFixture f = synthesize_sink_model(c, plants, e, dis);
    const ForwardResult fr = decoder_forward(random_input(24, 32, rng()), f.weights, c, f.hooks, CaptureSet::all());
    const SinkProfile p{"fixture", c.layers, e, 32, {ch}};
    const StageReport rep = classify_stages(fr.dumps.stage_inputs(), p);
    const auto fe = rep.first_layer(Stage::Emergence), fd = rep.first_layer(Stage::Dissipation);
    if (fe != e || fd != dis) {
      return "trial " + std::to_string(trial) + " (" + std::to_string(c.layers) + " layers) planted (" +
             std::to_string(e) + "," + std::to_string(dis) + ") got (" + (fe ? std::to_string(*fe) : "-") + "," +
             (fd ? std::to_string(*fd) : "-") + ")";
    }
    if (dis == c.layers - 1 && rep.first_layer(Stage::Final)) return "final stage reported after last-layer dissipation";
  }
  note = "50/50 decoder fixtures exact, " + std::to_string(last_layer_variants) + " without a final stage";
  return "";
}

std::string c6_profiles(std::string& note) {
  const std::vector<SinkProfile> table = {
      {"LLaMA2-7B", 32, 1, 4096, {2533, 1415}},
      {"LLaMA2-13B", 40, 3, 5120, {4743, 2100}},
      {"Mistral-7B", 32, 1, 4096, {2070, 3398}},
      {"LLaMA3-8B", 32, 1, 4096, {788, 1384, 4062}},
      {"LLaMA3.1-8B-instruct", 32, 1, 4096, {788, 1384, 4062}},
      {"LLaMA3.2-1B", 16, 1, 2048, {400, 698, 2029, 1159}},
      {"LLaMA3.2-3B", 28, 1, 3072, {588, 1016, 3046, 1731}},
  };
  const fs::path dir = KVSINK_PROFILE_SOURCE_DIR;
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".json") ++files;
  if (files != table.size()) return "expected 7 profile files, found " + std::to_string(files);
  for (const SinkProfile& want : table) {
    const fs::path file = dir / profile_file_name(want);
    if (!fs::exists(file)) return "missing " + file.string();
    const SinkProfile got = profile_from_json(read_json_file(file));
    if (!(got == want)) return "mismatch in " + file.filename().string();
    if (!(load_profile(want.model_name) == want)) return "lookup by name differs for " + want.model_name;
  }

  std::mt19937_64 rng(6);
  std::vector<DenseTensor> dumps;
  for (std::size_t l = 0; l < 8; ++l) {
    DenseTensor h = uniform(16, 4096, rng);
    if (l >= 1) {
      h.at(0, 2533) = 2000.0;
      h.at(0, 1415) = -1800.0;
      h.at(5, 2533) = 1500.0;
    }
    dumps.push_back(std::move(h));
  }
  const SinkProfile p = discover_profile(dumps, 100.0);
  if (p.outlier_channels != std::vector<std::size_t>{1415, 2533}) return "discovered channels differ";
  if (p.emergence_layer != 1) return "discovered emergence layer " + std::to_string(p.emergence_layer);
  note = "7/7 rows field-for-field; discovered {1415, 2533} with emergence layer 1";
  return "";
}

std::string c7_bias(std::string& note) {
  // Constructed constant bias: one sink at token 0 taking a fixed share of
  // attention, so every b_t is the same multiple of v_0.
  std::mt19937_64 rng(8);
  const std::size_t n = 48, dk = 16;
  DenseTensor a({n, n});
  a.at(0, 0) = 1.0;
  for (std::size_t t = 1; t < n; ++t) {
    a.at(t, 0) = 0.7;
    for (std::size_t j = 1; j <= t; ++j) a.at(t, j) = 0.3 / static_cast<double>(t);
  }
  const DenseTensor v = gaussian(n, dk, rng);
  double worst = 0.0;
  for (bool centroid : {false, true}) {
    BiasOptions o;
    o.centroid = centroid;
    const HeadBias hb = attention_bias(a, v, SinkSet::from_indices({0}), o);
    worst = std::max(worst, std::abs(hb.average_cosine - 1.0));
  }
  if (worst > 1e-9) return "constant-bias cosine off by " + fmt("%.3g", worst);

  // Disruption fixture set: the reference plants and sink attention without
  // the K/V amplification, every layer from emergence on, eight inputs.
  Reference r = reference_fixture();
  const PlantedOutlier plants[] = {{0, 10, 500.0}, {14, 10, 500.0}, {0, 33, 400.0}, {14, 33, 400.0}};
  SynthesisOptions opt;
  opt.sink_attention = 4.0;
  r.model = synthesize_sink_model(r.cfg, plants, 1, 3, opt);
  const SinkSet sinks = SinkSet::from_indices({0, 14});

  QuantSpec all_sparse = make_spec(2, Axis::PerToken, QuantMode::Dynamic, 16);
  all_sparse.sparse_fraction = 1.0;
  const QuantSpec lossless[] = {QuantSpec::lossless(), all_sparse};
  std::vector<QuantSpec> ladder;
  for (int b : {2, 3, 4, 8}) ladder.push_back(make_spec(b, Axis::PerToken, QuantMode::Dynamic, 16));

  std::vector<double> bias_mean(ladder.size()), score_mean(ladder.size());
  std::size_t instances = 0, score_steps_up = 0;
  for (int seed = 0; seed < 8; ++seed) {
    const ForwardResult fr =
        decoder_forward(random_input(64, r.cfg.hidden, 1000 + seed), r.model.weights, r.cfg, r.model.hooks,
                        CaptureSet{ActivationKind::Q, ActivationKind::K, ActivationKind::V});
    for (std::size_t layer = 1; layer < r.cfg.layers; ++layer) {
      const DenseTensor& q = fr.dumps.at(layer, ActivationKind::Q);
      const DenseTensor& k = fr.dumps.at(layer, ActivationKind::K);
      const DenseTensor& vv = fr.dumps.at(layer, ActivationKind::V);
      for (const DisruptionRow& row : bias_disruption(q, k, vv, sinks, 4, 4, lossless).rows)
        if (row.bias_l2_delta != 0.0 || row.attention_score_delta != 0.0) return "nonzero delta under a lossless spec";
      const DisruptionReport dr = bias_disruption(q, k, vv, sinks, 4, 4, ladder);
      ++instances;
      for (std::size_t i = 0; i < ladder.size(); ++i) {
        bias_mean[i] += dr.rows[i].bias_l2_delta;
        score_mean[i] += dr.rows[i].attention_score_delta;
        if (i == 0) continue;
        if (dr.rows[i].bias_l2_delta > dr.rows[i - 1].bias_l2_delta) {
          return "bias delta increased from " + std::to_string(ladder[i - 1].bits) + " to " +
                 std::to_string(ladder[i].bits) + " bits at layer " + std::to_string(layer);
        }
        if (dr.rows[i].attention_score_delta > dr.rows[i - 1].attention_score_delta) ++score_steps_up;
      }
    }
  }
  std::string deltas;
  for (std::size_t i = 0; i < ladder.size(); ++i) {
    bias_mean[i] /= static_cast<double>(instances);
    score_mean[i] /= static_cast<double>(instances);
    deltas += (i ? " " : "") + fmt("%.3g/%.3g", bias_mean[i], score_mean[i]);
    if (i > 0 && score_mean[i] > score_mean[i - 1]) return "mean score delta increased at " + std::to_string(ladder[i].bits) + " bits";
  }
  note = "cosine within " + fmt("%.1e", worst) + " of 1; lossless deltas 0; mean bias/score delta at 2/3/4/8 bits " +
         deltas + "; bias monotone in all " + std::to_string(instances) + " instances, single-instance score rises " +
         std::to_string(score_steps_up);
  return "";
}

std::string c8_footprint(std::string& note) {
  const Footprint base = estimate_footprint(32, 4096, 4096, 2, 0);
  const Footprint mixed = estimate_footprint(32, 4096, 4096, 2, 5);
  const Json report =
      Json::parse(run_workflow("footprint", {{"layers", 32}, {"hidden", 4096}, {"tokens", 4096}, {"bits", 2}, {"sinks", 5}}));
  if (base.quantized_bytes != 268435456ull) return "base is " + std::to_string(base.quantized_bytes) + " bytes";
  if (mixed.sink_bytes != 2621440ull) return "sink overhead is " + std::to_string(mixed.sink_bytes) + " bytes";
  if (report.at("base").at("quantized_mb") != 256.0 || report.at("sink_overhead_mb") != 2.5) {
    return "report shows different MB values";
  }
  note = "256 MB base (268435456 B), +2.5 MB for 5 sinks (2621440 B)";
  return "";
}

std::string c9_overhead(std::string& note) {
  const Reference r = reference_fixture();
  const SchemePreset scheme = make_scheme("pt_kv_static", 2, 128);
  const DenseTensor h0 = random_input(4096, r.cfg.hidden, 99);
  std::vector<double> prefill, detection;
  for (int i = 0; i < 11; ++i) {
    const PrefillResult res = prefill_with_kvsink(h0, r.model.weights, r.cfg, r.model.hooks, r.profile, scheme, {});
    prefill.push_back(res.prefill_ms);
    detection.push_back(res.detection_ms);
  }
  const double p = median(prefill), d = median(detection);
  note = "median detection " + fmt("%.4f ms", d) + " vs prefill " + fmt("%.1f ms", p) + fmt(" (%.5f%%)", 100 * d / p);
  if (!(d < 0.01 * p)) return "detection is not under 1% of prefill";
  return "";
}

std::string c10_dense_sparse(std::string& note) {
  std::mt19937_64 rng(10);
  std::student_t_distribution<double> heavy(2.0);
  double ratio_sum = 0.0;
  const int fixtures = 20;
  for (int i = 0; i < fixtures; ++i) {
    std::vector<double> kd(128 * 256), vd(128 * 256);
    for (double& x : kd) x = heavy(rng);
    for (double& x : vd) x = heavy(rng);
    const DenseTensor k({128, 256}, std::move(kd)), v({128, 256}, std::move(vd));
    auto mse = [&](double fs) {
      const QuantizedPair q = quantize_scheme(k, v, make_scheme("kvquant_like", 2, 128, fs), {});
      return mean_squared_error(dequantize(q.keys), k) + mean_squared_error(dequantize(q.values), v);
    };
    const double dense = mse(0.0), sparse = mse(0.01);
    if (!(sparse < dense)) return "fixture " + std::to_string(i) + ": f_s=0.01 not below f_s=0";
    ratio_sum += sparse / dense;

    const QuantizedPair exact = quantize_scheme(k, v, make_scheme("kvquant_like", 2, 128, 1.0), {});
    if (!(dequantize(exact.keys) == k) || !(dequantize(exact.values) == v)) return "f_s=1 not bit-exact";
  }
  note = std::to_string(fixtures) + " heavy-tailed fixtures, mean MSE ratio sparse/dense " +
         fmt("%.3f", ratio_sum / fixtures) + "; f_s=1 bit-exact";
  return "";
}

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  throw std::runtime_error("no error raised");
}

std::string c11_format(std::string& note) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<std::size_t> dims(1 + rng() % 4);
    for (auto& d : dims) d = 1 + rng() % 7;
    std::vector<double> data(element_count(dims));
    const bool f32 = trial % 4 == 3;
    for (double& x : data) {
      x = f32 ? static_cast<double>(std::bit_cast<float>(static_cast<std::uint32_t>(rng() & 0x7F7FFFFFu)))
              : std::bit_cast<double>(rng() & 0x7FEFFFFFFFFFFFFFull);
      if (rng() & 1) x = -x;
    }
    const DenseTensor t(dims, data);
    const DenseTensor back = decode_dump(encode_dump(t, f32 ? DType::F32 : DType::F64));
    if (back.dims() != t.dims()) return "dims changed in trial " + std::to_string(trial);
    for (std::size_t i = 0; i < data.size(); ++i)
      if (std::bit_cast<std::uint64_t>(back.values()[i]) != std::bit_cast<std::uint64_t>(data[i]))
        return "payload changed in trial " + std::to_string(trial);
  }

  struct Mutation {
    const char* name;
    std::function<void(std::vector<std::uint8_t>&)> apply;
    const char* offset;
  };
  const auto good = encode_dump(DenseTensor({3, 5}, std::vector<double>(15, 0.5)));
  const std::vector<Mutation> mutations = {
      {"bad magic", [](auto& b) { b[1] = 'X'; }, "0"},
      {"bad version", [](auto& b) { b[4] = 7; }, "4"},
      {"bad dtype", [](auto& b) { b[8] = 9; }, "8"},
      {"zero ndim", [](auto& b) { b[12] = 0; }, "12"},
      {"zero dim", [](auto& b) { std::fill(b.begin() + 24, b.begin() + 32, 0); }, "24"},
      {"truncated payload", [](auto& b) { b.resize(b.size() - 1); }, "32"},
      {"trailing bytes", [](auto& b) { b.push_back(0); }, "32"},
      {"truncated header", [](auto& b) { b.resize(10); }, nullptr},
  };
  for (const Mutation& m : mutations) {
    auto bytes = good;
    m.apply(bytes);
    try {
      decode_dump(bytes);
      return std::string(m.name) + " decoded without error";
    } catch (const Error& e) {
      if (e.code() != ErrorCode::Format) return std::string(m.name) + " raised " + std::string(error_code_name(e.code()));
      if (m.offset && e.context().count("offset") && e.context().at("offset") != m.offset)
        return std::string(m.name) + " reported offset " + e.context().at("offset");
    }
  }

  // Every documented error class from its triggering operation.
  const fs::path missing = fs::temp_directory_path() / "kvsink_acceptance_missing.kvsd";
  fs::remove(missing);
  const SinkProfile toy{"toy", 4, 1, 8, {2}};
  const QuantSpec static_spec = make_spec(4, Axis::PerToken, QuantMode::Static, 4);
  struct Trigger {
    const char* what;
    ErrorCode want;
    std::function<void()> fn;
  };
  const std::vector<Trigger> triggers = {
      {"detect on the wrong width", ErrorCode::Shape, [&] { detect_sinks(DenseTensor({4, 5}), toy, 2); }},
      {"empty calibration set", ErrorCode::Calibration, [&] { calibrate(CalibrationSet{}, static_spec); }},
      {"unknown scheme", ErrorCode::Config, [] { make_scheme("bogus", 2, 16); }},
      {"sink index beyond sequence", ErrorCode::Index,
       [] {
         KVCache c(1, 4, make_scheme("pt_kv_dynamic", 4, 4));
         c.bulk_load(0, DenseTensor({2, 4}), DenseTensor({2, 4}), SinkSet::from_indices({5}));
       }},
      {"bulk load into a filled layer", ErrorCode::State,
       [] {
         KVCache c(1, 4, make_scheme("pt_kv_dynamic", 4, 4));
         c.bulk_load(0, DenseTensor({2, 4}), DenseTensor({2, 4}), {});
         c.bulk_load(0, DenseTensor({2, 4}), DenseTensor({2, 4}), {});
       }},
      {"malformed dump", ErrorCode::Format, [] { decode_dump(std::vector<std::uint8_t>{'K', 'V', 'S', 'D'}); }},
      {"non-finite activations", ErrorCode::Numeric,
       [] {
         DecoderConfig c;
         c.layers = 1;
         c.hidden = 8;
         c.heads = 2;
         c.kv_heads = 2;
         c.ffn = 8;
         const InjectionHook h[] = {{0, HookMode::AddToFfnOutput, {{0, 0, 1e308}}},
                                    {0, HookMode::AddToFfnOutput, {{0, 0, 1e308}}}};
         decoder_forward(random_input(2, 8, 1), DecoderWeights::random(c), c, h);
       }},
      {"bias with no sinks", ErrorCode::BiasUndefined,
       [] {
         DenseTensor a({2, 2});
         a.at(0, 0) = a.at(1, 1) = 1.0;
         attention_bias(a, DenseTensor({2, 2}), {});
       }},
      {"discovery on noise", ErrorCode::DiscoveryFailure,
       [] {
         std::mt19937_64 g(1);
         discover_profile(std::vector<DenseTensor>{uniform(8, 16, g), uniform(8, 16, g)}, 100.0);
       }},
      {"fully masked softmax", ErrorCode::DegenerateRow,
       [] {
         const double row[] = {-INFINITY, -INFINITY};
         softmax_row(row);
       }},
      {"bench with zero repeats", ErrorCode::Usage, [] { run_workflow("bench", {{"repeat", 0}}); }},
      {"missing dump file", ErrorCode::Io, [&] { read_dump(missing); }},
  };
  for (const Trigger& t : triggers) {
    const ErrorCode got = code_of(t.fn);
    if (got != t.want) {
      return std::string(t.what) + " raised " + std::string(error_code_name(got)) + ", expected " +
             std::string(error_code_name(t.want));
    }
    const Json j = error_json(Error(got, t.what));
    if (!j.contains("code") || !j.contains("message") || !j.at("context").is_object()) return "error JSON schema";
  }
  note = "1000 round trips bit-exact; " + std::to_string(mutations.size()) + " corruptions -> format_error; " +
         std::to_string(triggers.size()) + " error classes raised as documented";
  return "";
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria = {
      {"1", "quantizer round-trip bound", c1_roundtrip},
      {"2", "error decomposition with planted sinks", c2_error_decomposition},
      {"3", "sink detection recall", c3_detection},
      {"4", "prefill with sink preservation", c4_prefill},
      {"5", "stage classification", c5_stages},
      {"6", "profile registry and discovery", c6_profiles},
      {"7", "attention bias consistency and disruption", c7_bias},
      {"8", "footprint accounting", c8_footprint},
      {"9", "detection overhead", c9_overhead},
      {"10", "dense-and-sparse isolation", c10_dense_sparse},
      {"11", "dump format and error classes", c11_format},
  };
  int failed = 0;
  for (const Criterion& c : criteria) {
    std::string note, why;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      why = c.run(note);
    } catch (const std::exception& e) {
      why = std::string("exception: ") + e.what();
    }
    const double secs = seconds_since(t0);
    const bool ok = why.empty();
    failed += ok ? 0 : 1;
    std::printf("%s criterion %-2s %-44s [%6.2f s] %s\n", ok ? "PASS" : "FAIL", c.id, c.title, secs,
                ok ? note.c_str() : why.c_str());
    std::fflush(stdout);
  }
  std::printf("%zu/%zu criteria passed\n", criteria.size() - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
