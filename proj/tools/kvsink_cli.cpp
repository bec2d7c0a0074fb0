// kvsink command-line front end. Flags are collected into a JSON request
// and handed to kvsink_run(); stdout carries only the report, failures go to
// stderr as {code, message, context} with a nonzero exit status.

#include <cstdint>
#include <cstdio>
#include <functional>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "kvsink/kvsink.h"

namespace {

using nlohmann::ordered_json;

class Command {
 public:
  Command(CLI::App* app, std::string name) : app_(app), name_(std::move(name)) {}

  CLI::App* app() const { return app_; }
  const std::string& name() const { return name_; }

  Command& str(const std::string& flag, const std::string& key, const std::string& help) {
    auto v = std::make_shared<std::string>();
    CLI::Option* o = app_->add_option(flag, *v, help);
    emit_.push_back([=](ordered_json& j) {
      if (o->count() > 0) j[key] = *v;
    });
    return *this;
  }

  Command& count(const std::string& flag, const std::string& key, const std::string& help) {
    auto v = std::make_shared<std::uint64_t>();
    CLI::Option* o = app_->add_option(flag, *v, help);
    emit_.push_back([=](ordered_json& j) {
      if (o->count() > 0) j[key] = *v;
    });
    return *this;
  }

  Command& real(const std::string& flag, const std::string& key, const std::string& help) {
    auto v = std::make_shared<double>();
    CLI::Option* o = app_->add_option(flag, *v, help);
    emit_.push_back([=](ordered_json& j) {
      if (o->count() > 0) j[key] = *v;
    });
    return *this;
  }

  Command& ints(const std::string& flag, const std::string& key, const std::string& help) {
    auto v = std::make_shared<std::vector<int>>();
    CLI::Option* o = app_->add_option(flag, *v, help)->delimiter(',');
    emit_.push_back([=](ordered_json& j) {
      if (o->count() > 0) j[key] = *v;
    });
    return *this;
  }

  Command& flag(const std::string& flag, const std::string& key, const std::string& help) {
    CLI::Option* o = app_->add_flag(flag, help);
    emit_.push_back([=](ordered_json& j) {
      if (o->count() > 0) j[key] = true;
    });
    return *this;
  }

  // Fixed request value, e.g. the ×100 display factor behind a flag.
  Command& flag_value(const std::string& flag, const std::string& key, double value, const std::string& help) {
    CLI::Option* o = app_->add_flag(flag, help);
    emit_.push_back([=](ordered_json& j) {
      if (o->count() > 0) j[key] = value;
    });
    return *this;
  }

  Command& format() { return str("--format", "format", "json or csv"); }
  Command& seed() { return count("--seed", "seed", "RNG seed overriding the config"); }

  ordered_json request() const {
    ordered_json j = ordered_json::object();
    for (const auto& e : emit_) e(j);
    return j;
  }

 private:
  CLI::App* app_;
  std::string name_;
  std::vector<std::function<void(ordered_json&)>> emit_;
};

void print_error(const std::string& code, const std::string& message) {
  std::cerr << ordered_json{{"code", code}, {"message", message}, {"context", ordered_json::object()}}.dump()
            << std::endl;
}

void add_qkv(Command& c) {
  c.str("--q", "q", "Q dump [n, heads*d_k]")
      .str("--k", "k", "K dump [n, kv_heads*d_k]")
      .str("--v", "v", "V dump [n, kv_heads*d_k]")
      .str("--dumps", "dumps", "activation dump directory (manifest.json)")
      .count("--layer", "layer", "layer to read from --dumps")
      .count("--heads", "heads", "attention heads")
      .count("--kv-heads", "kv_heads", "key/value heads");
}

void add_quant(Command& c) {
  c.ints("--bits", "bits", "bit widths, comma separated")
      .str("--axis", "axis", "per_token, per_channel or per_tensor")
      .str("--mode", "mode", "dynamic, static or both")
      .count("--group", "group", "group size")
      .real("--sparse", "sparse", "dense-and-sparse fraction")
      .real("--clip", "clip", "tail mass clipped per side");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"KV-cache quantization with sink-token preservation"};
  app.require_subcommand(1);
  std::vector<std::unique_ptr<Command>> commands;
  auto make = [&](CLI::App* parent, const std::string& sub, const std::string& name, const std::string& help) -> Command& {
    commands.push_back(std::make_unique<Command>(parent->add_subcommand(sub, help), name));
    return *commands.back();
  };

  make(&app, "detect", "detect", "predict sink tokens from an emergence-layer dump")
      .str("--dump", "dump", "H dump of the emergence layer")
      .str("--profile", "profile", "profile JSON path or model name")
      .count("--k", "k", "sink budget")
      .real("--ratio", "ratio", "minimum magnitude over the channel median");

  make(&app, "quantize", "quantize", "quantize K/V dumps under a scheme")
      .str("--keys", "keys", "K dump [n, width]")
      .str("--values", "values", "V dump [n, width]")
      .str("--scheme", "scheme", "pt_kv_static, pt_kv_dynamic, pc_key_pt_value_static, kvquant_like, passthrough")
      .ints("--bits", "bits", "bit width")
      .count("--group", "group", "group size")
      .str("--sinks", "sinks", "sink JSON file or comma-separated indices")
      .count("--pfn", "pfn", "preserve the first N tokens instead")
      .real("--sparse", "sparse", "dense-and-sparse fraction")
      .str("--calib", "calib", "calibration dump directory")
      .str("--out", "out", "output path prefix");

  CLI::App* analyze = app.add_subcommand("analyze", "measurement reports");
  analyze->require_subcommand(1);
  {
    Command& c = make(analyze, "error", "analyze.error", "MSE decomposition by sink membership");
    c.str("--input", "input", "tensor dump [n, d]")
        .str("--sinks", "sinks", "sink JSON file or comma-separated indices")
        .count("--pfn", "pfn", "treat the first N tokens as sinks")
        .str("--calib", "calib", "calibration dump directory")
        .str("--calib-kind", "calib_kind", "activation kind used from --calib")
        .flag("--self-calib", "self_calib", "calibrate static specs on the input itself")
        .flag_value("--display-scale", "display_scale", 100.0, "scale reported MSEs by 100")
        .format();
    add_quant(c);
  }
  {
    Command& c = make(analyze, "bias", "analyze.bias", "sink attention bias consistency");
    c.str("--attn", "attn", "attention dump [heads, n, n]")
        .str("--sinks", "sinks", "sink JSON file or comma-separated indices")
        .flag("--centroid", "centroid", "score against the mean bias")
        .flag("--keep-vectors", "keep_vectors", "include bias vectors in the report")
        .format();
    add_qkv(c);
  }
  {
    Command& c = make(analyze, "disruption", "analyze.disruption", "bias and score drift under quantization");
    c.str("--sinks", "sinks", "sink JSON file or comma-separated indices")
        .flag("--preserve-sinks", "preserve_sinks", "keep sink rows at full precision")
        .format();
    add_qkv(c);
    add_quant(c);
  }
  {
    Command& c = make(analyze, "qk", "analyze.qk", "query/sink-key cosine and norm ratios");
    c.str("--sinks", "sinks", "sink JSON file or comma-separated indices").format();
    add_qkv(c);
  }
  {
    Command& c = make(analyze, "norms", "analyze.norms", "per-token Q/K/V norms");
    c.format();
    add_qkv(c);
  }
  make(analyze, "stages", "analyze.stages", "outlier stage classification")
      .str("--dumps", "dumps", "activation dump directory")
      .str("--profile", "profile", "profile JSON path or model name")
      .real("--ratio", "ratio", "outlier ratio over the layer median")
      .format();

  make(&app, "simulate", "simulate", "prefill through the quantized cache and compare with full precision")
      .str("--config", "config", "decoder config JSON")
      .str("--plant", "plant", "planted outlier JSON")
      .str("--weights", "weights", "weights directory")
      .str("--profile", "profile", "profile JSON path or model name")
      .str("--input", "input", "input dump [n, hidden]")
      .count("--tokens", "tokens", "random input length")
      .str("--mode", "mode", "kvsink, pfn or none")
      .str("--scheme", "scheme", "quantization scheme")
      .ints("--bits", "bits", "bit width")
      .count("--group", "group", "group size")
      .real("--sparse", "sparse", "dense-and-sparse fraction")
      .count("--k", "k", "sink budget or N")
      .real("--ratio", "ratio", "detection magnitude ratio")
      .str("--capture", "capture", "activation kinds to dump, or all")
      .str("--out", "out", "output directory")
      .seed();

  make(&app, "bench", "bench", "prefill and detection timing")
      .str("--config", "config", "decoder config JSON")
      .str("--plant", "plant", "planted outlier JSON")
      .str("--weights", "weights", "weights directory")
      .str("--profile", "profile", "profile JSON path or model name")
      .count("--tokens", "tokens", "sequence length")
      .count("--repeat", "repeat", "timed runs (median reported)")
      .str("--mode", "mode", "kvsink, pfn or none")
      .str("--scheme", "scheme", "quantization scheme")
      .ints("--bits", "bits", "bit width")
      .count("--group", "group", "group size")
      .count("--k", "k", "sink budget")
      .seed();

  make(&app, "footprint", "footprint", "closed-form cache memory")
      .str("--profile", "profile", "take layers and hidden size from a profile")
      .count("--layers", "layers", "decoder layers")
      .count("--hidden", "hidden", "K/V width")
      .count("--tokens", "tokens", "sequence length")
      .ints("--bits", "bits", "bit width")
      .count("--sinks", "sinks", "preserved sink tokens");

  make(&app, "synth", "synth", "run the toy decoder and dump weights and activations")
      .str("--config", "config", "decoder config JSON")
      .str("--plant", "plant", "planted outlier JSON")
      .str("--weights", "weights", "weights directory")
      .str("--input", "input", "input dump [n, hidden]")
      .count("--tokens", "tokens", "random input length")
      .str("--capture", "capture", "activation kinds, comma separated, or all")
      .str("--model", "model", "model name recorded in the manifest")
      .str("--out", "out", "output directory")
      .seed();

  make(&app, "discover", "discover", "derive a sink profile from layer dumps")
      .str("--dumps", "dumps", "activation dump directory with H per layer")
      .real("--ratio", "ratio", "outlier ratio over the layer median")
      .count("--max-channels", "max_channels", "channel limit")
      .str("--name", "name", "model name")
      .str("--out", "out", "write the profile JSON here");

  CLI::App* profiles = app.add_subcommand("profiles", "profile registry");
  profiles->require_subcommand(1);
  make(profiles, "list", "profiles.list", "list profiles").str("--dir", "dir", "profile directory");
  make(profiles, "export", "profiles.export", "write builtin profiles as JSON").str("--out", "out", "directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("usage_error", e.what());
    return 2;
  }

  for (const auto& c : commands) {
    if (!c->app()->parsed()) continue;
    char* report = nullptr;
    const kvsink_status st = kvsink_run(c->name().c_str(), c->request().dump().c_str(), &report);
    if (st != KVSINK_OK) {
      std::cerr << kvsink_last_error_json() << std::endl;
      return kvsink_exit_code(st);
    }
    std::fputs(report, stdout);
    kvsink_string_free(report);
    return 0;
  }
  print_error("usage_error", "no command given");
  return 2;
}
