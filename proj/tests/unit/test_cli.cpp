#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include "doctest.h"

namespace fs = std::filesystem;

namespace {

struct Outcome {
  int status = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

class Cli {
 public:
  Cli() : dir_(fs::temp_directory_path() / ("kvsink_cli_" + std::to_string(std::random_device{}()))) {
    fs::create_directories(dir_);
  }
  ~Cli() { fs::remove_all(dir_); }

  Outcome run(const std::string& args) const {
    const fs::path out = dir_ / "stdout", err = dir_ / "stderr";
    const std::string cmd = std::string("'") + KVSINK_CLI_PATH + "' " + args + " >'" + out.string() + "' 2>'" +
                            err.string() + "'";
    const int raw = std::system(cmd.c_str());
    Outcome o;
    o.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    o.out = slurp(out);
    o.err = slurp(err);
    return o;
  }

  std::string path(const std::string& rel) const { return (dir_ / rel).string(); }

  void write(const std::string& rel, const std::string& body) const { std::ofstream(dir_ / rel, std::ios::binary) << body; }

 private:
  fs::path dir_;
};

bool is_error_json(const std::string& s, const std::string& code) {
  return s.find("\"code\":\"" + code + "\"") != std::string::npos && s.find("\"message\"") != std::string::npos &&
         s.find("\"context\"") != std::string::npos;
}

}  // namespace

TEST_CASE("footprint prints the report on stdout only") {
  const Cli cli;
  const Outcome o = cli.run("footprint --layers 32 --hidden 4096 --tokens 4096 --bits 2 --sinks 5");
  CHECK(o.status == 0);
  CHECK(o.out.find("268435456") != std::string::npos);
  CHECK(o.out.find("\"sink_overhead_bytes\": 2621440") != std::string::npos);
  CHECK(o.err.empty());
}

TEST_CASE("usage errors exit 2") {
  const Cli cli;
  for (const char* args : {"", "bench --repeat 0 --config x.json", "footprint --no-such-flag", "frobnicate",
                           "footprint --layers abc --hidden 4", "analyze", "footprint --layers 4"}) {
    const Outcome o = cli.run(args);
    CAPTURE(args);
    CHECK(o.status == 2);
    CHECK(is_error_json(o.err, "usage_error"));
    CHECK(o.out.empty());
  }
  const Outcome cfg = cli.run("footprint --layers 4 --hidden 8 --bits 9");
  CHECK(cfg.status == 2);
  CHECK(is_error_json(cfg.err, "configuration_error"));
}

TEST_CASE("format and io errors exit 3") {
  const Cli cli;
  const Outcome missing = cli.run("detect --dump " + cli.path("nope.kvsd") + " --profile LLaMA2-7B");
  CHECK(missing.status == 3);
  CHECK(is_error_json(missing.err, "io_error"));
  CHECK(missing.out.empty());

  cli.write("bad.kvsd", "KVSD\x07");
  const Outcome bad = cli.run("detect --dump " + cli.path("bad.kvsd") + " --profile LLaMA2-7B");
  CHECK(bad.status == 3);
  CHECK(is_error_json(bad.err, "format_error"));
  CHECK(bad.err.find("\"offset\"") != std::string::npos);

  std::string header("KVSD", 4);
  header += std::string(4, '\0');
  header[4] = 1;
  header += std::string("\x02\0\0\0", 4);
  header += std::string("\x02\0\0\0", 4);
  header += std::string("\x02\0\0\0\0\0\0\0", 8);
  header += std::string("\x02\0\0\0\0\0\0\0", 8);
  header += std::string(16, '\0');  // half the payload
  cli.write("short.kvsd", header);
  const Outcome shortp = cli.run("detect --dump " + cli.path("short.kvsd") + " --profile LLaMA2-7B");
  CHECK(shortp.status == 3);
  CHECK(shortp.err.find("\"expected\":\"32\"") != std::string::npos);
  CHECK(shortp.err.find("\"actual\":\"16\"") != std::string::npos);
}

TEST_CASE("numeric errors exit 4") {
  const Cli cli;
  cli.write("config.json", R"({"layers": 2, "hidden": 16, "heads": 2, "kv_heads": 2, "ffn": 24})");
  cli.write("plant.json", R"({"emerge": 0, "dissipate": 1, "plants": [{"token": 0, "channel": 3, "magnitude": 1e308}, {"token": 0, "channel": 3, "magnitude": 1e308}]})");
  const Outcome o = cli.run("simulate --config " + cli.path("config.json") + " --plant " + cli.path("plant.json") +
                            " --tokens 4 --mode none");
  CHECK(o.status == 4);
  CHECK(is_error_json(o.err, "numeric_failure"));
}

TEST_CASE("end to end synth, detect and simulate") {
  const Cli cli;
  cli.write("config.json", R"({"layers": 4, "hidden": 32, "heads": 4, "kv_heads": 2, "ffn": 48})");
  cli.write("plant.json", R"({"emerge": 1, "dissipate": 3, "plants": [{"token": 0, "channel": 5, "magnitude": 500},
                                                                      {"token": 14, "channel": 5, "magnitude": 450}]})");
  cli.write("toy.json", R"({"model": "toy", "total_layers": 4, "emergence_layer": 1, "hidden_size": 32, "outlier_channels": [5]})");
  const Outcome s = cli.run("synth --config " + cli.path("config.json") + " --plant " + cli.path("plant.json") +
                            " --tokens 32 --out " + cli.path("s"));
  REQUIRE(s.status == 0);
  const Outcome d = cli.run("detect --dump " + cli.path("s/dumps/L1_H.kvsd") + " --profile " + cli.path("toy.json") +
                            " --ratio 100");
  CHECK(d.status == 0);
  CHECK(d.out.find("\"sinks\": [\n    0,\n    14\n  ]") != std::string::npos);

  const Outcome csv = cli.run("analyze stages --dumps " + cli.path("s/dumps") + " --profile " + cli.path("toy.json") +
                              " --format csv");
  CHECK(csv.status == 0);
  CHECK(csv.out.rfind("layer,", 0) == 0);

  const Outcome sim = cli.run("simulate --config " + cli.path("config.json") + " --plant " + cli.path("plant.json") +
                              " --tokens 32 --bits 2 --group 16 --ratio 100");
  CHECK(sim.status == 0);
  CHECK(sim.out.find("\"l2_error\"") != std::string::npos);
  CHECK(sim.err.empty());

  const Outcome list = cli.run("profiles list");
  CHECK(list.status == 0);
  CHECK(list.out.find("LLaMA2-7B") != std::string::npos);
}
