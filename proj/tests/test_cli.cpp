#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "doctest.h"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("phononcounts_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run(const std::string& args) {
  const std::string cmd = std::string(PHONONCOUNTS_CLI) + " " + args + " > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

fs::path write_config(const fs::path& dir, const json& j) {
  const fs::path p = dir / "config.json";
  std::ofstream(p) << j.dump(2);
  return p;
}

json short_sim() { return {{"simulate", {{"duration_ns", 2'000'000'000ULL}, {"detected_sideband_rate", 5000.0}}}}; }

}  // namespace

TEST_CASE("simulate is deterministic for a fixed seed") {
  const auto d = scratch("det");
  const auto cfg = write_config(d, short_sim());
  const std::string a = (d / "a").string(), b = (d / "b").string();
  REQUIRE(run("--config " + cfg.string() + " --seed 7 --out " + a + " simulate") == 0);
  REQUIRE(run("--config " + cfg.string() + " --seed 7 --out " + b + " simulate") == 0);
  REQUIRE(run("--config " + cfg.string() + " --seed 8 --out " + (d / "c").string() + " simulate") == 0);
  const auto ja = read_json(fs::path(a) / "simulate.json");
  const auto jb = read_json(fs::path(b) / "simulate.json");
  const auto jc = read_json(d / "c" / "simulate.json");
  CHECK(ja["outputs"][0]["checksum"] == jb["outputs"][0]["checksum"]);
  CHECK(ja["outputs"][0]["checksum"] != jc["outputs"][0]["checksum"]);
  CHECK(fs::exists(fs::path(a) / "tags.ptg.json"));
}

TEST_CASE("power sweep writes one stream per power") {
  const auto d = scratch("sweep");
  json j = short_sim();
  j["simulate"]["duration_ns"] = 500'000'000ULL;
  j["power_sweep"] = {{"powers_w", {1e-6, 2e-6, 3e-6}}};
  const auto cfg = write_config(d, j);
  REQUIRE(run("--config " + cfg.string() + " --out " + d.string() + " simulate") == 0);
  for (const char* f : {"tags_p00.ptg", "tags_p01.ptg", "tags_p02.ptg"}) CHECK(fs::exists(d / f));
  const auto s = read_json(d / "simulate.json");
  REQUIRE(s["outputs"].size() == 3);
  CHECK(s["outputs"][2]["P_in_w"].get<double>() == doctest::Approx(3e-6));
}

TEST_CASE("condition, correlate, fit and postselect chain") {
  const auto d = scratch("chain");
  json j = short_sim();
  j["simulate"]["duration_ns"] = 20'000'000'000ULL;
  j["correlate"] = {{"orders", {2, 3}}, {"epsilon", 0.0}};
  const auto cfg = write_config(d, j);
  const std::string base = "--config " + cfg.string() + " --out " + d.string() + " ";
  REQUIRE(run(base + "simulate") == 0);
  REQUIRE(run(base + "condition " + (d / "tags.ptg").string()) == 0);
  const auto cj = read_json(d / "conditioning.json");
  CHECK(cj["output"]["tags"].get<std::size_t>() > 0);

  REQUIRE(run(base + "correlate " + (d / "conditioned.ptg").string()) == 0);
  const auto corr = read_json(d / "correlate.json");
  REQUIRE(corr["orders"].size() == 2);
  for (const auto& o : corr["orders"])
    CHECK(o["first_bin_raw"].get<double>() == o["first_bin_corrected"].get<double>());
  CHECK(fs::exists(d / "hist_g2.pch"));
  CHECK(fs::exists(d / "coherence_g3.csv"));

  REQUIRE(run(base + "fit coherence " + (d / "hist_g2.pch").string()) == 0);
  const auto fit = read_json(d / "fit_coherence.json");
  CHECK(fit["fit"]["converged"].get<bool>());
  CHECK(fs::exists(d / "residuals_coherence.csv"));

  REQUIRE(run(base + "postselect " + (d / "conditioned.ptg").string()) == 0);
  CHECK(fs::exists(d / "postselect.json"));
  CHECK(fs::exists(d / "rate_k1.csv"));
  CHECK(run(base + "postselect " + (d / "conditioned.ptg").string() + " --k 0") == 2);
}

TEST_CASE("modes subcommand") {
  const auto d = scratch("modes");
  REQUIRE(run("--out " + d.string() + " modes") == 0);
  const auto m = read_json(d / "modes.json");
  CHECK(m["modes_150_450_MHz"].get<int>() >= 6);
  CHECK(m["max_residual"].get<double>() < 1e-10);
}

TEST_CASE("bad input exit codes") {
  const auto d = scratch("bad");
  const auto cfg = write_config(d, {{"simulate", {{"duraton_ns", 1}}}});
  CHECK(run("--config " + cfg.string() + " --out " + d.string() + " simulate") == 2);
  std::ofstream(d / "junk.ptg") << "not a tag file";
  CHECK(run("--out " + d.string() + " condition " + (d / "junk.ptg").string()) == 3);
}
