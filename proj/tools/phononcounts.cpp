#include <cstdlib>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "phononcounts/errors.hpp"
#include "phononcounts/pipeline.hpp"

using namespace phononcounts;

int main(int argc, char** argv) {
  CLI::App app{"phononcounts: photon time-tag simulation and phonon coherence analysis"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir = ".";
  std::optional<unsigned> threads;
  std::string format = "csv";
  app.add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "override the simulation seed");
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--threads", threads, "worker cap (default: PHONONCOUNTS_THREADS or 1)")->check(CLI::PositiveNumber);
  app.add_option("--format", format, "table format")->check(CLI::IsMember({"csv", "json"}));

  std::string in;
  auto* sim = app.add_subcommand("simulate", "simulate a tag stream (one per power for a power sweep)");
  auto* cond = app.add_subcommand("condition", "afterpulse filter and burst rejection");
  cond->add_option("input", in, "tag file")->required();

  auto* corr = app.add_subcommand("correlate", "coincidence histograms and coherences");
  corr->add_option("input", in, "tag file")->required();
  std::vector<int> orders;
  std::optional<std::uint64_t> bin_ns, max_ns;
  std::optional<double> epsilon;
  corr->add_option("--order", orders, "orders 2..4 (repeatable)");
  corr->add_option("--bin-ns", bin_ns, "bin width in ns");
  corr->add_option("--max-delay-ns", max_ns, "delay range in ns");
  corr->add_option("--epsilon", epsilon, "background ratio, 0 for none");

  auto* fit = app.add_subcommand("fit", "fit coherence, spectrum, power or temperature data");
  std::string kind;
  fit->add_option("kind", kind, "coherence|spectrum|power|temperature")
      ->required()
      ->check(CLI::IsMember({"coherence", "spectrum", "power", "temperature"}));
  fit->add_option("input", in, "histogram (.pch), tag file or CSV")->required();

  auto* post = app.add_subcommand("postselect", "heralded occupancy and g2 curves");
  post->add_option("input", in, "tag file")->required();
  std::optional<int> k;
  std::optional<std::string> side;
  post->add_option("--k", k, "number of heralding clicks");
  post->add_option("--side", side, "anti-stokes or stokes");

  auto* modes = app.add_subcommand("modes", "GAWBS mode frequencies");
  std::optional<double> alpha;
  std::optional<int> m_max;
  modes->add_option("--alpha", alpha, "velocity ratio");
  modes->add_option("--m-max", m_max, "number of roots");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    json raw = json::object();
    if (!config_path.empty()) {
      std::ifstream f(config_path);
      try {
        raw = json::parse(f);
      } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
      }
    }
    // command-line overrides go through the same validation as the file
    if (!orders.empty()) raw["correlate"]["orders"] = orders;
    if (bin_ns) raw["correlate"]["bin_width_ns"] = *bin_ns;
    if (max_ns) raw["correlate"]["max_delay_ns"] = *max_ns;
    if (epsilon) raw["correlate"]["epsilon"] = *epsilon;
    if (k) raw["postselect"]["k"] = *k;
    if (side) raw["postselect"]["side"] = *side;
    if (alpha) raw["modes"]["alpha"] = *alpha;
    if (m_max) raw["modes"]["m_max"] = *m_max;
    const PipelineConfig cfg = parse_config(raw);

    RunContext ctx;
    ctx.out_dir = out_dir;
    ctx.format = format;
    ctx.seed = seed;
    ctx.threads = 1;
    if (threads) {
      ctx.threads = *threads;
    } else if (const char* env = std::getenv("PHONONCOUNTS_THREADS")) {
      const long v = std::strtol(env, nullptr, 10);
      if (v < 1) throw ConfigError("PHONONCOUNTS_THREADS must be a positive integer");
      ctx.threads = static_cast<unsigned>(v);
    }

    json summary;
    if (*sim) summary = cmd_simulate(cfg, ctx);
    else if (*cond) summary = cmd_condition(in, cfg, ctx);
    else if (*corr) summary = cmd_correlate(in, cfg, ctx);
    else if (*fit) summary = cmd_fit(kind, in, cfg, ctx);
    else if (*post) summary = cmd_postselect(in, cfg, ctx);
    else if (*modes) summary = cmd_modes(cfg, ctx);
    summary.erase("config");
    std::cout << summary.dump(2) << '\n';
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const ConvergenceError& e) {
    std::cerr << "not converged: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
}
