#include "phononcounts/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "phononcounts/errors.hpp"

namespace phononcounts {

namespace fs = std::filesystem;

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string file_checksum(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return fnv1a_hex(ss.str());
}

namespace {

std::string out_path(const RunContext& ctx, const std::string& name) {
  fs::create_directories(ctx.out_dir);
  return (fs::path(ctx.out_dir) / name).string();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << text;
}

void write_json(const std::string& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

// Header line then numeric rows; every field is kept as a number when it parses.
json csv_to_json(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  json cols = json::array();
  json rows = json::array();
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string f;
    while (std::getline(ss, f, ',')) out.push_back(f);
    return out;
  };
  if (std::getline(in, line))
    for (auto& c : split(line)) cols.push_back(c);
  while (std::getline(in, line)) {
    json row = json::array();
    for (auto& f : split(line)) {
      char* end = nullptr;
      const double v = std::strtod(f.c_str(), &end);
      if (end && *end == '\0' && !f.empty()) row.push_back(std::isfinite(v) ? json(v) : json(nullptr));
      else row.push_back(f);
    }
    rows.push_back(row);
  }
  return {{"columns", cols}, {"rows", rows}};
}

// Writes a table as <stem>.csv or <stem>.json; returns the file name.
std::string emit_table(const RunContext& ctx, const std::string& stem, const std::string& csv) {
  if (ctx.format == "json") {
    write_json(out_path(ctx, stem + ".json"), csv_to_json(csv));
    return stem + ".json";
  }
  write_text(out_path(ctx, stem + ".csv"), csv);
  return stem + ".csv";
}

template <class Fn>
std::string table_text(Fn&& fn) {
  std::ostringstream ss;
  ss.precision(12);
  fn(ss);
  return ss.str();
}

json base_summary(const char* command, const PipelineConfig& cfg, const RunContext& ctx) {
  return {{"command", command}, {"config", to_json(cfg)}, {"threads", ctx.threads}, {"format", ctx.format}};
}

TagStream load_tags(const std::string& path) { return read_tags_file(path); }

DriveSide stream_side(const TagStream& s, DriveSide fallback) {
  const json& m = s.metadata();
  if (m.contains("plan") && m["plan"].contains("side") && m["plan"]["side"].is_string())
    return parse_drive_side(m["plan"]["side"].get<std::string>());
  return fallback;
}

std::uint64_t record_length(const TagStream& s) {
  const json& m = s.metadata();
  if (m.contains("records") && m["records"].contains("record_ns")) return m["records"]["record_ns"].get<std::uint64_t>();
  return kDefaultRecordNs;
}

}  // namespace

// ---------------------------------------------------------------------------

json cmd_simulate(const PipelineConfig& cfg, const RunContext& ctx) {
  SimPlan base = cfg.simulate;
  if (ctx.seed) base.seed = *ctx.seed;
  json summary = base_summary("simulate", cfg, ctx);
  summary["config"]["simulate"]["seed"] = base.seed;

  auto run = [&](const SimPlan& plan, const std::string& name, json extra) {
    plan.validate();
    const TagStream raw = simulate_stream(plan);
    json meta = raw.metadata();
    meta["records"] = records_to_json(segment_records(raw, cfg.record_ns), cfg.record_ns);
    const TagStream stream = raw.with_metadata(meta);
    const std::string path = out_path(ctx, name);
    write_tags_file(stream, path);
    json side{{"file", name},
              {"checksum", file_checksum(path)},
              {"tags", stream.size()},
              {"duration_ns", stream.duration_ns()},
              {"plan", to_json(plan)},
              {"record_ns", cfg.record_ns}};
    for (auto& [k, v] : extra.items()) side[k] = v;
    write_json(path + ".json", side);
    return side;
  };

  if (!cfg.power_sweep) {
    summary["outputs"] = json::array({run(base, "tags.ptg", json::object())});
  } else {
    const auto& ps = *cfg.power_sweep;
    json outs = json::array();
    for (std::size_t i = 0; i < ps.powers_w.size(); ++i) {
      const auto r = models::backaction_occupancy(ps.powers_w[i], ps.cavity, ps.link, base.side);
      if (!r.stable)
        throw DataError("backaction model unstable (gamma_bar <= 0) at P_in = " + std::to_string(ps.powers_w[i]) + " W");
      SimPlan plan = base;
      plan.osc.n_ac = r.n_ac;
      plan.osc.gamma_ac_bar = r.gamma_bar;
      plan.osc.omega_ac = ps.link.omega_ac;
      plan.rate_per_quantum.reset();
      plan.detected_sideband_rate = ps.eta_det * r.rate_per_eta;
      plan.seed = splitmix64(base.seed + i);
      char name[32];
      std::snprintf(name, sizeof name, "tags_p%02zu.ptg", i);
      outs.push_back(run(plan, name, {{"P_in_w", ps.powers_w[i]}, {"backaction", models::to_json(r)}}));
    }
    summary["outputs"] = outs;
  }
  write_json(out_path(ctx, "simulate.json"), summary);
  return summary;
}

json cmd_condition(const std::string& in, const PipelineConfig& cfg, const RunContext& ctx) {
  const TagStream stream = load_tags(in);
  json summary = base_summary("condition", cfg, ctx);
  summary["input"] = {{"file", in}, {"checksum", file_checksum(in)}};
  const auto records = records_from_metadata(stream);
  auto ap = filter_afterpulses(stream, cfg.condition.afterpulse_window_ns);
  auto [kept, report] = reject_bursts(ap.stream, records, cfg.condition.burst);
  report.afterpulses_removed = ap.removed;
  json meta = ap.stream.metadata();
  meta["records"] = records_to_json(kept, record_length(stream));
  const TagStream out = ap.stream.with_metadata(meta);
  const std::string path = out_path(ctx, "conditioned.ptg");
  write_tags_file(out, path);
  summary["report"] = report.to_json();
  summary["output"] = {{"file", "conditioned.ptg"}, {"checksum", file_checksum(path)}, {"tags", out.size()}};
  write_json(out_path(ctx, "conditioning.json"), summary);
  return summary;
}

json cmd_correlate(const std::string& in, const PipelineConfig& cfg, const RunContext& ctx) {
  const TagStream stream = load_tags(in);
  const auto records = records_from_metadata(stream);
  const auto& c = cfg.correlate;
  json summary = base_summary("correlate", cfg, ctx);
  summary["input"] = {{"file", in}, {"checksum", file_checksum(in)}};

  std::vector<int> orders = c.orders;
  std::sort(orders.begin(), orders.end());
  orders.erase(std::unique(orders.begin(), orders.end()), orders.end());
  const int top = orders.back();
  const bool correct = c.epsilon > 0.0;
  if (correct)
    for (int o = 2; o <= top; ++o)
      if (std::find(orders.begin(), orders.end(), o) == orders.end())
        throw ConfigError("background correction of order " + std::to_string(top) + " needs every order from 2");

  std::vector<CoherenceArray> raw;
  json per_order = json::array();
  for (int o : orders) {
    HistogramOptions ho;
    ho.order = o;
    ho.bin_width_ns = c.bin_width_ns;
    // lower orders on a longer axis so that delay sums stay on the grid
    ho.max_delay_ns = correct ? c.max_delay_ns * static_cast<std::uint64_t>(top - o + 1) : c.max_delay_ns;
    ho.mode = c.mode;
    ho.threads = ctx.threads;
    const CoincidenceHistogram h = coincidence_histogram(stream, records, ho);
    const std::string stem = "hist_g" + std::to_string(o);
    {
      std::ofstream bin(out_path(ctx, stem + ".pch"), std::ios::binary);
      write_histogram_binary(h, bin);
    }
    const std::string hfile = emit_table(ctx, stem, table_text([&](std::ostream& s) { write_histogram_csv(h, s); }));
    double A = 0.0;
    if (c.plateau == "poisson") A = h.poisson_plateau();
    else A = far_bin_plateau(h, c.far_threshold_ns.value_or(0.5 * static_cast<double>(h.max_delay_ns)));
    if (!(A > 0.0)) throw DataError("zero plateau for order " + std::to_string(o));
    CoherenceArray g = plateau_normalize(h, A);
    const std::string rfile = emit_table(ctx, "coherence_g" + std::to_string(o) + "_raw",
                                         table_text([&](std::ostream& s) { write_coherence_csv(g, s); }));
    raw.push_back(g);
    per_order.push_back({{"order", o},
                         {"anchors", h.anchors},
                         {"plateau", A},
                         {"histogram", hfile},
                         {"histogram_binary", stem + ".pch"},
                         {"histogram_checksum", fnv1a_hex(serialize_histogram(h))},
                         {"raw", rfile},
                         {"first_bin_raw", g.values.at(0)}});
  }

  std::vector<CoherenceArray> corrected = raw;
  if (correct) corrected = correct_background(raw, c.epsilon);
  for (std::size_t i = 0; i < corrected.size(); ++i) {
    const auto& g = corrected[i];
    const std::string name = emit_table(ctx, "coherence_g" + std::to_string(g.order),
                                        table_text([&](std::ostream& s) { write_coherence_csv(g, s); }));
    per_order[i]["corrected"] = name;
    per_order[i]["first_bin_corrected"] = g.values.at(0);
    if (g.order == 4) {
      json slices = json::array();
      for (std::size_t b : c.slice_bins) {
        if (b >= g.axis_len) throw ConfigError("slice bin " + std::to_string(b) + " beyond the order-4 axis");
        const CoherenceArray s = slice_order4(g, 0, b);
        slices.push_back(emit_table(ctx, "g4_slice_tau1_bin" + std::to_string(b),
                                    table_text([&](std::ostream& o) { write_coherence_csv(s, o); })));
      }
      per_order[i]["slices"] = slices;
    }
  }
  summary["epsilon"] = c.epsilon;
  summary["orders"] = per_order;
  write_json(out_path(ctx, "correlate.json"), summary);
  return summary;
}

namespace {

// Named numeric columns of a CSV file with a header line.
std::map<std::string, std::vector<double>> read_columns(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw DataError("'" + path + "' is empty");
  std::vector<std::string> names;
  {
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) names.push_back(f);
  }
  std::map<std::string, std::vector<double>> cols;
  for (auto& n : names) cols[n];
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string f;
    std::size_t i = 0;
    while (std::getline(ss, f, ',')) {
      if (i >= names.size()) throw DataError(path + ":" + std::to_string(lineno) + ": too many fields");
      char* end = nullptr;
      const double v = std::strtod(f.c_str(), &end);
      if (f.empty() || *end != '\0') throw DataError(path + ":" + std::to_string(lineno) + ": not a number");
      cols[names[i++]].push_back(v);
    }
    if (i != names.size()) throw DataError(path + ":" + std::to_string(lineno) + ": too few fields");
  }
  return cols;
}

const std::vector<double>& column(const std::map<std::string, std::vector<double>>& cols, const std::string& name,
                                  const std::string& path) {
  const auto it = cols.find(name);
  if (it == cols.end()) throw DataError("'" + path + "' lacks column '" + name + "'");
  return it->second;
}

bool is_tag_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  char magic[4] = {};
  in.read(magic, 4);
  return in.gcount() == 4 && std::string(magic, 4) == "PTG1";
}

}  // namespace

json cmd_fit(const std::string& kind, const std::string& in, const PipelineConfig& cfg, const RunContext& ctx) {
  json summary = base_summary("fit", cfg, ctx);
  summary["kind"] = kind;
  summary["input"] = {{"file", in}, {"checksum", file_checksum(in)}};
  FitResult fit;
  std::vector<double> obs;

  if (kind == "coherence") {
    CoincidenceHistogram h;
    if (is_tag_file(in)) {
      const TagStream s = load_tags(in);
      HistogramOptions ho;
      ho.order = cfg.correlate.orders.front();
      ho.bin_width_ns = cfg.correlate.bin_width_ns;
      ho.max_delay_ns = cfg.correlate.max_delay_ns;
      ho.mode = cfg.correlate.mode;
      ho.threads = ctx.threads;
      h = coincidence_histogram(s, records_from_metadata(s), ho);
    } else {
      std::ifstream bin(in, std::ios::binary);
      h = read_histogram_binary(bin);
    }
    fit = fit_coherence(h, cfg.fit.coherence);
    obs.assign(h.counts.begin(), h.counts.end());
  } else if (kind == "spectrum") {
    const auto cols = read_columns(in);
    const auto& d = column(cols, "detuning_hz", in);
    const auto& r = column(cols, "rate", in);
    const std::vector<double>* w = cols.count("weight") ? &cols.at("weight") : nullptr;
    std::vector<SpectrumPoint> pts;
    for (std::size_t i = 0; i < d.size(); ++i) pts.push_back({kTwoPi * d[i], r[i], w ? (*w)[i] : 1.0});
    fit = fit_spectrum(pts, cfg.fit.spectrum);
    obs = r;
  } else if (kind == "power") {
    const auto cols = read_columns(in);
    const auto& sw = column(cols, "sweep", in);
    const auto& P = column(cols, "P_in_w", in);
    const auto& ras = column(cols, "R_AS", in);
    const auto& rs = column(cols, "R_S", in);
    const bool sig = cols.count("sigma_AS") && cols.count("sigma_S");
    std::map<long, PowerSweep> by;
    for (std::size_t i = 0; i < P.size(); ++i) {
      PowerPoint p{P[i], ras[i], rs[i], sig ? cols.at("sigma_AS")[i] : 0.0, sig ? cols.at("sigma_S")[i] : 0.0};
      by[std::lround(sw[i])].points.push_back(p);
    }
    std::vector<PowerSweep> sweeps;
    for (auto& [k, v] : by) {
      sweeps.push_back(v);
      for (auto& p : v.points) {
        obs.push_back(p.R_AS);
        obs.push_back(p.R_S);
      }
    }
    fit = fit_power_sweep(sweeps, cfg.fit.power);
  } else if (kind == "temperature") {
    const auto cols = read_columns(in);
    const auto& T = column(cols, "T_MC_K", in);
    const auto& ras = column(cols, "r_AS", in);
    const auto& rs = column(cols, "r_S", in);
    const bool sig = cols.count("sigma_AS") && cols.count("sigma_S");
    std::vector<TemperaturePoint> pts;
    for (std::size_t i = 0; i < T.size(); ++i) {
      pts.push_back({T[i], ras[i], rs[i], sig ? cols.at("sigma_AS")[i] : 0.0, sig ? cols.at("sigma_S")[i] : 0.0});
      if (T[i] > cfg.fit.temperature_min_K) {
        obs.push_back(ras[i]);
        obs.push_back(rs[i]);
      }
    }
    fit = fit_temperature_sweep(pts, cfg.fit.temperature_omega_ac, cfg.fit.temperature_min_K);
  } else {
    throw ConfigError("unknown fit kind '" + kind + "' (coherence, spectrum, power, temperature)");
  }

  summary["fit"] = fit.to_json();
  summary["residuals"] = emit_table(ctx, "residuals_" + kind,
                                    table_text([&](std::ostream& s) { write_residuals_csv(fit, obs, s); }));
  write_json(out_path(ctx, "fit_" + kind + ".json"), summary);
  if (!fit.converged) throw ConvergenceError(kind + " fit did not converge");
  return summary;
}

json cmd_postselect(const std::string& in, const PipelineConfig& cfg, const RunContext& ctx) {
  const TagStream stream = load_tags(in);
  const auto records = records_from_metadata(stream);
  HeraldSpec spec = cfg.postselect.herald;
  spec.threads = ctx.threads;
  spec.validate();
  const DriveSide side = cfg.postselect.side.value_or(stream_side(stream, DriveSide::AntiStokes));
  json summary = base_summary("postselect", cfg, ctx);
  summary["input"] = {{"file", in}, {"checksum", file_checksum(in)}};
  summary["side"] = std::string(to_string(side));
  json curves = json::array();
  for (const auto& kind : cfg.postselect.curves) {
    const HeraldCurve c = kind == "rate" ? conditioned_rate_curve(stream, records, spec, side)
                                         : conditioned_g2_curve(stream, records, spec, side);
    json s = c.summary();
    s["file"] = emit_table(ctx, kind + "_k" + std::to_string(spec.k),
                           table_text([&](std::ostream& o) { write_curve_csv(c, o); }));
    curves.push_back(s);
  }
  summary["curves"] = curves;
  write_json(out_path(ctx, "postselect.json"), summary);
  return summary;
}

json cmd_modes(const PipelineConfig& cfg, const RunContext& ctx) {
  const auto modes = models::gawbs_mode_freqs(cfg.modes.gawbs, cfg.modes.m_max);
  json summary = base_summary("modes", cfg, ctx);
  std::size_t in_window = 0;
  double worst = 0.0;
  for (const auto& m : modes) {
    in_window += m.freq_hz >= 150e6 && m.freq_hz <= 450e6;
    worst = std::max(worst, std::abs(m.residual));
  }
  summary["modes"] = modes.size();
  summary["modes_150_450_MHz"] = in_window;
  summary["max_residual"] = worst;
  summary["file"] = emit_table(ctx, "modes", table_text([&](std::ostream& o) {
                                 o << "m,y,freq_hz,residual\n";
                                 o.precision(15);
                                 for (const auto& m : modes)
                                   o << m.m << ',' << m.y << ',' << m.freq_hz << ',' << m.residual << '\n';
                               }));
  write_json(out_path(ctx, "modes.json"), summary);
  return summary;
}

}  // namespace phononcounts
