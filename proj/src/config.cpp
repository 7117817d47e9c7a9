#include "phononcounts/config.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "phononcounts/errors.hpp"

namespace phononcounts {

namespace {

// Object reader that remembers which keys were consumed.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("'" + path_ + "' must be an object");
  }

  bool has(const char* key) const { return j_.contains(key); }

  void get(const char* key, double& out) {
    if (const json* v = take(key)) {
      if (!v->is_number()) fail(key, "a number");
      out = v->get<double>();
    }
  }
  void get(const char* key, std::optional<double>& out) {
    if (const json* v = take(key)) {
      if (v->is_null()) return out.reset();
      if (!v->is_number()) fail(key, "a number");
      out = v->get<double>();
    }
  }
  void get(const char* key, std::uint64_t& out) {
    if (const json* v = take(key)) out = as_u64(*v, key);
  }
  void get(const char* key, std::optional<std::uint64_t>& out) {
    if (const json* v = take(key)) {
      if (v->is_null()) return out.reset();
      out = as_u64(*v, key);
    }
  }
  void get(const char* key, int& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_integer()) fail(key, "an integer");
      out = v->get<int>();
    }
  }
  void get(const char* key, std::string& out) {
    if (const json* v = take(key)) {
      if (!v->is_string()) fail(key, "a string");
      out = v->get<std::string>();
    }
  }
  void get(const char* key, std::vector<double>& out) {
    if (const json* v = take(key)) {
      if (!v->is_array()) fail(key, "an array of numbers");
      out.clear();
      for (const auto& e : *v) {
        if (!e.is_number()) fail(key, "an array of numbers");
        out.push_back(e.get<double>());
      }
    }
  }
  void get(const char* key, std::vector<std::uint64_t>& out) {
    if (const json* v = take(key)) {
      if (!v->is_array()) fail(key, "an array of non-negative integers");
      out.clear();
      for (const auto& e : *v) out.push_back(as_u64(e, key));
    }
  }
  void get(const char* key, std::vector<int>& out) {
    if (const json* v = take(key)) {
      if (!v->is_array()) fail(key, "an array of integers");
      out.clear();
      for (const auto& e : *v) {
        if (!e.is_number_integer()) fail(key, "an array of integers");
        out.push_back(e.get<int>());
      }
    }
  }
  void get(const char* key, std::vector<std::string>& out) {
    if (const json* v = take(key)) {
      if (!v->is_array()) fail(key, "an array of strings");
      out.clear();
      for (const auto& e : *v) {
        if (!e.is_string()) fail(key, "an array of strings");
        out.push_back(e.get<std::string>());
      }
    }
  }

  template <class Fn>
  void sub(const char* key, Fn&& fn) {
    if (const json* v = take(key)) {
      Section s(*v, path_ + "." + key);
      fn(s);
      s.finish();
    }
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError("unknown config key '" + path_ + "." + k + "'");
  }

 private:
  const json* take(const char* key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  [[noreturn]] void fail(const char* key, const char* what) const {
    throw ConfigError("'" + path_ + "." + key + "' must be " + what);
  }
  std::uint64_t as_u64(const json& v, const char* key) const {
    if (v.is_number_unsigned()) return v.get<std::uint64_t>();
    if (v.is_number_float()) {
      const double d = v.get<double>();
      if (d >= 0.0 && d < 1.8e19 && std::floor(d) == d) return static_cast<std::uint64_t>(d);
    }
    fail(key, "a non-negative integer");
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_cavity(Section& s, models::CavityParams& c) {
  s.get("kappa_c", c.kappa_c);
  s.get("kappa_in", c.kappa_in);
  s.get("g0", c.g0);
  s.get("omega_c", c.omega_c);
}

void read_link(Section& s, models::ThermalLink& l) {
  s.get("T_MC", l.T_MC);
  s.get("beta", l.beta_heat);
  s.get("k", l.k_exp);
  s.get("gamma_ac0", l.gamma_ac0);
  s.get("gamma_ball_coeff", l.gamma_ball_coeff);
  s.get("omega_ac", l.omega_ac);
  s.get("heat_power_unit_w", l.heat_power_unit_w);
}

json cavity_json(const models::CavityParams& c) {
  return {{"kappa_c", c.kappa_c}, {"kappa_in", c.kappa_in}, {"g0", c.g0}, {"omega_c", c.omega_c}};
}

json link_json(const models::ThermalLink& l) {
  return {{"T_MC", l.T_MC},           {"beta", l.beta_heat},
          {"k", l.k_exp},             {"gamma_ac0", l.gamma_ac0},
          {"gamma_ball_coeff", l.gamma_ball_coeff}, {"omega_ac", l.omega_ac},
          {"heat_power_unit_w", l.heat_power_unit_w}};
}

void read_plan(Section& s, SimPlan& p) {
  std::string side(to_string(p.side));
  s.get("side", side);
  p.side = parse_drive_side(side);
  s.sub("osc", [&](Section& o) {
    o.get("n_ac", p.osc.n_ac);
    o.get("gamma_ac_bar", p.osc.gamma_ac_bar);
    o.get("omega_ac", p.osc.omega_ac);
  });
  s.get("detected_sideband_rate", p.detected_sideband_rate);
  s.get("background_rate", p.background_rate);
  s.sub("detector", [&](Section& d) {
    d.get("dead_time_ns", p.detector.dead_time_ns);
    d.get("afterpulse_delay_ns", p.detector.afterpulse_delay_ns);
    d.get("afterpulse_prob", p.detector.afterpulse_prob);
    d.get("dark_and_stray_rate", p.detector.dark_and_stray_rate);
    d.get("split_ratio", p.detector.split_ratio);
    if (d.has("burst") && !p.detector.burst) p.detector.burst = BurstInjection{};
    d.sub("burst", [&](Section& b) {
      b.get("rate_per_s", p.detector.burst->rate_per_s);
      b.get("duration_ns", p.detector.burst->duration_ns);
      b.get("intra_rate_per_s", p.detector.burst->intra_rate_per_s);
    });
  });
  s.get("duration_ns", p.duration_ns);
  s.get("seed", p.seed);
  s.get("dt_ns", p.dt_ns);
  s.get("rate_per_quantum", p.rate_per_quantum);
  std::string sampling = p.sampling == SamplingMode::Exact ? "exact" : "grid";
  s.get("sampling", sampling);
  if (sampling == "exact") p.sampling = SamplingMode::Exact;
  else if (sampling == "grid") p.sampling = SamplingMode::Grid;
  else throw ConfigError("sampling must be 'exact' or 'grid'");
  std::uint64_t nch = p.channel_count;
  s.get("channel_count", nch);
  if (nch < 1 || nch > 255) throw ConfigError("channel_count must lie in [1, 255]");
  p.channel_count = static_cast<std::uint8_t>(nch);
}

}  // namespace

SimPlan sim_plan_from_json(const json& j, SimPlan base) {
  Section s(j, "simulate");
  read_plan(s, base);
  s.finish();
  return base;
}

PipelineConfig parse_config(const json& j) {
  PipelineConfig cfg;
  Section root(j, "config");
  root.sub("simulate", [&](Section& s) {
    read_plan(s, cfg.simulate);
    s.get("record_ns", cfg.record_ns);
  });
  root.sub("power_sweep", [&](Section& s) {
    PowerSweepSim ps;
    s.get("powers_w", ps.powers_w);
    s.get("eta_det", ps.eta_det);
    s.sub("cavity", [&](Section& c) { read_cavity(c, ps.cavity); });
    s.sub("link", [&](Section& l) { read_link(l, ps.link); });
    cfg.power_sweep = ps;
  });
  root.sub("condition", [&](Section& s) {
    s.get("afterpulse_window_ns", cfg.condition.afterpulse_window_ns);
    s.get("windows_ns", cfg.condition.burst.windows_ns);
    s.get("epsilon", cfg.condition.burst.epsilon);
    std::string model(to_string(cfg.condition.burst.model));
    s.get("model", model);
    cfg.condition.burst.model = parse_burst_model(model);
  });
  root.sub("correlate", [&](Section& s) {
    auto& c = cfg.correlate;
    s.get("orders", c.orders);
    s.get("bin_width_ns", c.bin_width_ns);
    s.get("max_delay_ns", c.max_delay_ns);
    std::string mode(to_string(c.mode));
    s.get("mode", mode);
    c.mode = parse_channel_mode(mode);
    s.get("epsilon", c.epsilon);
    s.get("plateau", c.plateau);
    s.get("far_threshold_ns", c.far_threshold_ns);
    s.get("slice_bins", c.slice_bins);
  });
  root.sub("fit", [&](Section& s) {
    auto& f = cfg.fit;
    s.sub("coherence", [&](Section& c) {
      std::string w(to_string(f.coherence.weighting));
      c.get("weighting", w);
      f.coherence.weighting = parse_weighting(w);
      c.get("gamma_init", f.coherence.gamma_init);
      c.get("max_reweights", f.coherence.max_reweights);
    });
    s.sub("spectrum", [&](Section& c) {
      std::string mode = f.spectrum.mode == SpectrumMode::Full ? "full" : "five_point";
      c.get("mode", mode);
      if (mode == "full") f.spectrum.mode = SpectrumMode::Full;
      else if (mode == "five_point") f.spectrum.mode = SpectrumMode::FivePoint;
      else throw ConfigError("spectrum mode must be 'full' or 'five_point'");
      c.get("n_gawbs_peaks", f.spectrum.n_gawbs_peaks);
      c.get("kappa_fc1", f.spectrum.filters.kappa_fc1);
      c.get("kappa_fc2", f.spectrum.filters.kappa_fc2);
      c.get("omega_ac", f.spectrum.omega_ac);
    });
    s.sub("power", [&](Section& c) {
      c.sub("cavity", [&](Section& cc) { read_cavity(cc, f.power.cavity); });
      c.sub("link", [&](Section& l) { read_link(l, f.power.link); });
      c.get("eta_init", f.power.eta_init);
      c.get("fixed", f.power.fixed);
    });
    s.sub("temperature", [&](Section& c) {
      c.get("omega_ac", f.temperature_omega_ac);
      c.get("min_T_K", f.temperature_min_K);
    });
  });
  root.sub("postselect", [&](Section& s) {
    auto& h = cfg.postselect.herald;
    s.get("k", h.k);
    s.get("herald_window_ns", h.herald_window_ns);
    s.get("bin_width_ns", h.bin_width_ns);
    s.get("gamma_bar", h.gamma_bar);
    s.get("normalization_delay_ns", h.normalization_delay_ns);
    s.get("max_delay_ns", h.max_delay_ns);
    if (s.has("side")) {
      std::string side;
      s.get("side", side);
      cfg.postselect.side = parse_drive_side(side);
    }
    s.get("curves", cfg.postselect.curves);
  });
  root.sub("modes", [&](Section& s) {
    s.get("alpha", cfg.modes.gawbs.alpha);
    s.get("V_d", cfg.modes.gawbs.V_d);
    s.get("a", cfg.modes.gawbs.a);
    s.get("m_max", cfg.modes.m_max);
  });
  root.finish();
  cfg.validate();
  return cfg;
}

void PipelineConfig::validate() const {
  simulate.validate();
  if (record_ns == 0) throw ConfigError("record_ns must be > 0");
  if (power_sweep) {
    if (power_sweep->powers_w.empty()) throw ConfigError("power_sweep.powers_w is empty");
    for (double p : power_sweep->powers_w)
      if (!(p > 0.0) || !std::isfinite(p)) throw ConfigError("power_sweep powers must be > 0");
    if (!(power_sweep->eta_det > 0.0)) throw ConfigError("power_sweep.eta_det must be > 0");
    power_sweep->cavity.validate();
    power_sweep->link.validate();
  }
  condition.burst.validate();
  if (correlate.orders.empty()) throw ConfigError("correlate.orders is empty");
  for (int o : correlate.orders)
    if (o < 2 || o > 4) throw ConfigError("correlate orders must be 2, 3 or 4");
  if (correlate.bin_width_ns == 0 || correlate.max_delay_ns == 0) throw ConfigError("correlate bins must be > 0");
  if (!(correlate.epsilon >= 0.0)) throw ConfigError("correlate.epsilon must be >= 0");
  if (correlate.plateau != "poisson" && correlate.plateau != "far")
    throw ConfigError("correlate.plateau must be 'poisson' or 'far'");
  if (fit.coherence.gamma_init && !(*fit.coherence.gamma_init > 0.0))
    throw ConfigError("fit.coherence.gamma_init must be > 0");
  if (fit.spectrum.n_gawbs_peaks < 0) throw ConfigError("fit.spectrum.n_gawbs_peaks must be >= 0");
  fit.power.cavity.validate();
  fit.power.link.validate();
  postselect.herald.validate();
  for (const auto& c : postselect.curves)
    if (c != "rate" && c != "g2") throw ConfigError("postselect curves must be 'rate' or 'g2'");
  modes.gawbs.validate();
  if (modes.m_max < 1) throw ConfigError("modes.m_max must be >= 1");
}

PipelineConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return parse_config(j);
}

json to_json(const PipelineConfig& cfg) {
  json sim = to_json(cfg.simulate);
  sim["record_ns"] = cfg.record_ns;
  if (!cfg.simulate.dt_ns) sim.erase("dt_ns");
  json j;
  j["simulate"] = sim;
  if (cfg.power_sweep)
    j["power_sweep"] = {{"powers_w", cfg.power_sweep->powers_w},
                        {"eta_det", cfg.power_sweep->eta_det},
                        {"cavity", cavity_json(cfg.power_sweep->cavity)},
                        {"link", link_json(cfg.power_sweep->link)}};
  j["condition"] = {{"afterpulse_window_ns", cfg.condition.afterpulse_window_ns},
                    {"windows_ns", cfg.condition.burst.windows_ns},
                    {"epsilon", cfg.condition.burst.epsilon},
                    {"model", std::string(to_string(cfg.condition.burst.model))}};
  const auto& c = cfg.correlate;
  j["correlate"] = {{"orders", c.orders},
                    {"bin_width_ns", c.bin_width_ns},
                    {"max_delay_ns", c.max_delay_ns},
                    {"mode", std::string(to_string(c.mode))},
                    {"epsilon", c.epsilon},
                    {"plateau", c.plateau},
                    {"far_threshold_ns", c.far_threshold_ns ? json(*c.far_threshold_ns) : json(nullptr)},
                    {"slice_bins", c.slice_bins}};
  const auto& f = cfg.fit;
  j["fit"] = {
      {"coherence",
       {{"weighting", std::string(to_string(f.coherence.weighting))},
        {"gamma_init", f.coherence.gamma_init ? json(*f.coherence.gamma_init) : json(nullptr)},
        {"max_reweights", f.coherence.max_reweights}}},
      {"spectrum",
       {{"mode", f.spectrum.mode == SpectrumMode::Full ? "full" : "five_point"},
        {"n_gawbs_peaks", f.spectrum.n_gawbs_peaks},
        {"kappa_fc1", f.spectrum.filters.kappa_fc1},
        {"kappa_fc2", f.spectrum.filters.kappa_fc2},
        {"omega_ac", f.spectrum.omega_ac}}},
      {"power",
       {{"cavity", cavity_json(f.power.cavity)},
        {"link", link_json(f.power.link)},
        {"eta_init", f.power.eta_init},
        {"fixed", f.power.fixed}}},
      {"temperature", {{"omega_ac", f.temperature_omega_ac}, {"min_T_K", f.temperature_min_K}}}};
  const auto& h = cfg.postselect.herald;
  j["postselect"] = {{"k", h.k},
                     {"herald_window_ns", h.herald_window_ns},
                     {"bin_width_ns", h.bin_width_ns},
                     {"gamma_bar", h.gamma_bar},
                     {"normalization_delay_ns", h.norm_delay()},
                     {"max_delay_ns", h.max_delay()},
                     {"curves", cfg.postselect.curves}};
  if (cfg.postselect.side) j["postselect"]["side"] = std::string(to_string(*cfg.postselect.side));
  j["modes"] = {{"alpha", cfg.modes.gawbs.alpha},
                {"V_d", cfg.modes.gawbs.V_d},
                {"a", cfg.modes.gawbs.a},
                {"m_max", cfg.modes.m_max}};
  return j;
}

}  // namespace phononcounts
