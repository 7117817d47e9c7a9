#include "phononcounts/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <string>

#include "phononcounts/errors.hpp"

namespace phononcounts {

namespace {

constexpr double kNsPerS = 1e9;

enum SubStream : std::uint64_t { kSignal = 1, kBackground = 2, kDark = 3, kArtifacts = 4 };

std::mt19937_64 make_engine(std::uint64_t seed, std::uint64_t stream) {
  return std::mt19937_64(splitmix64(seed ^ splitmix64(stream)));
}

std::uint8_t pick_channel(double split_ratio, std::uint8_t channel_count, std::mt19937_64& rng) {
  if (channel_count < 2) return 0;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  return u(rng) < split_ratio ? 0 : 1;
}

std::uint8_t even_channel(std::uint8_t channel_count, std::mt19937_64& rng) {
  if (channel_count < 2) return 0;
  std::uniform_int_distribution<int> pick(0, channel_count - 1);
  return static_cast<std::uint8_t>(pick(rng));
}

std::uint64_t to_ns(double t_s) { return static_cast<std::uint64_t>(std::floor(t_s * kNsPerS)); }

void poisson_tags(double rate, std::uint64_t duration_ns, std::mt19937_64& rng,
                  const std::function<std::uint8_t()>& channel, std::vector<Tag>& out) {
  if (rate <= 0.0) return;
  std::exponential_distribution<double> gap(rate);
  const double end = static_cast<double>(duration_ns) / kNsPerS;
  for (double t = gap(rng); t < end; t += gap(rng)) {
    const std::uint64_t ns = to_ns(t);
    if (ns >= duration_ns) break;
    out.push_back({ns, channel()});
  }
}

}  // namespace

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

void OscillatorParams::validate() const {
  if (!(n_ac >= 0.0) || !std::isfinite(n_ac)) throw ConfigError("n_ac must be finite and >= 0");
  if (!(gamma_ac_bar > 0.0) || !std::isfinite(gamma_ac_bar))
    throw ConfigError("gamma_ac_bar must be finite and > 0");
}

void DetectorModel::validate() const {
  if (!(afterpulse_prob >= 0.0 && afterpulse_prob <= 1.0))
    throw ConfigError("afterpulse_prob must lie in [0, 1]");
  if (!(split_ratio >= 0.0 && split_ratio <= 1.0))
    throw ConfigError("split_ratio must lie in [0, 1]");
  if (!(dark_and_stray_rate >= 0.0)) throw ConfigError("dark_and_stray_rate must be >= 0");
  if (burst) {
    if (!(burst->rate_per_s >= 0.0) || !(burst->intra_rate_per_s >= 0.0) ||
        !(burst->duration_ns >= 0.0))
      throw ConfigError("burst injection parameters must be >= 0");
  }
}

double SimPlan::n_eff() const {
  return side == DriveSide::AntiStokes ? osc.n_ac : osc.n_ac + 1.0;
}

double SimPlan::sideband_rate() const {
  return rate_per_quantum ? *rate_per_quantum * n_eff() : detected_sideband_rate;
}

double SimPlan::resolved_dt_ns() const {
  if (dt_ns) return *dt_ns;
  return std::min(0.01 / osc.gamma_ac_bar * kNsPerS, 1000.0);
}

void SimPlan::validate() const {
  osc.validate();
  detector.validate();
  if (!(detected_sideband_rate >= 0.0)) throw ConfigError("detected_sideband_rate must be >= 0");
  if (!(background_rate >= 0.0)) throw ConfigError("background_rate must be >= 0");
  if (rate_per_quantum && !(*rate_per_quantum >= 0.0))
    throw ConfigError("rate_per_quantum must be >= 0");
  if (channel_count == 0) throw ConfigError("channel_count must be >= 1");
  const double dt = resolved_dt_ns();
  if (!(dt > 0.0)) throw ConfigError("dt_ns must be > 0");
  if (dt * 1e-9 * osc.gamma_ac_bar > 0.1)
    throw ConfigError("dt_ns too coarse: dt * gamma_ac_bar = " +
                      std::to_string(dt * 1e-9 * osc.gamma_ac_bar) + " exceeds 0.1");
  if (side == DriveSide::AntiStokes && osc.n_ac == 0.0 && sideband_rate() > 0.0)
    throw ConfigError("anti-Stokes stream with n_ac = 0 cannot carry a nonzero sideband rate");
}

json to_json(const SimPlan& plan) {
  json det = {{"dead_time_ns", plan.detector.dead_time_ns},
              {"afterpulse_delay_ns", plan.detector.afterpulse_delay_ns},
              {"afterpulse_prob", plan.detector.afterpulse_prob},
              {"dark_and_stray_rate", plan.detector.dark_and_stray_rate},
              {"split_ratio", plan.detector.split_ratio}};
  if (plan.detector.burst)
    det["burst"] = {{"rate_per_s", plan.detector.burst->rate_per_s},
                    {"duration_ns", plan.detector.burst->duration_ns},
                    {"intra_rate_per_s", plan.detector.burst->intra_rate_per_s}};
  json j = {{"side", std::string(to_string(plan.side))},
            {"osc",
             {{"n_ac", plan.osc.n_ac},
              {"gamma_ac_bar", plan.osc.gamma_ac_bar},
              {"omega_ac", plan.osc.omega_ac}}},
            {"detected_sideband_rate", plan.detected_sideband_rate},
            {"background_rate", plan.background_rate},
            {"detector", det},
            {"duration_ns", plan.duration_ns},
            {"seed", plan.seed},
            {"dt_ns", plan.resolved_dt_ns()},
            {"sampling", plan.sampling == SamplingMode::Exact ? "exact" : "grid"},
            {"channel_count", plan.channel_count}};
  if (plan.rate_per_quantum) j["rate_per_quantum"] = *plan.rate_per_quantum;
  return j;
}

std::complex<double> stationary_draw(double n, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, std::sqrt(0.5));
  const double s = std::sqrt(n);
  const double re = normal(rng);
  const double im = normal(rng);
  return {s * re, s * im};
}

OscState ou_step(const OscState& state, double dt_s, const OscillatorParams& osc,
                 std::mt19937_64& rng) {
  if (dt_s <= 0.0) return state;
  const double x = osc.gamma_ac_bar * dt_s;
  const double decay = std::exp(-0.5 * x);
  const double var = osc.n_ac * -std::expm1(-x);
  OscState next;
  next.beta = state.beta * decay + stationary_draw(var, rng);
  next.t_ns = state.t_ns + dt_s * kNsPerS;
  return next;
}

namespace {

struct SignalResult {
  std::uint64_t bound_exceedances = 0;
  double final_bound = 0.0;
};

// Cox process by thinning; the OU state is sampled exactly at candidate times.
SignalResult signal_exact(const SimPlan& plan, std::mt19937_64& rng, std::vector<Tag>& out) {
  SignalResult res;
  const double rate = plan.sideband_rate();
  const double n = plan.n_eff();
  if (rate <= 0.0 || n <= 0.0) return res;
  const OscillatorParams osc{n, plan.osc.gamma_ac_bar, plan.osc.omega_ac};
  const double end = static_cast<double>(plan.duration_ns) / kNsPerS;
  double bound = std::log(std::max(end * osc.gamma_ac_bar, 1.0)) + 14.0;
  std::uniform_real_distribution<double> u(0.0, 1.0);

  OscState state{stationary_draw(n, rng), 0.0};
  double t = 0.0;
  for (;;) {
    std::exponential_distribution<double> gap(rate * bound);
    const double dt = gap(rng);
    if (t + dt >= end) break;
    const OscState cand = ou_step(state, dt, osc, rng);
    const double load = std::norm(cand.beta) / n;
    if (load > bound) {
      ++res.bound_exceedances;
      bound *= 2.0;
      continue;
    }
    t += dt;
    state = cand;
    if (u(rng) * bound < load) {
      const std::uint64_t ns = to_ns(t);
      if (ns >= plan.duration_ns) break;
      out.push_back({ns, pick_channel(plan.detector.split_ratio, plan.channel_count, rng)});
    }
  }
  res.final_bound = bound;
  return res;
}

// Piecewise-frozen intensity on a dt grid, events from integrated intensity.
SignalResult signal_grid(const SimPlan& plan, std::mt19937_64& rng, std::vector<Tag>& out) {
  SignalResult res;
  const double rate = plan.sideband_rate();
  const double n = plan.n_eff();
  if (rate <= 0.0 || n <= 0.0) return res;
  const OscillatorParams osc{n, plan.osc.gamma_ac_bar, plan.osc.omega_ac};
  const double end = static_cast<double>(plan.duration_ns) / kNsPerS;
  const double dt = plan.resolved_dt_ns() / kNsPerS;
  std::exponential_distribution<double> unit(1.0);

  OscState state{stationary_draw(n, rng), 0.0};
  double threshold = unit(rng);
  for (double t0 = 0.0; t0 < end; t0 += dt) {
    const double step = std::min(dt, end - t0);
    const double r = rate * std::norm(state.beta) / n;
    double used = 0.0;
    while (r > 0.0 && threshold <= r * (step - used)) {
      used += threshold / r;
      const std::uint64_t ns = to_ns(t0 + used);
      if (ns < plan.duration_ns)
        out.push_back({ns, pick_channel(plan.detector.split_ratio, plan.channel_count, rng)});
      threshold = unit(rng);
    }
    threshold -= r * (step - used);
    state = ou_step(state, step, osc, rng);
  }
  return res;
}

}  // namespace

TagStream simulate_stream(const SimPlan& plan) {
  plan.validate();
  std::vector<Tag> tags;
  tags.reserve(static_cast<std::size_t>(
      1.05 * (plan.sideband_rate() + plan.background_rate + plan.detector.dark_and_stray_rate) *
          static_cast<double>(plan.duration_ns) / kNsPerS +
      16));

  auto sig_rng = make_engine(plan.seed, kSignal);
  const SignalResult sig = plan.sampling == SamplingMode::Exact ? signal_exact(plan, sig_rng, tags)
                                                                : signal_grid(plan, sig_rng, tags);
  const std::size_t signal_count = tags.size();

  auto bkg_rng = make_engine(plan.seed, kBackground);
  poisson_tags(plan.background_rate, plan.duration_ns, bkg_rng,
               [&] { return pick_channel(plan.detector.split_ratio, plan.channel_count, bkg_rng); },
               tags);
  auto dark_rng = make_engine(plan.seed, kDark);
  poisson_tags(plan.detector.dark_and_stray_rate, plan.duration_ns, dark_rng,
               [&] { return even_channel(plan.channel_count, dark_rng); }, tags);

  json meta = {{"generator", "phononcounts-sim/1"},
               {"seed", plan.seed},
               {"drive_side", std::string(to_string(plan.side))},
               {"channel_semantics", "one optical signal split over detectors"},
               {"plan", to_json(plan)},
               {"signal_tags", signal_count},
               {"thinning_bound_exceedances", sig.bound_exceedances}};
  TagStream raw = TagStream::from_unsorted(std::move(tags), plan.duration_ns, plan.channel_count,
                                           std::move(meta));
  return apply_detector_artifacts(raw, plan.detector, splitmix64(plan.seed ^ kArtifacts));
}

TagStream apply_detector_artifacts(const TagStream& stream, const DetectorModel& det,
                                   std::uint64_t seed, ArtifactLog* log) {
  det.validate();
  require_sorted(stream.times(), stream.channels());
  auto rng = make_engine(seed, kArtifacts);
  const std::uint64_t duration = stream.duration_ns();
  const std::uint8_t nch = stream.channel_count();

  std::vector<std::vector<std::uint64_t>> per_channel(nch);
  for (std::size_t i = 0; i < stream.size(); ++i)
    per_channel[stream.channels()[i]].push_back(stream.times()[i]);

  std::uint64_t burst_clicks = 0;
  if (det.burst && det.burst->rate_per_s > 0.0 && det.burst->intra_rate_per_s > 0.0) {
    std::exponential_distribution<double> gap(det.burst->rate_per_s);
    const double period_ns = kNsPerS / det.burst->intra_rate_per_s;
    const double end_s = static_cast<double>(duration) / kNsPerS;
    for (double t = gap(rng); t < end_s; t += gap(rng)) {
      const std::uint8_t ch = even_channel(nch, rng);
      const double start_ns = t * kNsPerS;
      for (double s = 0.0; s < det.burst->duration_ns; s += period_ns) {
        const auto ns = static_cast<std::uint64_t>(start_ns + s);
        if (ns >= duration) break;
        per_channel[ch].push_back(ns);
        ++burst_clicks;
      }
    }
    for (auto& v : per_channel) std::sort(v.begin(), v.end());
  }

  std::bernoulli_distribution spawn(det.afterpulse_prob);
  std::vector<Tag> out;
  out.reserve(stream.size() + burst_clicks);
  std::uint64_t drops = 0;
  std::uint64_t afterpulses = 0;

  for (std::uint8_t ch = 0; ch < nch; ++ch) {
    const auto& orig = per_channel[ch];
    std::deque<std::pair<std::uint64_t, std::uint64_t>> pending;  // (time, parent)
    bool have_last = false;
    std::uint64_t last = 0;
    std::size_t i = 0;
    while (i < orig.size() || !pending.empty()) {
      const bool from_orig = i < orig.size() && (pending.empty() || orig[i] <= pending.front().first);
      const std::uint64_t t = from_orig ? orig[i] : pending.front().first;
      const bool accept = !have_last || t - last >= det.dead_time_ns;
      if (from_orig) {
        ++i;
        if (!accept) {
          ++drops;
          continue;
        }
        have_last = true;
        last = t;
        out.push_back({t, ch});
        if (det.afterpulse_prob > 0.0 && spawn(rng)) {
          const std::uint64_t ap = t + det.afterpulse_delay_ns;
          if (ap < duration) pending.emplace_back(ap, t);
        }
      } else {
        const std::uint64_t parent = pending.front().second;
        pending.pop_front();
        if (!accept) {
          ++drops;
          continue;
        }
        have_last = true;
        last = t;
        out.push_back({t, ch});
        ++afterpulses;
        if (log) {
          log->afterpulses.push_back({t, ch});
          log->parents.push_back({parent, ch});
        }
      }
    }
  }
  if (log) {
    log->dead_time_drops += drops;
    log->burst_clicks += burst_clicks;
  }

  json meta = stream.metadata();
  meta["artifacts"] = {{"dead_time_ns", det.dead_time_ns},
                       {"afterpulse_delay_ns", det.afterpulse_delay_ns},
                       {"afterpulse_prob", det.afterpulse_prob},
                       {"afterpulses", afterpulses},
                       {"dead_time_drops", drops},
                       {"burst_clicks", burst_clicks},
                       {"afterpulse_generations", 1}};
  return TagStream::from_unsorted(std::move(out), duration, nch, std::move(meta));
}

TagStream simulate_poisson(double rate_per_s, std::uint64_t duration_ns, std::uint64_t seed,
                           double split_ratio, std::uint8_t channel_count) {
  if (!(rate_per_s >= 0.0)) throw ConfigError("rate must be >= 0");
  auto rng = make_engine(seed, kBackground);
  std::vector<std::uint64_t> times;
  std::vector<std::uint8_t> channels;
  const double expected = rate_per_s * static_cast<double>(duration_ns) / kNsPerS;
  times.reserve(static_cast<std::size_t>(expected + 6.0 * std::sqrt(expected) + 16));
  channels.reserve(times.capacity());
  if (rate_per_s > 0.0) {
    std::exponential_distribution<double> gap(rate_per_s / kNsPerS);
    const auto end = static_cast<double>(duration_ns);
    for (double t = gap(rng); t < end; t += gap(rng)) {
      const auto ns = static_cast<std::uint64_t>(t);
      times.push_back(ns);
      channels.push_back(pick_channel(split_ratio, channel_count, rng));
      // keep (time, channel) ordering on ties
      for (std::size_t j = times.size() - 1; j > 0 && times[j - 1] == ns && channels[j - 1] > channels[j]; --j)
        std::swap(channels[j - 1], channels[j]);
    }
  }
  json meta = {{"generator", "phononcounts-poisson/1"},
               {"seed", seed},
               {"rate_per_s", rate_per_s},
               {"channel_semantics", "one optical signal split over detectors"}};
  return TagStream(std::move(times), std::move(channels), duration_ns, channel_count,
                   std::move(meta));
}

}  // namespace phononcounts
