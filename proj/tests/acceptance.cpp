// Acceptance criteria 1-12. Each case prints one summary line.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <random>
#include <string>
#include <vector>

#include "doctest.h"
#include "phononcounts/conditioning.hpp"
#include "phononcounts/correlator.hpp"
#include "phononcounts/fitting.hpp"
#include "phononcounts/models.hpp"
#include "phononcounts/postselect.hpp"
#include "phononcounts/simulator.hpp"

using namespace phononcounts;
using namespace phononcounts::models;

namespace {

constexpr std::uint64_t kSec = 1'000'000'000ULL;

struct Verdict {
  int n;
  std::vector<std::string> lines;
  bool ok = true;

  void add(bool pass, const char* fmt, ...) __attribute__((format(printf, 3, 4))) {
    char buf[512];
    va_list ap;
    va_start(ap, fmt);
    std::vsnprintf(buf, sizeof buf, fmt, ap);
    va_end(ap);
    lines.push_back(std::string(pass ? "  ok   " : "  FAIL ") + buf);
    ok = ok && pass;
  }
  void finish() {
    std::printf("criterion %d: %s\n", n, ok ? "PASS" : "FAIL");
    for (const auto& l : lines) std::printf("%s\n", l.c_str());
    std::fflush(stdout);
    CHECK(ok);
  }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

TagStream thermal_run(DriveSide side, std::uint64_t seed, double gamma = kTwoPi * 3.5e3, double bkg = 0.0) {
  SimPlan p;
  p.side = side;
  p.osc.n_ac = 2.0;
  p.osc.gamma_ac_bar = gamma;
  p.detected_sideband_rate = 2000.0;
  p.background_rate = bkg;
  p.duration_ns = 600 * kSec;
  p.seed = seed;
  return simulate_stream(p);
}

const TagStream& anti_stokes_600s() {
  static const TagStream s = thermal_run(DriveSide::AntiStokes, 1001);
  return s;
}

CoincidenceHistogram hist(const TagStream& s, int order, std::uint64_t bin, std::uint64_t max,
                          unsigned threads = 1) {
  HistogramOptions o;
  o.order = order;
  o.bin_width_ns = bin;
  o.max_delay_ns = max;
  o.threads = threads;
  return coincidence_histogram(s, segment_records(s), o);
}

struct ZeroDelay {
  double value, sigma;
};

ZeroDelay zero_delay(const CoincidenceHistogram& h) {
  const auto f = fit_coherence(h);
  return {f.extras["zero_delay_coherence"].get<double>(), f.extras["zero_delay_sigma"].get<double>()};
}

std::vector<double> times_from(const std::vector<double>& d) {
  std::vector<double> t{0.0};
  for (double x : d) t.push_back(t.back() + x);
  return t;
}

// first bin of an order-n histogram against its box-averaged theory
struct FirstBin {
  double value, sigma, theory;
};

FirstBin first_bin(const CoincidenceHistogram& h, double gamma) {
  const auto g = plateau_normalize(h, h.poisson_plateau());
  const double w = static_cast<double>(h.bin_width_ns) * 1e-9;
  const std::vector<Interval> box(static_cast<std::size_t>(h.order - 1), Interval{0.0, w});
  return {g.values[0], g.sigmas[0], thermal_coherence_box(h.order, box, gamma)};
}

}  // namespace

TEST_CASE("criterion 1: zero-delay coherences of a thermal state") {
  Verdict v{1};
  const double G = kTwoPi * 3.5e3;

  auto t0 = std::chrono::steady_clock::now();
  const TagStream& as = anti_stokes_600s();
  const double t_sim = seconds_since(t0);
  const auto h2 = hist(as, 2, 2'000, 1'000'000);
  const auto h3 = hist(as, 3, 5'000, 300'000);
  const auto z2 = zero_delay(h2), z3 = zero_delay(h3);
  const double t23 = seconds_since(t0);

  t0 = std::chrono::steady_clock::now();
  const auto h4 = hist(as, 4, 10'000, 200'000);
  const auto b4 = first_bin(h4, G);
  const double t4 = t_sim + seconds_since(t0);

  v.add(std::abs(z2.value - 2.0) <= 0.05, "g2(0) = %.4f +- %.4f (target 2.00 +- 0.05)", z2.value, z2.sigma);
  v.add(std::abs(z3.value - 6.0) <= 0.3, "g3(0,0) = %.3f +- %.3f (target 6.0 +- 0.3)", z3.value, z3.sigma);
  v.add(std::abs(b4.value - b4.theory) <= 2 * b4.sigma, "g4 first bin = %.2f +- %.2f, binned theory %.3f (2 sigma)",
        b4.value, b4.sigma, b4.theory);

  const TagStream st = thermal_run(DriveSide::Stokes, 1002);
  const auto s2 = zero_delay(hist(st, 2, 2'000, 1'000'000));
  const auto s3 = zero_delay(hist(st, 3, 5'000, 300'000));
  const auto s4 = first_bin(hist(st, 4, 10'000, 200'000), G);
  auto same = [](double a, double sa, double b, double sb) { return std::abs(a - b) <= 3 * std::hypot(sa, sb); };
  v.add(same(s2.value, s2.sigma, z2.value, z2.sigma), "h2(0) = %.4f +- %.4f vs g2(0)", s2.value, s2.sigma);
  v.add(same(s3.value, s3.sigma, z3.value, z3.sigma), "h3(0,0) = %.3f +- %.3f vs g3(0,0)", s3.value, s3.sigma);
  v.add(same(s4.value, s4.sigma, b4.value, b4.sigma), "h4 first bin = %.2f +- %.2f vs g4", s4.value, s4.sigma);

  v.add(t23 <= 300, "orders 2-3 with simulation: %.1f s (limit 300 s)", t23);
  v.add(t4 <= 1200, "order 4 with simulation: %.1f s (limit 1200 s)", t4);
  v.finish();
}

TEST_CASE("criterion 2: decay-rate recovery") {
  Verdict v{2};
  std::uint64_t seed = 2001;
  for (double f : {1.0e3, 3.5e3, 10.0e3}) {
    const double G = kTwoPi * f;
    const TagStream s = thermal_run(DriveSide::AntiStokes, seed++, G);
    const auto bin = static_cast<std::uint64_t>(std::llround(0.045 / G * 1e9));
    const auto fit = fit_coherence(hist(s, 2, bin, 300 * bin));
    const double g = fit.value("gamma_bar");
    v.add(fit.converged && std::abs(g / G - 1.0) <= 0.05, "gamma/2pi = %.1f kHz: fitted %.3f +- %.3f kHz (%+.2f%%)",
          f / 1e3, g / kTwoPi / 1e3, fit.sigma("gamma_bar") / kTwoPi / 1e3, 100 * (g / G - 1.0));
  }
  v.finish();
}

TEST_CASE("criterion 3: oracle equivalence") {
  Verdict v{3};
  const auto t0 = std::chrono::steady_clock::now();
  const double G = kTwoPi * 3.5e3;
  std::mt19937_64 rng(3001);
  std::exponential_distribution<double> E(G);
  for (int n = 2; n <= 4; ++n) {
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<double> d(static_cast<std::size_t>(n - 1));
      for (auto& x : d) x = E(rng);
      worst = std::max(worst, std::abs(wick_oracle(times_from(d), 2.0, G) - thermal_coherence(n, d, G)));
    }
    v.add(worst < 1e-10, "order %d: max |wick - closed form| = %.2e over 100 tuples", n, worst);
  }
  std::uniform_real_distribution<double> U(0.0, 5.0 / G);
  for (int k = 1; k <= 3; ++k) {
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      const double tau = trial == 0 ? 0.0 : U(rng);
      worst = std::max(worst, std::abs(conditional_g2(k, tau, G) - conditional_g2_ratio(k, tau, G, true)));
    }
    v.add(worst < 1e-10, "conditional g2, k = %d: max |closed form - coherence ratio| = %.2e", k, worst);
  }
  const double t = seconds_since(t0);
  v.add(t < 10, "runtime %.2f s", t);
  v.finish();
}

TEST_CASE("criterion 4: background correction") {
  Verdict v{4};
  const double G = kTwoPi * 3.5e3;
  std::mt19937_64 rng(4001);
  std::uniform_real_distribution<double> U(0.0, 3.0 / G);
  auto g2 = [&](double t) { return thermal_coherence(2, {t}, G); };
  auto g3 = [&](double a, double b) { return thermal_coherence(3, {a, b}, G); };
  for (double eps : {0.05, 0.1, 0.2}) {
    double w2 = 0, w3 = 0, w4 = 0;
    for (int trial = 0; trial < 100; ++trial) {
      const double t1 = U(rng), t2 = U(rng), t3 = U(rng);
      const double a = g2(t1);
      w2 = std::max(w2, std::abs(correct_g2(mix_g2(a, eps), eps) - a));
      const std::array<double, 3> l2{g2(t1), g2(t2), g2(t1 + t2)};
      const double b = g3(t1, t2);
      w3 = std::max(w3, std::abs(correct_g3(mix_g3(b, l2, eps), l2, eps) - b));
      const std::array<double, 4> l3{g3(t1, t2), g3(t1 + t2, t3), g3(t1, t2 + t3), g3(t2, t3)};
      const std::array<double, 6> l2b{g2(t1), g2(t2), g2(t3), g2(t1 + t2), g2(t2 + t3), g2(t1 + t2 + t3)};
      const double c = thermal_coherence(4, {t1, t2, t3}, G);
      w4 = std::max(w4, std::abs(correct_g4(mix_g4(c, l3, l2b, eps), l3, l2b, eps) - c));
    }
    v.add(std::max({w2, w3, w4}) < 1e-12, "eps = %.2f: roundtrip errors %.1e / %.1e / %.1e (orders 2/3/4)", eps, w2,
          w3, w4);
  }

  const double eps = estimate_epsilon(200.0, 2000.0).epsilon;
  const TagStream s = thermal_run(DriveSide::AntiStokes, 4002, G, 200.0);
  const auto h = hist(s, 2, 2'000, 1'000'000);
  const auto raw = plateau_normalize(h, h.poisson_plateau());
  const auto cor = correct_background({raw}, eps)[0];
  const auto fr = fit_coherence(raw, h.max_delay_ns);
  const auto fc = fit_coherence(cor, h.max_delay_ns);
  const double g0 = fc.extras["zero_delay_coherence"].get<double>();
  v.add(std::abs(g0 - 2.0) <= 0.05, "mixed stream eps = %.2f: raw g2(0) = %.4f, corrected %.4f +- %.4f", eps,
        fr.extras["zero_delay_coherence"].get<double>(), g0, fc.extras["zero_delay_sigma"].get<double>());
  v.finish();
}

TEST_CASE("criterion 5: burst threshold") {
  Verdict v{5};
  const int k = burst_threshold(1.51e-3, 1.6e9, 0.1);
  v.add(k == 4, "k_thr(1.51e-3, 1.6e9, 0.1) = %d (expected 4)", k);

  // one window per run, so each run measures false rejections for one window
  const BurstPolicy def;
  std::uint64_t total = 0;
  std::size_t runs = 0;
  for (auto model : {BurstModel::Poisson, BurstModel::ThermalBoseEinstein}) {
    TagStream s = simulate_poisson(2000.0, 10 * kSec, 5001);
    if (model == BurstModel::ThermalBoseEinstein) {
      SimPlan p;
      p.duration_ns = 10 * kSec;
      p.seed = 5002;
      s = simulate_stream(p);
    }
    const auto recs = segment_records(s, 1'000'000);
    for (auto w : def.windows_ns) {
      BurstPolicy pol;
      pol.model = model;
      pol.windows_ns = {w};
      const auto [out, rep] = reject_bursts(s, recs, pol);
      total += rep.records_rejected;
      ++runs;
      v.add(rep.records_rejected <= 2, "%s stream, window %llu ns: k_thr %d, %llu of %zu records rejected",
            model == BurstModel::Poisson ? "Poisson" : "thermal", static_cast<unsigned long long>(w),
            rep.windows[0].k_thr, static_cast<unsigned long long>(rep.records_rejected), recs.size());
    }
  }
  const double mean = static_cast<double>(total) / static_cast<double>(runs);
  const double bound = def.epsilon + 3.0 * std::sqrt(def.epsilon / static_cast<double>(runs));
  v.add(mean <= bound, "false rejections per window %.2f (epsilon %.2f, MC bound %.2f)", mean, def.epsilon, bound);
  v.finish();
}

TEST_CASE("criterion 6: afterpulse filter") {
  Verdict v{6};
  const TagStream clean = simulate_poisson(2e4, 200 * kSec, 6001);
  DetectorModel det;
  det.dead_time_ns = 10;  // shorter than the afterpulse delay, or no afterpulse survives
  det.afterpulse_prob = 0.1;
  det.afterpulse_delay_ns = 24;
  ArtifactLog log;
  const TagStream dirty = apply_detector_artifacts(clean, det, 6002, &log);
  const auto filtered = filter_afterpulses(dirty);

  const auto t = filtered.stream.times();
  const auto c = filtered.stream.channels();
  auto kept = [&](const Tag& x) {
    for (auto it = std::lower_bound(t.begin(), t.end(), x.time_ns); it != t.end() && *it == x.time_ns; ++it)
      if (c[static_cast<std::size_t>(it - t.begin())] == x.channel) return true;
    return false;
  };
  std::size_t left = 0, orphan = 0;
  for (std::size_t i = 0; i < log.afterpulses.size(); ++i)
    if (kept(log.afterpulses[i])) {
      ++left;
      orphan += !kept(log.parents[i]);
    }
  v.add(!log.afterpulses.empty() && left == 0, "%zu afterpulses injected, %zu survive, %llu tags removed",
        log.afterpulses.size(), left, static_cast<unsigned long long>(filtered.removed));
  // an echo escapes when its parent was itself dropped 26-50 ns after a kept tag
  const double r_ch = 0.5 * clean.mean_rate();
  v.add(orphan == left, "survivors whose parent the filter removed: %zu of %zu (about %.0f expected from rate x 26 ns)",
        orphan, left, static_cast<double>(log.afterpulses.size()) * r_ch * 26e-9);

  const auto h = hist(filtered.stream, 2, 1'000, 100'000);
  const auto g = plateau_normalize(h, h.poisson_plateau());
  double worst = 0.0, sig = 0.0;
  for (std::size_t b = 1; b < g.values.size(); ++b) {
    worst = std::max(worst, std::abs(g.values[b] - 1.0));
    sig = std::max(sig, g.sigmas[b]);
  }
  v.add(worst <= 0.02, "post-filter g2 for tau >= 1 us: max |g2 - 1| = %.4f (bin sigma %.4f)", worst, sig);
  v.finish();
}

TEST_CASE("criterion 7: post-selection") {
  Verdict v{7};
  const TagStream& s = anti_stokes_600s();
  const auto recs = segment_records(s);
  for (int k = 1; k <= 3; ++k) {
    HeraldSpec spec;
    spec.k = k;
    spec.bin_width_ns = 20'000;
    const auto c = conditioned_rate_curve(s, recs, spec, DriveSide::AntiStokes);
    const double want = k + 1.0;
    v.add(std::abs(c.first_bin_corrected / want - 1.0) <= 0.10,
          "k = %d: first bin %.3f +- %.3f, bin-corrected %.3f (target %.0f +- 10%%), %llu heralds", k, c.first_bin,
          c.first_bin_sigma, c.first_bin_corrected, want, static_cast<unsigned long long>(c.herald_events));
    const double red = c.chi2 / static_cast<double>(c.dof);
    v.add(red < 2.0, "k = %d: chi2/dof against 1 + k exp(-gamma tau) = %.2f (%zu dof)", k, red, c.dof);
  }
  HeraldSpec spec;
  spec.bin_width_ns = 50'000;
  const auto g = conditioned_g2_curve(s, recs, spec, DriveSide::AntiStokes);
  v.add(std::abs(g.first_bin_corrected - 1.5) <= 0.05, "conditional g2 first bin %.3f +- %.3f, bin-corrected %.3f",
        g.first_bin, g.first_bin_sigma, g.first_bin_corrected);
  v.finish();
}

TEST_CASE("criterion 8: factorization slices") {
  Verdict v{8};
  const TagStream& s = anti_stokes_600s();
  const double G = kTwoPi * 3.5e3;
  const std::uint64_t bin = 10'000, max = 1'000'000;
  const auto h4 = hist(s, 4, bin, max);
  const auto h2 = hist(s, 2, bin, max);
  const auto g2 = plateau_normalize(h2, h2.poisson_plateau());
  const double A4 = h4.poisson_plateau();

  // slab over every tau2 bin beyond 10/gamma
  const auto first_far = static_cast<std::size_t>(std::ceil(10.0 / G * 1e9 / static_cast<double>(bin)));
  const std::size_t nk = h4.axis_len - first_far;
  const std::size_t side = 30;
  std::size_t out = 0;
  double worst = 0.0;
  for (std::size_t i = 0; i < side; ++i)
    for (std::size_t j = 0; j < side; ++j) {
      double n = 0.0;
      for (std::size_t k = first_far; k < h4.axis_len; ++k) n += static_cast<double>(h4.counts[h4.index(i, k, j)]);
      const double val = n / (A4 * static_cast<double>(nk));
      const double sv = std::sqrt(std::max(n, 1.0)) / (A4 * static_cast<double>(nk));
      const double prod = g2.values[i] * g2.values[j];
      const double sp = std::hypot(g2.sigmas[i] * g2.values[j], g2.sigmas[j] * g2.values[i]);
      const double z = std::abs(val - prod) / std::hypot(sv, sp);
      worst = std::max(worst, z);
      if (z > 3.0) ++out;
    }
  const double cells = static_cast<double>(side * side);
  const double expect = 0.0027 * cells;
  v.add(static_cast<double>(out) <= expect + 3 * std::sqrt(expect),
        "g4(tau1, tau2 > 10/gamma, tau3) vs g2 g2 over %zu cells: %zu beyond 3 sigma (%.1f expected), max %.2f sigma",
        side * side, out, expect, worst);
  v.finish();
}

TEST_CASE("criterion 9: spectrum fits") {
  Verdict v{9};
  const FilterChain f;
  const double wac = kTwoPi * 315.3e6;
  GawbsModel g;
  g.peaks.push_back({kTwoPi * 322.3e6, kTwoPi * 3.0e6, 40.0});
  std::vector<double> full_hz;
  for (double h = 300e6; h <= 340e6 + 1; h += 0.2e6) full_hz.push_back(h);
  auto synth = [&](const std::vector<double>& hz) {
    std::vector<SpectrumPoint> pts;
    for (double h : hz) pts.push_back({kTwoPi * h, spectrum_rate(kTwoPi * h, 5.0, 200.0, g, f, wac), 1.0});
    return pts;
  };
  auto rel = [](double a, double b) { return std::abs(a / b - 1.0); };

  const auto exact = fit_spectrum(synth(full_hz));
  const double e_full = std::max({rel(exact.value("Gamma_bkg"), 5.0), rel(exact.value("Gamma_res"), 200.0),
                                  rel(exact.value("omega_ac"), wac), rel(exact.value("Gamma_G1"), 40.0),
                                  rel(exact.value("omega_G1"), kTwoPi * 322.3e6),
                                  rel(exact.value("kappa_G1"), kTwoPi * 3.0e6)});
  v.add(e_full < 1e-6, "noiseless full spectrum: max relative error %.1e", e_full);
  SpectrumFitOptions five;
  five.mode = SpectrumMode::FivePoint;
  GawbsModel none;
  std::vector<SpectrumPoint> fp;
  for (double h : five_point_grid_hz()) fp.push_back({kTwoPi * h, spectrum_rate(kTwoPi * h, 5.0, 200.0, none, f, wac), 1.0});
  const auto exact5 = fit_spectrum(fp, five);
  const double e5 = std::max(rel(exact5.value("Gamma_bkg"), 5.0), rel(exact5.value("Gamma_res"), 200.0));
  v.add(e5 < 1e-6, "noiseless five-point: max relative error %.1e", e5);

  std::mt19937_64 rng(9001);
  const double dwell = 60.0;
  auto noisy = [&](std::vector<SpectrumPoint> pts) {
    for (auto& p : pts) {
      p.rate = static_cast<double>(std::poisson_distribution<long>(p.rate * dwell)(rng)) / dwell;
      p.weight = dwell / std::max(p.rate, 1.0 / dwell);
    }
    return pts;
  };
  const auto nf = fit_spectrum(noisy(synth(full_hz)));
  const auto n5 = fit_spectrum(noisy(synth(five_point_grid_hz())), five);
  const double a = nf.value("Gamma_res"), b = n5.value("Gamma_res");
  v.add(rel(b, a) <= 0.02, "Poisson noise, %.0f s per point: Gamma_res full %.2f +- %.2f, five-point %.2f +- %.2f (%.2f%%)",
        dwell, a, nf.sigma("Gamma_res"), b, n5.sigma("Gamma_res"), 100 * rel(b, a));
  v.finish();
}

TEST_CASE("criterion 10: GAWBS mode solver") {
  Verdict v{10};
  const GawbsModel def;
  const auto m = gawbs_mode_freqs(def, 30);
  double worst = 0.0, best_dist = 1e300;
  for (const auto& x : m) {
    worst = std::max(worst, std::abs(gawbs_mode_function(x.y, def.alpha)));
    best_dist = std::min(best_dist, std::abs(x.freq_hz - 322.3e6));
  }
  v.add(m.size() == 30 && worst < 1e-10, "%zu roots, max |residual| %.1e", m.size(), worst);

  // J0 zeros by scan and bisection
  std::vector<double> z;
  for (double x = 0.5; z.size() < 30; x += 0.05) {
    double lo = x, hi = x + 0.05;
    if (std::cyl_bessel_j(0.0, lo) * std::cyl_bessel_j(0.0, hi) > 0) continue;
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (lo + hi);
      (std::cyl_bessel_j(0.0, lo) * std::cyl_bessel_j(0.0, mid) <= 0 ? hi : lo) = mid;
    }
    z.push_back(0.5 * (lo + hi));
  }
  GawbsModel zero;
  zero.alpha = 0.0;
  const auto mz = gawbs_mode_freqs(zero, 30);
  double dz = 0.0;
  for (std::size_t i = 0; i < 30; ++i) dz = std::max(dz, std::abs(mz[i].y - z[i]));
  v.add(dz < 1e-8, "alpha = 0: max deviation from J0 zeros %.1e over 30 roots", dz);
  v.add(best_dist <= 2e6, "closest mode to 322.3 MHz is %.3f MHz away", best_dist / 1e6);
  v.finish();
}

TEST_CASE("criterion 11: power-sweep model roundtrip") {
  Verdict v{11};
  const CavityParams cav;
  const ThermalLink link;  // T_MC 24.4 mK, beta 0.54, k 1.09; g0/2pi = 4.58 kHz
  std::vector<double> P;
  for (double p = 0.5e-6; p <= 5.0e-6 + 1e-12; p += 0.5e-6) P.push_back(p);  // blue side unstable near 6 uW
  const std::vector<std::pair<const char*, double>> truth{
      {"T_MC", link.T_MC}, {"beta", link.beta_heat}, {"k", link.k_exp}, {"g0", cav.g0}};

  // a single draw has all four inside 2 sigma only ~80% of the time, so
  // the claim is checked as coverage over independent noise realizations
  const int reps = 40;
  std::vector<int> inside(truth.size(), 0);
  int converged = 0;
  FitResult first;
  for (int r = 0; r < reps; ++r) {
    std::mt19937_64 rng(11001 + static_cast<std::uint64_t>(r));
    std::normal_distribution<double> N(0.0, 1.0);
    std::vector<PowerSweep> sweeps;
    for (double eta : {0.08, 0.12}) {
      PowerSweep s;
      for (double p : P) {
        const double ras = eta * backaction_occupancy(p, cav, link, DriveSide::AntiStokes).rate_per_eta;
        const double rs = eta * backaction_occupancy(p, cav, link, DriveSide::Stokes).rate_per_eta;
        PowerPoint pt{p, ras, rs, 0.02 * ras, 0.02 * rs};
        pt.R_AS += pt.sigma_AS * N(rng);
        pt.R_S += pt.sigma_S * N(rng);
        s.points.push_back(pt);
      }
      sweeps.push_back(s);
    }
    PowerFitOptions o;
    o.link.T_MC = 0.03;
    o.link.beta_heat = 0.4;
    o.link.k_exp = 1.3;
    o.cavity.g0 = kTwoPi * 4.0e3;
    const auto fit = fit_power_sweep(sweeps, o);
    converged += fit.converged;
    for (std::size_t i = 0; i < truth.size(); ++i)
      inside[i] += std::abs(fit.value(truth[i].first) - truth[i].second) <= 2 * fit.sigma(truth[i].first);
    if (r == 0) first = fit;
  }
  v.add(converged == reps, "%d of %d fits converged", converged, reps);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto& [name, t] = truth[i];
    const double x = first.value(name), s = first.sigma(name);
    v.add(inside[i] >= 34, "%s: %d of %d within 2 sigma (need 34); first draw %.5g +- %.2g, truth %.5g, %.2f sigma",
          name, inside[i], reps, x, s, t, std::abs(x - t) / s);
  }
  const double nth = first.extras["n_th_zero_power"].get<double>();
  const double nth_s = first.extras["n_th_zero_power_sigma"].get<double>();
  v.add(std::abs(nth - 1.61) <= 0.03, "n_th(T_MC) = %.3f +- %.3f (Bose factor at 24.4 mK is %.3f; target 1.61 +- 0.03)",
        nth, nth_s, bose_occupancy(link.omega_ac, 0.0244));
  v.finish();
}

TEST_CASE("criterion 12: performance") {
  Verdict v{12};
  // 5.001e4 s at 2000/s gives 1.0e8 tags
  const TagStream s = simulate_poisson(2000.0, 50'010 * kSec, 12001);
  const auto recs = segment_records(s);
  HistogramOptions o;
  auto t0 = std::chrono::steady_clock::now();
  const auto one = coincidence_histogram(s, recs, o);
  const double t1 = seconds_since(t0);
  o.threads = 8;
  t0 = std::chrono::steady_clock::now();
  const auto eight = coincidence_histogram(s, recs, o);
  const double t8 = seconds_since(t0);
  v.add(s.size() >= 100'000'000 && t1 <= 60, "%zu tags, order 2 single-threaded: %.1f s (limit 60 s)", s.size(), t1);
  v.add(serialize_histogram(one) == serialize_histogram(eight), "8 workers (%.1f s): byte-identical histogram", t8);
  v.finish();
}
