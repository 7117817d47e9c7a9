#include "phononcounts/models.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <stdexcept>

#include "phononcounts/errors.hpp"

namespace phononcounts::models {

namespace {

constexpr std::array<CoherenceTerm, 1> kF2{{{1.0, {1, 0, 0}}}};
constexpr std::array<CoherenceTerm, 3> kF3{{{1.0, {1, 0, 0}}, {1.0, {0, 1, 0}}, {3.0, {1, 1, 0}}}};
constexpr std::array<CoherenceTerm, 8> kF4{{{1.0, {1, 0, 0}},
                                            {1.0, {0, 1, 0}},
                                            {1.0, {0, 0, 1}},
                                            {3.0, {1, 1, 0}},
                                            {3.0, {0, 1, 1}},
                                            {1.0, {1, 0, 1}},
                                            {9.0, {1, 1, 1}},
                                            {4.0, {1, 2, 1}}}};

double exp_factor(int mult, double gamma, double tau) {
  if (mult == 0) return 1.0;
  if (std::isinf(tau)) return 0.0;
  return std::exp(-gamma * mult * tau);
}

void check_order(int order) {
  if (order < 2 || order > 4) throw ConfigError("thermal coherence order must be 2, 3 or 4");
}

}  // namespace

double bose_occupancy(double omega, double temperature) {
  if (!(temperature > 0.0)) return 0.0;
  return 1.0 / std::expm1(kHbar * omega / (kBoltzmann * temperature));
}

std::span<const CoherenceTerm> coherence_terms(int order) {
  check_order(order);
  if (order == 2) return kF2;
  if (order == 3) return kF3;
  return kF4;
}

double thermal_coherence(int order, std::span<const double> delays_s, double gamma_bar) {
  check_order(order);
  if (delays_s.size() != static_cast<std::size_t>(order - 1))
    throw ConfigError("order-" + std::to_string(order) + " coherence needs " +
                      std::to_string(order - 1) + " delays");
  for (double t : delays_s)
    if (!(t >= 0.0)) throw ConfigError("delays must be >= 0");
  double g = 1.0;
  for (const auto& term : coherence_terms(order)) {
    double v = term.coef;
    for (int k = 0; k < order - 1; ++k) v *= exp_factor(term.mult[k], gamma_bar, delays_s[k]);
    g += v;
  }
  return g;
}

double thermal_coherence(int order, std::initializer_list<double> delays_s, double gamma_bar) {
  return thermal_coherence(order, std::span<const double>(delays_s.begin(), delays_s.size()),
                           gamma_bar);
}

double mean_exp(double u, double a, double b) {
  if (u == 0.0) return 1.0;
  if (std::isinf(a)) return 0.0;
  const double ea = std::exp(-u * a);
  if (std::isinf(b)) return 0.0;
  const double h = b - a;
  const double x = u * h;
  if (std::abs(x) < 1e-4) return ea * (1.0 - x / 2.0 + x * x / 6.0 - x * x * x / 24.0);
  return ea * -std::expm1(-x) / x;
}

double mean_exp_du(double u, double a, double b) {
  if (std::isinf(a) || std::isinf(b)) return 0.0;
  const double h = b - a;
  const double x = u * h;
  const double ea = std::exp(-u * a);
  if (std::abs(x) < 1e-4) {
    const double avg = ea * (1.0 - x / 2.0 + x * x / 6.0 - x * x * x / 24.0);
    return -a * avg + ea * (-h / 2.0 + u * h * h / 3.0 - u * u * h * h * h / 8.0);
  }
  const double avg = ea * -std::expm1(-x) / x;
  return (-a * ea + b * std::exp(-u * b)) / x - avg / u;
}

double f_box(int order, std::span<const Interval> box, double gamma_bar) {
  check_order(order);
  if (box.size() != static_cast<std::size_t>(order - 1)) throw ConfigError("box dimension mismatch");
  double f = 0.0;
  for (const auto& term : coherence_terms(order)) {
    double v = term.coef;
    for (int k = 0; k < order - 1; ++k) v *= mean_exp(term.mult[k] * gamma_bar, box[k].lo, box[k].hi);
    f += v;
  }
  return f;
}

double f_box_dgamma(int order, std::span<const Interval> box, double gamma_bar) {
  check_order(order);
  if (box.size() != static_cast<std::size_t>(order - 1)) throw ConfigError("box dimension mismatch");
  double df = 0.0;
  for (const auto& term : coherence_terms(order)) {
    for (int k = 0; k < order - 1; ++k) {
      if (term.mult[k] == 0) continue;
      double v = term.coef * term.mult[k] *
                 mean_exp_du(term.mult[k] * gamma_bar, box[k].lo, box[k].hi);
      for (int l = 0; l < order - 1; ++l)
        if (l != k) v *= mean_exp(term.mult[l] * gamma_bar, box[l].lo, box[l].hi);
      df += v;
    }
  }
  return df;
}

double thermal_coherence_box(int order, std::span<const Interval> box, double gamma_bar) {
  return 1.0 + f_box(order, box, gamma_bar);
}

double permanent(const std::vector<double>& matrix, int n) {
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  double total = 0.0;
  do {
    double p = 1.0;
    for (int i = 0; i < n; ++i) p *= matrix[static_cast<std::size_t>(i * n + perm[static_cast<std::size_t>(i)])];
    total += p;
  } while (std::next_permutation(perm.begin(), perm.end()));
  return total;
}

double wick_oracle(std::span<const double> times_s, double n_ac, double gamma_bar,
                   Ordering ordering) {
  const int n = static_cast<int>(times_s.size());
  if (n < 1 || n > 6) throw ConfigError("wick_oracle supports 1 <= n <= 6");
  for (double t : times_s)
    if (!std::isfinite(t)) throw ConfigError("wick_oracle needs finite times");
  const double n_eff = ordering == Ordering::Normal ? n_ac : n_ac + 1.0;
  if (!(n_eff > 0.0)) throw ConfigError("wick_oracle needs a positive occupancy");
  // The rotating phases exp(i w (t_i - t_j)) cancel along every permutation
  // cycle, so only the real envelope is kept.
  std::vector<double> m(static_cast<std::size_t>(n * n));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      m[static_cast<std::size_t>(i * n + j)] =
          n_eff * std::exp(-0.5 * gamma_bar * std::abs(times_s[i] - times_s[j]));
  return permanent(m, n) / std::pow(n_eff, n);
}

double conditional_g2(int k, double tau_s, double gamma_bar) {
  if (k < 1) throw ConfigError("conditional_g2 needs k >= 1");
  if (!(tau_s >= 0.0)) throw ConfigError("tau must be >= 0");
  const double x = std::isinf(tau_s) ? 0.0 : std::exp(-gamma_bar * tau_s);
  return (1.0 + (k + 1) * x) / (1.0 + k * x);
}

namespace {

// g^(m) with m-1 delays: `zeros` leading zero delays then optional tau.
double coherence_at(int m, int zeros, std::optional<double> tau, double gamma_bar, bool use_wick) {
  if (m <= 1) return 1.0;
  if (!use_wick && m <= 4) {
    std::vector<double> d(static_cast<std::size_t>(zeros), 0.0);
    if (tau) d.push_back(*tau);
    return thermal_coherence(m, d, gamma_bar);
  }
  std::vector<double> t(static_cast<std::size_t>(zeros + 1), 0.0);
  if (tau) t.push_back(*tau);
  return wick_oracle(t, 1.0, gamma_bar);
}

}  // namespace

double conditional_g2_ratio(int k, double tau_s, double gamma_bar, bool use_wick) {
  if (k < 1) throw ConfigError("conditional_g2 needs k >= 1");
  if (k + 2 > 6) throw ConfigError("ratio form supports k <= 4");
  const double num = coherence_at(k + 2, k, tau_s, gamma_bar, use_wick) *
                     coherence_at(k, k - 1, std::nullopt, gamma_bar, use_wick);
  const double den = coherence_at(k + 1, k, std::nullopt, gamma_bar, use_wick) *
                     coherence_at(k + 1, k - 1, tau_s, gamma_bar, use_wick);
  return num / den;
}

double conditional_occupancy(int k, HeraldSide side, double tau_s, double n_ac, double gamma_bar) {
  if (k < 1) throw ConfigError("conditional_occupancy needs k >= 1");
  if (!(tau_s >= 0.0)) throw ConfigError("tau must be >= 0");
  const double x = std::isinf(tau_s) ? 0.0 : std::exp(-gamma_bar * tau_s);
  if (side == HeraldSide::Subtracted) return n_ac * (1.0 + k * x);
  return (n_ac + 1.0) * (1.0 + k * x) - 1.0;
}

// ---------------------------------------------------------------------------

void GawbsModel::validate() const {
  if (!(alpha >= 0.0 && alpha < 1.0)) throw ConfigError("GAWBS alpha must lie in [0, 1)");
  if (!(V_d > 0.0) || !(a > 0.0)) throw ConfigError("GAWBS V_d and a must be > 0");
  for (const auto& p : peaks)
    if (!(p.kappa_G > 0.0)) throw ConfigError("GAWBS peak widths must be > 0");
}

double filter_transmission(double Delta, const FilterChain& filters, double omega_ac) {
  const double d = std::abs(Delta) - omega_ac;
  const double a = 2.0 * d / filters.kappa_fc1;
  const double b = 2.0 * d / filters.kappa_fc2;
  return 1.0 / ((1.0 + a * a) * (1.0 + b * b));
}

double gawbs_lorentzian(double Delta, const GawbsPeak& peak) {
  const double x = 2.0 * (std::abs(Delta) - peak.omega_G) / peak.kappa_G;
  return 1.0 / (1.0 + x * x);
}

double spectrum_rate(double Delta, double Gamma_bkg, double Gamma_res, const GawbsModel& gawbs,
                     const FilterChain& filters, double omega_ac) {
  double r = Gamma_bkg + filter_transmission(Delta, filters, omega_ac) * Gamma_res;
  for (const auto& p : gawbs.peaks) r += gawbs_lorentzian(Delta, p) * p.Gamma_G;
  return r;
}

double gawbs_mode_function(double y, double alpha) {
  const double a2 = alpha * alpha;
  return (1.0 - a2) * std::cyl_bessel_j(0.0, y) - a2 * std::cyl_bessel_j(2.0, y);
}

std::vector<GawbsMode> gawbs_mode_freqs(const GawbsModel& model, int m_max) {
  model.validate();
  if (m_max < 1) throw ConfigError("m_max must be >= 1");
  const double step = std::acos(-1.0) / 8.0;
  const double y_limit = step * 8.0 * (2.0 * m_max + 20.0);
  auto h = [&](double y) { return gawbs_mode_function(y, model.alpha); };

  std::vector<GawbsMode> modes;
  double lo = 1e-9;
  double hlo = h(lo);
  while (static_cast<int>(modes.size()) < m_max) {
    const double hi = lo + step;
    if (hi > y_limit) throw ConvergenceError("GAWBS root bracketing exhausted the search grid");
    const double hhi = h(hi);
    if (hhi == 0.0 || (hlo < 0.0) != (hhi < 0.0)) {
      double a = lo, b = hi, fa = hlo;
      double root = hi;
      if (hhi != 0.0) {
        for (int it = 0; it < 200; ++it) {
          const double mid = 0.5 * (a + b);
          const double fm = h(mid);
          if (fm == 0.0 || b - a < 1e-15 * mid) {
            a = b = mid;
            break;
          }
          if ((fa < 0.0) != (fm < 0.0)) {
            b = mid;
          } else {
            a = mid;
            fa = fm;
          }
        }
        root = 0.5 * (a + b);
      }
      GawbsMode mode;
      mode.m = static_cast<int>(modes.size()) + 1;
      mode.y = root;
      mode.residual = std::abs(h(root));
      mode.freq_hz = model.V_d * root / (kTwoPi * model.a);
      modes.push_back(mode);
    }
    lo = hi;
    hlo = hhi;
  }
  return modes;
}

// ---------------------------------------------------------------------------

void CavityParams::validate() const {
  if (!(kappa_c > 0.0)) throw ConfigError("kappa_c must be > 0");
  if (!(kappa_in >= 0.0 && kappa_in <= kappa_c)) throw ConfigError("need 0 <= kappa_in <= kappa_c");
  if (!(g0 >= 0.0)) throw ConfigError("g0 must be >= 0");
  if (!(omega_c > 0.0)) throw ConfigError("omega_c must be > 0");
}

void ThermalLink::validate() const {
  if (!(T_MC > 0.0)) throw ConfigError("T_MC must be > 0");
  if (!(beta_heat >= 0.0)) throw ConfigError("beta must be >= 0");
  if (!(k_exp > -1.0)) throw ConfigError("k must be > -1");
  if (!(gamma_ac0 > 0.0) || !(gamma_ball_coeff >= 0.0)) throw ConfigError("damping rates must be positive");
  if (!(omega_ac > 0.0)) throw ConfigError("omega_ac must be > 0");
  if (!(heat_power_unit_w > 0.0)) throw ConfigError("heat power unit must be > 0");
}

double fiber_temperature(double P_in, const ThermalLink& link) {
  const double e = link.k_exp + 1.0;
  return std::pow(std::pow(link.T_MC, e) + std::pow(link.beta_heat, e) * (P_in / link.heat_power_unit_w),
                  1.0 / e);
}

double thermal_occupancy(double P_in, const ThermalLink& link) {
  const double T_fib = fiber_temperature(P_in, link);
  const double g_ball = link.gamma_ball_coeff * std::pow(link.T_MC, 4);
  const double n_fib = bose_occupancy(link.omega_ac, T_fib);
  const double n_mc = bose_occupancy(link.omega_ac, link.T_MC);
  return (n_fib * link.gamma_ac0 + n_mc * g_ball) / (link.gamma_ac0 + g_ball);
}

double intracavity_photons(double P_in, const CavityParams& cavity, double omega_ac, DriveSide side) {
  const double Delta = side == DriveSide::AntiStokes ? -omega_ac : omega_ac;
  const double omega_drive = cavity.omega_c + Delta;
  const double half = 0.5 * cavity.kappa_c;
  return cavity.kappa_in / (half * half + Delta * Delta) * P_in / (kHbar * omega_drive);
}

BackactionResult backaction_occupancy(double P_in, const CavityParams& cavity,
                                      const ThermalLink& link, DriveSide side) {
  if (!(P_in >= 0.0)) throw ConfigError("P_in must be >= 0");
  cavity.validate();
  link.validate();
  BackactionResult r;
  r.T_fib = fiber_temperature(P_in, link);
  r.n_th = thermal_occupancy(P_in, link);
  r.gamma_ac = link.gamma_ac0 + link.gamma_ball_coeff * std::pow(link.T_MC, 4);
  r.n_c = intracavity_photons(P_in, cavity, link.omega_ac, side);
  const double g_opt = 4.0 * cavity.g0 * cavity.g0 * r.n_c / cavity.kappa_c;
  const double floor = std::pow(cavity.kappa_c / (4.0 * link.omega_ac), 2);
  if (side == DriveSide::AntiStokes) {
    r.gamma_opt = g_opt;
    r.gamma_bar = r.gamma_ac + g_opt;
    r.n_ac = (g_opt * floor + r.gamma_ac * r.n_th) / r.gamma_bar;
    r.rate_per_eta = cavity.eta_kappa() * g_opt * r.n_ac;
  } else {
    r.gamma_opt = -g_opt;
    r.gamma_bar = r.gamma_ac - g_opt;
    r.stable = r.gamma_bar > 0.0;
    if (r.stable) {
      r.n_ac = (g_opt * (1.0 + floor) + r.gamma_ac * r.n_th) / r.gamma_bar;
      r.rate_per_eta = cavity.eta_kappa() * g_opt * (r.n_ac + 1.0);
    } else {
      r.n_ac = std::numeric_limits<double>::quiet_NaN();
      r.rate_per_eta = std::numeric_limits<double>::quiet_NaN();
    }
  }
  return r;
}

json to_json(const BackactionResult& r) {
  auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
  return {{"n_ac", num(r.n_ac)},          {"gamma_bar", r.gamma_bar}, {"gamma_ac", r.gamma_ac},
          {"gamma_opt", r.gamma_opt},     {"n_th", r.n_th},           {"T_fib", r.T_fib},
          {"n_c", r.n_c},                 {"rate_per_eta", num(r.rate_per_eta)},
          {"stable", r.stable}};
}

}  // namespace phononcounts::models
