#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "phononcounts/simulator.hpp"
#include "phononcounts/tagstream.hpp"

namespace phononcounts::models {

inline constexpr double kHbar = 1.054571817e-34;     // J s
inline constexpr double kBoltzmann = 1.380649e-23;   // J/K
inline constexpr double kSpeedOfLight = 299792458.0; // m/s

/// Reference single-photon coupling rates (rad/s): coherence-decay fit and
/// power-sweep fit. Neither is used as an implicit default.
inline constexpr double kG0CoherenceFit = kTwoPi * 4.70e3;
inline constexpr double kG0PowerSweepFit = kTwoPi * 4.58e3;

/// Bose occupancy at angular frequency omega and temperature T (K).
double bose_occupancy(double omega, double temperature);

// ---------------------------------------------------------------------------
// Thermal coherences

/// One exponential term coef * exp(-gamma * sum_k mult[k] * tau_k) of f_n.
struct CoherenceTerm {
  double coef;
  std::array<int, 3> mult;
};

/// Terms of f_n for n = 2, 3, 4, so that g^(n) = 1 + sum of terms.
std::span<const CoherenceTerm> coherence_terms(int order);

/// g^(n)(tau) of a thermal state; delays in seconds, infinity allowed.
double thermal_coherence(int order, std::span<const double> delays_s, double gamma_bar);
double thermal_coherence(int order, std::initializer_list<double> delays_s, double gamma_bar);

/// Half-open delay interval [lo, hi) in seconds.
struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

/// Mean of exp(-u tau) over tau uniform in [a, b]; exp(-u a) when b == a.
double mean_exp(double u, double a, double b);
/// d/du of mean_exp.
double mean_exp_du(double u, double a, double b);

/// Average of g^(n) over a box of delays.
double thermal_coherence_box(int order, std::span<const Interval> box, double gamma_bar);
/// Average of f_n over a box, and its derivative in gamma.
double f_box(int order, std::span<const Interval> box, double gamma_bar);
double f_box_dgamma(int order, std::span<const Interval> box, double gamma_bar);

enum class Ordering { Normal, Antinormal };

/// Wick-theorem oracle: permanent of the pair-correlation matrix over the
/// given absolute times (s), divided by n_eff^n. n <= 6.
double wick_oracle(std::span<const double> times_s, double n_ac, double gamma_bar,
                   Ordering ordering = Ordering::Normal);

/// Permanent by full permutation sum.
double permanent(const std::vector<double>& matrix, int n);

// ---------------------------------------------------------------------------
// Heralded states

enum class HeraldSide { Subtracted, Added };

/// g2 of the k-phonon subtracted (or added) thermal state at delay tau.
double conditional_g2(int k, double tau_s, double gamma_bar);
/// Same quantity from the ratio g^(k+2)(0^k, tau) g^(k)(0^(k-1)) /
/// (g^(k+1)(0^k) g^(k+1)(0^(k-1), tau)), with each coherence from thermal_coherence
/// (k <= 2) or from the Wick oracle (any k <= 4).
double conditional_g2_ratio(int k, double tau_s, double gamma_bar, bool use_wick = false);

double conditional_occupancy(int k, HeraldSide side, double tau_s, double n_ac, double gamma_bar);

// ---------------------------------------------------------------------------
// Spectrum

struct FilterChain {
  double kappa_fc1 = kTwoPi * 1.71e6;
  double kappa_fc2 = kTwoPi * 1.21e6;
};

struct GawbsPeak {
  double omega_G = kTwoPi * 322.3e6;
  double kappa_G = kTwoPi * 3.0e6;
  double Gamma_G = 0.0;
};

struct GawbsModel {
  double alpha = 0.624;
  double V_d = 5996.0;   // m/s
  double a = 62.5e-6;    // m
  std::vector<GawbsPeak> peaks;

  void validate() const;
};

double filter_transmission(double Delta, const FilterChain& filters, double omega_ac);
double gawbs_lorentzian(double Delta, const GawbsPeak& peak);

/// Count rate at drive detuning Delta (rad/s).
double spectrum_rate(double Delta, double Gamma_bkg, double Gamma_res, const GawbsModel& gawbs,
                     const FilterChain& filters, double omega_ac);

struct GawbsMode {
  int m = 0;
  double y = 0.0;
  double freq_hz = 0.0;
  double residual = 0.0;
};

/// (1 - alpha^2) J0(y) - alpha^2 J2(y)
double gawbs_mode_function(double y, double alpha);

/// First m_max positive roots of the mode equation, as frequencies.
std::vector<GawbsMode> gawbs_mode_freqs(const GawbsModel& model, int m_max);

// ---------------------------------------------------------------------------
// Backaction and heating

struct CavityParams {
  double kappa_c = kTwoPi * 47.2e6;
  double kappa_in = 0.5 * kTwoPi * 47.2e6;
  double g0 = kG0PowerSweepFit;
  double omega_c = kTwoPi * kSpeedOfLight / 1548.3e-9;

  [[nodiscard]] double eta_kappa() const { return kappa_in / kappa_c; }
  void validate() const;
};

struct ThermalLink {
  double T_MC = 0.0244;             // K
  double beta_heat = 0.54;          // K per (power unit)^(1/(k+1))
  double k_exp = 1.09;
  double gamma_ac0 = kTwoPi * 3.2e3;       // rad/s
  double gamma_ball_coeff = kTwoPi * 2.7e6; // rad/s/K^4
  double omega_ac = kTwoPi * 315.3e6;      // rad/s
  /// Power unit (W) in which P_in enters the heating law.
  double heat_power_unit_w = 1e-3;

  void validate() const;
};

struct RateModel {
  double Gamma_bkg0 = 0.0;
  double Gamma_bkg1 = 0.0;  // per W
  double Gamma_G1 = 0.0;    // per W
  double eta_det = 1.0;
};

struct BackactionResult {
  double n_ac = 0.0;
  double gamma_bar = 0.0;
  double gamma_ac = 0.0;
  double gamma_opt = 0.0;  // signed: negative for the blue drive
  double n_th = 0.0;
  double T_fib = 0.0;
  double n_c = 0.0;
  double rate_per_eta = 0.0;  // R_AS or R_S per unit detection efficiency
  bool stable = true;         // false when gamma_bar <= 0
};

double fiber_temperature(double P_in, const ThermalLink& link);
double thermal_occupancy(double P_in, const ThermalLink& link);
double intracavity_photons(double P_in, const CavityParams& cavity, double omega_ac, DriveSide side);

BackactionResult backaction_occupancy(double P_in, const CavityParams& cavity,
                                      const ThermalLink& link, DriveSide side);

json to_json(const BackactionResult& r);

}  // namespace phononcounts::models
