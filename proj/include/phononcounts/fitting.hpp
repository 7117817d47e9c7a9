#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "phononcounts/correlator.hpp"
#include "phononcounts/models.hpp"

namespace phononcounts {

/// model(params, out) fills the model prediction for every observation.
using ModelFn = std::function<void(std::span<const double> params, std::span<double> out)>;
/// jacobian(params, J) fills the row-major (observations x params) derivative.
using JacobianFn = std::function<void(std::span<const double> params, std::span<double> J)>;

struct NllsOptions {
  int max_iterations = 500;
  double cost_tol = 1e-10;  // relative cost change
  double step_tol = 1e-8;   // relative parameter step
  /// Multiply the covariance by chi^2/dof (for weights of unknown scale).
  bool scale_covariance = false;
};

struct NllsProblem {
  ModelFn model;
  std::optional<JacobianFn> jacobian;  // central differences when absent
  std::vector<double> observations;
  std::vector<double> weights;  // empty: all ones
  std::vector<double> init;
  std::vector<double> lower;  // empty: unbounded
  std::vector<double> upper;
  std::vector<std::string> names;
  NllsOptions options;
};

struct FitResult {
  std::vector<std::string> names;
  std::vector<double> values;
  std::vector<double> sigmas;
  std::vector<double> covariance;  // row-major
  std::vector<double> residuals;   // observation - model
  double cost = 0.0;               // sum of weighted squared residuals
  bool converged = false;
  int iterations = 0;
  double condition_number = 0.0;  // of the scaled normal matrix
  bool identifiable = true;
  std::size_t dof = 0;
  json extras = json::object();

  [[nodiscard]] std::size_t index_of(const std::string& name) const;
  [[nodiscard]] double value(const std::string& name) const { return values[index_of(name)]; }
  [[nodiscard]] double sigma(const std::string& name) const { return sigmas[index_of(name)]; }
  [[nodiscard]] double cov(const std::string& a, const std::string& b) const;
  [[nodiscard]] json to_json() const;
};

/// Levenberg-Marquardt with box bounds enforced by clamping.
FitResult nlls_solve(const NllsProblem& problem);

/// Central-difference Jacobian, step max(1e-6 |p|, 1e-9), one-sided at bounds.
void numeric_jacobian(const ModelFn& model, std::span<const double> params, std::size_t n_obs,
                      std::span<const double> lower, std::span<const double> upper,
                      std::span<double> J);

/// Residual CSV: index, observation, model, residual, weight.
void write_residuals_csv(const FitResult& fit, std::span<const double> observations,
                         std::ostream& out);

// ---------------------------------------------------------------------------
// Coherence histograms: counts = A + B * f_n(gamma tau), averaged over each bin.

enum class Weighting {
  ModelPoisson,  // iteratively reweighted by 1/model (Poisson likelihood fixed point)
  CountPoisson,  // 1/max(count, 1)
  Uniform
};

std::string_view to_string(Weighting w);
Weighting parse_weighting(std::string_view text);

struct CoherenceFitOptions {
  Weighting weighting = Weighting::ModelPoisson;
  std::optional<double> gamma_init;  // rad/s
  int max_reweights = 10;
};

/// Bin-averaged coherence model on a histogram grid.
class CoherenceModel {
 public:
  CoherenceModel(int order, std::uint64_t bin_width_ns, std::uint64_t max_delay_ns, std::size_t axis_len);

  [[nodiscard]] std::size_t size() const noexcept { return size_; }
  /// params = {A, B, gamma}
  void evaluate(std::span<const double> params, std::span<double> out) const;
  void jacobian(std::span<const double> params, std::span<double> J) const;
  /// Bin-averaged f_n at every bin.
  [[nodiscard]] std::vector<double> f_bins(double gamma) const;

 private:
  void tables(double gamma, bool derivs, std::vector<std::vector<double>>& e,
              std::vector<std::vector<double>>& d) const;

  int order_;
  std::size_t axis_len_;
  std::size_t size_;
  std::vector<models::Interval> bins_;
};

FitResult fit_coherence(const CoincidenceHistogram& hist, const CoherenceFitOptions& opts = {});
/// Fit of normalized values with weights 1/sigma^2.
FitResult fit_coherence(const CoherenceArray& arr, std::uint64_t max_delay_ns,
                        const CoherenceFitOptions& opts = {});

// ---------------------------------------------------------------------------
// Spectra

struct SpectrumPoint {
  double Delta = 0.0;  // rad/s
  double rate = 0.0;   // counts/s
  double weight = 1.0;
};

enum class SpectrumMode { Full, FivePoint };

struct SpectrumFitOptions {
  SpectrumMode mode = SpectrumMode::Full;
  int n_gawbs_peaks = 1;
  models::FilterChain filters;
  double omega_ac = kTwoPi * 315.3e6;  // fixed in five-point mode, seed otherwise
  std::vector<models::GawbsPeak> peak_init;  // optional seeds
};

/// Detunings (Hz) of the five-point protocol.
std::vector<double> five_point_grid_hz();

FitResult fit_spectrum(std::span<const SpectrumPoint> points, const SpectrumFitOptions& opts = {});

// ---------------------------------------------------------------------------
// Drive-power sweeps

struct PowerPoint {
  double P_in = 0.0;  // W
  double R_AS = 0.0;  // counts/s at the red drive
  double R_S = 0.0;   // counts/s at the blue drive
  double sigma_AS = 0.0;
  double sigma_S = 0.0;
};

struct PowerSweep {
  std::vector<PowerPoint> points;
};

struct PowerFitOptions {
  models::CavityParams cavity;  // g0 used as the seed
  models::ThermalLink link;     // T_MC, beta_heat, k_exp used as seeds
  std::vector<double> eta_init;  // per sweep; default 0.1
  /// Global parameters held at their seed values.
  std::vector<std::string> fixed;
};

/// Globals {T_MC, beta, k, g0} and one eta_det per sweep.
FitResult fit_power_sweep(std::span<const PowerSweep> sweeps, const PowerFitOptions& opts = {});

struct TemperaturePoint {
  double T_MC = 0.0;  // K
  double r_AS = 0.0;  // power-normalized rates
  double r_S = 0.0;
  double sigma_AS = 0.0;
  double sigma_S = 0.0;
};

/// Red: a n(T); blue: a (n(T) + 1). Only points above min_T_K are used.
FitResult fit_temperature_sweep(std::span<const TemperaturePoint> points,
                                double omega_ac = kTwoPi * 315.3e6, double min_T_K = 0.05);

}  // namespace phononcounts
