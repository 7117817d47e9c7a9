#include "phononcounts/fitting.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>

#include "phononcounts/errors.hpp"

namespace phononcounts {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

double bound_at(std::span<const double> b, std::size_t j, double fallback) {
  return b.empty() ? fallback : b[j];
}

}  // namespace

std::size_t FitResult::index_of(const std::string& name) const {
  const auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw ConfigError("no fit parameter named '" + name + "'");
  return static_cast<std::size_t>(it - names.begin());
}

double FitResult::cov(const std::string& a, const std::string& b) const {
  return covariance[index_of(a) * names.size() + index_of(b)];
}

json FitResult::to_json() const {
  json params = json::object();
  for (std::size_t i = 0; i < names.size(); ++i)
    params[names[i]] = {{"value", values[i]}, {"sigma", std::isfinite(sigmas[i]) ? json(sigmas[i]) : json(nullptr)}};
  return {{"parameters", params},
          {"cost", cost},
          {"dof", dof},
          {"converged", converged},
          {"iterations", iterations},
          {"condition_number", condition_number},
          {"identifiable", identifiable},
          {"extras", extras}};
}

void numeric_jacobian(const ModelFn& model, std::span<const double> params, std::size_t n_obs,
                      std::span<const double> lower, std::span<const double> upper,
                      std::span<double> J) {
  const std::size_t n = params.size();
  std::vector<double> p(params.begin(), params.end());
  std::vector<double> fp(n_obs), fm(n_obs);
  constexpr double inf = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j) {
    const double h = std::max(1e-6 * std::abs(params[j]), 1e-9);
    const double up = std::min(params[j] + h, bound_at(upper, j, inf));
    const double dn = std::max(params[j] - h, bound_at(lower, j, -inf));
    p[j] = up;
    model(p, fp);
    p[j] = dn;
    model(p, fm);
    p[j] = params[j];
    const double span = up - dn;
    for (std::size_t i = 0; i < n_obs; ++i) J[i * n + j] = span > 0.0 ? (fp[i] - fm[i]) / span : 0.0;
  }
}

namespace {

struct Normal {
  Eigen::MatrixXd H;
  Eigen::VectorXd g;
};

Normal normal_equations(std::span<const double> J, std::span<const double> w,
                        std::span<const double> r, std::size_t m, std::size_t n) {
  Normal ne{Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n)),
            Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n))};
  for (std::size_t i = 0; i < m; ++i) {
    const double wi = w.empty() ? 1.0 : w[i];
    const double* row = J.data() + i * n;
    for (std::size_t a = 0; a < n; ++a) {
      const double wa = wi * row[a];
      ne.g(static_cast<Eigen::Index>(a)) += wa * r[i];
      for (std::size_t b = a; b < n; ++b) ne.H(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) += wa * row[b];
    }
  }
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < a; ++b)
      ne.H(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = ne.H(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(a));
  return ne;
}

double weighted_cost(std::span<const double> y, std::span<const double> f, std::span<const double> w,
                     std::vector<double>& r) {
  double c = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    r[i] = y[i] - f[i];
    c += (w.empty() ? 1.0 : w[i]) * r[i] * r[i];
  }
  return c;
}

}  // namespace

FitResult nlls_solve(const NllsProblem& pr) {
  const std::size_t m = pr.observations.size();
  const std::size_t n = pr.init.size();
  if (!pr.model) throw ConfigError("nlls_solve needs a model");
  if (n == 0) throw ConfigError("nlls_solve needs at least one parameter");
  if (m == 0) throw DataError("nlls_solve needs observations");
  if (!pr.weights.empty() && pr.weights.size() != m) throw ConfigError("weights and observations differ in length");
  if ((!pr.lower.empty() && pr.lower.size() != n) || (!pr.upper.empty() && pr.upper.size() != n))
    throw ConfigError("bounds and parameters differ in length");
  for (double w : pr.weights)
    if (!(w > 0.0) || !std::isfinite(w)) throw ConfigError("weights must be finite and > 0");
  for (std::size_t j = 0; j < n; ++j) {
    if (!std::isfinite(pr.init[j])) throw ConfigError("initial parameters must be finite");
    if ((!pr.lower.empty() && pr.init[j] < pr.lower[j]) || (!pr.upper.empty() && pr.init[j] > pr.upper[j]))
      throw ConfigError("initial parameter " + std::to_string(j) + " outside its bounds");
  }

  auto clamp = [&](std::vector<double>& p) {
    for (std::size_t j = 0; j < n; ++j) {
      if (!pr.lower.empty()) p[j] = std::max(p[j], pr.lower[j]);
      if (!pr.upper.empty()) p[j] = std::min(p[j], pr.upper[j]);
    }
  };
  auto jac = [&](std::span<const double> p, std::span<double> J) {
    if (pr.jacobian) (*pr.jacobian)(p, J);
    else numeric_jacobian(pr.model, p, m, pr.lower, pr.upper, J);
  };

  std::vector<double> p = pr.init;
  std::vector<double> f(m), r(m), J(m * n);
  pr.model(p, f);
  if (!all_finite(f)) throw DataError("non-finite model output at the initial parameters");
  double cost = weighted_cost(pr.observations, f, pr.weights, r);

  FitResult res;
  res.names = pr.names;
  if (res.names.size() != n) {
    res.names.clear();
    for (std::size_t j = 0; j < n; ++j) res.names.push_back("p" + std::to_string(j));
  }

  double lambda = -1.0;
  std::vector<double> trial(n), ft(m), rt(m);
  int it = 0;
  bool converged = cost == 0.0;
  while (!converged && it < pr.options.max_iterations) {
    ++it;
    jac(p, J);
    const Normal ne = normal_equations(J, pr.weights, r, m, n);
    const double maxdiag = std::max(ne.H.diagonal().maxCoeff(), std::numeric_limits<double>::min());
    if (lambda < 0.0) lambda = 1e-3;
    Eigen::VectorXd D = ne.H.diagonal().cwiseMax(1e-12 * maxdiag);
    bool accepted = false;
    while (!accepted) {
      Eigen::MatrixXd A = ne.H;
      A.diagonal() += lambda * D;
      const Eigen::VectorXd delta = A.ldlt().solve(ne.g);
      for (std::size_t j = 0; j < n; ++j) trial[j] = p[j] + delta(static_cast<Eigen::Index>(j));
      clamp(trial);
      pr.model(trial, ft);
      const double ct = all_finite(ft) && all_finite(trial) ? weighted_cost(pr.observations, ft, pr.weights, rt)
                                                            : std::numeric_limits<double>::infinity();
      if (ct < cost) {
        double rel_step = 0.0;
        for (std::size_t j = 0; j < n; ++j)
          rel_step = std::max(rel_step, std::abs(trial[j] - p[j]) / std::max(std::abs(p[j]), 1e-300));
        const double rel_cost = (cost - ct) / std::max(cost, std::numeric_limits<double>::min());
        p = trial;
        f = ft;
        r = rt;
        cost = ct;
        lambda = std::max(lambda / 3.0, 1e-15);
        accepted = true;
        if (rel_cost < pr.options.cost_tol || rel_step < pr.options.step_tol || cost == 0.0) converged = true;
      } else {
        lambda *= 4.0;
        if (lambda > 1e16) {
          // No descent direction left at working precision.
          converged = true;
          break;
        }
      }
    }
  }

  res.values = p;
  res.iterations = it;
  res.converged = converged;
  res.cost = cost;
  res.residuals = r;
  res.dof = m > n ? m - n : 0;

  jac(p, J);
  const Normal ne = normal_equations(J, pr.weights, r, m, n);
  Eigen::VectorXd scale(static_cast<Eigen::Index>(n));
  for (Eigen::Index j = 0; j < static_cast<Eigen::Index>(n); ++j)
    scale(j) = ne.H(j, j) > 0.0 ? 1.0 / std::sqrt(ne.H(j, j)) : 0.0;
  const Eigen::MatrixXd Hs = scale.asDiagonal() * ne.H * scale.asDiagonal();
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(Hs, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const auto sv = svd.singularValues();
  const double smax = sv.size() ? sv(0) : 0.0;
  const double smin = sv.size() ? sv(sv.size() - 1) : 0.0;
  res.condition_number = smin > 0.0 ? smax / smin : std::numeric_limits<double>::infinity();
  bool zero_column = false;
  for (Eigen::Index j = 0; j < static_cast<Eigen::Index>(n); ++j) zero_column |= scale(j) == 0.0;
  res.identifiable = !zero_column && res.condition_number < 1e12;

  Eigen::VectorXd inv(sv.size());
  for (Eigen::Index k = 0; k < sv.size(); ++k) inv(k) = sv(k) > smax * 1e-14 ? 1.0 / sv(k) : 0.0;
  Eigen::MatrixXd cov = scale.asDiagonal() * (svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose()) *
                        scale.asDiagonal();
  if (pr.options.scale_covariance && res.dof > 0) cov *= cost / static_cast<double>(res.dof);
  res.covariance.resize(n * n);
  res.sigmas.resize(n);
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = 0; b < n; ++b)
      res.covariance[a * n + b] = cov(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
    const double v = cov(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(a));
    res.sigmas[a] = (res.identifiable && v >= 0.0) ? std::sqrt(v)
                                                   : (v >= 0.0 && scale(static_cast<Eigen::Index>(a)) > 0.0 ? std::sqrt(v) : kNaN);
  }
  return res;
}

void write_residuals_csv(const FitResult& fit, std::span<const double> observations, std::ostream& out) {
  out << "index,observation,model,residual\n";
  for (std::size_t i = 0; i < fit.residuals.size() && i < observations.size(); ++i)
    out << i << ',' << observations[i] << ',' << observations[i] - fit.residuals[i] << ','
        << fit.residuals[i] << '\n';
}

// ---------------------------------------------------------------------------
// Coherence fits

std::string_view to_string(Weighting w) {
  switch (w) {
    case Weighting::ModelPoisson: return "model-poisson";
    case Weighting::CountPoisson: return "count-poisson";
    default: return "uniform";
  }
}

Weighting parse_weighting(std::string_view text) {
  if (text == "model-poisson") return Weighting::ModelPoisson;
  if (text == "count-poisson") return Weighting::CountPoisson;
  if (text == "uniform") return Weighting::Uniform;
  throw ConfigError("unknown weighting '" + std::string(text) + "'");
}

CoherenceModel::CoherenceModel(int order, std::uint64_t bin_width_ns, std::uint64_t max_delay_ns,
                               std::size_t axis_len)
    : order_(order), axis_len_(axis_len) {
  if (order < 2 || order > 4) throw ConfigError("coherence order must be 2, 3 or 4");
  if (axis_len == 0 || bin_width_ns == 0) throw DataError("empty histogram");
  size_ = 1;
  for (int d = 0; d < order - 1; ++d) size_ *= axis_len;
  for (std::size_t i = 0; i < axis_len; ++i) {
    const double lo = static_cast<double>(i * bin_width_ns) * 1e-9;
    const double hi = static_cast<double>(std::min<std::uint64_t>((i + 1) * bin_width_ns, max_delay_ns)) * 1e-9;
    bins_.push_back({lo, std::max(hi, lo)});
  }
}

void CoherenceModel::tables(double gamma, bool derivs, std::vector<std::vector<double>>& e,
                            std::vector<std::vector<double>>& d) const {
  e.assign(3, std::vector<double>(axis_len_, 1.0));
  if (derivs) d.assign(3, std::vector<double>(axis_len_, 0.0));
  for (int m = 1; m <= 2; ++m)
    for (std::size_t i = 0; i < axis_len_; ++i) {
      e[m][i] = models::mean_exp(m * gamma, bins_[i].lo, bins_[i].hi);
      if (derivs) d[m][i] = m * models::mean_exp_du(m * gamma, bins_[i].lo, bins_[i].hi);
    }
}

std::vector<double> CoherenceModel::f_bins(double gamma) const {
  std::vector<double> out(size_);
  const double p[3] = {0.0, 1.0, gamma};
  evaluate(p, out);
  return out;
}

void CoherenceModel::evaluate(std::span<const double> params, std::span<double> out) const {
  const double A = params[0], B = params[1], gamma = params[2];
  std::vector<std::vector<double>> e, d;
  tables(gamma, false, e, d);
  const auto terms = models::coherence_terms(order_);
  const std::size_t L = axis_len_;
  if (order_ == 2) {
    for (std::size_t i = 0; i < L; ++i) out[i] = A + B * e[1][i];
    return;
  }
  if (order_ == 3) {
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < L; ++j) {
        double f = 0.0;
        for (const auto& t : terms) f += t.coef * e[t.mult[0]][i] * e[t.mult[1]][j];
        out[i * L + j] = A + B * f;
      }
    return;
  }
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = 0; j < L; ++j)
      for (std::size_t k = 0; k < L; ++k) {
        double f = 0.0;
        for (const auto& t : terms) f += t.coef * e[t.mult[0]][i] * e[t.mult[1]][j] * e[t.mult[2]][k];
        out[(i * L + j) * L + k] = A + B * f;
      }
}

void CoherenceModel::jacobian(std::span<const double> params, std::span<double> J) const {
  const double B = params[1], gamma = params[2];
  std::vector<std::vector<double>> e, d;
  tables(gamma, true, e, d);
  const auto terms = models::coherence_terms(order_);
  const std::size_t L = axis_len_;
  const int dims = order_ - 1;
  std::array<std::size_t, 3> idx{};
  for (std::size_t b = 0; b < size_; ++b) {
    std::size_t rest = b;
    for (int a = dims - 1; a >= 0; --a) {
      idx[static_cast<std::size_t>(a)] = rest % L;
      rest /= L;
    }
    double f = 0.0, df = 0.0;
    for (const auto& t : terms) {
      double v = t.coef;
      for (int a = 0; a < dims; ++a) v *= e[t.mult[a]][idx[a]];
      f += v;
      for (int a = 0; a < dims; ++a) {
        if (t.mult[a] == 0) continue;
        double dv = t.coef * d[t.mult[a]][idx[a]];
        for (int c = 0; c < dims; ++c)
          if (c != a) dv *= e[t.mult[c]][idx[c]];
        df += dv;
      }
    }
    J[b * 3 + 0] = 1.0;
    J[b * 3 + 1] = f;
    J[b * 3 + 2] = B * df;
  }
}

namespace {

double factorial(int n) {
  double f = 1.0;
  for (int i = 2; i <= n; ++i) f *= i;
  return f;
}

struct Seeds {
  double A, B, gamma;
};

// Plateau from bins with every index in the upper half; gamma from where the
// first-axis profile falls halfway from its first bin to the plateau.
Seeds seed_coherence(std::span<const double> y, int order, std::size_t L, double bin_s, double max_delay_s,
                     std::optional<double> gamma_init) {
  const int dims = order - 1;
  const std::size_t half = L / 2;
  std::vector<double> profile(L, 0.0);
  std::vector<double> pcount(L, 0.0);
  double plateau = 0.0, nplateau = 0.0;
  for (std::size_t b = 0; b < y.size(); ++b) {
    std::size_t rest = b;
    std::array<std::size_t, 3> idx{};
    for (int a = dims - 1; a >= 0; --a) {
      idx[static_cast<std::size_t>(a)] = rest % L;
      rest /= L;
    }
    bool others_far = true;
    for (int a = 1; a < dims; ++a) others_far &= idx[static_cast<std::size_t>(a)] >= half;
    if (!others_far) continue;
    profile[idx[0]] += y[b];
    pcount[idx[0]] += 1.0;
    if (idx[0] >= half) {
      plateau += y[b];
      nplateau += 1.0;
    }
  }
  for (std::size_t i = 0; i < L; ++i) profile[i] = pcount[i] > 0 ? profile[i] / pcount[i] : 0.0;
  double A0 = nplateau > 0 ? plateau / nplateau : 0.0;
  if (!(A0 > 0.0)) {
    A0 = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
    if (!(A0 > 0.0)) A0 = 1.0;
  }
  const double p0 = profile[0];
  double gamma0 = 10.0 / max_delay_s;
  if (gamma_init) {
    gamma0 = *gamma_init;
  } else if (p0 > A0) {
    const double threshold = 0.5 * (p0 + A0);
    for (std::size_t i = 1; i < L; ++i) {
      if (profile[i] <= threshold) {
        // linear interpolation between bin centers
        const double c0 = (static_cast<double>(i) - 0.5) * bin_s;
        const double frac = (profile[i - 1] - threshold) / std::max(profile[i - 1] - profile[i], 1e-300);
        const double t_half = std::max(c0 + frac * bin_s, 0.5 * bin_s);
        gamma0 = std::log(2.0) / t_half;
        break;
      }
    }
  }
  const double e0 = models::mean_exp(gamma0, 0.0, bin_s);
  const double B0 = A0 * std::max(p0 / A0 - 1.0, 0.01) / std::max(e0, 1e-6);
  return {A0, B0, gamma0};
}

FitResult fit_coherence_impl(std::vector<double> y, std::vector<double> base_weights, const CoherenceModel& model,
                             int order, double bin_s, double max_delay_s, bool counts,
                             const CoherenceFitOptions& opts) {
  if (y.empty()) throw DataError("degenerate histogram: no bins");
  const Seeds s = seed_coherence(y, order, static_cast<std::size_t>(std::llround(
                                                 std::pow(static_cast<double>(y.size()), 1.0 / (order - 1)))),
                                 bin_s, max_delay_s, opts.gamma_init);

  NllsProblem pr;
  pr.model = [&](std::span<const double> p, std::span<double> out) { model.evaluate(p, out); };
  pr.jacobian = [&](std::span<const double> p, std::span<double> J) { model.jacobian(p, J); };
  pr.observations = y;
  pr.names = {"A", "B", "gamma_bar"};
  pr.init = {s.A, s.B, s.gamma};
  pr.lower = {s.A * 1e-9, -std::numeric_limits<double>::infinity(), s.gamma * 1e-6};
  pr.upper = {std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(), s.gamma * 1e6};

  Weighting weighting = opts.weighting;
  if (!counts && weighting != Weighting::Uniform) weighting = Weighting::CountPoisson;  // base weights given

  if (weighting == Weighting::Uniform) {
    pr.options.scale_covariance = true;
  } else {
    pr.weights = std::move(base_weights);
  }
  FitResult fit = nlls_solve(pr);
  int rounds = 0;
  if (weighting == Weighting::ModelPoisson && counts) {
    std::vector<double> mu(y.size());
    for (; rounds < opts.max_reweights; ++rounds) {
      model.evaluate(fit.values, mu);
      for (std::size_t i = 0; i < mu.size(); ++i) pr.weights[i] = 1.0 / std::max(mu[i], 1e-3);
      pr.init = fit.values;
      for (std::size_t j = 0; j < 3; ++j) pr.init[j] = std::clamp(pr.init[j], pr.lower[j], pr.upper[j]);
      const FitResult next = nlls_solve(pr);
      double change = 0.0;
      for (std::size_t j = 0; j < 3; ++j)
        change = std::max(change, std::abs(next.values[j] - fit.values[j]) / std::max(std::abs(fit.values[j]), 1e-300));
      fit = next;
      if (change < 1e-9) {
        ++rounds;
        break;
      }
    }
  }

  const double A = fit.value("A"), B = fit.value("B");
  const double fz = factorial(order) - 1.0;
  const double g0 = (A + B * fz) / A;
  const double dA = -B * fz / (A * A), dB = fz / A;
  const double var = dA * dA * fit.cov("A", "A") + 2 * dA * dB * fit.cov("A", "B") + dB * dB * fit.cov("B", "B");
  fit.extras["order"] = order;
  fit.extras["zero_delay_coherence"] = g0;
  fit.extras["zero_delay_sigma"] = var >= 0 ? std::sqrt(var) : kNaN;
  fit.extras["weighting"] = std::string(to_string(weighting));
  fit.extras["reweight_rounds"] = rounds;
  fit.extras["reduced_chi2"] = fit.dof > 0 ? fit.cost / static_cast<double>(fit.dof) : kNaN;
  const double ymin = *std::min_element(y.begin(), y.end());
  const double ymax = *std::max_element(y.begin(), y.end());
  if (ymin == ymax) fit.identifiable = false;
  return fit;
}

}  // namespace

FitResult fit_coherence(const CoincidenceHistogram& hist, const CoherenceFitOptions& opts) {
  const CoherenceModel model(hist.order, hist.bin_width_ns, hist.max_delay_ns, hist.axis_len);
  std::vector<double> y(hist.counts.begin(), hist.counts.end());
  if (std::all_of(y.begin(), y.end(), [](double v) { return v == 0.0; }))
    throw DataError("degenerate histogram: no coincidences");
  std::vector<double> w(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) w[i] = 1.0 / std::max(y[i], 1.0);
  return fit_coherence_impl(std::move(y), std::move(w), model, hist.order, hist.bin_width_ns * 1e-9,
                            hist.max_delay_ns * 1e-9, true, opts);
}

FitResult fit_coherence(const CoherenceArray& arr, std::uint64_t max_delay_ns, const CoherenceFitOptions& opts) {
  const CoherenceModel model(arr.order, arr.bin_width_ns, max_delay_ns, arr.axis_len);
  std::vector<double> w(arr.values.size(), 1.0);
  for (std::size_t i = 0; i < w.size() && i < arr.sigmas.size(); ++i)
    w[i] = arr.sigmas[i] > 0 ? 1.0 / (arr.sigmas[i] * arr.sigmas[i]) : 1.0;
  return fit_coherence_impl(arr.values, std::move(w), model, arr.order, arr.bin_width_ns * 1e-9,
                            max_delay_ns * 1e-9, false, opts);
}

// ---------------------------------------------------------------------------
// Spectra

std::vector<double> five_point_grid_hz() { return {310.0e6, 312.0e6, 314.9e6, 315.4e6, 315.9e6}; }

FitResult fit_spectrum(std::span<const SpectrumPoint> points, const SpectrumFitOptions& opts) {
  const std::size_t m = points.size();
  std::vector<double> x(m), y(m), w(m);
  for (std::size_t i = 0; i < m; ++i) {
    x[i] = std::abs(points[i].Delta);
    y[i] = points[i].rate;
    w[i] = points[i].weight;
  }
  NllsProblem pr;
  pr.observations = y;
  pr.weights = w;
  const auto filters = opts.filters;
  const double inf = std::numeric_limits<double>::infinity();

  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  const double ymin = m ? *std::min_element(y.begin(), y.end()) : 0.0;

  if (opts.mode == SpectrumMode::FivePoint) {
    if (m < 5) throw DataError("five-point spectrum fit needs at least 5 points");
    const double omega_ac = opts.omega_ac;
    pr.model = [&x, filters, omega_ac](std::span<const double> p, std::span<double> out) {
      for (std::size_t i = 0; i < x.size(); ++i)
        out[i] = p[0] + models::filter_transmission(x[i], filters, omega_ac) * p[1];
    };
    const double ymax = *std::max_element(y.begin(), y.end());
    pr.names = {"Gamma_bkg", "Gamma_res"};
    pr.init = {std::max(ymin, 1e-9), std::max(ymax - ymin, 1e-9)};
    pr.lower = {0.0, 0.0};
    pr.upper = {inf, inf};
    FitResult fit = nlls_solve(pr);
    fit.extras["mode"] = "five_point";
    return fit;
  }

  const int npk = std::max(0, opts.n_gawbs_peaks);
  const std::size_t np = 3 + 3 * static_cast<std::size_t>(npk);
  if (m <= np) throw DataError("spectrum fit needs more points than parameters");

  // Local maxima of the rate over |Delta|.
  std::vector<std::size_t> peaks;
  for (std::size_t k = 0; k < m; ++k) {
    const double v = y[order[k]];
    const bool left = k == 0 || v >= y[order[k - 1]];
    const bool right = k + 1 == m || v >= y[order[k + 1]];
    if (left && right) peaks.push_back(order[k]);
  }
  double spacing = inf;
  for (std::size_t k = 1; k < m; ++k)
    if (x[order[k]] > x[order[k - 1]]) spacing = std::min(spacing, x[order[k]] - x[order[k - 1]]);
  if (!std::isfinite(spacing)) spacing = filters.kappa_fc1;

  std::size_t res_idx = order[0];
  double best = inf;
  for (auto p : peaks)
    if (std::abs(x[p] - opts.omega_ac) < best) {
      best = std::abs(x[p] - opts.omega_ac);
      res_idx = p;
    }
  const double omega_ac0 = x[res_idx];

  auto half_width = [&](std::size_t pk) {
    const double base = ymin;
    const double half = 0.5 * (y[pk] + base);
    double lo = x[pk], hi = x[pk];
    for (auto k : order)
      if (x[k] < x[pk] && y[k] < half) lo = x[k];
    for (auto it = order.rbegin(); it != order.rend(); ++it)
      if (x[*it] > x[pk] && y[*it] < half) hi = x[*it];
    return std::max(hi - lo, 2.0 * spacing);
  };

  std::vector<models::GawbsPeak> seeds = opts.peak_init;
  std::vector<std::size_t> gpeaks;
  for (auto p : peaks)
    if (std::abs(x[p] - omega_ac0) > 3.0 * filters.kappa_fc1) gpeaks.push_back(p);
  std::sort(gpeaks.begin(), gpeaks.end(), [&](std::size_t a, std::size_t b) { return y[a] > y[b]; });
  for (std::size_t k = seeds.size(); k < static_cast<std::size_t>(npk); ++k) {
    models::GawbsPeak g;
    if (k < gpeaks.size()) {
      g.omega_G = x[gpeaks[k]];
      g.Gamma_G = std::max(y[gpeaks[k]] - ymin, 1e-9);
      g.kappa_G = half_width(gpeaks[k]);
    } else {
      g.omega_G = x[order[m - 1]];
      g.Gamma_G = 1e-9;
      g.kappa_G = 4.0 * spacing;
    }
    seeds.push_back(g);
  }

  pr.model = [&x, filters, npk](std::span<const double> p, std::span<double> out) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      double r = p[0] + models::filter_transmission(x[i], filters, p[2]) * p[1];
      for (int k = 0; k < npk; ++k) {
        const models::GawbsPeak g{p[4 + 3 * k], p[5 + 3 * k], p[3 + 3 * k]};
        r += models::gawbs_lorentzian(x[i], g) * g.Gamma_G;
      }
      out[i] = r;
    }
  };
  pr.names = {"Gamma_bkg", "Gamma_res", "omega_ac"};
  pr.init = {std::max(ymin, 1e-9), std::max(y[res_idx] - ymin, 1e-9), omega_ac0};
  pr.lower = {0.0, 0.0, omega_ac0 - 10.0 * filters.kappa_fc1};
  pr.upper = {inf, inf, omega_ac0 + 10.0 * filters.kappa_fc1};
  for (int k = 0; k < npk; ++k) {
    const std::string s = std::to_string(k + 1);
    pr.names.insert(pr.names.end(), {"Gamma_G" + s, "omega_G" + s, "kappa_G" + s});
    const auto& g = seeds[static_cast<std::size_t>(k)];
    pr.init.insert(pr.init.end(), {std::max(g.Gamma_G, 1e-9), g.omega_G, g.kappa_G});
    pr.lower.insert(pr.lower.end(), {0.0, 0.0, 1e-3 * spacing});
    pr.upper.insert(pr.upper.end(), {inf, inf, inf});
  }
  FitResult fit = nlls_solve(pr);
  fit.extras["mode"] = "full";
  json unresolved = json::array();
  for (int k = 0; k < npk; ++k)
    if (fit.values[5 + 3 * static_cast<std::size_t>(k)] < spacing) unresolved.push_back(k + 1);
  fit.extras["gawbs_unresolved"] = unresolved;
  fit.extras["grid_spacing"] = spacing;
  if (!unresolved.empty()) fit.identifiable = false;
  return fit;
}

// ---------------------------------------------------------------------------
// Power and temperature sweeps

FitResult fit_power_sweep(std::span<const PowerSweep> sweeps, const PowerFitOptions& opts) {
  if (sweeps.empty()) throw DataError("power-sweep fit needs at least one sweep");
  std::vector<double> y, w;
  for (const auto& s : sweeps) {
    if (s.points.empty()) throw DataError("empty power sweep");
    for (const auto& p : s.points) {
      y.push_back(p.R_AS);
      y.push_back(p.R_S);
      w.push_back(p.sigma_AS > 0 ? 1.0 / (p.sigma_AS * p.sigma_AS) : 1.0);
      w.push_back(p.sigma_S > 0 ? 1.0 / (p.sigma_S * p.sigma_S) : 1.0);
    }
  }
  const bool have_sigmas = std::any_of(sweeps.begin(), sweeps.end(), [](const PowerSweep& s) {
    return std::any_of(s.points.begin(), s.points.end(), [](const PowerPoint& p) { return p.sigma_AS > 0; });
  });

  const std::vector<std::string> globals{"T_MC", "beta", "k", "g0"};
  const std::vector<double> global_seed{opts.link.T_MC, opts.link.beta_heat, opts.link.k_exp, opts.cavity.g0};
  std::vector<bool> is_fixed(4, false);
  for (const auto& f : opts.fixed) {
    const auto it = std::find(globals.begin(), globals.end(), f);
    if (it == globals.end()) throw ConfigError("unknown power-sweep parameter '" + f + "'");
    is_fixed[static_cast<std::size_t>(it - globals.begin())] = true;
  }

  NllsProblem pr;
  std::vector<std::size_t> free_map;  // position in the full global vector
  for (std::size_t g = 0; g < 4; ++g)
    if (!is_fixed[g]) {
      free_map.push_back(g);
      pr.names.push_back(globals[g]);
      pr.init.push_back(global_seed[g]);
    }
  const double inf = std::numeric_limits<double>::infinity();
  const std::vector<double> lo_g{1e-4, 0.0, -0.9, 0.0};
  const std::vector<double> hi_g{10.0, 1e3, 20.0, inf};
  for (auto g : free_map) {
    pr.lower.push_back(lo_g[g]);
    pr.upper.push_back(hi_g[g]);
  }
  for (std::size_t s = 0; s < sweeps.size(); ++s) {
    pr.names.push_back("eta_det" + std::to_string(s + 1));
    pr.init.push_back(s < opts.eta_init.size() ? opts.eta_init[s] : 0.1);
    pr.lower.push_back(0.0);
    pr.upper.push_back(inf);
  }

  const auto base_cavity = opts.cavity;
  const auto base_link = opts.link;
  const std::size_t nfree = free_map.size();
  pr.model = [&, base_cavity, base_link, global_seed, free_map, nfree](std::span<const double> p, std::span<double> out) {
    std::vector<double> gv = global_seed;
    for (std::size_t i = 0; i < nfree; ++i) gv[free_map[i]] = p[i];
    models::ThermalLink link = base_link;
    link.T_MC = gv[0];
    link.beta_heat = gv[1];
    link.k_exp = gv[2];
    models::CavityParams cav = base_cavity;
    cav.g0 = gv[3];
    std::size_t o = 0;
    for (std::size_t s = 0; s < sweeps.size(); ++s) {
      const double eta = p[nfree + s];
      for (const auto& pt : sweeps[s].points) {
        const auto red = models::backaction_occupancy(pt.P_in, cav, link, DriveSide::AntiStokes);
        const auto blue = models::backaction_occupancy(pt.P_in, cav, link, DriveSide::Stokes);
        out[o++] = eta * red.rate_per_eta;
        out[o++] = eta * blue.rate_per_eta;
      }
    }
  };
  pr.observations = y;
  pr.weights = w;
  pr.options.scale_covariance = !have_sigmas;
  FitResult fit = nlls_solve(pr);

  models::ThermalLink link = base_link;
  std::vector<double> gv = global_seed;
  for (std::size_t i = 0; i < nfree; ++i) gv[free_map[i]] = fit.values[i];
  link.T_MC = gv[0];
  const double n_th0 = models::bose_occupancy(link.omega_ac, link.T_MC);
  fit.extras["n_th_zero_power"] = n_th0;
  if (!is_fixed[0]) {
    // dn/dT for the uncertainty on the zero-power occupancy
    const double x = models::kHbar * link.omega_ac / (models::kBoltzmann * link.T_MC);
    const double dndT = n_th0 * (n_th0 + 1.0) * x / link.T_MC;
    fit.extras["n_th_zero_power_sigma"] = dndT * fit.sigma("T_MC");
  }
  for (std::size_t g = 0; g < 4; ++g)
    if (is_fixed[g]) fit.extras["fixed_" + globals[g]] = global_seed[g];
  if (!fit.converged) fit.extras["note"] = "not converged; values are the last iterate";
  return fit;
}

FitResult fit_temperature_sweep(std::span<const TemperaturePoint> points, double omega_ac, double min_T_K) {
  std::vector<double> n, y, w;
  bool have_sigmas = false;
  for (const auto& p : points) {
    if (!(p.T_MC > min_T_K)) continue;
    const double occ = models::bose_occupancy(omega_ac, p.T_MC);
    n.push_back(occ);
    y.push_back(p.r_AS);
    w.push_back(p.sigma_AS > 0 ? 1.0 / (p.sigma_AS * p.sigma_AS) : 1.0);
    n.push_back(occ + 1.0);
    y.push_back(p.r_S);
    w.push_back(p.sigma_S > 0 ? 1.0 / (p.sigma_S * p.sigma_S) : 1.0);
    have_sigmas |= p.sigma_AS > 0 || p.sigma_S > 0;
  }
  if (y.size() < 4) throw DataError("temperature-sweep fit needs at least 2 points above the cutoff");
  NllsProblem pr;
  pr.model = [&n](std::span<const double> p, std::span<double> out) {
    for (std::size_t i = 0; i < n.size(); ++i) out[i] = p[0] * n[i];
  };
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < n.size(); ++i) {
    sxy += w[i] * n[i] * y[i];
    sxx += w[i] * n[i] * n[i];
  }
  pr.observations = y;
  pr.weights = w;
  pr.names = {"a"};
  pr.init = {sxx > 0 ? sxy / sxx : 1.0};
  pr.options.scale_covariance = !have_sigmas;
  FitResult fit = nlls_solve(pr);
  fit.extras["points_used"] = n.size() / 2;
  fit.extras["min_T_K"] = min_T_K;
  return fit;
}

}  // namespace phononcounts
