#include "phononcounts/postselect.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <thread>

#include "phononcounts/errors.hpp"
#include "phononcounts/models.hpp"

namespace phononcounts {

std::uint64_t HeraldSpec::norm_delay() const {
  if (normalization_delay_ns) return *normalization_delay_ns;
  return static_cast<std::uint64_t>(std::llround(10.0 / gamma_bar * 1e9));
}

std::uint64_t HeraldSpec::max_delay() const { return max_delay_ns ? *max_delay_ns : 2 * norm_delay(); }

void HeraldSpec::validate() const {
  if (k < 1 || k > 3) throw ConfigError("herald k must be 1, 2 or 3");
  if (herald_window_ns == 0) throw ConfigError("herald_window_ns must be > 0");
  if (bin_width_ns == 0) throw ConfigError("bin_width_ns must be > 0");
  if (!(gamma_bar > 0.0) || !std::isfinite(gamma_bar)) throw ConfigError("gamma_bar must be > 0");
  if (norm_delay() == 0) throw ConfigError("normalization delay must be > 0");
  if (max_delay() <= norm_delay()) throw ConfigError("max delay must exceed the normalization delay");
  if (max_delay() < bin_width_ns) throw ConfigError("max delay shorter than one bin");
}

namespace {

struct ChainScan {
  std::span<const std::uint64_t> t;
  std::uint64_t W;
  std::uint64_t M;
  std::uint64_t b;
  std::size_t nbins;
  int max_chain;
  ChainCounts* out;

  // Chain of length c ends at index last; extend it and histogram followers.
  void visit(std::size_t last, int c, std::size_t end) {
    out->chains[static_cast<std::size_t>(c - 1)]++;
    auto& h = out->after[static_cast<std::size_t>(c - 1)];
    const std::uint64_t t0 = t[last];
    for (std::size_t j = last + 1; j < end; ++j) {
      const std::uint64_t d = t[j] - t0;
      if (d >= M) break;
      const std::size_t bin = static_cast<std::size_t>(d / b);
      if (bin < nbins) h[bin]++;
    }
    if (c == max_chain) return;
    for (std::size_t j = last + 1; j < end; ++j) {
      if (t[j] - t0 >= W) break;
      visit(j, c + 1, end);
    }
  }
};

void scan_records(const TagStream& stream, const std::vector<DaqRecord>& records, std::size_t r0,
                  std::size_t r1, const HeraldSpec& spec, int max_chain, ChainCounts& out) {
  const auto times = stream.times();
  const std::uint64_t W = spec.herald_window_ns;
  const std::uint64_t M = spec.max_delay();
  const std::uint64_t reach = static_cast<std::uint64_t>(max_chain - 1) * W + M;
  ChainScan scan{times, W, M, spec.bin_width_ns, out.after[0].size(), max_chain, &out};
  for (std::size_t r = r0; r < r1; ++r) {
    const auto& rec = records[r];
    if (!rec.valid || rec.length_ns() < reach) continue;
    const auto [first, last] = tag_range(stream, rec);
    for (std::size_t i = first; i < last; ++i) {
      if (times[i] + reach > rec.end_ns) break;
      out.anchors++;
      scan.visit(i, 1, last);
    }
  }
}

}  // namespace

ChainCounts count_chains(const TagStream& stream, const std::vector<DaqRecord>& records,
                         const HeraldSpec& spec, int max_chain) {
  spec.validate();
  if (max_chain < 1) throw ConfigError("max_chain must be >= 1");
  const std::uint64_t M = spec.max_delay();
  const std::size_t nbins = static_cast<std::size_t>((M + spec.bin_width_ns - 1) / spec.bin_width_ns);
  auto fresh = [&] {
    ChainCounts c;
    c.max_chain = max_chain;
    c.bin_width_ns = spec.bin_width_ns;
    c.max_delay_ns = M;
    c.chains.assign(static_cast<std::size_t>(max_chain), 0);
    c.after.assign(static_cast<std::size_t>(max_chain), std::vector<std::uint64_t>(nbins, 0));
    return c;
  };
  const unsigned nthreads =
      std::max(1u, std::min<unsigned>(spec.threads, static_cast<unsigned>(std::max<std::size_t>(records.size(), 1))));
  std::vector<ChainCounts> parts(nthreads, fresh());
  if (nthreads == 1) {
    scan_records(stream, records, 0, records.size(), spec, max_chain, parts[0]);
  } else {
    std::vector<std::thread> pool;
    const std::size_t per = (records.size() + nthreads - 1) / nthreads;
    for (unsigned w = 0; w < nthreads; ++w) {
      const std::size_t r0 = std::min(records.size(), w * per);
      const std::size_t r1 = std::min(records.size(), r0 + per);
      pool.emplace_back([&, r0, r1, w] { scan_records(stream, records, r0, r1, spec, max_chain, parts[w]); });
    }
    for (auto& th : pool) th.join();
  }
  ChainCounts total = fresh();
  for (const auto& p : parts) {
    total.anchors += p.anchors;
    for (int c = 0; c < max_chain; ++c) {
      total.chains[static_cast<std::size_t>(c)] += p.chains[static_cast<std::size_t>(c)];
      for (std::size_t b = 0; b < nbins; ++b)
        total.after[static_cast<std::size_t>(c)][b] += p.after[static_cast<std::size_t>(c)][b];
    }
  }
  return total;
}

namespace {

// Box average of g^(n); n = 1 is identically 1, n > 4 unavailable.
double box_g(int order, const std::vector<models::Interval>& box, double gamma) {
  if (order == 1) return 1.0;
  if (order > 4) return std::numeric_limits<double>::quiet_NaN();
  return models::thermal_coherence_box(order, box, gamma);
}

std::vector<models::Interval> herald_box(int n, double W_s, std::optional<models::Interval> tail = {}) {
  std::vector<models::Interval> box(static_cast<std::size_t>(n), models::Interval{0.0, W_s});
  if (tail) box.push_back(*tail);
  return box;
}

HeraldCurve curve_frame(HeraldCurve::Kind kind, const HeraldSpec& spec, DriveSide side, std::size_t nbins) {
  HeraldCurve c;
  c.kind = kind;
  c.k = spec.k;
  c.side = side;
  c.bin_width_ns = spec.bin_width_ns;
  c.herald_window_ns = spec.herald_window_ns;
  c.norm_delay_ns = spec.norm_delay();
  for (std::size_t b = 0; b < nbins; ++b) {
    const double lo = static_cast<double>(b * spec.bin_width_ns);
    const double hi = std::min(static_cast<double>((b + 1) * spec.bin_width_ns), static_cast<double>(spec.max_delay()));
    c.tau_ns.push_back(0.5 * (lo + hi));
  }
  return c;
}

models::Interval bin_interval(const HeraldSpec& spec, std::size_t b) {
  const double lo = static_cast<double>(b * spec.bin_width_ns) * 1e-9;
  const double hi = static_cast<double>(std::min<std::uint64_t>((b + 1) * spec.bin_width_ns, spec.max_delay())) * 1e-9;
  return {lo, hi};
}

void finish(HeraldCurve& c) {
  c.first_bin = c.value.empty() ? 0.0 : c.value[0];
  c.first_bin_sigma = c.sigma.empty() ? 0.0 : c.sigma[0];
  c.first_bin_corrected = c.first_bin * c.ideal_zero / c.theory_binned[0];
  c.chi2 = 0.0;
  c.dof = 0;
  for (std::size_t b = 0; b < c.value.size(); ++b) {
    if (!(c.sigma[b] > 0.0) || !std::isfinite(c.value[b]) || !std::isfinite(c.theory_binned[b])) continue;
    const double z = (c.value[b] - c.theory_binned[b]) / c.sigma[b];
    c.chi2 += z * z;
    c.dof++;
  }
}

}  // namespace

HeraldCurve conditioned_rate_curve(const TagStream& stream, const std::vector<DaqRecord>& records,
                                   const HeraldSpec& spec, DriveSide side) {
  const ChainCounts cc = count_chains(stream, records, spec, spec.k);
  const auto k = static_cast<std::size_t>(spec.k);
  const std::uint64_t events = cc.chains[k - 1];
  if (events == 0) throw DataError("no herald events");
  const auto& h = cc.after[k - 1];
  const std::size_t nbins = h.size();
  HeraldCurve c = curve_frame(HeraldCurve::Kind::Rate, spec, side, nbins);
  c.herald_events = events;
  for (auto v : h) c.conditioned_counts += v;

  // plateau: bins entirely beyond the normalization delay
  const std::uint64_t D = spec.norm_delay();
  std::uint64_t far = 0;
  double far_ns = 0.0;
  for (std::size_t b = 0; b < nbins; ++b) {
    if (b * spec.bin_width_ns < D) continue;
    far += h[b];
    far_ns += static_cast<double>(std::min<std::uint64_t>((b + 1) * spec.bin_width_ns, spec.max_delay()) -
                                  b * spec.bin_width_ns);
  }
  if (far == 0 || far_ns <= 0.0) throw DataError("no conditioned counts beyond the normalization delay");
  const double far_rate = static_cast<double>(far) / far_ns;

  const double W = static_cast<double>(spec.herald_window_ns) * 1e-9;
  const double denom = box_g(spec.k, herald_box(spec.k - 1, W), spec.gamma_bar);
  for (std::size_t b = 0; b < nbins; ++b) {
    const auto iv = bin_interval(spec, b);
    const double width_ns = (iv.hi - iv.lo) * 1e9;
    const double n = static_cast<double>(h[b]);
    const double ratio = n / width_ns / far_rate;
    c.value.push_back(ratio);
    c.sigma.push_back(h[b] > 0 ? ratio * std::sqrt(1.0 / n + 1.0 / static_cast<double>(far))
                               : std::sqrt(1.0 / static_cast<double>(far)) / (width_ns * far_rate));
    c.theory.push_back(1.0 + spec.k * std::exp(-spec.gamma_bar * c.tau_ns[b] * 1e-9));
    c.theory_binned.push_back(box_g(spec.k + 1, herald_box(spec.k - 1, W, iv), spec.gamma_bar) / denom);
    c.low_counts.push_back(h[b] < 100);
  }
  c.ideal_zero = 1.0 + spec.k;
  finish(c);
  return c;
}

HeraldCurve conditioned_g2_curve(const TagStream& stream, const std::vector<DaqRecord>& records,
                                 const HeraldSpec& spec, DriveSide side) {
  const ChainCounts cc = count_chains(stream, records, spec, spec.k + 1);
  const auto k = static_cast<std::size_t>(spec.k);
  const double Nk = static_cast<double>(cc.chains[k - 1]);
  const double Nk1 = static_cast<double>(cc.chains[k]);
  if (Nk == 0.0) throw DataError("no herald events");
  if (Nk1 == 0.0) throw DataError("no conditioned pairs inside the herald window");
  const auto& hk = cc.after[k - 1];
  const auto& hk1 = cc.after[k];
  const std::size_t nbins = hk.size();
  HeraldCurve c = curve_frame(HeraldCurve::Kind::G2, spec, side, nbins);
  c.herald_events = cc.chains[k - 1];
  for (auto v : hk) c.conditioned_counts += v;

  const double W = static_cast<double>(spec.herald_window_ns) * 1e-9;
  const double gk = box_g(spec.k, herald_box(spec.k - 1, W), spec.gamma_bar);
  const double gk1 = box_g(spec.k + 1, herald_box(spec.k, W), spec.gamma_bar);
  for (std::size_t b = 0; b < nbins; ++b) {
    const auto iv = bin_interval(spec, b);
    const double a = static_cast<double>(hk1[b]);
    const double d = static_cast<double>(hk[b]);
    const double v = (a > 0.0 && d > 0.0) ? a * Nk / (Nk1 * d) : std::numeric_limits<double>::quiet_NaN();
    c.value.push_back(v);
    c.sigma.push_back(std::isfinite(v) ? v * std::sqrt(1.0 / a + 1.0 / d + 1.0 / Nk + 1.0 / Nk1)
                                       : std::numeric_limits<double>::quiet_NaN());
    c.theory.push_back(spec.k <= 3 ? models::conditional_g2(spec.k, c.tau_ns[b] * 1e-9, spec.gamma_bar)
                                   : std::numeric_limits<double>::quiet_NaN());
    c.theory_binned.push_back(box_g(spec.k + 2, herald_box(spec.k, W, iv), spec.gamma_bar) * gk /
                              (gk1 * box_g(spec.k + 1, herald_box(spec.k - 1, W, iv), spec.gamma_bar)));
    c.low_counts.push_back(hk1[b] < 100);
  }
  c.ideal_zero = models::conditional_g2(spec.k, 0.0, spec.gamma_bar);
  finish(c);
  return c;
}

json HeraldCurve::summary() const {
  auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
  std::size_t low = 0;
  for (bool f : low_counts) low += f;
  return {{"kind", kind == Kind::Rate ? "rate" : "g2"},
          {"k", k},
          {"side", std::string(to_string(side))},
          {"bin_width_ns", bin_width_ns},
          {"herald_window_ns", herald_window_ns},
          {"normalization_delay_ns", norm_delay_ns},
          {"herald_events", herald_events},
          {"conditioned_counts", conditioned_counts},
          {"mean_counts_per_event", herald_events ? static_cast<double>(conditioned_counts) / static_cast<double>(herald_events) : 0.0},
          {"first_bin", num(first_bin)},
          {"first_bin_sigma", num(first_bin_sigma)},
          {"first_bin_corrected", num(first_bin_corrected)},
          {"ideal_zero_delay", num(ideal_zero)},
          {"first_bin_theory_binned", theory_binned.empty() ? json(nullptr) : num(theory_binned[0])},
          {"chi2", chi2},
          {"dof", dof},
          {"low_count_bins", low}};
}

void write_curve_csv(const HeraldCurve& c, std::ostream& out) {
  out << "tau_ns,value,sigma,theory,theory_binned,low_counts\n";
  out.precision(10);
  for (std::size_t b = 0; b < c.value.size(); ++b)
    out << c.tau_ns[b] << ',' << c.value[b] << ',' << c.sigma[b] << ',' << c.theory[b] << ','
        << c.theory_binned[b] << ',' << (c.low_counts[b] ? 1 : 0) << '\n';
}

}  // namespace phononcounts
