#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <vector>

#include "phononcounts/simulator.hpp"
#include "phononcounts/tagstream.hpp"

namespace phononcounts {

/// k heralding clicks with every internal gap below herald_window_ns define a
/// herald event at the last of them. Every qualifying k-tuple counts.
struct HeraldSpec {
  int k = 1;
  std::uint64_t herald_window_ns = 10'000;
  std::uint64_t bin_width_ns = 10'000;
  /// Decay rate (rad/s) for the theory columns and the default "infinity".
  double gamma_bar = kTwoPi * 3.5e3;
  /// Delays beyond this are the plateau; default 10/gamma_bar.
  std::optional<std::uint64_t> normalization_delay_ns;
  /// End of the delay axis; default twice the normalization delay.
  std::optional<std::uint64_t> max_delay_ns;
  unsigned threads = 1;

  [[nodiscard]] std::uint64_t norm_delay() const;
  [[nodiscard]] std::uint64_t max_delay() const;
  void validate() const;
};

/// Chain counts from one pass over the stream.
///
/// chains[c-1] counts c-click tuples linked by gaps < W; after[c-1][b] counts
/// one further click at delay bin b after the last click of such a chain.
/// Anchors are first clicks with anchor + k W + max_delay inside their record.
struct ChainCounts {
  int max_chain = 0;
  std::uint64_t bin_width_ns = 0;
  std::uint64_t max_delay_ns = 0;
  std::uint64_t anchors = 0;
  std::vector<std::uint64_t> chains;
  std::vector<std::vector<std::uint64_t>> after;
};

ChainCounts count_chains(const TagStream& stream, const std::vector<DaqRecord>& records,
                         const HeraldSpec& spec, int max_chain);

struct HeraldCurve {
  enum class Kind { Rate, G2 };
  Kind kind = Kind::Rate;
  int k = 1;
  DriveSide side = DriveSide::AntiStokes;
  std::uint64_t bin_width_ns = 0;
  std::uint64_t herald_window_ns = 0;
  std::uint64_t norm_delay_ns = 0;
  std::vector<double> tau_ns;  // bin centers
  std::vector<double> value;
  std::vector<double> sigma;
  std::vector<double> theory;         // closed form at the bin center
  std::vector<double> theory_binned;  // averaged over herald window and bin
  std::vector<bool> low_counts;       // fewer than 100 conditioned counts
  std::uint64_t herald_events = 0;
  std::uint64_t conditioned_counts = 0;
  double first_bin = 0.0;
  double first_bin_sigma = 0.0;
  double first_bin_corrected = 0.0;  // measured * ideal(0) / binned theory
  double ideal_zero = 0.0;
  double chi2 = 0.0;
  std::size_t dof = 0;

  [[nodiscard]] json summary() const;
};

/// Post-herald click rate over its plateau. Anti-Stokes: n_-k(tau)/n_ac;
/// Stokes: (n_+k(tau)+1)/(n_ac+1). Both equal 1 + k exp(-gamma tau).
HeraldCurve conditioned_rate_curve(const TagStream& stream, const std::vector<DaqRecord>& records,
                                   const HeraldSpec& spec, DriveSide side);

/// g2 of the heralded state from chain counts:
/// C_{k+1}(tau) C_k / (C_{k+1} C_k(tau)).
HeraldCurve conditioned_g2_curve(const TagStream& stream, const std::vector<DaqRecord>& records,
                                 const HeraldSpec& spec, DriveSide side);

/// tau_ns,value,sigma,theory,theory_binned,low_counts
void write_curve_csv(const HeraldCurve& curve, std::ostream& out);

}  // namespace phononcounts
