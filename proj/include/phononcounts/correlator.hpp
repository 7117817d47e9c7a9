#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "phononcounts/tagstream.hpp"

namespace phononcounts {

/// all-pairs: any detectors; cross-only: consecutive clicks of a tuple must
/// come from different detectors.
enum class ChannelMode { AllPairs, CrossOnly };

std::string_view to_string(ChannelMode mode);
ChannelMode parse_channel_mode(std::string_view text);

/// n-fold coincidence counts binned in the n-1 consecutive delays.
///
/// Counts are stored row-major with the last delay axis fastest. Only anchor
/// clicks whose full delay window fits inside their record are used, so every
/// anchor sees the same exposure; `anchors` counts them.
struct CoincidenceHistogram {
  int order = 2;
  std::uint64_t bin_width_ns = 0;
  std::uint64_t max_delay_ns = 0;
  std::size_t axis_len = 0;
  ChannelMode mode = ChannelMode::AllPairs;
  std::vector<std::uint64_t> counts;
  std::uint64_t total_tags_used = 0;  // tags inside valid records
  std::uint64_t anchors = 0;
  std::uint64_t exposure_ns = 0;  // summed length of valid records
  std::optional<double> normalization;

  [[nodiscard]] int dims() const noexcept { return order - 1; }
  [[nodiscard]] std::size_t size() const noexcept { return counts.size(); }
  [[nodiscard]] std::size_t index(std::size_t i) const { return i; }
  [[nodiscard]] std::size_t index(std::size_t i, std::size_t j) const { return i * axis_len + j; }
  [[nodiscard]] std::size_t index(std::size_t i, std::size_t j, std::size_t k) const {
    return (i * axis_len + j) * axis_len + k;
  }
  [[nodiscard]] double bin_center_ns(std::size_t i) const {
    return (static_cast<double>(i) + 0.5) * static_cast<double>(bin_width_ns);
  }
  /// Mean click rate inside valid records, per ns.
  [[nodiscard]] double tag_rate_per_ns() const;
  /// Expected count per bin for an uncorrelated stream with the same rate:
  /// anchors * (rate * bin width)^(n-1).
  [[nodiscard]] double poisson_plateau() const;

  bool operator==(const CoincidenceHistogram&) const = default;
};

struct HistogramOptions {
  int order = 2;
  std::uint64_t bin_width_ns = 2'000;
  std::uint64_t max_delay_ns = 1'000'000;
  ChannelMode mode = ChannelMode::AllPairs;
  unsigned threads = 1;
};

CoincidenceHistogram coincidence_histogram(const TagStream& stream,
                                           const std::vector<DaqRecord>& records,
                                           const HistogramOptions& opts);

/// Normalized coherence values on the histogram grid.
struct CoherenceArray {
  int order = 2;
  std::uint64_t bin_width_ns = 0;
  std::size_t axis_len = 0;
  std::vector<double> values;
  std::vector<double> sigmas;

  [[nodiscard]] double at(std::size_t i) const { return values[i]; }
  [[nodiscard]] double at(std::size_t i, std::size_t j) const { return values[i * axis_len + j]; }
  [[nodiscard]] double at(std::size_t i, std::size_t j, std::size_t k) const {
    return values[(i * axis_len + j) * axis_len + k];
  }
};

CoherenceArray plateau_normalize(const CoincidenceHistogram& hist, double A);

/// Mean count over bins whose every delay starts at or beyond threshold_ns.
double far_bin_plateau(const CoincidenceHistogram& hist, double threshold_ns);

/// 2-D slice of an order-4 array with one delay axis held at `index`.
CoherenceArray slice_order4(const CoherenceArray& g4, int fixed_axis, std::size_t index);

struct BackgroundRatio {
  double epsilon = 0.0;
  bool in_typical_band = true;  // 0.04 <= epsilon <= 0.2
};

BackgroundRatio estimate_epsilon(double background_rate, double sideband_rate);

// Forward mixing of a sideband coherence with uncorrelated background at
// ratio eps, and its exact inverse. Lower orders enter as already-true values.
double mix_g2(double g2, double eps);
double correct_g2(double g2_exp, double eps);
/// g2s = {g2(t1), g2(t2), g2(t1+t2)}
double mix_g3(double g3, const std::array<double, 3>& g2s, double eps);
double correct_g3(double g3_exp, const std::array<double, 3>& g2s, double eps);
/// g3s = {g3(t1,t2), g3(t1+t2,t3), g3(t1,t2+t3), g3(t2,t3)}
/// g2s = {g2(t1), g2(t2), g2(t3), g2(t1+t2), g2(t2+t3), g2(t1+t2+t3)}
double mix_g4(double g4, const std::array<double, 4>& g3s, const std::array<double, 6>& g2s,
              double eps);
double correct_g4(double g4_exp, const std::array<double, 4>& g3s,
                  const std::array<double, 6>& g2s, double eps);

/// Corrects arrays of consecutive orders starting at 2, all on one bin width.
/// Order 3 needs the order-2 axis to be at least twice as long, order 4 needs
/// order 2 three times and order 3 twice as long. Sums of delays are read
/// from the bins they straddle, weighted by the triangular (Irwin-Hall)
/// distribution of a sum of uniform in-bin positions.
std::vector<CoherenceArray> correct_background(const std::vector<CoherenceArray>& measured,
                                               double eps);

// Export
void write_histogram_csv(const CoincidenceHistogram& hist, std::ostream& out);
void write_histogram_binary(const CoincidenceHistogram& hist, std::ostream& out);
CoincidenceHistogram read_histogram_binary(std::istream& in);
std::string serialize_histogram(const CoincidenceHistogram& hist);
void write_coherence_csv(const CoherenceArray& arr, std::ostream& out);

}  // namespace phononcounts
