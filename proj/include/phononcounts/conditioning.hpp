#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "phononcounts/tagstream.hpp"

namespace phononcounts {

/// Null model for the number of clicks in a short window.
enum class BurstModel { ThermalBoseEinstein, Poisson };

std::string_view to_string(BurstModel model);
BurstModel parse_burst_model(std::string_view text);

struct BurstPolicy {
  std::vector<std::uint64_t> windows_ns{3'000, 10'000, 30'000, 100'000, 300'000};
  double epsilon = 0.1;
  BurstModel model = BurstModel::ThermalBoseEinstein;

  void validate() const;
};

struct WindowReport {
  std::uint64_t window_ns = 0;
  double lambda = 0.0;  // mean counts per window
  std::uint64_t n_intervals = 0;
  int k_thr = 0;
  std::uint64_t records_flagged = 0;  // newly invalidated by this window
};

struct ConditioningReport {
  std::uint64_t afterpulses_removed = 0;
  std::uint64_t records_rejected = 0;
  std::uint64_t total_records = 0;
  std::vector<WindowReport> windows;
  std::vector<std::size_t> rejected_records;

  [[nodiscard]] json to_json() const;
};

struct AfterpulseResult {
  TagStream stream;
  std::uint64_t removed = 0;
};

/// Per channel, drops any tag closer than window_ns to the previously kept
/// tag on the same channel.
AfterpulseResult filter_afterpulses(const TagStream& stream, std::uint64_t window_ns = 50);

/// hist[k] = number of consecutive disjoint windows holding exactly k tags.
/// Windows start at 0; a trailing partial window is dropped.
std::vector<std::uint64_t> count_distribution(const TagStream& stream, std::uint64_t window_ns);

/// Probability of k counts in a window with mean lambda, in log space.
double log_count_probability(int k, double lambda, BurstModel model);

/// Smallest k >= 1 with n_intervals * P(k, lambda) < epsilon. For the Poisson
/// model the search starts above the distribution's mode.
int burst_threshold(double lambda, double n_intervals, double epsilon,
                    BurstModel model = BurstModel::ThermalBoseEinstein);

/// Marks every valid record containing a window with >= k_thr counts as
/// invalid, for each window length in the policy. The click rate is taken
/// once from the valid records on entry.
std::pair<std::vector<DaqRecord>, ConditioningReport> reject_bursts(
    const TagStream& stream, std::vector<DaqRecord> records, const BurstPolicy& policy);

/// Records serialized into / recovered from stream metadata so that the
/// conditioning result travels with the tag file.
json records_to_json(const std::vector<DaqRecord>& records, std::uint64_t record_ns);
std::vector<DaqRecord> records_from_metadata(const TagStream& stream);

}  // namespace phononcounts
