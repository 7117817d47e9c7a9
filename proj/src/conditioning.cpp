#include "phononcounts/conditioning.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "phononcounts/errors.hpp"

namespace phononcounts {

std::string_view to_string(BurstModel model) {
  return model == BurstModel::ThermalBoseEinstein ? "thermal" : "poisson";
}

BurstModel parse_burst_model(std::string_view text) {
  if (text == "thermal" || text == "ThermalBoseEinstein") return BurstModel::ThermalBoseEinstein;
  if (text == "poisson" || text == "Poisson") return BurstModel::Poisson;
  throw ConfigError("unknown burst model '" + std::string(text) + "'");
}

void BurstPolicy::validate() const {
  if (windows_ns.empty()) throw ConfigError("burst policy needs at least one window");
  for (std::size_t i = 0; i < windows_ns.size(); ++i) {
    if (windows_ns[i] == 0) throw ConfigError("burst windows must be positive");
    if (i > 0 && windows_ns[i] <= windows_ns[i - 1])
      throw ConfigError("burst windows must be strictly ascending");
  }
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw ConfigError("epsilon must lie in (0, 1)");
}

json ConditioningReport::to_json() const {
  json w = json::array();
  for (const auto& r : windows)
    w.push_back({{"window_ns", r.window_ns},
                 {"lambda", r.lambda},
                 {"n_intervals", r.n_intervals},
                 {"k_thr", r.k_thr},
                 {"records_flagged", r.records_flagged}});
  return {{"afterpulses_removed", afterpulses_removed},
          {"records_rejected", records_rejected},
          {"total_records", total_records},
          {"windows", w},
          {"rejected_records", rejected_records}};
}

AfterpulseResult filter_afterpulses(const TagStream& stream, std::uint64_t window_ns) {
  require_sorted(stream.times(), stream.channels());
  const auto times = stream.times();
  const auto channels = stream.channels();
  std::vector<bool> have(stream.channel_count(), false);
  std::vector<std::uint64_t> last(stream.channel_count(), 0);
  std::vector<std::uint64_t> kept_t;
  std::vector<std::uint8_t> kept_c;
  kept_t.reserve(times.size());
  kept_c.reserve(times.size());
  std::uint64_t removed = 0;
  for (std::size_t i = 0; i < times.size(); ++i) {
    const auto c = channels[i];
    if (have[c] && times[i] - last[c] < window_ns) {
      ++removed;
      continue;
    }
    have[c] = true;
    last[c] = times[i];
    kept_t.push_back(times[i]);
    kept_c.push_back(c);
  }
  json meta = stream.metadata();
  meta["afterpulse_filter"] = {{"window_ns", window_ns}, {"removed", removed}};
  return {TagStream(std::move(kept_t), std::move(kept_c), stream.duration_ns(),
                    stream.channel_count(), std::move(meta)),
          removed};
}

std::vector<std::uint64_t> count_distribution(const TagStream& stream, std::uint64_t window_ns) {
  if (window_ns == 0) throw ConfigError("window must be positive");
  const std::uint64_t n_windows = stream.duration_ns() / window_ns;
  std::vector<std::uint64_t> hist(1, 0);
  const auto times = stream.times();
  std::size_t i = 0;
  for (std::uint64_t w = 0; w < n_windows; ++w) {
    const std::uint64_t end = (w + 1) * window_ns;
    std::size_t k = 0;
    while (i < times.size() && times[i] < end) {
      ++i;
      ++k;
    }
    if (k >= hist.size()) hist.resize(k + 1, 0);
    ++hist[k];
  }
  return hist;
}

double log_count_probability(int k, double lambda, BurstModel model) {
  if (k < 0) return -std::numeric_limits<double>::infinity();
  if (lambda <= 0.0) return k == 0 ? 0.0 : -std::numeric_limits<double>::infinity();
  const double kd = k;
  if (model == BurstModel::ThermalBoseEinstein)
    return kd * std::log(lambda) - (kd + 1.0) * std::log1p(lambda);
  return kd * std::log(lambda) - lambda - std::lgamma(kd + 1.0);
}

int burst_threshold(double lambda, double n_intervals, double epsilon, BurstModel model) {
  if (!(lambda >= 0.0) || !(n_intervals >= 1.0) || !(epsilon > 0.0))
    throw ConfigError("burst_threshold needs lambda >= 0, n_intervals >= 1, epsilon > 0");
  if (lambda == 0.0) return 1;
  const double target = std::log(epsilon) - std::log(n_intervals);
  int k = 1;
  if (model == BurstModel::Poisson) k = std::max(1, static_cast<int>(std::floor(lambda)) + 1);
  while (log_count_probability(k, lambda, model) >= target) {
    ++k;
    if (k > 100'000'000) throw ConfigError("burst threshold search diverged");
  }
  return k;
}

std::pair<std::vector<DaqRecord>, ConditioningReport> reject_bursts(
    const TagStream& stream, std::vector<DaqRecord> records, const BurstPolicy& policy) {
  policy.validate();
  require_sorted(stream.times(), stream.channels());
  const auto times = stream.times();

  ConditioningReport report;
  report.total_records = records.size();

  std::uint64_t valid_ns = 0;
  std::uint64_t valid_tags = 0;
  std::vector<std::pair<std::size_t, std::size_t>> ranges(records.size());
  for (std::size_t r = 0; r < records.size(); ++r) {
    ranges[r] = tag_range(stream, records[r]);
    if (!records[r].valid) continue;
    valid_ns += records[r].length_ns();
    valid_tags += ranges[r].second - ranges[r].first;
  }
  const double rate = valid_ns > 0 ? static_cast<double>(valid_tags) / (valid_ns * 1e-9) : 0.0;

  for (const std::uint64_t window : policy.windows_ns) {
    WindowReport wr;
    wr.window_ns = window;
    wr.lambda = rate * static_cast<double>(window) * 1e-9;
    for (const auto& rec : records)
      if (rec.valid) wr.n_intervals += rec.length_ns() / window;
    wr.k_thr = burst_threshold(wr.lambda, std::max<double>(1.0, wr.n_intervals), policy.epsilon,
                               policy.model);

    for (std::size_t r = 0; r < records.size(); ++r) {
      auto& rec = records[r];
      if (!rec.valid) continue;
      const std::uint64_t n_int = rec.length_ns() / window;
      std::size_t i = ranges[r].first;
      const std::size_t stop = ranges[r].second;
      bool burst = false;
      for (std::uint64_t w = 0; w < n_int && !burst && i < stop; ++w) {
        const std::uint64_t end = rec.start_ns + (w + 1) * window;
        std::uint64_t k = 0;
        while (i < stop && times[i] < end) {
          ++i;
          ++k;
        }
        burst = k >= static_cast<std::uint64_t>(wr.k_thr);
      }
      if (burst) {
        rec.valid = false;
        rec.rejection = RejectionReason::Burst;
        ++wr.records_flagged;
        report.rejected_records.push_back(r);
      }
    }
    report.windows.push_back(wr);
  }
  std::sort(report.rejected_records.begin(), report.rejected_records.end());
  report.records_rejected = report.rejected_records.size();
  return {std::move(records), report};
}

json records_to_json(const std::vector<DaqRecord>& records, std::uint64_t record_ns) {
  json rejected = json::array();
  json reasons = json::array();
  for (std::size_t r = 0; r < records.size(); ++r) {
    if (records[r].valid) continue;
    rejected.push_back(r);
    reasons.push_back(records[r].rejection ? std::string(to_string(*records[r].rejection))
                                           : std::string("manual"));
  }
  return {{"record_ns", record_ns},
          {"count", records.size()},
          {"rejected", rejected},
          {"reasons", reasons}};
}

std::vector<DaqRecord> records_from_metadata(const TagStream& stream) {
  const json& meta = stream.metadata();
  if (!meta.contains("records")) return segment_records(stream);
  const json& rj = meta.at("records");
  try {
    auto records = segment_records(stream, rj.at("record_ns").get<std::uint64_t>());
    const auto& rejected = rj.at("rejected");
    const json& reasons = rj.contains("reasons") ? rj.at("reasons") : json::array();
    for (std::size_t i = 0; i < rejected.size(); ++i) {
      const auto r = rejected[i].get<std::size_t>();
      if (r >= records.size()) throw DataError("rejected record index out of range");
      records[r].valid = false;
      records[r].rejection = i < reasons.size() && reasons[i] == "burst" ? RejectionReason::Burst
                                                                         : RejectionReason::Manual;
    }
    return records;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed records metadata: ") + e.what());
  }
}

}  // namespace phononcounts
