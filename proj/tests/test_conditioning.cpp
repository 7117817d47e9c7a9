#include <cmath>

#include "doctest.h"
#include "phononcounts/conditioning.hpp"
#include "phononcounts/errors.hpp"
#include "phononcounts/simulator.hpp"

using namespace phononcounts;

namespace {

std::vector<std::uint64_t> times_of(const TagStream& s) { return {s.times().begin(), s.times().end()}; }

// straight enumeration, no log space
int threshold_oracle(double lambda, double N, double eps, bool thermal) {
  int k = thermal ? 1 : std::max(1, static_cast<int>(std::floor(lambda)) + 1);
  for (;; ++k) {
    const double p = thermal ? std::pow(lambda, k) / std::pow(1 + lambda, k + 1)
                             : std::exp(k * std::log(lambda) - lambda - std::lgamma(k + 1.0));
    if (N * p < eps) return k;
  }
}

}  // namespace

TEST_CASE("filter_afterpulses examples") {
  auto r = filter_afterpulses(TagStream({0, 24, 1000}, {0, 0, 0}, 2000));
  CHECK(times_of(r.stream) == std::vector<std::uint64_t>{0, 1000});
  CHECK(r.removed == 1);

  r = filter_afterpulses(TagStream({0, 60}, {0, 0}, 2000));
  CHECK(r.removed == 0);

  r = filter_afterpulses(TagStream({0, 24}, {0, 1}, 2000));
  CHECK(r.removed == 0);

  // comparison is to the previously kept tag, so 0, 30, 60 keeps 60
  r = filter_afterpulses(TagStream({0, 30, 60}, {0, 0, 0}, 2000));
  CHECK(times_of(r.stream) == std::vector<std::uint64_t>{0, 60});
}

TEST_CASE("filter_afterpulses is idempotent and only removes") {
  TagStream s = simulate_poisson(5e6, 20'000'000, 3);
  DetectorModel det;
  det.dead_time_ns = 0;
  det.afterpulse_prob = 0.2;
  s = apply_detector_artifacts(s, det, 4);
  const auto once = filter_afterpulses(s);
  const auto twice = filter_afterpulses(once.stream);
  CHECK(once.removed > 0);
  CHECK(twice.removed == 0);
  CHECK(times_of(twice.stream) == times_of(once.stream));  // metadata differs by the removed count
  CHECK(once.stream.size() + once.removed == s.size());
  // kept tags are a subsequence
  std::size_t j = 0;
  for (std::size_t i = 0; i < s.size() && j < once.stream.size(); ++i)
    if (s.times()[i] == once.stream.times()[j] && s.channels()[i] == once.stream.channels()[j]) ++j;
  CHECK(j == once.stream.size());
}

TEST_CASE("count_distribution: empty and Poisson streams") {
  auto h = count_distribution(TagStream({}, {}, 10'000), 3'000);
  REQUIRE(h.size() >= 1);
  CHECK(h[0] == 3);
  for (std::size_t k = 1; k < h.size(); ++k) CHECK(h[k] == 0);

  const double lambda = 0.5;
  const std::uint64_t w = 1'000;
  const TagStream s = simulate_poisson(lambda / (w * 1e-9), 2'000'000'000ULL, 8);
  h = count_distribution(s, w);
  const double N = 2e6;
  for (int k = 0; k < 5; ++k) {
    const double p = std::exp(k * std::log(lambda) - lambda - std::lgamma(k + 1.0));
    const double got = k < static_cast<int>(h.size()) ? static_cast<double>(h[k]) : 0.0;
    CHECK(std::abs(got - N * p) < 5 * std::sqrt(N * p * (1 - p)));
  }
}

TEST_CASE("count_distribution: thermal stream follows Bose-Einstein counts") {
  SimPlan p;
  p.detected_sideband_rate = 1e5;
  p.duration_ns = 20'000'000'000ULL;
  p.seed = 12;
  const TagStream s = simulate_stream(p);
  const std::uint64_t w = 1'000;  // well inside the 45 us coherence time
  const auto h = count_distribution(s, w);
  double N = 0;
  for (auto c : h) N += static_cast<double>(c);
  const double lambda = s.mean_rate() * w * 1e-9;
  for (int k = 1; k <= 3; ++k) {
    const double pth = std::pow(lambda, k) / std::pow(1 + lambda, k + 1);
    const double pp = std::exp(k * std::log(lambda) - lambda - std::lgamma(k + 1.0));
    const double got = static_cast<double>(h.at(k)) / N;
    CHECK(got == doctest::Approx(pth).epsilon(0.06));
    if (k >= 2) CHECK(got > 1.3 * pp);
  }
}

TEST_CASE("burst_threshold examples") {
  CHECK(burst_threshold(1.51e-3, 1.6e9, 0.1) == 4);
  CHECK(burst_threshold(0.0, 1e6, 0.1) == 1);
  CHECK(burst_threshold(0.1, 1e6, 0.1) == 7);
  CHECK(threshold_oracle(0.1, 1e6, 0.1, true) == 7);
  CHECK_THROWS_AS(burst_threshold(0.1, 0.5, 0.1), ConfigError);
}

TEST_CASE("burst_threshold agrees with direct enumeration over a grid") {
  for (double lambda : {1e-4, 1e-3, 7.5e-3, 0.05, 0.3, 0.9, 2.5, 10.0})
    for (double N : {1.0, 1e3, 1e6, 1e9})
      for (double eps : {0.01, 0.1, 0.5}) {
        CHECK(burst_threshold(lambda, N, eps) == threshold_oracle(lambda, N, eps, true));
        CHECK(burst_threshold(lambda, N, eps, BurstModel::Poisson) ==
              threshold_oracle(lambda, N, eps, false));
      }
}

TEST_CASE("burst_threshold monotonicity and thermal dominance") {
  const std::vector<double> lambdas{1e-4, 1e-3, 1e-2, 0.1, 0.5, 0.9};
  const std::vector<double> Ns{1e2, 1e4, 1e6, 1e8, 1e10};
  const std::vector<double> epss{0.5, 0.1, 0.01, 1e-3};
  for (auto model : {BurstModel::ThermalBoseEinstein, BurstModel::Poisson})
    for (double N : Ns)
      for (double eps : epss) {
        int prev = 0;
        for (double l : lambdas) {
          const int k = burst_threshold(l, N, eps, model);
          CHECK(k >= prev);
          prev = k;
        }
      }
  for (double l : lambdas) {
    int prevN = 0;
    for (double N : Ns) {
      const int k = burst_threshold(l, N, 0.1);
      CHECK(k >= prevN);
      prevN = k;
    }
    int preve = 0;
    for (double eps : epss) {  // decreasing eps
      const int k = burst_threshold(l, 1e6, eps);
      CHECK(k >= preve);
      preve = k;
    }
    for (double N : Ns)
      for (double eps : epss)
        CHECK(burst_threshold(l, N, eps) >= burst_threshold(l, N, eps, BurstModel::Poisson));
  }
}

TEST_CASE("reject_bursts: injected burst record is invalidated") {
  SimPlan p;
  p.detected_sideband_rate = 0.0;
  p.background_rate = 2500.0;
  p.duration_ns = 900'000'000;
  p.seed = 14;
  TagStream clean = simulate_stream(p);
  auto [recs0, rep0] = reject_bursts(clean, segment_records(clean), BurstPolicy{});
  CHECK(rep0.records_rejected == 0);

  // 1000x the rate for 50 us inside record 4
  std::vector<Tag> tags;
  for (std::size_t i = 0; i < clean.size(); ++i) tags.push_back({clean.times()[i], clean.channels()[i]});
  for (std::uint64_t t = 0; t < 50'000; t += 400) tags.push_back({4 * 90'000'000ULL + 1'000'000 + t, 0});
  const TagStream dirty = TagStream::from_unsorted(tags, clean.duration_ns());
  auto [recs, rep] = reject_bursts(dirty, segment_records(dirty), BurstPolicy{});
  CHECK(rep.rejected_records == std::vector<std::size_t>{4});
  CHECK_FALSE(recs[4].valid);
  CHECK(recs[4].rejection == RejectionReason::Burst);
  for (const auto& w : rep.windows)
    CHECK(w.k_thr == burst_threshold(w.lambda, static_cast<double>(w.n_intervals), 0.1));
}

TEST_CASE("reject_bursts: a single 5-count window with k_thr = 4") {
  SimPlan p;
  p.detected_sideband_rate = 0.0;
  p.background_rate = 2500.0;
  p.duration_ns = 900'000'000;
  p.seed = 15;
  const TagStream clean = simulate_stream(p);
  std::vector<Tag> tags;
  for (std::size_t i = 0; i < clean.size(); ++i) tags.push_back({clean.times()[i], clean.channels()[i]});
  const std::uint64_t base = 7 * 90'000'000ULL + 3'000 * 1000;  // window-aligned inside record 7
  for (int i = 0; i < 5; ++i) tags.push_back({base + 100 + 500 * static_cast<std::uint64_t>(i), 1});
  const TagStream s = TagStream::from_unsorted(tags, clean.duration_ns());
  BurstPolicy pol;
  pol.windows_ns = {3'000};
  auto [recs, rep] = reject_bursts(s, segment_records(s), pol);
  REQUIRE(rep.windows.size() == 1);
  CHECK(rep.windows[0].k_thr == 4);
  CHECK(rep.rejected_records == std::vector<std::size_t>{7});
  CHECK(rep.total_records == 10);
}

TEST_CASE("reject_bursts: clean Poisson stream, false rejections bounded by epsilon") {
  // 1e4 records of 1 ms
  const TagStream s = simulate_poisson(2500.0, 10'000'000'000ULL, 16);
  const auto records = segment_records(s, 1'000'000);
  REQUIRE(records.size() == 10'000);
  BurstPolicy pol;
  pol.model = BurstModel::Poisson;
  auto [recs, rep] = reject_bursts(s, records, pol);
  // design: expected rejections per window < epsilon, so < 0.5 over five windows
  CHECK(rep.records_rejected <= 3);
  pol.model = BurstModel::ThermalBoseEinstein;
  auto [recs2, rep2] = reject_bursts(s, records, pol);
  CHECK(rep2.records_rejected <= rep.records_rejected);
}

TEST_CASE("records metadata roundtrip") {
  const TagStream s({}, {}, 270'000'000);
  auto recs = segment_records(s);
  recs[1].valid = false;
  recs[1].rejection = RejectionReason::Burst;
  json meta = s.metadata();
  meta["records"] = records_to_json(recs, kDefaultRecordNs);
  CHECK(records_from_metadata(s.with_metadata(meta)) == recs);
}

TEST_CASE("policy validation") {
  BurstPolicy p;
  p.windows_ns = {10, 5};
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p.windows_ns = {5, 10};
  p.epsilon = 1.0;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  CHECK(parse_burst_model(to_string(BurstModel::Poisson)) == BurstModel::Poisson);
}
