#include <cmath>
#include <sstream>

#include "doctest.h"
#include "phononcounts/correlator.hpp"
#include "phononcounts/errors.hpp"
#include "phononcounts/postselect.hpp"

using namespace phononcounts;

namespace {

HeraldSpec small_spec() {
  HeraldSpec s;
  s.herald_window_ns = 10'000;
  s.bin_width_ns = 10'000;
  s.normalization_delay_ns = 20'000;
  s.max_delay_ns = 40'000;
  return s;
}

const TagStream& thermal(DriveSide side) {
  static const TagStream as = [] {
    SimPlan p;
    p.duration_ns = 150'000'000'000ULL;
    p.seed = 101;
    return simulate_stream(p);
  }();
  static const TagStream st = [] {
    SimPlan p;
    p.side = DriveSide::Stokes;
    p.duration_ns = 150'000'000'000ULL;
    p.seed = 102;
    return simulate_stream(p);
  }();
  return side == DriveSide::AntiStokes ? as : st;
}

}  // namespace

TEST_CASE("count_chains on a hand-built stream") {
  const TagStream s({0, 5'000, 8'000, 30'000}, {0, 1, 0, 1}, 200'000);
  const auto cc = count_chains(s, segment_records(s), small_spec(), 2);
  CHECK(cc.anchors == 4);
  CHECK(cc.chains == std::vector<std::uint64_t>{4, 3});
  CHECK(cc.after[0] == std::vector<std::uint64_t>{3, 0, 2, 1});
  CHECK(cc.after[1] == std::vector<std::uint64_t>{1, 0, 3, 0});
}

TEST_CASE("count_chains: anchors need room for the whole chain and delay axis") {
  // reach = W + M = 50 us for chains of two; only the first tag fits
  const TagStream s({0, 5'000, 8'000, 30'000}, {0, 1, 0, 1}, 55'000);
  const auto cc = count_chains(s, segment_records(s), small_spec(), 2);
  CHECK(cc.anchors == 2);
  CHECK(cc.chains[0] == 2);
}

TEST_CASE("count_chains is independent of the worker count") {
  const TagStream& s = thermal(DriveSide::AntiStokes);
  HeraldSpec spec;
  const auto recs = segment_records(s);
  const auto one = count_chains(s, recs, spec, 3);
  spec.threads = 4;
  const auto four = count_chains(s, recs, spec, 3);
  CHECK(one.chains == four.chains);
  CHECK(one.after == four.after);
  CHECK(one.anchors == four.anchors);
}

TEST_CASE("herald spec validation") {
  HeraldSpec s;
  s.k = 0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s.k = 4;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s.k = 1;
  s.herald_window_ns = 0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = HeraldSpec{};
  CHECK(s.norm_delay() == std::llround(10.0 / s.gamma_bar * 1e9));
  CHECK(s.max_delay() == 2 * s.norm_delay());
  const TagStream empty({}, {}, 1'000'000'000);
  CHECK_THROWS_AS(conditioned_rate_curve(empty, segment_records(empty), s, DriveSide::AntiStokes), DataError);
}

TEST_CASE("rate curve bookkeeping and relaxation") {
  const TagStream& s = thermal(DriveSide::AntiStokes);
  HeraldSpec spec;
  const auto c = conditioned_rate_curve(s, segment_records(s), spec, DriveSide::AntiStokes);
  const auto cc = count_chains(s, segment_records(s), spec, 1);
  std::uint64_t sum = 0;
  for (auto v : cc.after[0]) sum += v;
  CHECK(c.conditioned_counts == sum);
  CHECK(c.herald_events == cc.chains[0]);
  CHECK(c.summary()["mean_counts_per_event"].get<double>() * static_cast<double>(c.herald_events) ==
        doctest::Approx(static_cast<double>(c.conditioned_counts)));
  CHECK(c.ideal_zero == 2.0);

  // start near 2, decay as 1 + exp(-gamma tau), plateau at 1
  CHECK(std::abs(c.first_bin - c.theory_binned[0]) < 4 * c.first_bin_sigma);
  std::size_t out = 0, n = 0;
  for (std::size_t b = 0; b < c.value.size(); ++b) {
    if (std::abs(c.value[b] - c.theory_binned[b]) > 3 * c.sigma[b]) ++out;
    if (c.tau_ns[b] > static_cast<double>(spec.norm_delay())) {
      CHECK(std::abs(c.value[b] - 1.0) < 4 * c.sigma[b]);
      ++n;
    }
  }
  CHECK(n > 0);
  CHECK(out <= 2);

  std::ostringstream csv;
  write_curve_csv(c, csv);
  CHECK(csv.str().rfind("tau_ns,value,sigma,theory,theory_binned,low_counts", 0) == 0);
}

TEST_CASE("rate curve k = 1, 2 agree with correlator histogram ratios") {
  const TagStream& s = thermal(DriveSide::AntiStokes);
  HeraldSpec spec;
  const auto recs = segment_records(s);
  const std::uint64_t W = spec.herald_window_ns, D = spec.norm_delay(), M = spec.max_delay();
  const std::size_t far0 = static_cast<std::size_t>((D + W - 1) / W);

  HistogramOptions o;
  o.bin_width_ns = W;
  o.max_delay_ns = M;
  const auto h2 = coincidence_histogram(s, recs, o);
  double far = 0.0;
  for (std::size_t b = far0; b < h2.axis_len; ++b) far += static_cast<double>(h2.counts[b]);
  far /= static_cast<double>(h2.axis_len - far0);
  const auto c1 = conditioned_rate_curve(s, recs, spec, DriveSide::AntiStokes);
  for (std::size_t b = 0; b < 5; ++b)
    CHECK(std::abs(c1.value[b] - static_cast<double>(h2.counts[b]) / far) < 3 * c1.sigma[b]);

  o.order = 3;
  const auto h3 = coincidence_histogram(s, recs, o);
  double far3 = 0.0;
  for (std::size_t b = far0; b < h3.axis_len; ++b) far3 += static_cast<double>(h3.counts[h3.index(0, b)]);
  far3 /= static_cast<double>(h3.axis_len - far0);
  spec.k = 2;
  const auto c2 = conditioned_rate_curve(s, recs, spec, DriveSide::AntiStokes);
  for (std::size_t b = 0; b < 5; ++b)
    CHECK(std::abs(c2.value[b] - static_cast<double>(h3.counts[h3.index(0, b)]) / far3) < 3 * c2.sigma[b]);
  CHECK(c2.ideal_zero == 3.0);
}

TEST_CASE("Stokes side heralding has the same shape") {
  const TagStream& s = thermal(DriveSide::Stokes);
  HeraldSpec spec;
  const auto c = conditioned_rate_curve(s, segment_records(s), spec, DriveSide::Stokes);
  CHECK(std::abs(c.first_bin - c.theory_binned[0]) < 4 * c.first_bin_sigma);
  spec.bin_width_ns = 50'000;
  const auto g = conditioned_g2_curve(s, segment_records(s), spec, DriveSide::Stokes);
  CHECK(std::abs(g.first_bin - g.theory_binned[0]) < 4 * g.first_bin_sigma);
}

TEST_CASE("conditional g2 curve starts near 3/2 and relaxes to 1") {
  const TagStream& s = thermal(DriveSide::AntiStokes);
  HeraldSpec spec;
  spec.bin_width_ns = 50'000;
  const auto g = conditioned_g2_curve(s, segment_records(s), spec, DriveSide::AntiStokes);
  CHECK(g.ideal_zero == doctest::Approx(1.5));
  CHECK(g.theory_binned[0] < 1.5);
  CHECK(std::abs(g.first_bin - g.theory_binned[0]) < 4 * g.first_bin_sigma);
  CHECK(g.first_bin_corrected == doctest::Approx(g.first_bin * 1.5 / g.theory_binned[0]));
  for (std::size_t b = 0; b < g.value.size(); ++b)
    if (g.tau_ns[b] > static_cast<double>(spec.norm_delay())) CHECK(std::abs(g.value[b] - 1.0) < 4 * g.sigma[b]);
  // order-5 theory is outside the closed forms
  spec.k = 3;
  const auto g3 = conditioned_g2_curve(s, segment_records(s), spec, DriveSide::AntiStokes);
  CHECK(std::isnan(g3.theory_binned[0]));
}
