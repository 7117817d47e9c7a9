#pragma once

#include <complex>
#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include "phononcounts/tagstream.hpp"

namespace phononcounts {

inline constexpr double kTwoPi = 6.283185307179586476925286766559;

/// Thermally driven mechanical mode, simulated in the rotating frame.
struct OscillatorParams {
  double n_ac = 2.0;                     // mean phonon occupancy
  double gamma_ac_bar = kTwoPi * 3.5e3;  // total damping rate, rad/s
  double omega_ac = kTwoPi * 315.3e6;    // rad/s, informational only

  void validate() const;
};

struct OscState {
  std::complex<double> beta{0.0, 0.0};
  double t_ns = 0.0;
};

struct BurstInjection {
  double rate_per_s = 0.0;        // burst start rate
  double duration_ns = 50'000.0;  // length of one burst train
  double intra_rate_per_s = 0.0;  // click rate inside a burst
};

struct DetectorModel {
  std::uint64_t dead_time_ns = 50;
  std::uint64_t afterpulse_delay_ns = 24;
  double afterpulse_prob = 0.0;
  double dark_and_stray_rate = 0.0;  // counts/s, spread evenly over channels
  std::optional<BurstInjection> burst;
  double split_ratio = 0.5;  // fraction of signal routed to channel 0

  void validate() const;
};

/// How the intensity process is sampled while thinning.
///   Exact: the OU process is advanced exactly to every candidate time.
///   Grid:  the intensity is frozen on a dt_ns grid (reference mode).
enum class SamplingMode { Exact, Grid };

struct SimPlan {
  DriveSide side = DriveSide::AntiStokes;
  OscillatorParams osc;
  double detected_sideband_rate = 2000.0;  // mean detected counts/s
  double background_rate = 0.0;            // counts/s
  DetectorModel detector;
  std::uint64_t duration_ns = 10'000'000'000ULL;
  std::uint64_t seed = 1;
  std::optional<double> dt_ns;  // default min(0.01/gamma, 1 us)
  /// When set, the mean sideband rate is rate_per_quantum * n_eff instead of
  /// detected_sideband_rate, so that identical physics on both sides yields
  /// the sideband asymmetry in the rates.
  std::optional<double> rate_per_quantum;
  SamplingMode sampling = SamplingMode::Exact;
  std::uint8_t channel_count = 2;

  [[nodiscard]] double n_eff() const;
  [[nodiscard]] double sideband_rate() const;
  [[nodiscard]] double resolved_dt_ns() const;
  void validate() const;
};

json to_json(const SimPlan& plan);

/// Seed derivation for independent sub-streams.
std::uint64_t splitmix64(std::uint64_t x);

/// Exact update of the rotating-frame amplitude over dt seconds at the
/// occupancy in osc.n_ac.
OscState ou_step(const OscState& state, double dt_s, const OscillatorParams& osc,
                 std::mt19937_64& rng);

/// Draw from the stationary distribution (complex Gaussian, <|beta|^2> = n).
std::complex<double> stationary_draw(double n, std::mt19937_64& rng);

/// Bookkeeping of what the artifact stage did.
struct ArtifactLog {
  std::vector<Tag> afterpulses;  // accepted afterpulse clicks
  std::vector<Tag> parents;      // the click that spawned each afterpulse
  std::uint64_t dead_time_drops = 0;
  std::uint64_t burst_clicks = 0;
};

TagStream simulate_stream(const SimPlan& plan);

TagStream apply_detector_artifacts(const TagStream& stream, const DetectorModel& det,
                                   std::uint64_t seed, ArtifactLog* log = nullptr);

/// Homogeneous Poisson stream; handy as a coherent-source reference.
TagStream simulate_poisson(double rate_per_s, std::uint64_t duration_ns, std::uint64_t seed,
                           double split_ratio = 0.5, std::uint8_t channel_count = 2);

}  // namespace phononcounts
