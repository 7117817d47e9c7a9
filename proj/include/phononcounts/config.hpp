#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "phononcounts/conditioning.hpp"
#include "phononcounts/correlator.hpp"
#include "phononcounts/fitting.hpp"
#include "phononcounts/models.hpp"
#include "phononcounts/postselect.hpp"
#include "phononcounts/simulator.hpp"

namespace phononcounts {

/// Simulated drive-power scan: one tag file per power, with occupancy, decay
/// rate and count rate taken from the backaction model.
struct PowerSweepSim {
  std::vector<double> powers_w;
  double eta_det = 0.1;
  models::CavityParams cavity;
  models::ThermalLink link;
};

struct ConditionSettings {
  std::uint64_t afterpulse_window_ns = 50;
  BurstPolicy burst;
};

struct CorrelateSettings {
  std::vector<int> orders{2};
  std::uint64_t bin_width_ns = 2'000;
  std::uint64_t max_delay_ns = 1'000'000;
  ChannelMode mode = ChannelMode::AllPairs;
  /// Background-to-sideband ratio; 0 leaves the coherences uncorrected.
  double epsilon = 0.0;
  /// "poisson": anchors (rate w)^(n-1); "far": mean of bins beyond far_threshold_ns.
  std::string plateau = "poisson";
  std::optional<double> far_threshold_ns;
  /// Order 4: first-delay bins at which 2-D slices are written.
  std::vector<std::size_t> slice_bins{0};
};

struct FitSettings {
  CoherenceFitOptions coherence;
  SpectrumFitOptions spectrum;
  PowerFitOptions power;
  double temperature_omega_ac = kTwoPi * 315.3e6;
  double temperature_min_K = 0.05;
};

struct PostselectSettings {
  HeraldSpec herald;
  std::optional<DriveSide> side;  // default: from the tag file
  std::vector<std::string> curves{"rate", "g2"};
};

struct ModesSettings {
  models::GawbsModel gawbs;
  int m_max = 30;
};

struct PipelineConfig {
  SimPlan simulate;
  std::uint64_t record_ns = kDefaultRecordNs;  // DAq record length of simulated files
  std::optional<PowerSweepSim> power_sweep;
  ConditionSettings condition;
  CorrelateSettings correlate;
  FitSettings fit;
  PostselectSettings postselect;
  ModesSettings modes;

  void validate() const;
};

/// Strict parse: unknown keys and wrong types raise ConfigError. Missing keys
/// keep their defaults.
PipelineConfig parse_config(const json& j);
PipelineConfig load_config(const std::string& path);

/// Fully resolved configuration, parseable by parse_config.
json to_json(const PipelineConfig& cfg);

SimPlan sim_plan_from_json(const json& j, SimPlan base = {});

}  // namespace phononcounts
