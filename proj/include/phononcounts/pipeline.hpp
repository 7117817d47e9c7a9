#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "phononcounts/config.hpp"

namespace phononcounts {

struct RunContext {
  std::string out_dir = ".";
  unsigned threads = 1;
  std::string format = "csv";  // tables as csv or json
  std::optional<std::uint64_t> seed;
};

/// 64-bit FNV-1a of a byte string / file, as 16 hex digits.
std::string fnv1a_hex(std::string_view bytes);
std::string file_checksum(const std::string& path);

// Every command writes its outputs under ctx.out_dir, plus <command>.json
// with the resolved config and checksums, and returns that summary.

json cmd_simulate(const PipelineConfig& cfg, const RunContext& ctx);
json cmd_condition(const std::string& in, const PipelineConfig& cfg, const RunContext& ctx);
json cmd_correlate(const std::string& in, const PipelineConfig& cfg, const RunContext& ctx);
/// kind: coherence | spectrum | power | temperature
json cmd_fit(const std::string& kind, const std::string& in, const PipelineConfig& cfg, const RunContext& ctx);
json cmd_postselect(const std::string& in, const PipelineConfig& cfg, const RunContext& ctx);
json cmd_modes(const PipelineConfig& cfg, const RunContext& ctx);

}  // namespace phononcounts
