#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"

namespace phononcounts {

using json = nlohmann::json;

/// Which sideband a stream was recorded on. A red-detuned drive produces
/// anti-Stokes photons (normally ordered phonon moments), a blue-detuned drive
/// produces Stokes photons (anti-normally ordered moments).
enum class DriveSide { AntiStokes, Stokes };

std::string_view to_string(DriveSide side);
DriveSide parse_drive_side(std::string_view text);

/// One detector click.
struct Tag {
  std::uint64_t time_ns = 0;
  std::uint8_t channel = 0;

  auto operator<=>(const Tag&) const = default;
};

/// Time-ordered detector clicks of one acquisition.
///
/// Storage is split into parallel timestamp and channel arrays so that the
/// correlator can scan timestamps contiguously. The invariants (sorted by
/// timestamp then channel, timestamps in [0, duration), channels below
/// channel_count) are validated on construction; a constructed stream is
/// immutable.
class TagStream {
 public:
  TagStream() = default;
  TagStream(std::vector<std::uint64_t> times_ns, std::vector<std::uint8_t> channels,
            std::uint64_t duration_ns, std::uint8_t channel_count = 2,
            json metadata = json::object());

  /// Sorts the tags before validating the remaining invariants.
  static TagStream from_unsorted(std::vector<Tag> tags, std::uint64_t duration_ns,
                                 std::uint8_t channel_count = 2,
                                 json metadata = json::object());

  [[nodiscard]] std::size_t size() const noexcept { return times_.size(); }
  [[nodiscard]] bool empty() const noexcept { return times_.empty(); }
  [[nodiscard]] std::uint64_t duration_ns() const noexcept { return duration_ns_; }
  [[nodiscard]] std::uint8_t channel_count() const noexcept { return channel_count_; }
  [[nodiscard]] std::span<const std::uint64_t> times() const noexcept { return times_; }
  [[nodiscard]] std::span<const std::uint8_t> channels() const noexcept { return channels_; }
  [[nodiscard]] const json& metadata() const noexcept { return metadata_; }
  [[nodiscard]] Tag operator[](std::size_t i) const { return {times_[i], channels_[i]}; }

  /// Copy of this stream with the metadata replaced.
  [[nodiscard]] TagStream with_metadata(json metadata) const;

  /// Mean click rate over the whole stream, in counts per second.
  [[nodiscard]] double mean_rate() const noexcept;

  bool operator==(const TagStream& other) const = default;

 private:
  void validate() const;

  std::vector<std::uint64_t> times_;
  std::vector<std::uint8_t> channels_;
  std::uint64_t duration_ns_ = 0;
  std::uint8_t channel_count_ = 2;
  json metadata_ = json::object();
};

/// Checks the ordering invariant on raw arrays; throws DataError("non-monotone ...").
void require_sorted(std::span<const std::uint64_t> times, std::span<const std::uint8_t> channels);

// ---------------------------------------------------------------------------
// Binary file format ("PTG1", little-endian)
//
//   offset  size  field
//   0       4     magic "PTG1"
//   4       2     version (u16, currently 1)
//   6       1     channel count (u8)
//   7       8     duration in ns (u64)
//   15      9*N   records: timestamp ns (u64), channel (u8)
//   ...     4     metadata length L (u32)
//   ...     L     metadata, UTF-8 JSON
//   ...     4     metadata length L again (u32), lets readers locate the block
// ---------------------------------------------------------------------------

inline constexpr std::uint16_t kTagFormatVersion = 1;
inline constexpr std::size_t kTagHeaderBytes = 15;
inline constexpr std::size_t kTagRecordBytes = 9;

/// Serializes a stream; returns the number of bytes written.
std::size_t write_tags(const TagStream& stream, std::ostream& out);
TagStream read_tags(std::istream& in);

std::size_t write_tags_file(const TagStream& stream, const std::string& path);
TagStream read_tags_file(const std::string& path);

/// One line per tag: "timestamp_ns,channel".
void write_tags_csv(const TagStream& stream, std::ostream& out);

// ---------------------------------------------------------------------------
// Acquisition records
// ---------------------------------------------------------------------------

enum class RejectionReason { Burst, Manual };

std::string_view to_string(RejectionReason reason);

/// One contiguous acquisition window [start_ns, end_ns).
struct DaqRecord {
  std::uint64_t start_ns = 0;
  std::uint64_t end_ns = 0;
  bool valid = true;
  bool partial = false;  // trailing record shorter than the nominal length
  std::optional<RejectionReason> rejection;

  [[nodiscard]] std::uint64_t length_ns() const noexcept { return end_ns - start_ns; }
  bool operator==(const DaqRecord&) const = default;
};

inline constexpr std::uint64_t kDefaultRecordNs = 90'000'000;

/// Tiles [0, duration) with records of record_ns; a shorter trailing record is
/// kept and flagged partial.
std::vector<DaqRecord> segment_records(const TagStream& stream,
                                       std::uint64_t record_ns = kDefaultRecordNs);

/// Index range [first, last) of the tags falling inside a record.
std::pair<std::size_t, std::size_t> tag_range(const TagStream& stream, const DaqRecord& record);

}  // namespace phononcounts
