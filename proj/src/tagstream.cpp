#include "phononcounts/tagstream.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <istream>
#include <iterator>
#include <ostream>
#include <sstream>

#include "phononcounts/errors.hpp"

namespace phononcounts {

std::string_view to_string(DriveSide side) {
  return side == DriveSide::AntiStokes ? "anti-stokes" : "stokes";
}

DriveSide parse_drive_side(std::string_view text) {
  if (text == "anti-stokes" || text == "antistokes" || text == "AS" || text == "red")
    return DriveSide::AntiStokes;
  if (text == "stokes" || text == "S" || text == "blue") return DriveSide::Stokes;
  throw ConfigError("unknown drive side '" + std::string(text) + "'");
}

std::string_view to_string(RejectionReason reason) {
  return reason == RejectionReason::Burst ? "burst" : "manual";
}

// ---------------------------------------------------------------------------

void require_sorted(std::span<const std::uint64_t> times, std::span<const std::uint8_t> channels) {
  for (std::size_t i = 1; i < times.size(); ++i) {
    if (times[i] < times[i - 1] || (times[i] == times[i - 1] && channels[i] < channels[i - 1])) {
      throw DataError("non-monotone timestamps at tag " + std::to_string(i) + " (" +
                      std::to_string(times[i - 1]) + " -> " + std::to_string(times[i]) + ")");
    }
  }
}

TagStream::TagStream(std::vector<std::uint64_t> times_ns, std::vector<std::uint8_t> channels,
                     std::uint64_t duration_ns, std::uint8_t channel_count, json metadata)
    : times_(std::move(times_ns)),
      channels_(std::move(channels)),
      duration_ns_(duration_ns),
      channel_count_(channel_count),
      metadata_(std::move(metadata)) {
  validate();
}

TagStream TagStream::from_unsorted(std::vector<Tag> tags, std::uint64_t duration_ns,
                                   std::uint8_t channel_count, json metadata) {
  std::sort(tags.begin(), tags.end());
  std::vector<std::uint64_t> times(tags.size());
  std::vector<std::uint8_t> channels(tags.size());
  for (std::size_t i = 0; i < tags.size(); ++i) {
    times[i] = tags[i].time_ns;
    channels[i] = tags[i].channel;
  }
  return TagStream(std::move(times), std::move(channels), duration_ns, channel_count,
                   std::move(metadata));
}

void TagStream::validate() const {
  if (times_.size() != channels_.size())
    throw DataError("timestamp and channel arrays differ in length");
  if (channel_count_ == 0) throw DataError("channel count must be positive");
  if (!metadata_.is_object()) throw DataError("stream metadata must be a JSON object");
  require_sorted(times_, channels_);
  if (!times_.empty() && times_.back() >= duration_ns_)
    throw DataError("timestamp " + std::to_string(times_.back()) + " outside [0, " +
                    std::to_string(duration_ns_) + ")");
  for (std::size_t i = 0; i < channels_.size(); ++i) {
    if (channels_[i] >= channel_count_)
      throw DataError("channel " + std::to_string(channels_[i]) + " at tag " + std::to_string(i) +
                      " outside declared channel set");
  }
}

TagStream TagStream::with_metadata(json metadata) const {
  TagStream copy = *this;
  copy.metadata_ = std::move(metadata);
  copy.validate();
  return copy;
}

double TagStream::mean_rate() const noexcept {
  if (duration_ns_ == 0) return 0.0;
  return static_cast<double>(times_.size()) / (static_cast<double>(duration_ns_) * 1e-9);
}

// ---------------------------------------------------------------------------
// Binary format

namespace {

template <typename T>
void put_le(std::string& buf, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i)
    buf.push_back(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xffU));
}

template <typename T>
T get_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return static_cast<T>(v);
}

constexpr std::array<char, 4> kMagic{'P', 'T', 'G', '1'};

}  // namespace

std::size_t write_tags(const TagStream& stream, std::ostream& out) {
  // Streams are validated on construction, but files are a trust boundary.
  require_sorted(stream.times(), stream.channels());

  const std::string meta = stream.metadata().dump();
  if (meta.size() > 0xffffffffULL) throw DataError("metadata block too large");

  std::string buf;
  buf.reserve(kTagHeaderBytes + kTagRecordBytes * stream.size() + meta.size() + 8);
  buf.append(kMagic.data(), kMagic.size());
  put_le<std::uint16_t>(buf, kTagFormatVersion);
  put_le<std::uint8_t>(buf, stream.channel_count());
  put_le<std::uint64_t>(buf, stream.duration_ns());
  const auto times = stream.times();
  const auto channels = stream.channels();
  for (std::size_t i = 0; i < times.size(); ++i) {
    put_le<std::uint64_t>(buf, times[i]);
    put_le<std::uint8_t>(buf, channels[i]);
  }
  put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(meta.size()));
  buf.append(meta);
  put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(meta.size()));

  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw DataError("write failure while writing tag stream");
  return buf.size();
}

TagStream read_tags(std::istream& in) {
  std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t size = bytes.size();

  if (size < kMagic.size() || !std::equal(kMagic.begin(), kMagic.end(), bytes.begin()))
    throw DataError("bad magic: not a PTG1 tag file");
  if (size < kTagHeaderBytes + 8) throw DataError("truncated header or metadata block");

  const auto version = get_le<std::uint16_t>(p + 4);
  if (version != kTagFormatVersion)
    throw DataError("unsupported tag file version " + std::to_string(version));
  const auto channel_count = get_le<std::uint8_t>(p + 6);
  const auto duration = get_le<std::uint64_t>(p + 7);

  const auto meta_len = get_le<std::uint32_t>(p + size - 4);
  if (static_cast<std::size_t>(meta_len) + 8 > size - kTagHeaderBytes)
    throw DataError("truncated record or metadata block");
  const std::size_t meta_begin = size - 4 - meta_len;
  if (get_le<std::uint32_t>(p + meta_begin - 4) != meta_len)
    throw DataError("truncated record or metadata block");
  const std::size_t records_bytes = meta_begin - 4 - kTagHeaderBytes;
  if (records_bytes % kTagRecordBytes != 0) throw DataError("truncated final record");

  const std::size_t n = records_bytes / kTagRecordBytes;
  std::vector<std::uint64_t> times(n);
  std::vector<std::uint8_t> channels(n);
  const unsigned char* r = p + kTagHeaderBytes;
  for (std::size_t i = 0; i < n; ++i, r += kTagRecordBytes) {
    times[i] = get_le<std::uint64_t>(r);
    channels[i] = r[8];
  }

  json meta;
  try {
    meta = json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(meta_begin), bytes.end() - 4);
  } catch (const json::parse_error& e) {
    throw DataError(std::string("corrupt metadata block: ") + e.what());
  }
  return TagStream(std::move(times), std::move(channels), duration, channel_count, std::move(meta));
}

std::size_t write_tags_file(const TagStream& stream, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  return write_tags(stream, out);
}

TagStream read_tags_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  return read_tags(in);
}

void write_tags_csv(const TagStream& stream, std::ostream& out) {
  const auto times = stream.times();
  const auto channels = stream.channels();
  for (std::size_t i = 0; i < times.size(); ++i)
    out << times[i] << ',' << static_cast<unsigned>(channels[i]) << '\n';
}

// ---------------------------------------------------------------------------

std::vector<DaqRecord> segment_records(const TagStream& stream, std::uint64_t record_ns) {
  if (record_ns == 0) throw ConfigError("record length must be positive");
  std::vector<DaqRecord> records;
  const std::uint64_t duration = stream.duration_ns();
  records.reserve(duration / record_ns + 1);
  for (std::uint64_t start = 0; start < duration; start += record_ns) {
    DaqRecord rec;
    rec.start_ns = start;
    rec.end_ns = std::min(duration, start + record_ns);
    rec.partial = rec.length_ns() < record_ns;
    records.push_back(rec);
  }
  return records;
}

std::pair<std::size_t, std::size_t> tag_range(const TagStream& stream, const DaqRecord& record) {
  const auto times = stream.times();
  const auto lo = std::lower_bound(times.begin(), times.end(), record.start_ns);
  const auto hi = std::lower_bound(lo, times.end(), record.end_ns);
  return {static_cast<std::size_t>(lo - times.begin()), static_cast<std::size_t>(hi - times.begin())};
}

}  // namespace phononcounts
