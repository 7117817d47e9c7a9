#include "phononcounts/correlator.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <iterator>
#include <limits>
#include <ostream>
#include <sstream>
#include <thread>

#include "phononcounts/errors.hpp"

namespace phononcounts {

std::string_view to_string(ChannelMode mode) {
  return mode == ChannelMode::AllPairs ? "all-pairs" : "cross-only";
}

ChannelMode parse_channel_mode(std::string_view text) {
  if (text == "all-pairs" || text == "all") return ChannelMode::AllPairs;
  if (text == "cross-only" || text == "cross") return ChannelMode::CrossOnly;
  throw ConfigError("unknown channel mode '" + std::string(text) + "'");
}

double CoincidenceHistogram::tag_rate_per_ns() const {
  return exposure_ns > 0 ? static_cast<double>(total_tags_used) / static_cast<double>(exposure_ns)
                         : 0.0;
}

double CoincidenceHistogram::poisson_plateau() const {
  const double mu = tag_rate_per_ns() * static_cast<double>(bin_width_ns);
  return static_cast<double>(anchors) * std::pow(mu, order - 1);
}

namespace {

struct Span {
  std::size_t lo, hi;
  std::uint64_t end_ns;
};

template <int N, bool Cross>
void scan(const std::uint64_t* t, const std::uint8_t* ch, const Span& s, std::uint32_t w,
          std::uint64_t d, std::size_t L, std::uint64_t* counts, std::uint64_t& anchors) {
  const std::uint64_t reach = static_cast<std::uint64_t>(N - 1) * d;
  for (std::size_t i = s.lo; i < s.hi; ++i) {
    if (t[i] + reach > s.end_ns) break;
    ++anchors;
    for (std::size_t j = i + 1; j < s.hi && t[j] - t[i] < d; ++j) {
      if constexpr (Cross) {
        if (ch[j] == ch[i]) continue;
      }
      const std::size_t b1 = static_cast<std::uint32_t>(t[j] - t[i]) / w;
      if constexpr (N == 2) {
        ++counts[b1];
      } else {
        for (std::size_t k = j + 1; k < s.hi && t[k] - t[j] < d; ++k) {
          if constexpr (Cross) {
            if (ch[k] == ch[j]) continue;
          }
          const std::size_t b2 = static_cast<std::uint32_t>(t[k] - t[j]) / w;
          if constexpr (N == 3) {
            ++counts[b1 * L + b2];
          } else {
            const std::size_t row = (b1 * L + b2) * L;
            for (std::size_t m = k + 1; m < s.hi && t[m] - t[k] < d; ++m) {
              if constexpr (Cross) {
                if (ch[m] == ch[k]) continue;
              }
              ++counts[row + static_cast<std::uint32_t>(t[m] - t[k]) / w];
            }
          }
        }
      }
    }
  }
}

using ScanFn = void (*)(const std::uint64_t*, const std::uint8_t*, const Span&, std::uint32_t,
                        std::uint64_t, std::size_t, std::uint64_t*, std::uint64_t&);

ScanFn pick_scan(int order, ChannelMode mode) {
  const bool cross = mode == ChannelMode::CrossOnly;
  switch (order) {
    case 2: return cross ? scan<2, true> : scan<2, false>;
    case 3: return cross ? scan<3, true> : scan<3, false>;
    case 4: return cross ? scan<4, true> : scan<4, false>;
    default: throw ConfigError("histogram order must be 2, 3 or 4");
  }
}

}  // namespace

CoincidenceHistogram coincidence_histogram(const TagStream& stream,
                                           const std::vector<DaqRecord>& records,
                                           const HistogramOptions& opts) {
  require_sorted(stream.times(), stream.channels());
  const ScanFn fn = pick_scan(opts.order, opts.mode);
  if (opts.bin_width_ns == 0) throw ConfigError("bin width must be positive");
  if (opts.max_delay_ns == 0) throw ConfigError("max delay must be positive");
  if (opts.max_delay_ns > std::numeric_limits<std::uint32_t>::max())
    throw ConfigError("max delay must stay below 2^32 ns");

  std::uint64_t nominal = 0;
  for (const auto& r : records) nominal = std::max(nominal, r.length_ns());
  const std::uint64_t reach = static_cast<std::uint64_t>(opts.order - 1) * opts.max_delay_ns;
  if (!records.empty() && reach >= nominal)
    throw ConfigError("(order - 1) * max_delay exceeds the record length");

  CoincidenceHistogram h;
  h.order = opts.order;
  h.bin_width_ns = opts.bin_width_ns;
  h.max_delay_ns = opts.max_delay_ns;
  h.axis_len = static_cast<std::size_t>((opts.max_delay_ns + opts.bin_width_ns - 1) / opts.bin_width_ns);
  h.mode = opts.mode;
  std::size_t total = 1;
  for (int d = 0; d < h.dims(); ++d) total *= h.axis_len;
  if (total > (std::size_t{1} << 28)) throw ConfigError("histogram too large (axis_len^(n-1) > 2^28)");
  h.counts.assign(total, 0);

  std::vector<Span> spans;
  for (const auto& r : records) {
    if (!r.valid) continue;
    const auto [lo, hi] = tag_range(stream, r);
    spans.push_back({lo, hi, r.end_ns});
    h.total_tags_used += hi - lo;
    h.exposure_ns += r.length_ns();
  }

  const std::uint64_t* t = stream.times().data();
  const std::uint8_t* ch = stream.channels().data();
  const auto w = static_cast<std::uint32_t>(std::min<std::uint64_t>(opts.bin_width_ns,
                                                                    std::numeric_limits<std::uint32_t>::max()));
  const unsigned workers =
      std::max(1u, std::min<unsigned>(opts.threads, static_cast<unsigned>(std::max<std::size_t>(spans.size(), 1))));

  if (workers == 1) {
    for (const auto& s : spans) fn(t, ch, s, w, opts.max_delay_ns, h.axis_len, h.counts.data(), h.anchors);
    return h;
  }

  // Contiguous record chunks of roughly equal tag count; merge is integer
  // addition, so the result does not depend on the split.
  std::vector<std::size_t> bounds{0};
  const double per = static_cast<double>(h.total_tags_used) / workers;
  std::uint64_t acc = 0;
  for (std::size_t i = 0; i < spans.size(); ++i) {
    acc += spans[i].hi - spans[i].lo;
    if (bounds.size() < workers && static_cast<double>(acc) >= per * static_cast<double>(bounds.size()))
      bounds.push_back(i + 1);
  }
  while (bounds.size() <= workers) bounds.push_back(spans.size());

  std::vector<std::vector<std::uint64_t>> partial(workers);
  std::vector<std::uint64_t> anchors(workers, 0);
  std::vector<std::thread> pool;
  for (unsigned k = 0; k < workers; ++k) {
    pool.emplace_back([&, k] {
      partial[k].assign(total, 0);
      for (std::size_t i = bounds[k]; i < bounds[k + 1]; ++i)
        fn(t, ch, spans[i], w, opts.max_delay_ns, h.axis_len, partial[k].data(), anchors[k]);
    });
  }
  for (auto& th : pool) th.join();
  for (unsigned k = 0; k < workers; ++k) {
    for (std::size_t b = 0; b < total; ++b) h.counts[b] += partial[k][b];
    h.anchors += anchors[k];
  }
  return h;
}

CoherenceArray plateau_normalize(const CoincidenceHistogram& hist, double A) {
  if (!(A > 0.0) || !std::isfinite(A)) throw ConfigError("plateau A must be finite and > 0");
  CoherenceArray out;
  out.order = hist.order;
  out.bin_width_ns = hist.bin_width_ns;
  out.axis_len = hist.axis_len;
  out.values.resize(hist.counts.size());
  out.sigmas.resize(hist.counts.size());
  for (std::size_t i = 0; i < hist.counts.size(); ++i) {
    const auto c = static_cast<double>(hist.counts[i]);
    out.values[i] = c / A;
    out.sigmas[i] = std::sqrt(std::max(c, 1.0)) / A;
  }
  return out;
}

double far_bin_plateau(const CoincidenceHistogram& hist, double threshold_ns) {
  const auto first = static_cast<std::size_t>(std::ceil(threshold_ns / static_cast<double>(hist.bin_width_ns)));
  if (first >= hist.axis_len) throw DataError("no histogram bins beyond the far-delay threshold");
  const std::size_t L = hist.axis_len;
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t b = 0; b < hist.counts.size(); ++b) {
    std::size_t rest = b;
    bool far = true;
    for (int d = 0; d < hist.dims(); ++d) {
      if (rest % L < first) far = false;
      rest /= L;
    }
    if (!far) continue;
    sum += static_cast<double>(hist.counts[b]);
    ++n;
  }
  return sum / static_cast<double>(n);
}

CoherenceArray slice_order4(const CoherenceArray& g4, int fixed_axis, std::size_t index) {
  if (g4.order != 4) throw ConfigError("slice_order4 needs an order-4 array");
  if (fixed_axis < 0 || fixed_axis > 2) throw ConfigError("fixed axis must be 0, 1 or 2");
  const std::size_t L = g4.axis_len;
  if (index >= L) throw ConfigError("slice index outside the delay axis");
  CoherenceArray out;
  out.order = 3;  // two free delay axes
  out.bin_width_ns = g4.bin_width_ns;
  out.axis_len = L;
  out.values.resize(L * L);
  out.sigmas.resize(L * L);
  for (std::size_t a = 0; a < L; ++a)
    for (std::size_t b = 0; b < L; ++b) {
      std::size_t i = a, j = b, k = index;
      if (fixed_axis == 0) {
        i = index; j = a; k = b;
      } else if (fixed_axis == 1) {
        i = a; j = index; k = b;
      }
      const std::size_t src = (i * L + j) * L + k;
      out.values[a * L + b] = g4.values[src];
      out.sigmas[a * L + b] = g4.sigmas.empty() ? 0.0 : g4.sigmas[src];
    }
  return out;
}

BackgroundRatio estimate_epsilon(double background_rate, double sideband_rate) {
  if (!(sideband_rate > 0.0)) throw DataError("sideband rate must be > 0 to form epsilon");
  if (!(background_rate >= 0.0)) throw DataError("background rate must be >= 0");
  const double eps = background_rate / sideband_rate;
  return {eps, eps >= 0.04 && eps <= 0.2};
}

double mix_g2(double g2, double eps) {
  const double s = 1.0 + eps;
  return (g2 + 2.0 * eps + eps * eps) / (s * s);
}

double correct_g2(double g2_exp, double eps) {
  return g2_exp + 2.0 * (g2_exp - 1.0) * eps + (g2_exp - 1.0) * eps * eps;
}

double mix_g3(double g3, const std::array<double, 3>& g2s, double eps) {
  const double s = 1.0 + eps;
  const double lower = eps * (g2s[0] + g2s[1] + g2s[2]) + 3.0 * eps * eps + eps * eps * eps;
  return (g3 + lower) / (s * s * s);
}

double correct_g3(double g3_exp, const std::array<double, 3>& g2s, double eps) {
  const double s = 1.0 + eps;
  const double lower = eps * (g2s[0] + g2s[1] + g2s[2]) + 3.0 * eps * eps + eps * eps * eps;
  return g3_exp * s * s * s - lower;
}

namespace {

double g4_lower(const std::array<double, 4>& g3s, const std::array<double, 6>& g2s, double eps) {
  double s3 = 0.0, s2 = 0.0;
  for (double v : g3s) s3 += v;
  for (double v : g2s) s2 += v;
  const double e2 = eps * eps;
  return eps * s3 + e2 * s2 + 4.0 * e2 * eps + e2 * e2;
}

}  // namespace

double mix_g4(double g4, const std::array<double, 4>& g3s, const std::array<double, 6>& g2s,
              double eps) {
  const double s = 1.0 + eps;
  return (g4 + g4_lower(g3s, g2s, eps)) / (s * s * s * s);
}

double correct_g4(double g4_exp, const std::array<double, 4>& g3s,
                  const std::array<double, 6>& g2s, double eps) {
  const double s = 1.0 + eps;
  return g4_exp * s * s * s * s - g4_lower(g3s, g2s, eps);
}

namespace {

// Value of a 1-D array at the sum of two (three) in-bin delays.
double sum2(const CoherenceArray& g, std::size_t idx) {
  if (idx + 1 >= g.axis_len) return std::numeric_limits<double>::quiet_NaN();
  return 0.5 * (g.values[idx] + g.values[idx + 1]);
}

double sum3(const CoherenceArray& g, std::size_t idx) {
  if (idx + 2 >= g.axis_len) return std::numeric_limits<double>::quiet_NaN();
  return (g.values[idx] + 4.0 * g.values[idx + 1] + g.values[idx + 2]) / 6.0;
}

// 2-D array with its first (or second) delay being a sum of two in-bin delays.
double sum2_first(const CoherenceArray& g, std::size_t a, std::size_t b) {
  const std::size_t L = g.axis_len;
  if (a + 1 >= L || b >= L) return std::numeric_limits<double>::quiet_NaN();
  return 0.5 * (g.values[a * L + b] + g.values[(a + 1) * L + b]);
}

double sum2_second(const CoherenceArray& g, std::size_t a, std::size_t b) {
  const std::size_t L = g.axis_len;
  if (a >= L || b + 1 >= L) return std::numeric_limits<double>::quiet_NaN();
  return 0.5 * (g.values[a * L + b] + g.values[a * L + b + 1]);
}

void require_lower(const CoherenceArray& lower, const CoherenceArray& upper, std::size_t factor) {
  if (lower.bin_width_ns != upper.bin_width_ns)
    throw DataError("missing lower-order slices: bin widths differ between orders");
  if (lower.axis_len < factor * upper.axis_len)
    throw DataError("missing lower-order slices: order-" + std::to_string(lower.order) +
                    " axis must be at least " + std::to_string(factor) + "x the order-" +
                    std::to_string(upper.order) + " axis");
}

}  // namespace

std::vector<CoherenceArray> correct_background(const std::vector<CoherenceArray>& measured,
                                               double eps) {
  if (!(eps >= 0.0) || !std::isfinite(eps)) throw ConfigError("epsilon must be finite and >= 0");
  if (measured.empty()) return {};
  for (std::size_t i = 0; i < measured.size(); ++i)
    if (measured[i].order != static_cast<int>(i) + 2)
      throw DataError("missing lower-order slices: arrays must be orders 2, 3, ... in sequence");

  std::vector<CoherenceArray> out = measured;
  const double s = 1.0 + eps;

  // order 2
  {
    auto& g2 = out[0];
    for (std::size_t i = 0; i < g2.values.size(); ++i) {
      g2.values[i] = correct_g2(measured[0].values[i], eps);
      if (i < g2.sigmas.size()) g2.sigmas[i] *= s * s;
    }
  }
  if (out.size() > 1) {
    const auto& g2 = out[0];
    auto& g3 = out[1];
    require_lower(g2, g3, 2);
    const std::size_t L = g3.axis_len;
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < L; ++j) {
        const std::size_t b = i * L + j;
        const double g12 = sum2(g2, i + j);
        g3.values[b] = correct_g3(measured[1].values[b], {g2.values[i], g2.values[j], g12}, eps);
        if (b < g3.sigmas.size()) g3.sigmas[b] *= s * s * s;
      }
  }
  if (out.size() > 2) {
    // The order-3 values needed at summed delays reach beyond the order-3
    // axis used above, so correct them on the longer lower-order grid.
    const auto& g2 = out[0];
    auto& g4 = out[2];
    require_lower(g2, g4, 3);
    require_lower(measured[1], g4, 2);
    CoherenceArray g3 = measured[1];
    const std::size_t L3 = g3.axis_len;
    for (std::size_t i = 0; i < L3; ++i)
      for (std::size_t j = 0; j < L3; ++j) {
        const std::size_t b = i * L3 + j;
        const double g12 = sum2(g2, i + j);
        g3.values[b] = std::isnan(g12) ? g12
                                       : correct_g3(measured[1].values[b],
                                                    {g2.values[i], g2.values[j], g12}, eps);
      }
    const std::size_t L = g4.axis_len;
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < L; ++j)
        for (std::size_t k = 0; k < L; ++k) {
          const std::size_t b = (i * L + j) * L + k;
          const std::array<double, 4> g3s{g3.values[i * L3 + j], sum2_first(g3, i + j, k),
                                          sum2_second(g3, i, j + k), g3.values[j * L3 + k]};
          const std::array<double, 6> g2s{g2.values[i],    g2.values[j],     g2.values[k],
                                          sum2(g2, i + j), sum2(g2, j + k), sum3(g2, i + j + k)};
          for (double v : g3s)
            if (std::isnan(v)) throw DataError("missing lower-order slices for order-4 correction");
          for (double v : g2s)
            if (std::isnan(v)) throw DataError("missing lower-order slices for order-4 correction");
          g4.values[b] = correct_g4(measured[2].values[b], g3s, g2s, eps);
          if (b < g4.sigmas.size()) g4.sigmas[b] *= s * s * s * s;
        }
  }
  if (out.size() > 3) throw ConfigError("background correction supports orders up to 4");
  return out;
}

// ---------------------------------------------------------------------------
// Export

void write_histogram_csv(const CoincidenceHistogram& hist, std::ostream& out) {
  for (int d = 0; d < hist.dims(); ++d) out << "tau" << d + 1 << "_lo_ns,";
  out << "count\n";
  const std::size_t L = hist.axis_len;
  for (std::size_t b = 0; b < hist.counts.size(); ++b) {
    std::array<std::size_t, 3> idx{};
    std::size_t rest = b;
    for (int d = hist.dims() - 1; d >= 0; --d) {
      idx[static_cast<std::size_t>(d)] = rest % L;
      rest /= L;
    }
    for (int d = 0; d < hist.dims(); ++d) out << idx[static_cast<std::size_t>(d)] * hist.bin_width_ns << ',';
    out << hist.counts[b] << '\n';
  }
}

namespace {

template <typename T>
void put(std::string& buf, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i)
    buf.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xffU));
}

template <typename T>
T get(const std::string& buf, std::size_t& pos) {
  if (pos + sizeof(T) > buf.size()) throw DataError("truncated histogram file");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
  pos += sizeof(T);
  return static_cast<T>(v);
}

}  // namespace

std::string serialize_histogram(const CoincidenceHistogram& hist) {
  std::string buf = "PCH1";
  put<std::uint8_t>(buf, static_cast<std::uint8_t>(hist.order));
  put<std::uint8_t>(buf, hist.mode == ChannelMode::AllPairs ? 0 : 1);
  put<std::uint64_t>(buf, hist.bin_width_ns);
  put<std::uint64_t>(buf, hist.max_delay_ns);
  put<std::uint64_t>(buf, hist.axis_len);
  put<std::uint64_t>(buf, hist.total_tags_used);
  put<std::uint64_t>(buf, hist.anchors);
  put<std::uint64_t>(buf, hist.exposure_ns);
  for (auto c : hist.counts) put<std::uint64_t>(buf, c);
  return buf;
}

void write_histogram_binary(const CoincidenceHistogram& hist, std::ostream& out) {
  const std::string buf = serialize_histogram(hist);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw DataError("write failure while writing histogram");
}

CoincidenceHistogram read_histogram_binary(std::istream& in) {
  const std::string buf{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  if (buf.size() < 4 || buf.compare(0, 4, "PCH1") != 0) throw DataError("bad magic: not a PCH1 histogram");
  std::size_t pos = 4;
  CoincidenceHistogram h;
  h.order = get<std::uint8_t>(buf, pos);
  h.mode = get<std::uint8_t>(buf, pos) == 0 ? ChannelMode::AllPairs : ChannelMode::CrossOnly;
  h.bin_width_ns = get<std::uint64_t>(buf, pos);
  h.max_delay_ns = get<std::uint64_t>(buf, pos);
  h.axis_len = get<std::uint64_t>(buf, pos);
  h.total_tags_used = get<std::uint64_t>(buf, pos);
  h.anchors = get<std::uint64_t>(buf, pos);
  h.exposure_ns = get<std::uint64_t>(buf, pos);
  if (h.order < 2 || h.order > 4) throw DataError("histogram order outside 2..4");
  std::size_t total = 1;
  for (int d = 0; d < h.dims(); ++d) total *= h.axis_len;
  if (buf.size() - pos != total * 8) throw DataError("truncated histogram file");
  h.counts.resize(total);
  for (auto& c : h.counts) c = get<std::uint64_t>(buf, pos);
  return h;
}

void write_coherence_csv(const CoherenceArray& arr, std::ostream& out) {
  const int dims = arr.order - 1;
  for (int d = 0; d < dims; ++d) out << "tau" << d + 1 << "_ns,";
  out << "value,sigma\n";
  const std::size_t L = arr.axis_len;
  for (std::size_t b = 0; b < arr.values.size(); ++b) {
    std::array<std::size_t, 3> idx{};
    std::size_t rest = b;
    for (int d = dims - 1; d >= 0; --d) {
      idx[static_cast<std::size_t>(d)] = rest % L;
      rest /= L;
    }
    for (int d = 0; d < dims; ++d)
      out << (static_cast<double>(idx[static_cast<std::size_t>(d)]) + 0.5) * static_cast<double>(arr.bin_width_ns) << ',';
    out << arr.values[b] << ',' << (b < arr.sigmas.size() ? arr.sigmas[b] : 0.0) << '\n';
  }
}

}  // namespace phononcounts
