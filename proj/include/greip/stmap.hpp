#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace greip {

// Spatial-temporal map: n_rois face regions by n_frames time steps by three
// color channels, values in [0,1], laid out [roi][frame][channel].
struct STMap {
  int n_rois = 0;
  int n_frames = 0;
  int n_channels = 0;
  double frame_rate_hz = 30.0;
  std::vector<double> values;

  STMap() = default;
  STMap(int rois, int frames, int channels, double fps = 30.0)
      : n_rois(rois),
        n_frames(frames),
        n_channels(channels),
        frame_rate_hz(fps),
        values(static_cast<std::size_t>(rois) * frames * channels, 0.0) {}

  double& at(int roi, int frame, int channel) {
    return values[static_cast<std::size_t>((roi * n_frames + frame) * n_channels +
                                           channel)];
  }
  double at(int roi, int frame, int channel) const {
    return values[static_cast<std::size_t>((roi * n_frames + frame) * n_channels +
                                           channel)];
  }

  void validate() const {
    if (n_rois <= 0 || n_frames <= 0)
      throw std::invalid_argument("stmap: non-positive dimensions");
    if (n_channels != 3)
      throw std::invalid_argument("stmap: expected 3 color channels");
    if (!(frame_rate_hz > 0.0))
      throw std::invalid_argument("stmap: non-positive frame rate");
    if (values.size() !=
        static_cast<std::size_t>(n_rois) * n_frames * n_channels)
      throw std::invalid_argument("stmap: value buffer does not match dims");
    for (double v : values) {
      if (!std::isfinite(v) || v < 0.0 || v > 1.0)
        throw std::invalid_argument("stmap: values must lie in [0,1]");
    }
  }
};

// One training or evaluation unit: a map window plus optional ground truth.
// hr_bpm is NaN when absent; bvp is empty when absent, otherwise one value
// per frame.
struct Sample {
  STMap stmap;
  std::vector<double> bvp;
  double hr_bpm = std::numeric_limits<double>::quiet_NaN();
  int domain_id = -1;
  std::string augment_tag;

  bool has_hr() const { return std::isfinite(hr_bpm); }
  bool has_bvp() const { return !bvp.empty(); }
};

// Per-(roi, channel) min-max normalization over the frame axis. A constant
// trace maps to 0.5. Idempotent: normalized rows pass through unchanged.
inline STMap normalize_rows(const STMap& in) {
  STMap out = in;
  for (int r = 0; r < in.n_rois; ++r) {
    for (int c = 0; c < in.n_channels; ++c) {
      double lo = in.at(r, 0, c), hi = in.at(r, 0, c);
      for (int t = 1; t < in.n_frames; ++t) {
        const double v = in.at(r, t, c);
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      if (hi == lo) {
        for (int t = 0; t < in.n_frames; ++t) out.at(r, t, c) = 0.5;
      } else {
        const double span = hi - lo;
        for (int t = 0; t < in.n_frames; ++t)
          out.at(r, t, c) = (in.at(r, t, c) - lo) / span;
      }
    }
  }
  return out;
}

// Frame-axis crop [start, start + length).
inline STMap window(const STMap& in, int start, int length = 256) {
  if (start < 0 || length <= 0 || start + length > in.n_frames)
    throw std::invalid_argument("window: range outside the map");
  STMap out(in.n_rois, length, in.n_channels, in.frame_rate_hz);
  for (int r = 0; r < in.n_rois; ++r)
    for (int t = 0; t < length; ++t)
      for (int c = 0; c < in.n_channels; ++c)
        out.at(r, t, c) = in.at(r, start + t, c);
  return out;
}

// Start offsets for sliding windows of `length` advancing by `step`.
inline std::vector<int> sliding_window_starts(int total_frames, int length = 256,
                                              int step = 5) {
  if (length <= 0 || step <= 0)
    throw std::invalid_argument("sliding_window_starts: non-positive argument");
  std::vector<int> starts;
  for (int s = 0; s + length <= total_frames; s += step) starts.push_back(s);
  return starts;
}

// ---------------------------------------------------------------------------
// STM1 container: little-endian, f32 payload.
//   "STM1" | u32 n_rois | u32 n_frames | u32 n_channels | u8 flags |
//   f32 frame_rate_hz | n_rois*n_frames*n_channels f32 values |
//   [flags bit0] f32 hr_bpm | [flags bit1] u32 length + length f32 bvp
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f32(std::string& buf, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(buf, bits);
}

class ByteReader {
 public:
  ByteReader(const std::string& data, const std::string& path)
      : data_(data), path_(path) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i]))
           << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(data_[pos_++]);
  }
  float f32() {
    const std::uint32_t bits = u32();
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }
  void magic(const char* expect) {
    need(4);
    if (std::memcmp(data_.data() + pos_, expect, 4) != 0)
      throw std::runtime_error(path_ + ": bad magic, not a " + expect + " file");
    pos_ += 4;
  }
  void done() {
    if (pos_ != data_.size())
      throw std::runtime_error(path_ + ": trailing bytes");
  }

 private:
  void need(std::size_t n) {
    if (pos_ + n > data_.size()) throw std::runtime_error(path_ + ": truncated file");
  }
  const std::string& data_;
  std::string path_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(path + ": cannot open");
  std::string data((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return data;
}

inline void write_file(const std::string& path, const std::string& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw std::runtime_error(path + ": write failed");
}

}  // namespace detail

inline void write_stm1(const std::string& path, const Sample& sample) {
  sample.stmap.validate();
  if (sample.has_bvp() &&
      static_cast<int>(sample.bvp.size()) != sample.stmap.n_frames)
    throw std::invalid_argument("stm1: bvp length must match frame count");
  std::string buf;
  buf.reserve(32 + sample.stmap.values.size() * 4 + sample.bvp.size() * 4);
  buf += "STM1";
  detail::put_u32(buf, static_cast<std::uint32_t>(sample.stmap.n_rois));
  detail::put_u32(buf, static_cast<std::uint32_t>(sample.stmap.n_frames));
  detail::put_u32(buf, static_cast<std::uint32_t>(sample.stmap.n_channels));
  std::uint8_t flags = 0;
  if (sample.has_hr()) flags |= 1;
  if (sample.has_bvp()) flags |= 2;
  buf.push_back(static_cast<char>(flags));
  detail::put_f32(buf, static_cast<float>(sample.stmap.frame_rate_hz));
  for (double v : sample.stmap.values) detail::put_f32(buf, static_cast<float>(v));
  if (sample.has_hr()) detail::put_f32(buf, static_cast<float>(sample.hr_bpm));
  if (sample.has_bvp()) {
    detail::put_u32(buf, static_cast<std::uint32_t>(sample.bvp.size()));
    for (double v : sample.bvp) detail::put_f32(buf, static_cast<float>(v));
  }
  detail::write_file(path, buf);
}

inline Sample read_stm1(const std::string& path) {
  const std::string data = detail::read_file(path);
  detail::ByteReader r(data, path);
  r.magic("STM1");
  const std::uint32_t rois = r.u32();
  const std::uint32_t frames = r.u32();
  const std::uint32_t channels = r.u32();
  if (rois == 0 || frames == 0 || channels != 3)
    throw std::runtime_error(path + ": bad dimensions");
  const std::uint8_t flags = r.u8();
  if (flags & ~0x3u) throw std::runtime_error(path + ": unknown flag bits");
  Sample s;
  s.stmap = STMap(static_cast<int>(rois), static_cast<int>(frames),
                  static_cast<int>(channels), r.f32());
  for (double& v : s.stmap.values) v = static_cast<double>(r.f32());
  if (flags & 1) s.hr_bpm = static_cast<double>(r.f32());
  if (flags & 2) {
    const std::uint32_t len = r.u32();
    s.bvp.resize(len);
    for (double& v : s.bvp) v = static_cast<double>(r.f32());
  }
  r.done();
  s.stmap.validate();
  return s;
}

// One CSV line per (roi, channel) trace, for eyeballing maps in other tools.
inline void write_stmap_csv(const std::string& path, const STMap& map) {
  std::string out = "roi,channel";
  for (int t = 0; t < map.n_frames; ++t) out += ",t" + std::to_string(t);
  out += "\n";
  char num[64];
  for (int r = 0; r < map.n_rois; ++r) {
    for (int c = 0; c < map.n_channels; ++c) {
      out += std::to_string(r) + "," + std::to_string(c);
      for (int t = 0; t < map.n_frames; ++t) {
        std::snprintf(num, sizeof(num), ",%.17g", map.at(r, t, c));
        out += num;
      }
      out += "\n";
    }
  }
  detail::write_file(path, out);
}

}  // namespace greip
