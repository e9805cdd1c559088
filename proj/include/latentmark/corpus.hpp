#pragma once

// Seeded synthetic music-like corpus and 16-bit PCM mono WAV I/O.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "latentmark/core.hpp"

namespace latentmark {

enum class Partition { train, test };

inline const char* to_string(Partition p) { return p == Partition::train ? "train" : "test"; }

inline Partition partition_from_string(const std::string& s) {
  if (s == "train") return Partition::train;
  if (s == "test") return Partition::test;
  throw ParameterError("corpus: partition must be 'train' or 'test', got '" + s + "'");
}

struct CorpusSpec {
  std::int64_t seed = 1;
  int n_signals = 200;
  double duration_s = 10.0;
  int sample_rate = 16000;
  Partition partition = Partition::train;
  // Range of the random fundamental. Moving it produces a corpus with a
  // different timbre distribution from the same generator.
  double f0_lo_hz = 80.0;
  double f0_hi_hz = 1000.0;

  void validate() const {
    if (n_signals < 1) throw ParameterError("corpus: n_signals must be >= 1");
    if (!(duration_s > 0.0)) throw ParameterError("corpus: duration_s must be > 0");
    if (sample_rate < 8000) throw ParameterError("corpus: sample_rate must be >= 8000");
    if (!(f0_lo_hz > 0.0 && f0_lo_hz <= f0_hi_hz))
      throw ParameterError("corpus: f0_lo_hz must be positive and <= f0_hi_hz");
    if (f0_hi_hz * 3.0 >= sample_rate / 2.0)
      throw ParameterError("corpus: f0_hi_hz leaves fewer than 3 partials below Nyquist");
  }

  /// Seed of this partition's stream; train and test never share one.
  std::int64_t stream_seed() const { return partition == Partition::train ? seed * 2 : seed * 2 + 1; }

  std::size_t length() const { return std::size_t(std::llround(duration_s * sample_rate)); }
};

/// Signal `index` of the corpus; pure function of (spec, index).
inline Signal synthesize_one(const CorpusSpec& spec, int index) {
  spec.validate();
  require(index >= 0 && index < spec.n_signals, "corpus: index out of range");
  Rng rng = make_rng(std::uint64_t(spec.stream_seed()), std::uint64_t(index), 0x5157u);
  const std::size_t n = spec.length();
  const double rate = spec.sample_rate;
  const double nyquist = rate / 2.0;
  std::vector<double> tonal(n, 0.0);

  // Harmonic partials: log-uniform fundamental, decaying random amplitudes.
  const double f0 = std::exp(uniform(rng, std::log(spec.f0_lo_hz), std::log(spec.f0_hi_hz)));
  const int n_partials = int(uniform_int(rng, 3, 8));
  for (int k = 1; k <= n_partials; ++k) {
    const double f = f0 * k * (1.0 + uniform(rng, -0.002, 0.002));
    const double amp = uniform(rng, 0.4, 1.0) / k;
    const double phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    if (f >= nyquist * 0.95) continue;
    // Phasor recurrence, renormalized periodically to stop drift.
    const double w = 2.0 * std::numbers::pi * f / rate;
    const double cw = std::cos(w), sw = std::sin(w);
    double re = std::cos(phase), im = std::sin(phase);
    for (std::size_t t = 0; t < n; ++t) {
      tonal[t] += amp * im;
      const double nre = re * cw - im * sw;
      im = re * sw + im * cw;
      re = nre;
      if ((t & 1023u) == 1023u) {
        const double r = std::hypot(re, im);
        re /= r;
        im /= r;
      }
    }
  }

  // Slow amplitude modulation.
  const double am_rate = uniform(rng, 0.1, 2.0);
  const double am_depth = uniform(rng, 0.1, 0.5);
  const double am_phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  for (std::size_t t = 0; t < n; ++t)
    tonal[t] *= 1.0 + am_depth * std::sin(2.0 * std::numbers::pi * am_rate * double(t) / rate + am_phase);

  // Onset transients: exponentially decaying tone bursts at partial frequencies.
  const int n_onsets = int(uniform_int(rng, 1, 4));
  for (int o = 0; o < n_onsets; ++o) {
    const auto start = std::size_t(uniform(rng, 0.0, double(n) * 0.9));
    const double decay_s = uniform(rng, 0.02, 0.15);
    const double gain = uniform(rng, 0.5, 1.5);
    const double f = f0 * double(uniform_int(rng, 1, 3));
    const double w = 2.0 * std::numbers::pi * f / rate;
    for (std::size_t t = start; t < n; ++t) {
      const double age = double(t - start) / rate;
      if (age > 6.0 * decay_s) break;
      tonal[t] += gain * std::exp(-age / decay_s) * std::sin(w * double(t - start));
    }
  }

  // Filtered-noise bed 20-40 dB under the tonal part.
  double tonal_e = 0.0;
  for (double v : tonal) tonal_e += v * v;
  const double tonal_rms = std::sqrt(tonal_e / double(std::max<std::size_t>(n, 1)));
  const double bed_db = uniform(rng, -40.0, -20.0);
  const double pole = uniform(rng, 0.5, 0.95);
  std::vector<double> bed(n);
  double state = 0.0, bed_e = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    state = pole * state + (1.0 - pole) * gaussian(rng);
    bed[t] = state;
    bed_e += state * state;
  }
  const double bed_rms = std::sqrt(bed_e / double(std::max<std::size_t>(n, 1)));
  const double bed_gain = bed_rms > 0.0 ? tonal_rms * std::pow(10.0, bed_db / 20.0) / bed_rms : 0.0;

  double peak = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    tonal[t] += bed_gain * bed[t];
    peak = std::max(peak, std::abs(tonal[t]));
  }
  Signal out;
  out.sample_rate = spec.sample_rate;
  out.samples.resize(n);
  const double norm = peak > 0.0 ? 0.9 / peak : 0.0;
  for (std::size_t t = 0; t < n; ++t) out.samples[t] = float(tonal[t] * norm);
  return out;
}

inline std::vector<Signal> synthesize(const CorpusSpec& spec) {
  spec.validate();
  std::vector<Signal> out;
  out.reserve(std::size_t(spec.n_signals));
  for (int i = 0; i < spec.n_signals; ++i) out.push_back(synthesize_one(spec, i));
  return out;
}

// ---------------------------------------------------------------------------
// WAV I/O

inline std::int16_t quantize_pcm16(float x) {
  const double v = std::round(double(x) * 32767.0);
  return std::int16_t(std::clamp(v, -32768.0, 32767.0));
}

namespace detail {

inline void put_u32(std::string& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(char((v >> (8 * i)) & 0xFFu));
}
inline void put_u16(std::string& b, std::uint16_t v) {
  b.push_back(char(v & 0xFFu));
  b.push_back(char(v >> 8));
}
inline std::uint32_t get_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
}
inline std::uint16_t get_u16(const unsigned char* p) { return std::uint16_t(p[0] | p[1] << 8); }

}  // namespace detail

/// Serialized RIFF/WAVE bytes for a signal.
inline std::string wav_bytes(const Signal& signal) {
  const auto data_bytes = std::uint32_t(signal.size() * 2);
  std::string b;
  b.reserve(44 + data_bytes);
  b += "RIFF";
  detail::put_u32(b, 36 + data_bytes);
  b += "WAVEfmt ";
  detail::put_u32(b, 16);
  detail::put_u16(b, 1);  // PCM
  detail::put_u16(b, 1);  // mono
  detail::put_u32(b, std::uint32_t(signal.sample_rate));
  detail::put_u32(b, std::uint32_t(signal.sample_rate) * 2);
  detail::put_u16(b, 2);
  detail::put_u16(b, 16);
  b += "data";
  detail::put_u32(b, data_bytes);
  for (float x : signal.samples) detail::put_u16(b, std::uint16_t(quantize_pcm16(x)));
  return b;
}

inline Signal parse_wav(std::string_view bytes, const std::string& origin = "<memory>") {
  auto fail = [&](const std::string& m) { return FormatError("wav " + origin + ": " + m); };
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 12 || std::memcmp(p, "RIFF", 4) != 0) throw fail("bad magic: expected 'RIFF'");
  if (std::memcmp(p + 8, "WAVE", 4) != 0) throw fail("bad form type: expected 'WAVE'");
  std::size_t pos = 12;
  bool have_fmt = false;
  int rate = 0;
  while (pos + 8 <= bytes.size()) {
    const std::string id(bytes.substr(pos, 4));
    const std::uint32_t len = detail::get_u32(p + pos + 4);
    pos += 8;
    if (pos + len > bytes.size()) throw fail("chunk '" + id + "' truncated");
    if (id == "fmt ") {
      if (len < 16) throw fail("fmt chunk too short");
      const auto format = detail::get_u16(p + pos);
      const auto channels = detail::get_u16(p + pos + 2);
      const auto bits = detail::get_u16(p + pos + 14);
      if (format != 1) throw fail("audio_format=" + std::to_string(format) + " unsupported (PCM only)");
      if (channels != 1) throw fail("channels=" + std::to_string(channels) + " unsupported");
      if (bits != 16) throw fail("bits_per_sample=" + std::to_string(bits) + " unsupported");
      rate = int(detail::get_u32(p + pos + 4));
      if (rate <= 0) throw fail("sample_rate=0 unsupported");
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw fail("data chunk before fmt chunk");
      Signal s;
      s.sample_rate = rate;
      s.samples.resize(len / 2);
      for (std::size_t i = 0; i < s.samples.size(); ++i)
        s.samples[i] = float(std::int16_t(detail::get_u16(p + pos + 2 * i))) / 32767.0f;
      clamp_in_place(s.samples);  // -32768 maps just below -1
      return s;
    }
    pos += len + (len & 1u);
  }
  throw fail(have_fmt ? "missing data chunk" : "missing fmt chunk");
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

/// Write via temp file and rename so readers never see a partial file.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) throw IoError("short write to " + path.string());
  }
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + ": " + ec.message());
}

inline void write_wav(const Signal& signal, const std::filesystem::path& path) {
  require(signal.in_range(), "write_wav: samples outside [-1, 1]");
  write_file_atomic(path, wav_bytes(signal));
}

inline Signal read_wav(const std::filesystem::path& path) { return parse_wav(read_file(path), path.string()); }

}  // namespace latentmark
