#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mam/errors.hpp"
#include "mam/tensor.hpp"

namespace mam {

struct AudioBuffer {
  std::vector<float> samples;  // in [-1, 1]
  int sample_rate = 16000;
};

// The model input: n frames of d_x log-mel values.
struct Spectrogram {
  TensorF frames;  // [n, d_x]
  int frame_shift_ms = 10;
  int frame_len_ms = 25;

  int n() const { return frames.dims.empty() ? 0 : frames.dims[0]; }
  int bins() const { return frames.dims.size() < 2 ? 0 : frames.dims[1]; }
};

// --- WAV (16-bit PCM mono) ------------------------------------------------

inline AudioBuffer read_wav(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open wav: " + path);
  auto read_u32 = [&]() {
    unsigned char b[4];
    f.read(reinterpret_cast<char*>(b), 4);
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) |
           (static_cast<uint32_t>(b[3]) << 24);
  };
  auto read_u16 = [&]() {
    unsigned char b[2];
    f.read(reinterpret_cast<char*>(b), 2);
    return static_cast<uint16_t>(b[0] | (b[1] << 8));
  };
  char tag[4];
  f.read(tag, 4);
  if (!f || std::memcmp(tag, "RIFF", 4) != 0)
    throw DataError("not a RIFF file: " + path);
  read_u32();
  f.read(tag, 4);
  if (!f || std::memcmp(tag, "WAVE", 4) != 0)
    throw DataError("not a WAVE file: " + path);

  AudioBuffer audio;
  bool have_fmt = false, have_data = false;
  while (f && !(have_fmt && have_data)) {
    f.read(tag, 4);
    if (!f) break;
    uint32_t chunk = read_u32();
    if (std::memcmp(tag, "fmt ", 4) == 0) {
      uint16_t format = read_u16();
      uint16_t channels = read_u16();
      uint32_t rate = read_u32();
      read_u32();
      read_u16();
      uint16_t bits = read_u16();
      if (format != 1 || bits != 16)
        throw DataError("wav must be 16-bit PCM: " + path);
      if (channels != 1) throw DataError("wav must be mono: " + path);
      audio.sample_rate = static_cast<int>(rate);
      if (chunk > 16) f.seekg(chunk - 16, std::ios::cur);
      have_fmt = true;
    } else if (std::memcmp(tag, "data", 4) == 0) {
      std::vector<char> raw(chunk);
      f.read(raw.data(), chunk);
      if (static_cast<uint32_t>(f.gcount()) != chunk)
        throw DataError("truncated wav data: " + path);
      size_t count = chunk / 2;
      audio.samples.resize(count);
      for (size_t i = 0; i < count; ++i) {
        int16_t v = static_cast<int16_t>(
            static_cast<unsigned char>(raw[2 * i]) |
            (static_cast<unsigned char>(raw[2 * i + 1]) << 8));
        audio.samples[i] = static_cast<float>(v) / 32768.0f;
      }
      have_data = true;
    } else {
      f.seekg(chunk + (chunk & 1), std::ios::cur);
    }
  }
  if (!have_fmt || !have_data) throw DataError("incomplete wav: " + path);
  return audio;
}

inline void write_wav(const std::string& path, const std::vector<float>& samples,
                      int sample_rate) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write wav: " + path);
  auto put_u32 = [&](uint32_t v) {
    char b[4] = {static_cast<char>(v), static_cast<char>(v >> 8),
                 static_cast<char>(v >> 16), static_cast<char>(v >> 24)};
    f.write(b, 4);
  };
  auto put_u16 = [&](uint16_t v) {
    char b[2] = {static_cast<char>(v), static_cast<char>(v >> 8)};
    f.write(b, 2);
  };
  uint32_t data_bytes = static_cast<uint32_t>(samples.size() * 2);
  f.write("RIFF", 4);
  put_u32(36 + data_bytes);
  f.write("WAVE", 4);
  f.write("fmt ", 4);
  put_u32(16);
  put_u16(1);
  put_u16(1);
  put_u32(static_cast<uint32_t>(sample_rate));
  put_u32(static_cast<uint32_t>(sample_rate) * 2);
  put_u16(2);
  put_u16(16);
  f.write("data", 4);
  put_u32(data_bytes);
  for (float s : samples) {
    float c = std::clamp(s, -1.0f, 1.0f);
    int16_t v = static_cast<int16_t>(std::lrint(c * 32767.0f));
    put_u16(static_cast<uint16_t>(v));
  }
}

// --- STFT + mel filterbank --------------------------------------------------

namespace detail {

// Iterative radix-2 FFT; n must be a power of two.
inline void fft(std::vector<std::complex<double>>& a) {
  size_t n = a.size();
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    double ang = -2.0 * M_PI / static_cast<double>(len);
    std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0);
      for (size_t k = 0; k < len / 2; ++k) {
        auto u = a[i + k];
        auto v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wl;
      }
    }
  }
}

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) {
  return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0);
}

// Triangular filters on mel-spaced centers from 20 Hz to Nyquist. Row k
// covers FFT power bins; any bin contributes to at most two filters.
inline std::vector<std::vector<double>> mel_filterbank(int n_mels, int nfft,
                                                       int sample_rate) {
  double lo = hz_to_mel(20.0);
  double hi = hz_to_mel(sample_rate / 2.0);
  std::vector<double> pts(static_cast<size_t>(n_mels) + 2);
  for (int i = 0; i < n_mels + 2; ++i)
    pts[static_cast<size_t>(i)] =
        mel_to_hz(lo + (hi - lo) * i / (n_mels + 1));
  int n_bins = nfft / 2 + 1;
  std::vector<std::vector<double>> bank(
      static_cast<size_t>(n_mels), std::vector<double>(static_cast<size_t>(n_bins), 0.0));
  for (int m = 0; m < n_mels; ++m) {
    double fl = pts[static_cast<size_t>(m)];
    double fc = pts[static_cast<size_t>(m) + 1];
    double fr = pts[static_cast<size_t>(m) + 2];
    for (int b = 0; b < n_bins; ++b) {
      double freq = static_cast<double>(b) * sample_rate / nfft;
      double w = 0.0;
      if (freq > fl && freq < fc)
        w = (freq - fl) / (fc - fl);
      else if (freq >= fc && freq < fr)
        w = (fr - freq) / (fr - fc);
      if (w > 0.0) bank[static_cast<size_t>(m)][static_cast<size_t>(b)] = w;
    }
  }
  return bank;
}

}  // namespace detail

// Log-mel spectrogram: Hann window, power spectrum on the next power-of-two
// FFT, triangular mel filters, natural log with a 1e-10 floor.
inline Spectrogram stft_logmel(const AudioBuffer& audio, int d_x = 80,
                               int win_ms = 25, int hop_ms = 10) {
  if (d_x < 2) throw ConfigError("stft_logmel: d_x must be >= 2");
  int win = audio.sample_rate * win_ms / 1000;
  int hop = audio.sample_rate * hop_ms / 1000;
  if (win < 2 || hop < 1) throw ConfigError("stft_logmel: window too small");
  if (static_cast<int>(audio.samples.size()) < win)
    throw DataError("audio shorter than one window (" +
                    std::to_string(audio.samples.size()) + " < " +
                    std::to_string(win) + " samples)");
  int n_frames =
      (static_cast<int>(audio.samples.size()) - win) / hop + 1;
  int nfft = 1;
  while (nfft < win) nfft <<= 1;

  std::vector<double> window(static_cast<size_t>(win));
  for (int i = 0; i < win; ++i)
    window[static_cast<size_t>(i)] =
        0.5 - 0.5 * std::cos(2.0 * M_PI * i / (win - 1));
  auto bank = detail::mel_filterbank(d_x, nfft, audio.sample_rate);

  Spectrogram spec;
  spec.frame_len_ms = win_ms;
  spec.frame_shift_ms = hop_ms;
  spec.frames = TensorF({n_frames, d_x});
  std::vector<std::complex<double>> buf(static_cast<size_t>(nfft));
  for (int t = 0; t < n_frames; ++t) {
    std::fill(buf.begin(), buf.end(), std::complex<double>(0.0));
    int start = t * hop;
    for (int i = 0; i < win; ++i)
      buf[static_cast<size_t>(i)] =
          audio.samples[static_cast<size_t>(start + i)] *
          window[static_cast<size_t>(i)];
    detail::fft(buf);
    int n_bins = nfft / 2 + 1;
    std::vector<double> power(static_cast<size_t>(n_bins));
    for (int b = 0; b < n_bins; ++b)
      power[static_cast<size_t>(b)] = std::norm(buf[static_cast<size_t>(b)]);
    for (int m = 0; m < d_x; ++m) {
      double acc = 0.0;
      for (int b = 0; b < n_bins; ++b)
        acc += bank[static_cast<size_t>(m)][static_cast<size_t>(b)] *
               power[static_cast<size_t>(b)];
      spec.frames.at(t, m) =
          static_cast<float>(std::log(std::max(acc, 1e-10)));
    }
  }
  return spec;
}

// Per-utterance, per-bin mean/variance normalization (variance floor 1e-8).
inline Spectrogram cmvn(const Spectrogram& spec) {
  int n = spec.n(), d = spec.bins();
  if (n < 2) throw DataError("cmvn needs at least 2 frames");
  Spectrogram out = spec;
  for (int c = 0; c < d; ++c) {
    double mean = 0.0;
    for (int r = 0; r < n; ++r) mean += spec.frames.at(r, c);
    mean /= n;
    double var = 0.0;
    for (int r = 0; r < n; ++r) {
      double dv = spec.frames.at(r, c) - mean;
      var += dv * dv;
    }
    var /= n;
    double inv = 1.0 / std::sqrt(std::max(var, 1e-8));
    for (int r = 0; r < n; ++r)
      out.frames.at(r, c) =
          static_cast<float>((spec.frames.at(r, c) - mean) * inv);
  }
  return out;
}

// --- MAMF feature files -----------------------------------------------------
//
// magic "MAMF", u32 LE version=1, u32 n, u32 d_x, then n*d_x f32 LE row-major.

namespace detail {

inline void put_u32(std::ostream& os, uint32_t v) {
  char b[4] = {static_cast<char>(v), static_cast<char>(v >> 8),
               static_cast<char>(v >> 16), static_cast<char>(v >> 24)};
  os.write(b, 4);
}

inline uint32_t get_u32(std::istream& is, const std::string& what) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw DataError("truncated file while reading " + what);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) |
         (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace detail

inline void write_spec(const Spectrogram& spec, const std::string& path) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw DataError("cannot write: " + tmp);
    f.write("MAMF", 4);
    detail::put_u32(f, 1);
    detail::put_u32(f, static_cast<uint32_t>(spec.n()));
    detail::put_u32(f, static_cast<uint32_t>(spec.bins()));
    f.write(reinterpret_cast<const char*>(spec.frames.data.data()),
            static_cast<std::streamsize>(spec.frames.data.size() * 4));
    if (!f) throw DataError("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline Spectrogram read_spec(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open feature file: " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "MAMF", 4) != 0)
    throw DataError("bad magic in " + path);
  uint32_t version = detail::get_u32(f, "version");
  if (version != 1)
    throw DataError("unsupported MAMF version " + std::to_string(version));
  uint32_t n = detail::get_u32(f, "frame count");
  uint32_t d = detail::get_u32(f, "bin count");
  if (n < 1 || d < 1 || static_cast<uint64_t>(n) * d > (1u << 28))
    throw DataError("bad dimensions in " + path + ": " + std::to_string(n) +
                    "x" + std::to_string(d));
  Spectrogram spec;
  spec.frames = TensorF({static_cast<int>(n), static_cast<int>(d)});
  f.read(reinterpret_cast<char*>(spec.frames.data.data()),
         static_cast<std::streamsize>(spec.frames.data.size() * 4));
  if (static_cast<size_t>(f.gcount()) != spec.frames.data.size() * 4)
    throw DataError("truncated payload in " + path);
  return spec;
}

// Frame count without loading the payload.
inline int spec_frame_count(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open feature file: " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "MAMF", 4) != 0)
    throw DataError("bad magic in " + path);
  detail::get_u32(f, "version");
  return static_cast<int>(detail::get_u32(f, "frame count"));
}

}  // namespace mam
