// Audio I/O and dataset handling: strict 16-bit PCM mono WAV read/write,
// float32 WAV for non-audio signal persistence, tab-separated corpus
// manifests, and a deterministic synthetic multi-speaker corpus.
#pragma once

#include <cmath>
#include <complex>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "uap/common.hpp"
#include "uap/fft.hpp"

namespace uap {

struct Waveform {
  std::vector<double> samples;  // nominal range [-1,1]
  int sample_rate = 0;          // Hz

  std::size_t size() const { return samples.size(); }
  double duration_s() const { return sample_rate > 0 ? double(samples.size()) / sample_rate : 0.0; }
  double peak() const {
    double p = 0.0;
    for (double s : samples) p = std::max(p, std::fabs(s));
    return p;
  }
};

struct SpeakerLabel {
  int index = -1;
  friend bool operator==(SpeakerLabel a, SpeakerLabel b) { return a.index == b.index; }
  friend bool operator!=(SpeakerLabel a, SpeakerLabel b) { return a.index != b.index; }
};

enum class Split { Train, Test };

inline const char* split_name(Split s) { return s == Split::Train ? "train" : "test"; }

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "test") return Split::Test;
  throw DataError("manifest: unknown split tag '" + s + "'");
}

struct Utterance {
  Waveform waveform;
  SpeakerLabel speaker;
  std::string utterance_id;
};

struct CorpusManifest {
  struct Entry {
    std::string path;  // relative to base_dir
    SpeakerLabel speaker;
    Split split = Split::Train;
  };
  std::vector<Entry> entries;
  int sample_rate = 0;
  std::filesystem::path base_dir;

  int num_speakers() const {
    int k = 0;
    for (const auto& e : entries) k = std::max(k, e.speaker.index + 1);
    return k;
  }
};

namespace detail {

inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(char(v & 0xff));
  out.push_back(char((v >> 8) & 0xff));
}
inline void put_u32(std::string& out, std::uint32_t v) {
  out.push_back(char(v & 0xff));
  out.push_back(char((v >> 8) & 0xff));
  out.push_back(char((v >> 16) & 0xff));
  out.push_back(char((v >> 24) & 0xff));
}

struct WavData {
  std::uint16_t format = 0;
  std::uint16_t channels = 0;
  std::uint32_t sample_rate = 0;
  std::uint16_t bits = 0;
  std::string data;
};

inline WavData read_wav_chunks(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("wav: cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  auto u16 = [&](std::size_t off) -> std::uint32_t {
    return std::uint8_t(bytes[off]) | (std::uint32_t(std::uint8_t(bytes[off + 1])) << 8);
  };
  auto u32 = [&](std::size_t off) -> std::uint32_t {
    return u16(off) | (u16(off + 2) << 16);
  };
  if (bytes.size() < 12 || bytes.compare(0, 4, "RIFF") != 0)
    throw DataError("wav: missing RIFF magic in " + path.string());
  if (bytes.compare(8, 4, "WAVE") != 0)
    throw DataError("wav: missing WAVE form type in " + path.string());

  WavData w;
  bool have_fmt = false, have_data = false;
  std::size_t off = 12;
  while (off + 8 <= bytes.size()) {
    std::string id = bytes.substr(off, 4);
    std::uint32_t len = u32(off + 4);
    std::size_t body = off + 8;
    if (body + len > bytes.size())
      throw DataError("wav: truncated chunk '" + id + "' in " + path.string());
    if (id == "fmt ") {
      if (len < 16) throw DataError("wav: fmt chunk too short in " + path.string());
      w.format = std::uint16_t(u16(body));
      w.channels = std::uint16_t(u16(body + 2));
      w.sample_rate = u32(body + 4);
      w.bits = std::uint16_t(u16(body + 14));
      have_fmt = true;
    } else if (id == "data") {
      w.data = bytes.substr(body, len);
      have_data = true;
    }
    off = body + len + (len & 1);  // chunks are word-aligned
  }
  if (!have_fmt) throw DataError("wav: no fmt chunk in " + path.string());
  if (!have_data) throw DataError("wav: no data chunk in " + path.string());
  return w;
}

inline void write_wav_raw(const std::filesystem::path& path, std::uint16_t format,
                          std::uint16_t bits, int sample_rate, const std::string& data) {
  std::string out;
  out.reserve(44 + data.size());
  std::uint16_t block = std::uint16_t(bits / 8);  // mono
  out += "RIFF";
  put_u32(out, std::uint32_t(36 + data.size()));
  out += "WAVE";
  out += "fmt ";
  put_u32(out, 16);
  put_u16(out, format);
  put_u16(out, 1);  // mono
  put_u32(out, std::uint32_t(sample_rate));
  put_u32(out, std::uint32_t(sample_rate) * block);
  put_u16(out, block);
  put_u16(out, bits);
  out += "data";
  put_u32(out, std::uint32_t(data.size()));
  out += data;
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("wav: cannot create " + path.string());
  f.write(out.data(), std::streamsize(out.size()));
  if (!f) throw DataError("wav: write failed for " + path.string());
}

}  // namespace detail

// Strict corpus reader: RIFF/WAVE, 16-bit PCM, mono. Samples scale to
// [-1,1] by division by 32768. expected_rate == 0 accepts any rate.
inline Waveform read_wav(const std::filesystem::path& path, int expected_rate = 0) {
  detail::WavData w = detail::read_wav_chunks(path);
  if (w.format != 1)
    throw DataError("wav: format code " + std::to_string(w.format) + " is not PCM in " + path.string());
  if (w.channels != 1)
    throw DataError("wav: " + std::to_string(w.channels) + " channels, expected mono in " + path.string());
  if (w.bits != 16)
    throw DataError("wav: " + std::to_string(w.bits) + " bits per sample, expected 16 in " + path.string());
  if (expected_rate > 0 && int(w.sample_rate) != expected_rate)
    throw DataError("wav: sample rate " + std::to_string(w.sample_rate) + " != configured " +
                    std::to_string(expected_rate) + " in " + path.string());
  Waveform out;
  out.sample_rate = int(w.sample_rate);
  std::size_t n = w.data.size() / 2;
  out.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::int16_t v = std::int16_t(std::uint8_t(w.data[2 * i]) |
                                  (std::uint16_t(std::uint8_t(w.data[2 * i + 1])) << 8));
    out.samples[i] = double(v) / 32768.0;
  }
  return out;
}

// 16-bit PCM writer; samples clamp to [-1,1] before quantization.
inline void write_wav(const std::filesystem::path& path, const Waveform& w) {
  std::string data;
  data.reserve(w.samples.size() * 2);
  for (double s : w.samples) {
    double c = std::clamp(s, -1.0, 1.0);
    long q = std::lround(c * 32768.0);
    q = std::clamp(q, -32768L, 32767L);
    detail::put_u16(data, std::uint16_t(std::int16_t(q)));
  }
  detail::write_wav_raw(path, 1, 16, w.sample_rate, data);
}

// IEEE float32 WAV, used to persist signals that must round-trip with
// float accuracy (impulse responses, perturbation units).
inline void write_wav_f32(const std::filesystem::path& path, const Waveform& w) {
  std::string data;
  data.reserve(w.samples.size() * 4);
  for (double s : w.samples) {
    float f = float(s);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    detail::put_u32(data, bits);
  }
  detail::write_wav_raw(path, 3, 32, w.sample_rate, data);
}

inline Waveform read_wav_f32(const std::filesystem::path& path, int expected_rate = 0) {
  detail::WavData w = detail::read_wav_chunks(path);
  if (w.format != 3)
    throw DataError("wav: format code " + std::to_string(w.format) + " is not IEEE float in " + path.string());
  if (w.channels != 1)
    throw DataError("wav: " + std::to_string(w.channels) + " channels, expected mono in " + path.string());
  if (w.bits != 32)
    throw DataError("wav: " + std::to_string(w.bits) + " bits per sample, expected 32 in " + path.string());
  if (expected_rate > 0 && int(w.sample_rate) != expected_rate)
    throw DataError("wav: sample rate " + std::to_string(w.sample_rate) + " != configured " +
                    std::to_string(expected_rate) + " in " + path.string());
  Waveform out;
  out.sample_rate = int(w.sample_rate);
  std::size_t n = w.data.size() / 4;
  out.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t bits = std::uint8_t(w.data[4 * i]) |
                         (std::uint32_t(std::uint8_t(w.data[4 * i + 1])) << 8) |
                         (std::uint32_t(std::uint8_t(w.data[4 * i + 2])) << 16) |
                         (std::uint32_t(std::uint8_t(w.data[4 * i + 3])) << 24);
    float f;
    std::memcpy(&f, &bits, 4);
    out.samples[i] = double(f);
  }
  return out;
}

// --- manifest -------------------------------------------------------------

inline void save_manifest(const std::filesystem::path& path, const CorpusManifest& m) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("manifest: cannot create " + path.string());
  f << "sample_rate\t" << m.sample_rate << "\n";
  for (const auto& e : m.entries)
    f << e.path << "\t" << e.speaker.index << "\t" << split_name(e.split) << "\n";
  if (!f) throw DataError("manifest: write failed for " + path.string());
}

inline CorpusManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError("manifest: cannot open " + path.string());
  CorpusManifest m;
  m.base_dir = path.parent_path();
  std::string line;
  if (!std::getline(f, line)) throw DataError("manifest: empty file " + path.string());
  {
    std::istringstream hs(line);
    std::string key;
    if (!std::getline(hs, key, '\t') || key != "sample_rate" || !(hs >> m.sample_rate) ||
        m.sample_rate <= 0)
      throw DataError("manifest: bad sample_rate header in " + path.string());
  }
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    CorpusManifest::Entry e;
    std::string spk, split;
    if (!std::getline(ls, e.path, '\t') || !std::getline(ls, spk, '\t') ||
        !std::getline(ls, split, '\t'))
      throw DataError("manifest: malformed record '" + line + "' in " + path.string());
    e.speaker.index = std::stoi(spk);
    if (e.speaker.index < 0) throw DataError("manifest: negative speaker index in " + path.string());
    e.split = parse_split(split);
    m.entries.push_back(std::move(e));
  }
  if (m.entries.empty()) throw DataError("manifest: no entries in " + path.string());
  // every speaker must appear in both splits
  int k = m.num_speakers();
  std::vector<int> in_train(k, 0), in_test(k, 0);
  for (const auto& e : m.entries)
    (e.split == Split::Train ? in_train : in_test)[e.speaker.index] = 1;
  for (int i = 0; i < k; ++i)
    if (!in_train[i] || !in_test[i])
      throw DataError("manifest: speaker " + std::to_string(i) + " missing from a split");
  return m;
}

// All utterances of one split loaded into memory.
inline std::vector<Utterance> load_split(const CorpusManifest& m, Split split) {
  std::vector<Utterance> out;
  for (const auto& e : m.entries) {
    if (e.split != split) continue;
    Utterance u;
    u.waveform = read_wav(m.base_dir / e.path, m.sample_rate);
    u.speaker = e.speaker;
    u.utterance_id = std::filesystem::path(e.path).stem().string();
    out.push_back(std::move(u));
  }
  return out;
}

// --- synthetic corpus -----------------------------------------------------

struct SynthConfig {
  int speakers = 10;
  int utterances_per_speaker = 40;
  double duration_min_s = 0.9;
  double duration_max_s = 1.4;
  int sample_rate = 16000;
  int split_ratio = 4;  // train:test utterances per speaker
  std::uint64_t seed = 1;
};

namespace detail {

struct SpeakerTimbre {
  double f0 = 0.0;
  double formant[3] = {0, 0, 0};
  double bandwidth[3] = {0, 0, 0};
  double gain[3] = {0, 0, 0};
  double tilt = 1.5;  // harmonic amplitude ~ h^-tilt
};

inline SpeakerTimbre make_timbre(const SynthConfig& cfg, int speaker) {
  Rng rng(mix_seed(cfg.seed, std::uint64_t(speaker) * 2 + 1));
  SpeakerTimbre t;
  double frac = cfg.speakers > 1 ? double(speaker) / double(cfg.speakers - 1) : 0.0;
  t.f0 = 85.0 * std::pow(320.0 / 85.0, frac) * (1.0 + 0.05 * (rng.uniform() - 0.5));
  t.formant[0] = rng.uniform(320.0, 850.0);
  t.formant[1] = rng.uniform(950.0, 2300.0);
  t.formant[2] = rng.uniform(2400.0, 3400.0);
  for (int i = 0; i < 3; ++i) {
    t.bandwidth[i] = rng.uniform(90.0, 170.0);
    t.gain[i] = rng.uniform(0.7, 1.0);
  }
  t.tilt = rng.uniform(1.1, 1.9);
  return t;
}

inline Waveform synth_utterance(const SynthConfig& cfg, const SpeakerTimbre& spk, Rng& rng) {
  const double fs = cfg.sample_rate;
  const double dur = rng.uniform(cfg.duration_min_s, cfg.duration_max_s);
  const std::size_t n = std::size_t(dur * fs);

  // phrase contour: two slow sinusoids modulating f0
  const double c1 = rng.uniform(0.4, 1.4), p1 = rng.uniform(0.0, 6.283185307179586);
  const double c2 = rng.uniform(1.4, 2.8), p2 = rng.uniform(0.0, 6.283185307179586);
  // syllable-rate amplitude modulation
  const double syl = rng.uniform(2.2, 5.0), syl_phase = rng.uniform(0.0, 3.141592653589793);

  const double f0_max = spk.f0 * 1.12;
  int harmonics = int(std::min(40.0, 0.42 * fs / f0_max));
  if (harmonics < 3) harmonics = 3;

  std::vector<double> amp(std::size_t(harmonics) + 1, 0.0);
  std::vector<cplx> hphase(std::size_t(harmonics) + 1);
  for (int h = 1; h <= harmonics; ++h) {
    double f = h * spk.f0;
    double env = 0.12;
    for (int i = 0; i < 3; ++i) {
      double d = (f - spk.formant[i]) / spk.bandwidth[i];
      env += spk.gain[i] * std::exp(-0.5 * d * d);
    }
    amp[h] = env * std::pow(double(h), -spk.tilt);
    double ph = rng.uniform(0.0, 6.283185307179586);
    hphase[h] = cplx(std::cos(ph), std::sin(ph));
  }

  Waveform w;
  w.sample_rate = cfg.sample_rate;
  w.samples.resize(n);
  const double two_pi = 6.283185307179586;
  double phi = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double t = double(i) / fs;
    double f0 = spk.f0 * (1.0 + 0.06 * std::sin(two_pi * c1 * t + p1) +
                          0.04 * std::sin(two_pi * c2 * t + p2));
    phi += two_pi * f0 / fs;
    cplx base(std::cos(phi), std::sin(phi));
    cplx p = base;
    double s = 0.0;
    for (int h = 1; h <= harmonics; ++h) {
      s += amp[h] * (p * hphase[h]).imag();
      p *= base;
    }
    double env = 0.25 + 0.75 * std::pow(std::fabs(std::sin(3.141592653589793 * syl * t + syl_phase)), 1.5);
    s = s * env + 0.0025 * (rng.uniform() - 0.5);
    w.samples[i] = s;
  }
  // 20 ms fade at both ends
  std::size_t fade = std::min<std::size_t>(n / 4, std::size_t(0.02 * fs));
  for (std::size_t i = 0; i < fade; ++i) {
    double g = double(i + 1) / double(fade + 1);
    w.samples[i] *= g;
    w.samples[n - 1 - i] *= g;
  }
  double target_peak = rng.uniform(0.70, 0.90);
  double pk = w.peak();
  if (pk > 0) {
    double g = target_peak / pk;
    for (double& s : w.samples) s *= g;
  }
  return w;
}

}  // namespace detail

// Deterministic multi-speaker corpus: each speaker gets a fixed timbre
// (f0, formant envelope, tilt); each utterance a random phrase contour.
// Emits WAV files into out_dir and returns the manifest.
inline CorpusManifest synth_corpus(const SynthConfig& cfg, const std::filesystem::path& out_dir) {
  if (cfg.speakers < 2) throw ConfigError("synth_corpus: need at least 2 speakers");
  if (cfg.utterances_per_speaker < 1) throw ConfigError("synth_corpus: utterances_per_speaker < 1");
  if (cfg.duration_min_s <= 0 || cfg.duration_max_s < cfg.duration_min_s)
    throw ConfigError("synth_corpus: bad duration range");
  if (cfg.sample_rate <= 0) throw ConfigError("synth_corpus: sample_rate must be positive");
  if (cfg.split_ratio < 1) throw ConfigError("synth_corpus: split_ratio < 1");

  std::filesystem::create_directories(out_dir);
  CorpusManifest m;
  m.sample_rate = cfg.sample_rate;
  m.base_dir = out_dir;

  int per = cfg.utterances_per_speaker;
  int n_train = int(std::lround(double(per) * cfg.split_ratio / (cfg.split_ratio + 1)));
  n_train = std::clamp(n_train, 1, per - 1);  // both splits stay populated

  for (int k = 0; k < cfg.speakers; ++k) {
    detail::SpeakerTimbre timbre = detail::make_timbre(cfg, k);
    for (int u = 0; u < per; ++u) {
      Rng rng(mix_seed(mix_seed(cfg.seed, std::uint64_t(k) + 1000), std::uint64_t(u)));
      Waveform w = detail::synth_utterance(cfg, timbre, rng);
      char name[64];
      std::snprintf(name, sizeof(name), "spk%02d_utt%03d.wav", k, u);
      write_wav(out_dir / name, w);
      CorpusManifest::Entry e;
      e.path = name;
      e.speaker.index = k;
      e.split = u < n_train ? Split::Train : Split::Test;
      m.entries.push_back(std::move(e));
    }
  }
  return m;
}

}  // namespace uap
