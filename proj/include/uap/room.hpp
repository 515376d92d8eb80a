// Shoebox-room image-source impulse response generator and the
// differentiable channel convolution R(x) = x * r. Fractional tap
// delays use an 81-tap Hann-windowed sinc.
#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "uap/audio.hpp"
#include "uap/common.hpp"
#include "uap/fft.hpp"

namespace uap {

struct RoomSpec {
  std::array<double, 3> dimensions = {5.0, 5.0, 3.0};  // meters
  double absorption = 0.3;                             // wall energy absorption in (0,1]
  std::array<double, 3> source_pos = {1.0, 1.0, 1.0};
  std::array<double, 3> mic_pos = {3.0, 3.5, 1.5};
  int max_order = 6;  // reflections per image, capped
  int sample_rate = 16000;
  double speed_of_sound = 343.0;
};

inline void validate(const RoomSpec& s) {
  for (double d : s.dimensions)
    if (d <= 0) throw ConfigError("room: dimensions must be positive");
  if (s.absorption <= 0 || s.absorption > 1)
    throw ConfigError("room: absorption must lie in (0,1]");
  for (int i = 0; i < 3; ++i) {
    if (s.source_pos[std::size_t(i)] <= 0 || s.source_pos[std::size_t(i)] >= s.dimensions[std::size_t(i)])
      throw ConfigError("room: source position outside the room");
    if (s.mic_pos[std::size_t(i)] <= 0 || s.mic_pos[std::size_t(i)] >= s.dimensions[std::size_t(i)])
      throw ConfigError("room: mic position outside the room");
  }
  if (s.source_pos == s.mic_pos) throw ConfigError("room: source and mic coincide");
  if (s.max_order < 0 || s.max_order > 20)
    throw ConfigError("room: max_order must lie in [0,20]");
  if (s.sample_rate <= 0) throw ConfigError("room: sample_rate must be positive");
  if (s.speed_of_sound <= 0) throw ConfigError("room: speed_of_sound must be positive");
}

struct Rir {
  std::vector<double> taps;
  int sample_rate = 0;
  RoomSpec provenance;
};

struct RirSet {
  std::vector<Rir> rirs;
  std::vector<Split> splits;  // parallel to rirs

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < splits.size(); ++i)
      if (splits[i] == s) out.push_back(i);
    return out;
  }
};

struct ImageSource {
  double distance = 0.0;  // meters
  int order = 0;          // number of wall reflections
  double amplitude = 0.0;
};

// Mirror-image enumeration over the 3D reflection lattice. Per axis the
// image coordinate is (1-2q)*src + 2*m*L relative to the mic, with
// |2m-q| wall bounces; total order is the sum over axes.
inline std::vector<ImageSource> enumerate_images(const RoomSpec& s) {
  validate(s);
  const double beta = std::sqrt(1.0 - s.absorption);  // pressure reflection coefficient
  const int O = s.max_order;
  const int mhi = O / 2 + 1;
  std::vector<ImageSource> out;
  for (int mx = -mhi; mx <= mhi; ++mx)
    for (int qx = 0; qx <= 1; ++qx) {
      int ox = std::abs(2 * mx - qx);
      if (ox > O) continue;
      double dx = (1 - 2 * qx) * s.source_pos[0] + 2.0 * mx * s.dimensions[0] - s.mic_pos[0];
      for (int my = -mhi; my <= mhi; ++my)
        for (int qy = 0; qy <= 1; ++qy) {
          int oy = std::abs(2 * my - qy);
          if (ox + oy > O) continue;
          double dy = (1 - 2 * qy) * s.source_pos[1] + 2.0 * my * s.dimensions[1] - s.mic_pos[1];
          for (int mz = -mhi; mz <= mhi; ++mz)
            for (int qz = 0; qz <= 1; ++qz) {
              int oz = std::abs(2 * mz - qz);
              if (ox + oy + oz > O) continue;
              double dz = (1 - 2 * qz) * s.source_pos[2] + 2.0 * mz * s.dimensions[2] - s.mic_pos[2];
              ImageSource img;
              img.distance = std::sqrt(dx * dx + dy * dy + dz * dz);
              img.order = ox + oy + oz;
              img.amplitude = std::pow(beta, img.order) /
                              (4.0 * 3.14159265358979323846 * std::max(img.distance, 1e-6));
              out.push_back(img);
            }
        }
    }
  return out;
}

inline constexpr int kSincTaps = 81;  // fractional-delay interpolation width

inline Rir image_source_rir(const RoomSpec& s) {
  std::vector<ImageSource> images = enumerate_images(s);
  const int half = kSincTaps / 2;
  const double pi = 3.14159265358979323846;

  double max_delay = 0.0;
  for (const auto& img : images)
    max_delay = std::max(max_delay, img.distance / s.speed_of_sound * s.sample_rate);
  std::vector<double> taps(std::size_t(std::ceil(max_delay)) + kSincTaps, 0.0);

  for (const auto& img : images) {
    if (img.amplitude == 0.0) continue;
    double tau = img.distance / s.speed_of_sound * s.sample_rate;
    int n0 = int(std::lround(tau));
    for (int n = n0 - half; n <= n0 + half; ++n) {
      if (n < 0) continue;
      double t = double(n) - tau;
      if (std::fabs(t) > double(half) + 0.5) continue;
      double sinc = t == 0.0 ? 1.0 : std::sin(pi * t) / (pi * t);
      double win = 0.5 * (1.0 + std::cos(2.0 * pi * t / kSincTaps));
      taps[std::size_t(n)] += img.amplitude * sinc * win;
    }
  }

  // trim trailing numerical dust
  double peak = 0.0;
  for (double t : taps) peak = std::max(peak, std::fabs(t));
  std::size_t last = 0;
  for (std::size_t i = 0; i < taps.size(); ++i)
    if (std::fabs(taps[i]) > 1e-9 * peak) last = i;
  taps.resize(last + 1);

  Rir r;
  r.taps = std::move(taps);
  r.sample_rate = s.sample_rate;
  r.provenance = s;
  return r;
}

// --- channel convolution -----------------------------------------------------
// Full linear convolution cropped to len(x): the channel output feeds the
// same classifier as the clean signal, so frame counts stay comparable.

inline constexpr std::size_t kConvFftThreshold = 1u << 18;  // direct-work cutoff

inline void check_channel(const Waveform& w, const Rir& r) {
  if (w.samples.empty()) throw DataError("convolve: empty waveform");
  if (r.taps.empty()) throw DataError("convolve: empty impulse response");
  if (w.sample_rate != r.sample_rate)
    throw DataError("convolve: waveform rate " + std::to_string(w.sample_rate) +
                    " != rir rate " + std::to_string(r.sample_rate));
}

inline Waveform convolve_direct(const Waveform& w, const Rir& r) {
  check_channel(w, r);
  Waveform out;
  out.sample_rate = w.sample_rate;
  out.samples.assign(w.size(), 0.0);
  const std::size_t n = w.size(), m = r.taps.size();
  for (std::size_t j = 0; j < m; ++j) {
    double rj = r.taps[j];
    if (rj == 0.0) continue;
    for (std::size_t i = j; i < n; ++i) out.samples[i] += w.samples[i - j] * rj;
  }
  return out;
}

inline Waveform convolve_fft(const Waveform& w, const Rir& r) {
  check_channel(w, r);
  std::vector<double> full = convolve_fft_full(w.samples, r.taps);
  Waveform out;
  out.sample_rate = w.sample_rate;
  out.samples.assign(full.begin(), full.begin() + std::ptrdiff_t(w.size()));
  return out;
}

inline Waveform convolve(const Waveform& w, const Rir& r) {
  check_channel(w, r);
  if (w.size() * r.taps.size() > kConvFftThreshold) return convolve_fft(w, r);
  return convolve_direct(w, r);
}

// Adjoint of convolve under the crop convention:
// g_w[k] = sum_j upstream[k + j] * r[j] for k + j < len(upstream).
inline std::vector<double> convolve_backward(const std::vector<double>& upstream, const Rir& r) {
  if (upstream.empty()) throw DataError("convolve backward: empty upstream");
  if (r.taps.empty()) throw DataError("convolve backward: empty impulse response");
  const std::size_t n = upstream.size(), m = r.taps.size();
  std::vector<double> g(n, 0.0);
  if (n * m > kConvFftThreshold) {
    std::vector<double> rev(r.taps.rbegin(), r.taps.rend());
    std::vector<double> full = convolve_fft_full(upstream, rev);
    for (std::size_t k = 0; k < n; ++k) g[k] = full[k + m - 1];
  } else {
    for (std::size_t j = 0; j < m; ++j) {
      double rj = r.taps[j];
      if (rj == 0.0) continue;
      for (std::size_t k = 0; k + j < n; ++k) g[k] += upstream[k + j] * rj;
    }
  }
  return g;
}

// --- random location sampling --------------------------------------------------

// n RIRs with source/mic drawn uniformly inside the room with a wall
// margin; the first n_train go to the train split, the rest to test.
inline RirSet sample_rir_set(const RoomSpec& room, int n_locations, int n_train,
                             std::uint64_t seed, double margin = 0.2) {
  if (n_locations < 1) throw ConfigError("rir set: need at least one location");
  if (n_train < 0 || n_train > n_locations)
    throw ConfigError("rir set: train count must lie in [0, n_locations]");
  for (double d : room.dimensions)
    if (d - 2.0 * margin <= 0)
      throw ConfigError("rir set: margins infeasible for room dimension " + std::to_string(d));

  Rng rng(seed ? seed : 1);
  RirSet set;
  for (int i = 0; i < n_locations; ++i) {
    RoomSpec s = room;
    auto draw = [&](std::array<double, 3>& p) {
      for (int a = 0; a < 3; ++a)
        p[std::size_t(a)] = rng.uniform(margin, s.dimensions[std::size_t(a)] - margin);
    };
    draw(s.source_pos);
    do {
      draw(s.mic_pos);
    } while (std::hypot(s.mic_pos[0] - s.source_pos[0], s.mic_pos[1] - s.source_pos[1],
                        s.mic_pos[2] - s.source_pos[2]) < 0.1);
    set.rirs.push_back(image_source_rir(s));
    set.splits.push_back(i < n_train ? Split::Train : Split::Test);
  }
  return set;
}

// --- persistence ----------------------------------------------------------------
// WAV (float32) scaled so the peak sits at 0.5, with the inverse scale and
// the full room description in a sidecar text record.

inline void save_rir(const std::filesystem::path& base, const Rir& r) {
  double peak = 0.0;
  for (double t : r.taps) peak = std::max(peak, std::fabs(t));
  double scale = peak > 0 ? 2.0 * peak : 1.0;  // wav * scale recovers taps
  Waveform w;
  w.sample_rate = r.sample_rate;
  w.samples.resize(r.taps.size());
  for (std::size_t i = 0; i < r.taps.size(); ++i) w.samples[i] = r.taps[i] / scale;
  write_wav_f32(std::filesystem::path(base).concat(".wav"), w);

  std::ofstream f(std::filesystem::path(base).concat(".room.txt"), std::ios::trunc);
  if (!f) throw DataError("rir: cannot create sidecar for " + base.string());
  const RoomSpec& s = r.provenance;
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "format_version 1\n"
                "dimensions %.17g %.17g %.17g\n"
                "absorption %.17g\n"
                "source %.17g %.17g %.17g\n"
                "mic %.17g %.17g %.17g\n"
                "max_order %d\n"
                "sample_rate %d\n"
                "speed_of_sound %.17g\n"
                "scale %.17g\n",
                s.dimensions[0], s.dimensions[1], s.dimensions[2], s.absorption, s.source_pos[0],
                s.source_pos[1], s.source_pos[2], s.mic_pos[0], s.mic_pos[1], s.mic_pos[2],
                s.max_order, s.sample_rate, s.speed_of_sound, scale);
  f << buf;
}

inline Rir load_rir(const std::filesystem::path& base) {
  std::ifstream f(std::filesystem::path(base).concat(".room.txt"));
  if (!f) throw DataError("rir: cannot open sidecar " + base.string() + ".room.txt");
  RoomSpec s;
  double scale = 1.0;
  int version = 0;
  std::string key;
  while (f >> key) {
    if (key == "format_version") f >> version;
    else if (key == "dimensions") f >> s.dimensions[0] >> s.dimensions[1] >> s.dimensions[2];
    else if (key == "absorption") f >> s.absorption;
    else if (key == "source") f >> s.source_pos[0] >> s.source_pos[1] >> s.source_pos[2];
    else if (key == "mic") f >> s.mic_pos[0] >> s.mic_pos[1] >> s.mic_pos[2];
    else if (key == "max_order") f >> s.max_order;
    else if (key == "sample_rate") f >> s.sample_rate;
    else if (key == "speed_of_sound") f >> s.speed_of_sound;
    else if (key == "scale") f >> scale;
    else throw DataError("rir: unknown sidecar key '" + key + "' in " + base.string());
  }
  if (version != 1) throw DataError("rir: unsupported sidecar version in " + base.string());

  Waveform w = read_wav_f32(std::filesystem::path(base).concat(".wav"), s.sample_rate);
  Rir r;
  r.sample_rate = w.sample_rate;
  r.taps.resize(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) r.taps[i] = w.samples[i] * scale;
  r.provenance = s;
  return r;
}

inline void save_rir_set(const std::filesystem::path& dir, const RirSet& set) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "rirs.tsv", std::ios::trunc);
  if (!manifest) throw DataError("rir set: cannot create manifest in " + dir.string());
  manifest << "count\t" << set.rirs.size() << "\n";
  for (std::size_t i = 0; i < set.rirs.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "rir%03zu", i);
    save_rir(dir / name, set.rirs[i]);
    manifest << name << "\t" << split_name(set.splits[i]) << "\n";
  }
}

inline RirSet load_rir_set(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "rirs.tsv");
  if (!manifest) throw DataError("rir set: cannot open " + (dir / "rirs.tsv").string());
  std::string line;
  if (!std::getline(manifest, line)) throw DataError("rir set: empty manifest in " + dir.string());
  RirSet set;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string name, split;
    if (!std::getline(ls, name, '\t') || !std::getline(ls, split, '\t'))
      throw DataError("rir set: malformed manifest line '" + line + "'");
    set.rirs.push_back(load_rir(dir / name));
    set.splits.push_back(parse_split(split));
  }
  if (set.rirs.empty()) throw DataError("rir set: no entries in " + dir.string());
  return set;
}

}  // namespace uap
