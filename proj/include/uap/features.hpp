// Differentiable MFCC front end. Forward pipeline: pre-emphasis ->
// framing -> window -> FFT power spectrum -> mel filterbank ->
// log(max(., floor)) -> DCT-II. Backward is the exact adjoint, giving
// the gradient of any scalar loss with respect to the input samples.
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "uap/audio.hpp"
#include "uap/common.hpp"
#include "uap/fft.hpp"

namespace uap {

enum class WindowKind { Hamming, Hann, Rect };

struct MfccConfig {
  int n_coeffs = 30;
  double frame_len_ms = 25.0;
  double frame_shift_ms = 10.0;
  int n_mels = 40;
  int fft_size = 512;
  double preemphasis = 0.97;
  WindowKind window = WindowKind::Hamming;
  double log_floor = 1e-10;

  int frame_len(int sample_rate) const {
    return int(std::lround(frame_len_ms * sample_rate / 1000.0));
  }
  int frame_shift(int sample_rate) const {
    return int(std::lround(frame_shift_ms * sample_rate / 1000.0));
  }
};

struct FeatureMatrix {
  int frames = 0;
  int coeffs = 0;
  int frame_len = 0;    // samples
  int frame_shift = 0;  // samples
  std::vector<double> values;  // row-major frames x coeffs

  double& at(int t, int c) { return values[std::size_t(t) * coeffs + c]; }
  double at(int t, int c) const { return values[std::size_t(t) * coeffs + c]; }
};

inline int num_frames(std::size_t samples, int frame_len, int frame_shift) {
  if (samples < std::size_t(frame_len)) return 0;
  return 1 + int((samples - std::size_t(frame_len)) / std::size_t(frame_shift));
}

class Mfcc {
 public:
  // Forward intermediates kept for an exact, recomputation-free backward.
  struct Trace {
    std::vector<cplx> spectra;     // frames x n_bins
    std::vector<double> mel_energy;  // frames x n_mels (pre-log)
  };

  Mfcc(const MfccConfig& cfg, int sample_rate) : cfg_(cfg), fs_(sample_rate), plan_(checked_fft_size(cfg, sample_rate)) {
    flen_ = cfg.frame_len(fs_);
    fshift_ = cfg.frame_shift(fs_);
    nbins_ = cfg.fft_size / 2 + 1;
    if (fshift_ < 1) throw ConfigError("mfcc: frame shift below one sample");
    if (cfg.n_coeffs < 1 || cfg.n_coeffs > cfg.n_mels)
      throw ConfigError("mfcc: need 1 <= n_coeffs <= n_mels");
    if (cfg.log_floor <= 0) throw ConfigError("mfcc: log_floor must be positive");
    if (cfg.preemphasis < 0 || cfg.preemphasis >= 1)
      throw ConfigError("mfcc: preemphasis must lie in [0,1)");
    build_window();
    build_mel_filters();
    build_dct();
  }

  int frame_len() const { return flen_; }
  int frame_shift() const { return fshift_; }
  int sample_rate() const { return fs_; }
  const MfccConfig& config() const { return cfg_; }
  int min_samples() const { return flen_; }

  // center frequency (Hz) of mel filter m, from the mel scale points
  double filter_center_hz(int m) const { return hz_points_[std::size_t(m) + 1]; }

  FeatureMatrix forward(const Waveform& w, Trace* trace = nullptr) const {
    check_input(w);
    const std::size_t n = w.size();
    const int frames = num_frames(n, flen_, fshift_);

    std::vector<double> pre = preemphasize(w.samples);

    FeatureMatrix out;
    out.frames = frames;
    out.coeffs = cfg_.n_coeffs;
    out.frame_len = flen_;
    out.frame_shift = fshift_;
    out.values.resize(std::size_t(frames) * cfg_.n_coeffs);
    if (trace) {
      trace->spectra.assign(std::size_t(frames) * nbins_, cplx(0, 0));
      trace->mel_energy.assign(std::size_t(frames) * cfg_.n_mels, 0.0);
    }

    std::vector<cplx> buf(std::size_t(cfg_.fft_size));
    std::vector<double> power(std::size_t(nbins_));
    std::vector<double> logmel(std::size_t(cfg_.n_mels));
    for (int t = 0; t < frames; ++t) {
      const double* frame = pre.data() + std::size_t(t) * fshift_;
      for (int i = 0; i < flen_; ++i) buf[std::size_t(i)] = cplx(frame[i] * window_[std::size_t(i)], 0.0);
      for (int i = flen_; i < cfg_.fft_size; ++i) buf[std::size_t(i)] = cplx(0, 0);
      plan_.forward(buf);
      for (int k = 0; k < nbins_; ++k) power[std::size_t(k)] = std::norm(buf[std::size_t(k)]);
      if (trace)
        for (int k = 0; k < nbins_; ++k)
          trace->spectra[std::size_t(t) * nbins_ + k] = buf[std::size_t(k)];
      for (int m = 0; m < cfg_.n_mels; ++m) {
        const MelFilter& f = mel_[std::size_t(m)];
        double e = 0.0;
        for (std::size_t j = 0; j < f.w.size(); ++j) e += f.w[j] * power[std::size_t(f.start) + j];
        if (trace) trace->mel_energy[std::size_t(t) * cfg_.n_mels + m] = e;
        logmel[std::size_t(m)] = std::log(std::max(e, cfg_.log_floor));
      }
      for (int c = 0; c < cfg_.n_coeffs; ++c) {
        const double* row = dct_.data() + std::size_t(c) * cfg_.n_mels;
        double acc = 0.0;
        for (int m = 0; m < cfg_.n_mels; ++m) acc += row[m] * logmel[std::size_t(m)];
        out.at(t, c) = acc;
      }
    }
    return out;
  }

  // log-mel energies (frames x n_mels), the stage before the DCT
  std::vector<double> log_mel(const Waveform& w) const {
    Trace tr;
    forward(w, &tr);
    std::vector<double> out(tr.mel_energy.size());
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = std::log(std::max(tr.mel_energy[i], cfg_.log_floor));
    return out;
  }

  // Adjoint of forward: gradient w.r.t. input samples given the gradient
  // w.r.t. the feature matrix. Recomputes the trace when none is supplied.
  std::vector<double> backward(const Waveform& w, const FeatureMatrix& upstream,
                               const Trace* trace = nullptr) const {
    check_input(w);
    const std::size_t n = w.size();
    const int frames = num_frames(n, flen_, fshift_);
    if (upstream.frames != frames || upstream.coeffs != cfg_.n_coeffs)
      throw std::invalid_argument("mfcc backward: upstream shape mismatch");

    Trace local;
    if (!trace) {
      forward(w, &local);
      trace = &local;
    }

    std::vector<double> gpre(n, 0.0);
    std::vector<double> gl(std::size_t(cfg_.n_mels));
    std::vector<double> gp(std::size_t(nbins_));
    std::vector<cplx> gspec(std::size_t(cfg_.fft_size));
    for (int t = 0; t < frames; ++t) {
      // DCT adjoint
      for (int m = 0; m < cfg_.n_mels; ++m) {
        double acc = 0.0;
        for (int c = 0; c < cfg_.n_coeffs; ++c)
          acc += dct_[std::size_t(c) * cfg_.n_mels + m] * upstream.at(t, c);
        gl[std::size_t(m)] = acc;
      }
      // log adjoint, masked where the floor binds
      for (int m = 0; m < cfg_.n_mels; ++m) {
        double e = trace->mel_energy[std::size_t(t) * cfg_.n_mels + m];
        gl[std::size_t(m)] = e > cfg_.log_floor ? gl[std::size_t(m)] / e : 0.0;
      }
      // filterbank transpose
      std::fill(gp.begin(), gp.end(), 0.0);
      for (int m = 0; m < cfg_.n_mels; ++m) {
        const MelFilter& f = mel_[std::size_t(m)];
        double g = gl[std::size_t(m)];
        if (g == 0.0) continue;
        for (std::size_t j = 0; j < f.w.size(); ++j) gp[std::size_t(f.start) + j] += f.w[j] * g;
      }
      // power-spectrum adjoint: d|X|^2 contributes 2*g*X on kept bins
      std::fill(gspec.begin(), gspec.end(), cplx(0, 0));
      for (int k = 0; k < nbins_; ++k)
        gspec[std::size_t(k)] = 2.0 * gp[std::size_t(k)] * trace->spectra[std::size_t(t) * nbins_ + k];
      plan_.adjoint(gspec);
      // window adjoint, accumulate over overlapping frames
      double* dst = gpre.data() + std::size_t(t) * fshift_;
      for (int i = 0; i < flen_; ++i) dst[i] += gspec[std::size_t(i)].real() * window_[std::size_t(i)];
    }

    // pre-emphasis adjoint
    std::vector<double> gx(n);
    const double a = cfg_.preemphasis;
    for (std::size_t i = 0; i + 1 < n; ++i) gx[i] = gpre[i] - a * gpre[i + 1];
    gx[n - 1] = gpre[n - 1];
    return gx;
  }

 private:
  struct MelFilter {
    int start = 0;
    std::vector<double> w;
  };

  static std::size_t checked_fft_size(const MfccConfig& cfg, int fs) {
    if (!is_pow2(std::size_t(cfg.fft_size)))
      throw ConfigError("mfcc: fft_size must be a power of two");
    if (cfg.fft_size < cfg.frame_len(fs))
      throw ConfigError("mfcc: fft_size " + std::to_string(cfg.fft_size) +
                        " smaller than frame length " + std::to_string(cfg.frame_len(fs)));
    return std::size_t(cfg.fft_size);
  }

  void check_input(const Waveform& w) const {
    if (w.sample_rate != fs_)
      throw DataError("mfcc: waveform rate " + std::to_string(w.sample_rate) +
                      " != configured " + std::to_string(fs_));
    if (w.size() < std::size_t(flen_))
      throw DataError("mfcc: waveform too short: need at least " + std::to_string(flen_) +
                      " samples, got " + std::to_string(w.size()));
  }

  std::vector<double> preemphasize(const std::vector<double>& x) const {
    std::vector<double> y(x.size());
    y[0] = x[0];
    const double a = cfg_.preemphasis;
    for (std::size_t i = 1; i < x.size(); ++i) y[i] = x[i] - a * x[i - 1];
    return y;
  }

  void build_window() {
    window_.resize(std::size_t(flen_));
    const double two_pi = 6.283185307179586;
    for (int i = 0; i < flen_; ++i) {
      double u = flen_ > 1 ? double(i) / (flen_ - 1) : 0.0;
      switch (cfg_.window) {
        case WindowKind::Hamming: window_[std::size_t(i)] = 0.54 - 0.46 * std::cos(two_pi * u); break;
        case WindowKind::Hann: window_[std::size_t(i)] = 0.5 - 0.5 * std::cos(two_pi * u); break;
        case WindowKind::Rect: window_[std::size_t(i)] = 1.0; break;
      }
    }
  }

  static double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
  static double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

  void build_mel_filters() {
    const int M = cfg_.n_mels;
    hz_points_.resize(std::size_t(M) + 2);
    double mel_hi = hz_to_mel(fs_ / 2.0);
    for (int p = 0; p < M + 2; ++p) hz_points_[std::size_t(p)] = mel_to_hz(mel_hi * p / (M + 1));

    mel_.resize(std::size_t(M));
    for (int m = 0; m < M; ++m) {
      double lo = hz_points_[std::size_t(m)];
      double c = hz_points_[std::size_t(m) + 1];
      double hi = hz_points_[std::size_t(m) + 2];
      std::vector<double> w;
      int start = -1;
      for (int k = 0; k < nbins_; ++k) {
        double f = double(k) * fs_ / cfg_.fft_size;
        double v = 0.0;
        if (f >= lo && f <= c && c > lo) v = (f - lo) / (c - lo);
        else if (f > c && f <= hi && hi > c) v = (hi - f) / (hi - c);
        if (v > 0.0) {
          if (start < 0) start = k;
          w.push_back(v);
        } else if (start >= 0 && f > hi) {
          break;
        }
      }
      mel_[std::size_t(m)].start = std::max(start, 0);
      mel_[std::size_t(m)].w = std::move(w);
    }
  }

  void build_dct() {
    const int M = cfg_.n_mels;
    dct_.resize(std::size_t(cfg_.n_coeffs) * M);
    const double pi = 3.14159265358979323846;
    for (int c = 0; c < cfg_.n_coeffs; ++c) {
      double scale = c == 0 ? std::sqrt(1.0 / M) : std::sqrt(2.0 / M);
      for (int m = 0; m < M; ++m)
        dct_[std::size_t(c) * M + m] = scale * std::cos(pi * c * (m + 0.5) / M);
    }
  }

  MfccConfig cfg_;
  int fs_;
  Fft plan_;
  int flen_ = 0, fshift_ = 0, nbins_ = 0;
  std::vector<double> window_;
  std::vector<double> hz_points_;
  std::vector<MelFilter> mel_;
  std::vector<double> dct_;
};

inline FeatureMatrix mfcc_forward(const Waveform& w, const MfccConfig& cfg) {
  return Mfcc(cfg, w.sample_rate).forward(w);
}

inline std::vector<double> mfcc_backward(const Waveform& w, const MfccConfig& cfg,
                                         const FeatureMatrix& upstream) {
  return Mfcc(cfg, w.sample_rate).backward(w, upstream);
}

}  // namespace uap
