// Iterative radix-2 complex FFT with a precomputed plan, plus linear
// convolution helpers (direct and FFT-based).
#pragma once

#include <complex>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace uap {

using cplx = std::complex<double>;

inline bool is_pow2(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

inline std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

class Fft {
 public:
  explicit Fft(std::size_t n) : n_(n) {
    if (!is_pow2(n)) throw std::invalid_argument("Fft: size must be a power of two");
    rev_.resize(n);
    std::size_t log2n = 0;
    while ((std::size_t(1) << log2n) < n) ++log2n;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t r = 0;
      for (std::size_t b = 0; b < log2n; ++b)
        if (i & (std::size_t(1) << b)) r |= std::size_t(1) << (log2n - 1 - b);
      rev_[i] = r;
    }
    // twiddles for each butterfly stage, e^{-i*2*pi*k/len}; stage for
    // block size len starts at offset len/2 - 1 (n - 1 entries total)
    tw_.resize(n - 1);
    const double two_pi = 2.0 * 3.14159265358979323846;
    for (std::size_t len = 2; len <= n; len <<= 1) {
      for (std::size_t k = 0; k < len / 2; ++k) {
        double ang = -two_pi * double(k) / double(len);
        tw_[stage_offset(len) + k] = cplx(std::cos(ang), std::sin(ang));
      }
    }
  }

  std::size_t size() const { return n_; }

  // in-place DFT: X[k] = sum_n x[n] e^{-2*pi*i*k*n/N}
  void forward(std::vector<cplx>& a) const {
    if (a.size() != n_) throw std::invalid_argument("Fft::forward: size mismatch");
    for (std::size_t i = 0; i < n_; ++i)
      if (i < rev_[i]) std::swap(a[i], a[rev_[i]]);
    for (std::size_t len = 2; len <= n_; len <<= 1) {
      std::size_t half = len / 2;
      const cplx* w = &tw_[stage_offset(len)];
      for (std::size_t i = 0; i < n_; i += len) {
        for (std::size_t k = 0; k < half; ++k) {
          cplx u = a[i + k];
          cplx v = a[i + k + half] * w[k];
          a[i + k] = u + v;
          a[i + k + half] = u - v;
        }
      }
    }
  }

  // in-place inverse including the 1/N factor
  void inverse(std::vector<cplx>& a) const {
    for (auto& z : a) z = std::conj(z);
    forward(a);
    double s = 1.0 / double(n_);
    for (auto& z : a) z = std::conj(z) * s;
  }

  // unnormalized adjoint transform: y[n] = sum_k a[k] e^{+2*pi*i*k*n/N}
  void adjoint(std::vector<cplx>& a) const {
    for (auto& z : a) z = std::conj(z);
    forward(a);
    for (auto& z : a) z = std::conj(z);
  }

 private:
  static std::size_t stage_offset(std::size_t len) { return len / 2 - 1; }

  std::size_t n_;
  std::vector<std::size_t> rev_;
  std::vector<cplx> tw_;
};

// full linear convolution, output length |a| + |b| - 1
inline std::vector<double> convolve_direct_full(const std::vector<double>& a,
                                                const std::vector<double>& b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("convolve: empty input");
  std::vector<double> out(a.size() + b.size() - 1, 0.0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    double ai = a[i];
    if (ai == 0.0) continue;
    for (std::size_t j = 0; j < b.size(); ++j) out[i + j] += ai * b[j];
  }
  return out;
}

inline std::vector<double> convolve_fft_full(const std::vector<double>& a,
                                             const std::vector<double>& b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("convolve: empty input");
  std::size_t out_len = a.size() + b.size() - 1;
  std::size_t n = next_pow2(out_len);
  Fft plan(n);
  std::vector<cplx> fa(n, cplx(0, 0)), fb(n, cplx(0, 0));
  for (std::size_t i = 0; i < a.size(); ++i) fa[i] = a[i];
  for (std::size_t i = 0; i < b.size(); ++i) fb[i] = b[i];
  plan.forward(fa);
  plan.forward(fb);
  for (std::size_t i = 0; i < n; ++i) fa[i] *= fb[i];
  plan.inverse(fa);
  std::vector<double> out(out_len);
  for (std::size_t i = 0; i < out_len; ++i) out[i] = fa[i].real();
  return out;
}

}  // namespace uap
