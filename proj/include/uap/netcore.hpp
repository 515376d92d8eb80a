// Minimal reverse-mode operator set: dilated 1-D convolution over
// frames, affine, ReLU, statistics pooling, softmax scoring, Adam, and
// a finite-difference gradient checker. Every op is a fwd/bwd pair with
// an exact adjoint; no hidden RNG anywhere.
#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "uap/common.hpp"

namespace uap {

struct Mat {
  int rows = 0, cols = 0;
  std::vector<double> v;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), v(std::size_t(r) * std::size_t(c), 0.0) {}

  double& at(int r, int c) { return v[std::size_t(r) * cols + c]; }
  double at(int r, int c) const { return v[std::size_t(r) * cols + c]; }
  double* row(int r) { return v.data() + std::size_t(r) * cols; }
  const double* row(int r) const { return v.data() + std::size_t(r) * cols; }
};

// Dense parameter with a same-shape gradient accumulator.
struct Parameter {
  std::string name;
  std::vector<double> values;
  std::vector<double> grad;

  Parameter() = default;
  Parameter(std::string n, std::size_t size)
      : name(std::move(n)), values(size, 0.0), grad(size, 0.0) {}

  std::size_t size() const { return values.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

// --- dilated temporal convolution ------------------------------------------
// out[t, co] = sum_{j, ci} in[t + j*d, ci] * K[j, ci, co]
// valid (no padding): out rows = T - (k-1)*d

inline int conv1d_out_rows(int in_rows, int k, int dilation) {
  return in_rows - (k - 1) * dilation;
}

inline Mat conv1d_dilated_fwd(const Mat& in, const double* kernel, int k, int cin, int cout,
                              int dilation) {
  if (in.cols != cin) throw std::invalid_argument("conv1d: input channel mismatch");
  int out_rows = conv1d_out_rows(in.rows, k, dilation);
  if (out_rows < 1)
    throw DataError("conv1d: input has " + std::to_string(in.rows) + " frames, needs at least " +
                    std::to_string((k - 1) * dilation + 1));
  Mat out(out_rows, cout);
  for (int t = 0; t < out_rows; ++t) {
    double* orow = out.row(t);
    for (int j = 0; j < k; ++j) {
      const double* irow = in.row(t + j * dilation);
      const double* kslab = kernel + std::size_t(j) * cin * cout;
      for (int ci = 0; ci < cin; ++ci) {
        double x = irow[ci];
        if (x == 0.0) continue;
        const double* krow = kslab + std::size_t(ci) * cout;
        for (int co = 0; co < cout; ++co) orow[co] += x * krow[co];
      }
    }
  }
  return out;
}

// gin and gkernel are optional accumulation targets (either may be null)
inline void conv1d_dilated_bwd(const Mat& in, const double* kernel, int k, int cin, int cout,
                               int dilation, const Mat& gout, Mat* gin, double* gkernel) {
  int out_rows = conv1d_out_rows(in.rows, k, dilation);
  if (gout.rows != out_rows || gout.cols != cout)
    throw std::invalid_argument("conv1d backward: upstream shape mismatch");
  if (gin && (gin->rows != in.rows || gin->cols != in.cols))
    throw std::invalid_argument("conv1d backward: gin shape mismatch");
  for (int t = 0; t < out_rows; ++t) {
    const double* grow = gout.row(t);
    for (int j = 0; j < k; ++j) {
      const double* kslab = kernel + std::size_t(j) * cin * cout;
      const double* irow = in.row(t + j * dilation);
      double* girow = gin ? gin->row(t + j * dilation) : nullptr;
      double* gkslab = gkernel ? gkernel + std::size_t(j) * cin * cout : nullptr;
      for (int ci = 0; ci < cin; ++ci) {
        if (girow) {
          const double* krow = kslab + std::size_t(ci) * cout;
          double acc = 0.0;
          for (int co = 0; co < cout; ++co) acc += grow[co] * krow[co];
          girow[ci] += acc;
        }
        if (gkslab) {
          double x = irow[ci];
          double* gkrow = gkslab + std::size_t(ci) * cout;
          for (int co = 0; co < cout; ++co) gkrow[co] += x * grow[co];
        }
      }
    }
  }
}

// per-row bias over a frame matrix
inline void bias_add_rows(Mat& m, const double* bias) {
  for (int t = 0; t < m.rows; ++t) {
    double* row = m.row(t);
    for (int c = 0; c < m.cols; ++c) row[c] += bias[c];
  }
}

inline void bias_add_rows_bwd(const Mat& gout, double* gbias) {
  for (int t = 0; t < gout.rows; ++t) {
    const double* row = gout.row(t);
    for (int c = 0; c < gout.cols; ++c) gbias[c] += row[c];
  }
}

// --- ReLU -------------------------------------------------------------------
// subgradient at 0 is 0

inline Mat relu_fwd(const Mat& a) {
  Mat out(a.rows, a.cols);
  for (std::size_t i = 0; i < a.v.size(); ++i) out.v[i] = a.v[i] > 0.0 ? a.v[i] : 0.0;
  return out;
}

inline Mat relu_bwd(const Mat& a, const Mat& gout) {
  if (a.rows != gout.rows || a.cols != gout.cols)
    throw std::invalid_argument("relu backward: shape mismatch");
  Mat g(a.rows, a.cols);
  for (std::size_t i = 0; i < a.v.size(); ++i) g.v[i] = a.v[i] > 0.0 ? gout.v[i] : 0.0;
  return g;
}

inline std::vector<double> relu_fwd(const std::vector<double>& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
  return out;
}

inline std::vector<double> relu_bwd(const std::vector<double>& a, const std::vector<double>& gout) {
  if (a.size() != gout.size()) throw std::invalid_argument("relu backward: shape mismatch");
  std::vector<double> g(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) g[i] = a[i] > 0.0 ? gout[i] : 0.0;
  return g;
}

// --- statistics pooling ------------------------------------------------------
// T x C frames -> [mean_0..mean_{C-1}, std_0..std_{C-1}] with
// std = sqrt(population variance + variance_floor)

inline std::vector<double> stats_pool_fwd(const Mat& in, double variance_floor) {
  if (in.rows < 1) throw DataError("stats_pool: empty input");
  const int C = in.cols;
  std::vector<double> out(std::size_t(C) * 2, 0.0);
  for (int t = 0; t < in.rows; ++t) {
    const double* row = in.row(t);
    for (int c = 0; c < C; ++c) out[std::size_t(c)] += row[c];
  }
  for (int c = 0; c < C; ++c) out[std::size_t(c)] /= in.rows;
  for (int t = 0; t < in.rows; ++t) {
    const double* row = in.row(t);
    for (int c = 0; c < C; ++c) {
      double d = row[c] - out[std::size_t(c)];
      out[std::size_t(C) + c] += d * d;
    }
  }
  for (int c = 0; c < C; ++c)
    out[std::size_t(C) + c] = std::sqrt(out[std::size_t(C) + c] / in.rows + variance_floor);
  return out;
}

inline Mat stats_pool_bwd(const Mat& in, double variance_floor, const std::vector<double>& gout) {
  if (in.rows < 1) throw DataError("stats_pool: empty input");
  const int C = in.cols;
  if (gout.size() != std::size_t(C) * 2)
    throw std::invalid_argument("stats_pool backward: upstream shape mismatch");
  std::vector<double> stats = stats_pool_fwd(in, variance_floor);
  Mat g(in.rows, C);
  const double inv_t = 1.0 / in.rows;
  for (int t = 0; t < in.rows; ++t) {
    const double* row = in.row(t);
    double* grow = g.row(t);
    for (int c = 0; c < C; ++c) {
      double mean = stats[std::size_t(c)];
      double sd = stats[std::size_t(C) + c];
      grow[c] = gout[std::size_t(c)] * inv_t +
                gout[std::size_t(C) + c] * (row[c] - mean) * inv_t / sd;
    }
  }
  return g;
}

// --- affine (dense) -----------------------------------------------------------
// y = W x + b, W row-major (out x in)

inline std::vector<double> affine_fwd(const std::vector<double>& x, const double* W,
                                      const double* b, int out_dim, int in_dim) {
  if (x.size() != std::size_t(in_dim)) throw std::invalid_argument("affine: input size mismatch");
  std::vector<double> y(std::size_t(out_dim));
  for (int o = 0; o < out_dim; ++o) {
    const double* wrow = W + std::size_t(o) * in_dim;
    double acc = b ? b[o] : 0.0;
    for (int i = 0; i < in_dim; ++i) acc += wrow[i] * x[std::size_t(i)];
    y[std::size_t(o)] = acc;
  }
  return y;
}

inline void affine_bwd(const std::vector<double>& x, const double* W, int out_dim, int in_dim,
                       const std::vector<double>& gy, std::vector<double>* gx, double* gW,
                       double* gb) {
  if (gy.size() != std::size_t(out_dim))
    throw std::invalid_argument("affine backward: upstream shape mismatch");
  if (gx) {
    gx->assign(std::size_t(in_dim), 0.0);
    for (int o = 0; o < out_dim; ++o) {
      const double* wrow = W + std::size_t(o) * in_dim;
      double g = gy[std::size_t(o)];
      for (int i = 0; i < in_dim; ++i) (*gx)[std::size_t(i)] += wrow[i] * g;
    }
  }
  if (gW) {
    for (int o = 0; o < out_dim; ++o) {
      double g = gy[std::size_t(o)];
      double* grow = gW + std::size_t(o) * in_dim;
      for (int i = 0; i < in_dim; ++i) grow[i] += g * x[std::size_t(i)];
    }
  }
  if (gb)
    for (int o = 0; o < out_dim; ++o) gb[o] += gy[std::size_t(o)];
}

// --- softmax scoring head -------------------------------------------------------
// Per-class affine scores over the embedding followed by softmax; the
// differentiable stand-in for a generative scoring backend.

inline std::vector<double> softmax(const std::vector<double>& scores) {
  double mx = scores[0];
  for (double s : scores) mx = std::max(mx, s);
  std::vector<double> p(scores.size());
  double z = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    p[i] = std::exp(scores[i] - mx);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

// gradient w.r.t. scores from gradient w.r.t. probabilities
inline std::vector<double> softmax_bwd(const std::vector<double>& probs,
                                       const std::vector<double>& gprobs) {
  if (probs.size() != gprobs.size()) throw std::invalid_argument("softmax backward: shape mismatch");
  double dot = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) dot += probs[i] * gprobs[i];
  std::vector<double> gs(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) gs[i] = probs[i] * (gprobs[i] - dot);
  return gs;
}

inline std::vector<double> score_probs_fwd(const std::vector<double>& emb, const double* W,
                                           const double* b, int classes, int emb_dim) {
  if (classes < 2) throw std::invalid_argument("score_probs: need at least 2 classes");
  return softmax(affine_fwd(emb, W, b, classes, emb_dim));
}

inline void score_probs_bwd(const std::vector<double>& emb, const double* W, int classes,
                            int emb_dim, const std::vector<double>& probs,
                            const std::vector<double>& gprobs, std::vector<double>* gemb,
                            double* gW, double* gb) {
  std::vector<double> gscores = softmax_bwd(probs, gprobs);
  affine_bwd(emb, W, classes, emb_dim, gscores, gemb, gW, gb);
}

// --- Adam ------------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(const AdamConfig& cfg, std::vector<Parameter*> params)
      : cfg_(cfg), params_(std::move(params)) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const Parameter* p : params_) {
      m_.emplace_back(p->size(), 0.0);
      v_.emplace_back(p->size(), 0.0);
    }
  }

  void step() {
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
      Parameter& p = *params_[pi];
      std::vector<double>& m = m_[pi];
      std::vector<double>& v = v_[pi];
      for (std::size_t i = 0; i < p.size(); ++i) {
        double g = p.grad[i];
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
        double mhat = m[i] / bc1;
        double vhat = v[i] / bc2;
        p.values[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

  int step_count() const { return t_; }

 private:
  AdamConfig cfg_;
  std::vector<Parameter*> params_;
  std::vector<std::vector<double>> m_, v_;
  int t_ = 0;
};

// --- finite-difference gradient check ------------------------------------------

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;
  bool pass = false;
};

// Compares an analytic gradient against central differences of f.
// Relative error per coordinate uses max(|fd|, |analytic|) as the scale;
// near-zero pairs compare absolutely.
inline GradCheckReport gradcheck(const std::function<double(const std::vector<double>&)>& f,
                                 const std::vector<double>& x,
                                 const std::vector<double>& analytic_grad, double step = 1e-5,
                                 double tolerance = 1e-4) {
  if (x.size() != analytic_grad.size())
    throw std::invalid_argument("gradcheck: gradient size mismatch");
  GradCheckReport rep;
  std::vector<double> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double h = step * std::max(1.0, std::fabs(x[i]));
    probe[i] = x[i] + h;
    double fp = f(probe);
    probe[i] = x[i] - h;
    double fm = f(probe);
    probe[i] = x[i];
    double fd = (fp - fm) / (2.0 * h);
    double a = analytic_grad[i];
    double scale = std::max(std::fabs(fd), std::fabs(a));
    double rel = std::fabs(fd - a) / std::max(scale, 1e-6);
    if (rel > rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.worst_index = i;
    }
  }
  rep.pass = rep.max_rel_err <= tolerance;
  return rep;
}

// Central-difference directional derivative of a scalar function, used by
// adjoint-identity tests on nonlinear ops.
inline double directional_derivative(const std::function<double(const std::vector<double>&)>& f,
                                     const std::vector<double>& x, const std::vector<double>& dir,
                                     double h = 1e-6) {
  std::vector<double> xp = x, xm = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    xp[i] += h * dir[i];
    xm[i] -= h * dir[i];
  }
  return (f(xp) - f(xm)) / (2.0 * h);
}

}  // namespace uap
