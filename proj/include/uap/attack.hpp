// Universal targeted perturbation synthesis. A short trainable unit is
// tiled to the utterance length, clipped to the attack strength, added
// to the victim signal, optionally pushed through a random train-split
// room response, and optimized against a confidence-margin hinge on the
// classifier's output probabilities. Also the per-utterance individual
// attack used as the timing baseline.
#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "uap/audio.hpp"
#include "uap/common.hpp"
#include "uap/netcore.hpp"
#include "uap/room.hpp"
#include "uap/xvector.hpp"

namespace uap {

enum class RirMode { None, Set };

struct AttackConfig {
  double epsilon = 0.05;          // per-sample bound on the perturbation
  double kappa = 0.0;             // confidence margin; 0 = plain success
  double delta_len_s = 1.0;       // length of the trainable unit
  SpeakerLabel target{0};
  double learning_rate = 2e-3;
  int max_epochs = 50;
  double success_threshold = 0.95;  // early stop on train success rate
  RirMode rir_mode = RirMode::None;
  std::uint64_t seed = 1;
  int individual_max_iters = 300;  // cap for the per-utterance baseline
  bool skip_when_successful = true;  // skip the update on already-successful utterances
};

inline void validate(const AttackConfig& cfg, int num_speakers) {
  if (!(cfg.epsilon > 0 && cfg.epsilon <= 1))
    throw ConfigError("attack: epsilon must lie in (0,1]");
  if (cfg.kappa < 0) throw ConfigError("attack: kappa must be non-negative");
  if (cfg.delta_len_s <= 0) throw ConfigError("attack: delta_len_s must be positive");
  if (cfg.target.index < 0 || cfg.target.index >= num_speakers)
    throw ConfigError("attack: target label " + std::to_string(cfg.target.index) +
                      " outside enrolled set of " + std::to_string(num_speakers));
  if (cfg.max_epochs < 0) throw ConfigError("attack: max_epochs must be non-negative");
}

struct UniversalPerturbation {
  Waveform delta_unit;  // within [-epsilon, epsilon] once finalized
  double epsilon = 0.0;
  SpeakerLabel target;
  // training metadata
  int epochs_run = 0;
  double final_train_success = 0.0;
  std::string rir_provenance = "none";
  std::uint64_t seed = 0;
};

// delta[i] = unit[i mod len(unit)], cropped to target_len
inline Waveform build_delta(const Waveform& unit, std::size_t target_len) {
  if (unit.samples.empty()) throw DataError("build_delta: empty perturbation unit");
  if (target_len == 0) throw DataError("build_delta: zero target length");
  Waveform out;
  out.sample_rate = unit.sample_rate;
  out.samples.resize(target_len);
  const std::size_t L = unit.samples.size();
  for (std::size_t i = 0; i < target_len; ++i) out.samples[i] = unit.samples[i % L];
  return out;
}

inline Waveform clip_eps(const Waveform& delta, double epsilon) {
  if (epsilon < 0) throw std::invalid_argument("clip_eps: negative epsilon");
  Waveform out = delta;
  for (double& s : out.samples) s = std::clamp(s, -epsilon, epsilon);
  return out;
}

// x' = x + Clip_eps(tiled delta); not re-clamped to [-1,1] in memory
inline Waveform apply_perturbation(const Waveform& x, const UniversalPerturbation& p) {
  if (x.samples.empty()) throw std::invalid_argument("apply_perturbation: empty input");
  Waveform out;
  out.sample_rate = x.sample_rate;
  out.samples.resize(x.size());
  const std::size_t L = p.delta_unit.samples.size();
  if (L == 0) throw DataError("apply_perturbation: empty perturbation unit");
  const double eps = p.epsilon;
  for (std::size_t i = 0; i < x.size(); ++i)
    out.samples[i] = x.samples[i] + std::clamp(p.delta_unit.samples[i % L], -eps, eps);
  return out;
}

// hinge on probabilities: max(max_{i != t} p_i - p_t, -kappa)
inline double cw_loss(const std::vector<double>& probs, SpeakerLabel t, double kappa) {
  if (probs.size() < 2) throw std::invalid_argument("cw_loss: need at least 2 classes");
  if (t.index < 0 || std::size_t(t.index) >= probs.size())
    throw std::invalid_argument("cw_loss: target out of range");
  double best_other = -1.0;
  for (std::size_t i = 0; i < probs.size(); ++i)
    if (int(i) != t.index && probs[i] > best_other) best_other = probs[i];
  return std::max(best_other - probs[std::size_t(t.index)], -kappa);
}

// loss plus subgradient w.r.t. probabilities; the max over non-target
// classes routes to the single argmax (lowest index on ties), and the
// gradient vanishes at the -kappa floor.
inline double cw_loss_grad(const std::vector<double>& probs, SpeakerLabel t, double kappa,
                           std::vector<double>* gprobs) {
  if (probs.size() < 2) throw std::invalid_argument("cw_loss: need at least 2 classes");
  int runner = -1;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (int(i) == t.index) continue;
    if (runner < 0 || probs[i] > probs[std::size_t(runner)]) runner = int(i);
  }
  double margin = probs[std::size_t(runner)] - probs[std::size_t(t.index)];
  if (gprobs) gprobs->assign(probs.size(), 0.0);
  if (margin > -kappa) {
    if (gprobs) {
      (*gprobs)[std::size_t(runner)] = 1.0;
      (*gprobs)[std::size_t(t.index)] = -1.0;
    }
    return margin;
  }
  return -kappa;
}

struct AttackEpochStats {
  int epoch = 0;
  double mean_loss = 0.0;
  double success_rate = 0.0;
};

using AttackTrainingLog = std::vector<AttackEpochStats>;

inline void save_attack_log(const std::filesystem::path& path, const AttackTrainingLog& log) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("attack log: cannot create " + path.string());
  f << "epoch,loss,train_success_rate\n";
  char buf[96];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g\n", e.epoch, e.mean_loss, e.success_rate);
    f << buf;
  }
}

// One optimization step's gradient route from the channel input back to
// the perturbation unit: clip mask where the bound binds, then sum over
// tile repetitions.
inline void reduce_to_unit(const std::vector<double>& g_xprime, const std::vector<double>& unit,
                           double epsilon, std::vector<double>& gunit) {
  const std::size_t L = unit.size();
  for (std::size_t i = 0; i < g_xprime.size(); ++i) {
    std::size_t j = i % L;
    if (std::fabs(unit[j]) <= epsilon) gunit[j] += g_xprime[i];
  }
}

inline UniversalPerturbation train_universal(const SpeakerModel& model,
                                             const std::vector<Utterance>& corpus_train,
                                             const AttackConfig& cfg, const RirSet* rirs,
                                             AttackTrainingLog* log_out = nullptr) {
  validate(cfg, model.num_speakers());
  std::vector<const Utterance*> victims;
  for (const auto& u : corpus_train)
    if (u.speaker != cfg.target) victims.push_back(&u);
  if (victims.empty()) throw DataError("attack: empty victim set for target " +
                                       std::to_string(cfg.target.index));

  std::vector<std::size_t> train_rirs;
  if (cfg.rir_mode == RirMode::Set) {
    if (!rirs) throw ConfigError("attack: rir_mode=set but no RIR set supplied");
    train_rirs = rirs->indices(Split::Train);
    if (train_rirs.empty()) throw DataError("attack: RIR set has no train split");
  }

  const int fs = model.sample_rate();
  const std::size_t unit_len = std::size_t(std::lround(cfg.delta_len_s * fs));

  Rng init_rng(mix_seed(cfg.seed, 0));
  Rng shuffle_rng(mix_seed(cfg.seed, 1));
  Rng rir_rng(mix_seed(cfg.seed, 2));

  Parameter delta("delta", unit_len);
  for (double& v : delta.values) v = init_rng.uniform(-cfg.epsilon / 10, cfg.epsilon / 10);
  Adam adam(AdamConfig{cfg.learning_rate, 0.9, 0.999, 1e-8}, {&delta});

  std::vector<std::size_t> order(victims.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  AttackTrainingLog log;
  int epochs_run = 0;
  double train_success = 0.0;
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    int successes = 0;
    for (std::size_t oi : order) {
      const Utterance& u = *victims[oi];
      const std::size_t n = u.waveform.size();

      Waveform xprime;
      xprime.sample_rate = fs;
      xprime.samples.resize(n);
      for (std::size_t i = 0; i < n; ++i)
        xprime.samples[i] = u.waveform.samples[i] +
                            std::clamp(delta.values[i % unit_len], -cfg.epsilon, cfg.epsilon);

      const Rir* channel = nullptr;
      if (cfg.rir_mode == RirMode::Set)
        channel = &rirs->rirs[train_rirs[rir_rng.uniform_int(train_rirs.size())]];
      Waveform y = channel ? convolve(xprime, *channel) : std::move(xprime);

      SpeakerModel::Trace trace;
      std::vector<double> probs = model.forward_probs(y, &trace);
      std::vector<double> gprobs;
      double loss = cw_loss_grad(probs, cfg.target, cfg.kappa, &gprobs);
      if (!std::isfinite(loss))
        throw NumericError("attack: non-finite loss at epoch " + std::to_string(epoch));
      loss_sum += loss;
      bool success = argmax_lowest(probs) == cfg.target.index;
      if (success) ++successes;

      bool at_floor = loss <= -cfg.kappa;
      if (cfg.skip_when_successful && at_floor) continue;

      std::vector<double> gy = model.waveform_grad(y, trace, gprobs);
      std::vector<double> gx = channel ? convolve_backward(gy, *channel) : std::move(gy);
      delta.zero_grad();
      reduce_to_unit(gx, delta.values, cfg.epsilon, delta.grad);
      adam.step();
    }
    AttackEpochStats st;
    st.epoch = epoch;
    st.mean_loss = loss_sum / double(victims.size());
    st.success_rate = double(successes) / double(victims.size());
    log.push_back(st);
    epochs_run = epoch + 1;
    train_success = st.success_rate;
    if (st.success_rate >= cfg.success_threshold) break;
  }

  UniversalPerturbation p;
  p.delta_unit.sample_rate = fs;
  p.delta_unit.samples = delta.values;
  for (double& v : p.delta_unit.samples) v = std::clamp(v, -cfg.epsilon, cfg.epsilon);
  p.epsilon = cfg.epsilon;
  p.target = cfg.target;
  p.epochs_run = epochs_run;
  p.final_train_success = train_success;
  p.rir_provenance = cfg.rir_mode == RirMode::Set
                         ? "set:" + std::to_string(train_rirs.size())
                         : "none";
  p.seed = cfg.seed;
  if (log_out) *log_out = std::move(log);
  return p;
}

// --- per-utterance baseline ------------------------------------------------------

struct IndividualAttackResult {
  Waveform delta;  // full-length, within [-epsilon, epsilon]
  bool success = false;
  int iterations = 0;
  double seconds = 0.0;
};

// Free (non-universal) perturbation for a single utterance under the
// same loss and clipping; wall time is recorded for the speedup figure.
inline IndividualAttackResult train_individual(const SpeakerModel& model, const Waveform& x,
                                               const AttackConfig& cfg) {
  validate(cfg, model.num_speakers());
  auto t0 = std::chrono::steady_clock::now();
  IndividualAttackResult res;
  res.delta.sample_rate = x.sample_rate;
  res.delta.samples.assign(x.size(), 0.0);

  if (model.predict(x).index == cfg.target.index) {
    res.success = true;
    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
  }

  Parameter delta("delta", x.size());
  Adam adam(AdamConfig{cfg.learning_rate, 0.9, 0.999, 1e-8}, {&delta});
  for (int it = 0; it < cfg.individual_max_iters; ++it) {
    Waveform xprime;
    xprime.sample_rate = x.sample_rate;
    xprime.samples.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i)
      xprime.samples[i] = x.samples[i] + std::clamp(delta.values[i], -cfg.epsilon, cfg.epsilon);

    SpeakerModel::Trace trace;
    std::vector<double> probs = model.forward_probs(xprime, &trace);
    res.iterations = it + 1;
    if (argmax_lowest(probs) == cfg.target.index) {
      res.success = true;
      break;
    }
    std::vector<double> gprobs;
    cw_loss_grad(probs, cfg.target, cfg.kappa, &gprobs);
    std::vector<double> gx = model.waveform_grad(xprime, trace, gprobs);
    delta.zero_grad();
    for (std::size_t i = 0; i < x.size(); ++i)
      if (std::fabs(delta.values[i]) <= cfg.epsilon) delta.grad[i] = gx[i];
    adam.step();
  }
  for (std::size_t i = 0; i < x.size(); ++i)
    res.delta.samples[i] = std::clamp(delta.values[i], -cfg.epsilon, cfg.epsilon);
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

// --- persistence -------------------------------------------------------------------
// float32 WAV of the unit plus a key-value metadata record.

inline void save_perturbation(const std::filesystem::path& base, const UniversalPerturbation& p) {
  write_wav_f32(std::filesystem::path(base).concat(".wav"), p.delta_unit);
  std::ofstream f(std::filesystem::path(base).concat(".meta"), std::ios::trunc);
  if (!f) throw DataError("perturbation: cannot create metadata for " + base.string());
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "format_version 1\n"
                "epsilon %.17g\n"
                "target %d\n"
                "seed %llu\n"
                "epochs_run %d\n"
                "final_train_success %.17g\n"
                "rir_provenance %s\n",
                p.epsilon, p.target.index, static_cast<unsigned long long>(p.seed), p.epochs_run,
                p.final_train_success, p.rir_provenance.c_str());
  f << buf;
}

inline UniversalPerturbation load_perturbation(const std::filesystem::path& base) {
  std::ifstream f(std::filesystem::path(base).concat(".meta"));
  if (!f) throw DataError("perturbation: cannot open metadata " + base.string() + ".meta");
  UniversalPerturbation p;
  int version = 0;
  std::string key;
  while (f >> key) {
    if (key == "format_version") f >> version;
    else if (key == "epsilon") f >> p.epsilon;
    else if (key == "target") f >> p.target.index;
    else if (key == "seed") { unsigned long long s = 0; f >> s; p.seed = s; }
    else if (key == "epochs_run") f >> p.epochs_run;
    else if (key == "final_train_success") f >> p.final_train_success;
    else if (key == "rir_provenance") f >> p.rir_provenance;
    else throw DataError("perturbation: unknown metadata key '" + key + "'");
  }
  if (version != 1) throw DataError("perturbation: unsupported metadata version");
  p.delta_unit = read_wav_f32(std::filesystem::path(base).concat(".wav"));
  // float storage may round a hair past the bound; restore the invariant
  p.delta_unit = clip_eps(p.delta_unit, p.epsilon);
  return p;
}

}  // namespace uap
