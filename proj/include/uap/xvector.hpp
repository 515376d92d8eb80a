// End-to-end speaker classifier: MFCC -> dilated-conv frame stack ->
// statistics pooling -> embedding layers -> softmax scoring. Includes
// the training loop, evaluation, and a checksummed binary checkpoint.
#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "uap/audio.hpp"
#include "uap/common.hpp"
#include "uap/features.hpp"
#include "uap/netcore.hpp"

namespace uap {

struct TdnnSpec {
  int kernel = 3;
  int dilation = 1;
};

struct ArchConfig {
  int channels = 64;
  int embedding = 64;
  std::vector<TdnnSpec> tdnn = {{5, 1}, {3, 2}, {3, 3}};
  double variance_floor = 1e-10;
};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(char(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(char((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(char((v >> (8 * i)) & 0xff));
  }
  void i32(std::int32_t v) { u32(std::uint32_t(v)); }
  void f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    u64(bits);
  }
  void str(const std::string& s) {
    u32(std::uint32_t(s.size()));
    buf_ += s;
  }
  void raw(const char* tag, std::size_t n) { buf_.append(tag, n); }
  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(const std::string& buf, std::string what) : buf_(buf), what_(std::move(what)) {}

  std::uint8_t u8() { return std::uint8_t(take(1)[0]); }
  std::uint32_t u32() {
    const char* p = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::uint8_t(p[i])) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    const char* p = take(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(std::uint8_t(p[i])) << (8 * i);
    return v;
  }
  std::int32_t i32() { return std::int32_t(u32()); }
  double f64() {
    std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string str() {
    std::uint32_t n = u32();
    return std::string(take(n), n);
  }
  std::string raw(std::size_t n) { return std::string(take(n), n); }
  std::size_t offset() const { return off_; }

 private:
  const char* take(std::size_t n) {
    if (off_ + n > buf_.size()) throw DataError(what_ + ": truncated or corrupt file");
    const char* p = buf_.data() + off_;
    off_ += n;
    return p;
  }
  const std::string& buf_;
  std::string what_;
  std::size_t off_ = 0;
};

}  // namespace detail

class SpeakerModel {
 public:
  // Intermediates of one forward pass, consumed by backward.
  struct Trace {
    Mfcc::Trace mfcc;
    bool has_mfcc = false;
    Mat feat;                  // conv stack input
    std::vector<Mat> pre;      // per TDNN layer, pre-activation
    std::vector<Mat> post;     // per TDNN layer, post-ReLU
    std::vector<double> pooled;
    std::vector<double> hidden_pre, hidden;
    std::vector<double> embedding;
    std::vector<double> scores;
    std::vector<double> probs;
  };

  SpeakerModel(const MfccConfig& mfcc_cfg, int sample_rate, const ArchConfig& arch,
               std::vector<std::string> labels, std::uint64_t init_seed)
      : mfcc_(mfcc_cfg, sample_rate), arch_(arch), labels_(std::move(labels)) {
    if (labels_.size() < 2) throw ConfigError("model: need at least 2 enrolled speakers");
    if (arch_.channels < 1 || arch_.embedding < 1) throw ConfigError("model: bad layer widths");
    if (arch_.tdnn.empty()) throw ConfigError("model: need at least one frame-level layer");

    Rng rng(init_seed ? init_seed : 1);
    int cin = mfcc_cfg.n_coeffs;
    for (std::size_t li = 0; li < arch_.tdnn.size(); ++li) {
      const TdnnSpec& spec = arch_.tdnn[li];
      if (spec.kernel < 1 || spec.dilation < 1) throw ConfigError("model: bad tdnn layer spec");
      Layer l;
      l.k = spec.kernel;
      l.cin = cin;
      l.cout = arch_.channels;
      l.dilation = spec.dilation;
      l.kernel = Parameter("tdnn" + std::to_string(li) + ".kernel",
                           std::size_t(l.k) * l.cin * l.cout);
      l.bias = Parameter("tdnn" + std::to_string(li) + ".bias", std::size_t(l.cout));
      glorot_init(l.kernel.values, l.k * l.cin, l.cout, rng);
      layers_.push_back(std::move(l));
      cin = arch_.channels;
    }
    const int pooled_dim = 2 * arch_.channels;
    hidden_w_ = Parameter("hidden.w", std::size_t(arch_.embedding) * pooled_dim);
    hidden_b_ = Parameter("hidden.b", std::size_t(arch_.embedding));
    embed_w_ = Parameter("embed.w", std::size_t(arch_.embedding) * arch_.embedding);
    embed_b_ = Parameter("embed.b", std::size_t(arch_.embedding));
    glorot_init(hidden_w_.values, pooled_dim, arch_.embedding, rng);
    glorot_init(embed_w_.values, arch_.embedding, arch_.embedding, rng);
    // scoring head starts at zero: untrained model scores uniformly
    head_w_ = Parameter("head.w", labels_.size() * std::size_t(arch_.embedding));
    head_b_ = Parameter("head.b", labels_.size());
  }

  int num_speakers() const { return int(labels_.size()); }
  const std::vector<std::string>& labels() const { return labels_; }
  const Mfcc& mfcc() const { return mfcc_; }
  const ArchConfig& arch() const { return arch_; }
  int sample_rate() const { return mfcc_.sample_rate(); }

  // frames consumed by the dilated conv stack before one output remains
  int receptive_field_frames() const {
    int rf = 1;
    for (const Layer& l : layers_) rf += (l.k - 1) * l.dilation;
    return rf;
  }

  int min_samples() const {
    return mfcc_.frame_len() + (receptive_field_frames() - 1) * mfcc_.frame_shift();
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> ps;
    for (Layer& l : layers_) {
      ps.push_back(&l.kernel);
      ps.push_back(&l.bias);
    }
    ps.push_back(&hidden_w_);
    ps.push_back(&hidden_b_);
    ps.push_back(&embed_w_);
    ps.push_back(&embed_b_);
    ps.push_back(&head_w_);
    ps.push_back(&head_b_);
    return ps;
  }

  void zero_grads() {
    for (Parameter* p : parameters()) p->zero_grad();
  }

  Mat features_as_mat(const FeatureMatrix& f) const {
    Mat m(f.frames, f.coeffs);
    m.v = f.values;
    return m;
  }

  std::vector<double> forward_probs(const Waveform& w, Trace* trace = nullptr) const {
    Trace local;
    Trace* tr = trace ? trace : &local;
    FeatureMatrix feat = mfcc_.forward(w, &tr->mfcc);
    tr->has_mfcc = true;
    check_frames(feat.frames, w.size());
    return forward_from_features(features_as_mat(feat), tr);
  }

  // forward from precomputed features (training-time fast path)
  std::vector<double> forward_from_features(Mat feat, Trace* trace) const {
    Trace local;
    Trace* tr = trace ? trace : &local;
    check_frames(feat.rows, 0);
    tr->feat = std::move(feat);
    tr->pre.clear();
    tr->post.clear();
    const Mat* x = &tr->feat;
    for (const Layer& l : layers_) {
      Mat a = conv1d_dilated_fwd(*x, l.kernel.values.data(), l.k, l.cin, l.cout, l.dilation);
      bias_add_rows(a, l.bias.values.data());
      tr->pre.push_back(std::move(a));
      tr->post.push_back(relu_fwd(tr->pre.back()));
      x = &tr->post.back();
    }
    tr->pooled = stats_pool_fwd(*x, arch_.variance_floor);
    tr->hidden_pre = affine_fwd(tr->pooled, hidden_w_.values.data(), hidden_b_.values.data(),
                                arch_.embedding, 2 * arch_.channels);
    tr->hidden = relu_fwd(tr->hidden_pre);
    tr->embedding = affine_fwd(tr->hidden, embed_w_.values.data(), embed_b_.values.data(),
                               arch_.embedding, arch_.embedding);
    tr->scores = affine_fwd(tr->embedding, head_w_.values.data(), head_b_.values.data(),
                            num_speakers(), arch_.embedding);
    tr->probs = softmax(tr->scores);
    return tr->probs;
  }

  SpeakerLabel predict(const Waveform& w) const {
    return SpeakerLabel{argmax_lowest(forward_probs(w))};
  }

  // Backpropagates from d(loss)/d(scores). Accumulates into Parameter
  // grads when requested; returns d(loss)/d(features) when requested.
  Mat backward_scores(const Trace& tr, const std::vector<double>& gscores,
                      bool accumulate_param_grads, bool want_input_grad) {
    return backward_impl(tr, gscores, accumulate_param_grads, want_input_grad);
  }

  // Input-gradient-only path; parameters stay untouched (const).
  Mat backward_scores_input(const Trace& tr, const std::vector<double>& gscores) const {
    return const_cast<SpeakerModel*>(this)->backward_impl(tr, gscores, false, true);
  }

  // Full chain for attacks: d(loss)/d(probs) -> d(loss)/d(samples).
  std::vector<double> waveform_grad(const Waveform& w, const Trace& tr,
                                    const std::vector<double>& gprobs) const {
    if (!tr.has_mfcc) throw std::invalid_argument("waveform_grad: trace lacks mfcc intermediates");
    std::vector<double> gscores = softmax_bwd(tr.probs, gprobs);
    Mat gfeat = backward_scores_input(tr, gscores);
    FeatureMatrix up;
    up.frames = gfeat.rows;
    up.coeffs = gfeat.cols;
    up.frame_len = mfcc_.frame_len();
    up.frame_shift = mfcc_.frame_shift();
    up.values = std::move(gfeat.v);
    return mfcc_.backward(w, up, &tr.mfcc);
  }

  // cross-entropy on the true label; gscores_out = probs - onehot
  static double cross_entropy(const Trace& tr, int label, std::vector<double>* gscores_out) {
    double mx = tr.scores[0];
    for (double s : tr.scores) mx = std::max(mx, s);
    double z = 0.0;
    for (double s : tr.scores) z += std::exp(s - mx);
    double loss = -(tr.scores[std::size_t(label)] - mx - std::log(z));
    if (gscores_out) {
      *gscores_out = tr.probs;
      (*gscores_out)[std::size_t(label)] -= 1.0;
    }
    return loss;
  }

  friend void save_checkpoint(const SpeakerModel& m, const std::filesystem::path& path);
  friend SpeakerModel load_checkpoint(const std::filesystem::path& path);

 private:
  struct Layer {
    Parameter kernel, bias;
    int k = 0, cin = 0, cout = 0, dilation = 1;
  };

  static void glorot_init(std::vector<double>& w, int fan_in, int fan_out, Rng& rng) {
    double limit = std::sqrt(6.0 / (fan_in + fan_out));
    for (double& v : w) v = rng.uniform(-limit, limit);
  }

  void check_frames(int frames, std::size_t samples) const {
    int rf = receptive_field_frames();
    if (frames < rf) {
      std::string got = samples ? std::to_string(samples) + " samples (" + std::to_string(frames) + " frames)"
                                : std::to_string(frames) + " frames";
      throw DataError("model: input too short: need at least " + std::to_string(min_samples()) +
                      " samples (" + std::to_string(rf) + " frames), got " + got);
    }
  }

  Mat backward_impl(const Trace& tr, const std::vector<double>& gscores, bool want_params,
                    bool want_input) {
    if (gscores.size() != std::size_t(num_speakers()))
      throw std::invalid_argument("backward: score gradient size mismatch");

    std::vector<double> gemb;
    affine_bwd(tr.embedding, head_w_.values.data(), num_speakers(), arch_.embedding, gscores,
               &gemb, want_params ? head_w_.grad.data() : nullptr,
               want_params ? head_b_.grad.data() : nullptr);

    std::vector<double> ghidden;
    affine_bwd(tr.hidden, embed_w_.values.data(), arch_.embedding, arch_.embedding, gemb,
               &ghidden, want_params ? embed_w_.grad.data() : nullptr,
               want_params ? embed_b_.grad.data() : nullptr);
    std::vector<double> ghidden_pre = relu_bwd(tr.hidden_pre, ghidden);

    std::vector<double> gpooled;
    affine_bwd(tr.pooled, hidden_w_.values.data(), arch_.embedding, 2 * arch_.channels,
               ghidden_pre, &gpooled, want_params ? hidden_w_.grad.data() : nullptr,
               want_params ? hidden_b_.grad.data() : nullptr);

    const Mat& last = tr.post.back();
    Mat g = stats_pool_bwd(last, arch_.variance_floor, gpooled);

    for (int li = int(layers_.size()) - 1; li >= 0; --li) {
      Layer& l = layers_[std::size_t(li)];
      Mat ga = relu_bwd(tr.pre[std::size_t(li)], g);
      if (want_params) bias_add_rows_bwd(ga, l.bias.grad.data());
      const Mat& input = li == 0 ? tr.feat : tr.post[std::size_t(li) - 1];
      bool need_gin = want_input || li > 0;
      Mat gin;
      if (need_gin) gin = Mat(input.rows, input.cols);
      conv1d_dilated_bwd(input, l.kernel.values.data(), l.k, l.cin, l.cout, l.dilation, ga,
                         need_gin ? &gin : nullptr,
                         want_params ? l.kernel.grad.data() : nullptr);
      g = std::move(gin);
    }
    return g;  // empty when want_input == false
  }

  Mfcc mfcc_;
  ArchConfig arch_;
  std::vector<std::string> labels_;
  std::vector<Layer> layers_;
  Parameter hidden_w_, hidden_b_, embed_w_, embed_b_, head_w_, head_b_;
};

// --- training ----------------------------------------------------------------

struct TrainConfig {
  int epochs = 30;
  double learning_rate = 1e-3;
  std::uint64_t seed = 1;
  double target_accuracy = 0.0;  // stop early once test accuracy reaches this (0 = run all epochs)
};

struct EpochStats {
  int epoch = 0;
  double mean_loss = 0.0;
  double test_accuracy = 0.0;
};

using TrainingLog = std::vector<EpochStats>;

inline double accuracy(const SpeakerModel& m, const std::vector<Utterance>& utts) {
  if (utts.empty()) throw DataError("accuracy: empty utterance set");
  int hits = 0;
  for (const auto& u : utts)
    if (m.predict(u.waveform) == u.speaker) ++hits;
  return double(hits) / double(utts.size());
}

inline TrainingLog train(SpeakerModel& m, const std::vector<Utterance>& train_set,
                         const std::vector<Utterance>& test_set, const TrainConfig& cfg) {
  if (train_set.empty()) throw DataError("train: empty training set");
  for (const auto& u : train_set)
    if (u.speaker.index < 0 || u.speaker.index >= m.num_speakers())
      throw DataError("train: utterance label " + std::to_string(u.speaker.index) +
                      " outside enrolled set");

  // features are fixed during model training; extract once
  std::vector<Mat> train_feats, test_feats;
  train_feats.reserve(train_set.size());
  for (const auto& u : train_set)
    train_feats.push_back(m.features_as_mat(m.mfcc().forward(u.waveform)));
  test_feats.reserve(test_set.size());
  for (const auto& u : test_set)
    test_feats.push_back(m.features_as_mat(m.mfcc().forward(u.waveform)));

  auto test_accuracy = [&]() {
    if (test_set.empty()) return 0.0;
    int hits = 0;
    for (std::size_t i = 0; i < test_set.size(); ++i) {
      SpeakerModel::Trace tr;
      std::vector<double> probs = m.forward_from_features(test_feats[i], &tr);
      if (argmax_lowest(probs) == test_set[i].speaker.index) ++hits;
    }
    return double(hits) / double(test_set.size());
  };

  Adam adam(AdamConfig{cfg.learning_rate, 0.9, 0.999, 1e-8}, m.parameters());
  Rng shuffle_rng(cfg.seed);
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  TrainingLog log;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    for (std::size_t idx : order) {
      SpeakerModel::Trace tr;
      m.forward_from_features(train_feats[idx], &tr);
      std::vector<double> gscores;
      double loss = SpeakerModel::cross_entropy(tr, train_set[idx].speaker.index, &gscores);
      if (!std::isfinite(loss))
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) +
                           ", utterance " + train_set[idx].utterance_id);
      loss_sum += loss;
      m.zero_grads();
      m.backward_scores(tr, gscores, true, false);
      adam.step();
    }
    EpochStats st;
    st.epoch = epoch;
    st.mean_loss = loss_sum / double(train_set.size());
    st.test_accuracy = test_accuracy();
    log.push_back(st);
    if (cfg.target_accuracy > 0 && st.test_accuracy >= cfg.target_accuracy) break;
  }
  return log;
}

inline void save_training_log(const std::filesystem::path& path, const TrainingLog& log) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("training log: cannot create " + path.string());
  f << "epoch,loss,test_accuracy\n";
  char buf[96];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g\n", e.epoch, e.mean_loss, e.test_accuracy);
    f << buf;
  }
}

// --- checkpoint -----------------------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'X', 'V', 'E', 'C', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const SpeakerModel& m, const std::filesystem::path& path) {
  detail::ByteWriter w;
  w.raw(kCheckpointMagic, 8);
  w.u32(kCheckpointVersion);
  const MfccConfig& fc = m.mfcc_.config();
  w.i32(fc.n_coeffs);
  w.f64(fc.frame_len_ms);
  w.f64(fc.frame_shift_ms);
  w.i32(fc.n_mels);
  w.i32(fc.fft_size);
  w.f64(fc.preemphasis);
  w.u8(std::uint8_t(fc.window));
  w.f64(fc.log_floor);
  w.i32(m.sample_rate());
  w.i32(m.arch_.channels);
  w.i32(m.arch_.embedding);
  w.f64(m.arch_.variance_floor);
  w.u32(std::uint32_t(m.arch_.tdnn.size()));
  for (const auto& t : m.arch_.tdnn) {
    w.i32(t.kernel);
    w.i32(t.dilation);
  }
  w.u32(std::uint32_t(m.labels_.size()));
  for (const auto& s : m.labels_) w.str(s);
  std::vector<Parameter*> ps = const_cast<SpeakerModel&>(m).parameters();
  w.u32(std::uint32_t(ps.size()));
  for (const Parameter* p : ps) {
    w.str(p->name);
    w.u64(p->size());
    for (double v : p->values) w.f64(v);
  }
  detail::ByteWriter out;
  out.raw(w.bytes().data(), w.bytes().size());
  out.u64(fnv1a64(w.bytes().data(), w.bytes().size()));

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("checkpoint: cannot create " + path.string());
  f.write(out.bytes().data(), std::streamsize(out.bytes().size()));
  if (!f) throw DataError("checkpoint: write failed for " + path.string());
}

inline SpeakerModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("checkpoint: cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.size() < 8 + 4 + 8) throw DataError("checkpoint: truncated file " + path.string());

  std::uint64_t stored;
  {
    detail::ByteReader tail(bytes, "checkpoint");
    (void)tail.raw(bytes.size() - 8);
    stored = tail.u64();
  }
  std::uint64_t computed = fnv1a64(bytes.data(), bytes.size() - 8);
  if (stored != computed)
    throw DataError("checkpoint: checksum mismatch in " + path.string() + " (corrupt or truncated)");

  std::string body = bytes.substr(0, bytes.size() - 8);
  detail::ByteReader r(body, "checkpoint");
  if (r.raw(8) != std::string(kCheckpointMagic, 8))
    throw DataError("checkpoint: bad magic in " + path.string());
  std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw DataError("checkpoint: unsupported version " + std::to_string(version) + " (expected " +
                    std::to_string(kCheckpointVersion) + ") in " + path.string());

  MfccConfig fc;
  fc.n_coeffs = r.i32();
  fc.frame_len_ms = r.f64();
  fc.frame_shift_ms = r.f64();
  fc.n_mels = r.i32();
  fc.fft_size = r.i32();
  fc.preemphasis = r.f64();
  fc.window = WindowKind(r.u8());
  fc.log_floor = r.f64();
  int sample_rate = r.i32();

  ArchConfig arch;
  arch.channels = r.i32();
  arch.embedding = r.i32();
  arch.variance_floor = r.f64();
  std::uint32_t n_tdnn = r.u32();
  arch.tdnn.clear();
  for (std::uint32_t i = 0; i < n_tdnn; ++i) {
    TdnnSpec t;
    t.kernel = r.i32();
    t.dilation = r.i32();
    arch.tdnn.push_back(t);
  }
  std::uint32_t n_labels = r.u32();
  std::vector<std::string> labels;
  for (std::uint32_t i = 0; i < n_labels; ++i) labels.push_back(r.str());

  SpeakerModel m(fc, sample_rate, arch, std::move(labels), 1);
  std::vector<Parameter*> ps = m.parameters();
  std::uint32_t n_params = r.u32();
  if (n_params != ps.size())
    throw DataError("checkpoint: parameter count mismatch in " + path.string());
  for (Parameter* p : ps) {
    std::string name = r.str();
    std::uint64_t count = r.u64();
    if (name != p->name || count != p->size())
      throw DataError("checkpoint: parameter shape mismatch for '" + name + "' in " + path.string());
    for (std::size_t i = 0; i < count; ++i) p->values[i] = r.f64();
  }
  return m;
}

}  // namespace uap
