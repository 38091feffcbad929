#pragma once

// The self-attention transducer: encoder stack over acoustic frames,
// causal prediction network over labels, and the joint network.

#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "satkit/config.hpp"
#include "satkit/lattice.hpp"
#include "satkit/nnet.hpp"
#include "satkit/vocab.hpp"

namespace satkit {

struct ModelConfig {
  int d_in = 200;  // 40-dim filterbanks stacked 3+1+1
  AttentionConfig attn;
  int d_joint = 512;
  JointMode joint_mode = JointMode::kConcatTanh;
  ChunkSpec chunk = ChunkSpec::unbounded();
  std::vector<std::string> labels;  // vocabulary minus the reserved tokens

  Vocab vocab() const { return Vocab(labels); }
  int vocab_size() const { return Vocab::kNumReserved + static_cast<int>(labels.size()); }

  void validate() const {
    attn.validate();
    if (d_in < 1 || d_joint < 1) throw Error("model config: d_in and d_joint must be positive");
    if (attn.d_m % 2 != 0) throw Error("model config: d_m must be even for positional encoding");
    if (labels.empty()) throw Error("model config: vocabulary has no labels");
  }

  KeyValues to_kv() const {
    KeyValues kv;
    kv.set("d_in", std::to_string(d_in));
    kv.set("d_m", std::to_string(attn.d_m));
    kv.set("n_h", std::to_string(attn.n_h));
    kv.set("d_ff", std::to_string(attn.d_ff));
    kv.set("n_enc_blocks", std::to_string(attn.n_enc_blocks));
    kv.set("n_pred_blocks", std::to_string(attn.n_pred_blocks));
    std::ostringstream dr;
    dr.precision(17);
    dr << attn.dropout_rate;
    kv.set("dropout", dr.str());
    kv.set("d_joint", std::to_string(d_joint));
    kv.set("joint", to_string(joint_mode));
    kv.set("chunk_left", chunk_side_str(chunk.left));
    kv.set("chunk_right", chunk_side_str(chunk.right));
    std::string v;
    for (std::size_t i = 0; i < labels.size(); ++i) v += (i ? " " : "") + labels[i];
    kv.set("vocab", v);
    return kv;
  }

  static ModelConfig from_kv(const KeyValues& kv) {
    ModelConfig c;
    c.d_in = kv.get_int("d_in", c.d_in);
    c.attn.d_m = kv.get_int("d_m", c.attn.d_m);
    c.attn.n_h = kv.get_int("n_h", c.attn.n_h);
    c.attn.d_ff = kv.get_int("d_ff", c.attn.d_ff);
    c.attn.n_enc_blocks = kv.get_int("n_enc_blocks", c.attn.n_enc_blocks);
    c.attn.n_pred_blocks = kv.get_int("n_pred_blocks", c.attn.n_pred_blocks);
    c.attn.dropout_rate = kv.get_double("dropout", c.attn.dropout_rate);
    c.d_joint = kv.get_int("d_joint", c.d_joint);
    c.joint_mode = joint_mode_from_string(kv.get_or("joint", "concat"));
    c.chunk.left = parse_chunk_side(kv.get_or("chunk_left", "inf"));
    c.chunk.right = parse_chunk_side(kv.get_or("chunk_right", "inf"));
    if (kv.has("vocab")) {
      std::istringstream is(kv.get("vocab"));
      std::string t;
      while (is >> t) c.labels.push_back(t);
    } else if (kv.has("vocab_size")) {
      c.labels = synthetic_labels(kv.get_int("vocab_size", 0));
    }
    c.validate();
    return c;
  }

  static std::vector<std::string> synthetic_labels(int n) {
    std::vector<std::string> out;
    for (int i = 0; i < n; ++i) out.push_back("t" + std::to_string(i));
    return out;
  }

  friend bool operator==(const ModelConfig& a, const ModelConfig& b) { return a.to_kv().str() == b.to_kv().str(); }
};

template <class Real = double>
class SatModel {
 public:
  SatModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), vocab_(cfg.vocab()) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    const auto dm = static_cast<std::size_t>(cfg_.attn.d_m);
    encoder_ = EncoderStack<Real>::create(params_, static_cast<std::size_t>(cfg_.d_in), cfg_.attn, rng);
    predictor_ = PredictionStack<Real>::create(params_, static_cast<std::size_t>(vocab_.size()), Vocab::kSos,
                                               cfg_.attn, rng);
    joint_ = JointNetwork<Real>::create(params_, dm, static_cast<std::size_t>(cfg_.d_joint),
                                        static_cast<std::size_t>(vocab_.size()), cfg_.joint_mode, rng);
  }

  SatModel(const SatModel&) = delete;
  SatModel& operator=(const SatModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  const Vocab& vocab() const { return vocab_; }
  ParameterStore<Real>& params() { return params_; }
  const ParameterStore<Real>& params() const { return params_; }
  const JointNetwork<Real>& joint_network() const { return joint_; }
  std::size_t num_enc_blocks() const { return encoder_.blocks.size(); }

  // f rows for frames offset.. of a (possibly windowed) feature matrix.
  Tensor<Real> encode(const Tensor<Real>& features, const ChunkSpec& chunk, std::size_t offset = 0,
                      const ForwardOptions& opt = {}) const {
    return encoder_.forward(features, chunk, offset, opt);
  }
  Tensor<Real> encode(const Tensor<Real>& features, const ForwardOptions& opt = {}) const {
    return encoder_.forward(features, cfg_.chunk, 0, opt);
  }

  // g_0..g_U for labels l_0..l_{U-1}.
  Tensor<Real> predict(const std::vector<int>& labels, const ForwardOptions& opt = {}) const {
    for (int l : labels)
      if (l < 0 || l >= vocab_.size()) throw Error("predict: label id " + std::to_string(l) + " out of range");
    return predictor_.forward(labels, opt);
  }

  PosteriorLattice<Real> lattice(const Tensor<Real>& features, const std::vector<int>& targets,
                                 const ForwardOptions& opt = {}) const {
    return joint(encode(features, opt), predict(targets, opt), joint_, targets);
  }

  // Frames of context the encoder output at t depends on, each side.
  std::optional<std::size_t> receptive_left() const {
    if (!cfg_.chunk.left) return std::nullopt;
    return num_enc_blocks() * static_cast<std::size_t>(*cfg_.chunk.left);
  }
  std::optional<std::size_t> receptive_right() const {
    if (!cfg_.chunk.right) return std::nullopt;
    return num_enc_blocks() * static_cast<std::size_t>(*cfg_.chunk.right);
  }

  void copy_parameters_from(const SatModel& other) {
    if (!(other.cfg_ == cfg_)) throw Error("copy_parameters_from: model configs differ");
    auto& dst = params_.entries();
    const auto& src = other.params_.entries();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      auto d = dst[i].tensor.data();
      auto s = src[i].tensor.data();
      std::copy(s.begin(), s.end(), d.begin());
    }
  }

 private:
  ModelConfig cfg_;
  Vocab vocab_;
  ParameterStore<Real> params_;
  EncoderStack<Real> encoder_;
  PredictionStack<Real> predictor_;
  JointNetwork<Real> joint_;
};

}  // namespace satkit
